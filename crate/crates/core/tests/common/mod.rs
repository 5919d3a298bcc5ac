//! Independent reference computations shared by the integration tests.
//! Nothing here calls into the crate under test.
#![allow(dead_code, clippy::too_many_arguments, clippy::needless_range_loop)]

use std::f64::consts::PI;

/// Adaptive Simpson quadrature on `[a, b]`.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Γ(k/2) for a positive integer `k`, by the half-integer recursion.
pub fn gamma_half(k: u32) -> f64 {
    let mut g = if k.is_multiple_of(2) { 1.0 } else { PI.sqrt() };
    let mut x = if k.is_multiple_of(2) { 1.0 } else { 0.5 };
    while x < k as f64 / 2.0 - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

/// Density of χ²(k).
pub fn chi2_pdf(x: f64, k: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let h = k as f64 / 2.0;
    x.powf(h - 1.0) * (-x / 2.0).exp() / (2f64.powf(h) * gamma_half(k))
}

/// `P(χ²(k) ≤ x)` by quadrature. Uses the substitution `x = u²` so the
/// `k = 1` pole at the origin is integrable.
pub fn chi2_cdf_quad(x: f64, k: u32) -> f64 {
    let f = |u: f64| 2.0 * u * chi2_pdf(u * u, k);
    simpson(&f, 0.0, x.sqrt(), 1e-14)
}

/// `P(χ²(k) > x)` by quadrature over a long finite tail.
pub fn chi2_sf_quad(x: f64, k: u32) -> f64 {
    let scale = chi2_pdf(x, k);
    let f = |t: f64| chi2_pdf(t, k) / scale;
    let upper = x + 60.0 * (k as f64).sqrt() + 400.0;
    scale * simpson(&f, x, upper, 1e-13)
}

/// Regularized incomplete beta by quadrature with `x = u²` for `a = 1/2`.
pub fn beta_cdf_half_quad(x: f64, b: f64, ln_norm: f64) -> f64 {
    let f = |u: f64| 2.0 * (1.0 - u * u).powf(b - 1.0) * (-ln_norm).exp();
    simpson(&f, 0.0, x.sqrt(), 1e-15)
}

/// Asymptotic Kolmogorov-Smirnov p-value for the one-sample statistic.
pub fn ks_pvalue(sample: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    sample.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sample.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sample.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
    let mut p = 0.0;
    for j in 1..=200 {
        let j = j as f64;
        let sign = if j as u64 % 2 == 1 { 1.0 } else { -1.0 };
        p += 2.0 * sign * (-2.0 * j * j * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

/// Binomial standard error of a proportion estimated from `n` trials.
pub fn binom_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Regression sum of squares of `y` on the columns `xs` plus an intercept,
/// via centered normal equations and Gaussian elimination.
pub fn naive_excess_ss(y: &[f64], xs: &[Vec<f64>]) -> f64 {
    let n = y.len();
    let center = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter().map(|a| a - m).collect::<Vec<f64>>()
    };
    let yc = center(y);
    let cols: Vec<Vec<f64>> = xs.iter().map(|c| center(c)).collect();
    let p = cols.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut m = vec![vec![0.0; p + 1]; p];
    for i in 0..p {
        for j in 0..p {
            m[i][j] = dot(&cols[i], &cols[j]);
        }
        m[i][p] = dot(&cols[i], &yc);
    }
    for c in 0..p {
        let piv = (c..p)
            .max_by(|&a, &b| m[a][c].abs().partial_cmp(&m[b][c].abs()).unwrap())
            .unwrap();
        m.swap(c, piv);
        for r in 0..p {
            if r != c {
                let f = m[r][c] / m[c][c];
                for k in c..=p {
                    m[r][k] -= f * m[c][k];
                }
            }
        }
    }
    (0..p).map(|i| m[i][p] / m[i][i] * dot(&cols[i], &yc)).sum()
}
