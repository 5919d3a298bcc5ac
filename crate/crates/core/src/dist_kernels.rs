//! Scalar distribution functions and analytic tail bounds.
//!
//! Everything here is a pure function of its arguments. Products of large and
//! small factors are assembled as sums of logarithms and exponentiated once at
//! the end; `θ^{ν/2}·e^{−θ/2}` overflows `f64` long before `ν` reaches the
//! cell sizes seen in practice.

use serde::{Deserialize, Serialize};

use crate::error::{CtfError, Result};
use crate::scalar::Real;

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const MAX_ITER: usize = 100_000;

/// Natural logarithm of the gamma function for `x > 0`.
pub fn ln_gamma<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    if x < half {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx).
        let pi = T::PI();
        return (pi / (pi * x).sin().abs()).ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::lit(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += T::lit(c) / (x + T::from_count(i));
    }
    let t = x + T::lit(LANCZOS_G) + half;
    half * (T::TAU()).ln() + (x + half) * t.ln() - t + acc.ln()
}

/// `ln B(a, b)`.
pub fn ln_beta<T: Real>(a: T, b: T) -> T {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lower and upper regularized incomplete gamma `(P(a, x), Q(a, x))`.
///
/// Each tail is computed directly (series for `x < a + 1`, Lentz continued
/// fraction otherwise) so the small one never suffers cancellation.
pub fn regularized_gamma<T: Real>(a: T, x: T) -> Result<(T, T)> {
    if !(a > T::zero()) {
        return Err(CtfError::domain(
            "regularized_gamma",
            "shape must be positive",
        ));
    }
    if !(x >= T::zero()) {
        return Err(CtfError::domain(
            "regularized_gamma",
            "x must be non-negative",
        ));
    }
    if x == T::zero() {
        return Ok((T::zero(), T::one()));
    }
    if x.is_infinite() {
        return Ok((T::one(), T::zero()));
    }
    let eps = T::epsilon();
    let log_front = a * x.ln() - x - ln_gamma(a);
    if x < a + T::one() {
        let mut ap = a;
        let mut del = T::one() / a;
        let mut sum = del;
        for _ in 0..MAX_ITER {
            ap += T::one();
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * eps {
                break;
            }
        }
        let p = (sum.ln() + log_front).exp().min(T::one());
        Ok((p, T::one() - p))
    } else {
        let tiny = T::min_positive_value() / eps;
        let mut b = x + T::one() - a;
        let mut c = T::one() / tiny;
        let mut d = T::one() / b;
        let mut h = d;
        for i in 1..MAX_ITER {
            let fi = T::from_count(i);
            let an = -fi * (fi - a);
            b += T::lit(2.0);
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = T::one() / d;
            let del = d * c;
            h *= del;
            if (del - T::one()).abs() < eps {
                break;
            }
        }
        let q = (h.ln() + log_front).exp().min(T::one());
        Ok((T::one() - q, q))
    }
}

fn check_dof(func: &'static str, k: u32) -> Result<()> {
    if k < 1 {
        return Err(CtfError::domain(
            func,
            "degrees of freedom must be at least 1",
        ));
    }
    Ok(())
}

/// CDF of the central chi-square distribution with `k` degrees of freedom.
pub fn chi2_cdf<T: Real>(x: T, k: u32) -> Result<T> {
    check_dof("chi2_cdf", k)?;
    if !(x >= T::zero()) {
        return Err(CtfError::domain("chi2_cdf", "x must be non-negative"));
    }
    let half = T::lit(0.5);
    Ok(regularized_gamma(T::from_count(k as usize) * half, x * half)?.0)
}

/// Survival function `1 − F_k(x)`, accurate deep into the upper tail.
///
/// Negative `x` is accepted and maps to 1, which is what tail terms of the
/// form `1 − F_1(θ − c)` need once their argument crosses zero.
pub fn chi2_sf<T: Real>(x: T, k: u32) -> Result<T> {
    check_dof("chi2_sf", k)?;
    if x.is_nan() {
        return Err(CtfError::domain("chi2_sf", "x is NaN"));
    }
    if x <= T::zero() {
        return Ok(T::one());
    }
    let half = T::lit(0.5);
    Ok(regularized_gamma(T::from_count(k as usize) * half, x * half)?.1)
}

/// Inverse of [`chi2_sf`]: the `x` with `1 − F_k(x) = p`, by bisection.
pub fn chi2_isf<T: Real>(p: T, k: u32) -> Result<T> {
    check_dof("chi2_isf", k)?;
    if !(p > T::zero() && p <= T::one()) {
        return Err(CtfError::domain(
            "chi2_isf",
            "probability must lie in (0, 1]",
        ));
    }
    if p == T::one() {
        return Ok(T::zero());
    }
    let mut lo = T::zero();
    let mut hi = T::from_count(k as usize).max(T::one());
    while chi2_sf(hi, k)? > p {
        lo = hi;
        hi *= T::lit(2.0);
        if hi.is_infinite() {
            return Err(CtfError::domain("chi2_isf", "quantile overflow"));
        }
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_sf(mid, k)? > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((lo + hi) * T::lit(0.5))
}

/// Upper-tail inequality `1 − F_k(z·k) ≤ (z·e^{1−z})^{k/2}` for `z > 1`.
pub fn chi2_tail_bound<T: Real>(z: T, k: u32) -> Result<T> {
    check_dof("chi2_tail_bound", k)?;
    if !(z > T::one()) {
        return Err(CtfError::domain("chi2_tail_bound", "requires z > 1"));
    }
    let dz = z - T::one();
    // ln z + 1 − z without cancellation near z = 1.
    let log_base = dz.ln_1p() - dz;
    Ok((T::from_count(k as usize) * T::lit(0.5) * log_base).exp())
}

fn beta_continued_fraction<T: Real>(x: T, a: T, b: T) -> T {
    let eps = T::epsilon();
    let tiny = T::min_positive_value() / eps;
    let one = T::one();
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = T::from_count(m);
        let m2 = m + m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let del = d * c;
        h *= del;
        if (del - one).abs() < eps {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `(I_x(a, b), 1 − I_x(a, b))`, each tail direct.
pub fn beta_tails<T: Real>(x: T, a: T, b: T) -> Result<(T, T)> {
    if !(a > T::zero() && b > T::zero()) {
        return Err(CtfError::domain(
            "beta_cdf",
            "shape parameters must be positive",
        ));
    }
    if !(x >= T::zero() && x <= T::one()) {
        return Err(CtfError::domain("beta_cdf", "x must lie in [0, 1]"));
    }
    if x == T::zero() {
        return Ok((T::zero(), T::one()));
    }
    if x == T::one() {
        return Ok((T::one(), T::zero()));
    }
    let log_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x < (a + T::one()) / (a + b + T::lit(2.0)) {
        let cdf = (log_front.exp() * beta_continued_fraction(x, a, b) / a).min(T::one());
        Ok((cdf, T::one() - cdf))
    } else {
        let y = T::one() - x;
        let sf = (log_front.exp() * beta_continued_fraction(y, b, a) / b).min(T::one());
        Ok((T::one() - sf, sf))
    }
}

/// CDF of the Beta(a, b) distribution.
pub fn beta_cdf<T: Real>(x: T, a: T, b: T) -> Result<T> {
    Ok(beta_tails(x, a, b)?.0)
}

/// Survival function of the Beta(a, b) distribution.
pub fn beta_sf<T: Real>(x: T, a: T, b: T) -> Result<T> {
    Ok(beta_tails(x, a, b)?.1)
}

/// Arguments of the noncentral chi-square lower-tail bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBoundInput<T> {
    /// Threshold on the score scale.
    pub theta: T,
    /// Noncentrality, `≥ 0`.
    pub rho: T,
    /// Degrees of freedom, `≥ 1`.
    pub nu: u32,
}

impl<T: Real> TailBoundInput<T> {
    pub fn new(theta: T, rho: T, nu: u32) -> Self {
        Self { theta, rho, nu }
    }
}

/// `P(Z ≤ θ) ≤ exp(−(ν+ρ−θ)² / (4(ν+2ρ)))` for `Z ~ χ²(ρ, ν)` and `θ ≤ ρ + ν`.
pub fn nc_chi2_lower_tail_bound<T: Real>(input: &TailBoundInput<T>) -> Result<T> {
    check_dof("nc_chi2_lower_tail_bound", input.nu)?;
    let TailBoundInput { theta, rho, nu } = *input;
    if !(rho >= T::zero()) {
        return Err(CtfError::domain(
            "nc_chi2_lower_tail_bound",
            "noncentrality must be non-negative",
        ));
    }
    let mean = rho + T::from_count(nu as usize);
    if !(theta <= mean) {
        return Err(CtfError::domain(
            "nc_chi2_lower_tail_bound",
            "bound requires theta <= rho + nu",
        ));
    }
    let gap = mean - theta;
    let scale = T::lit(4.0) * (T::from_count(nu as usize) + rho + rho);
    Ok((-(gap * gap) / scale).exp())
}

/// Natural log of the quadrant-bound constant
/// `C(ν) = e^{(ν−1)/2} / (√2 (ν−1)^{(ν−1)/2}) · Γ(ν/2 + 1/2) / Γ(ν/2 + 1)`,
/// with `0⁰ = 1` at `ν = 1`.
pub fn log_c<T: Real>(nu_g: u32) -> Result<T> {
    check_dof("log_C", nu_g)?;
    let nu = T::from_count(nu_g as usize);
    let half = T::lit(0.5);
    let m = nu - T::one();
    let power_term = if nu_g == 1 {
        T::zero()
    } else {
        m * half * m.ln()
    };
    Ok(
        m * half - half * T::LN_2() - power_term + ln_gamma(nu * half + half)
            - ln_gamma(nu * half + T::one()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn ln_gamma_exact_points() {
        assert_abs_diff_eq!(ln_gamma(1.0_f64), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(ln_gamma(2.0_f64), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(
            ln_gamma(0.5_f64),
            0.5 * std::f64::consts::PI.ln(),
            epsilon = 1e-14
        );
        // ln(9!) = ln 362880
        assert_abs_diff_eq!(ln_gamma(10.0_f64), 362_880.0_f64.ln(), epsilon = 1e-12);
        // mpmath.loggamma(1234.5)
        assert_abs_diff_eq!(ln_gamma(1234.5_f64), 7_550.550_901_077_895, epsilon = 1e-9);
        assert_abs_diff_eq!(ln_gamma(0.1_f64), 2.252_712_651_734_206, epsilon = 1e-13);
    }

    #[test]
    fn chi2_cdf_closed_forms() {
        assert_eq!(chi2_cdf(0.0_f64, 1).unwrap(), 0.0);
        assert_abs_diff_eq!(
            chi2_cdf(2.0 * 2.0_f64.ln(), 2).unwrap(),
            0.5,
            epsilon = 1e-14
        );
        for x in [0.1_f64, 1.0, 5.0, 30.0] {
            assert_abs_diff_eq!(
                chi2_cdf(x, 2).unwrap(),
                1.0 - (-x / 2.0).exp(),
                epsilon = 1e-14
            );
        }
    }

    #[test]
    fn chi2_rejects_bad_input() {
        assert!(chi2_cdf(-1.0_f64, 1).is_err());
        assert!(chi2_cdf(1.0_f64, 0).is_err());
        assert!(chi2_cdf(f64::NAN, 3).is_err());
        assert_eq!(chi2_sf(-3.0_f64, 1).unwrap(), 1.0);
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn chi2_sf_deep_tail() {
        // erfc(10), mpmath
        let sf: f64 = chi2_sf(200.0, 1).unwrap();
        assert!(
            (sf / 2.088_487_583_762_544_8e-45 - 1.0).abs() < 1e-9,
            "{sf}"
        );
    }

    #[test]
    fn isf_inverts_sf() {
        for k in [1_u32, 3, 10] {
            for p in [0.5_f64, 0.05, 1e-6, 1e-12] {
                let x = chi2_isf(p, k).unwrap();
                assert!((chi2_sf(x, k).unwrap() / p - 1.0).abs() < 1e-9);
            }
        }
        assert_abs_diff_eq!(
            chi2_isf(0.05_f64, 1).unwrap(),
            3.841_458_820_694_124,
            epsilon = 1e-9
        );
    }

    #[test]
    fn tail_bound_values() {
        assert_abs_diff_eq!(
            chi2_tail_bound(2.0_f64, 2).unwrap(),
            2.0 * (-1.0_f64).exp(),
            epsilon = 1e-14
        );
        let near_one: f64 = chi2_tail_bound(1.0 + 1e-9, 7).unwrap();
        assert_abs_diff_eq!(near_one, 1.0, epsilon = 1e-12);
        assert!(chi2_tail_bound(1.0_f64, 3).is_err());
        assert!(chi2_tail_bound(0.5_f64, 3).is_err());
    }

    #[test]
    fn beta_special_cases() {
        assert_abs_diff_eq!(beta_cdf(0.5_f64, 0.5, 0.5).unwrap(), 0.5, epsilon = 1e-14);
        for x in [0.0_f64, 0.125, 0.5, 0.9, 1.0] {
            assert_abs_diff_eq!(beta_cdf(x, 1.0, 1.0).unwrap(), x, epsilon = 1e-14);
        }
        assert!(beta_cdf(1.5_f64, 1.0, 1.0).is_err());
        assert!(beta_cdf(0.5_f64, 0.0, 1.0).is_err());
        assert!(beta_cdf(0.5_f64, 1.0, -2.0).is_err());
    }

    #[test]
    fn nc_bound_values() {
        let at_mean = TailBoundInput::new(11.0_f64, 10.0, 1);
        assert_abs_diff_eq!(nc_chi2_lower_tail_bound(&at_mean).unwrap(), 1.0);
        let origin = TailBoundInput::new(0.0_f64, 0.0, 1);
        assert_abs_diff_eq!(
            nc_chi2_lower_tail_bound(&origin).unwrap(),
            (-0.25_f64).exp(),
            epsilon = 1e-15
        );
        assert!(nc_chi2_lower_tail_bound(&TailBoundInput::new(11.5_f64, 10.0, 1)).is_err());
        assert!(nc_chi2_lower_tail_bound(&TailBoundInput::new(0.0_f64, -1.0, 1)).is_err());
    }

    #[test]
    fn log_c_values() {
        assert_abs_diff_eq!(
            log_c::<f64>(1).unwrap(),
            (2.0 / std::f64::consts::PI).sqrt().ln(),
            epsilon = 1e-13
        );
        // mpmath at 40 digits: -6.563761963456289577...
        assert_abs_diff_eq!(
            log_c::<f64>(10).unwrap(),
            -6.563_761_963_456_29,
            epsilon = 1e-10
        );
        assert!((log_c::<f64>(10).unwrap().exp() - 1.411e-3).abs() < 1e-6);
        // mpmath: -41051.70190988174701...
        let big = log_c::<f64>(10_000).unwrap();
        assert!((big + 41_051.701_909_881_75).abs() < 1e-6, "{big}");
        assert!(log_c::<f64>(0).is_err());
    }

    #[test]
    fn f32_instantiation_tracks_f64() {
        for &(x, k) in &[(0.5_f64, 1_u32), (3.0, 4), (12.0, 10)] {
            let lo = chi2_cdf(x as f32, k).unwrap() as f64;
            let hi = chi2_cdf(x, k).unwrap();
            assert!((lo - hi).abs() < 1e-5);
        }
        let b32 = beta_cdf(0.25_f32, 0.5, 5.5).unwrap() as f64;
        let b64 = beta_cdf(0.25_f64, 0.5, 5.5).unwrap();
        assert!((b32 - b64).abs() < 1e-5);
    }
}
