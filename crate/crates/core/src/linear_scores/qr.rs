//! Householder QR with column pivoting, used to build orthonormal bases of
//! centered cell designs.

use ndarray::{Array2, ArrayView2, ShapeBuilder};

use crate::scalar::Real;

/// Relative rank tolerance on the pivoted `R` diagonal.
pub(crate) const RANK_TOL: f64 = 1e-10;

/// Outcome of a rank-revealing factorization.
pub(crate) enum Basis<T> {
    /// `n × p` matrix with orthonormal columns spanning the input columns.
    Full(Array2<T>),
    /// Numerical rank fell short of the column count.
    Deficient { rank: usize },
}

/// Orthonormal basis of the column space of `a` (`n × p`, `p ≤ n`).
///
/// The factorization pivots on the largest remaining column norm, so the
/// magnitudes `|R_jj|` are non-increasing; a column is declared dependent
/// when `|R_jj| ≤ RANK_TOL·|R_00|`.
pub(crate) fn orthonormal_basis<T: Real>(a: ArrayView2<'_, T>) -> Basis<T> {
    let (n, p) = a.dim();
    if p == 0 {
        return Basis::Full(Array2::zeros((n, 0)));
    }
    if p > n {
        return Basis::Deficient { rank: n };
    }
    // Column-major working copy so every column is a contiguous slice.
    let mut cols: Vec<Vec<T>> = (0..p).map(|c| a.column(c).to_vec()).collect();
    let mut reflectors: Vec<(Vec<T>, T)> = Vec::with_capacity(p);
    let tol = T::tolerance(RANK_TOL);
    let mut r00 = T::zero();

    for j in 0..p {
        let (best, best_sq) =
            (j..p)
                .map(|c| (c, sum_sq(&cols[c][j..])))
                .fold(
                    (j, T::neg_infinity()),
                    |acc, x| if x.1 > acc.1 { x } else { acc },
                );
        cols.swap(j, best);
        let norm = best_sq.sqrt();
        if j == 0 {
            r00 = norm;
            if !(r00 > T::zero()) {
                return Basis::Deficient { rank: 0 };
            }
        }
        if !(norm > tol * r00) {
            return Basis::Deficient { rank: j };
        }

        let mut v: Vec<T> = cols[j][j..].to_vec();
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm_sq = sum_sq(&v);
        let scale = if vnorm_sq > T::zero() {
            T::lit(2.0) / vnorm_sq
        } else {
            T::zero()
        };
        for col in cols.iter_mut().skip(j) {
            reflect(&v, scale, &mut col[j..]);
        }
        reflectors.push((v, scale));
    }

    // Q = H_0 H_1 ... H_{p-1} applied to the first p columns of the identity.
    let mut q_cols: Vec<Vec<T>> = (0..p)
        .map(|c| {
            let mut e = vec![T::zero(); n];
            e[c] = T::one();
            e
        })
        .collect();
    for (j, (v, scale)) in reflectors.iter().enumerate().rev() {
        for col in q_cols.iter_mut() {
            reflect(v, *scale, &mut col[j..]);
        }
    }
    let flat: Vec<T> = q_cols.into_iter().flatten().collect();
    Basis::Full(Array2::from_shape_vec((n, p).f(), flat).expect("shape matches"))
}

fn sum_sq<T: Real>(x: &[T]) -> T {
    x.iter().fold(T::zero(), |acc, &e| acc + e * e)
}

/// `x ← (I − scale·v vᵀ) x`.
fn reflect<T: Real>(v: &[T], scale: T, x: &mut [T]) {
    let dot = v
        .iter()
        .zip(x.iter())
        .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
    let f = dot * scale;
    for (xi, &vi) in x.iter_mut().zip(v) {
        *xi -= f * vi;
    }
}
