//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::Cholesky::new(m.clone())?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| d.is_finite() && *d > 0.0) {
        Some(l)
    } else {
        None
    }
}

/// `log det(L L^T)` from the lower factor.
pub fn log_det_from_lower(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Solves `(L L^T) x = b`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(b)
        .expect("cholesky factor has a positive diagonal");
    l.tr_solve_lower_triangular(&y)
        .expect("cholesky factor has a positive diagonal")
}

pub fn standard_normal_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Draws from `MVN(mean, P^{-1})` given the lower Cholesky factor `L` of the precision `P`.
pub fn sample_mvn_precision<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    prec_lower: &DMatrix<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vector(mean.len(), rng);
    let x = prec_lower
        .tr_solve_lower_triangular(&z)
        .expect("cholesky factor has a positive diagonal");
    x + mean
}

/// Log density of `MVN(mean, P^{-1})` with `P = L L^T` and `log det P` precomputed.
pub fn mvn_log_density_precision(
    x: &DVector<f64>,
    mean: &DVector<f64>,
    prec_lower: &DMatrix<f64>,
    log_det_prec: f64,
) -> f64 {
    let diff = x - mean;
    let v = prec_lower.tr_mul(&diff);
    0.5 * log_det_prec - 0.5 * x.len() as f64 * LN_2PI - 0.5 * v.norm_squared()
}

/// `x^T A x`.
pub fn quad_form(a: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(a * x))
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `A^T A` through the blocked matrix product.
pub fn gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let at = a.transpose();
    let mut g = &at * a;
    symmetrize(&mut g);
    g
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}
