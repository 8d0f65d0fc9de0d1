//! Gradients and Hessians of the block conditional log-posteriors of `w_j`, `gamma` and `mu`.
//!
//! With `P` the `n x (J-1)` probability matrix and `R = Y - N P`:
//!
//! ```text
//! d(w_j)   = B^T R Gamma_j - omega_j Q w_j
//! H(w_j)   = -omega_j Q - B^T diag(c) B,   c_i = N_i [sum_l p_il G_lj^2 - (sum_l p_il G_lj)^2]
//! d(gamma) = E vec(R^T B W) - Q_gamma (gamma - m_gamma)
//! H(gamma) = -Q_gamma - E (sum_i N_i [eta_i eta_i^T (x) (diag(p_i) - p_i p_i^T)]) E^T
//! d(mu)    = R^T 1 - Q_mu (mu - m_mu)
//! H(mu)    = -Q_mu - sum_i N_i [diag(p_i) - p_i p_i^T]
//! ```
//!
//! where `eta_i = W^T b_i` and `E` selects the free entries of `vec(Gamma)` (column-wise
//! stacking). With column-wise `vec`, the latent-factor block is the outer factor of the
//! Kronecker product.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::linalg::gram;
use crate::model::{
    compute_logits, free_positions, log_one_plus_sum_exp, Dataset, Hyperpriors, ParamState,
};
use crate::spatial_basis::SpatialBasis;

/// Gradient and Hessian of a log density.
#[derive(Debug, Clone, PartialEq)]
pub struct GradHess {
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

impl GradHess {
    pub fn empty() -> Self {
        Self {
            grad: DVector::zeros(0),
            hess: DMatrix::zeros(0, 0),
        }
    }
}

pub(crate) fn probabilities(psi: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = psi.shape();
    let mut p = DMatrix::zeros(n, r);
    for i in 0..n {
        let lse = log_one_plus_sum_exp((0..r).map(|j| psi[(i, j)]));
        for j in 0..r {
            p[(i, j)] = (psi[(i, j)] - lse).exp();
        }
    }
    p
}

/// `Y - diag(N) P`.
pub(crate) fn residuals(data: &Dataset, probs: &DMatrix<f64>) -> DMatrix<f64> {
    let mut r = data.counts_f64().clone();
    for (j, mut col) in r.column_iter_mut().enumerate() {
        for (i, v) in col.iter_mut().enumerate() {
            *v -= data.trials()[i] as f64 * probs[(i, j)];
        }
    }
    r
}

/// Gradient/Hessian of the `w_j` conditional given probabilities at the current logits.
pub(crate) fn grad_hess_w_raw(
    basis: &DMatrix<f64>,
    q: &DMatrix<f64>,
    omega: f64,
    gamma_col: &DVector<f64>,
    w_j: &DVector<f64>,
    probs: &DMatrix<f64>,
    resid: &DMatrix<f64>,
    trials: &[u32],
) -> GradHess {
    let n = basis.nrows();
    let r_vec = resid * gamma_col;
    let grad = basis.tr_mul(&r_vec) - q * w_j * omega;

    let pg = probs * gamma_col;
    let g2 = gamma_col.map(|g| g * g);
    let pg2 = probs * &g2;
    let mut scaled = basis.clone();
    for i in 0..n {
        let c = trials[i] as f64 * (pg2[i] - pg[i] * pg[i]);
        let s = c.max(0.0).sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let mut hess = gram(&scaled);
    hess += q * omega;
    hess.neg_mut();
    GradHess { grad, hess }
}

/// Gradient/Hessian of the `gamma` conditional; `eta = B W` is `n x u`.
pub(crate) fn grad_hess_gamma_raw(
    eta: &DMatrix<f64>,
    probs: &DMatrix<f64>,
    resid: &DMatrix<f64>,
    trials: &[u32],
    gamma: &DVector<f64>,
    priors: &Hyperpriors,
) -> GradHess {
    let (n, u) = eta.shape();
    let r = probs.ncols();
    let pos = free_positions(r, u);
    let nf = pos.len();
    if nf == 0 {
        return GradHess::empty();
    }
    let g = resid.tr_mul(eta);
    let prior_pull = &priors.q_gamma * (gamma - &priors.m_gamma);
    let grad = DVector::from_fn(nf, |a, _| g[pos[a]] - prior_pull[a]);

    let mut info = DMatrix::zeros(nf, nf);
    for i in 0..n {
        let ni = trials[i] as f64;
        for a in 0..nf {
            let (la, ta) = pos[a];
            let pa = probs[(i, la)];
            let ea = eta[(i, ta)];
            for b in a..nf {
                let (lb, tb) = pos[b];
                let pb = probs[(i, lb)];
                let v = if la == lb { pa - pa * pb } else { -pa * pb };
                info[(a, b)] += ni * v * ea * eta[(i, tb)];
            }
        }
    }
    for a in 0..nf {
        for b in 0..a {
            info[(a, b)] = info[(b, a)];
        }
    }
    let hess = -(info + &priors.q_gamma);
    GradHess { grad, hess }
}

pub(crate) fn grad_hess_mu_raw(
    probs: &DMatrix<f64>,
    resid: &DMatrix<f64>,
    trials: &[u32],
    mu: &DVector<f64>,
    priors: &Hyperpriors,
) -> GradHess {
    let (n, r) = probs.shape();
    let col_sums = DVector::from_fn(r, |j, _| resid.column(j).sum());
    let grad = col_sums - &priors.q_mu * (mu - &priors.m_mu);
    let mut info = DMatrix::zeros(r, r);
    for i in 0..n {
        let ni = trials[i] as f64;
        for a in 0..r {
            let pa = probs[(i, a)];
            info[(a, a)] += ni * pa;
            for b in 0..r {
                info[(a, b)] -= ni * pa * probs[(i, b)];
            }
        }
    }
    let hess = -(info + &priors.q_mu);
    GradHess { grad, hess }
}

fn prepare(
    state: &ParamState,
    data: &Dataset,
    basis: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if data.n_classes() != state.n_classes() || basis.nrows() != data.n() {
        return invalid("dataset, basis and state dimensions disagree");
    }
    let psi = compute_logits(state, basis)?;
    let probs = probabilities(&psi);
    let resid = residuals(data, &probs);
    Ok((probs, resid))
}

/// Derivatives of the `w_j` conditional (factor index `j` is zero-based).
pub fn grad_hess_w(
    j: usize,
    state: &ParamState,
    data: &Dataset,
    basis: &DMatrix<f64>,
    spatial: &SpatialBasis,
) -> Result<GradHess> {
    if j >= state.u() {
        return invalid(format!("factor index {j} out of range for u={}", state.u()));
    }
    if spatial.k() != state.k() {
        return invalid("spatial basis and W disagree on the number of knots");
    }
    let (probs, resid) = prepare(state, data, basis)?;
    let gamma_col = state.gamma_matrix().column(j).clone_owned();
    Ok(grad_hess_w_raw(
        basis,
        spatial.q(),
        state.omega[j],
        &gamma_col,
        &state.w.column(j).clone_owned(),
        &probs,
        &resid,
        data.trials(),
    ))
}

pub fn grad_hess_gamma(
    state: &ParamState,
    data: &Dataset,
    basis: &DMatrix<f64>,
    priors: &Hyperpriors,
) -> Result<GradHess> {
    if priors.m_gamma.len() != state.gamma.len() {
        return invalid("gamma prior dimension disagrees with the state");
    }
    let (probs, resid) = prepare(state, data, basis)?;
    let eta = basis * &state.w;
    Ok(grad_hess_gamma_raw(
        &eta,
        &probs,
        &resid,
        data.trials(),
        &state.gamma,
        priors,
    ))
}

pub fn grad_hess_mu(
    state: &ParamState,
    data: &Dataset,
    basis: &DMatrix<f64>,
    priors: &Hyperpriors,
) -> Result<GradHess> {
    if priors.m_mu.len() != state.mu.len() {
        return invalid("mu prior dimension disagrees with the state");
    }
    let (probs, resid) = prepare(state, data, basis)?;
    Ok(grad_hess_mu_raw(
        &probs,
        &resid,
        data.trials(),
        &state.mu,
        priors,
    ))
}
