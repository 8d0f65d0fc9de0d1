//! Block conditionals of the Gibbs cycle.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use super::laplace::{accept, ConditionalTarget};
use crate::derivatives::{
    grad_hess_gamma_raw, grad_hess_mu_raw, grad_hess_w_raw, probabilities, residuals, GradHess,
};
use crate::error::{invalid, Result};
use crate::model::{
    add_row_offset, log_lik_kernel, logits_raw, unpack_gamma, Dataset, Hyperpriors, ParamState,
};
use crate::spatial_basis::{BasisCache, SpatialBasis};

/// `w_j | rest`: logits are `offset + (B w_j) Gamma_j^T`.
pub(crate) struct WTarget<'a> {
    pub data: &'a Dataset,
    pub basis: &'a DMatrix<f64>,
    pub q: &'a DMatrix<f64>,
    pub offset: DMatrix<f64>,
    pub gamma_col: DVector<f64>,
    pub omega: f64,
}

impl WTarget<'_> {
    fn logits(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let bw = self.basis * w;
        let mut psi = self.offset.clone();
        psi.ger(1.0, &bw, &self.gamma_col, 1.0);
        psi
    }
}

impl ConditionalTarget for WTarget<'_> {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let psi = self.logits(x);
        log_lik_kernel(&psi, self.data) - 0.5 * self.omega * x.dot(&(self.q * x))
    }

    fn grad_hess(&self, x: &DVector<f64>) -> GradHess {
        let probs = probabilities(&self.logits(x));
        let resid = residuals(self.data, &probs);
        grad_hess_w_raw(
            self.basis,
            self.q,
            self.omega,
            &self.gamma_col,
            x,
            &probs,
            &resid,
            self.data.trials(),
        )
    }
}

/// `gamma | rest` with `eta = B W`.
pub(crate) struct GammaTarget<'a> {
    pub data: &'a Dataset,
    pub eta: DMatrix<f64>,
    pub mu: &'a DVector<f64>,
    pub priors: &'a Hyperpriors,
}

impl GammaTarget<'_> {
    fn logits(&self, gamma: &DVector<f64>) -> DMatrix<f64> {
        let g = unpack_gamma(self.mu.len(), self.eta.ncols(), gamma.as_slice());
        let mut psi = &self.eta * g.transpose();
        add_row_offset(&mut psi, self.mu);
        psi
    }
}

impl ConditionalTarget for GammaTarget<'_> {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.priors.m_gamma;
        log_lik_kernel(&self.logits(x), self.data) - 0.5 * d.dot(&(&self.priors.q_gamma * &d))
    }

    fn grad_hess(&self, x: &DVector<f64>) -> GradHess {
        let probs = probabilities(&self.logits(x));
        let resid = residuals(self.data, &probs);
        grad_hess_gamma_raw(
            &self.eta,
            &probs,
            &resid,
            self.data.trials(),
            x,
            self.priors,
        )
    }
}

/// `mu | rest` with `offset = B W Gamma^T`.
pub(crate) struct MuTarget<'a> {
    pub data: &'a Dataset,
    pub offset: DMatrix<f64>,
    pub priors: &'a Hyperpriors,
}

impl MuTarget<'_> {
    fn logits(&self, mu: &DVector<f64>) -> DMatrix<f64> {
        let mut psi = self.offset.clone();
        add_row_offset(&mut psi, mu);
        psi
    }
}

impl ConditionalTarget for MuTarget<'_> {
    fn log_density(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.priors.m_mu;
        log_lik_kernel(&self.logits(x), self.data) - 0.5 * d.dot(&(&self.priors.q_mu * &d))
    }

    fn grad_hess(&self, x: &DVector<f64>) -> GradHess {
        let probs = probabilities(&self.logits(x));
        let resid = residuals(self.data, &probs);
        grad_hess_mu_raw(&probs, &resid, self.data.trials(), x, self.priors)
    }
}

pub(crate) fn w_target<'a>(
    j: usize,
    state: &ParamState,
    data: &'a Dataset,
    cache: &'a BasisCache,
) -> WTarget<'a> {
    let basis = cache.basis();
    let gamma_mat = state.gamma_matrix();
    let mut others = state.w.clone();
    others.column_mut(j).fill(0.0);
    let offset = logits_raw(&state.mu, &others, &gamma_mat, basis);
    WTarget {
        data,
        basis,
        q: cache.spatial().q(),
        offset,
        gamma_col: gamma_mat.column(j).clone_owned(),
        omega: state.omega[j],
    }
}

pub(crate) fn gamma_target<'a>(
    state: &'a ParamState,
    data: &'a Dataset,
    cache: &BasisCache,
    priors: &'a Hyperpriors,
) -> GammaTarget<'a> {
    GammaTarget {
        data,
        eta: cache.basis() * &state.w,
        mu: &state.mu,
        priors,
    }
}

pub(crate) fn mu_target<'a>(
    state: &ParamState,
    data: &'a Dataset,
    cache: &BasisCache,
    priors: &'a Hyperpriors,
) -> MuTarget<'a> {
    let eta = cache.basis() * &state.w;
    MuTarget {
        data,
        offset: &eta * state.gamma_matrix().transpose(),
        priors,
    }
}

/// Shape and rate of the Gamma full conditional of `omega_j`.
///
/// The shape adds `k/2` (the dimension of `w_j`); `shape_count` overrides that count.
pub fn omega_conditional(
    j: usize,
    state: &ParamState,
    spatial: &SpatialBasis,
    priors: &Hyperpriors,
    shape_count: Option<usize>,
) -> Result<(f64, f64)> {
    if j >= state.u() {
        return invalid(format!("factor index {j} out of range for u={}", state.u()));
    }
    let w = state.w.column(j).clone_owned();
    let count = shape_count.unwrap_or(state.k()) as f64;
    Ok((
        priors.alpha_omega[j] + 0.5 * count,
        priors.beta_omega[j] + 0.5 * spatial.quad_form(&w),
    ))
}

/// Exact draw of `omega_j | w_j, phi`.
pub fn sample_omega<R: Rng + ?Sized>(
    j: usize,
    state: &ParamState,
    spatial: &SpatialBasis,
    priors: &Hyperpriors,
    shape_count: Option<usize>,
    rng: &mut R,
) -> Result<f64> {
    let (shape, rate) = omega_conditional(j, state, spatial, priors, shape_count)?;
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| crate::Error::Sampler(format!("omega conditional: {e}")))?;
    Ok(g.sample(rng).max(f64::MIN_POSITIVE))
}

/// Log density of `log phi | rest` (the `+ log phi` term is the log-transform Jacobian).
pub fn phi_log_target(
    state: &ParamState,
    data: &Dataset,
    spatial: &SpatialBasis,
    basis: &DMatrix<f64>,
    priors: &Hyperpriors,
) -> f64 {
    let psi = logits_raw(&state.mu, &state.w, &state.gamma_matrix(), basis);
    let mut lp = log_lik_kernel(&psi, data);
    for j in 0..state.u() {
        let w = state.w.column(j).clone_owned();
        lp += 0.5 * spatial.log_det_q() - 0.5 * state.omega[j] * spatial.quad_form(&w);
    }
    lp + priors.log_prior_phi(spatial.phi()) + spatial.phi().ln()
}

/// Gaussian random walk on `log x`; `log_target` is the density of `log x`.
pub fn log_random_walk_step<R: Rng + ?Sized>(
    current: f64,
    current_log_target: f64,
    sd: f64,
    log_target: impl FnOnce(f64) -> f64,
    rng: &mut R,
) -> (f64, bool) {
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    let cand = (current.ln() + sd * z).exp();
    if !(cand.is_finite() && cand > 0.0) {
        return (current, false);
    }
    let lt = log_target(cand);
    if accept(lt - current_log_target, rng) {
        (cand, true)
    } else {
        (current, false)
    }
}

/// Random-walk MH update of `phi`; on acceptance `Q`, its factor and `B` are rebuilt.
pub fn sample_phi<R: Rng + ?Sized>(
    state: &mut ParamState,
    data: &Dataset,
    cache: &mut BasisCache,
    priors: &Hyperpriors,
    rw_sd: f64,
    rng: &mut R,
) -> bool {
    let current = phi_log_target(state, data, cache.spatial(), cache.basis(), priors);
    let mut scratch = None;
    let (phi, accepted) = log_random_walk_step(
        state.phi,
        current,
        rw_sd,
        |cand| match cache.evaluate(cand) {
            Ok((spatial, basis)) => {
                let mut s = state.clone();
                s.phi = cand;
                let lt = phi_log_target(&s, data, &spatial, &basis, priors);
                scratch = Some((spatial, basis));
                lt
            }
            Err(_) => f64::NEG_INFINITY,
        },
        rng,
    );
    if accepted {
        if let Some((spatial, basis)) = scratch {
            cache.install(spatial, basis);
            state.phi = phi;
        }
    }
    accepted
}
