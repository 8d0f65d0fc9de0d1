//! Metropolis-within-Gibbs sampler.
//!
//! One cycle updates, in order, `w_1..w_u`, `gamma` and `mu` with Laplace-proposal MH
//! steps, draws each `omega_j` from its Gamma full conditional, and moves `phi` by a
//! random walk on `log phi`.

pub mod blocks;
pub mod laplace;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use blocks::{
    log_random_walk_step, omega_conditional, phi_log_target, sample_omega, sample_phi,
};
pub use laplace::{
    laplace_block_update, mh_laplace_update, newton_raphson_mode, AcceptRule, BlockOutcome,
    ConditionalTarget, LaplaceProposal, NewtonOptions,
};

use crate::error::{invalid, Error, Result};
use crate::model::{
    compute_logits, n_free_gamma, pointwise_log_lik_from_logits, Dataset, Hyperpriors,
    ParamState,
};
use crate::spatial_basis::{BasisCache, KnotSet};

const PHI_TARGET_ACCEPTANCE: f64 = 0.4;

/// Blocks held at their initial value instead of being sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixedBlocks {
    pub w: bool,
    pub gamma: bool,
    pub mu: bool,
    pub omega: bool,
    pub phi: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub nr_max_iters: usize,
    pub nr_grad_tol: f64,
    /// Random-walk standard deviation on `log phi`.
    pub phi_rw_sd: f64,
    pub seed: u64,
    /// Robbins-Monro tuning of `phi_rw_sd` during burn-in.
    pub adapt_phi: bool,
    /// Use `n/2` instead of `k/2` in the `omega` shape update.
    pub omega_shape_uses_n: bool,
    /// Accept every Laplace proposal on `w`, `gamma` and `mu` (nested Laplace approximation).
    pub nested_laplace: bool,
    pub fixed: FixedBlocks,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_burnin: 3_000,
            thin: 1,
            nr_max_iters: 50,
            nr_grad_tol: 1e-8,
            phi_rw_sd: 0.1,
            seed: 1,
            adapt_phi: true,
            omega_shape_uses_n: false,
            nested_laplace: false,
            fixed: FixedBlocks::default(),
        }
    }
}

impl SamplerConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.thin == 0 {
            out.push("thin must be at least 1".to_string());
        }
        if self.nr_max_iters == 0 {
            out.push("nr_max_iters must be positive".to_string());
        }
        if !(self.nr_grad_tol > 0.0 && self.nr_grad_tol.is_finite()) {
            out.push(format!("nr_grad_tol must be positive, got {}", self.nr_grad_tol));
        }
        if !(self.phi_rw_sd > 0.0 && self.phi_rw_sd.is_finite()) {
            out.push(format!("phi_rw_sd must be positive, got {}", self.phi_rw_sd));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            invalid(p.join("; "))
        }
    }

    pub fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            max_iters: self.nr_max_iters,
            grad_tol: self.nr_grad_tol,
        }
    }

    pub fn accept_rule(&self) -> AcceptRule {
        if self.nested_laplace {
            AcceptRule::AlwaysAccept
        } else {
            AcceptRule::Metropolis
        }
    }

    /// Number of retained draws.
    pub fn n_retained(&self) -> usize {
        self.n_samples.div_ceil(self.thin.max(1))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTally {
    pub accepted: u64,
    pub proposed: u64,
}

impl BlockTally {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn merge(&mut self, other: &BlockTally) {
        self.accepted += other.accepted;
        self.proposed += other.proposed;
    }
}

/// Accept/propose counts per block over the retained (post burn-in) cycles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceTally {
    pub w: Vec<BlockTally>,
    pub gamma: BlockTally,
    pub mu: BlockTally,
    pub omega: BlockTally,
    pub phi: BlockTally,
}

impl AcceptanceTally {
    pub fn new(u: usize) -> Self {
        Self {
            w: vec![BlockTally::default(); u],
            ..Default::default()
        }
    }

    /// Pooled acceptance over all `w_j` blocks.
    pub fn w_pooled(&self) -> BlockTally {
        let mut t = BlockTally::default();
        for b in &self.w {
            t.merge(b);
        }
        t
    }

    fn record(&mut self, r: &CycleReport) {
        for (t, a) in self.w.iter_mut().zip(&r.w) {
            if let Some(a) = a {
                t.record(*a);
            }
        }
        let singles = [
            (&mut self.gamma, r.gamma),
            (&mut self.mu, r.mu),
            (&mut self.omega, r.omega),
            (&mut self.phi, r.phi),
        ];
        for (t, a) in singles {
            if let Some(a) = a {
                t.record(a);
            }
        }
    }

    /// `(block name, tally)` rows in cycle order.
    pub fn rows(&self) -> Vec<(String, BlockTally)> {
        let mut out: Vec<_> = self
            .w
            .iter()
            .enumerate()
            .map(|(j, t)| (format!("w{}", j + 1), *t))
            .collect();
        out.push(("gamma".into(), self.gamma));
        out.push(("mu".into(), self.mu));
        out.push(("omega".into(), self.omega));
        out.push(("phi".into(), self.phi));
        out
    }
}

/// Which block a cycle is about to update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    W(usize),
    Gamma,
    Mu,
    Omega(usize),
    Phi,
}

/// Per-block outcome of one cycle; `None` for blocks that were not updated.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CycleReport {
    pub w: Vec<Option<bool>>,
    pub gamma: Option<bool>,
    pub mu: Option<bool>,
    pub omega: Option<bool>,
    pub phi: Option<bool>,
    pub newton_fallbacks: usize,
}

/// Mutable state of a running chain.
#[derive(Debug, Clone)]
pub struct GibbsState {
    pub params: ParamState,
    pub cache: BasisCache,
    pub phi_rw_sd: f64,
}

impl GibbsState {
    pub fn new(params: ParamState, knots: &KnotSet, data: &Dataset, phi_rw_sd: f64) -> Result<Self> {
        params.validate()?;
        if params.k() != knots.len() {
            return invalid(format!(
                "W has {} rows but there are {} knots",
                params.k(),
                knots.len()
            ));
        }
        if params.mu.len() != data.n_logits() {
            return invalid(format!(
                "state has {} classes, data has {}",
                params.n_classes(),
                data.n_classes()
            ));
        }
        let cache = BasisCache::new(knots, data.locations(), params.phi)?;
        Ok(Self {
            params,
            cache,
            phi_rw_sd,
        })
    }
}

/// One full Gibbs cycle.
pub fn gibbs_cycle<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &Dataset,
    priors: &Hyperpriors,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<CycleReport> {
    gibbs_cycle_with(state, data, priors, config, config.accept_rule(), rng, |_, _| {})
}

/// [`gibbs_cycle`] with an explicit acceptance rule and an observer called with the
/// current parameters just before each block is updated.
pub fn gibbs_cycle_with<R: Rng + ?Sized>(
    state: &mut GibbsState,
    data: &Dataset,
    priors: &Hyperpriors,
    config: &SamplerConfig,
    rule: AcceptRule,
    rng: &mut R,
    mut observe: impl FnMut(Block, &ParamState),
) -> Result<CycleReport> {
    let u = state.params.u();
    let opts = config.newton();
    let fixed = config.fixed;
    let mut report = CycleReport {
        w: vec![None; u],
        ..Default::default()
    };
    let block_err = |b: Block, e: Error, p: &ParamState| {
        Error::Sampler(format!(
            "{b:?} update failed: {e}; state mu={:?} omega={:?} gamma={:?} phi={}",
            p.mu.as_slice(),
            p.omega.as_slice(),
            p.gamma.as_slice(),
            p.phi
        ))
    };

    if !fixed.w {
        for j in 0..u {
            observe(Block::W(j), &state.params);
            let target = blocks::w_target(j, &state.params, data, &state.cache);
            let current = state.params.w.column(j).clone_owned();
            let out = laplace_block_update(&current, &target, &opts, rule, rng)
                .map_err(|e| block_err(Block::W(j), e, &state.params))?;
            report.newton_fallbacks += usize::from(out.fallback);
            report.w[j] = Some(out.accepted);
            state.params.w.set_column(j, &out.value);
        }
    }

    if !fixed.gamma && !state.params.gamma.is_empty() {
        observe(Block::Gamma, &state.params);
        let out = {
            let target = blocks::gamma_target(&state.params, data, &state.cache, priors);
            laplace_block_update(&state.params.gamma, &target, &opts, rule, rng)
                .map_err(|e| block_err(Block::Gamma, e, &state.params))?
        };
        report.newton_fallbacks += usize::from(out.fallback);
        report.gamma = Some(out.accepted);
        state.params.gamma = out.value;
    }

    if !fixed.mu {
        observe(Block::Mu, &state.params);
        let target = blocks::mu_target(&state.params, data, &state.cache, priors);
        let out = laplace_block_update(&state.params.mu, &target, &opts, rule, rng)
            .map_err(|e| block_err(Block::Mu, e, &state.params))?;
        report.newton_fallbacks += usize::from(out.fallback);
        report.mu = Some(out.accepted);
        state.params.mu = out.value;
    }

    if !fixed.omega {
        let count = config.omega_shape_uses_n.then_some(data.n());
        for j in 0..u {
            observe(Block::Omega(j), &state.params);
            let draw = sample_omega(j, &state.params, state.cache.spatial(), priors, count, rng)?;
            state.params.omega[j] = draw;
        }
        report.omega = Some(true);
    }

    if !fixed.phi {
        observe(Block::Phi, &state.params);
        let accepted = sample_phi(
            &mut state.params,
            data,
            &mut state.cache,
            priors,
            state.phi_rw_sd,
            rng,
        );
        report.phi = Some(accepted);
    }
    Ok(report)
}

/// Starting values: empirical log-odds for `mu` (+0.5 smoothing), `W = 0`, `gamma = 0`,
/// `omega` and `phi` at their prior means.
pub fn initial_state(data: &Dataset, k: usize, u: usize, priors: &Hyperpriors) -> Result<ParamState> {
    let jm1 = data.n_logits();
    if priors.u() != u || priors.m_mu.len() != jm1 {
        return invalid(format!(
            "priors are sized for J={}, u={} but the model has J={}, u={u}",
            priors.m_mu.len() + 1,
            priors.u(),
            jm1 + 1
        ));
    }
    let totals = data.class_totals();
    let control = totals[jm1] as f64 + 0.5;
    let mu = DVector::from_iterator(jm1, totals[..jm1].iter().map(|&t| ((t as f64 + 0.5) / control).ln()));
    let state = ParamState {
        mu,
        w: DMatrix::zeros(k, u),
        omega: DVector::from_iterator(
            u,
            priors.alpha_omega.iter().zip(priors.beta_omega.iter()).map(|(a, b)| a / b),
        ),
        gamma: DVector::zeros(n_free_gamma(jm1 + 1, u)),
        phi: priors.alpha_phi / priors.beta_phi,
    };
    state.validate()?;
    Ok(state)
}

/// Output of one chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainStore {
    /// Retained draws after burn-in and thinning.
    pub draws: Vec<ParamState>,
    pub acceptance: AcceptanceTally,
    /// `M x n`, entry `(m, i)` is `log p(y_i | theta_m)`.
    pub pointwise_loglik: DMatrix<f64>,
    pub seed: u64,
    pub config: SamplerConfig,
    pub priors: Hyperpriors,
    pub knots: KnotSet,
    pub class_labels: Vec<String>,
    pub u: usize,
    /// Random-walk scale on `log phi` after burn-in adaptation.
    pub phi_rw_sd_final: f64,
    pub newton_fallbacks: u64,
    /// Final state of the chain (including non-retained cycles), for warm restarts.
    pub last_state: ParamState,
    pub runtime_secs: f64,
}

impl ChainStore {
    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn total_cycles(&self) -> usize {
        self.config.n_burnin + self.config.n_samples
    }

    pub fn seconds_per_cycle(&self) -> f64 {
        let c = self.total_cycles();
        if c == 0 {
            0.0
        } else {
            self.runtime_secs / c as f64
        }
    }

    /// Checks shapes and invariants shared by every draw.
    pub fn validate(&self) -> Result<()> {
        if self.pointwise_loglik.nrows() != self.draws.len() {
            return invalid(format!(
                "pointwise log-likelihood has {} rows for {} draws",
                self.pointwise_loglik.nrows(),
                self.draws.len()
            ));
        }
        for (m, d) in self.draws.iter().enumerate() {
            d.validate()
                .map_err(|e| Error::Format(format!("draw {m}: {e}")))?;
            if d.u() != self.u || d.k() != self.knots.len() || d.n_classes() != self.n_classes() {
                return Err(Error::Format(format!("draw {m} has inconsistent dimensions")));
            }
        }
        Ok(())
    }
}

/// Runs a chain from [`initial_state`].
pub fn run_chain(
    data: &Dataset,
    knots: &KnotSet,
    priors: &Hyperpriors,
    u: usize,
    config: &SamplerConfig,
) -> Result<ChainStore> {
    let init = initial_state(data, knots.len(), u, priors)?;
    run_chain_from(init, data, knots, priors, config)
}

/// Runs a chain from a given starting state (also used to resume from a saved chain).
pub fn run_chain_from(
    init: ParamState,
    data: &Dataset,
    knots: &KnotSet,
    priors: &Hyperpriors,
    config: &SamplerConfig,
) -> Result<ChainStore> {
    config.validate()?;
    let u = init.u();
    if priors.u() != u || priors.m_mu.len() != init.mu.len() {
        return invalid("priors do not match the dimensions of the starting state");
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut gs = GibbsState::new(init, knots, data, config.phi_rw_sd)?;
    let mut acceptance = AcceptanceTally::new(u);
    let mut fallbacks = 0u64;
    let n_keep = config.n_retained();
    let mut draws = Vec::with_capacity(n_keep);
    let mut lpd = DMatrix::zeros(n_keep, data.n());

    for c in 0..config.n_burnin {
        let r = gibbs_cycle(&mut gs, data, priors, config, &mut rng)
            .map_err(|e| Error::Sampler(format!("burn-in cycle {c}: {e}")))?;
        fallbacks += r.newton_fallbacks as u64;
        if config.adapt_phi {
            if let Some(a) = r.phi {
                let step = (c as f64 + 1.0).powf(-0.6);
                let target = if a { 1.0 } else { 0.0 } - PHI_TARGET_ACCEPTANCE;
                gs.phi_rw_sd = (gs.phi_rw_sd.ln() + step * target).exp().clamp(1e-4, 5.0);
            }
        }
    }
    for c in 0..config.n_samples {
        let r = gibbs_cycle(&mut gs, data, priors, config, &mut rng)
            .map_err(|e| Error::Sampler(format!("sampling cycle {c}: {e}")))?;
        fallbacks += r.newton_fallbacks as u64;
        acceptance.record(&r);
        if c % config.thin == 0 {
            let psi = compute_logits(&gs.params, gs.cache.basis())?;
            lpd.set_row(draws.len(), &pointwise_log_lik_from_logits(&psi, data).transpose());
            draws.push(gs.params.clone());
        }
    }
    if fallbacks > 0 {
        log::info!("{fallbacks} block updates used the state-centred fallback proposal");
    }
    Ok(ChainStore {
        draws,
        acceptance,
        pointwise_loglik: lpd,
        seed: config.seed,
        config: config.clone(),
        priors: priors.clone(),
        knots: knots.clone(),
        class_labels: data.class_labels().to_vec(),
        u,
        phi_rw_sd_final: gs.phi_rw_sd,
        newton_fallbacks: fallbacks,
        last_state: gs.params,
        runtime_secs: started.elapsed().as_secs_f64(),
    })
}

/// Seed of chain `index` derived from a master seed (SplitMix64).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent chains in parallel, seeded by [`derive_seed`].
pub fn run_chains(
    data: &Dataset,
    knots: &KnotSet,
    priors: &Hyperpriors,
    u: usize,
    config: &SamplerConfig,
    n_chains: usize,
) -> Result<Vec<ChainStore>> {
    (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut cfg = config.clone();
            cfg.seed = derive_seed(config.seed, c as u64);
            run_chain(data, knots, priors, u, &cfg)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::blocks::{gamma_target, mu_target, w_target};
    use super::*;
    use crate::derivatives::{grad_hess_gamma, grad_hess_mu, grad_hess_w};
    use crate::diagnostics::{effective_sample_size, mean, variance};
    use crate::model::log_posterior_unnormalized;
    use crate::model::test_support::{random_instance, Instance};

    fn cache_for(inst: &Instance) -> BasisCache {
        BasisCache::new(inst.spatial.knots(), inst.data.locations(), inst.state.phi).unwrap()
    }

    fn log_post(inst: &Instance, s: &ParamState) -> f64 {
        log_posterior_unnormalized(s, &inst.data, &inst.spatial, &inst.basis, &inst.priors).unwrap()
    }

    fn perturbed(x: &DVector<f64>, seed: u64) -> DVector<f64> {
        DVector::from_fn(x.len(), |i, _| x[i] + 0.3 * ((i as f64 + 1.0) * (seed as f64 + 0.7)).sin())
    }

    #[test]
    fn block_targets_are_full_conditionals() {
        let inst = random_instance(5, 25, 6, 4, 2);
        let cache = cache_for(&inst);
        let s0 = &inst.state;
        for j in 0..2 {
            let t = w_target(j, s0, &inst.data, &cache);
            let x = perturbed(&s0.w.column(j).clone_owned(), j as u64);
            let mut s1 = s0.clone();
            s1.w.set_column(j, &x);
            let lhs = t.log_density(&x) - t.log_density(&s0.w.column(j).clone_owned());
            assert!((lhs - (log_post(&inst, &s1) - log_post(&inst, s0))).abs() < 1e-9);
            let gh = t.grad_hess(&x);
            let want = grad_hess_w(j, &s1, &inst.data, &inst.basis, &inst.spatial).unwrap();
            assert!((gh.grad - want.grad).amax() < 1e-10);
        }
        let t = gamma_target(s0, &inst.data, &cache, &inst.priors);
        let x = perturbed(&s0.gamma, 3);
        let s1 = ParamState { gamma: x.clone(), ..s0.clone() };
        let lhs = t.log_density(&x) - t.log_density(&s0.gamma);
        assert!((lhs - (log_post(&inst, &s1) - log_post(&inst, s0))).abs() < 1e-9);
        let want = grad_hess_gamma(&s1, &inst.data, &inst.basis, &inst.priors).unwrap();
        assert!((t.grad_hess(&x).hess - want.hess).amax() < 1e-10);

        let t = mu_target(s0, &inst.data, &cache, &inst.priors);
        let x = perturbed(&s0.mu, 4);
        let s1 = ParamState { mu: x.clone(), ..s0.clone() };
        let lhs = t.log_density(&x) - t.log_density(&s0.mu);
        assert!((lhs - (log_post(&inst, &s1) - log_post(&inst, s0))).abs() < 1e-9);
        let want = grad_hess_mu(&s1, &inst.data, &inst.basis, &inst.priors).unwrap();
        assert!((t.grad_hess(&x).grad - want.grad).amax() < 1e-10);
    }

    /// Coordinate-wise golden-section ascent using only the log density.
    fn coordinate_ascent(t: &dyn ConditionalTarget, init: &DVector<f64>) -> DVector<f64> {
        let gr = (5f64.sqrt() - 1.0) / 2.0;
        let mut x = init.clone();
        for _ in 0..200 {
            let before = x.clone();
            for i in 0..x.len() {
                let (mut a, mut b) = (x[i] - 5.0, x[i] + 5.0);
                let f = |v: f64, x: &DVector<f64>| {
                    let mut y = x.clone();
                    y[i] = v;
                    t.log_density(&y)
                };
                while b - a > 1e-12 {
                    let c = b - gr * (b - a);
                    let d = a + gr * (b - a);
                    if f(c, &x) > f(d, &x) {
                        b = d;
                    } else {
                        a = c;
                    }
                }
                x[i] = 0.5 * (a + b);
            }
            if (&x - before).amax() < 1e-11 {
                break;
            }
        }
        x
    }

    #[test]
    fn w_mode_matches_independent_optimizer() {
        let inst = random_instance(21, 30, 4, 4, 2);
        let cache = cache_for(&inst);
        for j in 0..2 {
            let t = w_target(j, &inst.state, &inst.data, &cache);
            let init = DVector::zeros(4);
            let prop = newton_raphson_mode(&init, &t, &NewtonOptions::default()).unwrap();
            assert!(prop.converged);
            let oracle = coordinate_ascent(&t, &init);
            assert!((&prop.mode - &oracle).amax() < 1e-6, "{} vs {}", prop.mode, oracle);
        }
    }

    #[test]
    fn phi_target_is_conditional_plus_jacobian() {
        let inst = random_instance(6, 20, 5, 3, 1);
        let cache = cache_for(&inst);
        let s0 = &inst.state;
        let phi1 = s0.phi * 1.3;
        let (sp1, b1) = cache.evaluate(phi1).unwrap();
        let s1 = ParamState { phi: phi1, ..s0.clone() };
        let lhs = phi_log_target(&s1, &inst.data, &sp1, &b1, &inst.priors)
            - phi_log_target(s0, &inst.data, &inst.spatial, &inst.basis, &inst.priors);
        let post1 = log_posterior_unnormalized(&s1, &inst.data, &sp1, &b1, &inst.priors).unwrap();
        let want = post1 - log_post(&inst, s0) + phi1.ln() - s0.phi.ln();
        assert!((lhs - want).abs() < 1e-9, "{lhs} vs {want}");
    }

    #[test]
    fn omega_conditional_examples() {
        let inst = random_instance(7, 10, 9, 3, 1);
        let priors = Hyperpriors::new(
            inst.priors.m_mu.clone(),
            inst.priors.q_mu.clone(),
            inst.priors.m_gamma.clone(),
            inst.priors.q_gamma.clone(),
            DVector::from_element(1, 4.0),
            DVector::from_element(1, 4.0),
            4.0,
            20.0,
        )
        .unwrap();
        let mut s = inst.state.clone();
        s.w.fill(0.0);
        assert_eq!(omega_conditional(0, &s, &inst.spatial, &priors, None).unwrap(), (8.5, 4.0));
        // scale w so that w^T Q w = 2
        let w = inst.state.w.column(0).clone_owned();
        let scaled = &w * (2.0 / inst.spatial.quad_form(&w)).sqrt();
        s.w.set_column(0, &scaled);
        let (a, b) = omega_conditional(0, &s, &inst.spatial, &priors, None).unwrap();
        assert_eq!(a, 8.5);
        assert!((b - 5.0).abs() < 1e-12);
        let (a_n, _) = omega_conditional(0, &s, &inst.spatial, &priors, Some(10)).unwrap();
        assert_eq!(a_n, 9.0);
        assert!(omega_conditional(1, &s, &inst.spatial, &priors, None).is_err());
    }

    #[test]
    fn zero_step_and_flat_target_always_accept() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let (x, a) = log_random_walk_step(0.3, -2.0, 0.0, |_| -2.0, &mut rng);
            assert!(a);
            assert_eq!(x, 0.3);
        }
        let mut x = 1.0;
        let mut accepted = 0;
        for _ in 0..1000 {
            let (nx, a) = log_random_walk_step(x, 0.0, 0.5, |_| 0.0, &mut rng);
            x = nx;
            accepted += usize::from(a);
        }
        assert_eq!(accepted, 1000);
    }

    fn config(n_samples: usize, n_burnin: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_samples,
            n_burnin,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn empty_run_echoes_config() {
        let inst = random_instance(8, 10, 4, 3, 1);
        let cfg = config(0, 0, 9);
        let ch = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 1, &cfg).unwrap();
        assert_eq!(ch.n_draws(), 0);
        assert_eq!(ch.pointwise_loglik.shape(), (0, 10));
        assert_eq!(ch.config, cfg);
        assert_eq!(ch.seed, 9);
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let inst = random_instance(9, 15, 4, 3, 2);
        let cfg = config(30, 10, 4);
        let a = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 2, &cfg).unwrap();
        let b = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 2, &cfg).unwrap();
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.acceptance, b.acceptance);
        assert_eq!(a.pointwise_loglik, b.pointwise_loglik);
        let c = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 2, &config(30, 10, 5)).unwrap();
        assert_ne!(a.draws, c.draws);
    }

    #[test]
    fn smallest_model_runs() {
        let inst = random_instance(10, 12, 3, 2, 1);
        let ch = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 1, &config(20, 5, 1)).unwrap();
        assert_eq!(ch.n_draws(), 20);
        assert!(ch.draws.iter().all(|d| d.gamma.is_empty()));
        assert_eq!(ch.acceptance.gamma.proposed, 0);
        ch.validate().unwrap();
    }

    #[test]
    fn thinning_and_tallies() {
        let inst = random_instance(11, 15, 4, 3, 1);
        let cfg = SamplerConfig { thin: 3, ..config(10, 2, 2) };
        let ch = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 1, &cfg).unwrap();
        assert_eq!(ch.n_draws(), 4);
        assert_eq!(ch.pointwise_loglik.nrows(), 4);
        for (_, t) in ch.acceptance.rows() {
            assert_eq!(t.proposed, 10);
            assert!((0.0..=1.0).contains(&t.rate()));
        }
        assert_eq!(ch.acceptance.omega.accepted, 10);
    }

    #[test]
    fn pointwise_loglik_matches_draws() {
        let inst = random_instance(12, 15, 4, 3, 2);
        let ch = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 2, &config(5, 2, 3)).unwrap();
        for (m, d) in ch.draws.iter().enumerate() {
            let basis = crate::spatial_basis::build_basis(inst.data.locations(), inst.spatial.knots(), d.phi).unwrap();
            let want = crate::model::pointwise_log_likelihood(d, &inst.data, &basis).unwrap();
            assert!((ch.pointwise_loglik.row(m).transpose() - want).amax() < 1e-10);
        }
    }

    #[test]
    fn initial_state_follows_empirical_log_odds() {
        let inst = random_instance(13, 20, 4, 3, 1);
        let s = initial_state(&inst.data, 4, 1, &inst.priors).unwrap();
        let tot = inst.data.class_totals();
        for j in 0..2 {
            let want = ((tot[j] as f64 + 0.5) / (tot[2] as f64 + 0.5)).ln();
            assert!((s.mu[j] - want).abs() < 1e-14);
        }
        assert!(s.w.iter().all(|&v| v == 0.0));
        assert!(s.gamma.iter().all(|&v| v == 0.0));
        assert_eq!(s.omega[0], 3.0 / 2.0);
        assert_eq!(s.phi, 4.0 / 10.0);
    }

    #[test]
    fn blocks_condition_on_fresh_values() {
        let inst = random_instance(14, 15, 4, 3, 2);
        let cfg = config(1, 0, 1);
        let mut gs = GibbsState::new(inst.state.clone(), inst.spatial.knots(), &inst.data, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen: Vec<(Block, ParamState)> = Vec::new();
        gibbs_cycle_with(&mut gs, &inst.data, &inst.priors, &cfg, AcceptRule::UnitProbability, &mut rng, |b, s| {
            seen.push((b, s.clone()))
        })
        .unwrap();
        let fin = &gs.params;
        let order: Vec<Block> = seen.iter().map(|(b, _)| *b).collect();
        assert_eq!(
            order,
            vec![Block::W(0), Block::W(1), Block::Gamma, Block::Mu, Block::Omega(0), Block::Omega(1), Block::Phi]
        );
        // every proposal accepted, so each block sees all earlier blocks' new values
        let at = |b: Block| &seen.iter().find(|(x, _)| *x == b).unwrap().1;
        assert_eq!(at(Block::W(1)).w.column(0), fin.w.column(0));
        assert_ne!(at(Block::W(1)).w.column(0), inst.state.w.column(0));
        assert_eq!(at(Block::Gamma).w, fin.w);
        assert_eq!(at(Block::Mu).gamma, fin.gamma);
        assert_eq!(at(Block::Omega(0)).mu, fin.mu);
        assert_eq!(at(Block::Omega(1)).omega[0], fin.omega[0]);
        assert_eq!(at(Block::Phi).omega, fin.omega);
    }

    #[test]
    fn nested_variant_equals_exact_sampler_with_unit_acceptance() {
        let inst = random_instance(15, 15, 4, 3, 2);
        let cfg = config(1, 0, 1);
        let run = |rule: AcceptRule| {
            let mut gs = GibbsState::new(inst.state.clone(), inst.spatial.knots(), &inst.data, 0.1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..5 {
                gibbs_cycle_with(&mut gs, &inst.data, &inst.priors, &cfg, rule, &mut rng, |_, _| {}).unwrap();
            }
            gs.params
        };
        assert_eq!(run(AcceptRule::AlwaysAccept), run(AcceptRule::UnitProbability));
        assert_ne!(run(AcceptRule::AlwaysAccept), run(AcceptRule::Metropolis));
        let nested = SamplerConfig { nested_laplace: true, ..cfg };
        assert_eq!(nested.accept_rule(), AcceptRule::AlwaysAccept);
    }

    /// Mean and Monte Carlo standard error from an autocorrelated trace.
    fn mc_mean(x: &[f64]) -> (f64, f64) {
        (mean(x), (variance(x) / effective_sample_size(x)).sqrt())
    }

    #[test]
    fn omega_chain_matches_conjugate_moments() {
        let inst = random_instance(16, 10, 6, 3, 1);
        let cfg = SamplerConfig {
            fixed: FixedBlocks { w: true, gamma: true, mu: true, omega: false, phi: true },
            ..config(20_000, 0, 6)
        };
        let ch = run_chain_from(inst.state.clone(), &inst.data, inst.spatial.knots(), &inst.priors, &cfg).unwrap();
        let (a, b) = omega_conditional(0, &inst.state, &inst.spatial, &inst.priors, None).unwrap();
        let x: Vec<f64> = ch.draws.iter().map(|d| d.omega[0]).collect();
        let (m, se) = mc_mean(&x);
        assert!((m - a / b).abs() < 3.0 * se, "{m} vs {}", a / b);
    }

    #[test]
    fn mu_chain_matches_quadrature() {
        let inst = random_instance(17, 30, 4, 3, 1);
        let cfg = SamplerConfig {
            fixed: FixedBlocks { w: true, gamma: true, mu: false, omega: true, phi: true },
            ..config(20_000, 200, 7)
        };
        let ch = run_chain_from(inst.state.clone(), &inst.data, inst.spatial.knots(), &inst.priors, &cfg).unwrap();
        let cache = cache_for(&inst);
        let t = mu_target(&inst.state, &inst.data, &cache, &inst.priors);
        let prop = newton_raphson_mode(&inst.state.mu, &t, &NewtonOptions::default()).unwrap();
        let sd: Vec<f64> = {
            let cov = (&prop.hess_chol * prop.hess_chol.transpose()).try_inverse().unwrap();
            (0..2).map(|i| cov[(i, i)].sqrt()).collect()
        };
        let g = 241;
        let f0 = t.log_density(&prop.mode);
        let (mut z, mut m0, mut m1) = (0.0, 0.0, 0.0);
        for a in 0..g {
            for b in 0..g {
                let x = DVector::from_vec(vec![
                    prop.mode[0] + sd[0] * (-8.0 + 16.0 * a as f64 / (g - 1) as f64),
                    prop.mode[1] + sd[1] * (-8.0 + 16.0 * b as f64 / (g - 1) as f64),
                ]);
                let p = (t.log_density(&x) - f0).exp();
                z += p;
                m0 += p * x[0];
                m1 += p * x[1];
            }
        }
        for (j, want) in [m0 / z, m1 / z].into_iter().enumerate() {
            let x: Vec<f64> = ch.draws.iter().map(|d| d.mu[j]).collect();
            let (m, se) = mc_mean(&x);
            assert!((m - want).abs() < 3.0 * se, "mu[{j}]: {m} vs {want} (se {se})");
        }
    }

    #[test]
    fn phi_chain_matches_quadrature() {
        let inst = random_instance(18, 20, 4, 3, 1);
        let cfg = SamplerConfig {
            fixed: FixedBlocks { w: true, gamma: true, mu: true, omega: true, phi: false },
            phi_rw_sd: 0.5,
            ..config(20_000, 500, 8)
        };
        let ch = run_chain_from(inst.state.clone(), &inst.data, inst.spatial.knots(), &inst.priors, &cfg).unwrap();
        let cache = cache_for(&inst);
        let (mut z, mut m1) = (0.0, 0.0);
        let mut logs = Vec::new();
        let g = 6000;
        for i in 1..=g {
            let phi = 3.0 * i as f64 / g as f64;
            let Ok((sp, b)) = cache.evaluate(phi) else { continue };
            let s = ParamState { phi, ..inst.state.clone() };
            // density in phi: drop the log-transform Jacobian
            logs.push((phi, phi_log_target(&s, &inst.data, &sp, &b, &inst.priors) - phi.ln()));
        }
        let top = logs.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
        for (phi, l) in logs {
            let p = (l - top).exp();
            z += p;
            m1 += p * phi;
        }
        let want = m1 / z;
        let x: Vec<f64> = ch.draws.iter().map(|d| d.phi).collect();
        let (m, se) = mc_mean(&x);
        assert!((m - want).abs() < 3.0 * se, "{m} vs {want} (se {se})");
    }

    #[test]
    fn chains_in_parallel_use_distinct_seeds() {
        let inst = random_instance(19, 10, 3, 3, 1);
        let chains = run_chains(&inst.data, inst.spatial.knots(), &inst.priors, 1, &config(5, 0, 3), 3).unwrap();
        assert_eq!(chains.len(), 3);
        assert_ne!(chains[0].seed, chains[1].seed);
        let again = run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 1, &config(5, 0, chains[1].seed)).unwrap();
        assert_eq!(again.draws, chains[1].draws);
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = SamplerConfig { thin: 0, phi_rw_sd: -1.0, ..Default::default() };
        assert_eq!(cfg.problems().len(), 2);
        let inst = random_instance(20, 10, 3, 3, 1);
        assert!(run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 1, &cfg).is_err());
        assert!(run_chain(&inst.data, inst.spatial.knots(), &inst.priors, 2, &config(1, 0, 1)).is_err());
    }
}
