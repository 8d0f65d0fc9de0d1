//! Newton-Raphson mode finding and Laplace-approximation Metropolis-Hastings steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::derivatives::GradHess;
use crate::error::{Error, Result};
use crate::linalg::{
    chol_solve, cholesky_lower, log_det_from_lower, max_abs, mvn_log_density_precision,
    sample_mvn_precision,
};

const FALLBACK_RIDGE: f64 = 1e-8;
const MAX_HALVINGS: usize = 10;

/// A block conditional density known up to a constant.
pub trait ConditionalTarget {
    fn log_density(&self, x: &DVector<f64>) -> f64;
    fn grad_hess(&self, x: &DVector<f64>) -> GradHess;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-8,
        }
    }
}

/// Gaussian `MVN(mode, (-H)^{-1})` built at a Newton-Raphson mode.
#[derive(Debug, Clone)]
pub struct LaplaceProposal {
    pub mode: DVector<f64>,
    /// Lower Cholesky factor of `-H(mode)`.
    pub hess_chol: DMatrix<f64>,
    pub log_det_neg_hess: f64,
    pub nr_iters: usize,
    pub converged: bool,
}

impl LaplaceProposal {
    /// Gaussian centred at `center` with precision `neg_hess`, ridged until it factorizes.
    pub fn centered(center: DVector<f64>, neg_hess: &DMatrix<f64>) -> Result<Self> {
        let l = ridged_factor(neg_hess)?;
        Ok(Self {
            log_det_neg_hess: log_det_from_lower(&l),
            mode: center,
            hess_chol: l,
            nr_iters: 0,
            converged: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.mode.len()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        mvn_log_density_precision(x, &self.mode, &self.hess_chol, self.log_det_neg_hess)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        sample_mvn_precision(&self.mode, &self.hess_chol, rng)
    }
}

fn ridged_factor(neg_hess: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(l) = cholesky_lower(neg_hess) {
        return Ok(l);
    }
    let scale = neg_hess
        .diagonal()
        .iter()
        .fold(1.0_f64, |a, d| a.max(d.abs()));
    let mut ridge = FALLBACK_RIDGE * scale;
    for _ in 0..40 {
        let mut m = neg_hess.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += ridge;
        }
        if let Some(l) = cholesky_lower(&m) {
            return Ok(l);
        }
        ridge *= 10.0;
    }
    Err(Error::SingularMatrix(
        "negative Hessian could not be regularized to positive definite".into(),
    ))
}

/// Full Newton steps with step halving; stops when `max |grad| <= grad_tol`.
///
/// When the iteration stalls or runs out of iterations the proposal is returned with
/// `converged = false`, centred at the last iterate.
pub fn newton_raphson_mode<T: ConditionalTarget + ?Sized>(
    init: &DVector<f64>,
    target: &T,
    opts: &NewtonOptions,
) -> Result<LaplaceProposal> {
    let mut x = init.clone();
    let mut f = target.log_density(&x);
    if !f.is_finite() {
        return Err(Error::Sampler(
            "conditional log density is not finite at the Newton starting point".into(),
        ));
    }
    let mut iters = 0;
    loop {
        let gh = target.grad_hess(&x);
        let neg_h = -&gh.hess;
        let grad_ok = max_abs(&gh.grad) <= opts.grad_tol;
        let chol = cholesky_lower(&neg_h);
        match chol {
            Some(l) if grad_ok => {
                return Ok(LaplaceProposal {
                    log_det_neg_hess: log_det_from_lower(&l),
                    mode: x,
                    hess_chol: l,
                    nr_iters: iters,
                    converged: true,
                });
            }
            Some(l) if iters < opts.max_iters => {
                let step = chol_solve(&l, &gh.grad);
                let tol = 1e-12 * f.abs().max(1.0);
                let mut t = 1.0;
                let mut moved = false;
                for _ in 0..=MAX_HALVINGS {
                    let cand = &x + &step * t;
                    let fc = target.log_density(&cand);
                    if fc.is_finite() && fc >= f - tol {
                        x = cand;
                        f = fc;
                        moved = true;
                        break;
                    }
                    t *= 0.5;
                }
                iters += 1;
                if !moved {
                    return LaplaceProposal::centered(x, &neg_h).map(|mut p| {
                        p.nr_iters = iters;
                        p
                    });
                }
            }
            _ => {
                return LaplaceProposal::centered(x, &neg_h).map(|mut p| {
                    p.nr_iters = iters;
                    p
                });
            }
        }
    }
}

/// Independence Metropolis-Hastings step with a Laplace proposal.
pub fn mh_laplace_update<T: ConditionalTarget + ?Sized, R: Rng + ?Sized>(
    current: &DVector<f64>,
    proposal: &LaplaceProposal,
    target: &T,
    rng: &mut R,
) -> (DVector<f64>, bool) {
    let cand = proposal.sample(rng);
    let log_ratio = target.log_density(&cand) - target.log_density(current)
        + proposal.log_density(current)
        - proposal.log_density(&cand);
    if accept(log_ratio, rng) {
        (cand, true)
    } else {
        (current.clone(), false)
    }
}

pub(crate) fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

#[derive(Debug, Clone)]
pub struct BlockOutcome {
    pub value: DVector<f64>,
    pub accepted: bool,
    /// Newton-Raphson did not converge and the state-centred proposal was used.
    pub fallback: bool,
}

/// How a block update decides on its candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceptRule {
    /// Standard Metropolis-Hastings accept/reject.
    #[default]
    Metropolis,
    /// Nested Laplace approximation: every proposal is taken, no ratio is computed.
    AlwaysAccept,
    /// Computes the MH ratio but treats the acceptance probability as 1 (test hook).
    UnitProbability,
}

impl AcceptRule {
    fn decide<R: Rng + ?Sized>(self, log_ratio: impl FnOnce() -> f64, rng: &mut R) -> bool {
        match self {
            AcceptRule::Metropolis => accept(log_ratio(), rng),
            AcceptRule::AlwaysAccept => true,
            AcceptRule::UnitProbability => {
                let _ = log_ratio();
                true
            }
        }
    }
}

/// One Laplace-proposal update of a block.
///
/// If the mode search fails, the proposal is centred at the current value with precision
/// `-H(current)` (ridged), and the reverse proposal density is evaluated at the
/// candidate so the step stays a valid MH move.
pub fn laplace_block_update<T: ConditionalTarget + ?Sized, R: Rng + ?Sized>(
    current: &DVector<f64>,
    target: &T,
    opts: &NewtonOptions,
    rule: AcceptRule,
    rng: &mut R,
) -> Result<BlockOutcome> {
    let prop = newton_raphson_mode(current, target, opts)?;
    if prop.converged {
        let cand = prop.sample(rng);
        let accepted = rule.decide(
            || {
                target.log_density(&cand) - target.log_density(current)
                    + prop.log_density(current)
                    - prop.log_density(&cand)
            },
            rng,
        );
        return Ok(BlockOutcome {
            value: if accepted { cand } else { current.clone() },
            accepted,
            fallback: false,
        });
    }
    let fwd = LaplaceProposal::centered(current.clone(), &(-target.grad_hess(current).hess))?;
    let cand = fwd.sample(rng);
    let accepted = if rule == AcceptRule::AlwaysAccept {
        true
    } else {
        let rev = LaplaceProposal::centered(cand.clone(), &(-target.grad_hess(&cand).hess))?;
        rule.decide(
            || {
                target.log_density(&cand) - target.log_density(current)
                    + rev.log_density(current)
                    - fwd.log_density(&cand)
            },
            rng,
        )
    };
    Ok(BlockOutcome {
        value: if accepted { cand } else { current.clone() },
        accepted,
        fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Gaussian target with precision `p` and mean `m`.
    struct Gaussian {
        p: DMatrix<f64>,
        m: DVector<f64>,
    }

    impl ConditionalTarget for Gaussian {
        fn log_density(&self, x: &DVector<f64>) -> f64 {
            let d = x - &self.m;
            -0.5 * d.dot(&(&self.p * &d))
        }
        fn grad_hess(&self, x: &DVector<f64>) -> GradHess {
            GradHess {
                grad: -(&self.p * (x - &self.m)),
                hess: -self.p.clone(),
            }
        }
    }

    /// Binomial logit likelihood with a flat prior: y successes in n trials.
    struct Logit {
        y: f64,
        n: f64,
        prior_prec: f64,
    }

    impl ConditionalTarget for Logit {
        fn log_density(&self, x: &DVector<f64>) -> f64 {
            let t = x[0];
            self.y * t - self.n * (1.0 + t.exp()).ln() - 0.5 * self.prior_prec * t * t
        }
        fn grad_hess(&self, x: &DVector<f64>) -> GradHess {
            let t = x[0];
            let p = 1.0 / (1.0 + (-t).exp());
            GradHess {
                grad: DVector::from_element(1, self.y - self.n * p - self.prior_prec * t),
                hess: DMatrix::from_element(1, 1, -self.n * p * (1.0 - p) - self.prior_prec),
            }
        }
    }

    #[test]
    fn newton_is_exact_on_quadratics() {
        let g = Gaussian {
            p: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            m: DVector::from_vec(vec![1.5, -0.5]),
        };
        let p = newton_raphson_mode(&DVector::from_vec(vec![40.0, 9.0]), &g, &Default::default())
            .unwrap();
        assert!(p.converged);
        assert_eq!(p.nr_iters, 1);
        assert!((&p.mode - &g.m).amax() < 1e-12);
    }

    #[test]
    fn symmetric_logit_starts_at_mode() {
        let t = Logit {
            y: 1.0,
            n: 2.0,
            prior_prec: 0.0,
        };
        let p = newton_raphson_mode(&DVector::zeros(1), &t, &Default::default()).unwrap();
        assert!(p.converged);
        assert_eq!(p.nr_iters, 0);
        assert_eq!(p.mode[0], 0.0);
        assert!((p.log_det_neg_hess - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn logit_mode_matches_bisection() {
        let t = Logit {
            y: 9.0,
            n: 10.0,
            prior_prec: 0.1,
        };
        let p = newton_raphson_mode(&DVector::from_element(1, -3.0), &t, &Default::default())
            .unwrap();
        // independent root of the score by bisection
        let score = |x: f64| t.grad_hess(&DVector::from_element(1, x)).grad[0];
        let (mut lo, mut hi) = (-10.0, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if score(mid) > 0.0 {
                lo = mid
            } else {
                hi = mid
            }
        }
        assert!((p.mode[0] - 0.5 * (lo + hi)).abs() < 1e-9);
    }

    #[test]
    fn gaussian_target_is_always_accepted() {
        let g = Gaussian {
            p: DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            m: DVector::from_vec(vec![0.2, 0.1]),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut x = DVector::zeros(2);
        for _ in 0..2000 {
            let out = laplace_block_update(&x, &g, &Default::default(), AcceptRule::Metropolis, &mut rng).unwrap();
            assert!(out.accepted && !out.fallback);
            x = out.value;
        }
    }

    #[test]
    fn acceptance_rate_matches_quadrature_oracle() {
        // skewed 1-d target: logit likelihood with few trials and vague prior
        let t = Logit {
            y: 1.0,
            n: 8.0,
            prior_prec: 0.05,
        };
        let prop = newton_raphson_mode(&DVector::zeros(1), &t, &Default::default()).unwrap();
        assert!(prop.converged);
        // expected acceptance = E_{x~pi, y~q}[min(1, w(y)/w(x))], w = pi/q
        let lz = {
            let grid: Vec<f64> = (0..40001).map(|i| -40.0 + i as f64 * 0.002).collect();
            let vals: Vec<f64> = grid
                .iter()
                .map(|&x| t.log_density(&DVector::from_element(1, x)))
                .collect();
            let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + (vals.iter().map(|v| (v - m).exp()).sum::<f64>() * 0.002).ln()
        };
        let step = 0.01;
        let grid: Vec<f64> = (0..6001).map(|i| -40.0 + i as f64 * step).collect();
        let pi: Vec<f64> = grid
            .iter()
            .map(|&x| (t.log_density(&DVector::from_element(1, x)) - lz).exp())
            .collect();
        let q: Vec<f64> = grid
            .iter()
            .map(|&x| prop.log_density(&DVector::from_element(1, x)).exp())
            .collect();
        let mut expected = 0.0;
        for a in 0..grid.len() {
            if pi[a] < 1e-14 {
                continue;
            }
            for b in 0..grid.len() {
                if q[b] < 1e-14 {
                    continue;
                }
                let ratio = (pi[b] * q[a]) / (pi[a] * q[b]);
                expected += pi[a] * q[b] * ratio.min(1.0) * step * step;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut x = DVector::zeros(1);
        let n = 100_000;
        let mut acc = 0;
        for _ in 0..n {
            let (nx, a) = mh_laplace_update(&x, &prop, &t, &mut rng);
            acc += a as usize;
            x = nx;
        }
        let rate = acc as f64 / n as f64;
        assert!(expected < 0.99, "target should be visibly non-Gaussian");
        assert!((rate - expected).abs() < 0.02, "{rate} vs {expected}");
    }

    #[test]
    fn non_converged_search_reports_it() {
        let t = Logit {
            y: 9.0,
            n: 10.0,
            prior_prec: 0.1,
        };
        let opts = NewtonOptions {
            max_iters: 1,
            grad_tol: 1e-8,
        };
        let p = newton_raphson_mode(&DVector::from_element(1, -8.0), &t, &opts).unwrap();
        assert!(!p.converged);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out =
            laplace_block_update(&DVector::from_element(1, -8.0), &t, &opts, AcceptRule::Metropolis, &mut rng)
                .unwrap();
        assert!(out.fallback);
    }

    #[test]
    fn fallback_chain_targets_the_posterior() {
        // the state-centred fallback must still leave the target invariant
        let t = Logit {
            y: 3.0,
            n: 10.0,
            prior_prec: 0.2,
        };
        let opts = NewtonOptions {
            max_iters: 0,
            grad_tol: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut x = DVector::zeros(1);
        let n = 200_000;
        let mut sum = 0.0;
        for _ in 0..n {
            x = laplace_block_update(&x, &t, &opts, AcceptRule::Metropolis, &mut rng)
                .unwrap()
                .value;
            sum += x[0];
        }
        let step = 0.001;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..30000 {
            let v = -15.0 + i as f64 * step;
            let d = t.log_density(&DVector::from_element(1, v)).exp();
            num += v * d;
            den += d;
        }
        assert!((sum / n as f64 - num / den).abs() < 0.02);
    }
}
