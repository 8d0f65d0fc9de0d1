//! Synthetic data on a regular grid and the two simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::sample_mvn_precision;
use crate::model::{compute_logits, n_free_gamma, softmax_full, Dataset, ParamState};
use crate::spatial_basis::{build_knot_grid, build_precision, grid_locations, Bounds, KnotSet, Location};

/// Where a block of true parameter values comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSource {
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, rate: f64 },
    Fixed(Vec<f64>),
}

impl ParamSource {
    fn draw<R: Rng + ?Sized>(&self, len: usize, what: &str, rng: &mut R) -> Result<DVector<f64>> {
        match self {
            ParamSource::Normal { mean, sd } => {
                let d = Normal::new(*mean, *sd)
                    .map_err(|e| crate::Error::InvalidInput(format!("{what}: {e}")))?;
                Ok(DVector::from_fn(len, |_, _| d.sample(rng)))
            }
            ParamSource::Gamma { shape, rate } => {
                let d = Gamma::new(*shape, 1.0 / rate)
                    .map_err(|e| crate::Error::InvalidInput(format!("{what}: {e}")))?;
                Ok(DVector::from_fn(len, |_, _| d.sample(rng)))
            }
            ParamSource::Fixed(v) => {
                if v.len() == 1 {
                    Ok(DVector::from_element(len, v[0]))
                } else if v.len() == len {
                    Ok(DVector::from_column_slice(v))
                } else {
                    invalid(format!("{what}: {} fixed values given, {len} needed", v.len()))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_classes: usize,
    pub u_true: usize,
    /// Cells per side of the square prediction grid on the unit square.
    pub grid_side: usize,
    pub n_train: usize,
    /// Knots per side (cell centres of a regular grid).
    pub knot_side: usize,
    pub phi_true: f64,
    pub mu: ParamSource,
    pub gamma: ParamSource,
    pub omega: ParamSource,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_classes: 5,
            u_true: 2,
            grid_side: 50,
            n_train: 250,
            knot_side: 15,
            phi_true: 0.2,
            mu: ParamSource::Normal { mean: 0.0, sd: 1.0 },
            gamma: ParamSource::Normal { mean: 0.0, sd: 1.0 },
            omega: ParamSource::Gamma { shape: 4.0, rate: 4.0 },
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n_classes < 2 {
            out.push("n_classes must be at least 2".into());
        }
        if self.u_true == 0 || self.u_true + 1 > self.n_classes {
            out.push(format!(
                "u_true must be in 1..={}, got {}",
                self.n_classes.saturating_sub(1),
                self.u_true
            ));
        }
        if self.grid_side == 0 || self.knot_side == 0 {
            out.push("grid_side and knot_side must be positive".into());
        }
        if self.n_train == 0 || self.n_train > self.grid_side * self.grid_side {
            out.push(format!(
                "n_train must be in 1..={}, got {}",
                self.grid_side * self.grid_side,
                self.n_train
            ));
        }
        if !(self.phi_true > 0.0 && self.phi_true.is_finite()) {
            out.push("phi_true must be positive".into());
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

    pub fn knots(&self) -> Result<KnotSet> {
        build_knot_grid(self.knot_side, self.knot_side, &Bounds::unit_square())
    }

    pub fn grid(&self) -> Result<Vec<Location>> {
        grid_locations(self.grid_side, self.grid_side, &Bounds::unit_square())
    }

    pub fn class_labels(&self) -> Vec<String> {
        (1..=self.n_classes).map(|j| format!("class{j}")).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub train: Dataset,
    pub test: Dataset,
    pub truth: ParamState,
    pub knots: KnotSet,
    /// Grid indices of the training and test points.
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
    /// True class probabilities on the full grid (`grid x J`, control last).
    pub grid_probs: DMatrix<f64>,
}

/// Draws the true parameters: `mu`, `gamma`, `omega` from their sources and
/// `w_j ~ MVN(0, (omega_j Q)^{-1})`.
pub fn draw_truth<R: Rng + ?Sized>(cfg: &SimConfig, knots: &KnotSet, rng: &mut R) -> Result<ParamState> {
    cfg.validate()?;
    let jm1 = cfg.n_classes - 1;
    let u = cfg.u_true;
    let mu = cfg.mu.draw(jm1, "mu", rng)?;
    let gamma = cfg.gamma.draw(n_free_gamma(cfg.n_classes, u), "gamma", rng)?;
    let omega = cfg.omega.draw(u, "omega", rng)?;
    let w = draw_weights(knots, cfg.phi_true, &omega, rng)?;
    let truth = ParamState {
        mu,
        w,
        omega,
        gamma,
        phi: cfg.phi_true,
    };
    truth.validate()?;
    Ok(truth)
}

/// `W` with columns `w_j ~ MVN(0, (omega_j Q(phi))^{-1})`.
pub fn draw_weights<R: Rng + ?Sized>(
    knots: &KnotSet,
    phi: f64,
    omega: &DVector<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let spatial = build_precision(knots, phi)?;
    let k = knots.len();
    let zero = DVector::zeros(k);
    let mut w = DMatrix::zeros(k, omega.len());
    for (j, &om) in omega.iter().enumerate() {
        let l = spatial.q_chol() * om.sqrt();
        w.set_column(j, &sample_mvn_precision(&zero, &l, rng));
    }
    Ok(w)
}

/// Simulates from given true parameters: one categorical outcome per grid point, then a
/// uniform train/test split without replacement.
pub fn simulate_from_truth<R: Rng + ?Sized>(
    cfg: &SimConfig,
    knots: &KnotSet,
    truth: ParamState,
    rng: &mut R,
) -> Result<SimulatedData> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let basis = crate::spatial_basis::build_basis(&grid, knots, truth.phi)?;
    let psi = compute_logits(&truth, &basis)?;
    let j = cfg.n_classes;
    let mut grid_probs = DMatrix::zeros(grid.len(), j);
    let mut classes = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let row: Vec<f64> = psi.row(i).iter().copied().collect();
        let p = softmax_full(&row)?;
        let r: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = j - 1;
        for (jj, &pj) in p.iter().enumerate() {
            acc += pj;
            if r < acc {
                c = jj;
                break;
            }
        }
        classes.push(c);
        for (jj, &pj) in p.iter().enumerate() {
            grid_probs[(i, jj)] = pj;
        }
    }
    let mut train_index = sample_indices(rng, grid.len(), cfg.n_train).into_vec();
    train_index.sort_unstable();
    let mut is_train = vec![false; grid.len()];
    for &i in &train_index {
        is_train[i] = true;
    }
    let test_index: Vec<usize> = (0..grid.len()).filter(|&i| !is_train[i]).collect();
    let make = |idx: &[usize]| {
        Dataset::categorical(
            &idx.iter().map(|&i| classes[i]).collect::<Vec<_>>(),
            idx.iter().map(|&i| grid[i]).collect(),
            cfg.class_labels(),
        )
    };
    Ok(SimulatedData {
        train: make(&train_index)?,
        test: make(&test_index)?,
        truth,
        knots: knots.clone(),
        train_index,
        test_index,
        grid_probs,
    })
}

/// Full simulation under `cfg.seed`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let knots = cfg.knots()?;
    let truth = draw_truth(cfg, &knots, &mut rng)?;
    simulate_from_truth(cfg, &knots, truth, &mut rng)
}

/// Scores of one fitted candidate dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitScores {
    pub waic: f64,
    /// Deviance-scale PSIS-LOO (`-2 elpd_loo`).
    pub looic: f64,
    /// Total log predictive density of the held-out grid points.
    pub lpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStudyRow {
    pub replicate: usize,
    pub u: usize,
    pub waic: f64,
    pub looic: f64,
    pub lpd: f64,
    /// `max_u lpd(u) - lpd(u)` within the replicate.
    pub delta_lpd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimReplicate {
    pub replicate: usize,
    pub seed: u64,
    pub u_true: usize,
    pub waic_u: usize,
    pub loo_u: usize,
    pub best_u: usize,
    pub delta_waic_selected: f64,
    pub delta_loo_selected: f64,
    pub delta_full_rank: f64,
    pub delta_true: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        Self {
            mean: crate::diagnostics::mean(x),
            se: (crate::diagnostics::variance(x) / n).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStudy {
    pub rows: Vec<DimStudyRow>,
    pub replicates: Vec<DimReplicate>,
    pub waic_selected: MeanSe,
    pub loo_selected: MeanSe,
    pub full_rank: MeanSe,
    pub true_u: MeanSe,
}

/// Fitting settings shared by the studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub sampler: crate::sampler::SamplerConfig,
    pub priors: crate::model::PriorSpec,
    /// Largest candidate dimension in the dimension study (`J-1` when absent).
    pub u_max: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            sampler: Default::default(),
            priors: Default::default(),
            u_max: None,
        }
    }
}

fn argmin(values: &[(usize, f64)]) -> usize {
    values
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|v| v.0)
        .expect("non-empty")
}

/// Dimension-selection study with a pluggable fitter `fit(data, u, seed)`.
///
/// Each replicate simulates a dataset under a seed derived from `cfg.seed`, fits every
/// `u` in `1..=u_max` and compares held-out lpd of the WAIC-selected, LOO-selected,
/// full-rank (`u_max`) and true-`u` fits against the best candidate.
pub fn run_dimension_study_with<F>(replicates: usize, cfg: &SimConfig, u_max: usize, fit: F) -> Result<DimStudy>
where
    F: Fn(&SimulatedData, usize, u64) -> Result<FitScores> + Sync,
{
    use rayon::prelude::*;
    if replicates == 0 {
        return invalid("at least one replicate is required");
    }
    cfg.validate()?;
    if u_max == 0 || u_max >= cfg.n_classes || cfg.u_true > u_max {
        return invalid(format!(
            "u_max must be in {}..={}, got {u_max}",
            cfg.u_true,
            cfg.n_classes - 1
        ));
    }
    let per_rep: Vec<Result<(Vec<DimStudyRow>, DimReplicate)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let seed = crate::sampler::derive_seed(cfg.seed, r as u64);
            let sim = simulate_dataset(&SimConfig { seed, ..cfg.clone() })?;
            let scores: Vec<(usize, FitScores)> = (1..=u_max)
                .map(|u| fit(&sim, u, crate::sampler::derive_seed(seed, u as u64)).map(|s| (u, s)))
                .collect::<Result<_>>()?;
            let best_lpd = scores.iter().map(|s| s.1.lpd).fold(f64::NEG_INFINITY, f64::max);
            let best_u = argmin(&scores.iter().map(|(u, s)| (*u, -s.lpd)).collect::<Vec<_>>());
            let delta = |u: usize| best_lpd - scores[u - 1].1.lpd;
            let waic_u = argmin(&scores.iter().map(|(u, s)| (*u, s.waic)).collect::<Vec<_>>());
            let loo_u = argmin(&scores.iter().map(|(u, s)| (*u, s.looic)).collect::<Vec<_>>());
            let rows = scores
                .iter()
                .map(|(u, s)| DimStudyRow {
                    replicate: r,
                    u: *u,
                    waic: s.waic,
                    looic: s.looic,
                    lpd: s.lpd,
                    delta_lpd: delta(*u),
                })
                .collect();
            Ok((
                rows,
                DimReplicate {
                    replicate: r,
                    seed,
                    u_true: cfg.u_true,
                    waic_u,
                    loo_u,
                    best_u,
                    delta_waic_selected: delta(waic_u),
                    delta_loo_selected: delta(loo_u),
                    delta_full_rank: delta(u_max),
                    delta_true: delta(cfg.u_true),
                },
            ))
        })
        .collect();
    let mut rows = Vec::new();
    let mut reps = Vec::new();
    for r in per_rep {
        let (mut rr, rep) = r?;
        rows.append(&mut rr);
        reps.push(rep);
    }
    let col = |f: fn(&DimReplicate) -> f64| MeanSe::of(&reps.iter().map(f).collect::<Vec<_>>());
    Ok(DimStudy {
        waic_selected: col(|r| r.delta_waic_selected),
        loo_selected: col(|r| r.delta_loo_selected),
        full_rank: col(|r| r.delta_full_rank),
        true_u: col(|r| r.delta_true),
        rows,
        replicates: reps,
    })
}

/// Fits one candidate with the sampler and scores it by WAIC, PSIS-LOO and held-out lpd.
pub fn fit_and_score(sim: &SimulatedData, u: usize, seed: u64, fit: &FitConfig) -> Result<FitScores> {
    let priors = fit.priors.build(sim.train.n_classes(), u)?;
    let sampler = crate::sampler::SamplerConfig {
        seed,
        ..fit.sampler.clone()
    };
    let chain = crate::sampler::run_chain(&sim.train, &sim.knots, &priors, u, &sampler)?;
    Ok(FitScores {
        waic: crate::selection::waic(&chain.pointwise_loglik)?.waic,
        looic: crate::selection::psis_loo(&chain.pointwise_loglik)?.looic(),
        lpd: crate::selection::oos_lpd(&chain, &sim.test)?,
    })
}

/// Dimension-selection study using the sampler for every fit.
pub fn run_dimension_study(replicates: usize, cfg: &SimConfig, fit: &FitConfig) -> Result<DimStudy> {
    let u_max = fit.u_max.unwrap_or(cfg.n_classes - 1);
    run_dimension_study_with(replicates, cfg, u_max, |sim, u, seed| fit_and_score(sim, u, seed, fit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceStudyRow {
    pub omega: f64,
    /// Origin-constrained least-squares slope of nested-Laplace on exact posterior-mean logits.
    pub slope: f64,
    /// Pooled `w`-block acceptance rate of the exact sampler.
    pub w_acceptance: f64,
    pub w_acceptance_by_factor: Vec<f64>,
    pub n_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceStudy {
    pub rows: Vec<LaplaceStudyRow>,
    /// Posterior-mean logits at the held-out points per level: `(omega, exact, nested)`.
    #[serde(skip)]
    pub logits: Vec<(f64, Vec<f64>, Vec<f64>)>,
}

/// `sum xy / sum x^2`.
pub fn origin_slope(x: &[f64], y: &[f64]) -> f64 {
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    sxy / sxx
}

/// Laplace-accuracy study: `mu` and `gamma` are drawn once, then for each `omega` level a
/// dataset is simulated with every `omega_j` at that level and fitted by the exact sampler
/// and by the nested Laplace variant.
pub fn run_laplace_accuracy_study(omega_values: &[f64], cfg: &SimConfig, fit: &FitConfig) -> Result<LaplaceStudy> {
    use rayon::prelude::*;
    cfg.validate()?;
    if omega_values.is_empty() || omega_values.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return invalid("omega levels must be positive");
    }
    let knots = cfg.knots()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = draw_truth(cfg, &knots, &mut rng)?;
    let priors = fit.priors.build(cfg.n_classes, cfg.u_true)?;
    let results: Vec<Result<(LaplaceStudyRow, (f64, Vec<f64>, Vec<f64>))>> = omega_values
        .par_iter()
        .enumerate()
        .map(|(level, &omega)| {
            let mut rng = ChaCha8Rng::seed_from_u64(crate::sampler::derive_seed(cfg.seed, level as u64));
            let om = DVector::from_element(cfg.u_true, omega);
            let truth = ParamState {
                w: draw_weights(&knots, cfg.phi_true, &om, &mut rng)?,
                omega: om,
                ..base.clone()
            };
            let sim = simulate_from_truth(cfg, &knots, truth, &mut rng)?;
            let exact_cfg = crate::sampler::SamplerConfig {
                nested_laplace: false,
                ..fit.sampler.clone()
            };
            let nested_cfg = crate::sampler::SamplerConfig {
                nested_laplace: true,
                ..fit.sampler.clone()
            };
            let exact = crate::sampler::run_chain(&sim.train, &knots, &priors, cfg.u_true, &exact_cfg)?;
            let nested = crate::sampler::run_chain(&sim.train, &knots, &priors, cfg.u_true, &nested_cfg)?;
            let locs = sim.test.locations();
            let le = crate::prediction::posterior_mean_logits(&exact, locs)?;
            let ln = crate::prediction::posterior_mean_logits(&nested, locs)?;
            let x: Vec<f64> = le.iter().copied().collect();
            let y: Vec<f64> = ln.iter().copied().collect();
            let row = LaplaceStudyRow {
                omega,
                slope: origin_slope(&x, &y),
                w_acceptance: exact.acceptance.w_pooled().rate(),
                w_acceptance_by_factor: exact.acceptance.w.iter().map(|t| t.rate()).collect(),
                n_points: locs.len(),
            };
            Ok((row, (omega, x, y)))
        })
        .collect();
    let mut rows = Vec::new();
    let mut logits = Vec::new();
    for r in results {
        let (row, l) = r?;
        rows.push(row);
        logits.push(l);
    }
    Ok(LaplaceStudy { rows, logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        SimConfig {
            grid_side: 12,
            n_train: 60,
            knot_side: 4,
            n_classes: 4,
            u_true: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_design_splits_250_and_2250() {
        let sim = simulate_dataset(&SimConfig::default()).unwrap();
        assert_eq!(sim.train.n(), 250);
        assert_eq!(sim.test.n(), 2250);
        assert_eq!(sim.knots.len(), 225);
        assert_eq!(sim.truth.gamma.len(), 5);
        assert_eq!(sim.truth.w.shape(), (225, 2));
        sim.truth.validate().unwrap();
        let mut all: Vec<usize> = sim.train_index.iter().chain(&sim.test_index).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..2500).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let a = simulate_dataset(&small()).unwrap();
        let b = simulate_dataset(&small()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.truth, b.truth);
        let c = simulate_dataset(&SimConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn huge_precision_removes_spatial_effects() {
        let cfg = SimConfig {
            omega: ParamSource::Fixed(vec![1e6]),
            mu: ParamSource::Fixed(vec![0.5, -0.3, 0.0, 0.8]),
            n_train: 1,
            ..SimConfig::default()
        };
        let sim = simulate_dataset(&cfg).unwrap();
        let want = softmax_full(&[0.5, -0.3, 0.0, 0.8]).unwrap();
        let mut counts = [0usize; 5];
        let mut all = sim.train.categorical_classes().unwrap();
        all.extend(sim.test.categorical_classes().unwrap());
        all.iter().for_each(|&c| counts[c] += 1);
        for (c, p) in want.iter().enumerate() {
            let f = counts[c] as f64 / 2500.0;
            let se = (p * (1.0 - p) / 2500.0).sqrt();
            assert!((f - p).abs() < 4.0 * se, "class {c}: {f} vs {p}");
        }
    }

    #[test]
    fn invalid_configs_are_reported() {
        let bad = SimConfig { u_true: 5, n_train: 10_000, phi_true: 0.0, ..SimConfig::default() };
        assert_eq!(bad.problems().len(), 3);
        assert!(simulate_dataset(&bad).is_err());
        let wrong = SimConfig { mu: ParamSource::Fixed(vec![1.0, 2.0]), ..small() };
        assert!(simulate_dataset(&wrong).is_err());
    }

    #[test]
    fn stubbed_dimension_study_bookkeeping() {
        // lpd(u) = -[10, 4, 6]; waic prefers u=3, loo prefers u=1
        let lpds = [-10.0, -4.0, -6.0];
        let study = run_dimension_study_with(1, &small(), 3, |_, u, _| {
            Ok(FitScores {
                waic: [3.0, 2.0, 1.0][u - 1],
                looic: [1.0, 2.0, 3.0][u - 1],
                lpd: lpds[u - 1],
            })
        })
        .unwrap();
        let r = &study.replicates[0];
        assert_eq!((r.waic_u, r.loo_u, r.best_u), (3, 1, 2));
        assert_eq!(r.delta_waic_selected, 2.0);
        assert_eq!(r.delta_loo_selected, 6.0);
        assert_eq!(r.delta_full_rank, 2.0);
        assert_eq!(r.delta_true, 0.0);
        assert_eq!(study.rows.iter().map(|x| x.delta_lpd).collect::<Vec<_>>(), vec![6.0, 0.0, 2.0]);
        assert_eq!(study.waic_selected.mean, 2.0);
    }

    #[test]
    fn best_candidate_has_zero_delta_in_every_replicate() {
        let study = run_dimension_study_with(3, &small(), 3, |sim, u, _| {
            let x = sim.truth.mu[0];
            Ok(FitScores { waic: u as f64, looic: u as f64, lpd: -(u as f64 - 2.0 - x).powi(2) })
        })
        .unwrap();
        for r in &study.replicates {
            let rows: Vec<_> = study.rows.iter().filter(|x| x.replicate == r.replicate).collect();
            assert_eq!(rows.iter().find(|x| x.u == r.best_u).unwrap().delta_lpd, 0.0);
            assert!(rows.iter().all(|x| x.delta_lpd >= 0.0));
        }
        assert!(run_dimension_study_with(0, &small(), 3, |_, _, _| unreachable!()).is_err());
    }

    #[test]
    fn origin_slope_of_scaled_copy() {
        let x = [1.0, -2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 0.7 * v).collect();
        assert!((origin_slope(&x, &y) - 0.7).abs() < 1e-15);
    }

    fn quick_fit() -> FitConfig {
        FitConfig {
            sampler: crate::sampler::SamplerConfig {
                n_samples: 150,
                n_burnin: 50,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn large_precision_makes_nested_laplace_exact() {
        let cfg = SimConfig { grid_side: 15, n_train: 80, knot_side: 4, ..Default::default() };
        let study = run_laplace_accuracy_study(&[100.0], &cfg, &quick_fit()).unwrap();
        let row = &study.rows[0];
        assert!((0.95..=1.05).contains(&row.slope), "{}", row.slope);
        assert_eq!(row.n_points, 225 - 80);
    }

    #[test]
    fn studies_are_reproducible() {
        let cfg = SimConfig { grid_side: 10, n_train: 40, knot_side: 3, n_classes: 3, u_true: 1, ..Default::default() };
        let fit = FitConfig {
            sampler: crate::sampler::SamplerConfig { n_samples: 20, n_burnin: 5, ..Default::default() },
            ..Default::default()
        };
        let a = run_laplace_accuracy_study(&[0.5, 2.0], &cfg, &fit).unwrap();
        let b = run_laplace_accuracy_study(&[0.5, 2.0], &cfg, &fit).unwrap();
        assert_eq!(a, b);
        let c = run_dimension_study(2, &cfg, &fit).unwrap();
        let d = run_dimension_study(2, &cfg, &fit).unwrap();
        assert_eq!(c, d);
        assert_eq!(c.rows.len(), 4);
    }
}
