//! Posterior predictive surfaces, class unions and area occurrence probabilities.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::quantile_sorted;
use crate::error::{invalid, Result};
use crate::model::{logits_raw, softmax_full};
use crate::sampler::{derive_seed, ChainStore};
use crate::spatial_basis::{Location, LocationBasis};

/// Predictive draws at `g` locations.
#[derive(Debug, Clone)]
pub struct PredictiveGrid {
    pub locations: Vec<Location>,
    pub class_labels: Vec<String>,
    /// One `g x J` matrix of class probabilities per draw (control class last).
    pub probs: Vec<DMatrix<f64>>,
    /// Drawn class index per draw and location, if requested.
    pub outcomes: Option<Vec<Vec<u32>>>,
}

impl PredictiveGrid {
    pub fn n_draws(&self) -> usize {
        self.probs.len()
    }

    pub fn n_locations(&self) -> usize {
        self.locations.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    /// Posterior mean class probabilities (`g x J`).
    pub fn mean_probs(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_locations(), self.n_classes());
        for p in &self.probs {
            out += p;
        }
        out / self.n_draws().max(1) as f64
    }
}

/// Per-draw prediction: probabilities and (optionally) a categorical outcome per location.
struct DrawPredictor<'a> {
    chain: &'a ChainStore,
    basis: LocationBasis,
    base_seed: u64,
    want_outcomes: bool,
}

impl<'a> DrawPredictor<'a> {
    fn new<R: Rng + ?Sized>(
        chain: &'a ChainStore,
        locations: &[Location],
        want_outcomes: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if chain.n_draws() == 0 {
            return invalid("cannot predict from a chain with no draws");
        }
        if locations.is_empty() {
            return invalid("no prediction locations");
        }
        Ok(Self {
            chain,
            basis: LocationBasis::new(locations, &chain.knots)?,
            base_seed: rng.random(),
            want_outcomes,
        })
    }

    fn draw(&mut self, m: usize) -> Result<(DMatrix<f64>, Option<Vec<u32>>)> {
        let d = &self.chain.draws[m];
        let basis = self.basis.at(d.phi)?;
        let psi = logits_raw(&d.mu, &d.w, &d.gamma_matrix(), basis);
        let g = psi.nrows();
        let j = d.n_classes();
        let mut probs = DMatrix::zeros(g, j);
        let mut row = vec![0.0; j - 1];
        for i in 0..g {
            for (c, v) in row.iter_mut().enumerate() {
                *v = psi[(i, c)];
            }
            for (c, p) in softmax_full(&row)?.into_iter().enumerate() {
                probs[(i, c)] = p;
            }
        }
        let outcomes = self.want_outcomes.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.base_seed, m as u64));
            (0..g)
                .map(|i| categorical(probs.row(i).iter().copied(), rng.random()))
                .collect()
        });
        Ok((probs, outcomes))
    }
}

/// Index of the class selected by uniform `r` under probabilities `p`.
fn categorical(p: impl Iterator<Item = f64>, r: f64) -> u32 {
    let mut acc = 0.0;
    let mut last = 0;
    for (c, pc) in p.enumerate() {
        acc += pc;
        last = c;
        if r < acc {
            return c as u32;
        }
    }
    last as u32
}

/// Materializes predictive probabilities (and outcomes) for every retained draw.
///
/// `B(s*|phi)` is rebuilt for each draw's `phi`.
pub fn predict<R: Rng + ?Sized>(
    chain: &ChainStore,
    locations: &[Location],
    want_outcomes: bool,
    rng: &mut R,
) -> Result<PredictiveGrid> {
    let mut pred = DrawPredictor::new(chain, locations, want_outcomes, rng)?;
    let mut probs = Vec::with_capacity(chain.n_draws());
    let mut outcomes = want_outcomes.then(|| Vec::with_capacity(chain.n_draws()));
    for m in 0..chain.n_draws() {
        let (p, o) = pred.draw(m)?;
        probs.push(p);
        if let (Some(all), Some(o)) = (outcomes.as_mut(), o) {
            all.push(o);
        }
    }
    Ok(PredictiveGrid {
        locations: locations.to_vec(),
        class_labels: chain.class_labels.clone(),
        probs,
        outcomes,
    })
}

/// Posterior mean of the `J-1` logits at each location (`g x (J-1)`).
pub fn posterior_mean_logits(chain: &ChainStore, locations: &[Location]) -> Result<DMatrix<f64>> {
    if chain.n_draws() == 0 {
        return invalid("cannot predict from a chain with no draws");
    }
    let mut lb = LocationBasis::new(locations, &chain.knots)?;
    let mut acc = DMatrix::zeros(locations.len(), chain.n_classes() - 1);
    for d in &chain.draws {
        acc += logits_raw(&d.mu, &d.w, &d.gamma_matrix(), lb.at(d.phi)?);
    }
    Ok(acc / chain.n_draws() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnionMode {
    /// Mean over draws of `sum_{j in C} p_j`.
    Probability,
    /// Frequency over draws of an outcome in `C`.
    Outcome,
}

fn check_subset(subset: &[usize], n_classes: usize) -> Result<()> {
    if subset.is_empty() {
        return invalid("class subset is empty");
    }
    if let Some(&c) = subset.iter().find(|&&c| c >= n_classes) {
        return invalid(format!("class index {c} out of range for {n_classes} classes"));
    }
    Ok(())
}

/// Per-location probability that the outcome falls in `subset`.
pub fn union_probability(grid: &PredictiveGrid, subset: &[usize], mode: UnionMode) -> Result<Vec<f64>> {
    check_subset(subset, grid.n_classes())?;
    let g = grid.n_locations();
    let m = grid.n_draws().max(1) as f64;
    let mut out = vec![0.0; g];
    match mode {
        UnionMode::Probability => {
            for p in &grid.probs {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += subset.iter().map(|&c| p[(i, c)]).sum::<f64>();
                }
            }
        }
        UnionMode::Outcome => {
            let outcomes = grid.outcomes.as_ref().ok_or_else(|| {
                crate::Error::InvalidInput(
                    "outcome-mode unions need outcome draws; predict with outcomes enabled".into(),
                )
            })?;
            let mut member = vec![false; grid.n_classes()];
            subset.iter().for_each(|&c| member[c] = true);
            for draw in outcomes {
                for (o, &y) in out.iter_mut().zip(draw) {
                    *o += f64::from(u8::from(member[y as usize]));
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= m);
    Ok(out)
}

/// Assignment of prediction locations to areas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaPartition {
    /// Area index of each location, `None` if the location belongs to no area.
    pub area_of: Vec<Option<usize>>,
    pub labels: Vec<String>,
}

impl AreaPartition {
    pub fn new(area_of: Vec<Option<usize>>, labels: Vec<String>) -> Result<Self> {
        if let Some(a) = area_of.iter().flatten().find(|&&a| a >= labels.len()) {
            return invalid(format!("area index {a} out of range for {} areas", labels.len()));
        }
        Ok(Self { area_of, labels })
    }

    /// Tiles of `width x height` anchored at `origin`; empty tiles are dropped.
    /// Labels are `"col_row"` tile indices.
    pub fn rectangular(locations: &[Location], origin: Location, width: f64, height: f64) -> Result<Self> {
        if !(width > 0.0 && height > 0.0) {
            return invalid("tile width and height must be positive");
        }
        let mut labels: Vec<String> = Vec::new();
        let mut index = std::collections::BTreeMap::new();
        let keys: Vec<(i64, i64)> = locations
            .iter()
            .map(|l| {
                (
                    ((l.x - origin.x) / width).floor() as i64,
                    ((l.y - origin.y) / height).floor() as i64,
                )
            })
            .collect();
        let mut sorted = keys.clone();
        sorted.sort_by_key(|&(c, r)| (r, c));
        sorted.dedup();
        for (c, r) in sorted {
            index.insert((c, r), labels.len());
            labels.push(format!("{c}_{r}"));
        }
        let area_of = keys.iter().map(|k| index.get(k).copied()).collect();
        Self::new(area_of, labels)
    }

    pub fn n_areas(&self) -> usize {
        self.labels.len()
    }
}

/// Per area, the posterior probability that at least one location in it draws `class`.
pub fn area_occurrence(grid: &PredictiveGrid, areas: &AreaPartition, class: usize) -> Result<Vec<f64>> {
    check_subset(&[class], grid.n_classes())?;
    if areas.area_of.len() != grid.n_locations() {
        return invalid(format!(
            "area map covers {} locations, grid has {}",
            areas.area_of.len(),
            grid.n_locations()
        ));
    }
    let outcomes = grid.outcomes.as_ref().ok_or_else(|| {
        crate::Error::InvalidInput(
            "area occurrence needs outcome draws; rerun prediction with outcomes enabled".into(),
        )
    })?;
    let mut counts = vec![0.0; areas.n_areas()];
    let mut hit = vec![false; areas.n_areas()];
    for draw in outcomes {
        hit.iter_mut().for_each(|h| *h = false);
        for (a, &y) in areas.area_of.iter().zip(draw) {
            if let (Some(a), true) = (a, y as usize == class) {
                hit[*a] = true;
            }
        }
        for (c, h) in counts.iter_mut().zip(&hit) {
            *c += f64::from(u8::from(*h));
        }
    }
    let m = outcomes.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c / m).collect())
}

/// What the streaming predictor accumulates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamOptions {
    pub want_outcomes: bool,
    /// Probability levels of the per-location quantile surfaces.
    pub quantiles: Vec<f64>,
    /// Reservoir size per location and class used for quantiles.
    pub reservoir_size: usize,
    /// Class subsets whose union probability is reported.
    pub unions: Vec<Vec<usize>>,
    /// Classes whose area occurrence probability is reported (needs outcomes and areas).
    pub area_classes: Vec<usize>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            want_outcomes: false,
            quantiles: vec![0.05, 0.95],
            reservoir_size: 500,
            unions: Vec::new(),
            area_classes: Vec::new(),
        }
    }
}

/// Online summaries of the predictive distribution.
#[derive(Debug, Clone)]
pub struct PredictiveSummary {
    pub locations: Vec<Location>,
    pub class_labels: Vec<String>,
    pub n_draws: usize,
    /// `g x J` posterior mean probabilities.
    pub mean_probs: DMatrix<f64>,
    /// `g x J` outcome frequencies, when outcomes were drawn.
    pub outcome_freq: Option<DMatrix<f64>>,
    /// One `g x J` matrix per requested quantile level.
    pub quantiles: Vec<(f64, DMatrix<f64>)>,
    /// `(subset, per-location probability)` in probability mode.
    pub unions: Vec<(Vec<usize>, Vec<f64>)>,
    /// `(class, per-area probability)`.
    pub areas: Vec<(usize, Vec<f64>)>,
    pub area_labels: Vec<String>,
}

/// Streams predictive draws one at a time so the full `M x g x J` array never exists.
///
/// Quantiles come from a uniform reservoir of at most `reservoir_size` draws per location
/// (exact when the chain has no more draws than that).
pub fn predict_summary<R: Rng + ?Sized>(
    chain: &ChainStore,
    locations: &[Location],
    areas: Option<&AreaPartition>,
    opts: &StreamOptions,
    rng: &mut R,
) -> Result<PredictiveSummary> {
    let j = chain.n_classes();
    for s in &opts.unions {
        check_subset(s, j)?;
    }
    check_subset(&opts.area_classes, j).or_else(|e| {
        if opts.area_classes.is_empty() {
            Ok(())
        } else {
            Err(e)
        }
    })?;
    if let Some(q) = opts.quantiles.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return invalid(format!("quantile level {q} outside [0, 1]"));
    }
    if !opts.area_classes.is_empty() {
        if !opts.want_outcomes {
            return invalid("area occurrence needs outcome draws; enable want_outcomes");
        }
        match areas {
            None => return invalid("area classes requested without an area partition"),
            Some(a) if a.area_of.len() != locations.len() => {
                return invalid("area partition does not match the prediction locations")
            }
            _ => {}
        }
    }
    let mut pred = DrawPredictor::new(chain, locations, opts.want_outcomes, rng)?;
    let g = locations.len();
    let cap = if opts.quantiles.is_empty() { 0 } else { opts.reservoir_size.max(1) };
    let mut reservoir: Vec<Vec<f64>> = vec![Vec::with_capacity(cap.min(chain.n_draws())); g * j];
    let mut res_rng = ChaCha8Rng::seed_from_u64(derive_seed(pred.base_seed, u64::MAX));
    let mut mean = DMatrix::zeros(g, j);
    let mut freq = opts.want_outcomes.then(|| DMatrix::zeros(g, j));
    let mut unions = vec![vec![0.0; g]; opts.unions.len()];
    let n_areas = areas.map_or(0, AreaPartition::n_areas);
    let mut area_counts = vec![vec![0.0; n_areas]; opts.area_classes.len()];
    let mut hit = vec![false; n_areas];

    for m in 0..chain.n_draws() {
        let (p, o) = pred.draw(m)?;
        mean += &p;
        for (s, acc) in opts.unions.iter().zip(unions.iter_mut()) {
            for (i, a) in acc.iter_mut().enumerate() {
                *a += s.iter().map(|&c| p[(i, c)]).sum::<f64>();
            }
        }
        if cap > 0 {
            // one replacement slot per draw keeps each location's reservoir a joint sample
            let slot = (m >= cap).then(|| res_rng.random_range(0..=m)).filter(|&s| s < cap);
            for i in 0..g {
                for c in 0..j {
                    let r = &mut reservoir[i * j + c];
                    if m < cap {
                        r.push(p[(i, c)]);
                    } else if let Some(s) = slot {
                        r[s] = p[(i, c)];
                    }
                }
            }
        }
        if let (Some(f), Some(o)) = (freq.as_mut(), o.as_ref()) {
            for (i, &y) in o.iter().enumerate() {
                f[(i, y as usize)] += 1.0;
            }
        }
        if let (Some(a), Some(o)) = (areas, o.as_ref()) {
            for (cls, counts) in opts.area_classes.iter().zip(area_counts.iter_mut()) {
                hit.iter_mut().for_each(|h| *h = false);
                for (area, &y) in a.area_of.iter().zip(o) {
                    if let (Some(area), true) = (area, y as usize == *cls) {
                        hit[*area] = true;
                    }
                }
                for (c, h) in counts.iter_mut().zip(&hit) {
                    *c += f64::from(u8::from(*h));
                }
            }
        }
    }

    let md = chain.n_draws() as f64;
    reservoir.iter_mut().for_each(|r| r.sort_by(f64::total_cmp));
    let quantiles = opts
        .quantiles
        .iter()
        .map(|&q| (q, DMatrix::from_fn(g, j, |i, c| quantile_sorted(&reservoir[i * j + c], q))))
        .collect();
    Ok(PredictiveSummary {
        locations: locations.to_vec(),
        class_labels: chain.class_labels.clone(),
        n_draws: chain.n_draws(),
        mean_probs: mean / md,
        outcome_freq: freq.map(|f| f / md),
        quantiles,
        unions: opts
            .unions
            .iter()
            .cloned()
            .zip(unions.into_iter().map(|u| u.into_iter().map(|v| v / md).collect()))
            .collect(),
        areas: opts
            .area_classes
            .iter()
            .copied()
            .zip(area_counts.into_iter().map(|a| a.into_iter().map(|v| v / md).collect()))
            .collect(),
        area_labels: areas.map(|a| a.labels.clone()).unwrap_or_default(),
    })
}
