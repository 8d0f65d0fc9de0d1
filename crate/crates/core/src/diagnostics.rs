//! Posterior summaries, effective sample size and split R-hat.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sampler::ChainStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub ess: f64,
}

impl Summary {
    /// Monte Carlo standard error of the mean.
    pub fn mcse(&self) -> f64 {
        self.sd / self.ess.max(1.0).sqrt()
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

fn autocovariance(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    x[..n - lag]
        .iter()
        .zip(&x[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size from Geyer's initial positive sequence of autocorrelations.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(x);
    let c0 = autocovariance(x, m, 0);
    if !(c0 > 0.0) {
        return n as f64;
    }
    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocovariance(x, m, lag) + autocovariance(x, m, lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        // initial monotone sequence
        let pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / (n as f64).log10().max(1.0));
    (n as f64 / tau).min(n as f64 * (n as f64).log10())
}

pub fn summarize(name: impl Into<String>, x: &[f64]) -> Summary {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    Summary {
        name: name.into(),
        mean: mean(x),
        sd: variance(x).sqrt(),
        q05: quantile_sorted(&s, 0.05),
        q50: quantile_sorted(&s, 0.5),
        q95: quantile_sorted(&s, 0.95),
        ess: effective_sample_size(x),
    }
}

/// Split R-hat over two or more chains of equal length.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    if chains.len() < 2 {
        return invalid("split R-hat needs at least two chains");
    }
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = len / 2;
    if half < 2 {
        return invalid("chains are too short for split R-hat");
    }
    let mut parts = Vec::with_capacity(2 * chains.len());
    for c in chains {
        parts.push(&c[..half]);
        parts.push(&c[len - half..len]);
    }
    let n = half as f64;
    let means: Vec<f64> = parts.iter().map(|p| mean(p)).collect();
    let w = parts.iter().map(|p| variance(p)).sum::<f64>() / parts.len() as f64;
    let b = n * variance(&means);
    if w <= 0.0 {
        return Ok(if b <= 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

/// Scalar traces of `mu`, `omega`, `phi` and `gamma`, named `mu[j]`, `omega[j]`, `phi`, `gamma[i]`.
pub fn parameter_traces(chain: &ChainStore) -> Vec<(String, Vec<f64>)> {
    let Some(first) = chain.draws.first() else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let labels = &chain.class_labels;
    for j in 0..first.mu.len() {
        let name = format!("mu[{}]", labels.get(j).map_or(j.to_string(), Clone::clone));
        out.push((name, chain.draws.iter().map(|d| d.mu[j]).collect()));
    }
    for j in 0..first.omega.len() {
        out.push((format!("omega[{}]", j + 1), chain.draws.iter().map(|d| d.omega[j]).collect()));
    }
    out.push(("phi".to_string(), chain.draws.iter().map(|d| d.phi).collect()));
    for i in 0..first.gamma.len() {
        out.push((format!("gamma[{}]", i + 1), chain.draws.iter().map(|d| d.gamma[i]).collect()));
    }
    out
}

pub fn summarize_chain(chain: &ChainStore) -> Vec<Summary> {
    parameter_traces(chain)
        .into_iter()
        .map(|(n, v)| summarize(n, &v))
        .collect()
}
