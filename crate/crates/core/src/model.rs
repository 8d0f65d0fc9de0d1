//! Model state, the softmax link, reduced-rank logits and log densities.
//!
//! The last class is the control class with its logit fixed at zero, so a model with
//! `J` classes carries `J - 1` free logits per location:
//!
//! ```text
//! Psi = 1 mu^T + B(phi) W Gamma(gamma)^T
//! ```
//!
//! `Gamma` is `(J-1) x u`, unit-lower-triangular (ones on the diagonal, zeros above)
//! and its free entries below the diagonal are stored column by column in `gamma`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, log_det_from_lower, mvn_log_density_precision, LN_2PI};
use crate::spatial_basis::{Location, SpatialBasis};

/// Multinomial counts at observed locations. The control class is excluded from `counts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    counts: DMatrix<u32>,
    trials: Vec<u32>,
    locations: Vec<Location>,
    class_labels: Vec<String>,
    counts_f64: DMatrix<f64>,
    log_norm: Vec<f64>,
}

impl Dataset {
    /// `counts` is `n x (J-1)`; `class_labels` has all `J` labels with the control last.
    pub fn new(
        counts: DMatrix<u32>,
        trials: Vec<u32>,
        locations: Vec<Location>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let n = counts.nrows();
        if class_labels.len() < 2 {
            return invalid("at least two classes are required");
        }
        if counts.ncols() != class_labels.len() - 1 {
            return invalid(format!(
                "count matrix has {} columns but {} classes need {}",
                counts.ncols(),
                class_labels.len(),
                class_labels.len() - 1
            ));
        }
        if trials.len() != n || locations.len() != n {
            return invalid(format!(
                "{n} count rows but {} trial counts and {} locations",
                trials.len(),
                locations.len()
            ));
        }
        for i in 0..n {
            if trials[i] == 0 {
                return invalid(format!("observation {i} has zero trials"));
            }
            let row: u64 = counts.row(i).iter().map(|&c| c as u64).sum();
            if row > trials[i] as u64 {
                return invalid(format!(
                    "observation {i}: class counts sum to {row} but only {} trials",
                    trials[i]
                ));
            }
            if !locations[i].is_finite() {
                return invalid(format!("observation {i} has non-finite coordinates"));
            }
        }
        let counts_f64 = counts.map(|c| c as f64);
        let log_norm = (0..n)
            .map(|i| {
                let row_sum: u64 = counts.row(i).iter().map(|&c| c as u64).sum();
                let control = trials[i] as u64 - row_sum;
                ln_factorial(trials[i] as u64)
                    - counts
                        .row(i)
                        .iter()
                        .map(|&c| ln_factorial(c as u64))
                        .sum::<f64>()
                    - ln_factorial(control)
            })
            .collect();
        Ok(Self {
            counts,
            trials,
            locations,
            class_labels,
            counts_f64,
            log_norm,
        })
    }

    /// One trial per location; `classes[i]` indexes `class_labels` (last = control).
    pub fn categorical(
        classes: &[usize],
        locations: Vec<Location>,
        class_labels: Vec<String>,
    ) -> Result<Self> {
        let j = class_labels.len();
        if j < 2 {
            return invalid("at least two classes are required");
        }
        let mut counts = DMatrix::zeros(classes.len(), j - 1);
        for (i, &c) in classes.iter().enumerate() {
            if c >= j {
                return invalid(format!("observation {i} has class index {c} >= {j}"));
            }
            if c < j - 1 {
                counts[(i, c)] = 1;
            }
        }
        Self::new(counts, vec![1; classes.len()], locations, class_labels)
    }

    pub fn n(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn n_logits(&self) -> usize {
        self.class_labels.len() - 1
    }

    pub fn counts(&self) -> &DMatrix<u32> {
        &self.counts
    }

    pub fn counts_f64(&self) -> &DMatrix<f64> {
        &self.counts_f64
    }

    pub fn trials(&self) -> &[u32] {
        &self.trials
    }

    pub fn locations(&self) -> &[Location] {
        &self.locations
    }

    pub fn class_labels(&self) -> &[String] {
        &self.class_labels
    }

    /// `log(N_i! / prod_j y_ij!)` including the control class.
    pub fn log_normalizer(&self, i: usize) -> f64 {
        self.log_norm[i]
    }

    pub fn control_count(&self, i: usize) -> u32 {
        self.trials[i] - self.counts.row(i).iter().sum::<u32>()
    }

    /// Count of each of the `J` classes, summed over observations.
    pub fn class_totals(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.n_classes()];
        for i in 0..self.n() {
            for j in 0..self.n_logits() {
                out[j] += self.counts[(i, j)] as u64;
            }
            out[self.n_logits()] += self.control_count(i) as u64;
        }
        out
    }

    /// Class index per observation for categorical data (`None` if any `N_i != 1`).
    pub fn categorical_classes(&self) -> Option<Vec<usize>> {
        (0..self.n())
            .map(|i| {
                if self.trials[i] != 1 {
                    return None;
                }
                Some(
                    (0..self.n_logits())
                        .find(|&j| self.counts[(i, j)] == 1)
                        .unwrap_or(self.n_logits()),
                )
            })
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.n()) {
            return invalid(format!("row {bad} out of range for {} observations", self.n()));
        }
        let counts = DMatrix::from_fn(rows.len(), self.n_logits(), |i, j| {
            self.counts[(rows[i], j)]
        });
        Self::new(
            counts,
            rows.iter().map(|&r| self.trials[r]).collect(),
            rows.iter().map(|&r| self.locations[r]).collect(),
            self.class_labels.clone(),
        )
    }
}

/// `log(1 + sum_j exp(psi_j))`, shifted by the maximum of `(psi, 0)`.
pub fn log_one_plus_sum_exp(psi: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = psi.clone().fold(0.0_f64, f64::max);
    m + ((-m).exp() + psi.map(|v| (v - m).exp()).sum::<f64>()).ln()
}

/// Probabilities of the `J - 1` non-control classes; the control probability is
/// `1 - sum(p)`.
pub fn softmax_j(psi: &[f64]) -> Result<Vec<f64>> {
    if psi.iter().any(|v| !v.is_finite()) {
        return invalid("softmax input contains non-finite logits");
    }
    let lse = log_one_plus_sum_exp(psi.iter().copied());
    Ok(psi.iter().map(|v| (v - lse).exp()).collect())
}

/// All `J` probabilities, control class last.
pub fn softmax_full(psi: &[f64]) -> Result<Vec<f64>> {
    if psi.iter().any(|v| !v.is_finite()) {
        return invalid("softmax input contains non-finite logits");
    }
    let lse = log_one_plus_sum_exp(psi.iter().copied());
    let mut p: Vec<f64> = psi.iter().map(|v| (v - lse).exp()).collect();
    p.push((-lse).exp());
    Ok(p)
}

/// Number of free entries of a unit-lower-triangular `(J-1) x u` factor matrix.
pub fn n_free_gamma(n_classes: usize, u: usize) -> usize {
    let r = n_classes - 1;
    r * u - u * (u + 1) / 2
}

/// Free parameters of `(Gamma, Omega)` together: `(J-1)u - u(u-1)/2`.
pub fn free_parameter_count(n_classes: usize, u: usize) -> usize {
    n_free_gamma(n_classes, u) + u
}

/// Parameters saved relative to a full-rank row covariance: `(J-u-1)(J-u)/2`.
pub fn parameter_reduction(n_classes: usize, u: usize) -> usize {
    free_parameter_count(n_classes, n_classes - 1) - free_parameter_count(n_classes, u)
}

/// `(row, col)` positions of the free entries of `Gamma`, column by column.
pub fn free_positions(n_logits: usize, u: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for col in 0..u {
        for row in (col + 1)..n_logits {
            out.push((row, col));
        }
    }
    out
}

fn check_dims(n_classes: usize, u: usize) -> Result<()> {
    if n_classes < 2 {
        return invalid(format!("need at least 2 classes, got {n_classes}"));
    }
    if u == 0 || u > n_classes - 1 {
        return invalid(format!(
            "latent dimension u={u} must lie in 1..={}",
            n_classes - 1
        ));
    }
    Ok(())
}

/// Identifiable factor matrix built from its free entries.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    n_classes: usize,
    u: usize,
    gamma: DVector<f64>,
    matrix: DMatrix<f64>,
}

impl FactorMatrix {
    pub fn new(n_classes: usize, u: usize, gamma: DVector<f64>) -> Result<Self> {
        check_dims(n_classes, u)?;
        let nf = n_free_gamma(n_classes, u);
        if gamma.len() != nf {
            return invalid(format!(
                "gamma has {} entries but J={n_classes}, u={u} needs {nf}",
                gamma.len()
            ));
        }
        let matrix = unpack_gamma(n_classes - 1, u, gamma.as_slice());
        Ok(Self {
            n_classes,
            u,
            gamma,
            matrix,
        })
    }

    /// Validates the unit-lower-triangular pattern and extracts the free entries.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let (r, u) = matrix.shape();
        check_dims(r + 1, u)?;
        for col in 0..u {
            for row in 0..=col {
                let want = if row == col { 1.0 } else { 0.0 };
                if matrix[(row, col)] != want {
                    return invalid(format!(
                        "Gamma[{row},{col}] = {} violates the unit-lower-triangular constraint",
                        matrix[(row, col)]
                    ));
                }
            }
        }
        let gamma = DVector::from_iterator(
            n_free_gamma(r + 1, u),
            free_positions(r, u).into_iter().map(|p| matrix[p]),
        );
        Ok(Self {
            n_classes: r + 1,
            u,
            gamma,
            matrix,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn u(&self) -> usize {
        self.u
    }

    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn pack(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.gamma.len(),
            free_positions(self.n_classes - 1, self.u)
                .into_iter()
                .map(|p| self.matrix[p]),
        )
    }
}

pub(crate) fn unpack_gamma(n_logits: usize, u: usize, gamma: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n_logits, u);
    for j in 0..u {
        m[(j, j)] = 1.0;
    }
    for (p, &g) in free_positions(n_logits, u).into_iter().zip(gamma) {
        m[p] = g;
    }
    m
}

/// `Sigma = Gamma diag(omega)^{-1} Gamma^T`.
pub fn induced_row_covariance(fm: &FactorMatrix, omega: &DVector<f64>) -> Result<DMatrix<f64>> {
    if omega.len() != fm.u() {
        return invalid(format!(
            "omega has {} entries, factor matrix has {} columns",
            omega.len(),
            fm.u()
        ));
    }
    if omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return invalid("omega entries must be positive");
    }
    let mut scaled = fm.matrix().clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= omega[j];
    }
    Ok(&scaled * fm.matrix().transpose())
}

/// Inverse of [`induced_row_covariance`] for a rank-`u` PSD matrix whose leading
/// `u x u` block is positive definite.
pub fn recover_factors(sigma: &DMatrix<f64>, u: usize) -> Result<(FactorMatrix, DVector<f64>)> {
    let r = sigma.nrows();
    if sigma.ncols() != r {
        return invalid("row covariance must be square");
    }
    check_dims(r + 1, u)?;
    let lead = sigma.view((0, 0), (u, u)).clone_owned();
    let l = cholesky_lower(&lead).ok_or_else(|| {
        Error::SingularMatrix("leading block of the row covariance is not positive definite".into())
    })?;
    let diag: Vec<f64> = l.diagonal().iter().copied().collect();
    let mut gamma_mat = DMatrix::zeros(r, u);
    for j in 0..u {
        for i in j..u {
            gamma_mat[(i, j)] = l[(i, j)] / diag[j];
        }
    }
    if r > u {
        // Gamma_2 = Sigma_21 L^{-T} S^{-1}
        let s21 = sigma.view((u, 0), (r - u, u)).clone_owned();
        let x = l
            .solve_lower_triangular(&s21.transpose())
            .ok_or_else(|| Error::SingularMatrix("triangular solve failed".into()))?;
        for i in 0..(r - u) {
            for j in 0..u {
                gamma_mat[(u + i, j)] = x[(j, i)] / diag[j];
            }
        }
    }
    let omega = DVector::from_iterator(u, diag.iter().map(|d| 1.0 / (d * d)));
    Ok((FactorMatrix::from_matrix(gamma_mat)?, omega))
}

/// One joint value of all model unknowns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamState {
    pub mu: DVector<f64>,
    /// `k x u`, column `j` holds the knot weights of factor `j`.
    pub w: DMatrix<f64>,
    pub omega: DVector<f64>,
    pub gamma: DVector<f64>,
    pub phi: f64,
}

impl ParamState {
    pub fn n_classes(&self) -> usize {
        self.mu.len() + 1
    }

    pub fn u(&self) -> usize {
        self.w.ncols()
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        unpack_gamma(self.mu.len(), self.u(), self.gamma.as_slice())
    }

    pub fn factor_matrix(&self) -> Result<FactorMatrix> {
        FactorMatrix::new(self.n_classes(), self.u(), self.gamma.clone())
    }

    /// Induced knot weights `Z = W Gamma^T` (`k x (J-1)`).
    pub fn induced_weights(&self) -> DMatrix<f64> {
        &self.w * self.gamma_matrix().transpose()
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.n_classes(), self.u())?;
        if self.omega.len() != self.u() {
            return invalid(format!(
                "omega has {} entries but W has {} columns",
                self.omega.len(),
                self.u()
            ));
        }
        let nf = n_free_gamma(self.n_classes(), self.u());
        if self.gamma.len() != nf {
            return invalid(format!("gamma has {} entries, expected {nf}", self.gamma.len()));
        }
        if self.omega.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return invalid("omega entries must be positive");
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return invalid(format!("phi must be positive, got {}", self.phi));
        }
        let finite = self.mu.iter().chain(self.w.iter()).chain(self.gamma.iter());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return invalid("state contains non-finite values");
        }
        Ok(())
    }
}

/// Scalar prior settings that expand to [`Hyperpriors`] for any `(J, u)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub mu_mean: f64,
    pub mu_precision: f64,
    pub gamma_mean: f64,
    pub gamma_precision: f64,
    pub omega_shape: f64,
    pub omega_rate: f64,
    pub phi_shape: f64,
    pub phi_rate: f64,
}

impl Default for PriorSpec {
    /// N(0,1) on mu and gamma, Gamma(4,4) on omega, Gamma(4,20) on phi.
    fn default() -> Self {
        Self {
            mu_mean: 0.0,
            mu_precision: 1.0,
            gamma_mean: 0.0,
            gamma_precision: 1.0,
            omega_shape: 4.0,
            omega_rate: 4.0,
            phi_shape: 4.0,
            phi_rate: 20.0,
        }
    }
}

impl PriorSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let positive = [
            ("mu_precision", self.mu_precision),
            ("gamma_precision", self.gamma_precision),
            ("omega_shape", self.omega_shape),
            ("omega_rate", self.omega_rate),
            ("phi_shape", self.phi_shape),
            ("phi_rate", self.phi_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("priors.{name} must be positive and finite, got {v}"));
            }
        }
        for (name, v) in [("mu_mean", self.mu_mean), ("gamma_mean", self.gamma_mean)] {
            if !v.is_finite() {
                out.push(format!("priors.{name} must be finite"));
            }
        }
        out
    }

    pub fn build(&self, n_classes: usize, u: usize) -> Result<Hyperpriors> {
        check_dims(n_classes, u)?;
        let r = n_classes - 1;
        let nf = n_free_gamma(n_classes, u);
        Hyperpriors::new(
            DVector::from_element(r, self.mu_mean),
            DMatrix::from_diagonal_element(r, r, self.mu_precision),
            DVector::from_element(nf, self.gamma_mean),
            DMatrix::from_diagonal_element(nf, nf, self.gamma_precision),
            DVector::from_element(u, self.omega_shape),
            DVector::from_element(u, self.omega_rate),
            self.phi_shape,
            self.phi_rate,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HyperpriorsRaw {
    m_mu: DVector<f64>,
    q_mu: DMatrix<f64>,
    m_gamma: DVector<f64>,
    q_gamma: DMatrix<f64>,
    alpha_omega: DVector<f64>,
    beta_omega: DVector<f64>,
    alpha_phi: f64,
    beta_phi: f64,
}

/// Priors: MVN (mean, precision) on `mu` and `gamma`, Gamma (shape, rate) on each
/// `omega_j` and on `phi`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "HyperpriorsRaw", into = "HyperpriorsRaw")]
pub struct Hyperpriors {
    pub m_mu: DVector<f64>,
    pub q_mu: DMatrix<f64>,
    pub m_gamma: DVector<f64>,
    pub q_gamma: DMatrix<f64>,
    pub alpha_omega: DVector<f64>,
    pub beta_omega: DVector<f64>,
    pub alpha_phi: f64,
    pub beta_phi: f64,
    q_mu_chol: DMatrix<f64>,
    q_mu_log_det: f64,
    q_gamma_chol: DMatrix<f64>,
    q_gamma_log_det: f64,
}

impl TryFrom<HyperpriorsRaw> for Hyperpriors {
    type Error = Error;

    fn try_from(r: HyperpriorsRaw) -> Result<Self> {
        Hyperpriors::new(
            r.m_mu,
            r.q_mu,
            r.m_gamma,
            r.q_gamma,
            r.alpha_omega,
            r.beta_omega,
            r.alpha_phi,
            r.beta_phi,
        )
    }
}

impl From<Hyperpriors> for HyperpriorsRaw {
    fn from(h: Hyperpriors) -> Self {
        Self {
            m_mu: h.m_mu,
            q_mu: h.q_mu,
            m_gamma: h.m_gamma,
            q_gamma: h.q_gamma,
            alpha_omega: h.alpha_omega,
            beta_omega: h.beta_omega,
            alpha_phi: h.alpha_phi,
            beta_phi: h.beta_phi,
        }
    }
}

fn spd_factor(m: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    if m.nrows() != m.ncols() {
        return invalid(format!("{what} must be square"));
    }
    if m.nrows() == 0 {
        return Ok((m.clone(), 0.0));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return invalid(format!("{what} must be symmetric"));
    }
    let l = cholesky_lower(m)
        .ok_or_else(|| Error::SingularMatrix(format!("{what} is not positive definite")))?;
    let ld = log_det_from_lower(&l);
    Ok((l, ld))
}

impl Hyperpriors {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        m_mu: DVector<f64>,
        q_mu: DMatrix<f64>,
        m_gamma: DVector<f64>,
        q_gamma: DMatrix<f64>,
        alpha_omega: DVector<f64>,
        beta_omega: DVector<f64>,
        alpha_phi: f64,
        beta_phi: f64,
    ) -> Result<Self> {
        if q_mu.nrows() != m_mu.len() || q_gamma.nrows() != m_gamma.len() {
            return invalid("prior mean and precision dimensions differ");
        }
        if alpha_omega.len() != beta_omega.len() {
            return invalid("omega shape and rate vectors differ in length");
        }
        let all_pos = alpha_omega
            .iter()
            .chain(beta_omega.iter())
            .chain([alpha_phi, beta_phi].iter())
            .all(|&v| v > 0.0 && v.is_finite());
        if !all_pos {
            return invalid("Gamma shapes and rates must be positive");
        }
        let (q_mu_chol, q_mu_log_det) = spd_factor(&q_mu, "mu prior precision")?;
        let (q_gamma_chol, q_gamma_log_det) = spd_factor(&q_gamma, "gamma prior precision")?;
        Ok(Self {
            m_mu,
            q_mu,
            m_gamma,
            q_gamma,
            alpha_omega,
            beta_omega,
            alpha_phi,
            beta_phi,
            q_mu_chol,
            q_mu_log_det,
            q_gamma_chol,
            q_gamma_log_det,
        })
    }

    pub fn u(&self) -> usize {
        self.alpha_omega.len()
    }

    pub fn log_prior_mu(&self, mu: &DVector<f64>) -> f64 {
        mvn_log_density_precision(mu, &self.m_mu, &self.q_mu_chol, self.q_mu_log_det)
    }

    pub fn log_prior_gamma(&self, gamma: &DVector<f64>) -> f64 {
        if gamma.is_empty() {
            return 0.0;
        }
        mvn_log_density_precision(gamma, &self.m_gamma, &self.q_gamma_chol, self.q_gamma_log_det)
    }

    pub fn log_prior_omega(&self, j: usize, omega: f64) -> f64 {
        gamma_log_density(omega, self.alpha_omega[j], self.beta_omega[j])
    }

    pub fn log_prior_phi(&self, phi: f64) -> f64 {
        gamma_log_density(phi, self.alpha_phi, self.beta_phi)
    }

    fn check_against(&self, state: &ParamState) -> Result<()> {
        if self.m_mu.len() != state.mu.len()
            || self.m_gamma.len() != state.gamma.len()
            || self.u() != state.u()
        {
            return invalid("hyperprior dimensions do not match the parameter state");
        }
        Ok(())
    }
}

/// Gamma(shape, rate) log density.
pub fn gamma_log_density(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// `Psi = 1 mu^T + B W Gamma^T` without dimension checks.
pub(crate) fn logits_raw(
    mu: &DVector<f64>,
    w: &DMatrix<f64>,
    gamma_mat: &DMatrix<f64>,
    basis: &DMatrix<f64>,
) -> DMatrix<f64> {
    let eta = basis * w;
    let mut psi = &eta * gamma_mat.transpose();
    add_row_offset(&mut psi, mu);
    psi
}

pub(crate) fn add_row_offset(psi: &mut DMatrix<f64>, mu: &DVector<f64>) {
    for (j, mut col) in psi.column_iter_mut().enumerate() {
        col.add_scalar_mut(mu[j]);
    }
}

pub fn compute_logits(state: &ParamState, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    state.validate()?;
    if basis.ncols() != state.k() {
        return invalid(format!(
            "basis has {} knot columns but W has {} knot rows",
            basis.ncols(),
            state.k()
        ));
    }
    Ok(logits_raw(&state.mu, &state.w, &state.gamma_matrix(), basis))
}

/// Log-likelihood of row `i` without the multinomial normalizing constant.
#[inline]
pub(crate) fn row_log_lik_kernel(psi: &DMatrix<f64>, data: &Dataset, i: usize) -> f64 {
    let r = psi.ncols();
    let y = data.counts_f64();
    let mut dot = 0.0;
    for j in 0..r {
        dot += y[(i, j)] * psi[(i, j)];
    }
    let lse = log_one_plus_sum_exp((0..r).map(|j| psi[(i, j)]));
    dot - data.trials()[i] as f64 * lse
}

/// Sum of the row kernels (constants dropped).
pub(crate) fn log_lik_kernel(psi: &DMatrix<f64>, data: &Dataset) -> f64 {
    (0..data.n()).map(|i| row_log_lik_kernel(psi, data, i)).sum()
}

pub fn pointwise_log_lik_from_logits(psi: &DMatrix<f64>, data: &Dataset) -> DVector<f64> {
    DVector::from_iterator(
        data.n(),
        (0..data.n()).map(|i| row_log_lik_kernel(psi, data, i) + data.log_normalizer(i)),
    )
}

fn check_data(state: &ParamState, data: &Dataset, basis: &DMatrix<f64>) -> Result<()> {
    if data.n_classes() != state.n_classes() {
        return invalid(format!(
            "dataset has {} classes, state has {}",
            data.n_classes(),
            state.n_classes()
        ));
    }
    if basis.nrows() != data.n() {
        return invalid(format!(
            "basis has {} rows for {} observations",
            basis.nrows(),
            data.n()
        ));
    }
    Ok(())
}

pub fn pointwise_log_likelihood(
    state: &ParamState,
    data: &Dataset,
    basis: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_data(state, data, basis)?;
    let psi = compute_logits(state, basis)?;
    Ok(pointwise_log_lik_from_logits(&psi, data))
}

/// Multinomial log-likelihood including normalizing constants.
pub fn log_likelihood(state: &ParamState, data: &Dataset, basis: &DMatrix<f64>) -> Result<f64> {
    Ok(pointwise_log_likelihood(state, data, basis)?.sum())
}

/// `sum_j log MVN(w_j | 0, (omega_j Q)^{-1})`.
pub fn log_prior_w(state: &ParamState, spatial: &SpatialBasis) -> f64 {
    let k = state.k() as f64;
    (0..state.u())
        .map(|j| {
            let w = state.w.column(j).clone_owned();
            let om = state.omega[j];
            0.5 * k * om.ln() + 0.5 * spatial.log_det_q()
                - 0.5 * k * LN_2PI
                - 0.5 * om * spatial.quad_form(&w)
        })
        .sum()
}

/// Joint log posterior up to the (parameter-free) evidence.
pub fn log_posterior_unnormalized(
    state: &ParamState,
    data: &Dataset,
    spatial: &SpatialBasis,
    basis: &DMatrix<f64>,
    priors: &Hyperpriors,
) -> Result<f64> {
    state.validate()?;
    priors.check_against(state)?;
    if spatial.k() != state.k() {
        return invalid("spatial basis and W disagree on the number of knots");
    }
    let ll = log_likelihood(state, data, basis)?;
    let omega_prior: f64 = (0..state.u())
        .map(|j| priors.log_prior_omega(j, state.omega[j]))
        .sum();
    Ok(ll
        + priors.log_prior_mu(&state.mu)
        + log_prior_w(state, spatial)
        + omega_prior
        + priors.log_prior_gamma(&state.gamma)
        + priors.log_prior_phi(state.phi))
}
