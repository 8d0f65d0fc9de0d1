//! Knot sets, the exponential-kernel knot precision `Q(phi)` and the basis matrix `B(phi)`.
//!
//! Both matrices use the same kernel, `exp(-d / phi)` with Euclidean distance `d`, so the
//! basis evaluated at the knots reproduces `Q` exactly.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky_lower, log_det_from_lower, quad_form};

const CHOLESKY_JITTER: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned rectangle `[xmin, xmax] x [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Result<Self> {
        let b = Self {
            xmin,
            xmax,
            ymin,
            ymax,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn unit_square() -> Self {
        Self {
            xmin: 0.0,
            xmax: 1.0,
            ymin: 0.0,
            ymax: 1.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = [self.xmin, self.xmax, self.ymin, self.ymax]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.xmax <= self.xmin || self.ymax <= self.ymin {
            return invalid(format!(
                "degenerate bounds [{}, {}] x [{}, {}]",
                self.xmin, self.xmax, self.ymin, self.ymax
            ));
        }
        Ok(())
    }
}

/// Regular `nx x ny` grid of cell centres over `bounds`, row-major (x varies fastest).
///
/// A 1x1 grid is the centre of the rectangle.
pub fn grid_locations(nx: usize, ny: usize, bounds: &Bounds) -> Result<Vec<Location>> {
    if nx == 0 || ny == 0 {
        return invalid(format!("grid dimensions must be positive, got {nx}x{ny}"));
    }
    bounds.validate()?;
    let dx = (bounds.xmax - bounds.xmin) / nx as f64;
    let dy = (bounds.ymax - bounds.ymin) / ny as f64;
    let mut out = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            out.push(Location::new(
                bounds.xmin + (ix as f64 + 0.5) * dx,
                bounds.ymin + (iy as f64 + 0.5) * dy,
            ));
        }
    }
    Ok(out)
}

/// Ordered set of distinct knot locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    knots: Vec<Location>,
}

impl KnotSet {
    pub fn new(knots: Vec<Location>) -> Result<Self> {
        if knots.is_empty() {
            return invalid("a knot set needs at least one knot");
        }
        if let Some(i) = knots.iter().position(|l| !l.is_finite()) {
            return invalid(format!("knot {i} has non-finite coordinates"));
        }
        let mut seen = HashSet::with_capacity(knots.len());
        for (i, l) in knots.iter().enumerate() {
            if !seen.insert(location_key(l)) {
                return invalid(format!("knot {i} at ({}, {}) is a duplicate", l.x, l.y));
            }
        }
        Ok(Self { knots })
    }

    pub fn len(&self) -> usize {
        self.knots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.knots.is_empty()
    }

    pub fn as_slice(&self) -> &[Location] {
        &self.knots
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Location> {
        self.knots.iter()
    }

    /// Closest pair of knots, used to explain Cholesky failures.
    fn closest_pair(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..self.knots.len() {
            for j in (i + 1)..self.knots.len() {
                let d = self.knots[i].distance(&self.knots[j]);
                if best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((i, j, d));
                }
            }
        }
        best
    }
}

fn location_key(l: &Location) -> (u64, u64) {
    // normalise -0.0 so it collides with 0.0
    ((l.x + 0.0).to_bits(), (l.y + 0.0).to_bits())
}

pub fn build_knot_grid(nx: usize, ny: usize, bounds: &Bounds) -> Result<KnotSet> {
    KnotSet::new(grid_locations(nx, ny, bounds)?)
}

/// Picks `k` distinct locations without replacement; deterministic in `seed`.
pub fn subsample_knots(locations: &[Location], k: usize, seed: u64) -> Result<KnotSet> {
    if k == 0 {
        return invalid("number of knots must be positive");
    }
    let mut seen = HashSet::with_capacity(locations.len());
    let distinct: Vec<Location> = locations
        .iter()
        .filter(|l| seen.insert(location_key(l)))
        .copied()
        .collect();
    if k > distinct.len() {
        return invalid(format!(
            "requested {k} knots but only {} distinct locations are available",
            distinct.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, distinct.len(), k);
    KnotSet::new(picked.iter().map(|i| distinct[i]).collect())
}

pub(crate) fn distance_matrix(from: &[Location], to: &[Location]) -> DMatrix<f64> {
    DMatrix::from_fn(from.len(), to.len(), |i, j| from[i].distance(&to[j]))
}

pub(crate) fn kernel_from_distances(distances: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let inv = 1.0 / phi;
    distances.map(|d| (-d * inv).exp())
}

fn check_phi(phi: f64) -> Result<()> {
    if !(phi.is_finite() && phi > 0.0) {
        return invalid(format!("range phi must be positive and finite, got {phi}"));
    }
    Ok(())
}

/// Knot set together with `Q(phi)`, its lower Cholesky factor and `log det Q`.
#[derive(Debug, Clone)]
pub struct SpatialBasis {
    knots: KnotSet,
    phi: f64,
    q: DMatrix<f64>,
    q_chol: DMatrix<f64>,
    log_det_q: f64,
}

impl SpatialBasis {
    pub fn knots(&self) -> &KnotSet {
        &self.knots
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn k(&self) -> usize {
        self.knots.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn q_chol(&self) -> &DMatrix<f64> {
        &self.q_chol
    }

    pub fn log_det_q(&self) -> f64 {
        self.log_det_q
    }

    /// `w^T Q w`.
    pub fn quad_form(&self, w: &nalgebra::DVector<f64>) -> f64 {
        quad_form(&self.q, w)
    }

    /// `B(phi)` at the given locations.
    pub fn basis(&self, locations: &[Location]) -> DMatrix<f64> {
        kernel_from_distances(
            &distance_matrix(locations, self.knots.as_slice()),
            self.phi,
        )
    }

    pub(crate) fn from_distances(
        knots: KnotSet,
        knot_distances: &DMatrix<f64>,
        phi: f64,
    ) -> Result<Self> {
        check_phi(phi)?;
        let q = kernel_from_distances(knot_distances, phi);
        let q_chol = match cholesky_lower(&q) {
            Some(l) => l,
            None => {
                let mut jittered = q.clone();
                for i in 0..jittered.nrows() {
                    jittered[(i, i)] += CHOLESKY_JITTER;
                }
                match cholesky_lower(&jittered) {
                    Some(l) => {
                        log::warn!(
                            "Q(phi={phi}) needed {CHOLESKY_JITTER:e} diagonal jitter to factorize"
                        );
                        l
                    }
                    None => {
                        let detail = match knots.closest_pair() {
                            Some((i, j, d)) => format!(
                                "Q(phi={phi}) failed Cholesky; closest knots {i} and {j} are {d:e} apart"
                            ),
                            None => format!("Q(phi={phi}) failed Cholesky"),
                        };
                        return Err(Error::SingularMatrix(detail));
                    }
                }
            }
        };
        let log_det_q = log_det_from_lower(&q_chol);
        Ok(Self {
            knots,
            phi,
            q,
            q_chol,
            log_det_q,
        })
    }
}

/// Builds `Q_ij = exp(-||l_i - l_j|| / phi)` and caches its Cholesky factor.
pub fn build_precision(knots: &KnotSet, phi: f64) -> Result<SpatialBasis> {
    check_phi(phi)?;
    let d = distance_matrix(knots.as_slice(), knots.as_slice());
    SpatialBasis::from_distances(knots.clone(), &d, phi)
}

/// `B_mi = exp(-||s_m - l_i|| / phi)`, an `n x k` matrix.
pub fn build_basis(locations: &[Location], knots: &KnotSet, phi: f64) -> Result<DMatrix<f64>> {
    check_phi(phi)?;
    if let Some(i) = locations.iter().position(|l| !l.is_finite()) {
        return invalid(format!("location {i} has non-finite coordinates"));
    }
    Ok(kernel_from_distances(
        &distance_matrix(locations, knots.as_slice()),
        phi,
    ))
}

/// Distances kept around so `Q(phi)` and `B(phi)` can be rebuilt cheaply for new `phi`.
#[derive(Debug, Clone)]
pub struct BasisCache {
    knots: KnotSet,
    knot_distances: DMatrix<f64>,
    obs_distances: DMatrix<f64>,
    spatial: SpatialBasis,
    basis: DMatrix<f64>,
}

impl BasisCache {
    pub fn new(knots: &KnotSet, locations: &[Location], phi: f64) -> Result<Self> {
        check_phi(phi)?;
        let knot_distances = distance_matrix(knots.as_slice(), knots.as_slice());
        let obs_distances = distance_matrix(locations, knots.as_slice());
        let spatial = SpatialBasis::from_distances(knots.clone(), &knot_distances, phi)?;
        let basis = kernel_from_distances(&obs_distances, phi);
        Ok(Self {
            knots: knots.clone(),
            knot_distances,
            obs_distances,
            spatial,
            basis,
        })
    }

    pub fn spatial(&self) -> &SpatialBasis {
        &self.spatial
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn phi(&self) -> f64 {
        self.spatial.phi
    }

    /// Scratch evaluation at another `phi`; the cache itself is untouched.
    pub fn evaluate(&self, phi: f64) -> Result<(SpatialBasis, DMatrix<f64>)> {
        let spatial = SpatialBasis::from_distances(self.knots.clone(), &self.knot_distances, phi)?;
        let basis = kernel_from_distances(&self.obs_distances, phi);
        Ok((spatial, basis))
    }

    pub fn install(&mut self, spatial: SpatialBasis, basis: DMatrix<f64>) {
        self.spatial = spatial;
        self.basis = basis;
    }

    pub fn set_phi(&mut self, phi: f64) -> Result<()> {
        let (s, b) = self.evaluate(phi)?;
        self.install(s, b);
        Ok(())
    }
}

/// `B(phi)` at a fixed set of locations, rebuilt only when `phi` changes.
#[derive(Debug, Clone)]
pub struct LocationBasis {
    distances: DMatrix<f64>,
    phi: f64,
    basis: DMatrix<f64>,
}

impl LocationBasis {
    pub fn new(locations: &[Location], knots: &KnotSet) -> Result<Self> {
        if let Some(i) = locations.iter().position(|l| !l.is_finite()) {
            return invalid(format!("location {i} has non-finite coordinates"));
        }
        let distances = distance_matrix(locations, knots.as_slice());
        Ok(Self {
            basis: DMatrix::zeros(distances.nrows(), distances.ncols()),
            distances,
            phi: f64::NAN,
        })
    }

    pub fn at(&mut self, phi: f64) -> Result<&DMatrix<f64>> {
        check_phi(phi)?;
        if phi.to_bits() != self.phi.to_bits() {
            self.basis = kernel_from_distances(&self.distances, phi);
            self.phi = phi;
        }
        Ok(&self.basis)
    }
}
