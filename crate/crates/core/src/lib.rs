//! Bayesian inference for reduced-rank spatial multinomial models.
//!
//! Class logits are modelled as `psi(s) = mu + Gamma W^T b(s)`, where `b(s)` is a
//! fixed-rank (predictive process) exponential basis over `k` knots, `W` holds the
//! knot weights of `u` latent spatial factors and `Gamma` is a unit-lower-triangular
//! factor matrix that makes the factorization identifiable. Posterior sampling uses
//! a Metropolis-within-Gibbs cycle with Laplace-approximation proposals.
//!
//! Module map:
//!
//! - [`spatial_basis`]: knots, the exponential-kernel precision `Q(phi)` and basis `B(phi)`.
//! - [`model`]: data, parameter state, softmax link, logits and log densities.
//! - [`derivatives`]: analytic gradients and Hessians of the block conditionals.
//! - [`sampler`]: Newton-Raphson modes, Laplace-proposal MH, the Gibbs cycle and chains.
//! - [`selection`]: WAIC, PSIS-LOO, out-of-sample lpd and ternary search over `u`.
//! - [`prediction`]: posterior predictive surfaces, class unions and area summaries.
//! - [`simulation`]: synthetic data and the two simulation studies.
//! - [`io`]: CSV datasets, run configuration and the chain artifact format.
//! - [`diagnostics`]: posterior summaries, effective sample size and split R-hat.

pub mod derivatives;
pub mod diagnostics;
mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod prediction;
pub mod sampler;
pub mod selection;
pub mod simulation;
pub mod spatial_basis;

pub use error::{Error, Result};
pub use model::{Dataset, FactorMatrix, Hyperpriors, ParamState, PriorSpec};
pub use sampler::{ChainStore, SamplerConfig};
pub use spatial_basis::{KnotSet, Location, SpatialBasis};
