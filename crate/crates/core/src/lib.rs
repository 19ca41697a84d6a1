//! Exponential-family variational posteriors in natural/expectation coordinates,
//! their dual (site-product) representation, and four adaptation engines built
//! on top of it: continual updates, influence/unlearning estimators, model
//! merging, and federated aggregation.
//!
//! The central object is the pair of coordinate systems on a minimal
//! exponential family `q(θ) ∝ h(θ) exp⟨T(θ), λ⟩`: natural parameters `λ` and
//! expectation parameters `μ = E_q[T(θ)]`, linked by a bijective Legendre
//! transform. A variational solution over losses `ℓ_0..ℓ_t` factorizes into
//! per-loss conjugate *sites* whose payloads are natural gradients of the
//! expected losses; every engine in this crate is a different way of reusing,
//! perturbing, or re-aggregating those sites.
//!
//! Module map:
//!
//! - [`expfam`]: families, Legendre transforms, KL, entropy, sampling, factor
//!   algebra (products / divisions / powers of Gaussian-like factors).
//! - [`losses`]: data-indexed loss terms with exact derivatives and pluggable
//!   estimators for `E_q[ℓ]`, `E_q[∇ℓ]`, `E_q[∇²ℓ]`.
//! - [`sites`]: site construction, the dual residual (stationarity check),
//!   correction terms, and representer identities.
//! - [`blr`]: the natural-parameter moving-average solver, an ERM mode,
//!   checkpoint-boosted runs, and information gain.
//! - [`continual`], [`influence`], [`merge`], [`federated`]: the adaptation
//!   engines.
//! - [`jsonio`]: versioned JSON container with bit-exact float round-trips.

pub mod blr;
pub mod continual;
pub mod error;
pub mod expfam;
pub mod federated;
pub mod influence;
pub mod jsonio;
pub mod linalg;
pub mod losses;
pub mod merge;
pub mod sites;


pub use error::CoreError;
pub use expfam::{
    factor_combine, ExpFamDist, ExpectationParams, Family, FamilyKind, NaturalParams,
};
pub use losses::{Dataset, Estimator, LossTerm, Predictor};


/// Crate result alias.
pub type Result<T> = std::result::Result<T, CoreError>;
