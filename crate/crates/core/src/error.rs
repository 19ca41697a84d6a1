//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors surfaced by distribution algebra, estimators, solvers and engines.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Natural parameters do not describe a valid member of the family
    /// (implied precision not positive definite, probability out of range, ...).
    #[error("invalid natural parameters: {0}")]
    InvalidNatural(String),

    /// Expectation parameters outside the valid mean domain.
    #[error("invalid expectation parameters: {0}")]
    InvalidExpectation(String),

    /// Two distributions of different family or dimension were combined.
    #[error("family mismatch: {0}")]
    KindMismatch(String),

    /// A factor product/division left the natural-parameter cone, e.g. a
    /// division produced an indefinite precision.
    #[error("combined factor is not a valid distribution: {0}")]
    IndefiniteResult(String),

    /// The requested estimator cannot handle this loss (e.g. quadrature on a
    /// loss that does not reduce to a scalar output).
    #[error("unsupported estimator: {0}")]
    UnsupportedEstimator(String),

    /// The loss does not reduce to a scalar linear output.
    #[error("loss is not reducible to a scalar-output form")]
    NonReducible,

    /// A second-order operation was requested on a predictor without ∇²f.
    #[error("predictor does not provide a second derivative")]
    MissingSecondDerivative,

    /// A Hessian that must be inverted is (numerically) singular.
    #[error("singular Hessian: {0}")]
    SingularHessian(String),

    /// A site required by the operation was not supplied.
    #[error("missing site for loss index {0}")]
    MissingSite(usize),

    /// Solver hit the iteration budget. Carries the best iterate found.
    #[error("solver exceeded {iters} iterations (dual residual {residual:.3e})")]
    MaxItersExceeded {
        iters: usize,
        residual: f64,
        best: Box<crate::blr::SolveResult>,
    },

    /// The posterior handed in is not a stationary point, so identities that
    /// assume convergence do not apply.
    #[error("posterior is not converged (dual residual {0:.3e})")]
    NotConverged(f64),

    /// The operation is only defined for a restricted family.
    #[error("family restriction: {0}")]
    FamilyRestriction(String),

    /// Replay and prediction-matching memory sets intersect.
    #[error("replay and prediction-matching sets must be disjoint")]
    OverlapError,

    /// Mismatched vector/matrix dimensions.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A federated run blew up; carried as a typed outcome by the driver, and
    /// as an error by low-level aggregation steps.
    #[error("diverged at round {0}")]
    Diverged(usize),

    /// Bad run configuration (schema violation, missing file, bad field).
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Underlying I/O failure while reading data files.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
