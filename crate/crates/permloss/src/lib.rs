//! Permutation-equivariant relative-margin multiclass losses.
//!
//! Every loss in this crate is assembled from one symmetric "template"
//! `ψ: R^(k-1) -> R` and a fixed family of signed permutation-like matrices
//! `ρ_1, …, ρ_k` (the label code): the loss of predicting score vector
//! `v ∈ R^k` when the true class is `y` is
//!
//! ```text
//!     L_y(v) = ψ(ρ_y · D·v),        D·v = (v_k − v_1, …, v_k − v_{k−1}),
//! ```
//!
//! i.e. the template applied to the class-`y` view of the relative margins.
//! This one construction reproduces cross-entropy, multiclass exponential,
//! hinge variants, and every Fenchel-Young loss built from a symmetric
//! negentropy, and it makes the structural facts (equivariance under class
//! relabelling, M-matrix structure of the risk system, link/inverse-link
//! duality, truncation to fewer classes) checkable by machine.
//!
//! Module map:
//! - [`label_code`]: the `ρ_y` / `D` matrices and their exact identities.
//! - [`template`]: built-in templates, combinators, and loss assembly.
//! - [`calculus`]: probability vectors, finite differences, conditional
//!   risk, its gradient/Hessian, and the M-matrix probe for `A(z)`.
//! - [`link`]: Newton solver for the risk minimizer and its inverse.
//! - [`truncation`]: class-removal limits `λ → ∞` and closed forms.
//! - [`regularity`]: sampled checks of the template regularity conditions.
//! - [`fenchel_young`]: negentropies, the FY template evaluator (mirror
//!   ascent with a duality-gap certificate), and truncation commuting.
//! - [`calibration`]: argmax/margin equivalence and the conditional-risk
//!   inequality probe behind calibration claims.
//! - [`dataset`] / [`train`]: Gaussian-mixture data, CSV I/O, and a
//!   deterministic full-batch ERM trainer for linear scorers.
//! - [`loss_spec`]: the JSON description of a loss accepted by the CLI.
//! - [`report`]: JSON serialization with full-precision floats.

pub mod calculus;
pub mod calibration;
pub mod dataset;
pub mod fenchel_young;
pub mod label_code;
pub mod link;
pub mod loss_spec;
pub mod regularity;
pub mod report;
pub mod template;
pub mod train;
pub mod truncation;

/// Errors shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Class count below the minimum the construction supports.
    #[error("class count must be at least {min}, got {got}")]
    InvalidArity { min: usize, got: usize },

    /// Class label outside `1..=k`.
    #[error("class label {y} out of range 1..={k}")]
    ClassOutOfRange { y: usize, k: usize },

    /// A vector or matrix had the wrong dimension for the operation.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// Derivatives requested from a non-smooth template.
    #[error("template '{0}' is not differentiable")]
    NonSmooth(String),

    /// The template has first derivatives but no closed-form Hessian.
    #[error("template '{0}' has no closed-form Hessian")]
    HessianUnavailable(String),

    /// No derivative path exists (e.g. through a numeric limit), even
    /// though the underlying function may be differentiable.
    #[error("derivatives of '{0}' are not available")]
    DerivativeUnavailable(String),

    /// Template input beyond the documented overflow cap.
    #[error("input {value} exceeds the overflow cap {cap} for template '{name}'")]
    InputCap { name: String, value: f64, cap: f64 },

    /// Invalid probability vector.
    #[error("invalid probability vector: {0}")]
    InvalidProbability(String),

    /// The requested minimizer does not exist (boundary distribution).
    #[error("no risk minimizer exists: {0}")]
    NoMinimizer(String),

    /// An iterative solver stopped without meeting its tolerance.
    #[error("solver did not converge: {0}")]
    SolverFailure(String),

    /// A linear system was numerically singular.
    #[error("degenerate linear system: {0}")]
    DegenerateSystem(String),

    /// A quantity required to be positive (or a structural inequality) failed.
    #[error("regularity violation: {0}")]
    RegularityViolation(String),

    /// A limit schedule ran out of budget without stabilizing.
    #[error("limit did not stabilize: {0}")]
    LimitDiverged(String),

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A scalar transform failed its monotonicity/convexity validation.
    #[error("invalid scalar transform: {0}")]
    InvalidTransform(String),

    /// A JSON loss description was malformed or unsupported.
    #[error("invalid loss description: {0}")]
    InvalidLossSpec(String),

    /// Dataset shape or label problems.
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Validate a class label against an arity.
    pub(crate) fn check_class(y: usize, k: usize) -> Result<()> {
        if y == 0 || y > k {
            Err(Error::ClassOutOfRange { y, k })
        } else {
            Ok(())
        }
    }

    /// Validate a slice length.
    pub(crate) fn check_len(got: usize, expected: usize) -> Result<()> {
        if got != expected {
            Err(Error::DimensionMismatch { expected, got })
        } else {
            Ok(())
        }
    }
}
