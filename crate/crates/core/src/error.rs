//! Error type shared by all modules.

use num_complex::Complex64;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Knot sequence is not a strictly increasing partition of [0, 1].
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    /// Input data violates a schema or structural precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Cellwise differentiation refused: the function jumps at an interior
    /// knot, so the classical derivative would silently drop a delta term.
    #[error("discontinuous at knot x = {x}: jump magnitude {jump:.3e}")]
    DiscontinuousAtKnot { x: f64, jump: f64 },

    /// Index outside the valid range for the requested order.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    /// Matrix does not satisfy the sparsity pattern of its class.
    #[error("pattern violation: {0}")]
    PatternViolation(String),

    /// An anti-diagonal basis system was singular. The basis matrices are
    /// provably independent, so this indicates an internal inconsistency.
    #[error("basis matrices singular on anti-diagonal {diag} (internal)")]
    SingularBasis { diag: usize },

    /// Family parameter key outside {(nu, i) : i < i_nu}.
    #[error("family parameter key out of range: nu = {nu}, i = {i}")]
    KeyRangeError { nu: usize, i: usize },

    /// Adaptive integrator could not meet the tolerance with a step
    /// above the hard floor.
    #[error("integration step underflow at x = {x:.6}")]
    StepUnderflow { x: f64 },

    /// The terminal-condition system is numerically singular, meaning
    /// lambda is within solver resolution of an eigenvalue pole.
    #[error("lambda = {lambda} is too close to an eigenvalue (cond = {cond:.3e})")]
    NearEigenvalue { lambda: Complex64, cond: f64 },

    /// Boundary phase tracking failed to produce a stable integer winding.
    #[error("winding computation unstable on region boundary")]
    WindingUnstable,

    /// Number of refined roots disagrees with the boundary winding number.
    #[error("winding mismatch: boundary predicts {expected} zeros, refinement found {found}")]
    WindingMismatch { expected: i64, found: i64 },

    /// Laurent data shows a second-order coefficient too large for a
    /// simple pole; weight matrix is not computed.
    #[error("pole at lambda = {lambda} is not simple (|M_<-2>| / |M_<-1>| = {ratio:.3e})")]
    NonSimplePole { lambda: Complex64, ratio: f64 },

    /// Constant Laurent coefficient not invertible within conditioning bounds.
    #[error("M_<0> singular at pole lambda = {lambda} (cond = {cond:.3e})")]
    SingularM0 { lambda: Complex64, cond: f64 },

    /// The two inputs regularize different coefficient sets, so invariance
    /// statements do not apply.
    #[error("associated matrices regularize different coefficient sets (distance {dist:.3e})")]
    SignatureMismatch { dist: f64 },

    /// Eigenvalue sets of the two inputs do not match within tolerance.
    #[error("eigenvalue sets differ between associated matrices: {0}")]
    SpectrumMismatch(String),

    /// Dense linear solve hit a zero pivot.
    #[error("singular linear system: {0}")]
    Singular(String),
}
