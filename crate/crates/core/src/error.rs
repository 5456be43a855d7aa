use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix `{0}` is not symmetric")]
    NotSymmetric(&'static str),

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("no stabilizing initial gain found: {0}")]
    NoStabilizingGain(String),

    #[error("R + D'PD lost positive definiteness at iteration {iteration}")]
    IndefiniteWeight { iteration: usize },

    #[error("{what} did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("scalar root check failed: solver gave {solver}, maximal root is {root}")]
    RootMismatch { solver: f64, root: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("Hamiltonian matrix has an eigenvalue on the imaginary axis (min |Re| = {0:e})")]
    ImaginaryAxisEigenvalue(f64),

    #[error("time grid mismatch: {0}")]
    GridMismatch(String),

    #[error("class mismatch: {0}")]
    ClassMismatch(String),

    #[error("simulation blow-up: {excluded} of {total} replications produced non-finite states")]
    BlowUp { excluded: usize, total: usize },

    #[error("missing paths: {0}")]
    MissingPaths(String),

    #[error("unsupported: {0}")]
    Unsupported(String),
}
