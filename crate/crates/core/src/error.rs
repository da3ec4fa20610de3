use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("symmetry violation: {count} mirror-paired voxels disagree")]
    SymmetryViolation { count: usize },

    #[error("grid has no solid voxels")]
    EmptyGrid,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("solver did not converge: relative residual {residual:.3e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("invalid density field: {0}")]
    InvalidDensity(String),

    #[error("degenerate tensor: {0}")]
    DegenerateTensor(String),

    #[error("degenerate normalization range for component {0}")]
    DegenerateRange(String),

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("insufficient data: {got} records, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, printed by the command-line front end.
    pub fn name(&self) -> &'static str {
        match self {
            Error::SymmetryViolation { .. } => "SymmetryViolation",
            Error::EmptyGrid => "EmptyGrid",
            Error::BadMagic { .. } => "BadMagic",
            Error::BadVersion(_) => "BadVersion",
            Error::TruncatedPayload { .. } => "TruncatedPayload",
            Error::ResolutionMismatch(_) => "ResolutionMismatch",
            Error::SolverDiverged { .. } => "SolverDiverged",
            Error::InvalidDensity(_) => "InvalidDensity",
            Error::DegenerateTensor(_) => "DegenerateTensor",
            Error::DegenerateRange(_) => "DegenerateRange",
            Error::EmptyManifest => "EmptyManifest",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}
