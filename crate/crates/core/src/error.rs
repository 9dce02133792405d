use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coefficient bound violated at cell (level {level}, x' cell {xprime}, x_d cell {xd}): {reason}")]
    CoefficientBounds {
        level: usize,
        xprime: usize,
        xd: usize,
        reason: String,
    },

    #[error("invalid coefficient family: {0}")]
    InvalidFamily(String),

    #[error("empty cylinder intersection: {0}")]
    EmptyCylinder(String),

    #[error("cylinder leaves the truncated domain: {0}")]
    CylinderOutsideDomain(String),

    #[error("assembly failed: {0}")]
    Assembly(String),

    #[error("non-finite data: {0}")]
    NonFinite(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular pivot at row {0}")]
    SingularPivot(usize),

    #[error("time step {level} failed: {source}")]
    TimeStep {
        level: usize,
        #[source]
        source: Box<LabError>,
    },

    #[error("invalid norm parameters: {0}")]
    InvalidNorm(String),

    #[error("invalid manufactured case: {0}")]
    InvalidCase(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
