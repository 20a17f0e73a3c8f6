use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box [{x1}, {y1}, {x2}, {y2}]: {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("patch index {index} out of range for grid with {len} patches")]
    PatchIndex { index: usize, len: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate Gaussian label: total patch mass underflowed to zero (sigma_x={sigma_x}, sigma_y={sigma_y})")]
    DegenerateGaussian { sigma_x: f64, sigma_y: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("element placement failed after {attempts} attempts for element {element}; use fewer or smaller elements")]
    Placement { element: usize, attempts: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors that stem from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateGaussian { .. })
    }
}
