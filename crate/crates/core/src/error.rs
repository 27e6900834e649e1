use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("group mismatch: {0}")]
    GroupMismatch(String),

    #[error("window too small: {what} needs window radius >= {required_radius}")]
    WindowTooSmall { what: String, required_radius: i64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid complex: {0}")]
    InvalidComplex(String),

    #[error("cover too large: {cells} cells exceeds cap {cap}")]
    CoverTooLarge { cells: usize, cap: usize },

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("Forman condition violated at {cell}: {reason}")]
    Forman { cell: String, reason: String },

    #[error("degree mismatch: {0}")]
    DegreeMismatch(String),

    #[error("tile {tile} lies outside the exactness margin (margin {margin})")]
    OutsideMargin { tile: String, margin: String },

    #[error("deformation overflow: t * osc(f) = {product:.3} > 300; rescale f or lower t")]
    Overflow { product: f64 },

    #[error("polynomial degree {degree} required for eps {eps:e} exceeds cap {cap}")]
    DegreeCap { degree: usize, eps: f64, cap: usize },

    #[error("numerical ambiguity: {0}")]
    Ambiguous(String),

    #[error("heat trace not monotone: {0}")]
    NotMonotone(String),

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
