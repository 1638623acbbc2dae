use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel side must be odd, got {0}")]
    EvenKernelSide(usize),

    #[error(
        "maximal degree N = {degree} exceeds the spherical Nyquist bound floor(pi*c/4) = {bound} for kernel side c = {side}"
    )]
    NyquistExceeded {
        degree: usize,
        side: usize,
        bound: usize,
    },

    #[error("degree mismatch: coefficients have N = {coefficients}, profiles have N = {profiles}")]
    DegreeMismatch { coefficients: usize, profiles: usize },

    #[error("kernel side {kernel} larger than input dimension {input}")]
    KernelTooLarge { kernel: usize, input: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("stale cache: {0}")]
    StaleCache(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
