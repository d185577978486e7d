use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum StepError {
    /// A shape argument is invalid on its own (e.g. even CS-LBP kernel side).
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Two otherwise valid shapes do not compose.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A value outside {-1, 0, +1} was handed to the ternary encoder.
    #[error("non-ternary value {0} at element {1}")]
    NonTernary(i8, usize),

    /// Stored bytes decode to the reserved 2-bit code or fail an integrity check.
    #[error("corrupt data: {0}")]
    Corrupt(String),

    /// A file does not follow its documented layout.
    #[error("format error: {0}")]
    Format(String),

    /// A declarative config is self-inconsistent.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StepError>;
