//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    /// A metric whose denominator (or label set) is degenerate. Surfaced to
    /// the harness, which records the cell as absent instead of a number.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("clean/infected pairing mismatch: {0}")]
    PairingMismatch(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("malformed data: {0}")]
    MalformedData(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
