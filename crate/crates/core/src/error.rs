use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layer shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("density {0} outside [0, 1]")]
    InvalidDensity(f64),

    #[error("block {rows}x{cols} exceeds the {max} bit mask width")]
    BlockTooLarge { rows: usize, cols: usize, max: usize },

    #[error("block coordinate {0} out of range (grid has {1} blocks)")]
    BlockOutOfRange(usize, usize),

    #[error("corrupt block-sparse tensor: {0}")]
    CsbCorrupt(String),

    #[error("bad network config: {0}")]
    BadConfig(String),

    #[error("training diverged (non-finite loss) at iteration {0}")]
    Diverged(u64),

    #[error("no legal tiling: {0}")]
    Infeasible(String),

    #[error("half-tile pairing needs an even count, got {0}")]
    OddHalfCount(usize),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
