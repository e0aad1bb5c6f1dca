use thiserror::Error;

/// Errors raised by the sensing library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bin ({n}, {m}) outside the periodogram grid")]
    BinOutOfDomain { n: f64, m: f64 },

    #[error("range {range} m / speed {speed} m/s outside the unambiguous region")]
    TargetOutOfDomain { range: f64, speed: f64 },

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("grid {grid:?} smaller than CFAR window {window:?}")]
    GridTooSmall {
        grid: (usize, usize),
        window: (usize, usize),
    },
}

pub type Result<T> = std::result::Result<T, Error>;
