use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: dtype mismatch ({lhs} vs {rhs})")]
    DtypeMismatch {
        op: &'static str,
        lhs: &'static str,
        rhs: &'static str,
    },

    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    #[error("{op}: index {index} out of range (limit {limit})")]
    OutOfRange {
        op: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("block kind `{0}` is not reversible")]
    NotReversible(&'static str),

    #[error("trace does not match model: {0}")]
    TraceMismatch(String),

    #[error("reconstruction diverged at layer {layer}: norm {reconstructed:.3e} vs forward {forward:.3e}")]
    ReconstructionDiverged {
        layer: usize,
        reconstructed: f64,
        forward: f64,
    },

    #[error("fixed-point iteration diverged at iterate {iterate}: norm grew by {growth:.3e}")]
    FixedPointDiverged { iterate: usize, growth: f64 },

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
}
