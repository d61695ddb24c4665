use thiserror::Error;

/// Errors produced by the numeric kernels and the pruning engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },

    #[error("softmax row {row} has every key masked")]
    FullyMaskedRow { row: usize },

    #[error("attention mask keeps zero tokens")]
    EmptyMask,

    #[error("image {height}x{width} not divisible by patch size {patch}")]
    IndivisibleImage { height: usize, width: usize, patch: usize },

    #[error("label {label} out of range for {classes} classes (token {token})")]
    LabelOutOfRange { label: usize, classes: usize, token: usize },

    #[error("non-finite activations after layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{what} expected shape {expected_rows}x{expected_cols}, got {got_rows}x{got_cols}")]
    ShapeMismatch {
        what: String,
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
