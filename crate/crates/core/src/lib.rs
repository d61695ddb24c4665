//! A self-contained sparse vision-transformer engine: gated per-layer token
//! selection, preservation of pruned tokens in the feature map, on-demand
//! reactivation, and the ratio losses that control the pruning rate.
//!
//! Everything runs on 64-bit floats with a recording tape for training and a
//! direct gathered path for inference; the two are held to row-wise
//! agreement by the test suite.

pub mod error;
pub mod gating;
pub mod losses;
pub mod mask;
pub mod numerics;
pub mod pruning;
pub mod vit;

pub use error::{Error, Result};
pub use mask::{LayerMask, MaskTrace};
pub use numerics::Matrix;
