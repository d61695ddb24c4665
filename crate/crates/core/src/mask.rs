//! Per-layer keep/prune decisions and their per-run traces.

use crate::numerics::Matrix;

/// Binary keep(1)/prune(0) decision per token at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    bits: Vec<bool>,
}

impl LayerMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        LayerMask { bits }
    }

    pub fn all_ones(n: usize) -> Self {
        LayerMask { bits: vec![true; n] }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn kept(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, keep: bool) {
        self.bits[i] = keep;
    }

    pub fn count_kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any_kept(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Elementwise product with another mask (set intersection).
    pub fn and(&self, other: &LayerMask) -> LayerMask {
        debug_assert_eq!(self.len(), other.len());
        LayerMask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    /// The mask as an Nx1 column of {0.0, 1.0}.
    pub fn as_column(&self) -> Matrix {
        Matrix::col_matrix(&self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>())
    }
}

/// The hard masks of one forward pass: one row per gated layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTrace {
    /// 1-based backbone layer numbers the rows correspond to.
    pub gated_layers: Vec<usize>,
    pub masks: Vec<LayerMask>,
}

impl MaskTrace {
    pub fn new(gated_layers: Vec<usize>, masks: Vec<LayerMask>) -> Self {
        debug_assert_eq!(gated_layers.len(), masks.len());
        MaskTrace { gated_layers, masks }
    }

    pub fn num_gated(&self) -> usize {
        self.masks.len()
    }

    pub fn tokens(&self) -> usize {
        self.masks.first().map_or(0, LayerMask::len)
    }

    pub fn keep_counts(&self) -> Vec<usize> {
        self.masks.iter().map(LayerMask::count_kept).collect()
    }

    /// Mean mask value per gated layer.
    pub fn usages(&self) -> Vec<f64> {
        self.masks
            .iter()
            .map(|m| m.count_kept() as f64 / m.len() as f64)
            .collect()
    }

    /// True when every layer's active set is a subset of the previous one.
    pub fn is_nested(&self) -> bool {
        self.masks.windows(2).all(|w| {
            w[0].bits()
                .iter()
                .zip(w[1].bits())
                .all(|(&prev, &cur)| prev || !cur)
        })
    }
}
