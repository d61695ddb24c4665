//! Training objectives: per-token task loss, the batch-averaged dynamic
//! ratio loss, the per-image fixed ratio loss, and the weighted total.
//!
//! The ratio losses consume soft (relaxed) mask values during training and
//! hard masks for reporting; both views reduce to per-image per-layer token
//! means, which is what these functions take.

use crate::error::{Error, Result};
use crate::mask::MaskTrace;
use crate::numerics::{Matrix, Tape, VarId};
use crate::pruning::RateMode;

/// Scalars of one optimization step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub task: f64,
    pub ratio: f64,
    pub total: f64,
    /// Mean token usage per gated layer, over the batch.
    pub per_layer_usage: Vec<f64>,
}

impl LossReport {
    pub fn new(task: f64, ratio: f64, lambda: f64, per_layer_usage: Vec<f64>) -> Self {
        LossReport { task, ratio, total: total_loss(task, ratio, lambda), per_layer_usage }
    }
}

/// Mean per-token cross-entropy with a numerically stable log-softmax.
pub fn task_loss(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != scores.rows() {
        return Err(Error::ShapeMismatch {
            what: "task_loss labels".to_string(),
            expected_rows: scores.rows(),
            expected_cols: 1,
            got_rows: labels.len(),
            got_cols: 1,
        });
    }
    let mut total = 0.0;
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let label = labels[i];
        if label >= scores.cols() {
            return Err(Error::LabelOutOfRange { label, classes: scores.cols(), token: i });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[label];
    }
    Ok(total / scores.rows() as f64)
}

fn check_usages(usages: &[Vec<f64>], targets: &[f64]) -> Result<()> {
    if usages.is_empty() {
        return Err(Error::InvalidConfig("ratio loss needs at least one image".into()));
    }
    for u in usages {
        if u.len() != targets.len() {
            return Err(Error::InvalidConfig(format!(
                "trace has {} gated layers, targets have {}",
                u.len(),
                targets.len()
            )));
        }
    }
    Ok(())
}

/// Batch-averaged ratio loss: per gated layer, the squared gap between the
/// token usage averaged over all tokens *and* all images, and the target.
/// Per-image counts may vary as long as the batch mean tracks the target.
pub fn dynamic_ratio_loss_from_usages(usages: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    check_usages(usages, targets)?;
    let b = usages.len() as f64;
    let mut acc = 0.0;
    for (l, &t) in targets.iter().enumerate() {
        let mean = usages.iter().map(|u| u[l]).sum::<f64>() / b;
        let d = mean - t;
        acc += d * d;
    }
    Ok(acc / targets.len() as f64)
}

/// Per-image ratio loss: every image is penalized toward the same keeping
/// ratio at every gated layer.
pub fn fixed_ratio_loss_from_usages(usages: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    check_usages(usages, targets)?;
    let mut acc = 0.0;
    for (l, &t) in targets.iter().enumerate() {
        for u in usages {
            let d = u[l] - t;
            acc += d * d;
        }
    }
    Ok(acc / (targets.len() * usages.len()) as f64)
}

/// Dynamic ratio loss over hard mask traces (reporting view).
pub fn dynamic_ratio_loss(traces: &[MaskTrace], targets: &[f64]) -> Result<f64> {
    let usages: Vec<Vec<f64>> = traces.iter().map(MaskTrace::usages).collect();
    dynamic_ratio_loss_from_usages(&usages, targets)
}

/// Fixed ratio loss over hard mask traces (reporting view).
pub fn fixed_ratio_loss(traces: &[MaskTrace], targets: &[f64]) -> Result<f64> {
    let usages: Vec<Vec<f64>> = traces.iter().map(MaskTrace::usages).collect();
    fixed_ratio_loss_from_usages(&usages, targets)
}

/// task + lambda * ratio, exactly as written.
pub fn total_loss(task: f64, ratio: f64, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    task + lambda * ratio
}

/// Recorded ratio loss over per-image mask columns (Nx1 nodes, soft values
/// during training). Gradient flows into every mask node.
pub fn ratio_loss_node(
    tape: &mut Tape,
    per_image_masks: &[Vec<VarId>],
    targets: &[f64],
    mode: RateMode,
) -> Result<VarId> {
    if per_image_masks.is_empty() {
        return Err(Error::InvalidConfig("ratio loss needs at least one image".into()));
    }
    for m in per_image_masks {
        if m.len() != targets.len() {
            return Err(Error::InvalidConfig(format!(
                "image has {} gated layers, targets have {}",
                m.len(),
                targets.len()
            )));
        }
    }
    let b = per_image_masks.len();
    let num_layers = targets.len();
    // Per-image per-layer token means.
    let mut means: Vec<Vec<VarId>> = Vec::with_capacity(b);
    for masks in per_image_masks {
        means.push(masks.iter().map(|&m| tape.mean_all(m)).collect());
    }
    let mut acc: Option<VarId> = None;
    match mode {
        RateMode::Dynamic => {
            for (l, &t) in targets.iter().enumerate() {
                let mut sum = means[0][l];
                for img in means.iter().skip(1) {
                    sum = tape.add(sum, img[l])?;
                }
                let mean = tape.affine(sum, 1.0 / b as f64, 0.0);
                let diff = tape.affine(mean, 1.0, -t);
                let sq = tape.mul_elem(diff, diff)?;
                acc = Some(match acc {
                    Some(a) => tape.add(a, sq)?,
                    None => sq,
                });
            }
            Ok(tape.affine(acc.expect("at least one layer"), 1.0 / num_layers as f64, 0.0))
        }
        RateMode::Fixed => {
            for (l, &t) in targets.iter().enumerate() {
                for img in &means {
                    let diff = tape.affine(img[l], 1.0, -t);
                    let sq = tape.mul_elem(diff, diff)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, sq)?,
                        None => sq,
                    });
                }
            }
            Ok(tape.affine(
                acc.expect("at least one layer"),
                1.0 / (num_layers * b) as f64,
                0.0,
            ))
        }
    }
}
