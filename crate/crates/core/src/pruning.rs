//! Mask lifecycle across the backbone: keep-ratio schedules, preserve vs.
//! remove semantics, reactivation vs. monotone restriction, and the full
//! sparse forward pass.

use std::time::Instant;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gating::{
    attention_score_select, gate_probs, gate_probs_node, gumbel_noise, harden,
    relaxed_sample_node, select_mask_infer, select_mask_topk, GateDesign,
};
use crate::mask::{LayerMask, MaskTrace};
use crate::numerics::{Matrix, Tape, VarId};
use crate::vit::{
    head_predict, head_predict_node, patch_embed, patch_embed_node, patchify, vit_block_forward,
    vit_block_node, BackboneParams, BoundBackbone, ExecMode, Image, ModelDims,
};

/// How tokens are selected at gated layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    /// Learned per-layer gate emitting keep/prune probabilities.
    GateMlp,
    /// Keep the tokens with the highest class-token attention from the
    /// previous block (baseline; requires a class token).
    AttentionScore,
}

/// Whether per-image keep counts may vary at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateMode {
    /// Argmax decisions; counts vary per image, the training loss only ties
    /// the batch average to the target.
    Dynamic,
    /// Top-k at exactly the scheduled ratio per layer.
    Fixed,
}

/// Default gated layers of a 12-layer backbone (1-based).
pub const DEFAULT_GATED_LAYERS: [usize; 9] = [4, 5, 6, 7, 8, 9, 10, 11, 12];

/// Default target keeping ratios for the nine gated layers.
pub const DEFAULT_KEEP_RATIOS: [f64; 9] =
    [0.7, 0.7, 0.7, 0.49, 0.49, 0.49, 0.343, 0.343, 0.343];

/// Default ratio-loss weight.
pub const DEFAULT_LAMBDA: f64 = 4.0;

/// Default Gumbel-Softmax temperature, held constant through finetuning.
pub const DEFAULT_TAU: f64 = 1.0;

/// Workflow switches plus the keep-ratio schedule.
///
/// `preserve = false` (the removal baseline) implies monotone masks: the
/// masks are made cumulative exactly as with `reactivate = false`, and the
/// head reads the zero-padded map.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub selector: SelectorKind,
    pub gate_design: GateDesign,
    pub rate_mode: RateMode,
    pub preserve: bool,
    pub reactivate: bool,
    /// 1-based backbone layers carrying a selection module, strictly
    /// increasing.
    pub gated_layers: Vec<usize>,
    /// Target keeping ratio per gated layer, each in (0, 1].
    pub keep_ratios: Vec<f64>,
    pub lambda: f64,
    pub tau: f64,
}

impl PruneConfig {
    /// No gating at all: the dense counterpart.
    pub fn dense() -> Self {
        PruneConfig {
            selector: SelectorKind::GateMlp,
            gate_design: GateDesign::Mlp2,
            rate_mode: RateMode::Dynamic,
            preserve: true,
            reactivate: true,
            gated_layers: Vec::new(),
            keep_ratios: Vec::new(),
            lambda: 0.0,
            tau: DEFAULT_TAU,
        }
    }

    /// Nine gates on layers 4-12 with the default decaying schedule.
    pub fn default_gated() -> Self {
        PruneConfig {
            selector: SelectorKind::GateMlp,
            gate_design: GateDesign::Mlp2,
            rate_mode: RateMode::Dynamic,
            preserve: true,
            reactivate: true,
            gated_layers: DEFAULT_GATED_LAYERS.to_vec(),
            keep_ratios: DEFAULT_KEEP_RATIOS.to_vec(),
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
        }
    }

    /// Monotone restriction is in force when reactivation is off or when
    /// pruned tokens are removed rather than preserved.
    pub fn restricting(&self) -> bool {
        !self.reactivate || !self.preserve
    }

    pub fn is_gated(&self, layer: usize) -> bool {
        self.gated_layers.contains(&layer)
    }

    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        for w in self.gated_layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig(
                    "gated_layers must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&first), Some(&last)) = (self.gated_layers.first(), self.gated_layers.last())
        {
            if first < 1 || last > dims.layers {
                return Err(Error::InvalidConfig(format!(
                    "gated_layers must lie in 1..={}, got {:?}",
                    dims.layers, self.gated_layers
                )));
            }
        }
        if self.keep_ratios.len() != self.gated_layers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} keep_ratios for {} gated layers",
                self.keep_ratios.len(),
                self.gated_layers.len()
            )));
        }
        for &r in &self.keep_ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidConfig(format!("keep ratio {r} outside (0, 1]")));
            }
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.tau <= 0.0 {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.selector == SelectorKind::AttentionScore {
            if let Some(&first) = self.gated_layers.first() {
                if first < 2 {
                    return Err(Error::InvalidConfig(
                        "attention-score selection needs a preceding block; first gated layer must be >= 2"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn validate_against(&self, params: &BackboneParams) -> Result<()> {
        self.validate(&params.dims)?;
        if self.selector == SelectorKind::GateMlp {
            for &l in &self.gated_layers {
                if params.gate_for_layer(l).is_none() {
                    return Err(Error::InvalidConfig(format!(
                        "config gates layer {l} but the model has no gate there"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Keep only tokens active at both layers: elementwise mask product. The
/// resulting active set is a subset of the previous one.
pub fn restrict_no_reactivation(m_l: &LayerMask, m_prev: &LayerMask) -> LayerMask {
    m_l.and(m_prev)
}

/// Removal-baseline feature map: rows pruned under the cumulative mask are
/// zeroed, kept rows pass through.
pub fn zero_pad_removal(x: &Matrix, cumulative_keep: &LayerMask) -> Result<Matrix> {
    if cumulative_keep.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            what: "zero_pad_removal mask".to_string(),
            expected_rows: x.rows(),
            expected_cols: 1,
            got_rows: cumulative_keep.len(),
            got_cols: 1,
        });
    }
    let mut out = x.clone();
    for i in 0..x.rows() {
        if !cumulative_keep.kept(i) {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}

/// Analytic FLOP counts (multiply-accumulate = 1 FLOP).
///
/// Per layer with k active tokens: attention 4kC^2 + 2k^2C, MLP 8kC^2;
/// non-gated layers use k = N. Each gated layer adds the selection cost
/// NC^2/2 + NC/2 on all N tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// Transformer blocks only (what the dense counterpart is measured on).
    pub blocks: u64,
    /// Gating overhead.
    pub gates: u64,
    pub total: u64,
}

pub fn flop_count(cfg: &PruneConfig, trace: &MaskTrace, dims: &ModelDims) -> FlopBreakdown {
    let n = dims.tokens() as u64;
    let c = dims.width as u64;
    let mut blocks = 0u64;
    let mut gates = 0u64;
    for layer in 1..=dims.layers {
        let k = match trace.gated_layers.iter().position(|&g| g == layer) {
            Some(gi) => trace.masks[gi].count_kept() as u64,
            None => n,
        };
        blocks += 12 * k * c * c + 2 * k * k * c;
        if cfg.is_gated(layer) {
            // N*C^2/2 + N*C/2 == N*C*(C+1)/2, exact in integers.
            gates += n * c * (c + 1) / 2;
        }
    }
    FlopBreakdown { blocks, gates, total: blocks + gates }
}

/// Result of one full forward pass.
///
/// `layer_nanos` is wall-clock diagnostics and is excluded from all
/// determinism contracts; everything else is a pure function of
/// (params, config, image, seed).
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// The feature map handed to the head (zero-padded when preserve=false).
    pub tokens: Matrix,
    pub trace: MaskTrace,
    /// Per-token class scores over the N patch tokens.
    pub scores: Matrix,
    pub flops: FlopBreakdown,
    pub layer_nanos: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Infer,
}

/// The recorded forward of one image, ready for loss construction.
pub struct TrainGraph {
    /// Feature map node handed to the head (patch rows only).
    pub final_tokens: VarId,
    /// N x K per-token scores node.
    pub scores: VarId,
    /// Per gated layer: the differentiable (relaxed, restriction-composed)
    /// Nx1 keep column consumed by the ratio loss.
    pub soft_masks: Vec<VarId>,
    /// Hard masks actually executed.
    pub trace: MaskTrace,
    pub layer_nanos: Vec<u64>,
}

/// Empty-mask fallback: force-keep the highest-scoring token. Under monotone
/// restriction the candidate set is the previous active set, so nestedness
/// survives the fallback (the previous set is non-empty by induction).
fn force_keep_best(mask: &mut LayerMask, score: &[f64], within: Option<&LayerMask>) {
    debug_assert_eq!(mask.len(), score.len());
    let mut best: Option<usize> = None;
    for (i, &s) in score.iter().enumerate() {
        if within.is_some_and(|w| !w.kept(i)) {
            continue;
        }
        if best.is_none_or(|b| s > score[b]) {
            best = Some(i);
        }
    }
    mask.set(best.expect("candidate set is never empty"), true);
}

fn extend_with_cls(mask: &LayerMask) -> LayerMask {
    let mut bits = mask.bits().to_vec();
    bits.push(true);
    LayerMask::from_bits(bits)
}

/// Build the masked-dense training graph for one image.
///
/// `noise` holds one Nx2 frozen Gumbel matrix per gated layer. With
/// `soft_combine` the Eq-style combine consumes the relaxed mask directly
/// (fully differentiable; used by gradient checks); otherwise the combine is
/// straight-through: hard forward, relaxed backward.
pub fn build_train_graph(
    tape: &mut Tape,
    bound: &BoundBackbone,
    dims: &ModelDims,
    cfg: &PruneConfig,
    patches: &Matrix,
    noise: &[Matrix],
    soft_combine: bool,
) -> Result<TrainGraph> {
    if noise.len() != cfg.gated_layers.len() {
        return Err(Error::InvalidConfig(format!(
            "{} noise matrices for {} gated layers",
            noise.len(),
            cfg.gated_layers.len()
        )));
    }
    let n = dims.tokens();
    let use_cls = cfg.selector == SelectorKind::AttentionScore;
    let mut x = patch_embed_node(tape, bound, patches)?;
    if use_cls {
        x = tape.concat_rows(&[x, bound.cls_token]);
    }
    let mut soft_masks = Vec::new();
    let mut hard_masks = Vec::new();
    let mut prev_combine: Option<VarId> = None;
    let mut prev_hard: Option<LayerMask> = None;
    let mut prev_cls_attn: Option<Vec<f64>> = None;
    let mut layer_nanos = Vec::with_capacity(dims.layers);

    for layer in 1..=dims.layers {
        let started = Instant::now();
        let block = &bound.blocks[layer - 1];
        if let Some(gi) = cfg.gated_layers.iter().position(|&l| l == layer) {
            let x_patch = if use_cls { tape.slice_rows(x, 0, n) } else { x };
            let (soft_keep, mut hard, fallback_score): (VarId, LayerMask, Vec<f64>) =
                match cfg.selector {
                    SelectorKind::GateMlp => {
                        let gate = bound.bound_gate(layer).ok_or_else(|| {
                            Error::InvalidConfig(format!("no gate bound for layer {layer}"))
                        })?;
                        let p = gate_probs_node(tape, x_patch, gate)?;
                        let soft = relaxed_sample_node(tape, p, &noise[gi], cfg.tau)?;
                        let keep_col = tape.slice_cols(soft, 0, 1);
                        let hard = harden(tape.value(soft));
                        let p_keep: Vec<f64> =
                            (0..n).map(|i| tape.value(p).at(i, 0)).collect();
                        (keep_col, hard, p_keep)
                    }
                    SelectorKind::AttentionScore => {
                        let attn = prev_cls_attn.clone().ok_or_else(|| {
                            Error::InvalidConfig(
                                "attention-score selection needs a preceding block".into(),
                            )
                        })?;
                        let hard = attention_score_select(&attn, cfg.keep_ratios[gi])?;
                        // No differentiable selection path: the mask column is
                        // a constant carrying the hard decision.
                        let col = tape.constant(hard.as_column());
                        (col, hard, attn)
                    }
                };
            let restricting = cfg.restricting();
            let eff_soft = match (restricting, prev_combine) {
                (true, Some(prev)) => tape.mul_elem(soft_keep, prev)?,
                _ => soft_keep,
            };
            if restricting {
                if let Some(prev) = &prev_hard {
                    hard = restrict_no_reactivation(&hard, prev);
                }
            }
            if !hard.any_kept() {
                let within = if restricting { prev_hard.as_ref() } else { None };
                force_keep_best(&mut hard, &fallback_score, within);
            }
            let combine = if soft_combine {
                eff_soft
            } else {
                tape.straight_through(eff_soft, hard.as_column())?
            };
            let exec_mask = if use_cls { extend_with_cls(&hard) } else { hard.clone() };
            let exec_combine = if use_cls {
                let one = tape.constant(Matrix::scalar(1.0));
                tape.concat_rows(&[combine, one])
            } else {
                combine
            };
            let (out, cls_attn) = vit_block_node(
                tape,
                x,
                Some(&exec_mask),
                Some(exec_combine),
                block,
                dims.heads,
                use_cls,
            )?;
            x = out;
            prev_cls_attn = cls_attn.map(|mut a| {
                a.truncate(n);
                a
            });
            soft_masks.push(eff_soft);
            hard_masks.push(hard.clone());
            prev_combine = Some(combine);
            prev_hard = Some(hard);
        } else {
            let (out, cls_attn) =
                vit_block_node(tape, x, None, None, block, dims.heads, use_cls)?;
            x = out;
            prev_cls_attn = cls_attn.map(|mut a| {
                a.truncate(n);
                a
            });
        }
        if !tape.value(x).is_finite() {
            return Err(Error::NonFinite { layer });
        }
        layer_nanos.push(started.elapsed().as_nanos() as u64);
    }

    let mut final_tokens = if use_cls { tape.slice_rows(x, 0, n) } else { x };
    if !cfg.preserve {
        if let Some(cumulative) = prev_combine {
            let zeros = tape.constant(Matrix::zeros(n, dims.width));
            final_tokens = tape.combine_rows(final_tokens, zeros, cumulative)?;
        }
    }
    let scores = head_predict_node(tape, final_tokens, bound)?;
    Ok(TrainGraph {
        final_tokens,
        scores,
        soft_masks,
        trace: MaskTrace::new(cfg.gated_layers.clone(), hard_masks),
        layer_nanos,
    })
}

/// One full forward pass.
///
/// Train mode records the masked-dense graph (sampling masks with Gumbel
/// noise from `rng`) and extracts concrete values; infer mode runs the
/// gathered-sparse path with deterministic selection (argmax for dynamic
/// rate, top-k for fixed rate). The RNG is only consumed in train mode.
pub fn run_backbone(
    image: &Image,
    params: &BackboneParams,
    cfg: &PruneConfig,
    rng: &mut impl Rng,
    mode: RunMode,
) -> Result<BackboneOutput> {
    match mode {
        RunMode::Infer => run_backbone_infer(image, params, cfg),
        RunMode::Train => {
            cfg.validate_against(params)?;
            let patches = patchify(image, params.dims.patch)?;
            let noise: Vec<Matrix> = (0..cfg.gated_layers.len())
                .map(|_| gumbel_noise(params.dims.tokens(), rng))
                .collect();
            let mut tape = Tape::new();
            let bound = BoundBackbone::bind(&mut tape, params);
            let graph =
                build_train_graph(&mut tape, &bound, &params.dims, cfg, &patches, &noise, false)?;
            let flops = flop_count(cfg, &graph.trace, &params.dims);
            Ok(BackboneOutput {
                tokens: tape.value(graph.final_tokens).clone(),
                trace: graph.trace,
                scores: tape.value(graph.scores).clone(),
                flops,
                layer_nanos: graph.layer_nanos,
            })
        }
    }
}

/// Gathered-sparse inference pass.
pub fn run_backbone_infer(
    image: &Image,
    params: &BackboneParams,
    cfg: &PruneConfig,
) -> Result<BackboneOutput> {
    cfg.validate_against(params)?;
    let dims = &params.dims;
    let n = dims.tokens();
    let use_cls = cfg.selector == SelectorKind::AttentionScore;
    let mut x = patch_embed(image, params)?;
    if use_cls {
        x = Matrix::concat_rows(&[&x, &params.cls_token]);
    }
    let mut hard_masks: Vec<LayerMask> = Vec::new();
    let mut prev_hard: Option<LayerMask> = None;
    let mut prev_cls_attn: Option<Vec<f64>> = None;
    let mut layer_nanos = Vec::with_capacity(dims.layers);

    for layer in 1..=dims.layers {
        let started = Instant::now();
        let block = &params.blocks[layer - 1];
        if let Some(gi) = cfg.gated_layers.iter().position(|&l| l == layer) {
            let (mut mask, fallback_score): (LayerMask, Vec<f64>) = match cfg.selector {
                SelectorKind::GateMlp => {
                    let gate = params.gate_for_layer(layer).expect("validated");
                    let x_patch = if use_cls { x.slice_rows(0, n) } else { x.clone() };
                    let p = gate_probs(&x_patch, gate)?;
                    let mask = match cfg.rate_mode {
                        RateMode::Dynamic => select_mask_infer(&p),
                        RateMode::Fixed => select_mask_topk(&p, cfg.keep_ratios[gi])?,
                    };
                    let p_keep: Vec<f64> = (0..n).map(|i| p.keep_prob(i)).collect();
                    (mask, p_keep)
                }
                SelectorKind::AttentionScore => {
                    let attn = prev_cls_attn.clone().ok_or_else(|| {
                        Error::InvalidConfig(
                            "attention-score selection needs a preceding block".into(),
                        )
                    })?;
                    let mask = attention_score_select(&attn, cfg.keep_ratios[gi])?;
                    (mask, attn)
                }
            };
            if cfg.restricting() {
                if let Some(prev) = &prev_hard {
                    mask = restrict_no_reactivation(&mask, prev);
                }
            }
            if !mask.any_kept() {
                let within = if cfg.restricting() { prev_hard.as_ref() } else { None };
                force_keep_best(&mut mask, &fallback_score, within);
            }
            let exec_mask = if use_cls { extend_with_cls(&mask) } else { mask.clone() };
            let (out, cls_attn) =
                vit_block_forward(&x, Some(&exec_mask), block, dims.heads, ExecMode::Gathered, use_cls)?;
            x = out;
            prev_cls_attn = cls_attn.map(|mut a| {
                a.truncate(n);
                a
            });
            hard_masks.push(mask.clone());
            prev_hard = Some(mask);
        } else {
            let (out, cls_attn) =
                vit_block_forward(&x, None, block, dims.heads, ExecMode::Gathered, use_cls)?;
            x = out;
            prev_cls_attn = cls_attn.map(|mut a| {
                a.truncate(n);
                a
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { layer });
        }
        layer_nanos.push(started.elapsed().as_nanos() as u64);
    }

    let patch_map = if use_cls { x.slice_rows(0, n) } else { x };
    let tokens = if cfg.preserve {
        patch_map
    } else {
        match prev_hard {
            Some(cumulative) => zero_pad_removal(&patch_map, &cumulative)?,
            None => patch_map,
        }
    };
    let scores = head_predict(&tokens, params)?;
    let trace = MaskTrace::new(cfg.gated_layers.clone(), hard_masks);
    let flops = flop_count(cfg, &trace, dims);
    Ok(BackboneOutput { tokens, trace, scores, flops, layer_nanos })
}

/// Gradient-check the whole gated model: patch embedding, gates, masked
/// attention, the combine, the head, and the task + ratio losses, against
/// central finite differences.
///
/// The Gumbel noise is frozen from `seed` so every perturbed re-evaluation
/// sees the same graph; the combine consumes the relaxed mask (the smooth
/// surface the straight-through estimator differentiates).
pub fn full_model_grad_check(
    params: &BackboneParams,
    cfg: &PruneConfig,
    batch: &[(Image, Vec<usize>)],
    seed: u64,
    gc: &crate::numerics::GradCheckConfig,
) -> Result<crate::numerics::GradReport> {
    cfg.validate_against(params)?;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("grad check needs at least one image".into()));
    }
    use rand::SeedableRng;
    let dims = params.dims;
    let mut noise_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Vec<Matrix>> = batch
        .iter()
        .map(|_| {
            (0..cfg.gated_layers.len())
                .map(|_| gumbel_noise(dims.tokens(), &mut noise_rng))
                .collect()
        })
        .collect();
    let patches: Vec<Matrix> = batch
        .iter()
        .map(|(img, _)| patchify(img, dims.patch))
        .collect::<Result<_>>()?;
    let named: Vec<(String, Matrix)> = params
        .named_params()
        .into_iter()
        .map(|(n, m)| (n, m.clone()))
        .collect();

    crate::numerics::grad_check(&named, gc, |tape, ids| {
        let bound = BoundBackbone::from_param_ids(params, ids);
        let mut task_acc: Option<VarId> = None;
        let mut per_image_masks: Vec<Vec<VarId>> = Vec::new();
        for (i, (_, labels)) in batch.iter().enumerate() {
            let graph =
                build_train_graph(tape, &bound, &dims, cfg, &patches[i], &noise[i], true)?;
            let ce = tape.cross_entropy_mean(graph.scores, labels)?;
            task_acc = Some(match task_acc {
                Some(acc) => tape.add(acc, ce)?,
                None => ce,
            });
            per_image_masks.push(graph.soft_masks);
        }
        let task = tape.affine(task_acc.expect("non-empty batch"), 1.0 / batch.len() as f64, 0.0);
        if cfg.gated_layers.is_empty() || cfg.lambda == 0.0 {
            return Ok(task);
        }
        let ratio =
            crate::losses::ratio_loss_node(tape, &per_image_masks, &cfg.keep_ratios, cfg.rate_mode)?;
        let weighted = tape.affine(ratio, cfg.lambda, 0.0);
        tape.add(task, weighted)
    })
}

/// Forward pass with injected masks instead of a live selector; used to
/// isolate the execution path (masked vs. gathered) and the preserve/remove
/// head-input variable. Masks are applied verbatim: no restriction, no
/// fallback. Each mask must keep at least one token.
pub fn run_backbone_with_masks(
    image: &Image,
    params: &BackboneParams,
    cfg: &PruneConfig,
    masks: &[LayerMask],
    mode: ExecMode,
) -> Result<BackboneOutput> {
    cfg.validate(&params.dims)?;
    if masks.len() != cfg.gated_layers.len() {
        return Err(Error::InvalidConfig(format!(
            "{} masks injected for {} gated layers",
            masks.len(),
            cfg.gated_layers.len()
        )));
    }
    let dims = &params.dims;
    let mut x = patch_embed(image, params)?;
    let mut layer_nanos = Vec::with_capacity(dims.layers);
    for layer in 1..=dims.layers {
        let started = Instant::now();
        let block = &params.blocks[layer - 1];
        let keep = cfg
            .gated_layers
            .iter()
            .position(|&l| l == layer)
            .map(|gi| &masks[gi]);
        let (out, _) = vit_block_forward(&x, keep, block, dims.heads, mode, false)?;
        x = out;
        if !x.is_finite() {
            return Err(Error::NonFinite { layer });
        }
        layer_nanos.push(started.elapsed().as_nanos() as u64);
    }
    let cumulative = masks
        .iter()
        .fold(LayerMask::all_ones(dims.tokens()), |acc, m| acc.and(m));
    let tokens = if cfg.preserve { x } else { zero_pad_removal(&x, &cumulative)? };
    let scores = head_predict(&tokens, params)?;
    let trace = MaskTrace::new(cfg.gated_layers.clone(), masks.to_vec());
    let flops = flop_count(cfg, &trace, dims);
    Ok(BackboneOutput { tokens, trace, scores, flops, layer_nanos })
}
