//! Isotropic ViT building blocks: patch embedding, multi-head self-attention
//! with key-column masking, and the pre-norm transformer block, runnable in
//! masked-dense form (training) or gathered-sparse form (inference).

use rand::Rng;

use crate::error::{Error, Result};
use crate::gating::{BoundGate, Gate, GateDesign};
use crate::mask::LayerMask;
use crate::numerics::{ops, Matrix, Tape, VarId};

/// Layer-norm epsilon used throughout the backbone.
pub const LN_EPS: f64 = 1e-6;

/// Static model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub patch: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch, self.image_w / self.patch)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "heads ({}) must divide width ({})",
                self.heads, self.width
            )));
        }
        if self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return Err(Error::IndivisibleImage {
                height: self.image_h,
                width: self.image_w,
                patch: self.patch,
            });
        }
        if self.layers == 0 || self.classes == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("layers, classes and channels must be > 0".into()));
        }
        Ok(())
    }
}

/// A dense H x W x channels image, row-major with channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::BadLength {
                rows: height * width,
                cols: channels,
                len: data.len(),
            });
        }
        Ok(Image { height, width, channels, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Flatten non-overlapping patches into rows: token k covers the patch at
/// grid position (k / gw, k % gw), pixels row-major, channel fastest.
pub fn patchify(image: &Image, patch: usize) -> Result<Matrix> {
    if image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::IndivisibleImage {
            height: image.height,
            width: image.width,
            patch,
        });
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let cols = patch * patch * image.channels;
    let mut out = Matrix::zeros(gh * gw, cols);
    for k in 0..gh * gw {
        let (pr, pc) = (k / gw, k % gw);
        let row = out.row_mut(k);
        let mut idx = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                for c in 0..image.channels {
                    row[idx] = image.at(pr * patch + dy, pc * patch + dx, c);
                    idx += 1;
                }
            }
        }
    }
    Ok(out)
}

/// One pre-norm transformer block's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTBlockParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub wq: Matrix,
    pub bq: Matrix,
    pub wk: Matrix,
    pub bk: Matrix,
    pub wv: Matrix,
    pub bv: Matrix,
    pub wo: Matrix,
    pub bo: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub fc1_w: Matrix,
    pub fc1_b: Matrix,
    pub fc2_w: Matrix,
    pub fc2_b: Matrix,
}

impl ViTBlockParams {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * width;
        ViTBlockParams {
            ln1_gain: Matrix::filled(1, width, 1.0),
            ln1_bias: Matrix::zeros(1, width),
            wq: Matrix::randn(width, width, 0.02, rng),
            bq: Matrix::zeros(1, width),
            wk: Matrix::randn(width, width, 0.02, rng),
            bk: Matrix::zeros(1, width),
            wv: Matrix::randn(width, width, 0.02, rng),
            bv: Matrix::zeros(1, width),
            wo: Matrix::randn(width, width, 0.02, rng),
            bo: Matrix::zeros(1, width),
            ln2_gain: Matrix::filled(1, width, 1.0),
            ln2_bias: Matrix::zeros(1, width),
            fc1_w: Matrix::randn(width, hidden, 0.02, rng),
            fc1_b: Matrix::zeros(1, hidden),
            fc2_w: Matrix::randn(hidden, width, 0.02, rng),
            fc2_b: Matrix::zeros(1, width),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        vec![
            (format!("{prefix}.ln1.gain"), &self.ln1_gain),
            (format!("{prefix}.ln1.bias"), &self.ln1_bias),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.bq"), &self.bq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.bk"), &self.bk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.bv"), &self.bv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.bo"), &self.bo),
            (format!("{prefix}.ln2.gain"), &self.ln2_gain),
            (format!("{prefix}.ln2.bias"), &self.ln2_bias),
            (format!("{prefix}.fc1.w"), &self.fc1_w),
            (format!("{prefix}.fc1.b"), &self.fc1_b),
            (format!("{prefix}.fc2.w"), &self.fc2_w),
            (format!("{prefix}.fc2.b"), &self.fc2_b),
        ]
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        vec![
            (format!("{prefix}.ln1.gain"), &mut self.ln1_gain),
            (format!("{prefix}.ln1.bias"), &mut self.ln1_bias),
            (format!("{prefix}.wq"), &mut self.wq),
            (format!("{prefix}.bq"), &mut self.bq),
            (format!("{prefix}.wk"), &mut self.wk),
            (format!("{prefix}.bk"), &mut self.bk),
            (format!("{prefix}.wv"), &mut self.wv),
            (format!("{prefix}.bv"), &mut self.bv),
            (format!("{prefix}.wo"), &mut self.wo),
            (format!("{prefix}.bo"), &mut self.bo),
            (format!("{prefix}.ln2.gain"), &mut self.ln2_gain),
            (format!("{prefix}.ln2.bias"), &mut self.ln2_bias),
            (format!("{prefix}.fc1.w"), &mut self.fc1_w),
            (format!("{prefix}.fc1.b"), &mut self.fc1_b),
            (format!("{prefix}.fc2.w"), &mut self.fc2_w),
            (format!("{prefix}.fc2.b"), &mut self.fc2_b),
        ]
    }
}

/// Every trainable tensor of the backbone: patch embedding, positional
/// embedding, class token (used only by the attention-score selector),
/// transformer blocks, per-layer gates and the per-token prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub dims: ModelDims,
    pub patch_w: Matrix,
    pub patch_b: Matrix,
    pub pos: Matrix,
    pub cls_token: Matrix,
    pub blocks: Vec<ViTBlockParams>,
    /// (1-based layer number, gate) pairs, strictly increasing.
    pub gates: Vec<(usize, Gate)>,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl BackboneParams {
    /// Dense backbone without gates (pre-training stage).
    pub fn init_dense(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let in_dim = dims.patch * dims.patch * dims.channels;
        Ok(BackboneParams {
            dims,
            patch_w: Matrix::randn(in_dim, dims.width, 0.02, rng),
            patch_b: Matrix::zeros(1, dims.width),
            pos: Matrix::randn(dims.tokens(), dims.width, 0.02, rng),
            cls_token: Matrix::randn(1, dims.width, 0.02, rng),
            blocks: (0..dims.layers).map(|_| ViTBlockParams::init(dims.width, rng)).collect(),
            gates: Vec::new(),
            head_w: Matrix::randn(dims.width, dims.classes, 0.02, rng),
            head_b: Matrix::zeros(1, dims.classes),
        })
    }

    /// Attach freshly initialized gates at the given 1-based layers
    /// (finetuning stage). Replaces any existing gates.
    pub fn attach_gates(
        &mut self,
        gated_layers: &[usize],
        design: GateDesign,
        rng: &mut impl Rng,
    ) -> Result<()> {
        for w in gated_layers.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::InvalidConfig("gated layers must be strictly increasing".into()));
            }
        }
        if let (Some(&first), Some(&last)) = (gated_layers.first(), gated_layers.last()) {
            if first < 1 || last > self.dims.layers {
                return Err(Error::InvalidConfig(format!(
                    "gated layers must lie in 1..={}, got {gated_layers:?}",
                    self.dims.layers
                )));
            }
        }
        self.gates = gated_layers
            .iter()
            .map(|&l| {
                let gate = match design {
                    GateDesign::Mlp2 => {
                        Gate::Mlp2(crate::gating::GateParams::init(self.dims.width, rng))
                    }
                    GateDesign::Complex => {
                        Gate::Complex(crate::gating::ComplexGateParams::init(self.dims.width, rng))
                    }
                };
                (l, gate)
            })
            .collect();
        Ok(())
    }

    pub fn gate_for_layer(&self, layer: usize) -> Option<&Gate> {
        self.gates.iter().find(|(l, _)| *l == layer).map(|(_, g)| g)
    }

    pub fn gated_layers(&self) -> Vec<usize> {
        self.gates.iter().map(|(l, _)| *l).collect()
    }

    /// All tensors in canonical (name, value) order. This order is the
    /// contract for the optimizer state and the checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![
            ("patch.w".to_string(), &self.patch_w),
            ("patch.b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls_token),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named(&format!("block.{i}")));
        }
        for (layer, gate) in &self.gates {
            out.extend(gate.named_params(&format!("gate.{layer}")));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = vec![
            ("patch.w".to_string(), &mut self.patch_w),
            ("patch.b".to_string(), &mut self.patch_b),
            ("pos".to_string(), &mut self.pos),
            ("cls".to_string(), &mut self.cls_token),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.named_mut(&format!("block.{i}")));
        }
        for (layer, gate) in &mut self.gates {
            out.extend(gate.named_params_mut(&format!("gate.{layer}")));
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }
}

/// Patch embedding: flatten patches, project to width C, add the positional
/// embedding. Row k corresponds to the patch at grid position
/// (k / grid_w, k % grid_w).
pub fn patch_embed(image: &Image, params: &BackboneParams) -> Result<Matrix> {
    let patches = patchify(image, params.dims.patch)?;
    if patches.rows() != params.pos.rows() {
        return Err(Error::ShapeMismatch {
            what: "positional embedding".to_string(),
            expected_rows: patches.rows(),
            expected_cols: params.dims.width,
            got_rows: params.pos.rows(),
            got_cols: params.pos.cols(),
        });
    }
    let mut x = ops::matmul(&patches, &params.patch_w)?;
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let v = x.at(i, j) + params.patch_b.at(0, j) + params.pos.at(i, j);
            x.set(i, j, v);
        }
    }
    Ok(x)
}

/// Build the NxN additive attention mask from keep bits: masked key columns
/// get [`ops::MASKED_LOGIT`] added for every query row.
fn attention_mask(keep: &LayerMask) -> Matrix {
    let n = keep.len();
    Matrix::from_fn(n, n, |_, j| if keep.kept(j) { 0.0 } else { ops::MASKED_LOGIT })
}

/// Multi-head self-attention over all rows, with pruned positions receiving
/// zero attention weight as keys/values from every query. Output rows at
/// pruned positions are computed but carry no contract.
///
/// When `want_cls_attn` is set, also returns the last row's attention
/// distribution averaged over heads (the class-token attention used by the
/// attention-score selector).
pub fn mhsa_masked(
    x: &Matrix,
    keep: Option<&LayerMask>,
    p: &ViTBlockParams,
    heads: usize,
    want_cls_attn: bool,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    if let Some(k) = keep {
        if !k.any_kept() {
            return Err(Error::EmptyMask);
        }
    }
    let n = x.rows();
    let dh = x.cols() / heads;
    let q = affine_rows(x, &p.wq, &p.bq)?;
    let k = affine_rows(x, &p.wk, &p.bk)?;
    let v = affine_rows(x, &p.wv, &p.bv)?;
    let mask = keep.map(attention_mask);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut cls_attn = if want_cls_attn { Some(vec![0.0; n]) } else { None };
    for h in 0..heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let s = ops::matmul_transb(&qh, &kh)?.scale(scale);
        let a = ops::softmax_rows(&s, mask.as_ref())?;
        if let Some(acc) = cls_attn.as_mut() {
            for (j, slot) in acc.iter_mut().enumerate() {
                *slot += a.at(n - 1, j) / heads as f64;
            }
        }
        head_outs.push(ops::matmul(&a, &vh)?);
    }
    let refs: Vec<&Matrix> = head_outs.iter().collect();
    let concat = Matrix::concat_cols(&refs);
    Ok((affine_rows(&concat, &p.wo, &p.bo)?, cls_attn))
}

fn affine_rows(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = ops::matmul(x, w)?;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let v = out.at(i, j) + b.at(0, j);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Execution form of a block under a mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// Compute all rows densely, mask attention columns, then combine:
    /// kept rows take the block output, pruned rows keep their input.
    Masked,
    /// Gather kept rows, run the dense block on the submatrix, scatter the
    /// results back over the previous map.
    Gathered,
}

/// Dense pre-norm block body (no mask, no combine): x + MHSA(LN1(x)) then
/// + MLP(LN2(.)).
fn block_body(
    x: &Matrix,
    keep: Option<&LayerMask>,
    p: &ViTBlockParams,
    heads: usize,
    want_cls_attn: bool,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    let h1 = ops::layer_norm(x, &p.ln1_gain, &p.ln1_bias, LN_EPS)?;
    let (attn, cls_attn) = mhsa_masked(&h1, keep, p, heads, want_cls_attn)?;
    let u = x.add(&attn)?;
    let h2 = ops::layer_norm(&u, &p.ln2_gain, &p.ln2_bias, LN_EPS)?;
    let m = affine_rows(&h2, &p.fc1_w, &p.fc1_b)?;
    let m = ops::gelu(&m);
    let m = affine_rows(&m, &p.fc2_w, &p.fc2_b)?;
    Ok((u.add(&m)?, cls_attn))
}

/// One transformer block under a keep mask.
///
/// Masked mode computes every row and combines (kept rows take the update,
/// pruned rows pass through bit-identically). Gathered mode runs the dense
/// block on the kept submatrix and scatters the results back. The two agree
/// row-wise for any mask with at least one kept token.
pub fn vit_block_forward(
    x: &Matrix,
    keep: Option<&LayerMask>,
    p: &ViTBlockParams,
    heads: usize,
    mode: ExecMode,
    want_cls_attn: bool,
) -> Result<(Matrix, Option<Vec<f64>>)> {
    match (mode, keep) {
        (_, None) => block_body(x, None, p, heads, want_cls_attn),
        (ExecMode::Masked, Some(keep)) => {
            let (v, cls_attn) = block_body(x, Some(keep), p, heads, want_cls_attn)?;
            let mut out = x.clone();
            for i in 0..x.rows() {
                if keep.kept(i) {
                    out.row_mut(i).copy_from_slice(v.row(i));
                }
            }
            Ok((out, cls_attn))
        }
        (ExecMode::Gathered, Some(keep)) => {
            if !keep.any_kept() {
                return Err(Error::EmptyMask);
            }
            let idx = keep.kept_indices();
            let gathered = x.gather_rows(&idx);
            let (updated, cls_attn_g) = block_body(&gathered, None, p, heads, want_cls_attn)?;
            let mut out = x.clone();
            for (g, &i) in idx.iter().enumerate() {
                out.row_mut(i).copy_from_slice(updated.row(g));
            }
            // Scatter the gathered attention row back to full-length indexing;
            // pruned positions receive zero weight, matching the masked path.
            let cls_attn = cls_attn_g.map(|a| {
                let mut full = vec![0.0; x.rows()];
                for (g, &i) in idx.iter().enumerate() {
                    full[i] = a[g];
                }
                full
            });
            Ok((out, cls_attn))
        }
    }
}

/// Per-token linear scores over K classes; reads the full feature map,
/// including rows that were never updated past some layer.
pub fn head_predict(x: &Matrix, params: &BackboneParams) -> Result<Matrix> {
    affine_rows(x, &params.head_w, &params.head_b)
}

// ---------------------------------------------------------------------------
// Recorded (tape) versions
// ---------------------------------------------------------------------------

/// Tape leaf ids mirroring `ViTBlockParams`.
#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub wq: VarId,
    pub bq: VarId,
    pub wk: VarId,
    pub bk: VarId,
    pub wv: VarId,
    pub bv: VarId,
    pub wo: VarId,
    pub bo: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
    pub fc1_w: VarId,
    pub fc1_b: VarId,
    pub fc2_w: VarId,
    pub fc2_b: VarId,
}

/// Tape leaf ids mirroring `BackboneParams`, bound in canonical order.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub patch_w: VarId,
    pub patch_b: VarId,
    pub pos: VarId,
    pub cls_token: VarId,
    pub blocks: Vec<BoundBlock>,
    pub gates: Vec<(usize, BoundGate)>,
    pub head_w: VarId,
    pub head_b: VarId,
}

impl BoundBackbone {
    /// Register every parameter as a trainable leaf, in `named_params` order.
    pub fn bind(tape: &mut Tape, params: &BackboneParams) -> Self {
        let patch_w = tape.param(params.patch_w.clone());
        let patch_b = tape.param(params.patch_b.clone());
        let pos = tape.param(params.pos.clone());
        let cls_token = tape.param(params.cls_token.clone());
        let blocks = params
            .blocks
            .iter()
            .map(|b| BoundBlock {
                ln1_gain: tape.param(b.ln1_gain.clone()),
                ln1_bias: tape.param(b.ln1_bias.clone()),
                wq: tape.param(b.wq.clone()),
                bq: tape.param(b.bq.clone()),
                wk: tape.param(b.wk.clone()),
                bk: tape.param(b.bk.clone()),
                wv: tape.param(b.wv.clone()),
                bv: tape.param(b.bv.clone()),
                wo: tape.param(b.wo.clone()),
                bo: tape.param(b.bo.clone()),
                ln2_gain: tape.param(b.ln2_gain.clone()),
                ln2_bias: tape.param(b.ln2_bias.clone()),
                fc1_w: tape.param(b.fc1_w.clone()),
                fc1_b: tape.param(b.fc1_b.clone()),
                fc2_w: tape.param(b.fc2_w.clone()),
                fc2_b: tape.param(b.fc2_b.clone()),
            })
            .collect();
        let gates = params.gates.iter().map(|(l, g)| (*l, g.bind(tape))).collect();
        let head_w = tape.param(params.head_w.clone());
        let head_b = tape.param(params.head_b.clone());
        BoundBackbone { patch_w, patch_b, pos, cls_token, blocks, gates, head_w, head_b }
    }

    /// Rebuild the mirror from pre-registered leaf ids in canonical order
    /// (the order `named_params` / `param_ids` uses). Lets the gradient
    /// checker own leaf registration.
    pub fn from_param_ids(params: &BackboneParams, ids: &[VarId]) -> Self {
        let mut cursor = ids.iter().copied();
        let mut next = || cursor.next().expect("id list shorter than parameter list");
        let patch_w = next();
        let patch_b = next();
        let pos = next();
        let cls_token = next();
        let blocks = params
            .blocks
            .iter()
            .map(|_| BoundBlock {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let gates = params
            .gates
            .iter()
            .map(|(l, g)| {
                let bound = match g {
                    Gate::Mlp2(_) => BoundGate::Mlp2 {
                        w1: next(),
                        b1: next(),
                        w2: next(),
                        b2: next(),
                    },
                    Gate::Complex(_) => BoundGate::Complex {
                        w_local: next(),
                        b_local: next(),
                        w_global: next(),
                        b_global: next(),
                        w1: next(),
                        b1: next(),
                        w2: next(),
                        b2: next(),
                    },
                };
                (*l, bound)
            })
            .collect();
        let head_w = next();
        let head_b = next();
        assert!(cursor.next().is_none(), "id list longer than parameter list");
        BoundBackbone { patch_w, patch_b, pos, cls_token, blocks, gates, head_w, head_b }
    }

    /// Leaf ids in the same canonical order as `BackboneParams::named_params`.
    pub fn param_ids(&self) -> Vec<VarId> {
        let mut out = vec![self.patch_w, self.patch_b, self.pos, self.cls_token];
        for b in &self.blocks {
            out.extend([
                b.ln1_gain, b.ln1_bias, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                b.ln2_gain, b.ln2_bias, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b,
            ]);
        }
        for (_, g) in &self.gates {
            out.extend(g.param_ids());
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    pub fn bound_gate(&self, layer: usize) -> Option<&BoundGate> {
        self.gates.iter().find(|(l, _)| *l == layer).map(|(_, g)| g)
    }
}

/// Recorded patch embedding: project constant patches and add bias and
/// positional embedding.
pub fn patch_embed_node(tape: &mut Tape, bound: &BoundBackbone, patches: &Matrix) -> Result<VarId> {
    let p = tape.constant(patches.clone());
    let x = tape.matmul(p, bound.patch_w)?;
    let x = tape.add_row_broadcast(x, bound.patch_b)?;
    tape.add(x, bound.pos)
}

fn affine_node(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let h = tape.matmul(x, w)?;
    tape.add_row_broadcast(h, b)
}

/// Recorded masked MHSA; `keep` masks key columns as a constant (no gradient
/// flows through the column mask itself). When `want_cls_attn` is set the
/// last row's attention distribution (mean over heads, values only) is also
/// returned for the attention-score selector.
pub fn mhsa_masked_node(
    tape: &mut Tape,
    x: VarId,
    keep: Option<&LayerMask>,
    b: &BoundBlock,
    heads: usize,
    want_cls_attn: bool,
) -> Result<(VarId, Option<Vec<f64>>)> {
    if let Some(k) = keep {
        if !k.any_kept() {
            return Err(Error::EmptyMask);
        }
    }
    let n = tape.value(x).rows();
    let width = tape.value(x).cols();
    let dh = width / heads;
    let q = affine_node(tape, x, b.wq, b.bq)?;
    let k = affine_node(tape, x, b.wk, b.bk)?;
    let v = affine_node(tape, x, b.wv, b.bv)?;
    let mask = keep.map(attention_mask);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    let mut cls_attn = if want_cls_attn { Some(vec![0.0; n]) } else { None };
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let s = tape.matmul_transb(qh, kh)?;
        let s = tape.affine(s, scale, 0.0);
        let a = tape.softmax_rows(s, mask.clone())?;
        if let Some(acc) = cls_attn.as_mut() {
            let av = tape.value(a);
            for (j, slot) in acc.iter_mut().enumerate() {
                *slot += av.at(n - 1, j) / heads as f64;
            }
        }
        head_outs.push(tape.matmul(a, vh)?);
    }
    let concat = tape.concat_cols(&head_outs);
    Ok((affine_node(tape, concat, b.wo, b.bo)?, cls_attn))
}

/// Recorded pre-norm block with Eq-style combine. `combine` is the Nx1
/// differentiable mask column (straight-through or relaxed); when absent the
/// block output is used for every row (dense layer).
pub fn vit_block_node(
    tape: &mut Tape,
    x: VarId,
    attn_keep: Option<&LayerMask>,
    combine: Option<VarId>,
    b: &BoundBlock,
    heads: usize,
    want_cls_attn: bool,
) -> Result<(VarId, Option<Vec<f64>>)> {
    let h1 = tape.layer_norm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let (attn, cls_attn) = mhsa_masked_node(tape, h1, attn_keep, b, heads, want_cls_attn)?;
    let u = tape.add(x, attn)?;
    let h2 = tape.layer_norm(u, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let m = affine_node(tape, h2, b.fc1_w, b.fc1_b)?;
    let m = tape.gelu(m);
    let m = affine_node(tape, m, b.fc2_w, b.fc2_b)?;
    let v = tape.add(u, m)?;
    let out = match combine {
        Some(mask) => tape.combine_rows(v, x, mask)?,
        None => v,
    };
    Ok((out, cls_attn))
}

pub fn head_predict_node(tape: &mut Tape, x: VarId, bound: &BoundBackbone) -> Result<VarId> {
    affine_node(tape, x, bound.head_w, bound.head_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims_for_test() -> ModelDims {
        ModelDims {
            layers: 2,
            heads: 2,
            width: 8,
            patch: 4,
            image_h: 8,
            image_w: 8,
            channels: 1,
            classes: 3,
        }
    }

    #[test]
    fn patch_embed_token_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let dims = dims_for_test();
        let params = BackboneParams::init_dense(dims, &mut rng).unwrap();
        let image = Image::zeros(8, 8, 1);
        let x = patch_embed(&image, &params).unwrap();
        assert_eq!(x.shape(), (4, 8));
    }

    #[test]
    fn patch_embed_zero_image_yields_positional_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let dims = dims_for_test();
        let mut params = BackboneParams::init_dense(dims, &mut rng).unwrap();
        params.patch_w = Matrix::zeros(16, 8);
        params.patch_b = Matrix::zeros(1, 8);
        let image = Image::zeros(8, 8, 1);
        let x = patch_embed(&image, &params).unwrap();
        assert_eq!(x, params.pos);
    }

    #[test]
    fn patch_embed_matches_per_patch_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let dims = dims_for_test();
        let params = BackboneParams::init_dense(dims, &mut rng).unwrap();
        let mut image = Image::zeros(8, 8, 1);
        for y in 0..8 {
            for x in 0..8 {
                image.set(y, x, 0, rng.gen_range(-1.0..1.0));
            }
        }
        let out = patch_embed(&image, &params).unwrap();
        // Oracle: flatten each patch by hand and project.
        for k in 0..4 {
            let (pr, pc) = (k / 2, k % 2);
            let mut flat = Vec::new();
            for dy in 0..4 {
                for dx in 0..4 {
                    flat.push(image.at(pr * 4 + dy, pc * 4 + dx, 0));
                }
            }
            for j in 0..8 {
                let mut acc = params.patch_b.at(0, j) + params.pos.at(k, j);
                for (p, &fv) in flat.iter().enumerate() {
                    acc += fv * params.patch_w.at(p, j);
                }
                assert!((out.at(k, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn patch_embed_rejects_indivisible_image() {
        let image = Image::zeros(9, 8, 1);
        assert!(matches!(
            patchify(&image, 4),
            Err(Error::IndivisibleImage { height: 9, width: 8, patch: 4 })
        ));
    }

    #[test]
    fn mhsa_all_ones_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(6, 8, 1.0, &mut rng);
        let keep = LayerMask::all_ones(6);
        let (masked, _) = mhsa_masked(&x, Some(&keep), &p, 2, false).unwrap();
        let (dense, _) = mhsa_masked(&x, None, &p, 2, false).unwrap();
        assert_eq!(masked, dense);
    }

    #[test]
    fn mhsa_single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(5, 8, 1.0, &mut rng);
        let mut keep = LayerMask::from_bits(vec![false; 5]);
        keep.set(2, true);
        let (out, _) = mhsa_masked(&x, Some(&keep), &p, 2, false).unwrap();
        // Row 2 sees only itself: out = (x2 Wv + bv) Wo + bo.
        let v = affine_rows(&x, &p.wv, &p.bv).unwrap();
        let vo = affine_rows(&v, &p.wo, &p.bo).unwrap();
        for j in 0..8 {
            assert!((out.at(2, j) - vo.at(2, j)).abs() <= 1e-12);
        }
    }

    #[test]
    fn mhsa_masked_rows_match_gathered_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(8, 8, 1.0, &mut rng);
        let keep = LayerMask::from_bits(vec![true, false, true, true, false, false, true, false]);
        let (masked, _) = mhsa_masked(&x, Some(&keep), &p, 2, false).unwrap();
        let idx = keep.kept_indices();
        let (dense_sub, _) = mhsa_masked(&x.gather_rows(&idx), None, &p, 2, false).unwrap();
        for (g, &i) in idx.iter().enumerate() {
            for j in 0..8 {
                assert!((masked.at(i, j) - dense_sub.at(g, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mhsa_rejects_all_pruned() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(4, 8, 1.0, &mut rng);
        let keep = LayerMask::from_bits(vec![false; 4]);
        assert!(matches!(mhsa_masked(&x, Some(&keep), &p, 2, false), Err(Error::EmptyMask)));
    }

    #[test]
    fn block_modes_agree_and_preserve_pruned_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(7, 8, 1.0, &mut rng);
        let keep = LayerMask::from_bits(vec![true, false, true, false, true, true, false]);
        let (masked, _) =
            vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Masked, false).unwrap();
        let (gathered, _) =
            vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Gathered, false).unwrap();
        for i in 0..7 {
            for j in 0..8 {
                assert!((masked.at(i, j) - gathered.at(i, j)).abs() <= 1e-10);
            }
            if !keep.kept(i) {
                assert_eq!(masked.row(i), x.row(i), "pruned row {i} must be bit-identical");
                assert_eq!(gathered.row(i), x.row(i));
            }
        }
    }

    #[test]
    fn block_all_ones_matches_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(4, 8, 1.0, &mut rng);
        let keep = LayerMask::all_ones(4);
        let (masked, _) =
            vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Masked, false).unwrap();
        let (gathered, _) =
            vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Gathered, false).unwrap();
        let (dense, _) = vit_block_forward(&x, None, &p, 2, ExecMode::Masked, false).unwrap();
        for i in 0..4 {
            for j in 0..8 {
                assert!((masked.at(i, j) - gathered.at(i, j)).abs() <= 1e-10);
                assert!((masked.at(i, j) - dense.at(i, j)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn head_predict_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let dims = dims_for_test();
        let mut params = BackboneParams::init_dense(dims, &mut rng).unwrap();
        let x = Matrix::randn(4, 8, 1.0, &mut rng);

        params.head_w = Matrix::zeros(8, 3);
        params.head_b = Matrix::zeros(1, 3);
        assert_eq!(head_predict(&x, &params).unwrap(), Matrix::zeros(4, 3));

        params.head_w = Matrix::randn(8, 3, 0.5, &mut rng);
        params.head_b = Matrix::randn(1, 3, 0.5, &mut rng);
        let scores = head_predict(&x, &params).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = params.head_b.at(0, j);
                for k in 0..8 {
                    acc += x.at(i, k) * params.head_w.at(k, j);
                }
                assert!((scores.at(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn recorded_block_matches_pure_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let dims = dims_for_test();
        let params = BackboneParams::init_dense(dims, &mut rng).unwrap();
        let x = Matrix::randn(4, 8, 1.0, &mut rng);
        let keep = LayerMask::from_bits(vec![true, false, true, true]);

        let (pure, _) =
            vit_block_forward(&x, Some(&keep), &params.blocks[0], 2, ExecMode::Masked, false)
                .unwrap();

        let mut tape = Tape::new();
        let bound = BoundBackbone::bind(&mut tape, &params);
        let xid = tape.constant(x.clone());
        let mask_col = tape.constant(keep.as_column());
        let (out, _) =
            vit_block_node(&mut tape, xid, Some(&keep), Some(mask_col), &bound.blocks[0], 2, false)
                .unwrap();
        assert_eq!(tape.value(out), &pure);
    }
}
