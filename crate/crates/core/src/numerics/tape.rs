//! Reverse-mode differentiation over matrices.
//!
//! Ops are recorded in forward order into a flat arena; `backward` walks the
//! arena in exact reverse order and accumulates gradients by the chain rule.
//! Every op saves the full inputs it needs (no checkpointing), so replaying a
//! forward with the same inputs yields an identical tape.

use crate::error::{Error, Result};
use crate::numerics::ops;
use crate::numerics::Matrix;

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

impl VarId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Probabilities below this floor are clamped before `ln`, keeping log-probs
/// finite even when a softmax output underflows to zero.
pub const LN_CLAMP_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: VarId, b: VarId },
    MatMulTransB { a: VarId, b: VarId },
    Add { a: VarId, b: VarId },
    MulElem { a: VarId, b: VarId },
    AffineConst { a: VarId, scale: f64 },
    AddRowBroadcast { a: VarId, row: VarId },
    AddConstMat { a: VarId },
    SoftmaxRows { a: VarId },
    LayerNorm { x: VarId, gain: VarId, bias: VarId, eps: f64 },
    Gelu { a: VarId },
    LnClamped { a: VarId },
    SliceCols { a: VarId, start: usize },
    SliceRows { a: VarId, start: usize },
    ConcatCols { parts: Vec<VarId> },
    ConcatRows { parts: Vec<VarId> },
    ColMeanBroadcast { a: VarId },
    MeanAll { a: VarId },
    CombineRows { upd: VarId, orig: VarId, mask: VarId },
    StraightThrough { soft: VarId },
    CrossEntropyMean { scores: VarId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by `Tape::backward`. Only leaves registered
/// with `param` retain their gradients; intermediates are dropped as soon as
/// they have been propagated.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a parameter, densified to the given shape when the
    /// parameter never influenced the loss.
    pub fn dense(&self, id: VarId, rows: usize, cols: usize) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Matrix::zeros(rows, cols),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Trainable leaf: receives a gradient in `backward`.
    pub fn param(&mut self, value: Matrix) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf: data, noise, masks.
    pub fn constant(&mut self, value: Matrix) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a * b^T`.
    pub fn matmul_transb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = ops::matmul_transb(self.value(a), self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMulTransB { a, b }, rg))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MulElem { a, b }, rg))
    }

    /// `scale * a + shift`, both constants.
    pub fn affine(&mut self, a: VarId, scale: f64, shift: f64) -> VarId {
        let value = self.value(a).map(|v| scale * v + shift);
        let rg = self.needs(&[a]);
        self.push(value, Op::AffineConst { a, scale }, rg)
    }

    /// Add a 1 x cols bias row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: VarId, row: VarId) -> Result<VarId> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.rows() != 1 || rv.cols() != av.cols() {
            return Err(Error::DimMismatch {
                op: "add_row_broadcast",
                left_rows: av.rows(),
                left_cols: av.cols(),
                right_rows: rv.rows(),
                right_cols: rv.cols(),
            });
        }
        let mut value = av.clone();
        for i in 0..value.rows() {
            for j in 0..value.cols() {
                let v = value.at(i, j) + rv.at(0, j);
                value.set(i, j, v);
            }
        }
        let rg = self.needs(&[a, row]);
        Ok(self.push(value, Op::AddRowBroadcast { a, row }, rg))
    }

    /// Add a constant matrix (e.g. frozen Gumbel noise). No gradient flows
    /// into the constant.
    pub fn add_const_mat(&mut self, a: VarId, c: &Matrix) -> Result<VarId> {
        let value = self.value(a).add(c)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::AddConstMat { a }, rg))
    }

    /// Row-wise softmax with an optional constant additive mask. The mask is
    /// a fixed part of the op, not a differentiable input; backward only
    /// needs the output distribution.
    pub fn softmax_rows(&mut self, a: VarId, mask: Option<Matrix>) -> Result<VarId> {
        let value = ops::softmax_rows(self.value(a), mask.as_ref())?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::SoftmaxRows { a }, rg))
    }

    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        let value = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }, rg))
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        let value = ops::gelu(self.value(a));
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu { a }, rg)
    }

    /// Elementwise `ln(max(x, LN_CLAMP_FLOOR))`.
    pub fn ln_clamped(&mut self, a: VarId) -> VarId {
        let value = self.value(a).map(|v| v.max(LN_CLAMP_FLOOR).ln());
        let rg = self.needs(&[a]);
        self.push(value, Op::LnClamped { a }, rg)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let value = self.value(a).slice_cols(start, len);
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceCols { a, start }, rg)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> VarId {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.needs(&[a]);
        self.push(value, Op::SliceRows { a, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> VarId {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&values);
        let rg = self.needs(parts);
        self.push(value, Op::ConcatCols { parts: parts.to_vec() }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> VarId {
        let values: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_rows(&values);
        let rg = self.needs(parts);
        self.push(value, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    /// Replace every row with the column means (same shape as input).
    pub fn col_mean_broadcast(&mut self, a: VarId) -> VarId {
        let av = self.value(a);
        let means = av.col_sums().scale(1.0 / av.rows() as f64);
        let value = Matrix::from_fn(av.rows(), av.cols(), |_, j| means.at(0, j));
        let rg = self.needs(&[a]);
        self.push(value, Op::ColMeanBroadcast { a }, rg)
    }

    /// Mean over all entries, as a 1x1 scalar.
    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let value = Matrix::scalar(self.value(a).mean());
        let rg = self.needs(&[a]);
        self.push(value, Op::MeanAll { a }, rg)
    }

    /// Per-row convex combine: row i of the output is
    /// `mask_i * upd_i + (1 - mask_i) * orig_i` with `mask` an Nx1 column.
    pub fn combine_rows(&mut self, upd: VarId, orig: VarId, mask: VarId) -> Result<VarId> {
        let (uv, ov, mv) = (self.value(upd), self.value(orig), self.value(mask));
        if !uv.same_shape(ov) {
            return Err(Error::DimMismatch {
                op: "combine_rows",
                left_rows: uv.rows(),
                left_cols: uv.cols(),
                right_rows: ov.rows(),
                right_cols: ov.cols(),
            });
        }
        if mv.rows() != uv.rows() || mv.cols() != 1 {
            return Err(Error::ShapeMismatch {
                what: "combine_rows mask".to_string(),
                expected_rows: uv.rows(),
                expected_cols: 1,
                got_rows: mv.rows(),
                got_cols: mv.cols(),
            });
        }
        let mut value = Matrix::zeros(uv.rows(), uv.cols());
        for i in 0..uv.rows() {
            let m = mv.at(i, 0);
            for j in 0..uv.cols() {
                value.set(i, j, m * uv.at(i, j) + (1.0 - m) * ov.at(i, j));
            }
        }
        let rg = self.needs(&[upd, orig, mask]);
        Ok(self.push(value, Op::CombineRows { upd, orig, mask }, rg))
    }

    /// Straight-through estimator: forward takes the given hard values,
    /// backward passes the gradient to `soft` unchanged.
    pub fn straight_through(&mut self, soft: VarId, hard: Matrix) -> Result<VarId> {
        if !self.value(soft).same_shape(&hard) {
            return Err(Error::ShapeMismatch {
                what: "straight_through hard values".to_string(),
                expected_rows: self.value(soft).rows(),
                expected_cols: self.value(soft).cols(),
                got_rows: hard.rows(),
                got_cols: hard.cols(),
            });
        }
        let rg = self.needs(&[soft]);
        Ok(self.push(hard, Op::StraightThrough { soft }, rg))
    }

    /// Mean per-row cross-entropy with stable log-softmax; 1x1 output.
    pub fn cross_entropy_mean(&mut self, scores: VarId, labels: &[usize]) -> Result<VarId> {
        let sv = self.value(scores);
        if labels.len() != sv.rows() {
            return Err(Error::ShapeMismatch {
                what: "cross_entropy labels".to_string(),
                expected_rows: sv.rows(),
                expected_cols: 1,
                got_rows: labels.len(),
                got_cols: 1,
            });
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= sv.cols() {
                return Err(Error::LabelOutOfRange { label: l, classes: sv.cols(), token: i });
            }
        }
        let mut total = 0.0;
        for i in 0..sv.rows() {
            let row = sv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[labels[i]];
        }
        let value = Matrix::scalar(total / sv.rows() as f64);
        let rg = self.needs(&[scores]);
        Ok(self.push(value, Op::CrossEntropyMean { scores, labels: labels.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar node. Returns gradients for `param` leaves.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidConfig(format!(
                "backward expects a 1x1 scalar, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let da = ops::matmul_transb(&g, self.value(*b)).expect("shape invariant");
                    let db = ops::matmul(&self.value(*a).transpose(), &g).expect("shape invariant");
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::MatMulTransB { a, b } => {
                    let da = ops::matmul(&g, self.value(*b)).expect("shape invariant");
                    let db = ops::matmul(&g.transpose(), self.value(*a)).expect("shape invariant");
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Add { a, b } => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::MulElem { a, b } => {
                    let da = g.hadamard(self.value(*b)).expect("shape invariant");
                    let db = g.hadamard(self.value(*a)).expect("shape invariant");
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::AffineConst { a, scale } => {
                    self.accum(&mut grads, *a, g.scale(*scale));
                }
                Op::AddRowBroadcast { a, row } => {
                    self.accum(&mut grads, *row, g.col_sums());
                    self.accum(&mut grads, *a, g);
                }
                Op::AddConstMat { a } => {
                    self.accum(&mut grads, *a, g);
                }
                Op::SoftmaxRows { a } => {
                    let y = &node.value;
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let dot: f64 =
                            (0..y.cols()).map(|j| g.at(i, j) * y.at(i, j)).sum();
                        for j in 0..y.cols() {
                            da.set(i, j, y.at(i, j) * (g.at(i, j) - dot));
                        }
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let c = xv.cols() as f64;
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    let mut dgain = Matrix::zeros(1, xv.cols());
                    let mut dbias = Matrix::zeros(1, xv.cols());
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / c;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        // xhat and the upstream-through-gain gradient
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut xhat = vec![0.0; xv.cols()];
                        let mut dxhat = vec![0.0; xv.cols()];
                        for j in 0..xv.cols() {
                            xhat[j] = (row[j] - mean) * inv_std;
                            dxhat[j] = g.at(i, j) * gv.at(0, j);
                            mean_dxhat += dxhat[j];
                            mean_dxhat_xhat += dxhat[j] * xhat[j];
                            dgain.set(0, j, dgain.at(0, j) + g.at(i, j) * xhat[j]);
                            dbias.set(0, j, dbias.at(0, j) + g.at(i, j));
                        }
                        mean_dxhat /= c;
                        mean_dxhat_xhat /= c;
                        for j in 0..xv.cols() {
                            dx.set(i, j, inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat));
                        }
                    }
                    self.accum(&mut grads, *x, dx);
                    self.accum(&mut grads, *gain, dgain);
                    self.accum(&mut grads, *bias, dbias);
                }
                Op::Gelu { a } => {
                    let xv = self.value(*a);
                    let da = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                        g.at(i, j) * ops::gelu_grad_scalar(xv.at(i, j))
                    });
                    self.accum(&mut grads, *a, da);
                }
                Op::LnClamped { a } => {
                    let xv = self.value(*a);
                    let da = Matrix::from_fn(xv.rows(), xv.cols(), |i, j| {
                        let v = xv.at(i, j);
                        if v >= LN_CLAMP_FLOOR {
                            g.at(i, j) / v
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, *a, da);
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            da.set(i, start + j, g.at(i, j));
                        }
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::SliceRows { a, start } => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for i in 0..g.rows() {
                        da.row_mut(start + i).copy_from_slice(g.row(i));
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        self.accum(&mut grads, p, g.slice_cols(off, w));
                        off += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        self.accum(&mut grads, p, g.slice_rows(off, h));
                        off += h;
                    }
                }
                Op::ColMeanBroadcast { a } => {
                    let r = self.value(*a).rows() as f64;
                    let colsum = g.col_sums().scale(1.0 / r);
                    let da = Matrix::from_fn(g.rows(), g.cols(), |_, j| colsum.at(0, j));
                    self.accum(&mut grads, *a, da);
                }
                Op::MeanAll { a } => {
                    let av = self.value(*a);
                    let scale = g.at(0, 0) / (av.rows() * av.cols()) as f64;
                    self.accum(&mut grads, *a, Matrix::filled(av.rows(), av.cols(), scale));
                }
                Op::CombineRows { upd, orig, mask } => {
                    let (uv, ov, mv) = (self.value(*upd), self.value(*orig), self.value(*mask));
                    let mut dupd = Matrix::zeros(uv.rows(), uv.cols());
                    let mut dorig = Matrix::zeros(uv.rows(), uv.cols());
                    let mut dmask = Matrix::zeros(uv.rows(), 1);
                    for i in 0..uv.rows() {
                        let m = mv.at(i, 0);
                        let mut acc = 0.0;
                        for j in 0..uv.cols() {
                            let gij = g.at(i, j);
                            dupd.set(i, j, gij * m);
                            dorig.set(i, j, gij * (1.0 - m));
                            acc += gij * (uv.at(i, j) - ov.at(i, j));
                        }
                        dmask.set(i, 0, acc);
                    }
                    self.accum(&mut grads, *upd, dupd);
                    self.accum(&mut grads, *orig, dorig);
                    self.accum(&mut grads, *mask, dmask);
                }
                Op::StraightThrough { soft } => {
                    self.accum(&mut grads, *soft, g);
                }
                Op::CrossEntropyMean { scores, labels } => {
                    let sv = self.value(*scores);
                    let probs = ops::softmax_rows(sv, None).expect("scores have no mask");
                    let scale = g.at(0, 0) / sv.rows() as f64;
                    let mut da = probs.scale(scale);
                    for (i, &l) in labels.iter().enumerate() {
                        da.set(i, l, da.at(i, l) - scale);
                    }
                    self.accum(&mut grads, *scores, da);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Matrix>], id: VarId, delta: Matrix) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_scaled_assign(&delta, 1.0),
            None => grads[id.0] = Some(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_gradient_at_three() {
        // f(w) = w^2 at w = 3 -> df/dw = 6.
        let mut tape = Tape::new();
        let w = tape.param(Matrix::scalar(3.0));
        let sq = tape.mul_elem(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert!((grads.get(w).unwrap().at(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        // Row sums of a softmax are constant, so d(sum)/dx vanishes.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.param(Matrix::randn(2, 5, 1.0, &mut rng));
        let s = tape.softmax_rows(x, None).unwrap();
        let m = tape.mean_all(s);
        let grads = tape.backward(m).unwrap();
        let gx = grads.get(x).unwrap();
        for i in 0..2 {
            for j in 0..5 {
                assert!(gx.at(i, j).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_backward_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let av = Matrix::randn(2, 3, 1.0, &mut rng);
        let bv = Matrix::randn(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let a = tape.param(av.clone());
        let b = tape.param(bv.clone());
        let c = tape.matmul(a, b).unwrap();
        let m = tape.mean_all(c);
        let grads = tape.backward(m).unwrap();
        // dC is uniform 1/(2*4); dA = dC * B^T, dB = A^T * dC.
        let dc = Matrix::filled(2, 4, 1.0 / 8.0);
        let da = ops::matmul_transb(&dc, &bv).unwrap();
        let db = ops::matmul(&av.transpose(), &dc).unwrap();
        assert_eq!(grads.get(a).unwrap(), &da);
        assert_eq!(grads.get(b).unwrap(), &db);
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut tape = Tape::new();
        let soft = tape.param(Matrix::col_matrix(&[0.7, 0.3]));
        let hard = Matrix::col_matrix(&[1.0, 0.0]);
        let st = tape.straight_through(soft, hard.clone()).unwrap();
        assert_eq!(tape.value(st), &hard);
        let m = tape.mean_all(st);
        let grads = tape.backward(m).unwrap();
        let gs = grads.get(soft).unwrap();
        assert!((gs.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((gs.at(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn replay_produces_identical_tape() {
        let build = |tape: &mut Tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = tape.param(Matrix::randn(3, 4, 1.0, &mut rng));
            let w = tape.param(Matrix::randn(4, 4, 1.0, &mut rng));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h);
            let s = tape.softmax_rows(h, None).unwrap();
            tape.mean_all(s)
        };
        let mut t1 = Tape::new();
        let out1 = build(&mut t1);
        let mut t2 = Tape::new();
        let out2 = build(&mut t2);
        assert_eq!(t1.len(), t2.len());
        for i in 0..t1.len() {
            assert_eq!(t1.value(VarId(i)), t2.value(VarId(i)));
        }
        assert_eq!(t1.value(out1), t2.value(out2));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let s = tape.param(Matrix::zeros(2, 3));
        let err = tape.cross_entropy_mean(s, &[0, 3]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 3, classes: 3, token: 1 }));
    }

    #[test]
    fn uniform_cross_entropy_is_ln_k() {
        let mut tape = Tape::new();
        let s = tape.param(Matrix::zeros(5, 4));
        let ce = tape.cross_entropy_mean(s, &[0, 1, 2, 3, 0]).unwrap();
        // ln(4) at 50-digit precision.
        assert!((tape.value(ce).at(0, 0) - 1.3862943611198906).abs() < 1e-12);
    }
}
