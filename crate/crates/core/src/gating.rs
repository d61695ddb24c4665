//! Token-selection policies: the 2-layer MLP gate with Gumbel-Softmax
//! sampling (training) and argmax (inference), a heavier gate with a
//! mean-pooled global branch for comparison, and the attention-score
//! baseline selector.

use rand::Rng;
use rand_distr::Open01;

use crate::error::{Error, Result};
use crate::mask::LayerMask;
use crate::numerics::{ops, Matrix, Tape, VarId};

/// Which gating head architecture a gated layer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateDesign {
    /// The 2-layer MLP head.
    Mlp2,
    /// Local branch + mean-pooled global branch + concatenation.
    Complex,
}

/// Weights of the 2-layer selection MLP: C -> C/4 -> 2.
/// Output column 0 is the keep logit, column 1 the prune logit.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl GateParams {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let hidden = (width / 4).max(1);
        GateParams {
            w1: Matrix::randn(width, hidden, 0.02, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, 2, 0.02, rng),
            b2: Matrix::zeros(1, 2),
        }
    }
}

/// The heavier gating head: a token-local branch plus a mean-pooled global
/// branch, concatenated and reduced to 2 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGateParams {
    pub w_local: Matrix,
    pub b_local: Matrix,
    pub w_global: Matrix,
    pub b_global: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ComplexGateParams {
    pub fn init(width: usize, rng: &mut impl Rng) -> Self {
        let half = (width / 2).max(1);
        let hidden = (width / 4).max(1);
        ComplexGateParams {
            w_local: Matrix::randn(width, half, 0.02, rng),
            b_local: Matrix::zeros(1, half),
            w_global: Matrix::randn(width, half, 0.02, rng),
            b_global: Matrix::zeros(1, half),
            w1: Matrix::randn(2 * half, hidden, 0.02, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::randn(hidden, 2, 0.02, rng),
            b2: Matrix::zeros(1, 2),
        }
    }
}

/// One gated layer's selection head.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    Mlp2(GateParams),
    Complex(ComplexGateParams),
}

impl Gate {
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        match self {
            Gate::Mlp2(g) => vec![
                (format!("{prefix}.w1"), &g.w1),
                (format!("{prefix}.b1"), &g.b1),
                (format!("{prefix}.w2"), &g.w2),
                (format!("{prefix}.b2"), &g.b2),
            ],
            Gate::Complex(g) => vec![
                (format!("{prefix}.w_local"), &g.w_local),
                (format!("{prefix}.b_local"), &g.b_local),
                (format!("{prefix}.w_global"), &g.w_global),
                (format!("{prefix}.b_global"), &g.b_global),
                (format!("{prefix}.w1"), &g.w1),
                (format!("{prefix}.b1"), &g.b1),
                (format!("{prefix}.w2"), &g.w2),
                (format!("{prefix}.b2"), &g.b2),
            ],
        }
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Matrix)> {
        match self {
            Gate::Mlp2(g) => vec![
                (format!("{prefix}.w1"), &mut g.w1),
                (format!("{prefix}.b1"), &mut g.b1),
                (format!("{prefix}.w2"), &mut g.w2),
                (format!("{prefix}.b2"), &mut g.b2),
            ],
            Gate::Complex(g) => vec![
                (format!("{prefix}.w_local"), &mut g.w_local),
                (format!("{prefix}.b_local"), &mut g.b_local),
                (format!("{prefix}.w_global"), &mut g.w_global),
                (format!("{prefix}.b_global"), &mut g.b_global),
                (format!("{prefix}.w1"), &mut g.w1),
                (format!("{prefix}.b1"), &mut g.b1),
                (format!("{prefix}.w2"), &mut g.w2),
                (format!("{prefix}.b2"), &mut g.b2),
            ],
        }
    }
}

/// Nx2 keep/prune probabilities; rows sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GateProbs(pub Matrix);

impl GateProbs {
    pub fn keep_prob(&self, token: usize) -> f64 {
        self.0.at(token, 0)
    }

    pub fn tokens(&self) -> usize {
        self.0.rows()
    }
}

/// p = Softmax(MLP(x)) over the two keep/prune logits, per token.
pub fn gate_probs(x: &Matrix, gate: &Gate) -> Result<GateProbs> {
    let logits = match gate {
        Gate::Mlp2(g) => {
            let h = affine(x, &g.w1, &g.b1)?;
            affine(&ops::gelu(&h), &g.w2, &g.b2)?
        }
        Gate::Complex(g) => {
            let local = affine(x, &g.w_local, &g.b_local)?;
            let global = affine(x, &g.w_global, &g.b_global)?;
            let pooled = global.col_sums().scale(1.0 / global.rows() as f64);
            let broadcast = Matrix::from_fn(x.rows(), pooled.cols(), |_, j| pooled.at(0, j));
            let z = Matrix::concat_cols(&[&local, &broadcast]);
            let h = affine(&z, &g.w1, &g.b1)?;
            affine(&ops::gelu(&h), &g.w2, &g.b2)?
        }
    };
    Ok(GateProbs(ops::softmax_rows(&logits, None)?))
}

fn affine(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut out = ops::matmul(x, w)?;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let v = out.at(i, j) + b.at(0, j);
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Tape leaf ids for one gate's parameters, in `named_params` order.
#[derive(Debug, Clone)]
pub enum BoundGate {
    Mlp2 { w1: VarId, b1: VarId, w2: VarId, b2: VarId },
    Complex {
        w_local: VarId,
        b_local: VarId,
        w_global: VarId,
        b_global: VarId,
        w1: VarId,
        b1: VarId,
        w2: VarId,
        b2: VarId,
    },
}

impl Gate {
    pub fn bind(&self, tape: &mut Tape) -> BoundGate {
        match self {
            Gate::Mlp2(g) => BoundGate::Mlp2 {
                w1: tape.param(g.w1.clone()),
                b1: tape.param(g.b1.clone()),
                w2: tape.param(g.w2.clone()),
                b2: tape.param(g.b2.clone()),
            },
            Gate::Complex(g) => BoundGate::Complex {
                w_local: tape.param(g.w_local.clone()),
                b_local: tape.param(g.b_local.clone()),
                w_global: tape.param(g.w_global.clone()),
                b_global: tape.param(g.b_global.clone()),
                w1: tape.param(g.w1.clone()),
                b1: tape.param(g.b1.clone()),
                w2: tape.param(g.w2.clone()),
                b2: tape.param(g.b2.clone()),
            },
        }
    }
}

impl BoundGate {
    pub fn param_ids(&self) -> Vec<VarId> {
        match self {
            BoundGate::Mlp2 { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
            BoundGate::Complex { w_local, b_local, w_global, b_global, w1, b1, w2, b2 } => {
                vec![*w_local, *b_local, *w_global, *b_global, *w1, *b1, *w2, *b2]
            }
        }
    }
}

/// Recorded version of [`gate_probs`]; gradient flows into the gate weights.
pub fn gate_probs_node(tape: &mut Tape, x: VarId, gate: &BoundGate) -> Result<VarId> {
    let logits = match gate {
        BoundGate::Mlp2 { w1, b1, w2, b2 } => {
            let h = tape.matmul(x, *w1)?;
            let h = tape.add_row_broadcast(h, *b1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, *w2)?;
            tape.add_row_broadcast(h, *b2)?
        }
        BoundGate::Complex { w_local, b_local, w_global, b_global, w1, b1, w2, b2 } => {
            let local = tape.matmul(x, *w_local)?;
            let local = tape.add_row_broadcast(local, *b_local)?;
            let global = tape.matmul(x, *w_global)?;
            let global = tape.add_row_broadcast(global, *b_global)?;
            let pooled = tape.col_mean_broadcast(global);
            let z = tape.concat_cols(&[local, pooled]);
            let h = tape.matmul(z, *w1)?;
            let h = tape.add_row_broadcast(h, *b1)?;
            let h = tape.gelu(h);
            let h = tape.matmul(h, *w2)?;
            tape.add_row_broadcast(h, *b2)?
        }
    };
    tape.softmax_rows(logits, None)
}

/// I.i.d. standard Gumbel noise, one value per token per class.
pub fn gumbel_noise(tokens: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(tokens, 2, |_, _| {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    })
}

/// Relaxed Gumbel-Softmax sample at temperature `tau`:
/// softmax((ln p + noise) / tau) per row.
pub fn relaxed_sample(p: &GateProbs, noise: &Matrix, tau: f64) -> Result<Matrix> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let perturbed = Matrix::from_fn(p.0.rows(), 2, |i, j| {
        (p.0.at(i, j).max(crate::numerics::LN_CLAMP_FLOOR).ln() + noise.at(i, j)) / tau
    });
    ops::softmax_rows(&perturbed, None)
}

/// Recorded version of [`relaxed_sample`]; noise is a frozen constant.
pub fn relaxed_sample_node(tape: &mut Tape, p: VarId, noise: &Matrix, tau: f64) -> Result<VarId> {
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(format!("tau must be > 0, got {tau}")));
    }
    let logp = tape.ln_clamped(p);
    let perturbed = tape.add_const_mat(logp, noise)?;
    let scaled = tape.affine(perturbed, 1.0 / tau, 0.0);
    tape.softmax_rows(scaled, None)
}

/// Hard decision from a relaxed sample: keep when the keep component wins
/// (ties keep).
pub fn harden(relaxed: &Matrix) -> LayerMask {
    LayerMask::from_bits((0..relaxed.rows()).map(|i| relaxed.at(i, 0) >= relaxed.at(i, 1)).collect())
}

/// Training-time mask draw: hard argmax over Gumbel-perturbed log-probs.
/// The differentiable soft path is exposed separately via
/// [`relaxed_sample_node`] and the tape's straight-through op.
pub fn sample_mask_train(p: &GateProbs, rng: &mut impl Rng, tau: f64) -> Result<LayerMask> {
    let noise = gumbel_noise(p.tokens(), rng);
    Ok(harden(&relaxed_sample(p, &noise, tau)?))
}

/// Inference decision: keep iff p_keep >= p_prune. Deterministic, ties keep.
pub fn select_mask_infer(p: &GateProbs) -> LayerMask {
    LayerMask::from_bits((0..p.tokens()).map(|i| p.0.at(i, 0) >= p.0.at(i, 1)).collect())
}

/// Keep the ceil(keep_ratio * N) tokens with the highest attention from the
/// class token; ties break toward the lower token index.
pub fn attention_score_select(attn: &[f64], keep_ratio: f64) -> Result<LayerMask> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep_ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    if attn.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidConfig("attention scores must be nonnegative".to_string()));
    }
    let n = attn.len();
    let k = target_keep_count(keep_ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| attn[b].partial_cmp(&attn[a]).unwrap().then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in order.iter().take(k) {
        bits[i] = true;
    }
    Ok(LayerMask::from_bits(bits))
}

/// ceil(ratio * n) with a small slack so exact products like 0.1*30 do not
/// round up through float error; clamped to [1, n].
pub fn target_keep_count(ratio: f64, n: usize) -> usize {
    let k = (ratio * n as f64 - 1e-9).ceil() as isize;
    k.clamp(1, n as isize) as usize
}

/// Top-k by keep probability, used for fixed-rate inference. Ties break
/// toward the lower token index.
pub fn select_mask_topk(p: &GateProbs, keep_ratio: f64) -> Result<LayerMask> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "keep_ratio must be in (0, 1], got {keep_ratio}"
        )));
    }
    let n = p.tokens();
    let k = target_keep_count(keep_ratio, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p.keep_prob(b).partial_cmp(&p.keep_prob(a)).unwrap().then(a.cmp(&b)));
    let mut bits = vec![false; n];
    for &i in order.iter().take(k) {
        bits[i] = true;
    }
    Ok(LayerMask::from_bits(bits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat_probs(n: usize, keep: f64) -> GateProbs {
        GateProbs(Matrix::from_fn(n, 2, |_, j| if j == 0 { keep } else { 1.0 - keep }))
    }

    #[test]
    fn zero_weights_give_uniform_probs() {
        let gate = Gate::Mlp2(GateParams {
            w1: Matrix::zeros(8, 2),
            b1: Matrix::zeros(1, 2),
            w2: Matrix::zeros(2, 2),
            b2: Matrix::zeros(1, 2),
        });
        let x = Matrix::filled(4, 8, 0.3);
        let p = gate_probs(&x, &gate).unwrap();
        for i in 0..4 {
            assert!((p.keep_prob(i) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_dominates_keep() {
        let gate = Gate::Mlp2(GateParams {
            w1: Matrix::zeros(8, 2),
            b1: Matrix::zeros(1, 2),
            w2: Matrix::zeros(2, 2),
            b2: Matrix::row_matrix(&[20.0, -20.0]),
        });
        let x = Matrix::zeros(3, 8);
        let p = gate_probs(&x, &gate).unwrap();
        for i in 0..3 {
            assert!(p.keep_prob(i) >= 1.0 - 1e-8);
        }
    }

    #[test]
    fn gate_probs_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let c = 16;
        let gate_params = GateParams::init(c, &mut rng);
        let x = Matrix::randn(5, c, 1.0, &mut rng);
        let p = gate_probs(&x, &Gate::Mlp2(gate_params.clone())).unwrap();
        // linear -> GELU -> linear -> softmax, written out longhand.
        for i in 0..5 {
            let mut h = vec![0.0; gate_params.w1.cols()];
            for (jj, hj) in h.iter_mut().enumerate() {
                let mut acc = gate_params.b1.at(0, jj);
                for k in 0..c {
                    acc += x.at(i, k) * gate_params.w1.at(k, jj);
                }
                *hj = ops::gelu_scalar(acc);
            }
            let mut logits = [0.0f64; 2];
            for (jj, lj) in logits.iter_mut().enumerate() {
                let mut acc = gate_params.b2.at(0, jj);
                for (k, hk) in h.iter().enumerate() {
                    acc += hk * gate_params.w2.at(k, jj);
                }
                *lj = acc;
            }
            let m = logits[0].max(logits[1]);
            let e0 = (logits[0] - m).exp();
            let e1 = (logits[1] - m).exp();
            assert!((p.keep_prob(i) - e0 / (e0 + e1)).abs() <= 1e-12);
        }
    }

    #[test]
    fn certain_keep_is_always_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = flat_probs(6, 1.0 - 1e-15);
        for _ in 0..200 {
            let m = sample_mask_train(&p, &mut rng, 1.0).unwrap();
            assert_eq!(m.count_kept(), 6);
        }
    }

    #[test]
    fn keep_frequency_tracks_probability() {
        // 3-sigma binomial bound over 10^4 draws at several keep levels.
        let draws = 10_000;
        for (si, keep) in [0.1, 0.5, 0.9].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + si as u64);
            let p = flat_probs(1, keep);
            let mut kept = 0usize;
            for _ in 0..draws {
                if sample_mask_train(&p, &mut rng, 1.0).unwrap().kept(0) {
                    kept += 1;
                }
            }
            let freq = kept as f64 / draws as f64;
            let sigma = (keep * (1.0 - keep) / draws as f64).sqrt();
            assert!(
                (freq - keep).abs() <= 3.0 * sigma,
                "keep {keep}: freq {freq} outside 3 sigma ({sigma})"
            );
        }
    }

    #[test]
    fn soft_path_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let c = 8;
        let gate = GateParams::init(c, &mut rng);
        let x = Matrix::randn(6, c, 1.0, &mut rng);
        let noise = gumbel_noise(6, &mut rng);
        let params = vec![
            ("w1".to_string(), gate.w1.clone()),
            ("b1".to_string(), gate.b1.clone()),
            ("w2".to_string(), gate.w2.clone()),
            ("b2".to_string(), gate.b2.clone()),
        ];
        let cfg = GradCheckConfig { threshold: 1e-3, ..Default::default() };
        let report = grad_check(&params, &cfg, |tape, ids| {
            let xid = tape.constant(x.clone());
            let bound = BoundGate::Mlp2 { w1: ids[0], b1: ids[1], w2: ids[2], b2: ids[3] };
            let p = gate_probs_node(tape, xid, &bound)?;
            let soft = relaxed_sample_node(tape, p, &noise, 1.0)?;
            let keep = tape.slice_cols(soft, 0, 1);
            Ok(tape.mean_all(keep))
        })
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn straight_through_gradient_equals_relaxed_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p_values = Matrix::from_fn(5, 2, |i, j| {
            let keep = 0.1 + 0.18 * i as f64;
            if j == 0 {
                keep
            } else {
                1.0 - keep
            }
        });
        let noise = gumbel_noise(5, &mut rng);

        let run = |with_st: bool| {
            let mut tape = Tape::new();
            let p = tape.param(p_values.clone());
            let soft = relaxed_sample_node(&mut tape, p, &noise, 1.0).unwrap();
            let keep = tape.slice_cols(soft, 0, 1);
            let head = if with_st {
                let hard = harden(tape.value(soft)).as_column();
                tape.straight_through(keep, hard).unwrap()
            } else {
                keep
            };
            let m = tape.mean_all(head);
            let grads = tape.backward(m).unwrap();
            grads.get(p).unwrap().clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn infer_selection_is_argmax_with_tie_keep() {
        let p = GateProbs(Matrix::from_vec(3, 2, vec![0.9, 0.1, 0.5, 0.5, 0.2, 0.8]).unwrap());
        let m = select_mask_infer(&p);
        assert_eq!(m.bits(), &[true, true, false]);
    }

    #[test]
    fn infer_selection_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..50 {
            let logits = Matrix::randn(7, 2, 1.5, &mut rng);
            let scale = rng.gen_range(0.1..5.0);
            let p1 = GateProbs(ops::softmax_rows(&logits, None).unwrap());
            let p2 = GateProbs(ops::softmax_rows(&logits.scale(scale), None).unwrap());
            assert_eq!(select_mask_infer(&p1), select_mask_infer(&p2));
        }
    }

    #[test]
    fn attention_select_keeps_ratio_count() {
        assert_eq!(attention_score_select(&[0.4, 0.3, 0.2, 0.1], 1.0).unwrap().count_kept(), 4);
        let m = attention_score_select(&[0.4, 0.3, 0.2, 0.1], 0.5).unwrap();
        assert_eq!(m.bits(), &[true, true, false, false]);
    }

    #[test]
    fn attention_select_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let attn: Vec<f64> = (0..100).map(|_| rng.gen_range(0.0..1.0)).collect();
        let m = attention_score_select(&attn, 0.7).unwrap();
        assert_eq!(m.count_kept(), 70);
        let mut order: Vec<usize> = (0..100).collect();
        order.sort_by(|&a, &b| attn[b].partial_cmp(&attn[a]).unwrap().then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            assert_eq!(m.kept(i), rank < 70, "token {i} rank {rank}");
        }
    }

    #[test]
    fn target_keep_count_resists_float_dust() {
        assert_eq!(target_keep_count(0.1, 30), 3);
        assert_eq!(target_keep_count(0.7, 100), 70);
        assert_eq!(target_keep_count(0.29, 10), 3);
        assert_eq!(target_keep_count(1.0, 16), 16);
        assert_eq!(target_keep_count(1e-12, 16), 1);
    }
}
