//! The central correctness properties of the sparse path: masked-dense and
//! gathered-sparse execution agree row-wise, pruned rows are preserved
//! bit-exactly, and the keep-all configuration reproduces the dense model.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune_core::gating::GateDesign;
use vitprune_core::numerics::{softmax_rows, Matrix};
use vitprune_core::pruning::{run_backbone_with_masks, PruneConfig};
use vitprune_core::vit::{
    vit_block_forward, BackboneParams, ExecMode, Image, ModelDims, ViTBlockParams,
};
use vitprune_core::LayerMask;

fn dims() -> ModelDims {
    ModelDims {
        layers: 4,
        heads: 2,
        width: 16,
        patch: 2,
        image_h: 8,
        image_w: 8,
        channels: 1,
        classes: 4,
    }
}

fn random_image(d: &ModelDims, rng: &mut impl Rng) -> Image {
    let mut img = Image::zeros(d.image_h, d.image_w, d.channels);
    for y in 0..d.image_h {
        for x in 0..d.image_w {
            for c in 0..d.channels {
                img.set(y, x, c, rng.gen_range(0.0..1.0));
            }
        }
    }
    img
}

fn random_mask(n: usize, rng: &mut impl Rng) -> LayerMask {
    let mut m = LayerMask::from_bits((0..n).map(|_| rng.gen_bool(0.5)).collect());
    if !m.any_kept() {
        m.set(rng.gen_range(0..n), true);
    }
    m
}

/// 100 random masks x 10 seeds at block level.
#[test]
fn masked_and_gathered_blocks_agree_100x10() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ViTBlockParams::init(16, &mut rng);
        let x = Matrix::randn(12, 16, 1.0, &mut rng);
        for _ in 0..100 {
            let keep = random_mask(12, &mut rng);
            let (masked, _) =
                vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Masked, false).unwrap();
            let (gathered, _) =
                vit_block_forward(&x, Some(&keep), &p, 2, ExecMode::Gathered, false).unwrap();
            for i in 0..12 {
                for j in 0..16 {
                    let d = (masked.at(i, j) - gathered.at(i, j)).abs();
                    assert!(d <= 1e-10, "seed {seed} row {i} col {j}: diff {d}");
                }
            }
        }
    }
}

/// The same property through the whole backbone with injected mask traces.
#[test]
fn backbone_modes_agree_on_injected_traces() {
    let d = dims();
    let cfg = PruneConfig {
        gated_layers: vec![2, 3, 4],
        keep_ratios: vec![0.7, 0.49, 0.343],
        ..PruneConfig::default_gated()
    };
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut params = BackboneParams::init_dense(d, &mut rng).unwrap();
        params.attach_gates(&cfg.gated_layers, GateDesign::Mlp2, &mut rng).unwrap();
        let image = random_image(&d, &mut rng);
        for _ in 0..10 {
            let masks: Vec<LayerMask> =
                (0..3).map(|_| random_mask(d.tokens(), &mut rng)).collect();
            let masked =
                run_backbone_with_masks(&image, &params, &cfg, &masks, ExecMode::Masked).unwrap();
            let gathered =
                run_backbone_with_masks(&image, &params, &cfg, &masks, ExecMode::Gathered)
                    .unwrap();
            for i in 0..d.tokens() {
                for j in 0..d.width {
                    let diff = (masked.tokens.at(i, j) - gathered.tokens.at(i, j)).abs();
                    assert!(diff <= 1e-10, "seed {seed} row {i}: diff {diff}");
                }
            }
        }
    }
}

/// Preservation: a token pruned at every gated layer >= l* keeps the exact
/// bits of its map entering l*. 100 random traces.
#[test]
fn preservation_is_bit_exact_over_random_traces() {
    let d = dims();
    let cfg = PruneConfig {
        gated_layers: vec![2, 3, 4],
        keep_ratios: vec![0.7, 0.49, 0.343],
        ..PruneConfig::default_gated()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    let mut params = BackboneParams::init_dense(d, &mut rng).unwrap();
    params.attach_gates(&cfg.gated_layers, GateDesign::Mlp2, &mut rng).unwrap();
    let n = d.tokens();

    for trial in 0..100 {
        let image = random_image(&d, &mut rng);
        let masks: Vec<LayerMask> = (0..3).map(|_| random_mask(n, &mut rng)).collect();

        // Replay the backbone layer by layer, snapshotting the map entering
        // each gated layer (gated layers are 2..=4, so snapshots[g] is the
        // input of gated layer g).
        let mut x = vitprune_core::vit::patch_embed(&image, &params).unwrap();
        let mut snapshots: Vec<Matrix> = Vec::new();
        for layer in 1..=d.layers {
            let keep = cfg
                .gated_layers
                .iter()
                .position(|&l| l == layer)
                .map(|gi| &masks[gi]);
            if keep.is_some() {
                snapshots.push(x.clone());
            }
            let (out, _) =
                vit_block_forward(&x, keep, &params.blocks[layer - 1], d.heads, ExecMode::Gathered, false)
                    .unwrap();
            x = out;
        }
        let out =
            run_backbone_with_masks(&image, &params, &cfg, &masks, ExecMode::Gathered).unwrap();
        assert_eq!(out.tokens, x, "replay must agree with the engine");

        for token in 0..n {
            for (g, snapshot) in snapshots.iter().enumerate() {
                let pruned_from_here = masks[g..].iter().all(|m| !m.kept(token));
                if pruned_from_here {
                    assert_eq!(
                        out.tokens.row(token),
                        snapshot.row(token),
                        "trial {trial}: token {token} pruned from gated layer {g} must be preserved"
                    );
                    break;
                }
            }
        }
    }
}

/// Keep-all through the gated machinery reproduces the dense backbone.
#[test]
fn keep_all_trace_equals_dense_run() {
    let d = dims();
    let cfg = PruneConfig {
        gated_layers: vec![2, 3, 4],
        keep_ratios: vec![1.0, 1.0, 1.0],
        ..PruneConfig::default_gated()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let mut params = BackboneParams::init_dense(d, &mut rng).unwrap();
    params.attach_gates(&cfg.gated_layers, GateDesign::Mlp2, &mut rng).unwrap();
    let image = random_image(&d, &mut rng);
    let all = vec![LayerMask::all_ones(d.tokens()); 3];
    let gated = run_backbone_with_masks(&image, &params, &cfg, &all, ExecMode::Masked).unwrap();
    let dense = run_backbone_with_masks(
        &image,
        &params,
        &PruneConfig::dense(),
        &[],
        ExecMode::Gathered,
    )
    .unwrap();
    for i in 0..d.tokens() {
        for j in 0..d.width {
            assert!((gated.tokens.at(i, j) - dense.tokens.at(i, j)).abs() <= 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Row-stochasticity of masked softmax whenever >= 1 key is unmasked.
    #[test]
    fn masked_softmax_rows_sum_to_one(
        seed in 0u64..1_000_000,
        rows in 1usize..6,
        cols in 2usize..8,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::randn(rows, cols, 3.0, &mut rng);
        let keep: Vec<bool> = {
            let mut k: Vec<bool> = (0..cols).map(|_| rng.gen_bool(0.5)).collect();
            if !k.iter().any(|&b| b) { k[rng.gen_range(0..cols)] = true; }
            k
        };
        let mask = Matrix::from_fn(rows, cols, |_, j| {
            if keep[j] { 0.0 } else { vitprune_core::numerics::MASKED_LOGIT }
        });
        let s = softmax_rows(&m, Some(&mask)).unwrap();
        for i in 0..rows {
            let sum: f64 = s.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for j in 0..cols {
                if !keep[j] {
                    prop_assert!(s.at(i, j) <= 1e-30);
                }
            }
        }
    }

    /// Pruned rows pass through any single block bit-identically.
    #[test]
    fn pruned_rows_bit_identical(seed in 0u64..1_000_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = ViTBlockParams::init(8, &mut rng);
        let x = Matrix::randn(6, 8, 1.0, &mut rng);
        let keep = {
            let mut k = LayerMask::from_bits((0..6).map(|_| rng.gen_bool(0.5)).collect());
            if !k.any_kept() { k.set(0, true); }
            k
        };
        for mode in [ExecMode::Masked, ExecMode::Gathered] {
            let (out, _) = vit_block_forward(&x, Some(&keep), &p, 2, mode, false).unwrap();
            for i in 0..6 {
                if !keep.kept(i) {
                    prop_assert_eq!(out.row(i), x.row(i));
                }
            }
        }
    }
}
