mod common;

use common::{param_gradcheck, random_image, spread_names, toy_backbone};
use dpmkit::backbone::{count_patches, Backbone};
use dpmkit::config::BackboneConfig;
use dpmkit::data::image::Image;
use dpmkit::params::ParamStore;
use dpmkit::Error;
use dpmkit_autograd::Graph;
use ndarray::Array2;

fn forward_one(
    bb: &Backbone,
    store: &ParamStore,
    img: &Image,
    cam: usize,
) -> (
    dpmkit::backbone::TokenSequence,
    dpmkit::backbone::AttentionStack,
) {
    let t = bb.tokenize(store, img, cam).unwrap();
    bb.forward(store, &t).unwrap()
}

#[test]
fn count_patches_full_scale_config() {
    // floor((256-16)/11 + 1) = 22 rows, floor((128-16)/11 + 1) = 11 cols
    let rows = (256 - 16) / 11 + 1;
    let cols = (128 - 16) / 11 + 1;
    assert_eq!(
        count_patches(&BackboneConfig::full_scale()).unwrap(),
        rows * cols
    );
}

#[test]
fn tokenize_rejects_bad_inputs() {
    let (bb, store) = toy_backbone(0);
    assert!(matches!(
        bb.tokenize(&store, &Image::new(32, 32), 0),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        bb.tokenize(&store, &Image::new(64, 32), 4),
        Err(Error::Index(_))
    ));
}

#[test]
fn camera_term_vanishes_at_zero_coefficient() {
    let cfg = BackboneConfig {
        camera_coeff: 0.0,
        ..Default::default()
    };
    let bb = Backbone::new(cfg, "backbone").unwrap();
    let mut store = ParamStore::new();
    bb.init_params(&mut store, &mut dpmkit::params::stream_rng(1, "b"));
    let img = random_image(64, 32, 2);
    assert_eq!(
        bb.tokenize(&store, &img, 0).unwrap(),
        bb.tokenize(&store, &img, 3).unwrap()
    );
}

#[test]
fn camera_difference_equals_table_difference() {
    let (bb, store) = toy_backbone(3);
    let img = random_image(64, 32, 4);
    let diff = bb.tokenize(&store, &img, 0).unwrap() - bb.tokenize(&store, &img, 1).unwrap();
    let table = store.get("backbone.camera").unwrap();
    let expect = &table.row(0) - &table.row(1);
    for row in diff.rows() {
        for (a, b) in row.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn patch_change_is_local_in_layer0() {
    let (bb, store) = toy_backbone(5);
    let a = random_image(64, 32, 6);
    let mut b = a.clone();
    b.set(20, 13, [0.0, 1.0, 0.0]); // row 2, col 1 → patch 2*4+1
    let d = bb.tokenize(&store, &a, 0).unwrap() - bb.tokenize(&store, &b, 0).unwrap();
    for (r, row) in d.rows().into_iter().enumerate() {
        let changed = row.iter().any(|v| *v != 0.0);
        assert_eq!(changed, r == 1 + 9, "row {r}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (bb, store) = toy_backbone(7);
    let (seq, att) = forward_one(&bb, &store, &random_image(64, 32, 8), 2);
    assert_eq!(seq.tokens_per_layer.len(), 5);
    assert!(seq.tokens_per_layer.iter().all(|m| m.dim() == (33, 64)));
    assert_eq!(att.cls_attention.dim(), (4, 32));
    for row in att.cls_attention.rows() {
        assert!(row.iter().all(|&v| v >= 0.0));
        assert!((row.sum() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn zeroed_query_weights_give_uniform_attention() {
    let (bb, mut store) = toy_backbone(9);
    let last = "backbone.blocks.3.attn.qkv";
    for suffix in ["weight", "bias"] {
        let m = store.get_mut(&format!("{last}.{suffix}")).unwrap();
        m.slice_mut(ndarray::s![.., 0..64]).fill(0.0);
    }
    let (_, att) = forward_one(&bb, &store, &random_image(64, 32, 10), 0);
    assert!(att
        .cls_attention
        .iter()
        .all(|&v| (v - 1.0 / 32.0).abs() < 1e-12));
}

/// Recomputes last-block CLS attention from the block input with explicit loops.
#[test]
fn attention_matches_loop_oracle() {
    let (bb, store) = toy_backbone(11);
    let (seq, att) = forward_one(&bb, &store, &random_image(64, 32, 12), 1);
    let x = &seq.tokens_per_layer[3];
    let gamma = store.get("backbone.blocks.3.ln1.gamma").unwrap();
    let beta = store.get("backbone.blocks.3.ln1.beta").unwrap();
    let w = store.get("backbone.blocks.3.attn.qkv.weight").unwrap();
    let b = store.get("backbone.blocks.3.attn.qkv.bias").unwrap();
    let (t, c) = x.dim();
    let mut h = Array2::<f64>::zeros((t, c));
    for r in 0..t {
        let mean = x.row(r).sum() / c as f64;
        let var = x
            .row(r)
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / c as f64;
        for k in 0..c {
            h[[r, k]] = (x[[r, k]] - mean) / (var + 1e-6).sqrt() * gamma[[0, k]] + beta[[0, k]];
        }
    }
    let heads = 4;
    let dh = c / heads;
    for hd in 0..heads {
        let proj = |row: usize, off: usize| -> Vec<f64> {
            (0..dh)
                .map(|j| {
                    let col = off + hd * dh + j;
                    (0..c).map(|k| h[[row, k]] * w[[k, col]]).sum::<f64>() + b[[0, col]]
                })
                .collect()
        };
        let q = proj(0, 0);
        let logits: Vec<f64> = (1..t)
            .map(|r| {
                let k = proj(r, c);
                q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt()
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for d in 0..t - 1 {
            assert!((att.cls_attention[[hd, d]] - e[d] / z).abs() < 1e-6);
        }
    }
}

#[test]
fn projection_is_affine_in_cls_feature() {
    let (bb, store) = toy_backbone(13);
    let (seq, _) = forward_one(&bb, &store, &random_image(64, 32, 14), 0);
    let w = store.get("backbone.proj.weight").unwrap();
    let b = store.get("backbone.proj.bias").unwrap();
    for j in 0..w.ncols() {
        let v: f64 = seq
            .cls_feature
            .iter()
            .enumerate()
            .map(|(k, f)| f * w[[k, j]])
            .sum::<f64>()
            + b[[0, j]];
        assert!((v - seq.projected_cls[j]).abs() < 1e-9);
    }
}

#[test]
fn non_finite_tokens_rejected() {
    let (bb, store) = toy_backbone(15);
    let mut t = bb.tokenize(&store, &random_image(64, 32, 16), 0).unwrap();
    t[[3, 3]] = f64::NAN;
    assert!(matches!(bb.forward(&store, &t), Err(Error::Numeric(_))));
}

#[test]
fn patch_permutation_invariance_requires_zero_positions() {
    let (bb, mut store) = toy_backbone(17);
    let img = random_image(64, 32, 18);
    let base = bb
        .forward(&store, &bb.tokenize(&store, &img, 0).unwrap())
        .unwrap()
        .0
        .cls_feature;
    // Mirror the patch grid; without position terms the CLS output is unchanged.
    let mut shuffled = Image::new(64, 32);
    for r in 0..8 {
        for c in 0..4 {
            let (sr, sc) = (7 - r, 3 - c);
            for y in 0..8 {
                for x in 0..8 {
                    shuffled.set(r * 8 + y, c * 8 + x, img.get(sr * 8 + y, sc * 8 + x));
                }
            }
        }
    }
    let with_pos = bb
        .forward(&store, &bb.tokenize(&store, &shuffled, 0).unwrap())
        .unwrap()
        .0
        .cls_feature;
    assert!(base
        .iter()
        .zip(&with_pos)
        .any(|(a, b)| (a - b).abs() > 1e-9));

    store.get_mut("backbone.pos").unwrap().fill(0.0);
    store.get_mut("backbone.camera").unwrap().fill(0.0);
    let a = bb
        .forward(&store, &bb.tokenize(&store, &img, 0).unwrap())
        .unwrap()
        .0
        .cls_feature;
    let b = bb
        .forward(&store, &bb.tokenize(&store, &shuffled, 0).unwrap())
        .unwrap()
        .0
        .cls_feature;
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-9);
    }
}

#[test]
fn cls_feature_gradients_match_finite_differences() {
    let (bb, store) = toy_backbone(19);
    let img = random_image(64, 32, 20);
    let names = spread_names(&store, "backbone", 32);
    let weights = common::random_matrix(1, 64, 21);
    let report = param_gradcheck(&store, &names, 32, |g: &mut Graph, p| {
        let t = bb.tokens(g, p, &[(&img, 1)]).unwrap();
        let out = bb.encode(g, p, t, 1).unwrap();
        // A layer-normed row sums to a constant, so weight the outputs first.
        let w = g.constant(weights.clone());
        let sq = g.square(out.projected);
        let lin = g.mul(out.cls, w);
        let a = g.sum(sq);
        let b = g.sum(lin);
        g.add(a, b)
    });
    let mut worst = report.entries.clone();
    worst.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    assert!(
        report.passes(1e-5),
        "worst {:?} names {:?}",
        &worst[..3],
        names
    );
}

#[test]
fn batched_forward_matches_single() {
    let (bb, store) = toy_backbone(21);
    let imgs: Vec<Image> = (0..3).map(|i| random_image(64, 32, 30 + i)).collect();
    let tokens: Vec<_> = imgs
        .iter()
        .map(|im| bb.tokenize(&store, im, 0).unwrap())
        .collect();
    let batch = bb.forward_batch(&store, &tokens).unwrap();
    for (t, (seq, att)) in tokens.iter().zip(&batch) {
        let (s1, a1) = bb.forward(&store, t).unwrap();
        assert_eq!(&s1.projected_cls, &seq.projected_cls);
        assert_eq!(&a1.cls_attention, &att.cls_attention);
    }
}
