mod common;

use common::suites;
use dpmkit::config::LossConfig;
use dpmkit::losses::{self, BatchLabels, Stage3Parts};
use dpmkit_autograd::{Graph, Matrix};
use ndarray::{array, Array2};
use proptest::prelude::*;

fn clean(ids: &[usize]) -> BatchLabels {
    BatchLabels::clean(ids.to_vec(), vec![0; ids.len()])
}

#[test]
fn every_loss_matches_finite_differences() {
    let start = std::time::Instant::now();
    for (name, report) in suites::gradient_suite() {
        assert_eq!(report.entries.len(), suites::GRAD_SAMPLES);
        assert!(
            report.passes(suites::GRAD_TOL),
            "{name}: max rel error {:e}",
            report.max_rel_error()
        );
    }
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn aligned_feature_gives_closed_form_coarse_loss() {
    // cos = 1 to its own row, 0 to the others: −log(e / (e + 2)).
    let f = array![[1.0, 0.0, 0.0]];
    let p = array![[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 3.0]];
    let want = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
    let l = losses::coarse_id_loss(&f, &p, &clean(&[0])).unwrap();
    assert!((l - want).abs() < 1e-12);
    assert!((want - 0.5514).abs() < 1e-4);
    assert_eq!(losses::proto_id_loss(&f, &p, &clean(&[0])).unwrap(), l);
}

#[test]
fn masked_loss_closed_form_and_margin_monotonicity() {
    let f = array![[1.0, 0.0]];
    let p = array![[1.0, 0.0], [0.0, 1.0]];
    let m = array![[0.5, 0.5]];
    let cfg = LossConfig {
        margin: 0.0,
        scale: 1.0,
        ..Default::default()
    };
    let l = losses::masked_id_loss(&f, &p, &m, &clean(&[0]), &cfg).unwrap();
    let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((l - want).abs() < 1e-12);
    assert!((want - 0.3133).abs() < 1e-4);

    let uniform = losses::masked_id_loss(
        &array![[1.0, 1.0]],
        &array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]],
        &array![[0.3, 0.3]],
        &clean(&[1]),
        &cfg,
    )
    .unwrap();
    assert!((uniform - 3f64.ln()).abs() < 1e-12);

    let mut last = f64::NEG_INFINITY;
    for step in 0..8 {
        let cfg = LossConfig {
            margin: step as f64 * 0.1,
            ..Default::default()
        };
        let l = losses::masked_id_loss(&array![[0.6, 0.8]], &p, &m, &clean(&[1]), &cfg).unwrap();
        assert!(l > last);
        last = l;
    }
}

#[test]
fn all_ones_mask_reduces_to_margin_cosine_softmax() {
    suites::all_ones_mask_identity(0).unwrap();
    suites::all_ones_mask_identity(1).unwrap();
}

/// Hardest positive and negative by exhaustive pair enumeration.
fn triplet_oracle(f: &Matrix, ids: &[usize], margin: f64) -> f64 {
    let n = f.nrows();
    let d = |i: usize, j: usize| {
        (0..f.ncols())
            .map(|k| (f[[i, k]] - f[[j, k]]).powi(2))
            .sum::<f64>()
    };
    let mut total = 0.0;
    for a in 0..n {
        let pos = (0..n)
            .filter(|&j| j != a && ids[j] == ids[a])
            .map(|j| d(a, j))
            .fold(f64::MIN, f64::max);
        let neg = (0..n)
            .filter(|&j| ids[j] != ids[a])
            .map(|j| d(a, j))
            .fold(f64::MAX, f64::min);
        total += (pos - neg + margin).max(0.0);
    }
    total / n as f64
}

#[test]
fn triplet_matches_brute_force_mining() {
    for seed in 0..20 {
        let f = common::random_matrix(4, 3, seed);
        let ids = [0, 0, 1, 1];
        let l = losses::triplet_loss(&f, &clean(&ids), 0.3).unwrap();
        assert!((l - triplet_oracle(&f, &ids, 0.3)).abs() < 1e-12);
    }
}

#[test]
fn triplet_edge_cases() {
    // Simplex vertices: every pair is equally far apart.
    let f: Matrix = Array2::eye(4);
    let l = losses::triplet_loss(&f, &clean(&[0, 0, 1, 1]), 0.3).unwrap();
    assert!((l - 0.3).abs() < 1e-15);
    let f = array![[0.0], [0.0], [10.0], [10.0]];
    assert_eq!(
        losses::triplet_loss(&f, &clean(&[0, 0, 1, 1]), 0.3).unwrap(),
        0.0
    );
}

#[test]
fn hem_matches_gram_oracle() {
    for seed in 0..10 {
        let a = common::random_matrix(4, 12, seed).mapv(f64::abs);
        let norms: Vec<f64> = a.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut want = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut dot = 0.0;
                for d in 0..12 {
                    dot += a[[i, d]] / norms[i] * a[[j, d]] / norms[j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                want += (dot - target) * (dot - target);
            }
        }
        assert!((losses::hem_loss(&a).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn hem_vanishes_exactly_on_orthogonal_rows() {
    let orth = array![
        [0.7, 0.0, 0.0, 0.0],
        [0.0, 0.2, 0.1, 0.0],
        [0.0, 0.0, 0.0, 3.0]
    ];
    assert!(losses::hem_loss(&orth).unwrap() < 1e-20);
    let overlapping = array![
        [0.7, 0.0, 0.0, 0.0],
        [0.0, 0.2, 0.1, 0.0],
        [0.0, 0.0, 0.01, 3.0]
    ];
    assert!(losses::hem_loss(&overlapping).unwrap() > 0.0);
}

#[test]
fn budget_is_signed_and_absolute_variant_is_not() {
    assert!((losses::budget_loss(&[0.0; 4], 0.3) + 0.3).abs() < 1e-15);
    assert!(losses::budget_loss(&[0.3; 10], 0.3).abs() < 1e-15);
    let mut g = Graph::new();
    let s = g.constant(Array2::zeros((4, 1)));
    let v = losses::budget_graph(&mut g, s, 0.3, true);
    assert!((g.scalar_value(v) - 0.3).abs() < 1e-15);
}

#[test]
fn aggregates_match_hand_evaluation() {
    assert_eq!(losses::stage2_objective(0.0, 0.0, 0.0), 0.0);
    assert_eq!(losses::stage2_objective(1.25, 0.5, -0.125), 1.625);
    let p = Stage3Parts {
        id_c: 0.8,
        id_p: 1.9,
        id_m: 2.7,
        tri: 0.35,
        hem: 4.0,
    };
    let cfg = LossConfig {
        alpha: 1.0,
        beta: 0.10,
        ..Default::default()
    };
    assert!((losses::stage3_objective(&p, &cfg) - (0.8 + 0.35 + 1.9 + 0.4)).abs() < 1e-12);
    let cfg = LossConfig {
        alpha: 0.0,
        beta: 0.0,
        ..Default::default()
    };
    assert!((losses::stage3_objective(&p, &cfg) - (0.8 + 0.35 + 2.7)).abs() < 1e-12);
    let cfg = LossConfig {
        alpha: 1.5,
        beta: 0.0,
        ..Default::default()
    };
    assert!(
        (losses::stage3_objective(&p, &cfg) - (0.8 + 0.35 + 1.5 * 1.9 - 0.5 * 2.7)).abs() < 1e-12
    );
}

#[test]
fn candidate_prototype_rows_get_no_gradient_from_synthetic_sample() {
    let f = common::random_matrix(1, 5, 3);
    let p = common::random_matrix(4, 5, 4);
    let m = Array2::from_elem((1, 5), 0.6);
    let cfg = LossConfig::default();
    for synthetic in [true, false] {
        for branch in 0..3 {
            let mut labels = clean(&[0]);
            if synthetic {
                labels.synthetic[0] = true;
                labels.candidates[0] = Some(2);
            }
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let pv = g.param(p.clone());
            let mv = g.constant(m.clone());
            let loss = match branch {
                0 => losses::coarse_id_graph(&mut g, fv, pv, &labels).unwrap(),
                1 => losses::proto_id_graph(&mut g, fv, pv, &labels).unwrap(),
                _ => losses::masked_id_graph(&mut g, fv, pv, mv, &labels, &cfg).unwrap(),
            };
            let grads = g.backward(loss);
            let row = grads.get(pv).unwrap().row(2).to_owned();
            // A clean sample does push its non-target rows; the candidate row is cut only when synthetic.
            assert_eq!(row.iter().all(|&v| v == 0.0), synthetic, "branch {branch}");
        }
    }
}

#[test]
fn synthetic_sample_is_never_mined_against_its_candidate() {
    let f = array![[0.0], [5.0], [0.1], [0.2], [9.0], [9.5]];
    let mut labels = BatchLabels::clean(vec![0, 0, 1, 1, 2, 2], vec![0; 6]);
    labels.synthetic[0] = true;
    labels.candidates[0] = Some(1);
    let pairs = losses::mine_hard_pairs(&f, &labels);
    // Without ignoring, samples 2 and 3 (identity 1) would be anchor 0's negatives.
    assert_eq!(pairs[0], Some((1, 4)));
    for (i, pair) in pairs.iter().enumerate().skip(2).take(2) {
        let (p, n) = pair.unwrap();
        assert_ne!(p, 0, "anchor {i}");
        assert_ne!(n, 0, "anchor {i}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn triplet_is_translation_invariant(
        vals in prop::collection::vec(-3.0f64..3.0, 12),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let f = Array2::from_shape_vec((4, 3), vals).unwrap();
        let moved = &f + &ndarray::Array1::from(shift);
        let labels = clean(&[0, 0, 1, 1]);
        let a = losses::triplet_loss(&f, &labels, 0.3).unwrap();
        let b = losses::triplet_loss(&moved, &labels, 0.3).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn identity_losses_are_non_negative(
        vals in prop::collection::vec(-2.0f64..2.0, 18),
        mask in prop::collection::vec(0.05f64..0.95, 9),
        y in 0usize..3,
    ) {
        let f = Array2::from_shape_vec((1, 3), vals[..3].to_vec()).unwrap();
        let p = Array2::from_shape_vec((3, 3), vals[3..12].to_vec()).unwrap();
        prop_assume!(f.iter().any(|v| v.abs() > 1e-3) && p.rows().into_iter().all(|r| r.iter().any(|v| v.abs() > 1e-3)));
        let m = Array2::from_shape_vec((1, 3), mask[..3].to_vec()).unwrap();
        let labels = clean(&[y]);
        prop_assert!(losses::coarse_id_loss(&f, &p, &labels).unwrap() >= 0.0);
        prop_assert!(losses::masked_id_loss(&f, &p, &m, &labels, &LossConfig::default()).unwrap() >= 0.0);
        let att = Array2::from_shape_vec((3, 3), mask.clone()).unwrap();
        prop_assert!(losses::hem_loss(&att).unwrap() >= 0.0);
    }
}
