mod common;

use common::suites;
use dpmkit::config::{DistanceMetric, EvalConfig};
use dpmkit::evaluator::{self, Embedded};
use dpmkit::params::stream_rng;
use dpmkit::Error;
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn emb(features: Array2<f64>, ids: &[usize], cams: &[usize]) -> Embedded {
    Embedded {
        features,
        identities: ids.to_vec(),
        cameras: cams.to_vec(),
    }
}

#[test]
fn retrieval_matches_selection_sort_oracle() {
    suites::retrieval_oracle(200, 0).unwrap();
}

#[test]
fn average_precision_examples() {
    assert_eq!(evaluator::average_precision(&[false, true]), 0.5);
    let ap = evaluator::average_precision(&[true, false, true]);
    assert!((ap - 0.8333).abs() < 1e-4);
    assert_eq!(evaluator::average_precision(&[true]), 1.0);
    assert_eq!(evaluator::average_precision(&[false, false]), 0.0);
}

#[test]
fn same_camera_matches_are_ignored_and_ties_go_to_lower_index() {
    // Gallery 0 is a same-camera copy of the query and must not count.
    let q = emb(array![[0.0, 0.0]], &[7], &[0]);
    let g = emb(
        array![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
        &[7, 3, 7, 7],
        &[0, 1, 1, 2],
    );
    let cfg = EvalConfig {
        max_rank: 3,
        ..Default::default()
    };
    let r = evaluator::evaluate(&q, &g, &cfg).unwrap();
    // Ranked valid list: g1 (miss, tie broken by index), g2 (hit), g3 (hit).
    assert!((r.map - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    assert_eq!(r.cmc, vec![0.0, 1.0, 1.0]);
    assert_eq!(r.ranks, vec![1, 2, 3]);
}

#[test]
fn queries_without_valid_match_are_excluded() {
    let q = emb(array![[0.0], [1.0]], &[1, 2], &[0, 0]);
    let g = emb(array![[0.0], [1.0]], &[1, 2], &[1, 0]);
    let r = evaluator::evaluate(
        &q,
        &g,
        &EvalConfig {
            max_rank: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        (r.num_queries, r.excluded_queries, r.per_query_ap.len()),
        (2, 1, 1)
    );
    assert_eq!(r.map, 1.0);
    assert_eq!(r.rank1(), 1.0);
}

#[test]
fn invalid_inputs_are_rejected() {
    let q = emb(array![[0.0, 1.0]], &[1], &[0]);
    let empty = emb(Array2::zeros((0, 2)), &[], &[]);
    assert!(matches!(
        evaluator::evaluate(&q, &empty, &EvalConfig::default()),
        Err(Error::Validation(_))
    ));
    let narrow = emb(array![[0.0]], &[1], &[1]);
    assert!(matches!(
        evaluator::evaluate(&q, &narrow, &EvalConfig::default()),
        Err(Error::Shape(_))
    ));
    let g = emb(array![[0.0, 1.0]], &[1], &[1]);
    assert!(evaluator::evaluate(
        &q,
        &g,
        &EvalConfig {
            max_rank: 0,
            ..Default::default()
        }
    )
    .is_err());
}

#[test]
fn cosine_metric_ignores_scale() {
    let q = emb(array![[1.0, 0.0]], &[1], &[0]);
    let g = emb(array![[5.0, 0.2], [0.9, 0.9]], &[2, 1], &[1, 1]);
    let cfg = EvalConfig {
        metric: DistanceMetric::Cosine,
        max_rank: 2,
        ..Default::default()
    };
    assert_eq!(evaluator::evaluate(&q, &g, &cfg).unwrap().map, 0.5);
    let scaled = emb(array![[0.05, 0.0]], &[1], &[0]);
    assert_eq!(
        evaluator::evaluate(&scaled, &g, &cfg).unwrap(),
        evaluator::evaluate(&q, &g, &cfg).unwrap()
    );
}

#[test]
fn head_correlation_matches_double_loop() {
    let (bb, store) = common::toy_backbone(3);
    let images: Vec<_> = (0..3)
        .map(|i| common::random_image(64, 32, 40 + i))
        .collect();
    let probes: Vec<_> = images.iter().map(|im| (im, 1)).collect();
    let corr = evaluator::head_correlation(&bb, &store, &probes, 2).unwrap();
    let heads = 4;
    let mut want = Array2::<f64>::zeros((heads, heads));
    for im in &images {
        let (_, att) = bb
            .forward(&store, &bb.tokenize(&store, im, 1).unwrap())
            .unwrap();
        let a = &att.cls_attention;
        for i in 0..heads {
            for j in 0..heads {
                let (x, y) = (a.row(i), a.row(j));
                want[[i, j]] += x.dot(&y) / (x.dot(&x).sqrt() * y.dot(&y).sqrt()) / 3.0;
            }
        }
    }
    for i in 0..heads {
        assert!((corr[[i, i]] - 1.0).abs() < 1e-12);
        for j in 0..heads {
            assert!((corr[[i, j]] - want[[i, j]]).abs() < 1e-12);
            assert_eq!(corr[[i, j]], corr[[j, i]]);
        }
    }
    assert!(matches!(
        evaluator::head_correlation(&bb, &store, &[], 2),
        Err(Error::Validation(_))
    ));
}

#[test]
fn mean_off_diagonal_examples() {
    assert_eq!(
        evaluator::mean_off_diagonal(&array![[1.0, -0.5], [0.25, 1.0]]),
        0.375
    );
    assert_eq!(evaluator::mean_off_diagonal(&array![[1.0]]), 0.0);
    assert_eq!(evaluator::mean_off_diagonal(&Array2::eye(4)), 0.0);
}

#[test]
fn batched_embedding_matches_single_image_passes() {
    let (bb, store) = common::toy_backbone(5);
    let images: Vec<_> = (0..5)
        .map(|i| common::random_image(64, 32, 50 + i))
        .collect();
    let pairs: Vec<_> = images
        .iter()
        .enumerate()
        .map(|(i, im)| (im, i % 3))
        .collect();
    let batched = evaluator::embed(&bb, &store, &pairs, 2).unwrap();
    for (i, p) in pairs.iter().enumerate() {
        let single = evaluator::embed(&bb, &store, std::slice::from_ref(p), 1).unwrap();
        for k in 0..batched.ncols() {
            assert!((batched[[i, k]] - single[[0, k]]).abs() < 1e-10);
        }
    }
}

#[test]
fn report_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let r = evaluator::report_from_relevance(&[Some(vec![false, true]), None], 2, 2);
    let path = dir.path().join("sub/report.json");
    evaluator::write_report(&r, &path).unwrap();
    let back: evaluator::RetrievalReport =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("sub/report_cmc.csv")).unwrap(),
        "rank,rate\n1,0\n2,1\n"
    );
    assert_eq!(
        evaluator::matrix_csv(&array![[1.0, 0.5], [0.5, 1.0]]),
        "1,0.5\n0.5,1\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_translation_invariant(seed in 0u64..1000, shift in prop::collection::vec(-8i32..8, 3)) {
        let mut rng = stream_rng(seed, "test/instance");
        let (q, g) = suites::random_instance(&mut rng);
        // Integer shifts keep the lattice distances exact, so ties survive.
        let s: Array1<f64> = shift[..q.features.ncols()].iter().map(|&v| v as f64).collect();
        let moved = |e: &Embedded| Embedded { features: &e.features + &s, ..e.clone() };
        let cfg = EvalConfig { max_rank: 5, ..Default::default() };
        let a = evaluator::evaluate(&q, &g, &cfg).unwrap();
        let b = evaluator::evaluate(&moved(&q), &moved(&g), &cfg).unwrap();
        prop_assert_eq!(a.per_query_ap.len(), b.per_query_ap.len());
        prop_assert!((a.map - b.map).abs() < 1e-9);
        prop_assert_eq!(a.cmc, b.cmc);
    }

    #[test]
    fn cmc_is_monotone_and_bounded(seed in 0u64..1000) {
        let mut rng = stream_rng(seed, "test/instance");
        let (q, g) = suites::random_instance(&mut rng);
        let r = evaluator::evaluate(&q, &g, &EvalConfig { max_rank: 8, ..Default::default() }).unwrap();
        prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(r.cmc.iter().all(|&c| (0.0..=1.0).contains(&c)));
        prop_assert!((0.0..=1.0).contains(&r.map));
        prop_assert!(r.per_query_ap.iter().all(|&ap| ap > 0.0 && ap <= 1.0));
    }
}
