#![allow(dead_code)]

pub mod suites;

use dpmkit::backbone::Backbone;
use dpmkit::config::BackboneConfig;
use dpmkit::data::image::Image;
use dpmkit::params::{stream_rng, Bindings, ParamStore};
use dpmkit_autograd::{gradcheck, GradCheckConfig, GradCheckReport, Graph, Matrix, Var};
use rand::Rng;

pub fn toy_backbone(seed: u64) -> (Backbone, ParamStore) {
    let bb = Backbone::new(BackboneConfig::default(), Backbone::DEFAULT_PREFIX).unwrap();
    let mut store = ParamStore::new();
    bb.init_params(&mut store, &mut stream_rng(seed, "test/backbone"));
    (bb, store)
}

pub fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = stream_rng(seed, "test/image");
    Image {
        height: h,
        width: w,
        data: (0..h * w * 3).map(|_| rng.random()).collect(),
    }
}

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    dpmkit::params::normal_matrix(&mut stream_rng(seed, "test/matrix"), rows, cols, 1.0)
}

/// Picks `count` parameter names, spread over the store in order.
pub fn spread_names(store: &ParamStore, prefix: &str, count: usize) -> Vec<String> {
    let names: Vec<String> = store
        .iter()
        .map(|(k, _)| k.clone())
        .filter(|k| dpmkit::params::matches_prefix(k, prefix))
        .collect();
    let step = (names.len() as f64 / count as f64).max(1.0);
    (0..count.min(names.len()))
        .map(|i| names[(i as f64 * step) as usize].clone())
        .collect()
}

/// Finite-difference check of `loss` with respect to the named parameters.
pub fn param_gradcheck(
    store: &ParamStore,
    names: &[String],
    samples: usize,
    loss: impl Fn(&mut Graph, &Bindings) -> Var,
) -> GradCheckReport {
    let inputs: Vec<Matrix> = names
        .iter()
        .map(|n| store.get(n).unwrap().clone())
        .collect();
    gradcheck(
        &inputs,
        |g, vars| {
            let mut p = store.bind(g, |_| false);
            for (n, v) in names.iter().zip(vars) {
                p.set(n.clone(), *v);
            }
            loss(g, &p)
        },
        &GradCheckConfig {
            samples,
            ..Default::default()
        },
    )
}

/// In-memory training set of rendered identities, cameras cycling per image.
pub fn train_set(ids: usize, per: usize, seed: u64) -> dpmkit::trainer::TrainSet {
    let spec = dpmkit::data::synthetic::SyntheticSpec {
        seed,
        ..Default::default()
    };
    let mut rng = stream_rng(seed, "test/train-set");
    let samples = (0..ids * per)
        .map(|i| {
            let (id, cam) = (i / per, i % per % spec.num_cameras);
            let occluded = rng.random_bool(spec.train_occlusion_rate);
            let r = dpmkit::data::synthetic::render(
                &spec,
                id,
                cam,
                occluded,
                &format!("train/{id}/{i}"),
            );
            dpmkit::data::manifest::Sample {
                image: r.image,
                identity: id,
                camera: cam,
                occluded,
            }
        })
        .collect();
    dpmkit::trainer::TrainSet::new(samples).unwrap()
}

/// Toy schedule shortened for tests.
pub fn short_config(prompt: usize, sps: usize, dpm: usize) -> dpmkit::Config {
    let mut cfg = dpmkit::Config::toy();
    cfg.prompt.epochs = prompt;
    cfg.sps.epochs = sps;
    cfg.dpm.epochs = dpm;
    cfg
}
