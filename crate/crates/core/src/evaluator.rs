//! Retrieval evaluation (CMC, mAP) and attention-head correlation.

use std::path::Path;

use dpmkit_autograd::{Graph, Matrix};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::{Config, DistanceMetric, EvalConfig};
use crate::data::image::Image;
use crate::data::manifest::Sample;
use crate::error::{Error, Result};
use crate::hmg::{mask_for_tokens, MaskGenerator};
use crate::params::ParamStore;

/// Features plus labels for one split.
#[derive(Clone, Debug)]
pub struct Embedded {
    pub features: Matrix,
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
}

/// Projected CLS features, `batch_size` images per forward pass.
pub fn embed(
    backbone: &Backbone,
    store: &ParamStore,
    images: &[(&Image, usize)],
    batch_size: usize,
) -> Result<Matrix> {
    let bs = batch_size.max(1);
    let mut out = Array2::zeros((images.len(), backbone.config().projected_dim));
    for (n, chunk) in images.chunks(bs).enumerate() {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let tokens = backbone.tokens(&mut g, &p, chunk)?;
        let enc = backbone.encode(&mut g, &p, tokens, chunk.len())?;
        out.slice_mut(ndarray::s![n * bs..n * bs + chunk.len(), ..])
            .assign(g.value(enc.projected));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub map: f64,
    /// Match rate at ranks `1..=cmc.len()`.
    pub cmc: Vec<f64>,
    pub ranks: Vec<usize>,
    pub per_query_ap: Vec<f64>,
    pub num_queries: usize,
    pub num_gallery: usize,
    /// Queries with no valid gallery match, left out of every average.
    pub excluded_queries: usize,
}

impl RetrievalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    pub fn cmc_csv(&self) -> String {
        let mut s = String::from("rank,rate\n");
        for (r, v) in self.ranks.iter().zip(&self.cmc) {
            s.push_str(&format!("{r},{v}\n"));
        }
        s
    }
}

pub fn distance(
    a: ndarray::ArrayView1<f64>,
    b: ndarray::ArrayView1<f64>,
    metric: DistanceMetric,
) -> f64 {
    match metric {
        DistanceMetric::Euclidean => a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistanceMetric::Cosine => {
            let na = a.dot(&a).sqrt();
            let nb = b.dot(&b).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - a.dot(&b) / (na * nb)
            }
        }
    }
}

/// Relevance flags of the valid gallery entries in ranked order, or `None`
/// when nothing is relevant.
fn ranked_relevance(dist: &[f64], query: (usize, usize), gallery: &Embedded) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    let rel: Vec<bool> = order
        .into_iter()
        .filter(|&j| !(gallery.identities[j] == query.0 && gallery.cameras[j] == query.1))
        .map(|j| gallery.identities[j] == query.0)
        .collect();
    rel.iter().any(|&r| r).then_some(rel)
}

/// Precision averaged over hit positions.
pub fn average_precision(relevance: &[bool]) -> f64 {
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Builds a report from per-query ranked relevance lists (`None` = excluded).
pub fn report_from_relevance(
    lists: &[Option<Vec<bool>>],
    max_rank: usize,
    num_gallery: usize,
) -> RetrievalReport {
    let mut cmc = vec![0.0; max_rank];
    let mut aps = Vec::new();
    for rel in lists.iter().flatten() {
        if let Some(first) = rel.iter().position(|&r| r) {
            for c in cmc.iter_mut().skip(first) {
                *c += 1.0;
            }
        }
        aps.push(average_precision(rel));
    }
    let valid = aps.len();
    if valid > 0 {
        for c in &mut cmc {
            *c /= valid as f64;
        }
    }
    RetrievalReport {
        map: if valid > 0 {
            aps.iter().sum::<f64>() / valid as f64
        } else {
            0.0
        },
        cmc,
        ranks: (1..=max_rank).collect(),
        per_query_ap: aps,
        num_queries: lists.len(),
        num_gallery,
        excluded_queries: lists.len() - valid,
    }
}

/// Standard protocol: gallery entries sharing identity and camera with the
/// query are ignored; ties rank by gallery index.
pub fn evaluate(query: &Embedded, gallery: &Embedded, cfg: &EvalConfig) -> Result<RetrievalReport> {
    evaluate_with(query, gallery, cfg, |qi, gj| {
        distance(query.features.row(qi), gallery.features.row(gj), cfg.metric)
    })
}

/// Like [`evaluate`] with a caller-supplied distance `(query index, gallery index)`.
pub fn evaluate_with(
    query: &Embedded,
    gallery: &Embedded,
    cfg: &EvalConfig,
    dist: impl Fn(usize, usize) -> f64,
) -> Result<RetrievalReport> {
    if gallery.features.nrows() == 0 {
        return Err(Error::Validation("gallery is empty".into()));
    }
    if query.features.ncols() != gallery.features.ncols() {
        return Err(Error::Shape(format!(
            "query features have {} dims, gallery {}",
            query.features.ncols(),
            gallery.features.ncols()
        )));
    }
    if cfg.max_rank == 0 {
        return Err(Error::Config("eval.max_rank must be >= 1".into()));
    }
    let lists: Vec<Option<Vec<bool>>> = (0..query.features.nrows())
        .map(|qi| {
            let d: Vec<f64> = (0..gallery.features.nrows())
                .map(|gj| dist(qi, gj))
                .collect();
            ranked_relevance(&d, (query.identities[qi], query.cameras[qi]), gallery)
        })
        .collect();
    let report = report_from_relevance(&lists, cfg.max_rank, gallery.features.nrows());
    if report.excluded_queries > 0 {
        log::warn!(
            "{} queries had no valid gallery match and were excluded",
            report.excluded_queries
        );
    }
    Ok(report)
}

pub fn embed_samples(
    backbone: &Backbone,
    store: &ParamStore,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Embedded> {
    let images: Vec<(&Image, usize)> = samples.iter().map(|s| (&s.image, s.camera)).collect();
    Ok(Embedded {
        features: embed(backbone, store, &images, batch_size)?,
        identities: samples.iter().map(|s| s.identity).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
    })
}

/// Embeds both splits with the trained encoder and evaluates. With
/// `eval.masked_distance`, each query's generated prototype mask scales
/// both sides of its distances.
pub fn evaluate_model(
    cfg: &Config,
    store: &ParamStore,
    query: &[Sample],
    gallery: &[Sample],
) -> Result<RetrievalReport> {
    let backbone = Backbone::new(cfg.backbone.clone(), Backbone::DEFAULT_PREFIX)?;
    let q = embed_samples(&backbone, store, query, cfg.eval.batch_size)?;
    let g = embed_samples(&backbone, store, gallery, cfg.eval.batch_size)?;
    if !cfg.eval.masked_distance {
        return evaluate(&q, &g, &cfg.eval);
    }
    if !store.has_prefix(crate::hmg::PREFIX) {
        return Err(Error::Config(
            "eval.masked_distance needs a checkpoint with mask generator parameters".into(),
        ));
    }
    let gen = MaskGenerator::new(&cfg.hmg, &cfg.backbone)?;
    let mut masks = Array2::zeros(q.features.dim());
    for (i, s) in query.iter().enumerate() {
        let tokens = backbone.tokenize(store, &s.image, s.camera)?;
        let m = mask_for_tokens(&backbone, &gen, store, &tokens)?;
        masks
            .row_mut(i)
            .assign(&ndarray::ArrayView1::from(&m.values));
    }
    evaluate_with(&q, &g, &cfg.eval, |qi, gj| {
        let m = masks.row(qi);
        let a = &q.features.row(qi) * &m;
        let b = &g.features.row(gj) * &m;
        distance(a.view(), b.view(), cfg.eval.metric)
    })
}

/// Mean over probe images of the cosine similarity between last-block
/// CLS-attention rows of every head pair.
pub fn head_correlation(
    backbone: &Backbone,
    store: &ParamStore,
    probes: &[(&Image, usize)],
    batch_size: usize,
) -> Result<Matrix> {
    if probes.is_empty() {
        return Err(Error::Validation("probe set is empty".into()));
    }
    let heads = backbone.config().num_heads;
    let mut acc = Array2::zeros((heads, heads));
    for chunk in probes.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let tokens = backbone.tokens(&mut g, &p, chunk)?;
        let enc = backbone.encode(&mut g, &p, tokens, chunk.len())?;
        for &a in &enc.attention {
            acc += &cosine_gram(g.value(a));
        }
    }
    Ok(acc / probes.len() as f64)
}

/// Pairwise row cosine similarities.
pub fn cosine_gram(rows: &Matrix) -> Matrix {
    let norms: Vec<f64> = rows.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let n = rows.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        rows.row(i).dot(&rows.row(j)) / (norms[i] * norms[j])
    })
}

/// Mean absolute off-diagonal entry.
pub fn mean_off_diagonal(m: &Matrix) -> f64 {
    let n = m.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m[[i, j]].abs();
            }
        }
    }
    s / (n * (n - 1)) as f64
}

pub fn matrix_csv(m: &Matrix) -> String {
    let mut s = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes `report.json`-style JSON at `path` and the CMC curve next to it as `<stem>_cmc.csv`.
pub fn write_report(report: &RetrievalReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let csv = sibling(path, "cmc.csv");
    std::fs::write(&csv, report.cmc_csv()).map_err(|e| Error::io(&csv, e))
}

/// `<dir>/<stem>_<suffix>` for a file path.
pub fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("report");
    path.with_file_name(format!("{stem}_{suffix}"))
}
