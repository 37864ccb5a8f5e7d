//! Training objectives.
//!
//! Graph-level functions (`*_graph`) build differentiable nodes on a
//! [`Graph`]; the plain-named functions evaluate the same expressions on
//! values and return scalars.

use dpmkit_autograd::{Graph, Matrix, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::LossConfig;
use crate::error::{Error, Result};

/// Per-sample labels for one batch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchLabels {
    pub identities: Vec<usize>,
    pub cameras: Vec<usize>,
    pub synthetic: Vec<bool>,
    /// Occluder-source identity of a synthesized sample.
    pub candidates: Vec<Option<usize>>,
}

impl BatchLabels {
    /// Labels for a batch without synthesized samples.
    pub fn clean(identities: Vec<usize>, cameras: Vec<usize>) -> Self {
        let n = identities.len();
        Self {
            identities,
            cameras,
            synthetic: vec![false; n],
            candidates: vec![None; n],
        }
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.identities.len();
        if self.cameras.len() != n || self.synthetic.len() != n || self.candidates.len() != n {
            return Err(Error::Shape("batch label vectors differ in length".into()));
        }
        for (i, (&s, c)) in self.synthetic.iter().zip(&self.candidates).enumerate() {
            if s != c.is_some() {
                return Err(Error::Validation(format!(
                    "sample {i}: synthetic flag and candidate identity disagree"
                )));
            }
        }
        Ok(())
    }

    /// Row-major `B × K` keep-mask dropping each synthetic sample's candidate class.
    fn class_keep(&self, k: usize) -> Option<Vec<bool>> {
        if self.candidates.iter().all(Option::is_none) {
            return None;
        }
        let mut keep = vec![true; self.len() * k];
        for (i, c) in self.candidates.iter().enumerate() {
            if let Some(c) = *c {
                if c < k {
                    keep[i * k + c] = false;
                }
            }
        }
        Some(keep)
    }

    /// Whether `j` may serve as a mining peer for anchor `i`.
    fn peer_allowed(&self, i: usize, j: usize) -> bool {
        if i == j {
            return false;
        }
        let clash = |a: usize, b: usize| self.candidates[a] == Some(self.identities[b]);
        !clash(i, j) && !clash(j, i)
    }
}

fn check_labels(labels: &BatchLabels, rows: usize, k: usize) -> Result<()> {
    labels.validate()?;
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} feature rows for {} labels",
            labels.len()
        )));
    }
    if let Some(&y) = labels.identities.iter().find(|&&y| y >= k) {
        return Err(Error::Index(format!(
            "identity label {y} >= number of prototypes {k}"
        )));
    }
    Ok(())
}

fn check_nonzero_rows(m: &Matrix, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("{what} row {i} is not finite")));
        }
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric(format!("{what} row {i} has zero norm")));
        }
    }
    Ok(())
}

/// Cosine similarities between feature rows and prototype rows, `B × K`.
pub fn cosine_logits_graph(g: &mut Graph, features: Var, prototypes: Var) -> Result<Var> {
    check_nonzero_rows(g.value(features), "feature")?;
    check_nonzero_rows(g.value(prototypes), "prototype")?;
    let f = g.l2_normalize_rows(features);
    let p = g.l2_normalize_rows(prototypes);
    Ok(g.matmul_t(f, p))
}

/// Mean negative log-likelihood of the target column, with candidate classes removed.
fn nll_graph(g: &mut Graph, logits: Var, labels: &BatchLabels) -> Var {
    let k = g.shape(logits).1;
    let ls = g.log_softmax_rows(logits, labels.class_keep(k));
    let picks: Vec<(usize, usize)> = labels
        .identities
        .iter()
        .enumerate()
        .map(|(i, &y)| (i, y))
        .collect();
    let picked = g.gather_elems(ls, &picks);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

/// Identity loss over the frozen coarse prototypes (no scale, no margin).
pub fn coarse_id_graph(
    g: &mut Graph,
    features: Var,
    coarse: Var,
    labels: &BatchLabels,
) -> Result<Var> {
    check_labels(labels, g.shape(features).0, g.shape(coarse).0)?;
    let logits = cosine_logits_graph(g, features, coarse)?;
    Ok(nll_graph(g, logits, labels))
}

/// Identity loss over the learnable prototypes; same form as the coarse loss.
pub fn proto_id_graph(
    g: &mut Graph,
    features: Var,
    learnable: Var,
    labels: &BatchLabels,
) -> Result<Var> {
    coarse_id_graph(g, features, learnable, labels)
}

/// Logits `s(cos θ_k − m_a·[k = y])` against per-sample masked prototypes.
/// `masks` is `B × c_out`, one channel mask per sample.
pub fn masked_logits_graph(
    g: &mut Graph,
    features: Var,
    learnable: Var,
    masks: Var,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<Var> {
    let (b, dim) = g.shape(features);
    let k = g.shape(learnable).0;
    check_labels(labels, b, k)?;
    if g.shape(masks) != (b, dim) || g.shape(learnable).1 != dim {
        return Err(Error::Shape(format!(
            "masked branch expects {b}×{dim} masks and K×{dim} prototypes, got {:?} and {:?}",
            g.shape(masks),
            g.shape(learnable)
        )));
    }
    check_nonzero_rows(g.value(features), "feature")?;
    let f = g.l2_normalize_rows(features);
    let mut rows = Vec::with_capacity(b);
    for i in 0..b {
        let m = g.slice_rows(masks, i, 1);
        let pm = g.mul_row(learnable, m);
        check_nonzero_rows(g.value(pm), "masked prototype")?;
        let pm = g.l2_normalize_rows(pm);
        let fi = g.slice_rows(f, i, 1);
        rows.push(g.matmul_t(fi, pm));
    }
    let cos = if b == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)
    };
    let mut margin = Array2::zeros((b, k));
    for (i, &y) in labels.identities.iter().enumerate() {
        margin[[i, y]] = cfg.margin;
    }
    let margin = g.constant(margin);
    let shifted = g.sub(cos, margin);
    Ok(g.scale(shifted, cfg.scale))
}

pub fn masked_id_graph(
    g: &mut Graph,
    features: Var,
    learnable: Var,
    masks: Var,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<Var> {
    let logits = masked_logits_graph(g, features, learnable, masks, labels, cfg)?;
    Ok(nll_graph(g, logits, labels))
}

/// Cross-entropy through a linear classifier `f·W + b`.
pub fn linear_id_graph(
    g: &mut Graph,
    features: Var,
    weight: Var,
    bias: Var,
    labels: &BatchLabels,
) -> Result<Var> {
    check_labels(labels, g.shape(features).0, g.shape(weight).1)?;
    let logits = g.matmul(features, weight);
    let logits = g.add_row(logits, bias);
    Ok(nll_graph(g, logits, labels))
}

/// Hardest valid positive and negative per anchor, chosen on values.
/// `None` for anchors lacking either.
pub fn mine_hard_pairs(features: &Matrix, labels: &BatchLabels) -> Vec<Option<(usize, usize)>> {
    let n = features.nrows();
    let dist = |i: usize, j: usize| {
        features
            .row(i)
            .iter()
            .zip(features.row(j).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    (0..n)
        .map(|i| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if !labels.peer_allowed(i, j) {
                    continue;
                }
                let d = dist(i, j);
                if labels.identities[j] == labels.identities[i] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            Some((pos?.0, neg?.0))
        })
        .collect()
}

/// Batch-hard triplet loss on squared Euclidean distance.
pub fn triplet_graph(
    g: &mut Graph,
    features: Var,
    labels: &BatchLabels,
    margin: f64,
) -> Result<Var> {
    labels.validate()?;
    if labels.len() != g.shape(features).0 {
        return Err(Error::Shape(format!(
            "{} feature rows for {} labels",
            g.shape(features).0,
            labels.len()
        )));
    }
    let pairs = mine_hard_pairs(g.value(features), labels);
    let (mut a, mut p, mut n) = (Vec::new(), Vec::new(), Vec::new());
    for (i, pair) in pairs.iter().enumerate() {
        if let Some((pi, ni)) = pair {
            a.push(i);
            p.push(*pi);
            n.push(*ni);
        }
    }
    if a.is_empty() {
        return Err(Error::DegenerateBatch(
            "no anchor has both a valid positive and a valid negative".into(),
        ));
    }
    let fa = g.gather_rows(features, &a);
    let fp = g.gather_rows(features, &p);
    let fn_ = g.gather_rows(features, &n);
    let dp = g.sub(fa, fp);
    let dp = g.square(dp);
    let dp = g.row_sum(dp);
    let dn = g.sub(fa, fn_);
    let dn = g.square(dn);
    let dn = g.row_sum(dn);
    let diff = g.sub(dp, dn);
    let diff = g.add_scalar(diff, margin);
    let hinge = g.relu(diff);
    Ok(g.mean(hinge))
}

/// `‖ȦȦᵀ − I‖²_F` for one `N_h × D` attention matrix.
pub fn hem_graph(g: &mut Graph, attention: Var) -> Result<Var> {
    check_nonzero_rows(g.value(attention), "attention")?;
    let heads = g.shape(attention).0;
    let a = g.l2_normalize_rows(attention);
    let gram = g.matmul_t(a, a);
    let eye = g.constant(Array2::eye(heads));
    let r = g.sub(gram, eye);
    let r = g.square(r);
    Ok(g.sum(r))
}

/// Mean of the per-sample HEM losses.
pub fn hem_batch_graph(g: &mut Graph, attention: &[Var]) -> Result<Var> {
    if attention.is_empty() {
        return Err(Error::Shape("no attention maps".into()));
    }
    let parts = attention
        .iter()
        .map(|&a| hem_graph(g, a))
        .collect::<Result<Vec<_>>>()?;
    let total = g.add_all(&parts);
    Ok(g.scale(total, 1.0 / parts.len() as f64))
}

/// `mean(soft) − ρ`, or its absolute value when `absolute` is set.
pub fn budget_graph(g: &mut Graph, soft: Var, rho: f64, absolute: bool) -> Var {
    let m = g.mean(soft);
    let d = g.add_scalar(m, -rho);
    if absolute {
        g.abs(d)
    } else {
        d
    }
}

pub fn stage2_graph(g: &mut Graph, id: Var, triplet: Var, budget: Var) -> Var {
    g.add_all(&[id, triplet, budget])
}

/// Stage-III total. `masked` may be absent when the mask branch is disabled.
pub fn stage3_graph(g: &mut Graph, parts: &Stage3Vars, cfg: &LossConfig) -> Var {
    warn_alpha(cfg.alpha);
    let mut terms = vec![parts.id_c, parts.tri];
    terms.push(g.scale(parts.id_p, cfg.alpha));
    if let Some(m) = parts.id_m {
        terms.push(g.scale(m, 1.0 - cfg.alpha));
    }
    if let Some(h) = parts.hem {
        terms.push(g.scale(h, cfg.beta));
    }
    g.add_all(&terms)
}

#[derive(Clone, Copy, Debug)]
pub struct Stage3Vars {
    pub id_c: Var,
    pub id_p: Var,
    pub id_m: Option<Var>,
    pub tri: Var,
    pub hem: Option<Var>,
}

fn warn_alpha(alpha: f64) {
    if alpha > 1.0 {
        log::warn!("alpha = {alpha} > 1 gives the masked identity loss a negative weight");
    }
}

fn scalar_graph(f: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.scalar_value(v))
}

pub fn coarse_id_loss(features: &Matrix, coarse: &Matrix, labels: &BatchLabels) -> Result<f64> {
    scalar_graph(|g| {
        let f = g.constant(features.clone());
        let p = g.constant(coarse.clone());
        coarse_id_graph(g, f, p, labels)
    })
}

pub fn proto_id_loss(features: &Matrix, learnable: &Matrix, labels: &BatchLabels) -> Result<f64> {
    coarse_id_loss(features, learnable, labels)
}

pub fn masked_id_loss(
    features: &Matrix,
    learnable: &Matrix,
    masks: &Matrix,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<f64> {
    scalar_graph(|g| {
        let f = g.constant(features.clone());
        let p = g.constant(learnable.clone());
        let m = g.constant(masks.clone());
        masked_id_graph(g, f, p, m, labels, cfg)
    })
}

pub fn triplet_loss(features: &Matrix, labels: &BatchLabels, margin: f64) -> Result<f64> {
    scalar_graph(|g| {
        let f = g.constant(features.clone());
        triplet_graph(g, f, labels, margin)
    })
}

pub fn hem_loss(attention: &Matrix) -> Result<f64> {
    scalar_graph(|g| {
        let a = g.constant(attention.clone());
        hem_graph(g, a)
    })
}

pub fn budget_loss(soft: &[f64], rho: f64) -> f64 {
    soft.iter().sum::<f64>() / soft.len() as f64 - rho
}

pub fn stage2_objective(id: f64, triplet: f64, budget: f64) -> f64 {
    id + triplet + budget
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Stage3Parts {
    pub id_c: f64,
    pub id_p: f64,
    pub id_m: f64,
    pub tri: f64,
    pub hem: f64,
}

pub fn stage3_objective(parts: &Stage3Parts, cfg: &LossConfig) -> f64 {
    warn_alpha(cfg.alpha);
    parts.id_c
        + parts.tri
        + cfg.alpha * parts.id_p
        + (1.0 - cfg.alpha) * parts.id_m
        + cfg.beta * parts.hem
}

/// One JSON-lines record of per-step loss components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    #[serde(rename = "L_id_c")]
    pub id_c: Option<f64>,
    /// Standard identity loss; in the saliency stage this is the fresh classifier's loss.
    #[serde(rename = "L_id_p")]
    pub id_p: Option<f64>,
    #[serde(rename = "L_id_m")]
    pub id_m: Option<f64>,
    #[serde(rename = "L_tri")]
    pub tri: Option<f64>,
    #[serde(rename = "L_hem")]
    pub hem: Option<f64>,
    #[serde(rename = "L_budget")]
    pub budget: Option<f64>,
    pub total: f64,
}
