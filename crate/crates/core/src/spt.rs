//! Saliency-guided patch transfer.
//!
//! A decision layer scores every patch from the concatenated per-layer patch
//! tokens. The binarized score splits a sample into an identity set (salient)
//! and an occlusion set; pairs of samples whose masks overlap well (OIoU, with
//! horizontal rolling) are recombined in token space so that the candidate's
//! background covers the target wherever the candidate is not salient.

use std::cmp::Ordering;

use dpmkit_autograd::{Graph, Matrix, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneOutput, TokenSequence};
use crate::config::{BackboneConfig, SptConfig};
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bindings, ParamStore};

pub const DECISION_WEIGHT: &str = "sps.decision.weight";
pub const DECISION_BIAS: &str = "sps.decision.bias";
/// Prefix of the frozen encoder snapshot the decision layer reads from.
pub const SPS_BACKBONE_PREFIX: &str = "sps.backbone";

/// Per-patch saliency.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub soft: Vec<f64>,
    pub binary: Vec<bool>,
    /// `(rows, cols)` of the patch grid, `rows·cols == soft.len()`.
    pub grid: (usize, usize),
}

impl SaliencyMask {
    pub fn from_soft(soft: Vec<f64>, grid: (usize, usize), threshold: f64) -> Result<Self> {
        if grid.0 * grid.1 != soft.len() {
            return Err(Error::Shape(format!(
                "grid {:?} does not hold {} patches",
                grid,
                soft.len()
            )));
        }
        let binary = soft.iter().map(|&s| s >= threshold).collect();
        Ok(Self { soft, binary, grid })
    }

    /// A hard mask; soft values are the 0/1 limits.
    pub fn from_binary(binary: Vec<bool>, grid: (usize, usize)) -> Result<Self> {
        let soft = binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self::from_soft(soft, grid, 0.5)
    }

    pub fn len(&self) -> usize {
        self.soft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.soft.is_empty()
    }

    pub fn area(&self) -> usize {
        self.binary.iter().filter(|&&b| b).count()
    }
}

const DECISION_LN_EPS: f64 = 1e-6;

pub fn init_decision_params(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut ChaCha8Rng) {
    let width = (cfg.num_layers + 1) * cfg.embed_dim;
    store.insert(DECISION_WEIGHT, normal_matrix(rng, width, 1, 0.02));
    store.insert(DECISION_BIAS, Array2::zeros((1, 1)));
}

fn patch_row_indices(batch: usize, t: usize) -> Vec<usize> {
    (0..batch)
        .flat_map(|b| (1..t).map(move |i| b * t + i))
        .collect()
}

/// Patch rows of every layer, each layer-normalized without affine terms,
/// concatenated along channels. Raw multi-layer tokens saturate the sigmoid.
fn decision_features(g: &mut Graph, layers: &[Var], rows: &[usize]) -> Var {
    let per_layer: Vec<Var> = layers
        .iter()
        .map(|&l| {
            let r = g.gather_rows(l, rows);
            g.layer_norm_rows(r, DECISION_LN_EPS)
        })
        .collect();
    g.concat_cols(&per_layer)
}

/// Soft saliency for every patch of a batched forward pass, `(B·D) × 1`.
pub fn saliency_graph(
    g: &mut Graph,
    p: &Bindings,
    backbone: &Backbone,
    out: &BackboneOutput,
    batch: usize,
) -> Var {
    let idx = patch_row_indices(batch, backbone.seq_len());
    let feats = decision_features(g, &out.layers, &idx);
    let logits = g.matmul(feats, p.get(DECISION_WEIGHT));
    let logits = g.add_row(logits, p.get(DECISION_BIAS));
    g.sigmoid(logits)
}

/// Scales every patch row of stacked tokens by its soft saliency; CLS rows pass through.
pub fn filter_tokens_graph(g: &mut Graph, tokens: Var, soft: Var, batch: usize, t: usize) -> Var {
    let one = g.constant(Array2::ones((1, 1)));
    let ext = g.concat_rows(&[soft, one]);
    let d = t - 1;
    let idx: Vec<usize> = (0..batch * t)
        .map(|r| {
            if r % t == 0 {
                batch * d
            } else {
                (r / t) * d + r % t - 1
            }
        })
        .collect();
    let col = g.gather_rows(ext, &idx);
    g.mul_col(tokens, col)
}

/// Saliency of one token sequence from explicit decision parameters.
pub fn predict_saliency(
    seq: &TokenSequence,
    weight: &Matrix,
    bias: f64,
    grid: (usize, usize),
    threshold: f64,
    expected_layers: usize,
) -> Result<SaliencyMask> {
    if seq.tokens_per_layer.len() != expected_layers {
        return Err(Error::Shape(format!(
            "token sequence has {} layers, expected {expected_layers}",
            seq.tokens_per_layer.len()
        )));
    }
    let c = seq.tokens_per_layer[0].ncols();
    if weight.dim() != (expected_layers * c, 1) {
        return Err(Error::Shape(format!(
            "decision weight is {:?}, expected {}×1",
            weight.dim(),
            expected_layers * c
        )));
    }
    let mut g = Graph::new();
    let layers: Vec<Var> = seq
        .tokens_per_layer
        .iter()
        .map(|m| g.constant(m.clone()))
        .collect();
    let t = seq.tokens_per_layer[0].nrows();
    let idx: Vec<usize> = (1..t).collect();
    let feats = decision_features(&mut g, &layers, &idx);
    let w = g.constant(weight.clone());
    let logits = g.matmul(feats, w);
    let logits = g.add_scalar(logits, bias);
    let soft = g.sigmoid(logits);
    SaliencyMask::from_soft(g.value(soft).column(0).to_vec(), grid, threshold)
}

/// `[cls; soft ⊙ patches]` for one token array.
pub fn filter_tokens(layer0: &Matrix, mask: &SaliencyMask) -> Result<Matrix> {
    if layer0.nrows() != mask.len() + 1 {
        return Err(Error::Shape(format!(
            "{} token rows for a mask of {} patches",
            layer0.nrows(),
            mask.len()
        )));
    }
    let mut out = layer0.clone();
    for (d, &s) in mask.soft.iter().enumerate() {
        out.row_mut(d + 1).mapv_inplace(|x| x * s);
    }
    Ok(out)
}

fn check_lengths(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Intersection over union of two binary masks.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    check_lengths(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::UndefinedMeasure("IoU of two empty masks".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// Intersection over the candidate's area: `|target ∩ candidate| / |candidate|`.
pub fn oiou(target: &[bool], candidate: &[bool]) -> Result<f64> {
    check_lengths(target, candidate)?;
    let (mut inter, mut area) = (0usize, 0usize);
    for (&x, &y) in target.iter().zip(candidate) {
        inter += usize::from(x && y);
        area += usize::from(y);
    }
    if area == 0 {
        return Err(Error::EmptyCandidate);
    }
    Ok(inter as f64 / area as f64)
}

/// Cyclic shift of a row-major grid by `shift` columns to the right.
pub fn roll_columns(mask: &[bool], grid: (usize, usize), shift: usize) -> Vec<bool> {
    let (rows, cols) = grid;
    let mut out = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + (c + shift) % cols] = mask[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolledOiou {
    pub score: f64,
    /// Smallest column shift that attains `score`.
    pub shift: usize,
}

/// Best OIoU over horizontal cyclic shifts `0, stride, 2·stride, …` of the target.
pub fn max_rolled_oiou(
    target: &SaliencyMask,
    candidate: &SaliencyMask,
    roll_stride: usize,
) -> Result<RolledOiou> {
    if target.grid != candidate.grid {
        return Err(Error::Shape(format!(
            "grids differ: {:?} vs {:?}",
            target.grid, candidate.grid
        )));
    }
    if roll_stride == 0 {
        return Err(Error::Config("roll stride must be >= 1".into()));
    }
    let mut best = RolledOiou {
        score: oiou(&target.binary, &candidate.binary)?,
        shift: 0,
    };
    for shift in (roll_stride..target.grid.1).step_by(roll_stride) {
        let rolled = roll_columns(&target.binary, target.grid, shift);
        let s = oiou(&rolled, &candidate.binary)?;
        if s > best.score {
            best = RolledOiou { score: s, shift };
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CandidatePair {
    pub target: usize,
    pub candidate: usize,
    pub oiou: f64,
    pub rolled: f64,
    pub shift: usize,
}

/// Number of survivors kept for a top fraction. The small epsilon keeps
/// products like `0.1 · 30` from rounding up past the exact integer.
pub fn top_count(fraction: f64, survivors: usize) -> usize {
    (((fraction * survivors as f64) - 1e-9).ceil().max(0.0) as usize).min(survivors)
}

/// Ordered cross-identity pairs that pass both overlap thresholds, ranked by
/// rolled OIoU (descending, ties by `(target, candidate)`), truncated to the
/// configured top fraction. Candidates with empty masks are never eligible.
pub fn select_candidates(
    masks: &[SaliencyMask],
    identities: &[usize],
    cfg: &SptConfig,
) -> Result<Vec<CandidatePair>> {
    if masks.len() != identities.len() {
        return Err(Error::Shape(format!(
            "{} masks but {} identities",
            masks.len(),
            identities.len()
        )));
    }
    let mut survivors = Vec::new();
    for (i, mi) in masks.iter().enumerate() {
        for (j, mj) in masks.iter().enumerate() {
            if identities[i] == identities[j] || mj.area() == 0 {
                continue;
            }
            let o = oiou(&mi.binary, &mj.binary)?;
            if o < cfg.oiou_threshold {
                continue;
            }
            let rolled = max_rolled_oiou(mi, mj, cfg.roll_stride)?;
            if rolled.score < cfg.roll_threshold {
                continue;
            }
            survivors.push(CandidatePair {
                target: i,
                candidate: j,
                oiou: o,
                rolled: rolled.score,
                shift: rolled.shift,
            });
        }
    }
    survivors.sort_by(|a, b| {
        b.rolled
            .partial_cmp(&a.rolled)
            .unwrap_or(Ordering::Equal)
            .then((a.target, a.candidate).cmp(&(b.target, b.candidate)))
    });
    survivors.truncate(top_count(cfg.top_fraction, survivors.len()));
    Ok(survivors)
}

/// An occluded training sample built from a target and a candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedSample {
    pub tokens: Matrix,
    pub target_identity: usize,
    pub candidate_identity: usize,
    pub candidate_mask: SaliencyMask,
    pub oiou_score: f64,
}

/// Patch rows come from the target where the candidate mask is set and from
/// the candidate elsewhere; the CLS row is always the target's.
pub fn recombine(
    target: &Matrix,
    candidate: &Matrix,
    candidate_mask: &SaliencyMask,
) -> Result<Matrix> {
    if target.dim() != candidate.dim() {
        return Err(Error::Shape(format!(
            "token arrays differ: {:?} vs {:?}",
            target.dim(),
            candidate.dim()
        )));
    }
    if target.nrows() != candidate_mask.len() + 1 {
        return Err(Error::Shape(format!(
            "{} token rows for a mask of {} patches",
            target.nrows(),
            candidate_mask.len()
        )));
    }
    let mut out = target.clone();
    for (d, &keep) in candidate_mask.binary.iter().enumerate() {
        if !keep {
            out.row_mut(d + 1).assign(&candidate.row(d + 1));
        }
    }
    Ok(out)
}

pub fn synthesize(
    target: &Matrix,
    candidate: &Matrix,
    target_identity: usize,
    candidate_identity: usize,
    candidate_mask: &SaliencyMask,
    oiou_score: f64,
) -> Result<SynthesizedSample> {
    Ok(SynthesizedSample {
        tokens: recombine(target, candidate, candidate_mask)?,
        target_identity,
        candidate_identity,
        candidate_mask: candidate_mask.clone(),
        oiou_score,
    })
}

/// One in-batch replacement: sample `target` is rebuilt from itself and `candidate`.
#[derive(Clone, Debug)]
pub struct Replacement {
    pub target: usize,
    pub candidate: usize,
    pub candidate_mask: Vec<bool>,
}

/// Applies token-space recombination to stacked batch tokens.
pub fn recombine_graph(
    g: &mut Graph,
    tokens: Var,
    batch: usize,
    t: usize,
    replacements: &[Replacement],
) -> Var {
    if replacements.is_empty() {
        return tokens;
    }
    let mut keep = Array2::ones((batch * t, 1));
    let mut src: Vec<usize> = (0..batch * t).collect();
    for r in replacements {
        for (d, &m) in r.candidate_mask.iter().enumerate() {
            if !m {
                let row = r.target * t + 1 + d;
                keep[[row, 0]] = 0.0;
                src[row] = r.candidate * t + 1 + d;
            }
        }
    }
    let drop = keep.mapv(|k: f64| 1.0 - k);
    let keep = g.constant(keep);
    let drop = g.constant(drop);
    let moved = g.gather_rows(tokens, &src);
    let a = g.mul_col(tokens, keep);
    let b = g.mul_col(moved, drop);
    g.add(a, b)
}

/// Image-space view of a recombination, for inspection. Pixels covered by a
/// patch whose candidate-mask bit is set come from the target; pixels of the
/// remaining patches come from the candidate. Uncovered border pixels keep
/// the target.
pub fn composite_image(
    target: &Image,
    candidate: &Image,
    candidate_mask: &SaliencyMask,
    cfg: &BackboneConfig,
) -> Result<Image> {
    if target.height != candidate.height || target.width != candidate.width {
        return Err(Error::Shape(
            "target and candidate images differ in size".into(),
        ));
    }
    let (rows, cols) = candidate_mask.grid;
    let mut out = target.clone();
    let paint = |out: &mut Image, src: &Image, r: usize, c: usize| {
        for y in r * cfg.patch_stride..r * cfg.patch_stride + cfg.patch_size {
            for x in c * cfg.patch_stride..c * cfg.patch_stride + cfg.patch_size {
                out.set(y, x, src.get(y, x));
            }
        }
    };
    for r in 0..rows {
        for c in 0..cols {
            if !candidate_mask.binary[r * cols + c] {
                paint(&mut out, candidate, r, c);
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            if candidate_mask.binary[r * cols + c] {
                paint(&mut out, target, r, c);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(v: &[u8]) -> Vec<bool> {
        v.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn iou_examples() {
        assert!(
            (iou(&bits(&[1, 1, 0, 0]), &bits(&[0, 1, 1, 0])).unwrap() - 1.0 / 3.0).abs() < 1e-15
        );
        assert_eq!(iou(&bits(&[1, 0, 1]), &bits(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(iou(&bits(&[1, 0, 0]), &bits(&[0, 0, 1])).unwrap(), 0.0);
        assert!(matches!(
            iou(&bits(&[0, 0]), &bits(&[0, 0])),
            Err(Error::UndefinedMeasure(_))
        ));
    }

    #[test]
    fn oiou_examples() {
        assert!(
            (oiou(&bits(&[1, 1, 1, 0]), &bits(&[0, 1, 1, 1])).unwrap() - 2.0 / 3.0).abs() < 1e-15
        );
        assert_eq!(oiou(&bits(&[0, 1, 1]), &bits(&[0, 1, 1])).unwrap(), 1.0);
        assert_eq!(oiou(&bits(&[1, 1, 1]), &bits(&[0, 1, 0])).unwrap(), 1.0);
        assert!(matches!(
            oiou(&bits(&[1, 1]), &bits(&[0, 0])),
            Err(Error::EmptyCandidate)
        ));
    }

    #[test]
    fn rolled_oiou_examples() {
        let t = SaliencyMask::from_binary(bits(&[1, 1, 0, 0]), (1, 4)).unwrap();
        let c = SaliencyMask::from_binary(bits(&[0, 0, 1, 1]), (1, 4)).unwrap();
        let r = max_rolled_oiou(&t, &c, 1).unwrap();
        assert_eq!(r.score, 1.0);
        assert_eq!(r.shift, 2);
        // stride >= width: shift 0 only
        let r = max_rolled_oiou(&t, &c, 4).unwrap();
        assert_eq!(r.score, oiou(&t.binary, &c.binary).unwrap());
        assert_eq!(r.shift, 0);
    }

    #[test]
    fn top_count_is_exact_on_round_products() {
        assert_eq!(top_count(0.1, 30), 3);
        assert_eq!(top_count(0.1, 31), 4);
        assert_eq!(top_count(0.1, 1), 1);
        assert_eq!(top_count(0.1, 0), 0);
        assert_eq!(top_count(1.0, 7), 7);
    }

    #[test]
    fn recombine_edge_masks() {
        let t = Array2::from_shape_fn((4, 2), |(r, c)| (r * 2 + c) as f64);
        let c = t.mapv(|x| -x - 1.0);
        let all = SaliencyMask::from_binary(vec![true; 3], (1, 3)).unwrap();
        let none = SaliencyMask::from_binary(vec![false; 3], (1, 3)).unwrap();
        assert_eq!(recombine(&t, &c, &all).unwrap(), t);
        let r = recombine(&t, &c, &none).unwrap();
        assert_eq!(r.row(0), t.row(0));
        assert_eq!(r.slice(ndarray::s![1.., ..]), c.slice(ndarray::s![1.., ..]));
    }

    #[test]
    fn filter_tokens_edge_masks() {
        let x = Array2::from_shape_fn((3, 2), |(r, c)| (r + c) as f64 + 1.0);
        let ones = SaliencyMask::from_soft(vec![1.0, 1.0], (1, 2), 0.5).unwrap();
        assert_eq!(filter_tokens(&x, &ones).unwrap(), x);
        let zeros = SaliencyMask::from_soft(vec![0.0, 0.0], (1, 2), 0.5).unwrap();
        let f = filter_tokens(&x, &zeros).unwrap();
        assert_eq!(f.row(0), x.row(0));
        assert!(f.slice(ndarray::s![1.., ..]).iter().all(|&v| v == 0.0));
    }
}
