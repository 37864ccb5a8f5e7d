//! Prototype spaces: the frozen coarse matrix produced by prompt anchoring,
//! the learnable matrix, and the per-image masked matrix.

use dpmkit_autograd::{Graph, Matrix, Var};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimSpec, Optimizer, OptimizerKind};
use crate::params::{normal_matrix, stream_rng, Bindings, ParamStore};

pub const COARSE: &str = "prototype.coarse";
pub const LEARNABLE: &str = "prototype.learnable";
pub const PROMPT_TOKENS: &str = "prompt.tokens";
pub const TEXT_PREFIX: &str = "text";

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `K × c_out`, frozen once anchoring finishes.
    pub coarse: Matrix,
    /// `K × c_out`
    pub learnable: Matrix,
}

impl PrototypeBank {
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let coarse = store.require(COARSE)?.clone();
        let learnable = store.require(LEARNABLE)?.clone();
        if coarse.dim() != learnable.dim() {
            return Err(Error::Shape(format!(
                "coarse prototypes {:?} and learnable prototypes {:?} differ",
                coarse.dim(),
                learnable.dim()
            )));
        }
        Ok(Self { coarse, learnable })
    }

    pub fn num_identities(&self) -> usize {
        self.learnable.nrows()
    }

    pub fn dim(&self) -> usize {
        self.learnable.ncols()
    }

    /// Masked prototype matrix for one image; the coarse matrix is untouched.
    pub fn apply_mask(&self, mask: &PrototypeMask) -> Result<Matrix> {
        apply_mask(&self.learnable, &mask.values)
    }
}

/// Learnable prototypes drawn from `N(0, 1/c_out)`.
pub fn init_learnable(
    store: &mut ParamStore,
    num_identities: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) {
    store.insert(
        LEARNABLE,
        normal_matrix(rng, num_identities, dim, 1.0 / (dim as f64).sqrt()),
    );
}

/// Image-specific channel mask over prototype dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeMask {
    pub values: Vec<f64>,
}

impl PrototypeMask {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Numeric(format!(
                "prototype mask value {v} outside (0, 1)"
            )));
        }
        Ok(Self { values })
    }
}

/// `P_m[k, j] = P[k, j] · mask[j]`.
pub fn apply_mask(prototypes: &Matrix, mask: &[f64]) -> Result<Matrix> {
    if mask.len() != prototypes.ncols() {
        return Err(Error::Shape(format!(
            "mask length {} vs prototype dim {}",
            mask.len(),
            prototypes.ncols()
        )));
    }
    let row = ndarray::ArrayView1::from(mask);
    Ok(prototypes * &row)
}

/// Learnable prompt tokens, one `M × token_dim` block per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub tokens: Matrix,
    pub prompt_len: usize,
}

impl PromptBank {
    pub fn new(
        num_identities: usize,
        prompt_len: usize,
        token_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            tokens: normal_matrix(rng, num_identities * prompt_len, token_dim, 1.0),
            prompt_len,
        }
    }

    pub fn num_identities(&self) -> usize {
        self.tokens.nrows() / self.prompt_len
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// A frozen text tower mapping prompt tokens to the prototype space.
pub trait TextEncoder {
    fn token_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Encodes `num_prompts` stacked `M × token_dim` prompt blocks into a
    /// `num_prompts × output_dim` matrix (not normalized).
    fn encode_prompts(&self, g: &mut Graph, prompts: Var, num_prompts: usize) -> Var;
}

/// A frozen image tower producing one embedding row per image.
pub trait ImageEncoder {
    fn output_dim(&self) -> usize;
    fn embed(&self, images: &[(&Image, usize)]) -> Result<Matrix>;
}

/// Wraps a backbone and a parameter snapshot; returns projected CLS features.
pub struct FrozenBackbone<'a> {
    pub backbone: &'a Backbone,
    pub store: &'a ParamStore,
    pub batch_size: usize,
}

impl ImageEncoder for FrozenBackbone<'_> {
    fn output_dim(&self) -> usize {
        self.backbone.config().projected_dim
    }

    fn embed(&self, images: &[(&Image, usize)]) -> Result<Matrix> {
        let mut out = Array2::zeros((images.len(), self.output_dim()));
        for (chunk_idx, chunk) in images.chunks(self.batch_size.max(1)).enumerate() {
            let mut g = Graph::new();
            let p = self.store.bind(&mut g, |_| false);
            let tokens = self.backbone.tokens(&mut g, &p, chunk)?;
            let enc = self.backbone.encode(&mut g, &p, tokens, chunk.len())?;
            let start = chunk_idx * self.batch_size.max(1);
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..])
                .assign(g.value(enc.projected));
        }
        Ok(out)
    }
}

/// Template words around the learnable tokens: `a photo of a [X…] person`.
const TEMPLATE_PREFIX: [usize; 4] = [0, 1, 2, 0];
const TEMPLATE_SUFFIX: usize = 3;
const VOCAB: usize = 4;

/// Small randomly initialized, frozen pre-norm transformer standing in for a
/// pretrained text tower. The last position (`person`) is read out.
pub struct ToyTextEncoder {
    params: ParamStore,
    token_dim: usize,
    output_dim: usize,
    layers: usize,
    heads: usize,
    prompt_len: usize,
}

impl ToyTextEncoder {
    pub fn new(
        token_dim: usize,
        output_dim: usize,
        layers: usize,
        heads: usize,
        prompt_len: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stream_rng(seed, "text-encoder");
        let mut params = ParamStore::new();
        let seq = TEMPLATE_PREFIX.len() + prompt_len + 1;
        let d = token_dim;
        params.insert(
            format!("{TEXT_PREFIX}.vocab"),
            normal_matrix(&mut rng, VOCAB, d, 1.0),
        );
        params.insert(
            format!("{TEXT_PREFIX}.pos"),
            normal_matrix(&mut rng, seq, d, 0.1),
        );
        let std = 1.0 / (d as f64).sqrt();
        for i in 0..layers {
            let b = format!("{TEXT_PREFIX}.blocks.{i}");
            params.insert(format!("{b}.qkv"), normal_matrix(&mut rng, d, 3 * d, std));
            params.insert(format!("{b}.out"), normal_matrix(&mut rng, d, d, std));
            params.insert(format!("{b}.fc1"), normal_matrix(&mut rng, d, 4 * d, std));
            params.insert(
                format!("{b}.fc2"),
                normal_matrix(&mut rng, 4 * d, d, 0.5 * std),
            );
        }
        params.insert(
            format!("{TEXT_PREFIX}.proj"),
            normal_matrix(&mut rng, d, output_dim, std),
        );
        Self {
            params,
            token_dim,
            output_dim,
            layers,
            heads,
            prompt_len,
        }
    }

    /// Rebuilds an encoder from parameters stored under `text.*`.
    pub fn from_store(
        store: &ParamStore,
        layers: usize,
        heads: usize,
        prompt_len: usize,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        for (k, v) in store
            .iter()
            .filter(|(k, _)| crate::params::matches_prefix(k, TEXT_PREFIX))
        {
            params.insert(k.clone(), v.clone());
        }
        let vocab = params.require(&format!("{TEXT_PREFIX}.vocab"))?;
        let token_dim = vocab.ncols();
        let output_dim = params.require(&format!("{TEXT_PREFIX}.proj"))?.ncols();
        Ok(Self {
            params,
            token_dim,
            output_dim,
            layers,
            heads,
            prompt_len,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn block(&self, g: &mut Graph, p: &Bindings, x: Var, i: usize) -> Var {
        let d = self.token_dim;
        let dh = d / self.heads;
        let b = format!("{TEXT_PREFIX}.blocks.{i}");
        let h = g.layer_norm_rows(x, 1e-6);
        let qkv = g.matmul(h, p.get(&format!("{b}.qkv")));
        let mut outs = Vec::with_capacity(self.heads);
        for hd in 0..self.heads {
            let q = g.slice_cols(qkv, hd * dh, dh);
            let k = g.slice_cols(qkv, d + hd * dh, dh);
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, 1.0 / (dh as f64).sqrt());
            let a = g.softmax_rows(s);
            outs.push(g.matmul(a, v));
        }
        let o = g.concat_cols(&outs);
        let o = g.matmul(o, p.get(&format!("{b}.out")));
        let x = g.add(x, o);
        let h = g.layer_norm_rows(x, 1e-6);
        let h = g.matmul(h, p.get(&format!("{b}.fc1")));
        let h = g.gelu(h);
        let h = g.matmul(h, p.get(&format!("{b}.fc2")));
        g.add(x, h)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn token_dim(&self) -> usize {
        self.token_dim
    }

    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn encode_prompts(&self, g: &mut Graph, prompts: Var, num_prompts: usize) -> Var {
        let p = self.params.bind(g, |_| false);
        let vocab = p.get(&format!("{TEXT_PREFIX}.vocab"));
        let prefix = g.gather_rows(vocab, &TEMPLATE_PREFIX);
        let suffix = g.gather_rows(vocab, &[TEMPLATE_SUFFIX]);
        let pos = p.get(&format!("{TEXT_PREFIX}.pos"));
        let mut outs = Vec::with_capacity(num_prompts);
        for k in 0..num_prompts {
            let learn = g.slice_rows(prompts, k * self.prompt_len, self.prompt_len);
            let seq = g.concat_rows(&[prefix, learn, suffix]);
            let mut x = g.add(seq, pos);
            for i in 0..self.layers {
                x = self.block(g, &p, x, i);
            }
            let last = g.shape(x).0 - 1;
            outs.push(g.slice_rows(x, last, 1));
        }
        let eot = g.concat_rows(&outs);
        let eot = g.layer_norm_rows(eot, 1e-6);
        g.matmul(eot, p.get(&format!("{TEXT_PREFIX}.proj")))
    }
}

#[derive(Clone, Debug)]
pub struct AnchorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AnchorOutcome {
    /// Unit-norm text embeddings, one row per identity.
    pub coarse: Matrix,
    /// Mean alignment loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Symmetric image↔text alignment loss for one batch.
///
/// Image→text: cross-entropy of each image over all identity prompts.
/// Text→image: for each identity present in the batch, the negative log of
/// the softmax mass its prompt places on that identity's images.
pub fn alignment_loss(
    g: &mut Graph,
    image_emb: Var,
    text_emb: Var,
    labels: &[usize],
    temperature: f64,
) -> Var {
    let img = g.l2_normalize_rows(image_emb);
    let txt = g.l2_normalize_rows(text_emb);
    let logits = g.matmul_t(img, txt);
    let logits = g.scale(logits, 1.0 / temperature);
    let n = labels.len();
    let k = g.shape(txt).0;

    let ls = g.log_softmax_rows(logits, None);
    let picks: Vec<(usize, usize)> = labels.iter().enumerate().map(|(i, &y)| (i, y)).collect();
    let picked = g.gather_elems(ls, &picks);
    let i2t = g.mean(picked);
    let i2t = g.scale(i2t, -1.0);

    let mut present: Vec<usize> = labels.to_vec();
    present.sort_unstable();
    present.dedup();
    let lt = g.transpose(logits);
    let full = g.log_softmax_rows(lt, None);
    let mut keep = vec![false; k * n];
    for (i, &y) in labels.iter().enumerate() {
        keep[y * n + i] = true;
    }
    let pos = g.log_softmax_rows(lt, Some(keep));
    let anchor: Vec<(usize, usize)> = present
        .iter()
        .map(|&y| {
            (
                y,
                labels.iter().position(|&l| l == y).expect("present label"),
            )
        })
        .collect();
    let a = g.gather_elems(pos, &anchor);
    let b = g.gather_elems(full, &anchor);
    let t2i = g.sub(a, b);
    let t2i = g.mean(t2i);

    let total = g.add(i2t, t2i);
    g.scale(total, 0.5)
}

/// Optimizes the prompt tokens against frozen encoders and returns the
/// normalized per-identity text embeddings as the coarse prototype matrix.
pub fn anchor_prompts(
    prompts: &mut PromptBank,
    text: &dyn TextEncoder,
    image_embeddings: &Matrix,
    labels: &[usize],
    cfg: &AnchorConfig,
) -> Result<AnchorOutcome> {
    let k = prompts.num_identities();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Config(format!(
            "identity {bad} appears in the data but only {k} prompts exist"
        )));
    }
    if image_embeddings.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} embeddings for {} labels",
            image_embeddings.nrows(),
            labels.len()
        )));
    }
    if prompts.token_dim() != text.token_dim() {
        return Err(Error::Shape(format!(
            "prompt dim {} vs encoder dim {}",
            prompts.token_dim(),
            text.token_dim()
        )));
    }
    let mut opt = Optimizer::new(OptimSpec {
        kind: OptimizerKind::adam(),
        lr: cfg.lr,
        weight_decay: 0.0,
        schedule: LrSchedule::WarmupCosine {
            warmup_epochs: cfg.warmup_epochs,
            total_epochs: cfg.epochs,
        },
    });
    let mut rng = stream_rng(cfg.seed, "prompt-anchoring");
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut store = ParamStore::new();
    store.insert(PROMPT_TOKENS, prompts.tokens.clone());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut g = Graph::new();
            let tokens = g.param(store.get(PROMPT_TOKENS).expect("prompt tokens").clone());
            let txt = text.encode_prompts(&mut g, tokens, k);
            let img = g.constant(image_embeddings.select(ndarray::Axis(0), chunk));
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = alignment_loss(&mut g, img, txt, &batch_labels, cfg.temperature);
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "alignment loss became {value} in epoch {epoch}"
                )));
            }
            total += value;
            steps += 1;
            let grads = g.backward(loss);
            if let Some(gt) = grads.get(tokens) {
                opt.step(&mut store, PROMPT_TOKENS, gt, epoch);
            }
        }
        epoch_losses.push(total / steps.max(1) as f64);
    }
    prompts.tokens = store.get(PROMPT_TOKENS).expect("prompt tokens").clone();
    let coarse = encode_prototypes(prompts, text);
    Ok(AnchorOutcome {
        coarse,
        epoch_losses,
    })
}

/// Unit-normalized text embedding of every identity prompt.
pub fn encode_prototypes(prompts: &PromptBank, text: &dyn TextEncoder) -> Matrix {
    let mut g = Graph::new();
    let tokens = g.constant(prompts.tokens.clone());
    let txt = text.encode_prompts(&mut g, tokens, prompts.num_identities());
    let txt = g.l2_normalize_rows(txt);
    g.value(txt).clone()
}

/// Row index of the most cosine-similar prototype for each embedding.
pub fn nearest_prototype(embeddings: &Matrix, prototypes: &Matrix) -> Vec<usize> {
    embeddings
        .rows()
        .into_iter()
        .map(|e| {
            let en = e.dot(&e).sqrt().max(f64::MIN_POSITIVE);
            let mut best = (0, f64::NEG_INFINITY);
            for (k, p) in prototypes.rows().into_iter().enumerate() {
                let s = e.dot(&p) / (en * p.dot(&p).sqrt().max(f64::MIN_POSITIVE));
                if s > best.1 {
                    best = (k, s);
                }
            }
            best.0
        })
        .collect()
}
