//! Small vision transformer: patch tokenization with position and camera
//! embeddings, pre-norm blocks, and per-layer token snapshots.

use dpmkit_autograd::{Graph, Matrix, Var};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::config::BackboneConfig;
use crate::data::image::Image;
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bindings, ParamStore};

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

fn fan_in(n: usize) -> f64 {
    1.0 / (n as f64).sqrt()
}

/// Number of patch tokens produced by a `patch_size` window sliding with
/// `patch_stride` over an `image_height × image_width` image.
pub fn count_patches(cfg: &BackboneConfig) -> Result<usize> {
    let (rows, cols) = patch_grid(cfg)?;
    Ok(rows * cols)
}

/// `(rows, cols)` of the patch grid.
pub fn patch_grid(cfg: &BackboneConfig) -> Result<(usize, usize)> {
    if cfg.patch_size == 0 || cfg.patch_size > cfg.image_height || cfg.patch_size > cfg.image_width
    {
        return Err(Error::Config(format!(
            "patch size {} does not fit a {}×{} image",
            cfg.patch_size, cfg.image_height, cfg.image_width
        )));
    }
    if cfg.patch_stride == 0 {
        return Err(Error::Config("patch stride must be >= 1".into()));
    }
    let rows = (cfg.image_height - cfg.patch_size) / cfg.patch_stride + 1;
    let cols = (cfg.image_width - cfg.patch_size) / cfg.patch_stride + 1;
    Ok((rows, cols))
}

/// Token arrays of one image: the input sequence plus one snapshot per block.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `L + 1` arrays of shape `(1 + D) × c`; index 0 is the tokenizer output.
    pub tokens_per_layer: Vec<Matrix>,
    /// Final-norm CLS representation (length `c`).
    pub cls_feature: Vec<f64>,
    /// Affine projection of `cls_feature` (length `c_out`).
    pub projected_cls: Vec<f64>,
}

/// Last-block CLS→patch attention, one probability row per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub cls_attention: Matrix,
}

/// Graph handles for a batched forward pass.
pub struct BackboneOutput {
    /// `L + 1` stacked `(B·(1+D)) × c` token arrays.
    pub layers: Vec<Var>,
    /// `B × c`
    pub cls: Var,
    /// `B × c_out`
    pub projected: Var,
    /// One `N_h × D` attention matrix per sample.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    prefix: String,
    grid: (usize, usize),
}

impl Backbone {
    pub const DEFAULT_PREFIX: &'static str = "backbone";

    pub fn new(cfg: BackboneConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        let grid = patch_grid(&cfg)?;
        Ok(Self {
            cfg,
            prefix: prefix.into(),
            grid,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Same architecture, parameters read from a different prefix.
    pub fn with_prefix(&self, prefix: impl Into<String>) -> Self {
        Self {
            cfg: self.cfg.clone(),
            prefix: prefix.into(),
            grid: self.grid,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    fn patch_dim(&self) -> usize {
        3 * self.cfg.patch_size * self.cfg.patch_size
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let c = self.cfg.embed_dim;
        let hidden = c * self.cfg.mlp_ratio;
        let t = self.seq_len();
        let mut put = |name: &str, m: Matrix| store.insert(self.name(name), m);
        put(
            "patch.weight",
            normal_matrix(rng, self.patch_dim(), c, fan_in(self.patch_dim())),
        );
        put("patch.bias", Array2::zeros((1, c)));
        put("cls", normal_matrix(rng, 1, c, INIT_STD));
        put("pos", normal_matrix(rng, t, c, INIT_STD));
        put(
            "camera",
            normal_matrix(rng, self.cfg.num_cameras, c, INIT_STD),
        );
        for i in 0..self.cfg.num_layers {
            let b = format!("blocks.{i}.");
            put(&format!("{b}ln1.gamma"), Array2::ones((1, c)));
            put(&format!("{b}ln1.beta"), Array2::zeros((1, c)));
            put(
                &format!("{b}attn.qkv.weight"),
                normal_matrix(rng, c, 3 * c, fan_in(c)),
            );
            put(&format!("{b}attn.qkv.bias"), Array2::zeros((1, 3 * c)));
            put(
                &format!("{b}attn.out.weight"),
                normal_matrix(rng, c, c, fan_in(c)),
            );
            put(&format!("{b}attn.out.bias"), Array2::zeros((1, c)));
            put(&format!("{b}ln2.gamma"), Array2::ones((1, c)));
            put(&format!("{b}ln2.beta"), Array2::zeros((1, c)));
            put(
                &format!("{b}mlp.fc1.weight"),
                normal_matrix(rng, c, hidden, fan_in(c)),
            );
            put(&format!("{b}mlp.fc1.bias"), Array2::zeros((1, hidden)));
            put(
                &format!("{b}mlp.fc2.weight"),
                normal_matrix(rng, hidden, c, fan_in(hidden)),
            );
            put(&format!("{b}mlp.fc2.bias"), Array2::zeros((1, c)));
        }
        put("norm.gamma", Array2::ones((1, c)));
        put("norm.beta", Array2::zeros((1, c)));
        put(
            "proj.weight",
            normal_matrix(rng, c, self.cfg.projected_dim, fan_in(c)),
        );
        put("proj.bias", Array2::zeros((1, self.cfg.projected_dim)));
    }

    /// Flattened, centred pixel patches in row-major grid order, `D × (3·S_p²)`.
    pub fn extract_patches(&self, image: &Image) -> Result<Matrix> {
        if image.height != self.cfg.image_height || image.width != self.cfg.image_width {
            return Err(Error::Shape(format!(
                "image is {}×{} but the backbone expects {}×{}",
                image.height, image.width, self.cfg.image_height, self.cfg.image_width
            )));
        }
        let (rows, cols) = self.grid;
        let (sp, sd) = (self.cfg.patch_size, self.cfg.patch_stride);
        let mut out = Array2::zeros((rows * cols, self.patch_dim()));
        for r in 0..rows {
            for c in 0..cols {
                let mut row = out.row_mut(r * cols + c);
                let mut k = 0;
                for y in r * sd..r * sd + sp {
                    for x in c * sd..c * sd + sp {
                        let px = image.get(y, x);
                        row[k] = (px[0] - PIXEL_MEAN) / PIXEL_STD;
                        row[k + 1] = (px[1] - PIXEL_MEAN) / PIXEL_STD;
                        row[k + 2] = (px[2] - PIXEL_MEAN) / PIXEL_STD;
                        k += 3;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Layer-0 tokens for a batch, stacked as `(B·(1+D)) × c`.
    pub fn tokens(&self, g: &mut Graph, p: &Bindings, batch: &[(&Image, usize)]) -> Result<Var> {
        let d = self.num_patches();
        let mut all = Vec::with_capacity(batch.len() * d);
        for (img, cam) in batch {
            if *cam >= self.cfg.num_cameras {
                return Err(Error::Index(format!(
                    "camera id {cam} >= num_cameras {}",
                    self.cfg.num_cameras
                )));
            }
            all.push(self.extract_patches(img)?);
        }
        let views: Vec<_> = all.iter().map(|m| m.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal patch widths");
        let pixels = g.constant(stacked);
        let proj = g.matmul(pixels, p.get(&self.name("patch.weight")));
        let proj = g.add_row(proj, p.get(&self.name("patch.bias")));
        let cls = p.get(&self.name("cls"));
        let pos = p.get(&self.name("pos"));
        let cam_table = p.get(&self.name("camera"));
        let mut seqs = Vec::with_capacity(batch.len());
        for (b, (_, cam)) in batch.iter().enumerate() {
            let patches = g.slice_rows(proj, b * d, d);
            let seq = g.concat_rows(&[cls, patches]);
            let seq = g.add(seq, pos);
            let seq = if self.cfg.camera_coeff != 0.0 {
                let cam_row = g.gather_rows(cam_table, &[*cam]);
                let cam_row = g.scale(cam_row, self.cfg.camera_coeff);
                g.add_row(seq, cam_row)
            } else {
                seq
            };
            seqs.push(seq);
        }
        Ok(if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat_rows(&seqs)
        })
    }

    fn layer_norm(&self, g: &mut Graph, p: &Bindings, x: Var, name: &str) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let n = g.mul_row(n, p.get(&self.name(&format!("{name}.gamma"))));
        g.add_row(n, p.get(&self.name(&format!("{name}.beta"))))
    }

    fn linear(&self, g: &mut Graph, p: &Bindings, x: Var, name: &str) -> Var {
        let y = g.matmul(x, p.get(&self.name(&format!("{name}.weight"))));
        g.add_row(y, p.get(&self.name(&format!("{name}.bias"))))
    }

    /// Runs the transformer over stacked layer-0 tokens of `batch` samples.
    pub fn encode(
        &self,
        g: &mut Graph,
        p: &Bindings,
        tokens: Var,
        batch: usize,
    ) -> Result<BackboneOutput> {
        let t = self.seq_len();
        let c = self.cfg.embed_dim;
        if g.shape(tokens) != (batch * t, c) {
            return Err(Error::Shape(format!(
                "expected {}×{c} tokens for a batch of {batch}, got {:?}",
                batch * t,
                g.shape(tokens)
            )));
        }
        if g.value(tokens).iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in input tokens".into()));
        }
        let heads = self.cfg.num_heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let d = self.num_patches();
        let mut layers = vec![tokens];
        let mut x = tokens;
        let mut attention = Vec::new();
        for i in 0..self.cfg.num_layers {
            let last = i + 1 == self.cfg.num_layers;
            let blk = format!("blocks.{i}");
            let h = self.layer_norm(g, p, x, &format!("{blk}.ln1"));
            let qkv = self.linear(g, p, h, &format!("{blk}.attn.qkv"));
            let mut per_sample = Vec::with_capacity(batch);
            for b in 0..batch {
                let qkv_b = g.slice_rows(qkv, b * t, t);
                let mut head_out = Vec::with_capacity(heads);
                let mut cls_rows = Vec::new();
                for hd in 0..heads {
                    let q = g.slice_cols(qkv_b, hd * dh, dh);
                    let k = g.slice_cols(qkv_b, c + hd * dh, dh);
                    let v = g.slice_cols(qkv_b, 2 * c + hd * dh, dh);
                    let s = g.matmul_t(q, k);
                    let s = g.scale(s, scale);
                    let a = g.softmax_rows(s);
                    head_out.push(g.matmul(a, v));
                    if last {
                        let q_cls = g.slice_rows(q, 0, 1);
                        let k_img = g.slice_rows(k, 1, d);
                        let s = g.matmul_t(q_cls, k_img);
                        let s = g.scale(s, scale);
                        cls_rows.push(g.softmax_rows(s));
                    }
                }
                per_sample.push(g.concat_cols(&head_out));
                if last {
                    attention.push(g.concat_rows(&cls_rows));
                }
            }
            let attn = if batch == 1 {
                per_sample[0]
            } else {
                g.concat_rows(&per_sample)
            };
            let attn = self.linear(g, p, attn, &format!("{blk}.attn.out"));
            x = g.add(x, attn);
            let h = self.layer_norm(g, p, x, &format!("{blk}.ln2"));
            let h = self.linear(g, p, h, &format!("{blk}.mlp.fc1"));
            let h = g.gelu(h);
            let h = self.linear(g, p, h, &format!("{blk}.mlp.fc2"));
            x = g.add(x, h);
            layers.push(x);
        }
        let cls_idx: Vec<usize> = (0..batch).map(|b| b * t).collect();
        let cls = g.gather_rows(x, &cls_idx);
        let cls = self.layer_norm(g, p, cls, "norm");
        let projected = self.linear(g, p, cls, "proj");
        Ok(BackboneOutput {
            layers,
            cls,
            projected,
            attention,
        })
    }

    /// Layer-0 token array of a single image.
    pub fn tokenize(&self, store: &ParamStore, image: &Image, camera: usize) -> Result<Matrix> {
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let v = self.tokens(&mut g, &p, &[(image, camera)])?;
        Ok(g.value(v).clone())
    }

    /// Forward pass of a single token array.
    pub fn forward(
        &self,
        store: &ParamStore,
        tokens: &Matrix,
    ) -> Result<(TokenSequence, AttentionStack)> {
        Ok(self
            .forward_batch(store, std::slice::from_ref(tokens))?
            .pop()
            .expect("one sample"))
    }

    /// Forward pass of several token arrays through one graph.
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        tokens: &[Matrix],
    ) -> Result<Vec<(TokenSequence, AttentionStack)>> {
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.seq_len();
        for m in tokens {
            if m.dim() != (t, self.cfg.embed_dim) {
                return Err(Error::Shape(format!(
                    "expected {t}×{} tokens, got {:?}",
                    self.cfg.embed_dim,
                    m.dim()
                )));
            }
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let views: Vec<_> = tokens.iter().map(|m| m.view()).collect();
        let stacked =
            g.constant(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"));
        let out = self.encode(&mut g, &p, stacked, tokens.len())?;
        Ok(collect_outputs(&g, &out, tokens.len(), t))
    }
}

/// Splits stacked graph outputs into per-sample value types.
pub fn collect_outputs(
    g: &Graph,
    out: &BackboneOutput,
    batch: usize,
    t: usize,
) -> Vec<(TokenSequence, AttentionStack)> {
    (0..batch)
        .map(|b| {
            let tokens_per_layer = out
                .layers
                .iter()
                .map(|&l| {
                    g.value(l)
                        .slice(ndarray::s![b * t..(b + 1) * t, ..])
                        .to_owned()
                })
                .collect();
            let seq = TokenSequence {
                tokens_per_layer,
                cls_feature: g.value(out.cls).row(b).to_vec(),
                projected_cls: g.value(out.projected).row(b).to_vec(),
            };
            (
                seq,
                AttentionStack {
                    cls_attention: g.value(out.attention[b]).clone(),
                },
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_count_examples() {
        let mut cfg = BackboneConfig::full_scale();
        assert_eq!(count_patches(&cfg).unwrap(), 242);
        cfg = BackboneConfig {
            image_height: 16,
            image_width: 16,
            patch_size: 16,
            patch_stride: 1,
            ..Default::default()
        };
        assert_eq!(count_patches(&cfg).unwrap(), 1);
        cfg = BackboneConfig {
            image_height: 32,
            image_width: 32,
            patch_size: 16,
            patch_stride: 16,
            ..Default::default()
        };
        assert_eq!(count_patches(&cfg).unwrap(), 4);
        cfg.patch_size = 33;
        assert!(matches!(count_patches(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn patches_are_row_major() {
        let bb = Backbone::new(BackboneConfig::default(), "backbone").unwrap();
        let mut img = Image::filled(64, 32, [0.5; 3]);
        img.set(8, 16, [1.0, 0.5, 0.25]); // grid row 1, col 2
        let patches = bb.extract_patches(&img).unwrap();
        let (_, cols) = bb.grid();
        // (x - 0.5) / 0.25
        assert_eq!(patches[[cols + 2, 0]], 2.0);
        assert_eq!(patches[[cols + 2, 2]], -1.0);
        assert_eq!(patches.sum(), 1.0);
    }
}
