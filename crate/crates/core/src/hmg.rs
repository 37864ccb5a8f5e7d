//! Hierarchical mask generator: gated multi-layer patch maps → 3×3 convs →
//! global average pooling → FC + sigmoid, giving a channel mask over the
//! prototype dimensions.

use dpmkit_autograd::{Graph, Matrix, Var};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, TokenSequence};
use crate::config::{BackboneConfig, HmgConfig};
use crate::error::{Error, Result};
use crate::params::{normal_matrix, Bindings, ParamStore};
use crate::prototype::PrototypeMask;

pub const PREFIX: &str = "hmg";
const KERNEL: usize = 3;

/// Row-major `h × w × c` view of a `D × c` patch array.
pub fn reshape_layer(tokens: &Matrix, grid: (usize, usize)) -> Result<Array3<f64>> {
    let (h, w) = grid;
    if h * w != tokens.nrows() {
        return Err(Error::Shape(format!(
            "grid {h}×{w} does not hold {} patches",
            tokens.nrows()
        )));
    }
    let c = tokens.ncols();
    Ok(Array3::from_shape_fn((h, w, c), |(r, col, k)| {
        tokens[[r * w + col, k]]
    }))
}

pub fn flatten_grid(grid: &Array3<f64>) -> Matrix {
    let (h, w, c) = grid.dim();
    Array2::from_shape_fn((h * w, c), |(d, k)| grid[[d / w, d % w, k]])
}

/// 1-based indices of the transformer layers feeding the generator.
pub fn gated_layers(cfg: &HmgConfig, num_layers: usize) -> Result<Vec<usize>> {
    if cfg.layer_gate.is_empty() {
        let mut v = vec![(num_layers / 2).max(1), num_layers];
        v.dedup();
        return Ok(v);
    }
    if cfg.layer_gate.len() != num_layers {
        return Err(Error::Config(format!(
            "hmg.layer_gate has {} entries but the backbone has {num_layers} layers",
            cfg.layer_gate.len()
        )));
    }
    if let Some(bad) = cfg.layer_gate.iter().find(|&&b| b > 1) {
        return Err(Error::Config(format!(
            "hmg.layer_gate entries must be 0 or 1, got {bad}"
        )));
    }
    let v: Vec<usize> = cfg
        .layer_gate
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(i, _)| i + 1)
        .collect();
    if v.is_empty() {
        return Err(Error::Config("hmg.layer_gate selects no layer".into()));
    }
    Ok(v)
}

pub struct MaskGenerator {
    layers: Vec<usize>,
    channels: Vec<usize>,
    grid: (usize, usize),
    embed_dim: usize,
    output_dim: usize,
}

impl MaskGenerator {
    pub fn new(cfg: &HmgConfig, backbone: &BackboneConfig) -> Result<Self> {
        let layers = gated_layers(cfg, backbone.num_layers)?;
        let channels = if cfg.conv_channels.is_empty() {
            vec![backbone.embed_dim; 2]
        } else {
            cfg.conv_channels.clone()
        };
        if channels.contains(&0) {
            return Err(Error::Config(
                "hmg.conv_channels entries must be positive".into(),
            ));
        }
        Ok(Self {
            layers,
            channels,
            grid: crate::backbone::patch_grid(backbone)?,
            embed_dim: backbone.embed_dim,
            output_dim: backbone.projected_dim,
        })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut fan_in = self.layers.len() * self.embed_dim;
        for (i, &out) in self.channels.iter().enumerate() {
            let rows = KERNEL * KERNEL * fan_in;
            store.insert(
                format!("{PREFIX}.conv{i}.weight"),
                normal_matrix(rng, rows, out, 1.0 / (rows as f64).sqrt()),
            );
            store.insert(format!("{PREFIX}.conv{i}.bias"), Array2::zeros((1, out)));
            fan_in = out;
        }
        store.insert(
            format!("{PREFIX}.fc.weight"),
            normal_matrix(rng, fan_in, self.output_dim, 1.0 / (fan_in as f64).sqrt()),
        );
        store.insert(
            format!("{PREFIX}.fc.bias"),
            Array2::zeros((1, self.output_dim)),
        );
    }

    /// Pooled convolutional features of one sample's gated patch maps, `1 × c`.
    fn pooled(&self, g: &mut Graph, p: &Bindings, gated: &[Var]) -> Var {
        let (h, w) = self.grid;
        let mut x = if gated.len() == 1 {
            gated[0]
        } else {
            g.concat_cols(gated)
        };
        for i in 0..self.channels.len() {
            let cols = g.im2col(x, h, w, KERNEL);
            let y = g.matmul(cols, p.get(&format!("{PREFIX}.conv{i}.weight")));
            let y = g.add_row(y, p.get(&format!("{PREFIX}.conv{i}.bias")));
            x = g.gelu(y);
        }
        g.col_mean(x)
    }

    fn head(&self, g: &mut Graph, p: &Bindings, pooled: Var) -> Var {
        let y = g.matmul(pooled, p.get(&format!("{PREFIX}.fc.weight")));
        let y = g.add_row(y, p.get(&format!("{PREFIX}.fc.bias")));
        g.sigmoid(y)
    }

    /// Masks for a batch from the backbone's stacked per-layer tokens, `B × c_out`.
    pub fn generate_graph(
        &self,
        g: &mut Graph,
        p: &Bindings,
        layers: &[Var],
        batch: usize,
        t: usize,
    ) -> Var {
        let d = t - 1;
        let mut rows = Vec::with_capacity(batch);
        for b in 0..batch {
            let gated: Vec<Var> = self
                .layers
                .iter()
                .map(|&l| g.slice_rows(layers[l], b * t + 1, d))
                .collect();
            rows.push(self.pooled(g, p, &gated));
        }
        let pooled = if batch == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)
        };
        self.head(g, p, pooled)
    }

    fn check_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let have = seq.tokens_per_layer.len();
        if let Some(&l) = self.layers.iter().find(|&&l| l >= have) {
            return Err(Error::Shape(format!(
                "gated layer {l} missing from a sequence of {have} snapshots"
            )));
        }
        Ok(())
    }

    /// Pooled features before the FC layer, for inspection.
    pub fn pooled_features(&self, seq: &TokenSequence, store: &ParamStore) -> Result<Vec<f64>> {
        self.check_sequence(seq)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let gated = self.gated_inputs(&mut g, seq);
        let v = self.pooled(&mut g, &p, &gated);
        Ok(g.value(v).row(0).to_vec())
    }

    fn gated_inputs(&self, g: &mut Graph, seq: &TokenSequence) -> Vec<Var> {
        self.layers
            .iter()
            .map(|&l| {
                let m = &seq.tokens_per_layer[l];
                g.constant(m.slice(ndarray::s![1.., ..]).to_owned())
            })
            .collect()
    }

    pub fn generate_mask(&self, seq: &TokenSequence, store: &ParamStore) -> Result<PrototypeMask> {
        self.check_sequence(seq)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, |_| false);
        let gated = self.gated_inputs(&mut g, seq);
        let pooled = self.pooled(&mut g, &p, &gated);
        let m = self.head(&mut g, &p, pooled);
        PrototypeMask::new(g.value(m).row(0).to_vec())
    }
}

/// Convenience: run the backbone on a single image and generate its mask.
pub fn mask_for_tokens(
    backbone: &Backbone,
    gen: &MaskGenerator,
    store: &ParamStore,
    tokens: &Matrix,
) -> Result<PrototypeMask> {
    let (seq, _) = backbone.forward(store, tokens)?;
    gen.generate_mask(&seq, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reshape_is_row_major() {
        let t = array![[0.0], [1.0], [2.0], [3.0]];
        let g = reshape_layer(&t, (2, 2)).unwrap();
        assert_eq!(g[[0, 0, 0]], 0.0);
        assert_eq!(g[[0, 1, 0]], 1.0);
        assert_eq!(g[[1, 0, 0]], 2.0);
        assert_eq!(g[[1, 1, 0]], 3.0);
        assert_eq!(flatten_grid(&g), t);
        assert!(matches!(reshape_layer(&t, (3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn gate_defaults_and_errors() {
        let mut cfg = HmgConfig::default();
        assert_eq!(gated_layers(&cfg, 4).unwrap(), vec![2, 4]);
        assert_eq!(gated_layers(&cfg, 1).unwrap(), vec![1]);
        cfg.layer_gate = vec![0, 0, 0, 0];
        assert!(matches!(gated_layers(&cfg, 4), Err(Error::Config(_))));
        cfg.layer_gate = vec![1, 0, 1];
        assert!(matches!(gated_layers(&cfg, 4), Err(Error::Config(_))));
        cfg.layer_gate = vec![1, 0, 0, 1];
        assert_eq!(gated_layers(&cfg, 4).unwrap(), vec![1, 4]);
    }
}
