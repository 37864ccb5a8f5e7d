//! Pipeline configuration.
//!
//! Config files are flat UTF-8 `key = value` lines with dotted section names,
//! e.g. `spt.oiou_threshold = 0.3`. Strings are double-quoted and lists use
//! brackets (`dpm.milestones = [20, 40]`); `#` starts a comment. Unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "DPMKIT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch_size: usize,
    pub patch_stride: usize,
    pub embed_dim: usize,
    pub projected_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub num_cameras: usize,
    pub camera_coeff: f64,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_height: 64,
            image_width: 32,
            patch_size: 8,
            patch_stride: 8,
            embed_dim: 64,
            projected_dim: 32,
            num_layers: 4,
            num_heads: 4,
            num_cameras: 4,
            camera_coeff: 1.0,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    /// ViT-B/16-sized setting with overlapping 11-pixel stride on 256×128 inputs.
    pub fn full_scale() -> Self {
        Self {
            image_height: 256,
            image_width: 128,
            patch_size: 16,
            patch_stride: 11,
            embed_dim: 768,
            projected_dim: 512,
            num_layers: 12,
            num_heads: 12,
            num_cameras: 8,
            camera_coeff: 1.0,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || self.patch_size > self.image_height
            || self.patch_size > self.image_width
        {
            return bad(format!(
                "patch_size {} must be in 1..=min(image_height {}, image_width {})",
                self.patch_size, self.image_height, self.image_width
            ));
        }
        if self.patch_stride == 0 {
            return bad("patch_stride must be >= 1".into());
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.projected_dim == 0 || self.projected_dim > self.embed_dim {
            return bad(format!(
                "projected_dim {} must be in 1..=embed_dim {}",
                self.projected_dim, self.embed_dim
            ));
        }
        if self.num_layers == 0 || self.num_cameras == 0 || self.mlp_ratio == 0 {
            return bad("num_layers, num_cameras and mlp_ratio must be positive".into());
        }
        if !(self.camera_coeff >= 0.0) {
            return bad(format!(
                "camera_coeff must be >= 0, got {}",
                self.camera_coeff
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SptConfig {
    pub enabled: bool,
    pub oiou_threshold: f64,
    pub roll_threshold: f64,
    /// Columns per rolling step.
    pub roll_stride: usize,
    pub top_fraction: f64,
    pub binarize_threshold: f64,
    /// Chance that an eligible target is replaced by its synthesized version.
    pub synth_probability: f64,
}

impl Default for SptConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            oiou_threshold: 0.3,
            roll_threshold: 0.1,
            roll_stride: 1,
            top_fraction: 0.1,
            binarize_threshold: 0.5,
            synth_probability: 0.5,
        }
    }
}

impl SptConfig {
    /// The stricter OIoU threshold used in the original patch-transfer setup.
    pub const ALT_OIOU_THRESHOLD: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "spt.{name} must be in [0, 1], got {v}"
                )))
            }
        };
        unit("oiou_threshold", self.oiou_threshold)?;
        unit("roll_threshold", self.roll_threshold)?;
        unit("synth_probability", self.synth_probability)?;
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "spt.top_fraction must be in (0, 1], got {}",
                self.top_fraction
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "spt.binarize_threshold must be in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        if self.roll_stride == 0 {
            return Err(Error::Config("spt.roll_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmgConfig {
    /// One 0/1 flag per transformer block (1-based layers 1..=L). Empty means
    /// the default `{L/2, L}` selection.
    pub layer_gate: Vec<u8>,
    /// Output channels of each 3×3 convolution. Empty means `[c, c]`.
    pub conv_channels: Vec<usize>,
}

impl Default for HmgConfig {
    fn default() -> Self {
        Self {
            layer_gate: Vec::new(),
            conv_channels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub margin: f64,
    pub scale: f64,
    pub triplet_margin: f64,
    pub alpha: f64,
    pub beta: f64,
    pub budget_target: f64,
    /// Penalize `|mean(M) - rho|` instead of the signed `mean(M) - rho`.
    pub budget_abs: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 0.35,
            scale: 30.0,
            triplet_margin: 0.3,
            alpha: 1.0,
            beta: 0.10,
            budget_target: 0.3,
            budget_abs: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0
            && self.triplet_margin >= 0.0
            && self.alpha >= 0.0
            && self.beta >= 0.0)
        {
            return Err(Error::Config(
                "losses.margin, triplet_margin, alpha and beta must be >= 0".into(),
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "losses.scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(self.budget_target > 0.0 && self.budget_target < 1.0) {
            return Err(Error::Config(format!(
                "losses.budget_target must be in (0, 1), got {}",
                self.budget_target
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub prompt_len: usize,
    pub token_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            token_dim: 32,
            text_layers: 2,
            text_heads: 4,
            temperature: 0.07,
            epochs: 100,
            lr: 3.5e-4,
            warmup_epochs: 5,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsStageConfig {
    pub epochs: usize,
    pub decision_lr: f64,
    pub momentum: f64,
    pub backbone_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

impl Default for SpsStageConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            decision_lr: 8e-3,
            momentum: 0.9,
            backbone_lr: 5e-5,
            warmup_epochs: 5,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpmStageConfig {
    pub epochs: usize,
    pub module_lr: f64,
    pub encoder_lr: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    /// HMG + masked identity branch.
    pub mask_branch: bool,
    /// Coarse-prototype identity loss (requires the prompt stage).
    pub coarse_anchoring: bool,
}

impl Default for DpmStageConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            module_lr: 5e-3,
            encoder_lr: 1e-5,
            milestones: vec![20, 40],
            gamma: 0.1,
            weight_decay: 1e-4,
            warmup_epochs: 0,
            mask_branch: true,
            coarse_anchoring: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub ids_per_batch: usize,
    pub images_per_id: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            ids_per_batch: 4,
            images_per_id: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip: bool,
    pub crop_padding: usize,
    /// Probability of applying random erasing to a training image.
    pub random_erasing: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            crop_padding: 2,
            random_erasing: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub metric: DistanceMetric,
    pub max_rank: usize,
    pub batch_size: usize,
    /// Experimental: compare query/gallery features after applying the
    /// query's predicted prototype mask.
    pub masked_distance: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metric: DistanceMetric::Euclidean,
            max_rank: 50,
            batch_size: 8,
            masked_distance: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.jsonl"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub spt: SptConfig,
    pub hmg: HmgConfig,
    pub losses: LossConfig,
    pub prompt: PromptConfig,
    pub sps: SpsStageConfig,
    pub dpm: DpmStageConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Config {
    /// Desk-scale schedule: short stages and learning rates large enough for
    /// a randomly initialized toy backbone to move within a few epochs.
    pub fn toy() -> Self {
        Self {
            prompt: PromptConfig {
                epochs: 20,
                lr: 1e-2,
                warmup_epochs: 2,
                batch_size: 32,
                ..Default::default()
            },
            // The budget acts mainly through the decision bias and needs
            // about thirty epochs of toy steps to pull the mean down to ρ.
            sps: SpsStageConfig {
                epochs: 30,
                backbone_lr: 1e-3,
                warmup_epochs: 1,
                ..Default::default()
            },
            dpm: DpmStageConfig {
                epochs: 5,
                module_lr: 5e-3,
                encoder_lr: 1e-3,
                milestones: vec![20, 40],
                ..Default::default()
            },
            sampler: SamplerConfig {
                ids_per_batch: 4,
                images_per_id: 4,
            },
            // The signed budget drives every saliency score to zero here,
            // which leaves patch transfer with empty masks.
            losses: LossConfig {
                budget_abs: true,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `DPMKIT_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| {
                Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
            })?;
        }
        Ok(())
    }

    /// Renders the config back into the flat dotted form.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &value, &mut out);
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.spt.validate()?;
        self.losses.validate()?;
        if self.sampler.ids_per_batch < 2 || self.sampler.images_per_id < 2 {
            return Err(Error::Config(
                "sampler needs >= 2 identities and >= 2 images per identity".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.augment.random_erasing) {
            return Err(Error::Config(
                "augment.random_erasing must be a probability".into(),
            ));
        }
        if !self.hmg.layer_gate.is_empty() {
            if self.hmg.layer_gate.len() != self.backbone.num_layers {
                return Err(Error::Config(format!(
                    "hmg.layer_gate has {} flags but the backbone has {} layers",
                    self.hmg.layer_gate.len(),
                    self.backbone.num_layers
                )));
            }
            if self.hmg.layer_gate.iter().all(|&b| b == 0) {
                return Err(Error::Config("hmg.layer_gate selects no layers".into()));
            }
        }
        if self.prompt.prompt_len == 0 || self.prompt.token_dim % self.prompt.text_heads.max(1) != 0
        {
            return Err(Error::Config(
                "prompt.prompt_len must be >= 1 and token_dim divisible by text_heads".into(),
            ));
        }
        Ok(())
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            // scalars first so the file reads top-down
            for (k, child) in t.iter().filter(|(_, c)| !c.is_table()) {
                out.push_str(&format!("{prefix}{k} = {child}\n"));
            }
            for (k, child) in t.iter().filter(|(_, c)| c.is_table()) {
                flatten(&format!("{prefix}{k}."), child, out);
            }
        }
        other => out.push_str(&format!("{prefix} = {other}\n")),
    }
}
