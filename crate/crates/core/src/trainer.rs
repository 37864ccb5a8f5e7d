//! The three training stages and PK batch construction.
//!
//! Parameter namespaces in a [`ModelState`]:
//!
//! | prefix               | owner                                   |
//! |----------------------|-----------------------------------------|
//! | `backbone`           | image encoder, trained in stages 2 and 3 |
//! | `text`, `prompt`     | frozen text tower and prompt tokens      |
//! | `prototype.coarse`   | written by the prompt stage, then frozen |
//! | `sps.decision`       | saliency decision layer                  |
//! | `sps.backbone`       | frozen encoder snapshot used for saliency |
//! | `prototype.learnable`, `hmg` | stage-3 modules                 |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dpmkit_autograd::{Graph, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::Config;
use crate::data::archive::{read_archive, write_archive, Archive};
use crate::data::augment::augment;
use crate::data::image::Image;
use crate::data::manifest::Sample;
use crate::error::{Error, Result};
use crate::hmg::MaskGenerator;
use crate::losses::{self, BatchLabels, LossRecord, Stage3Vars};
use crate::optim::{GroupedOptimizer, LrSchedule, OptimSpec, OptimizerKind};
use crate::params::{matches_prefix, normal_matrix, stream_rng, Bindings, ParamStore};
use crate::prototype::{
    self, AnchorConfig, FrozenBackbone, ImageEncoder, PromptBank, ToyTextEncoder,
};
use crate::spt::{self, Replacement, SaliencyMask};

pub const CLASSIFIER_WEIGHT: &str = "sps.classifier.weight";
pub const CLASSIFIER_BIAS: &str = "sps.classifier.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prompt,
    Sps,
    Dpm,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prompt => "prompt",
            Stage::Sps => "sps",
            Stage::Dpm => "dpm",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prompt" => Ok(Stage::Prompt),
            "sps" => Ok(Stage::Sps),
            "dpm" => Ok(Stage::Dpm),
            other => Err(Error::Config(format!(
                "unknown stage `{other}` (expected prompt, sps or dpm)"
            ))),
        }
    }
}

/// One optimizer over the parameters under `prefixes`.
#[derive(Clone, Debug)]
pub struct GroupSpec {
    pub name: String,
    pub prefixes: Vec<String>,
    pub optim: OptimSpec,
}

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stage: Stage,
    pub epochs: usize,
    pub groups: Vec<GroupSpec>,
    /// Prefixes that must be bit-identical before and after the stage.
    pub frozen: Vec<String>,
}

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl StagePlan {
    pub fn new(stage: Stage, cfg: &Config) -> Self {
        match stage {
            Stage::Prompt => StagePlan {
                stage,
                epochs: cfg.prompt.epochs,
                groups: vec![GroupSpec {
                    name: "prompt".into(),
                    prefixes: strings(&[prototype::PROMPT_TOKENS]),
                    optim: OptimSpec {
                        kind: OptimizerKind::adam(),
                        lr: cfg.prompt.lr,
                        weight_decay: 0.0,
                        schedule: LrSchedule::WarmupCosine {
                            warmup_epochs: cfg.prompt.warmup_epochs,
                            total_epochs: cfg.prompt.epochs,
                        },
                    },
                }],
                frozen: strings(&[
                    "backbone",
                    prototype::TEXT_PREFIX,
                    "sps",
                    "hmg",
                    prototype::LEARNABLE,
                ]),
            },
            Stage::Sps => {
                let schedule = LrSchedule::WarmupCosine {
                    warmup_epochs: cfg.sps.warmup_epochs,
                    total_epochs: cfg.sps.epochs,
                };
                StagePlan {
                    stage,
                    epochs: cfg.sps.epochs,
                    groups: vec![
                        GroupSpec {
                            name: "decision".into(),
                            prefixes: strings(&["sps.decision"]),
                            optim: OptimSpec {
                                kind: OptimizerKind::Sgd {
                                    momentum: cfg.sps.momentum,
                                },
                                lr: cfg.sps.decision_lr,
                                weight_decay: cfg.sps.weight_decay,
                                schedule: schedule.clone(),
                            },
                        },
                        GroupSpec {
                            name: "encoder".into(),
                            prefixes: strings(&["backbone", "sps.classifier"]),
                            optim: OptimSpec {
                                kind: OptimizerKind::adam(),
                                lr: cfg.sps.backbone_lr,
                                weight_decay: cfg.sps.weight_decay,
                                schedule,
                            },
                        },
                    ],
                    frozen: strings(&[prototype::TEXT_PREFIX, "prompt", prototype::COARSE]),
                }
            }
            Stage::Dpm => {
                let schedule = LrSchedule::WarmupStep {
                    warmup_epochs: cfg.dpm.warmup_epochs,
                    milestones: cfg.dpm.milestones.clone(),
                    gamma: cfg.dpm.gamma,
                };
                let spec = |lr| OptimSpec {
                    kind: OptimizerKind::adam(),
                    lr,
                    weight_decay: cfg.dpm.weight_decay,
                    schedule: schedule.clone(),
                };
                StagePlan {
                    stage,
                    epochs: cfg.dpm.epochs,
                    groups: vec![
                        GroupSpec {
                            name: "modules".into(),
                            prefixes: strings(&[prototype::LEARNABLE, crate::hmg::PREFIX]),
                            optim: spec(cfg.dpm.module_lr),
                        },
                        GroupSpec {
                            name: "encoder".into(),
                            prefixes: strings(&["backbone"]),
                            optim: spec(cfg.dpm.encoder_lr),
                        },
                    ],
                    frozen: strings(&["sps", prototype::COARSE, prototype::TEXT_PREFIX, "prompt"]),
                }
            }
        }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.groups
            .iter()
            .any(|g| g.prefixes.iter().any(|p| matches_prefix(name, p)))
    }

    fn optimizer(&self) -> GroupedOptimizer {
        let mut opt = GroupedOptimizer::new();
        for group in &self.groups {
            let prefixes = group.prefixes.clone();
            opt.add_group(
                move |n| prefixes.iter().any(|p| matches_prefix(n, p)),
                group.optim.clone(),
            );
        }
        opt
    }

    fn frozen_checksums(&self, params: &ParamStore) -> Vec<String> {
        self.frozen.iter().map(|p| params.checksum(p)).collect()
    }
}

/// Training images grouped by identity.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub samples: Vec<Sample>,
    pub num_identities: usize,
    by_identity: Vec<Vec<usize>>,
}

impl TrainSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let num_identities = samples.iter().map(|s| s.identity + 1).max().unwrap_or(0);
        let mut by_identity = vec![Vec::new(); num_identities];
        for (i, s) in samples.iter().enumerate() {
            by_identity[s.identity].push(i);
        }
        if let Some(k) = by_identity.iter().position(Vec::is_empty) {
            return Err(Error::Validation(format!(
                "training identity {k} has no images"
            )));
        }
        Ok(Self {
            samples,
            num_identities,
            by_identity,
        })
    }

    pub fn images_of(&self, identity: usize) -> &[usize] {
        &self.by_identity[identity]
    }
}

/// `P` identities × `K` images per batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PkSampler {
    pub ids_per_batch: usize,
    pub images_per_id: usize,
    pub seed: u64,
}

impl PkSampler {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            ids_per_batch: cfg.sampler.ids_per_batch,
            images_per_id: cfg.sampler.images_per_id,
            seed: cfg.seed,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.ids_per_batch * self.images_per_id
    }

    /// Batches of sample indices for one epoch. Each identity's images are
    /// shuffled and cut into groups of `K`; identities short of `K` images
    /// are topped up by resampling. Batches draw `P` distinct identities
    /// that still have unused groups.
    pub fn epoch_batches(&self, set: &TrainSet, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if set.num_identities < self.ids_per_batch {
            return Err(Error::Sampling(format!(
                "{} identities available but each batch needs {}",
                set.num_identities, self.ids_per_batch
            )));
        }
        let mut rng = stream_rng(self.seed, &format!("sampler/{epoch}"));
        let k = self.images_per_id;
        let mut groups: Vec<Vec<Vec<usize>>> = (0..set.num_identities)
            .map(|id| {
                let mut imgs = set.images_of(id).to_vec();
                imgs.shuffle(&mut rng);
                while imgs.len() < k {
                    let pick = set.images_of(id)[rng.random_range(0..set.images_of(id).len())];
                    imgs.push(pick);
                }
                imgs.chunks(k)
                    .filter(|c| c.len() == k)
                    .map(|c| c.to_vec())
                    .collect()
            })
            .collect();
        let mut batches = Vec::new();
        loop {
            let mut avail: Vec<usize> = (0..groups.len())
                .filter(|&i| !groups[i].is_empty())
                .collect();
            if avail.len() < self.ids_per_batch {
                break;
            }
            avail.shuffle(&mut rng);
            let mut chosen = avail[..self.ids_per_batch].to_vec();
            chosen.sort_unstable();
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in chosen {
                batch.extend(groups[id].pop().expect("available identity has a group"));
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

/// Parameters plus the set of stages that have run to completion.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub params: ParamStore,
    pub completed: BTreeSet<Stage>,
    pub num_identities: usize,
}

impl ModelState {
    /// Fresh state: backbone, frozen text tower and prompt tokens.
    pub fn new(cfg: &Config, num_identities: usize) -> Result<Self> {
        cfg.validate()?;
        if num_identities == 0 {
            return Err(Error::Config("no training identities".into()));
        }
        let mut params = ParamStore::new();
        let backbone = Backbone::new(cfg.backbone.clone(), Backbone::DEFAULT_PREFIX)?;
        backbone.init_params(&mut params, &mut stream_rng(cfg.seed, "init/backbone"));
        let text = text_encoder_new(cfg);
        for (k, v) in text.params().iter() {
            params.insert(k.clone(), v.clone());
        }
        let prompts = PromptBank::new(
            num_identities,
            cfg.prompt.prompt_len,
            cfg.prompt.token_dim,
            &mut stream_rng(cfg.seed, "init/prompt"),
        );
        params.insert(prototype::PROMPT_TOKENS, prompts.tokens);
        Ok(Self {
            params,
            completed: BTreeSet::new(),
            num_identities,
        })
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum("")
    }

    pub fn to_archive(&self) -> Archive {
        let mut metadata = BTreeMap::new();
        metadata.insert(
            "stages".into(),
            self.completed
                .iter()
                .map(|s| s.as_str())
                .collect::<Vec<_>>()
                .join(","),
        );
        metadata.insert("num_identities".into(), self.num_identities.to_string());
        Archive {
            entries: self.params.to_named_arrays(),
            metadata,
        }
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let params = ParamStore::from_named_arrays(&archive.entries)?;
        let completed = match archive.metadata.get("stages").map(String::as_str) {
            None | Some("") => BTreeSet::new(),
            Some(s) => s.split(',').map(Stage::from_str).collect::<Result<_>>()?,
        };
        let num_identities = archive
            .metadata
            .get("num_identities")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Validation("checkpoint lacks num_identities".into()))?;
        Ok(Self {
            params,
            completed,
            num_identities,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_archive(&self.to_archive(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&read_archive(path)?)
    }
}

fn text_encoder_new(cfg: &Config) -> ToyTextEncoder {
    ToyTextEncoder::new(
        cfg.prompt.token_dim,
        cfg.backbone.projected_dim,
        cfg.prompt.text_layers,
        cfg.prompt.text_heads,
        cfg.prompt.prompt_len,
        cfg.seed,
    )
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub lr: f64,
    pub synthetic: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where checkpoints and metrics go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub state: ModelState,
    pub steps: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
}

/// Checks that every prerequisite of `stage` has completed.
pub fn check_prerequisites(stage: Stage, state: &ModelState, cfg: &Config) -> Result<()> {
    let need = |s: Stage, why: &str| {
        if state.is_complete(s) {
            Ok(())
        } else {
            Err(Error::Staging(format!(
                "stage `{stage}` needs a checkpoint from stage `{s}` ({why})"
            )))
        }
    };
    match stage {
        Stage::Prompt => Ok(()),
        Stage::Sps if cfg.dpm.coarse_anchoring => {
            need(Stage::Prompt, "coarse anchoring is enabled")
        }
        Stage::Sps => Ok(()),
        Stage::Dpm => {
            need(Stage::Sps, "the saliency module must be trained first")?;
            if cfg.dpm.coarse_anchoring {
                need(Stage::Prompt, "coarse anchoring is enabled")?;
            }
            Ok(())
        }
    }
}

struct Metrics {
    steps: Option<std::fs::File>,
    epochs: Option<std::fs::File>,
}

impl Metrics {
    fn open(opts: &RunOptions, stage: Stage) -> Result<Self> {
        let Some(dir) = &opts.out_dir else {
            return Ok(Self {
                steps: None,
                epochs: None,
            });
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: String| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            steps: Some(open(format!("{stage}_steps.jsonl"))?),
            epochs: Some(open(format!("{stage}_epochs.jsonl"))?),
        })
    }

    fn write<T: Serialize>(file: &mut Option<std::fs::File>, rec: &T) -> Result<()> {
        if let Some(f) = file {
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io("metrics", e))?;
        }
        Ok(())
    }
}

fn save_checkpoint(state: &ModelState, opts: &RunOptions, name: &str) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        state.save(&dir.join(name))?;
    }
    Ok(())
}

/// Runs one stage. With zero epochs the state comes back untouched.
pub fn run_stage(
    plan: &StagePlan,
    state: ModelState,
    data: &TrainSet,
    cfg: &Config,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    cfg.validate()?;
    check_prerequisites(plan.stage, &state, cfg)?;
    if data.num_identities != state.num_identities {
        return Err(Error::Config(format!(
            "the state was built for {} identities but the training split has {}",
            state.num_identities, data.num_identities
        )));
    }
    if plan.epochs == 0 {
        save_checkpoint(&state, opts, &format!("{}.ckpt", plan.stage))?;
        return Ok(StageOutcome {
            state,
            steps: Vec::new(),
            epochs: Vec::new(),
        });
    }
    let before = plan.frozen_checksums(&state.params);
    let outcome = match plan.stage {
        Stage::Prompt => run_prompt(plan, state, data, cfg, opts)?,
        Stage::Sps | Stage::Dpm => run_gradient_stage(plan, state, data, cfg, opts)?,
    };
    if plan.frozen_checksums(&outcome.state.params) != before {
        return Err(Error::Staging(format!(
            "a frozen parameter group changed during stage `{}`",
            plan.stage
        )));
    }
    Ok(outcome)
}

fn run_prompt(
    plan: &StagePlan,
    mut state: ModelState,
    data: &TrainSet,
    cfg: &Config,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    let backbone = Backbone::new(cfg.backbone.clone(), Backbone::DEFAULT_PREFIX)?;
    let encoder = FrozenBackbone {
        backbone: &backbone,
        store: &state.params,
        batch_size: cfg.eval.batch_size,
    };
    let images: Vec<(&Image, usize)> = data.samples.iter().map(|s| (&s.image, s.camera)).collect();
    let emb = encoder.embed(&images)?;
    let labels: Vec<usize> = data.samples.iter().map(|s| s.identity).collect();
    let text = ToyTextEncoder::from_store(
        &state.params,
        cfg.prompt.text_layers,
        cfg.prompt.text_heads,
        cfg.prompt.prompt_len,
    )?;
    let mut prompts = PromptBank {
        tokens: state.params.require(prototype::PROMPT_TOKENS)?.clone(),
        prompt_len: cfg.prompt.prompt_len,
    };
    let group = &plan.groups[0].optim;
    let outcome = prototype::anchor_prompts(
        &mut prompts,
        &text,
        &emb,
        &labels,
        &AnchorConfig {
            epochs: plan.epochs,
            lr: group.lr,
            warmup_epochs: cfg.prompt.warmup_epochs,
            batch_size: cfg.prompt.batch_size,
            temperature: cfg.prompt.temperature,
            seed: cfg.seed,
        },
    )?;
    state
        .params
        .insert(prototype::PROMPT_TOKENS, prompts.tokens);
    state.params.insert(prototype::COARSE, outcome.coarse);
    state.completed.insert(Stage::Prompt);

    let mut metrics = Metrics::open(opts, Stage::Prompt)?;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for (e, &loss) in outcome.epoch_losses.iter().enumerate() {
        let rec = LossRecord {
            stage: "prompt".into(),
            epoch: e,
            step: e,
            total: loss,
            ..Default::default()
        };
        Metrics::write(&mut metrics.steps, &rec)?;
        steps.push(rec);
        let er = EpochRecord {
            stage: "prompt".into(),
            epoch: e,
            steps: 1,
            mean_total: loss,
            lr: group.lr * group.schedule.factor(e),
            synthetic: 0,
        };
        Metrics::write(&mut metrics.epochs, &er)?;
        epochs.push(er);
    }
    save_checkpoint(&state, opts, "prompt.ckpt")?;
    Ok(StageOutcome {
        state,
        steps,
        epochs,
    })
}

fn init_stage_params(stage: Stage, state: &mut ModelState, cfg: &Config) -> Result<()> {
    let k = state.num_identities;
    match stage {
        Stage::Prompt => {}
        Stage::Sps => {
            let mut rng = stream_rng(cfg.seed, "init/sps");
            spt::init_decision_params(&mut state.params, &cfg.backbone, &mut rng);
            state.params.insert(
                CLASSIFIER_WEIGHT,
                normal_matrix(&mut rng, cfg.backbone.projected_dim, k, 0.01),
            );
            state
                .params
                .insert(CLASSIFIER_BIAS, ndarray::Array2::zeros((1, k)));
        }
        Stage::Dpm => {
            if !state.params.contains(prototype::LEARNABLE) {
                let mut rng = stream_rng(cfg.seed, "init/prototype");
                prototype::init_learnable(
                    &mut state.params,
                    k,
                    cfg.backbone.projected_dim,
                    &mut rng,
                );
            }
            if cfg.dpm.mask_branch && !state.params.has_prefix(crate::hmg::PREFIX) {
                let gen = MaskGenerator::new(&cfg.hmg, &cfg.backbone)?;
                gen.init_params(&mut state.params, &mut stream_rng(cfg.seed, "init/hmg"));
            }
        }
    }
    Ok(())
}

/// Frozen saliency predictor used to pair samples for patch transfer.
pub struct SptContext<'a> {
    pub backbone: Backbone,
    pub store: &'a ParamStore,
    pub cfg: &'a crate::config::SptConfig,
}

impl<'a> SptContext<'a> {
    pub fn new(cfg: &'a Config, store: &'a ParamStore) -> Result<Self> {
        if !store.has_prefix(spt::SPS_BACKBONE_PREFIX) || !store.contains(spt::DECISION_WEIGHT) {
            return Err(Error::Staging(
                "saliency parameters missing; run the sps stage first".into(),
            ));
        }
        Ok(Self {
            backbone: Backbone::new(cfg.backbone.clone(), spt::SPS_BACKBONE_PREFIX)?,
            store,
            cfg: &cfg.spt,
        })
    }

    pub fn masks(&self, images: &[(&Image, usize)]) -> Result<Vec<SaliencyMask>> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, |_| false);
        let tokens = self.backbone.tokens(&mut g, &p, images)?;
        let out = self.backbone.encode(&mut g, &p, tokens, images.len())?;
        let soft = spt::saliency_graph(&mut g, &p, &self.backbone, &out, images.len());
        let d = self.backbone.num_patches();
        let values = g.value(soft);
        (0..images.len())
            .map(|b| {
                let s = values.slice(ndarray::s![b * d..(b + 1) * d, 0]).to_vec();
                SaliencyMask::from_soft(s, self.backbone.grid(), self.cfg.binarize_threshold)
            })
            .collect()
    }
}

/// Layer-0 tokens and labels of one training batch.
pub struct BuiltBatch {
    pub tokens: Var,
    pub labels: BatchLabels,
    pub replacements: Vec<Replacement>,
}

/// Augments the images at `indices`, tokenizes them with `backbone`, and,
/// when `spt` is given, replaces eligible targets by their recombination
/// with a paired candidate.
#[allow(clippy::too_many_arguments)]
pub fn build_batch(
    g: &mut Graph,
    p: &Bindings,
    backbone: &Backbone,
    data: &TrainSet,
    indices: &[usize],
    cfg: &Config,
    spt_ctx: Option<&SptContext<'_>>,
    rng: &mut ChaCha8Rng,
) -> Result<BuiltBatch> {
    let images: Vec<Image> = indices
        .iter()
        .map(|&i| augment(&data.samples[i].image, &cfg.augment, rng))
        .collect();
    let batch: Vec<(&Image, usize)> = images
        .iter()
        .zip(indices)
        .map(|(im, &i)| (im, data.samples[i].camera))
        .collect();
    let identities: Vec<usize> = indices.iter().map(|&i| data.samples[i].identity).collect();
    let cameras: Vec<usize> = indices.iter().map(|&i| data.samples[i].camera).collect();
    let mut labels = BatchLabels::clean(identities.clone(), cameras);
    let tokens = backbone.tokens(g, p, &batch)?;
    let mut replacements = Vec::new();
    if let Some(ctx) = spt_ctx {
        let masks = ctx.masks(&batch)?;
        let pairs = spt::select_candidates(&masks, &identities, ctx.cfg)?;
        let mut used = vec![false; indices.len()];
        for pair in pairs {
            if used[pair.target] {
                continue;
            }
            used[pair.target] = true;
            if !rng.random_bool(ctx.cfg.synth_probability) {
                continue;
            }
            labels.synthetic[pair.target] = true;
            labels.candidates[pair.target] = Some(identities[pair.candidate]);
            replacements.push(Replacement {
                target: pair.target,
                candidate: pair.candidate,
                candidate_mask: masks[pair.candidate].binary.clone(),
            });
        }
    }
    let t = backbone.seq_len();
    let tokens = spt::recombine_graph(g, tokens, indices.len(), t, &replacements);
    Ok(BuiltBatch {
        tokens,
        labels,
        replacements,
    })
}

struct StepResult {
    total: Var,
    record: LossRecord,
}

fn value(g: &Graph, v: Var) -> f64 {
    g.scalar_value(v)
}

fn sps_step(
    g: &mut Graph,
    p: &Bindings,
    backbone: &Backbone,
    batch: &BuiltBatch,
    cfg: &Config,
) -> Result<StepResult> {
    let n = batch.labels.len();
    let t = backbone.seq_len();
    let first = backbone.encode(g, p, batch.tokens, n)?;
    let soft = spt::saliency_graph(g, p, backbone, &first, n);
    let filtered = spt::filter_tokens_graph(g, batch.tokens, soft, n, t);
    let second = backbone.encode(g, p, filtered, n)?;
    let id = losses::linear_id_graph(
        g,
        second.projected,
        p.get(CLASSIFIER_WEIGHT),
        p.get(CLASSIFIER_BIAS),
        &batch.labels,
    )?;
    let tri = losses::triplet_graph(
        g,
        second.projected,
        &batch.labels,
        cfg.losses.triplet_margin,
    )?;
    let budget = losses::budget_graph(g, soft, cfg.losses.budget_target, cfg.losses.budget_abs);
    let total = losses::stage2_graph(g, id, tri, budget);
    let record = LossRecord {
        stage: "sps".into(),
        id_p: Some(value(g, id)),
        tri: Some(value(g, tri)),
        budget: Some(value(g, budget)),
        total: value(g, total),
        ..Default::default()
    };
    Ok(StepResult { total, record })
}

fn dpm_step(
    g: &mut Graph,
    p: &Bindings,
    backbone: &Backbone,
    generator: Option<&MaskGenerator>,
    batch: &BuiltBatch,
    cfg: &Config,
) -> Result<StepResult> {
    let n = batch.labels.len();
    let out = backbone.encode(g, p, batch.tokens, n)?;
    let f = out.projected;
    let id_c = if cfg.dpm.coarse_anchoring {
        Some(losses::coarse_id_graph(
            g,
            f,
            p.get(prototype::COARSE),
            &batch.labels,
        )?)
    } else {
        None
    };
    let learnable = p.get(prototype::LEARNABLE);
    let id_p = losses::proto_id_graph(g, f, learnable, &batch.labels)?;
    let id_m = match generator {
        Some(gen) => {
            let masks = gen.generate_graph(g, p, &out.layers, n, backbone.seq_len());
            Some(losses::masked_id_graph(
                g,
                f,
                learnable,
                masks,
                &batch.labels,
                &cfg.losses,
            )?)
        }
        None => None,
    };
    let tri = losses::triplet_graph(g, f, &batch.labels, cfg.losses.triplet_margin)?;
    let hem = losses::hem_batch_graph(g, &out.attention)?;
    let zero = g.scalar(0.0);
    let parts = Stage3Vars {
        id_c: id_c.unwrap_or(zero),
        id_p,
        id_m,
        tri,
        hem: Some(hem),
    };
    let total = losses::stage3_graph(g, &parts, &cfg.losses);
    let record = LossRecord {
        stage: "dpm".into(),
        id_c: id_c.map(|v| value(g, v)),
        id_p: Some(value(g, id_p)),
        id_m: id_m.map(|v| value(g, v)),
        tri: Some(value(g, tri)),
        hem: Some(value(g, hem)),
        total: value(g, total),
        ..Default::default()
    };
    Ok(StepResult { total, record })
}

fn run_gradient_stage(
    plan: &StagePlan,
    mut state: ModelState,
    data: &TrainSet,
    cfg: &Config,
    opts: &RunOptions,
) -> Result<StageOutcome> {
    init_stage_params(plan.stage, &mut state, cfg)?;
    let backbone = Backbone::new(cfg.backbone.clone(), Backbone::DEFAULT_PREFIX)?;
    let generator = match plan.stage {
        Stage::Dpm if cfg.dpm.mask_branch => Some(MaskGenerator::new(&cfg.hmg, &cfg.backbone)?),
        _ => None,
    };
    let sampler = PkSampler::from_config(cfg);
    let mut optimizer = plan.optimizer();
    let mut metrics = Metrics::open(opts, plan.stage)?;
    let mut rng = stream_rng(cfg.seed, &format!("batches/{}", plan.stage));
    // The saliency snapshot is read-only for the whole stage.
    let sps_snapshot = (plan.stage == Stage::Dpm && cfg.spt.enabled).then(|| state.params.clone());
    let spt_ctx = sps_snapshot
        .as_ref()
        .map(|s| SptContext::new(cfg, s))
        .transpose()?;
    let main_lr = plan
        .groups
        .last()
        .map(|g| g.optim.clone())
        .expect("stage has an optimizer group");

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let batches = sampler.epoch_batches(data, epoch)?;
        if batches.is_empty() {
            return Err(Error::Sampling("the sampler produced no batch".into()));
        }
        let mut sum = 0.0;
        let mut synthetic = 0;
        for indices in &batches {
            let mut g = Graph::new();
            let p = state.params.bind(&mut g, |n| plan.is_trainable(n));
            let batch = build_batch(
                &mut g,
                &p,
                &backbone,
                data,
                indices,
                cfg,
                spt_ctx.as_ref(),
                &mut rng,
            )?;
            synthetic += batch.replacements.len();
            let result = match plan.stage {
                Stage::Sps => sps_step(&mut g, &p, &backbone, &batch, cfg),
                _ => dpm_step(&mut g, &p, &backbone, generator.as_ref(), &batch, cfg),
            };
            let result = match result {
                Err(e) if e.is_numeric() => {
                    return Err(nan_abort(opts, plan.stage, step, indices, None))
                }
                other => other?,
            };
            if !result.record.total.is_finite() {
                return Err(nan_abort(
                    opts,
                    plan.stage,
                    step,
                    indices,
                    Some(&result.record),
                ));
            }
            let grads = g.backward(result.total);
            let grads = p.gradients(&grads);
            if grads.values().any(|m| m.iter().any(|v| !v.is_finite())) {
                return Err(nan_abort(
                    opts,
                    plan.stage,
                    step,
                    indices,
                    Some(&result.record),
                ));
            }
            optimizer.step(&mut state.params, &grads, epoch);
            let mut rec = result.record;
            rec.epoch = epoch;
            rec.step = step;
            sum += rec.total;
            Metrics::write(&mut metrics.steps, &rec)?;
            steps.push(rec);
            step += 1;
        }
        let er = EpochRecord {
            stage: plan.stage.as_str().into(),
            epoch,
            steps: batches.len(),
            mean_total: sum / batches.len() as f64,
            lr: main_lr.lr * main_lr.schedule.factor(epoch),
            synthetic,
        };
        log::info!(
            "{} epoch {epoch}: mean loss {:.4}, {synthetic} synthesized",
            plan.stage,
            er.mean_total
        );
        Metrics::write(&mut metrics.epochs, &er)?;
        epochs.push(er);
        if plan.stage == Stage::Dpm
            && cfg.dpm.milestones.contains(&(epoch + 1))
            && epoch + 1 < plan.epochs
        {
            save_checkpoint(
                &state,
                opts,
                &format!("{}_epoch{}.ckpt", plan.stage, epoch + 1),
            )?;
        }
    }
    if plan.stage == Stage::Sps {
        state.params.remove_prefix("sps.classifier");
        state.params.remove_prefix(spt::SPS_BACKBONE_PREFIX);
        state
            .params
            .copy_prefix(Backbone::DEFAULT_PREFIX, spt::SPS_BACKBONE_PREFIX);
    }
    state.completed.insert(plan.stage);
    save_checkpoint(&state, opts, &format!("{}.ckpt", plan.stage))?;
    Ok(StageOutcome {
        state,
        steps,
        epochs,
    })
}

fn nan_abort(
    opts: &RunOptions,
    stage: Stage,
    step: usize,
    indices: &[usize],
    record: Option<&LossRecord>,
) -> Error {
    if let Some(dir) = &opts.out_dir {
        let dump =
            serde_json::json!({ "stage": stage, "step": step, "batch": indices, "losses": record });
        let path = dir.join(format!("{stage}_nonfinite_step{step}.json"));
        if let Err(e) = std::fs::write(&path, dump.to_string()) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
    Error::NonFiniteLoss {
        step,
        batch: indices.to_vec(),
    }
}

/// Runs prompt → sps → dpm (the prompt stage only when coarse anchoring is on).
pub fn run_pipeline(cfg: &Config, data: &TrainSet, opts: &RunOptions) -> Result<ModelState> {
    let mut state = ModelState::new(cfg, data.num_identities)?;
    let mut stages = vec![Stage::Sps, Stage::Dpm];
    if cfg.dpm.coarse_anchoring {
        stages.insert(0, Stage::Prompt);
    }
    for stage in stages {
        state = run_stage(&StagePlan::new(stage, cfg), state, data, cfg, opts)?.state;
    }
    Ok(state)
}
