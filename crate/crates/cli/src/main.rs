use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dpmkit::data::manifest::{ingest_folder, load_split, Manifest, Sample, Split, MANIFEST_FILE};
use dpmkit::data::synthetic::{generate_synthetic, SyntheticSpec};
use dpmkit::evaluator::{self, Embedded};
use dpmkit::trainer::{
    check_prerequisites, run_stage, ModelState, RunOptions, SptContext, Stage, StagePlan, TrainSet,
};
use dpmkit::{spt, Config, Error};

/// Exit codes: 0 ok, 1 invalid config or data, 2 I/O or usage, 3 staging, 4 numeric.
#[derive(Parser)]
#[command(
    name = "dpmkit",
    version,
    about = "Occluded person re-identification with masked prototype matching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData {
        /// Generator spec (TOML, or JSON when the extension is .json).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write its checkpoint and logs.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint from an earlier stage.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Replace embeddings by one-hot identity vectors (sanity check of the metric path).
        #[arg(long, hide = true)]
        debug_oracle_features: bool,
    },
    /// Write composited occluded training samples chosen by the saliency stage.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint that has completed the sps stage.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Build a manifest for a folder laid out as train/query/gallery.
    Ingest {
        #[arg(long)]
        root: PathBuf,
    },
    /// Print a config in TOML.
    Config {
        /// Desk-scale settings instead of the defaults.
        #[arg(long)]
        toy: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return 2;
    };
    match e {
        Error::Io { .. } | Error::Image { .. } => 2,
        Error::Staging(_) => 3,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } => 4,
        _ => 1,
    }
}

/// Context chain down to the first core error, whose message already names its cause.
fn describe(err: &anyhow::Error) -> String {
    let mut parts = Vec::new();
    for cause in err.chain() {
        parts.push(cause.to_string());
        if cause.is::<Error>() {
            break;
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train {
            stage,
            config,
            resume,
        } => train(stage, &config, resume.as_deref()),
        Command::Eval {
            config,
            ckpt,
            report,
            debug_oracle_features,
        } => eval(&config, &ckpt, &report, debug_oracle_features),
        Command::Synthesize {
            config,
            ckpt,
            out,
            count,
        } => synthesize(&config, &ckpt, &out, count),
        Command::Ingest { root } => {
            let m = ingest_folder(&root)?;
            let path = root.join(MANIFEST_FILE);
            m.write(&path)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Config { toy } => {
            let cfg = if toy {
                Config::toy()
            } else {
                Config::default()
            };
            print!("{}", cfg.to_flat_string());
            Ok(())
        }
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> anyhow::Result<()> {
    let text = std::fs::read_to_string(spec_path).map_err(|e| Error::Io {
        path: spec_path.into(),
        source: e,
    })?;
    let spec: SyntheticSpec = if spec_path.extension().is_some_and(|x| x == "json") {
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec_path.display())))?
    };
    generate_synthetic(&spec, out)?;
    println!("{}", out.join(MANIFEST_FILE).display());
    Ok(())
}

/// Config plus paths resolved against the config file's directory.
struct Loaded {
    cfg: Config,
    manifest: Manifest,
    out_dir: PathBuf,
}

fn load(config: &Path) -> anyhow::Result<Loaded> {
    let cfg = Config::load(config)?;
    let base = config.parent().unwrap_or(Path::new(""));
    let manifest_path = base.join(&cfg.data.manifest);
    let manifest = Manifest::load(&manifest_path)
        .with_context(|| format!("loading {}", manifest_path.display()))?;
    let out_dir = base.join(&cfg.train.out_dir);
    Ok(Loaded {
        cfg,
        manifest,
        out_dir,
    })
}

fn split(l: &Loaded, s: Split) -> anyhow::Result<Vec<Sample>> {
    Ok(load_split(
        &l.manifest,
        s,
        l.cfg.backbone.image_height,
        l.cfg.backbone.image_width,
    )?)
}

fn train(stage: Stage, config: &Path, resume: Option<&Path>) -> anyhow::Result<()> {
    let l = load(config)?;
    let data = TrainSet::new(split(&l, Split::Train)?)?;
    let state = match resume {
        Some(p) => ModelState::load(p)?,
        None => ModelState::new(&l.cfg, data.num_identities)?,
    };
    check_prerequisites(stage, &state, &l.cfg)?;
    let opts = RunOptions {
        out_dir: Some(l.out_dir.clone()),
    };
    let outcome = run_stage(&StagePlan::new(stage, &l.cfg), state, &data, &l.cfg, &opts)?;
    if let Some(last) = outcome.epochs.last() {
        log::info!(
            "{stage}: {} epochs, final mean loss {:.4}",
            outcome.epochs.len(),
            last.mean_total
        );
    }
    println!("{}", l.out_dir.join(format!("{stage}.ckpt")).display());
    Ok(())
}

fn oracle_embedding(samples: &[Sample], dim: usize) -> Embedded {
    let mut features = ndarray::Array2::zeros((samples.len(), dim));
    for (i, s) in samples.iter().enumerate() {
        features[[i, s.identity]] = 1.0;
    }
    Embedded {
        features,
        identities: samples.iter().map(|s| s.identity).collect(),
        cameras: samples.iter().map(|s| s.camera).collect(),
    }
}

fn eval(config: &Path, ckpt: &Path, report_path: &Path, oracle: bool) -> anyhow::Result<()> {
    let l = load(config)?;
    let state = ModelState::load(ckpt)?;
    let query = split(&l, Split::Query)?;
    let gallery = split(&l, Split::Gallery)?;
    let report = if oracle {
        let dim = query
            .iter()
            .chain(&gallery)
            .map(|s| s.identity + 1)
            .max()
            .unwrap_or(1);
        evaluator::evaluate(
            &oracle_embedding(&query, dim),
            &oracle_embedding(&gallery, dim),
            &l.cfg.eval,
        )?
    } else {
        evaluator::evaluate_model(&l.cfg, &state.params, &query, &gallery)?
    };
    evaluator::write_report(&report, report_path)?;
    let backbone = dpmkit::backbone::Backbone::new(
        l.cfg.backbone.clone(),
        dpmkit::backbone::Backbone::DEFAULT_PREFIX,
    )?;
    let probes: Vec<_> = query.iter().map(|s| (&s.image, s.camera)).collect();
    let corr =
        evaluator::head_correlation(&backbone, &state.params, &probes, l.cfg.eval.batch_size)?;
    let heads = evaluator::sibling(report_path, "heads.csv");
    std::fs::write(&heads, evaluator::matrix_csv(&corr)).map_err(|e| Error::Io {
        path: heads.clone(),
        source: e,
    })?;
    println!(
        "mAP {:.4}  rank-1 {:.4}  ({} queries, {} excluded)",
        report.map,
        report.rank1(),
        report.num_queries,
        report.excluded_queries
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct SidecarRow<'a> {
    image: &'a str,
    target_id: usize,
    candidate_id: usize,
    oiou: f64,
    rolled_oiou: f64,
    shift: usize,
}

fn synthesize(config: &Path, ckpt: &Path, out: &Path, count: usize) -> anyhow::Result<()> {
    let l = load(config)?;
    let state = ModelState::load(ckpt)?;
    if !state.is_complete(Stage::Sps) {
        return Err(Error::Staging(format!(
            "{} has not completed the sps stage",
            ckpt.display()
        ))
        .into());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    let sidecar = out.join("synthesized.jsonl");
    let mut lines = String::new();
    if count > 0 {
        let samples = split(&l, Split::Train)?;
        let ctx = SptContext::new(&l.cfg, &state.params)?;
        let mut masks = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(l.cfg.eval.batch_size.max(1)) {
            let batch: Vec<_> = chunk.iter().map(|s| (&s.image, s.camera)).collect();
            masks.extend(ctx.masks(&batch)?);
        }
        let ids: Vec<usize> = samples.iter().map(|s| s.identity).collect();
        let pairs = spt::select_candidates(&masks, &ids, &l.cfg.spt)?;
        if pairs.is_empty() {
            log::warn!("no pair passes the overlap thresholds; nothing synthesized");
        }
        for (n, pair) in pairs.iter().take(count).enumerate() {
            let (t, c) = (&samples[pair.target], &samples[pair.candidate]);
            let img =
                spt::composite_image(&t.image, &c.image, &masks[pair.candidate], &l.cfg.backbone)?;
            let name = format!("synth_{n:05}.png");
            img.save_png(&out.join(&name))?;
            let row = SidecarRow {
                image: &name,
                target_id: t.identity,
                candidate_id: c.identity,
                oiou: pair.oiou,
                rolled_oiou: pair.rolled,
                shift: pair.shift,
            };
            lines.push_str(&serde_json::to_string(&row)?);
            lines.push('\n');
        }
        if pairs.len() < count {
            log::warn!(
                "only {} of {count} requested samples could be synthesized",
                pairs.len()
            );
        }
    }
    std::fs::write(&sidecar, lines).map_err(|e| Error::Io {
        path: sidecar.clone(),
        source: e,
    })?;
    println!("{}", sidecar.display());
    Ok(())
}
