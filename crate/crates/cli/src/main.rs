use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fewshot_core::episodes::{save_feature_set, SplitPart};
use fewshot_core::harness::{
    config_warnings, embed_feature_set, episode_stream, evaluate, export_trajectories, fingerprint, run_ablation,
    run_episode, write_ablation_csv, AblationInput, EvalOptions, RunConfig,
};
use fewshot_core::hct::{save_checkpoint, train, write_loss_curve, MlpModel};
use fewshot_core::numerics::RngStream;

#[derive(Parser)]
#[command(name = "fewshot", version, about = "Few-shot embedding training and episodic evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of evaluation episodes; overrides the config.
    #[arg(long)]
    episodes: Option<usize>,
    /// Worker threads for episode evaluation; overrides the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Output file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an embedding network on the base classes and write a checkpoint.
    Train(Common),
    /// Run a checkpoint over the dataset and write the embeddings as FSLE.
    Embed(Common),
    /// Evaluate one calibration and inference configuration; prints an EvalReport.
    Eval(Common),
    /// Run the ablation grid and write one CSV row per cell.
    Ablate(Common),
    /// Run one episode and write its prototype trajectories as CSV.
    ExportTraj {
        #[command(flatten)]
        common: Common,
        /// Episode index under the master seed.
        #[arg(long, default_value_t = 0)]
        episode: usize,
    },
}

/// Marks failures that come from the configuration rather than from running it.
#[derive(Debug)]
struct ConfigFailure(String);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigFailure {}

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigFailure(msg.into()))
}

fn core(e: fewshot_core::Error) -> anyhow::Error {
    if e.is_config_error() {
        config_error(e.to_string())
    } else {
        anyhow::Error::new(e)
    }
}

struct Ctx {
    cfg: RunConfig,
    base_dir: PathBuf,
    out: Option<PathBuf>,
}

impl Ctx {
    fn load(common: &Common) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(&common.config)
            .map_err(|e| config_error(format!("cannot read {}: {e}", common.config.display())))?;
        let mut cfg = RunConfig::from_json(&text).map_err(|e| config_error(format!("{}: {e}", common.config.display())))?;
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(n) = common.episodes {
            cfg.episodes = n;
        }
        if let Some(w) = common.workers {
            cfg.workers = w;
        }
        cfg.validate().map_err(core)?;
        let base_dir = common
            .config
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        Ok(Self {
            cfg,
            base_dir,
            out: common.out.clone(),
        })
    }

    fn options(&self) -> EvalOptions {
        EvalOptions {
            n_episodes: self.cfg.episodes,
            seed: self.cfg.seed,
            workers: self.cfg.workers,
            keep_per_episode: false,
        }
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }

    fn dataset(&self) -> anyhow::Result<fewshot_core::episodes::FeatureSet> {
        self.cfg.dataset.load(&self.base_dir).map_err(core).context("loading the dataset")
    }

    fn model(&self) -> anyhow::Result<Option<MlpModel>> {
        self.cfg
            .load_model(&self.base_dir)
            .map_err(core)
            .context("loading the model checkpoint")
    }

    /// Evaluation features: the novel part, embedded when a checkpoint is configured.
    fn eval_features(&self) -> anyhow::Result<fewshot_core::episodes::FeatureSet> {
        let set = self.dataset()?;
        let novel = self.cfg.dataset_part(&set, SplitPart::Novel).map_err(core)?;
        match self.model()? {
            Some(m) => embed_feature_set(&m, &novel).map_err(core),
            None => Ok(novel),
        }
    }
}

fn write_stdout_or_file(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(ctx: &Ctx) -> anyhow::Result<()> {
    let tc = ctx
        .cfg
        .training
        .clone()
        .ok_or_else(|| config_error("train needs a \"training\" block"))?;
    let set = ctx.dataset()?;
    let base = ctx.cfg.dataset_part(&set, SplitPart::Base).map_err(core)?;
    let shape = ctx.cfg.model_shape(base.dim(), base.num_classes());
    let init = ctx.cfg.model.as_ref().map(|m| m.init_seed).unwrap_or(0);
    let model = MlpModel::new(&shape, RngStream::new(init)).map_err(core)?;
    let outcome = train(model, &base, &tc, RngStream::new(ctx.cfg.seed)).map_err(core)?;
    let out = ctx.out_or("model.fslm");
    let fp = fingerprint(&(&tc, &shape, ctx.cfg.seed)).map_err(core)?;
    save_checkpoint(&outcome.model, &fp, &out).map_err(core)?;
    let curve_path = out.with_extension("loss.csv");
    let file = File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?;
    write_loss_curve(&outcome.curve, BufWriter::new(file)).map_err(core)?;
    let last = outcome.curve.last().expect("at least one epoch");
    eprintln!(
        "trained {} epochs; final loss_ce {:.4} loss_hct {:.4} loss_rot {:.4}; wrote {} and {}",
        outcome.curve.len(),
        last.loss_ce,
        last.loss_hct,
        last.loss_rot,
        out.display(),
        curve_path.display()
    );
    Ok(())
}

fn cmd_embed(ctx: &Ctx) -> anyhow::Result<()> {
    let model = ctx
        .model()?
        .ok_or_else(|| config_error("embed needs \"model\": {\"path\": ...}"))?;
    let set = ctx.dataset()?;
    let embedded = embed_feature_set(&model, &set).map_err(core)?;
    let out = ctx.out_or("embeddings.fsle");
    save_feature_set(&embedded, &out).map_err(core)?;
    eprintln!("wrote {} rows of dim {} to {}", embedded.len(), embedded.dim(), out.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> anyhow::Result<()> {
    let set = ctx.eval_features()?;
    for w in config_warnings(&ctx.cfg.episode, &ctx.cfg.calibration) {
        eprintln!("warning: {w}");
    }
    let report = evaluate(&set, &ctx.cfg.episode, &ctx.cfg.calibration, &ctx.cfg.inference, &ctx.options())
        .map_err(core)?;
    eprintln!(
        "{}: {:.2}% +- {:.2}% over {} episodes ({:.2}s)",
        report.strategy,
        100.0 * report.mean_accuracy,
        100.0 * report.ci95_halfwidth,
        report.n_episodes,
        report.wall_time_secs
    );
    let json = serde_json::to_string_pretty(&report)?;
    write_stdout_or_file(ctx.out.as_deref(), &json)
}

fn cmd_ablate(ctx: &Ctx) -> anyhow::Result<()> {
    let grid = ctx
        .cfg
        .ablation
        .clone()
        .ok_or_else(|| config_error("ablate needs an \"ablation\" block"))?;
    let set = ctx.dataset()?;
    let cells = if grid.train_variants.is_empty() {
        let features = ctx.eval_features()?;
        run_ablation(&grid, &AblationInput::Features(&features), &ctx.options())
    } else {
        let base = ctx.cfg.dataset_part(&set, SplitPart::Base).map_err(core)?;
        let novel = ctx.cfg.dataset_part(&set, SplitPart::Novel).map_err(core)?;
        let shape = ctx.cfg.model_shape(base.dim(), base.num_classes());
        run_ablation(
            &grid,
            &AblationInput::Train {
                base: &base,
                novel: &novel,
                shape: &shape,
            },
            &ctx.options(),
        )
    }
    .map_err(core)?;
    let out = ctx.out_or("ablation.csv");
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    write_ablation_csv(&cells, BufWriter::new(file)).map_err(core)?;
    let reports = out.with_extension("reports.json");
    std::fs::write(&reports, serde_json::to_string_pretty(&cells)?)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    for c in &cells {
        match (&c.report, &c.error) {
            (Some(r), _) => eprintln!(
                "{:<8} alpha={:<4} {:<8} k={} m={:<3} {:.2}% +- {:.2}%",
                c.train,
                c.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
                c.method,
                c.k_shot,
                c.m_unlabeled,
                100.0 * r.mean_accuracy,
                100.0 * r.ci95_halfwidth
            ),
            (None, Some(e)) => eprintln!("{:<8} {:<8} k={} m={:<3} failed: {e}", c.train, c.method, c.k_shot, c.m_unlabeled),
            (None, None) => {}
        }
    }
    eprintln!("wrote {} cells ({failed} failed) to {} and {}", cells.len(), out.display(), reports.display());
    Ok(())
}

fn cmd_export_traj(ctx: &Ctx, index: usize) -> anyhow::Result<()> {
    let set = ctx.eval_features()?;
    let mut inference = ctx.cfg.inference.clone();
    inference.keep_history = true;
    let run = run_episode(
        &set,
        &ctx.cfg.episode,
        &ctx.cfg.calibration,
        &inference,
        episode_stream(ctx.cfg.seed, index),
    )
    .map_err(core)?;
    let out = ctx.out_or("trajectories.csv");
    let mut w = BufWriter::new(File::create(&out).with_context(|| format!("creating {}", out.display()))?);
    export_trajectories(&run.episode, &run.calibrated, &run.prototypes, &mut w).map_err(core)?;
    w.flush()?;
    eprintln!(
        "episode {index}: accuracy {:.2}%, {} iterations; wrote {}",
        100.0 * run.accuracy,
        run.prototypes.history.len().saturating_sub(1),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Train(c) => cmd_train(&Ctx::load(c)?),
        Command::Embed(c) => cmd_embed(&Ctx::load(c)?),
        Command::Eval(c) => cmd_eval(&Ctx::load(c)?),
        Command::Ablate(c) => cmd_ablate(&Ctx::load(c)?),
        Command::ExportTraj { common, episode } => cmd_export_traj(&Ctx::load(common)?, *episode),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let is_config = e.downcast_ref::<ConfigFailure>().is_some();
            eprintln!("error: {e:#}");
            if is_config {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
