//! `lfsl` command-line driver.
//!
//! Every command writes under `--out`: its artifacts, the fully resolved
//! configuration (`config.resolved.toml`) and `manifest.json` with the
//! SHA-256 of every artifact. All randomness comes from `--seed`.

pub mod config;
mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lfsl_core::eval::{detect, evaluate, EvalReport};
use lfsl_core::ingest::{build_episode, class_statistics, load_annotation_tables, EpisodeSpec, REQUIRED_TABLES};
use lfsl_core::loss::{grad_check, LossKind};
use lfsl_core::model::checkpoint::{self, group_hash};
use lfsl_core::model::{grad_check_model, init_model, ClsLossKind, Group, Model};
use lfsl_core::synthgen::{generate_dataset, read_dataset, write_dataset, Dataset};
use lfsl_core::train::{run_stage, StageData, TrainConfig, TrainLog};

pub use config::ExperimentConfig;
pub use manifest::Manifest;

/// Gradient checks pass below this relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "lfsl", version, about = "Few-shot 3D detection laboratory")]
struct Cli {
    /// Experiment configuration (TOML); unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LossArg {
    Focal,
    Sab,
}

#[derive(clap::Args, Debug, Default)]
struct DataArgs {
    /// Dataset directory written by `gen`; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Default)]
struct FinetuneArgs {
    /// Stage-1 checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Episode manifest from `split`; drawn from the dataset when absent.
    #[arg(long)]
    episode: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    loss: Option<LossArg>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    split_strategy: Option<u8>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic long-tail dataset.
    Gen,
    /// Class statistics (and optionally an episode) from nuScenes-schema metadata.
    Ingest {
        /// Directory holding the metadata tables.
        input: PathBuf,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Draw an N-way K-shot episode.
    Split {
        /// Dataset directory or metadata directory; generated dataset when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Stage-1 training on the base classes.
    TrainBase {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Stage-2 few-shot fine-tuning.
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ft: FinetuneArgs,
        #[arg(long, value_parser = clap::value_parser!(u8).range(2..=9))]
        setting: Option<u8>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every loss and the model.
    Gradcheck {
        /// Seeds per check.
        #[arg(long, default_value_t = 50)]
        seeds: u64,
    },
    /// Fine-tune and evaluate for each configured θ.
    SweepTheta {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ft: FinetuneArgs,
    },
    /// Baseline plus every fine-tuning setting.
    SettingsMatrix {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        ft: FinetuneArgs,
    },
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Runs one command. Returns 0 on success, 2 on usage errors (bad flags,
/// missing inputs, invalid configuration) and 1 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn require_input(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("input `{}` does not exist", path.display())))
    }
}

fn configure_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("LFSL_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("LFSL_THREADS must be a positive integer, got `{v}`")))?;
        // a pool may already exist when run() is called repeatedly in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Ctx {
    fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
        Ok(path)
    }

    fn dataset(&self, data: &DataArgs) -> Result<Dataset> {
        match &data.data {
            Some(dir) => Ok(read_dataset(dir)?),
            None => Ok(generate_dataset(&self.cfg.world)?),
        }
    }

    fn finish(mut self) -> Result<()> {
        self.write("config.resolved.toml", self.cfg.to_toml()?)?;
        self.manifest.collect(&self.out)?;
        let text = self.manifest.to_json();
        self.write("manifest.json", text)?;
        Ok(())
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let out = cli.out.clone().ok_or_else(|| usage("--out DIR is required"))?;
    let mut cfg = match &cli.config {
        Some(p) => {
            require_input(p)?;
            ExperimentConfig::load(p).map_err(|e| usage(format!("{e:#}")))?
        }
        None => ExperimentConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    apply_overrides(&mut cfg, &cli.command)?;
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e:#}")))?;
    if let Command::Finetune { ft: FinetuneArgs { checkpoint: None, .. }, .. } = &cli.command {
        return Err(usage("fine-tuning needs a stage-1 checkpoint (--checkpoint PATH)"));
    }
    for p in input_paths(&cli.command) {
        require_input(p)?;
    }
    fs::create_dir_all(&out).map_err(|e| Failure::Runtime(anyhow!("creating {}: {e}", out.display())))?;
    log::info!("{} with seed {seed} into {}", command_name(&cli.command), out.display());
    let mut ctx = Ctx {
        cfg,
        out,
        manifest: Manifest::new(command_name(&cli.command), seed),
    };
    match &cli.command {
        Command::Gen => cmd_gen(&mut ctx)?,
        Command::Ingest { input, k } => cmd_ingest(&mut ctx, input, *k)?,
        Command::Split { data, .. } => cmd_split(&mut ctx, data.as_deref())?,
        Command::TrainBase { data } => cmd_train_base(&mut ctx, data)?,
        Command::Finetune { data, ft, .. } => cmd_finetune(&mut ctx, data, ft)?,
        Command::Eval { data, checkpoint } => cmd_eval(&mut ctx, data, checkpoint)?,
        Command::Gradcheck { seeds } => cmd_gradcheck(&mut ctx, *seeds)?,
        Command::SweepTheta { data, ft } => cmd_sweep_theta(&mut ctx, data, ft)?,
        Command::SettingsMatrix { data, ft } => cmd_settings_matrix(&mut ctx, data, ft)?,
    }
    ctx.finish()?;
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Gen => "gen",
        Command::Ingest { .. } => "ingest",
        Command::Split { .. } => "split",
        Command::TrainBase { .. } => "train-base",
        Command::Finetune { .. } => "finetune",
        Command::Eval { .. } => "eval",
        Command::Gradcheck { .. } => "gradcheck",
        Command::SweepTheta { .. } => "sweep-theta",
        Command::SettingsMatrix { .. } => "settings-matrix",
    }
}

fn input_paths(c: &Command) -> Vec<&Path> {
    let mut v: Vec<&Path> = Vec::new();
    let data = match c {
        Command::Ingest { input, .. } => Some(input.as_path()),
        Command::Split { data, .. } => data.as_deref(),
        Command::TrainBase { data } => data.data.as_deref(),
        Command::Finetune { data, ft, .. } | Command::SweepTheta { data, ft } | Command::SettingsMatrix { data, ft } => {
            v.extend(ft.checkpoint.as_deref());
            v.extend(ft.episode.as_deref());
            data.data.as_deref()
        }
        Command::Eval { data, checkpoint } => {
            v.push(checkpoint);
            data.data.as_deref()
        }
        Command::Gen | Command::Gradcheck { .. } => None,
    };
    v.extend(data);
    v
}

/// Folds command-line flags into the configuration so that the resolved
/// config alone reproduces the run.
fn apply_overrides(cfg: &mut ExperimentConfig, c: &Command) -> Result<(), Failure> {
    let ft_args = match c {
        Command::Finetune { ft, setting, .. } => {
            if let Some(s) = setting {
                cfg.finetune.setting = *s;
            }
            Some(ft)
        }
        Command::SweepTheta { ft, .. } | Command::SettingsMatrix { ft, .. } => Some(ft),
        Command::Ingest { k: Some(k), .. } | Command::Split { k: Some(k), .. } => {
            cfg.episode.k = *k;
            None
        }
        _ => None,
    };
    if let Some(ft) = ft_args {
        if let Some(k) = ft.k {
            cfg.episode.k = k;
        }
        if let Some(l) = ft.loss {
            cfg.finetune.loss = match l {
                LossArg::Focal => ClsLossKind::Focal,
                LossArg::Sab => ClsLossKind::Sab,
            };
        }
        if let Some(t) = ft.theta {
            if !(t > 0.0 && t < 1.0) {
                return Err(usage(format!("--theta must lie in (0, 1), got {t}")));
            }
            cfg.finetune.sab.theta = t;
        }
        if let Some(s) = ft.split_strategy {
            cfg.split_strategy = s;
        }
    }
    Ok(())
}

fn cmd_gen(ctx: &mut Ctx) -> Result<()> {
    let d = generate_dataset(&ctx.cfg.world)?;
    write_dataset(&d, &ctx.out.join("dataset"))?;
    Ok(())
}

fn cmd_ingest(ctx: &mut Ctx, input: &Path, k: Option<usize>) -> Result<()> {
    let db = load_annotation_tables(input)?;
    let csv = class_statistics(&db).to_csv();
    print!("{csv}");
    ctx.write("class_stats.csv", &csv)?;
    if k.is_some() {
        let novel = novel_ids_by_name(&db);
        let ep = build_episode(&db, &novel, ctx.cfg.episode.k, ctx.cfg.seed)?;
        ctx.write("episode.json", ep.to_json()?)?;
    }
    Ok(())
}

fn novel_ids_by_name(db: &lfsl_core::ingest::AnnotationDB) -> Vec<lfsl_core::ClassId> {
    lfsl_core::ingest::fixture::NOVEL_CLASSES
        .iter()
        .filter_map(|n| db.class_id(n))
        .collect()
}

fn is_metadata_dir(dir: &Path) -> bool {
    REQUIRED_TABLES.iter().all(|t| dir.join(t).exists())
}

fn cmd_split(ctx: &mut Ctx, data: Option<&Path>) -> Result<()> {
    let k = ctx.cfg.episode.k;
    let ep = match data {
        Some(dir) if is_metadata_dir(dir) => {
            let db = load_annotation_tables(dir)?;
            build_episode(&db, &novel_ids_by_name(&db), k, ctx.cfg.seed)?
        }
        _ => {
            let d = ctx.dataset(&DataArgs { data: data.map(Path::to_path_buf) })?;
            build_episode(&d, &d.class_table.novel_ids(), k, ctx.cfg.seed)?
        }
    };
    ctx.write("episode.json", ep.to_json()?)?;
    Ok(())
}

fn train_base(cfg: &ExperimentConfig, d: &Dataset) -> Result<(Model, TrainLog)> {
    let m = init_model(&cfg.arch, cfg.seed)?;
    Ok(run_stage(Some(&m), StageData::Base(d), &cfg.base)?)
}

fn cmd_train_base(ctx: &mut Ctx, data: &DataArgs) -> Result<()> {
    let d = ctx.dataset(data)?;
    let (m, log) = train_base(&ctx.cfg, &d)?;
    ctx.write("base.lfsm", checkpoint::to_bytes(&m))?;
    ctx.write("train_log.jsonl", log.to_jsonl())?;
    ctx.manifest.group_hashes = group_hashes(&m);
    Ok(())
}

fn group_hashes(m: &Model) -> BTreeMap<String, String> {
    Group::ALL.iter().map(|&g| (format!("{g:?}"), group_hash(m, g))).collect()
}

/// Base model: the given checkpoint, or stage-1 training from the config.
fn base_model(ctx: &mut Ctx, ft: &FinetuneArgs, d: &Dataset) -> Result<Model> {
    match &ft.checkpoint {
        Some(p) => Ok(checkpoint::load(p)?),
        None => {
            let (m, log) = train_base(&ctx.cfg, d)?;
            ctx.write("base.lfsm", checkpoint::to_bytes(&m))?;
            ctx.write("base_train_log.jsonl", log.to_jsonl())?;
            Ok(m)
        }
    }
}

fn episode(ctx: &Ctx, ft: &FinetuneArgs, d: &Dataset) -> Result<EpisodeSpec> {
    match &ft.episode {
        Some(p) => Ok(EpisodeSpec::from_json(&fs::read_to_string(p)?)?),
        None => Ok(build_episode(d, &d.class_table.novel_ids(), ctx.cfg.episode.k, ctx.cfg.seed)?),
    }
}

/// Fine-tunes `base` under `train` with the configured split strategy.
fn finetune(cfg: &ExperimentConfig, base: &Model, d: &Dataset, ep: &EpisodeSpec, train: &TrainConfig) -> Result<(Model, TrainLog)> {
    let mut m = base.clone();
    let policy = config::policy_for(cfg.split_strategy)?;
    if m.arch.novel_policy != policy {
        if !m.novel_classes.is_empty() {
            bail!("checkpoint already has novel heads under a different split strategy");
        }
        m.arch.novel_policy = policy;
    }
    Ok(run_stage(Some(&m), StageData::Finetune { dataset: d, episode: ep }, train)?)
}

fn report(cfg: &ExperimentConfig, m: &Model, d: &Dataset) -> Result<EvalReport> {
    let dets = detect(m, &d.val_frames, &cfg.base.grid, &cfg.eval)?;
    Ok(evaluate(&dets, d, &d.class_table, &cfg.eval)?)
}

fn cmd_finetune(ctx: &mut Ctx, data: &DataArgs, ft: &FinetuneArgs) -> Result<()> {
    let d = ctx.dataset(data)?;
    let base = base_model(ctx, ft, &d)?;
    let ep = episode(ctx, ft, &d)?;
    let (m, log) = finetune(&ctx.cfg, &base, &d, &ep, &ctx.cfg.finetune)?;
    ctx.write("episode.json", ep.to_json()?)?;
    ctx.write("finetuned.lfsm", checkpoint::to_bytes(&m))?;
    ctx.write("train_log.jsonl", log.to_jsonl())?;
    ctx.manifest.group_hashes = group_hashes(&m);
    ctx.manifest.base_group_hashes = group_hashes(&base);
    Ok(())
}

fn cmd_eval(ctx: &mut Ctx, data: &DataArgs, ckpt: &Path) -> Result<()> {
    let d = ctx.dataset(data)?;
    let m = checkpoint::load(ckpt)?;
    let r = report(&ctx.cfg, &m, &d)?;
    ctx.write("report.json", r.to_json())?;
    ctx.write("report.csv", r.to_csv())?;
    ctx.manifest.group_hashes = group_hashes(&m);
    Ok(())
}

fn cmd_gradcheck(ctx: &mut Ctx, seeds: u64) -> Result<()> {
    let mut csv = String::from("check,seed,max_rel_error,skipped\n");
    let mut worst = 0.0f64;
    for s in 0..seeds {
        let seed = ctx.cfg.seed.wrapping_add(s);
        for (name, kind) in [("sab", LossKind::Sab), ("focal", LossKind::Focal), ("regression", LossKind::Regression)] {
            let e = grad_check(kind, seed, 1e-6)?;
            worst = worst.max(e);
            csv += &format!("{name},{seed},{e:e},0\n");
        }
        for (name, kind) in [("model_focal", ClsLossKind::Focal), ("model_sab", ClsLossKind::Sab)] {
            let r = grad_check_model(seed, 1e-4, kind)?;
            worst = worst.max(r.max_rel_error);
            csv += &format!("{name},{seed},{:e},{}\n", r.max_rel_error, r.skipped);
        }
    }
    ctx.write("gradcheck.csv", &csv)?;
    if worst >= GRADCHECK_TOLERANCE {
        bail!("gradient check failed: max relative error {worst:e}");
    }
    println!("gradient checks passed: max relative error {worst:e}");
    Ok(())
}

fn cmd_sweep_theta(ctx: &mut Ctx, data: &DataArgs, ft: &FinetuneArgs) -> Result<()> {
    let d = ctx.dataset(data)?;
    let base = base_model(ctx, ft, &d)?;
    let ep = episode(ctx, ft, &d)?;
    ctx.write("episode.json", ep.to_json()?)?;
    let mut csv = String::from("theta,bmap,nmap\n");
    for &theta in &ctx.cfg.sweep.thetas.clone() {
        let mut train = ctx.cfg.finetune.clone();
        train.setting = ctx.cfg.sweep.setting;
        train.sab.theta = theta;
        let (m, _) = finetune(&ctx.cfg, &base, &d, &ep, &train)?;
        let r = report(&ctx.cfg, &m, &d)?;
        ctx.write(&format!("reports/theta_{theta}.json"), r.to_json())?;
        csv += &format!("{theta},{:.6},{:.6}\n", r.bmap, r.nmap);
    }
    ctx.write("theta_sweep.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

/// Row labels: trainable groups per setting.
pub fn setting_label(setting: u8) -> &'static str {
    match setting {
        1 => "baseline",
        2 => "E+S+B+N",
        3 => "E+S+N",
        4 => "S+B+N",
        5 => "S+N",
        6 => "B+N",
        7 => "N",
        8 => "B+N+SAB",
        9 => "N+SAB",
        _ => "unknown",
    }
}

fn cmd_settings_matrix(ctx: &mut Ctx, data: &DataArgs, ft: &FinetuneArgs) -> Result<()> {
    let d = ctx.dataset(data)?;
    let base = base_model(ctx, ft, &d)?;
    let ep = episode(ctx, ft, &d)?;
    ctx.write("episode.json", ep.to_json()?)?;
    let thresholds = ctx.cfg.eval.thresholds.clone();
    let mut csv = format!("setting,groups,{}\n", EvalReport::csv_header(&thresholds));
    let r = report(&ctx.cfg, &base, &d)?;
    ctx.write("reports/setting_1.json", r.to_json())?;
    csv += &format!("1,{},{}\n", setting_label(1), r.csv_row());
    for &s in &ctx.cfg.sweep.matrix_settings.clone() {
        let mut train = ctx.cfg.finetune.clone();
        train.setting = s;
        let (m, _) = finetune(&ctx.cfg, &base, &d, &ep, &train)?;
        let r = report(&ctx.cfg, &m, &d)?;
        ctx.write(&format!("reports/setting_{s}.json"), r.to_json())?;
        csv += &format!("{s},{},{}\n", setting_label(s), r.csv_row());
    }
    ctx.write("settings.csv", &csv)?;
    print!("{csv}");
    Ok(())
}
