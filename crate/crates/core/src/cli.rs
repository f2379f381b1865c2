//! The `magms` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors. Log
//! verbosity follows `MAGMS_LOG` (`error`, `warn`, `info`, `debug`).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_phantom, read_dataset, write_dataset, PhantomSpec};
use crate::error::{MagError, Result};
use crate::evaluation::{render_markdown, sweep_state, write_report, ReportFormat};
use crate::theory::{
    distillation_tightens_bound, sweep_bound, verify_entropy_bound, ScalarLikelihoodPair,
};
use crate::training::{run_training, Arm, RunOptions, SubsetPredictor, TrainState};
use crate::types::{ExperimentConfig, ModalitySubset};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "magms",
    version,
    about = "Modality-agnostic segmentation toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-modal phantom dataset.
    GenData(GenDataArgs),
    /// Train one arm on a dataset directory.
    Train(TrainArgs),
    /// Evaluate one checkpoint on every non-empty modality subset.
    Sweep(SweepArgs),
    /// Check the entropy bound numerically, optionally comparing two checkpoints.
    VerifyTheory(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    /// Every modality carries partial information about several classes.
    Standard,
    /// Modality k shows only class k + 1.
    Complementary,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of modalities.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u16).range(1..=64))]
    pub modalities: u16,
    /// Edge length of the cubic grid in voxels.
    #[arg(long, default_value_t = 32, value_parser = clap::value_parser!(u16).range(8..=512))]
    pub size: u16,
    #[arg(long, default_value_t = 18, value_parser = clap::value_parser!(u16).range(3..))]
    pub subjects: u16,
    /// Classes including background (standard phantom only).
    #[arg(long, value_parser = clap::value_parser!(u16).range(2..=255))]
    pub classes: Option<u16>,
    #[arg(long, value_enum, default_value_t = PhantomKind::Standard)]
    pub phantom: PhantomKind,
    /// Standard deviation of the additive Gaussian noise.
    #[arg(long)]
    pub noise: Option<f32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[group(id = "overrides", multiple = true)]
pub struct ConfigOverrides {
    /// JSON experiment config used as the base.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda_kl: Option<f64>,
    #[arg(long)]
    pub gamma_l2: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Encoder widths per level, e.g. `8,8,16`.
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// magms, mag, zero_fill, mean_fill or dropout_mean.
    #[arg(long, default_value = "magms")]
    pub arm: String,
    /// Modality dropout probability (dropout_mean only).
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Total optimizer steps to reach.
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from a checkpoint; its stored config and arm are used.
    #[arg(long, conflicts_with_all = ["overrides", "arm", "dropout"])]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated list of csv, md, png.
    #[arg(long, default_value = "csv,md")]
    pub format: String,
    /// Worker threads over test subjects.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Likelihood pairs `p_M:p_S` to check; a fixed set when omitted.
    #[arg(long, value_delimiter = ',')]
    pub pairs: Vec<String>,
    /// Number of random pairs; 100000 when no pairs are given.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint trained with distillation.
    #[arg(long, requires_all = ["without", "data"])]
    pub with: Option<PathBuf>,
    /// Checkpoint trained without distillation.
    #[arg(long, requires = "with")]
    pub without: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Modality subset to compare, e.g. `T1` or `T1,T2`; every single
    /// modality when omitted.
    #[arg(long, value_delimiter = ',', requires = "with")]
    pub subset: Vec<String>,
    /// Report directory for the comparison.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Self-description written into every artifact directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    fn new(command: &str, args: &[String], inputs: Vec<PathBuf>) -> Self {
        Self {
            command: command.to_string(),
            args: args.to_vec(),
            config_hash: None,
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: None,
            inputs,
            outputs: Vec::new(),
        }
    }

    /// Writes `run_manifest.json` in `dir` through a temporary file and rename.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MagError::io(dir, e))?;
        let tmp = dir.join(format!(".{RUN_MANIFEST}.tmp"));
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&tmp, text).map_err(|e| MagError::io(&tmp, e))?;
        let path = dir.join(RUN_MANIFEST);
        fs::rename(&tmp, &path).map_err(|e| MagError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| MagError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = Some(now());
        self.outputs = outputs;
        self.write(dir)
    }
}

fn gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let m = a.modalities as usize;
    let mut spec = match a.phantom {
        PhantomKind::Standard => {
            PhantomSpec::standard(m, a.classes.unwrap_or(4) as usize, a.size as usize, a.seed)
        }
        PhantomKind::Complementary => {
            if a.classes.is_some_and(|c| c as usize != m + 1) {
                return Err(MagError::Usage(format!(
                    "the complementary phantom has {} classes",
                    m + 1
                )));
            }
            PhantomSpec::complementary(m, a.size as usize, a.seed)
        }
    };
    if let Some(noise) = a.noise {
        spec.noise_sigma = noise;
    }
    spec.validate()
        .map_err(|e| MagError::Usage(e.to_string()))?;
    let mut manifest = RunManifest::new("gen-data", argv, Vec::new());
    manifest.seed = Some(a.seed);
    manifest.write(&a.out)?;
    let dataset = generate_phantom(&spec, a.subjects as usize)?;
    write_dataset(&dataset, &a.out)?;
    println!(
        "wrote {} subjects with {} modalities ({:?}) to {}",
        dataset.samples.len(),
        m,
        dataset.modalities.names(),
        a.out.display()
    );
    manifest.finish(&a.out, vec![a.out.join("manifest.json")])
}

fn build_config(
    o: &ConfigOverrides,
    modalities: Vec<String>,
    num_classes: usize,
) -> Result<ExperimentConfig> {
    let mut cfg = match &o.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.modalities = modalities;
    cfg.num_classes = num_classes;
    if let Some(v) = o.lr {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(v) = o.batch_size {
        cfg.optimizer.batch_size = v;
    }
    if let Some(v) = o.seed {
        cfg.optimizer.seed = v;
    }
    if let Some(v) = o.lambda_kl {
        cfg.lambda_kl = v;
    }
    if let Some(v) = o.gamma_l2 {
        cfg.gamma_l2 = v;
    }
    if let Some(v) = o.temperature {
        cfg.kl_temperature = v;
    }
    if let Some(w) = &o.widths {
        cfg.backbone.widths = w.clone();
    }
    cfg.validate().map_err(|e| MagError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn train_cmd(a: &TrainArgs, argv: &[String]) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let mut inputs = vec![a.data.clone()];
    let mut state = match &a.resume {
        Some(path) => {
            inputs.push(path.clone());
            TrainState::load(path)?
        }
        None => {
            let arm = Arm::parse(
                &a.arm,
                a.dropout.unwrap_or(crate::training::DEFAULT_DROPOUT),
            )?;
            if a.dropout.is_some() && !matches!(arm, Arm::DropoutMean { .. }) {
                return Err(MagError::Usage(
                    "--dropout only applies to the dropout_mean arm".into(),
                ));
            }
            let cfg = build_config(
                &a.overrides,
                dataset.modalities.names(),
                dataset.num_classes,
            )?;
            TrainState::new(arm, &cfg)?
        }
    };
    let iterations = a.iterations.unwrap_or(state.config.optimizer.iterations);
    let mut manifest = RunManifest::new("train", argv, inputs);
    manifest.config_hash = Some(state.config.hash());
    manifest.seed = Some(state.seed());
    manifest.write(&a.out)?;
    info!(
        "training arm {} from iteration {} to {}",
        state.arm.name(),
        state.iteration,
        iterations
    );
    let summary = run_training(
        &mut state,
        &dataset,
        &RunOptions {
            out_dir: a.out.clone(),
            iterations,
            checkpoint_every: a.checkpoint_every,
        },
    )?;
    if let Some(last) = &summary.last {
        println!("iteration {} loss {:.6}", state.iteration, last.total);
    }
    println!("checkpoint {}", summary.final_checkpoint.display());
    manifest.finish(
        &a.out,
        vec![
            summary.final_checkpoint,
            summary.log,
            a.out.join("config.json"),
        ],
    )
}

fn sweep_cmd(a: &SweepArgs, argv: &[String]) -> Result<()> {
    let formats = ReportFormat::parse_list(&a.format)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let state = TrainState::from_checkpoint(&ck, &a.checkpoint)?;
    let dataset = read_dataset(&a.data)?;
    let mut manifest = RunManifest::new("sweep", argv, vec![a.checkpoint.clone(), a.data.clone()]);
    manifest.config_hash = Some(ck.config.hash());
    manifest.seed = Some(ck.seed);
    manifest.write(&a.out)?;
    let report = sweep_state(&state, &ck.identity(), &dataset, a.jobs as usize)?;
    let written = write_report(&report, &formats, &a.out)?;
    print!("{}", render_markdown(&report));
    for p in &written {
        println!("wrote {}", p.display());
    }
    manifest.finish(&a.out, written)
}

const DEFAULT_PAIRS: [(f64, f64); 5] = [
    (0.9, 0.6),
    (1.0, 0.5),
    (0.6, 0.3),
    (0.99, 0.98),
    (0.2, 0.01),
];

fn verify_cmd(a: &VerifyArgs, argv: &[String]) -> Result<bool> {
    let pairs: Vec<ScalarLikelihoodPair> = if a.pairs.is_empty() {
        DEFAULT_PAIRS
            .iter()
            .map(|&(m, s)| ScalarLikelihoodPair::new(m, s))
            .collect::<Result<_>>()?
    } else {
        a.pairs.iter().map(|p| p.parse()).collect::<Result<_>>()?
    };
    let samples = match (a.samples, a.pairs.is_empty()) {
        (Some(n), _) => Some(n),
        (None, true) => Some(100_000),
        (None, false) => None,
    };
    let mut ok = true;
    println!(
        "{:>10} {:>10} {:>12} {:>12} {:>12} {:>12} {:>6}",
        "p_M", "p_S", "h_S", "h_M", "d_KL", "bound", "holds"
    );
    for pair in pairs {
        let c = verify_entropy_bound(pair);
        ok &= c.holds;
        println!(
            "{:>10.6} {:>10.6} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>6}",
            c.p_m, c.p_s, c.h_s, c.h_m, c.d_kl, c.bound, c.holds
        );
    }
    if let Some(n) = samples {
        let fraction = sweep_bound(n, a.seed)?;
        println!(
            "fraction holding: {fraction:.6} ({n} samples, seed {})",
            a.seed
        );
        ok &= fraction == 1.0;
    }
    if let (Some(with), Some(without), Some(data)) = (&a.with, &a.without, &a.data) {
        let distilled = TrainState::load(with)?;
        let plain = TrainState::load(without)?;
        let dataset = read_dataset(data)?;
        let dataset = if dataset.modalities.names() == distilled.config.modalities {
            dataset
        } else {
            dataset.restricted_to(distilled.modalities())?
        };
        let set = distilled.modalities().clone();
        let subsets = if a.subset.is_empty() {
            (0..set.len())
                .map(|i| ModalitySubset::new(&set, [i]))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![ModalitySubset::from_names(&set, &a.subset)
                .map_err(|e| MagError::Usage(e.to_string()))?]
        };
        let mut comparisons = Vec::new();
        println!(
            "{:<16} {:>14} {:>14} {:>14} {:>14}",
            "subset", "kl_with", "kl_without", "entropy_with", "entropy_without"
        );
        for s in &subsets {
            let c = distillation_tightens_bound(&distilled, &plain, &dataset, s)?;
            println!(
                "{:<16} {:>14.6} {:>14.6} {:>14.6} {:>14.6}",
                c.subset,
                c.with_distillation.mean_kl,
                c.without_distillation.mean_kl,
                c.with_distillation.mean_entropy,
                c.without_distillation.mean_entropy
            );
            comparisons.push(c);
        }
        if let Some(out) = &a.out {
            let manifest = RunManifest::new(
                "verify-theory",
                argv,
                vec![with.clone(), without.clone(), data.clone()],
            );
            manifest.write(out)?;
            let path = out.join("tightening.json");
            fs::write(&path, serde_json::to_string_pretty(&comparisons)?)
                .map_err(|e| MagError::io(&path, e))?;
            manifest.finish(out, vec![path])?;
        }
    }
    Ok(ok)
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("MAGMS_LOG", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

fn exit_code(e: &MagError) -> i32 {
    match e {
        MagError::Usage(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    let argv: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, &argv).map(|_| true),
        Command::Train(a) => train_cmd(a, &argv).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a, &argv).map(|_| true),
        Command::VerifyTheory(a) => verify_cmd(a, &argv),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("error: the bound failed for at least one check");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
