//! Command-line driver for the BSR compression pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
//! 3 the compression band could not be reached.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use bsr::persist::{load_json, save_text, Checkpoint};
use bsr::pipeline::{load_input, CurveRow, Pipeline, PipelineConfig, RankUpdate};
use bsr::ranksel::RankVector;
use bsr::regularizer::LambdaMode;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(name = "bsr", version, about = "Low-rank compression with beam-search rank selection")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    /// Verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

/// Flags that override the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Target compression ratio; `bsr` accepts a comma-separated sweep.
    #[arg(long, global = true, value_delimiter = ',')]
    cd: Vec<f64>,

    /// Band width below the target ratio.
    #[arg(long, global = true)]
    tau: Option<f64>,

    /// Beam size K.
    #[arg(long, global = true)]
    beam: Option<usize>,

    /// Level step size s. Replaces the multi-configuration search with a
    /// single (s, K) run.
    #[arg(long, global = true)]
    step: Option<usize>,

    /// Step shrink factor.
    #[arg(long, global = true)]
    gamma: Option<f64>,

    /// Initial regularization strength.
    #[arg(long, global = true)]
    lambda0: Option<f64>,

    /// Regularization growth factor per period.
    #[arg(long, global = true)]
    growth: Option<f64>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// MNIST directory; selects the MNIST dataset.
    #[arg(long, global = true)]
    mnist: Option<PathBuf>,
}

#[derive(Args)]
struct Input {
    /// Checkpoint directory to start from.
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct RankedInput {
    #[command(flatten)]
    input: Input,

    /// Rank vector (JSON array) replacing the checkpoint's.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpdateArg {
    Once,
    BeforeDecomposition,
    Multiple,
}

impl From<UpdateArg> for RankUpdate {
    fn from(a: UpdateArg) -> Self {
        match a {
            UpdateArg::Once => RankUpdate::Once,
            UpdateArg::BeforeDecomposition => RankUpdate::BeforeDecomposition,
            UpdateArg::Multiple => RankUpdate::Multiple,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LambdaArg {
    Scheduled,
    Fixed,
}

impl From<LambdaArg> for LambdaMode {
    fn from(a: LambdaArg) -> Self {
        match a {
            LambdaArg::Scheduled => LambdaMode::Scheduled,
            LambdaArg::Fixed => LambdaMode::Fixed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Energy,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense base model.
    Train,
    /// Select per-layer ranks on a trained checkpoint.
    SelectRank {
        #[command(flatten)]
        input: Input,
        /// Also report a comparison selection.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Train towards the selected ranks under the stable-rank penalty.
    Regularize {
        #[command(flatten)]
        input: RankedInput,
        #[arg(long, value_enum)]
        rank_update: Option<UpdateArg>,
        #[arg(long, value_enum)]
        lambda_mode: Option<LambdaArg>,
    },
    /// Factorize every layer by truncated SVD.
    Compress {
        #[command(flatten)]
        input: RankedInput,
    },
    /// Fine-tune a factorized checkpoint.
    Finetune {
        #[command(flatten)]
        input: Input,
    },
    /// Report validation and test accuracy of a checkpoint.
    Evaluate {
        #[command(flatten)]
        input: Input,
    },
    /// Accuracy and memory at each bit-width.
    Quantize {
        #[command(flatten)]
        input: Input,
        /// Bit-widths, comma-separated.
        #[arg(long, value_delimiter = ',')]
        bits: Vec<u32>,
    },
    /// Full pipeline: train, select, regularize, compress, fine-tune,
    /// quantize.
    Bsr,
    /// Rank-update and lambda-schedule ablations.
    Ablate {
        /// Trained checkpoint to share; trains one when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
}

fn resolve(o: &Overrides) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &o.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(&c_d) = o.cd.first() {
        cfg.search.c_d = c_d;
    }
    if let Some(tau) = o.tau {
        cfg.search.tau = tau;
    }
    if let Some(gamma) = o.gamma {
        cfg.search.gamma = gamma;
    }
    match (o.step, o.beam) {
        (Some(s), k) => {
            let k = k.unwrap_or(cfg.search.k);
            cfg.search.s = s;
            cfg.search.k = k;
            cfg.search_configs = vec![(s, k)];
        }
        (None, Some(k)) => {
            cfg.search.k = k;
            for c in &mut cfg.search_configs {
                c.1 = k;
            }
        }
        (None, None) => {}
    }
    if let Some(l) = o.lambda0 {
        cfg.schedule.lambda0 = l;
    }
    if let Some(b) = o.growth {
        cfg.schedule.growth = b;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Some(dir) = &o.mnist {
        cfg.dataset = bsr::pipeline::DatasetSpec::Mnist { dir: dir.clone() };
    }
    Ok(cfg)
}

fn with_ranks(mut ck: Checkpoint, ranks: &Option<PathBuf>) -> anyhow::Result<Checkpoint> {
    if let Some(path) = ranks {
        let r: RankVector = load_json(path).map_err(usage)?;
        ck.ranks = Some(r);
    }
    Ok(ck)
}

/// Reclassifies a library error as a usage error.
fn usage(e: bsr::Error) -> bsr::Error {
    match e {
        bsr::Error::Config(_) => e,
        other => bsr::Error::Config(other.to_string()),
    }
}

fn sweep(cfg: PipelineConfig, targets: &[f64]) -> anyhow::Result<()> {
    let root = cfg.out.clone();
    let base = Pipeline::new(cfg)?;
    let trained = base.train()?;
    let mut rows = Vec::new();
    for &c_d in targets {
        let mut cfg = base.config.clone();
        cfg.search.c_d = c_d;
        cfg.out = root.join(format!("cd-{c_d}"));
        cfg.validate()?;
        let p = Pipeline::with_dataset(cfg, base.dataset.clone());
        info!("c_d = {c_d}");
        let (_, row) = p.compress_from(&trained)?;
        rows.push(row);
    }
    let mut text = format!("{}\n", CurveRow::CSV_HEADER);
    for r in &rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    save_text(&text, root.join("curve.csv"))?;
    print!("{text}");
    Ok(())
}

fn print_json<T: serde::Serialize>(v: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn ckpt_summary(ck: &Checkpoint, dir: &Path) {
    match &ck.ranks {
        Some(r) => println!("{} checkpoint with ranks {r} at {}", ck.stage, dir.display()),
        None => println!("{} checkpoint at {}", ck.stage, dir.display()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = resolve(&cli.overrides)?;
    if cli.overrides.cd.len() > 1 && !matches!(cli.command, Command::Bsr) {
        return Err(bsr::Error::Config("only bsr accepts several --cd values".into()).into());
    }
    match cli.command {
        Command::Bsr if cli.overrides.cd.len() > 1 => return sweep(cfg, &cli.overrides.cd),
        Command::Regularize {
            rank_update,
            lambda_mode,
            ..
        } => {
            if let Some(u) = rank_update {
                cfg.rank_update = u.into();
            }
            if let Some(l) = lambda_mode {
                cfg.schedule.mode = l.into();
            }
        }
        Command::SelectRank { baseline, .. } => cfg.energy_baseline |= baseline.is_some(),
        Command::Quantize { ref bits, .. } if !bits.is_empty() => cfg.quant_bits = bits.clone(),
        _ => {}
    }
    let p = Pipeline::new(cfg)?;
    let out = p.out().to_path_buf();
    match cli.command {
        Command::Train => {
            let ck = p.train()?;
            ckpt_summary(&ck, &out.join("trained"));
        }
        Command::SelectRank { input, .. } => {
            let (ck, sel) = p.select_rank(&load_input(&input.ckpt)?)?;
            ckpt_summary(&ck, &out.join("rank_selected"));
            println!("C = {:.6}, validation accuracy {:.4}", sel.best.c, sel.best.a);
        }
        Command::Regularize { input, .. } => {
            let ck = with_ranks(load_input(&input.input.ckpt)?, &input.ranks)?;
            let ck = p.regularize(&ck)?;
            ckpt_summary(&ck, &out.join("regularized"));
        }
        Command::Compress { input } => {
            let ck = with_ranks(load_input(&input.input.ckpt)?, &input.ranks)?;
            let (_, report) = p.compress(&ck)?;
            print_json(&report)?;
        }
        Command::Finetune { input } => {
            let ck = p.finetune(&load_input(&input.ckpt)?)?;
            ckpt_summary(&ck, &out.join("finetuned"));
        }
        Command::Evaluate { input } => print_json(&p.evaluate(&load_input(&input.ckpt)?)?)?,
        Command::Quantize { input, .. } => {
            let row = p.quantize(&load_input(&input.ckpt)?)?;
            println!("{}\n{}", row.csv_header(), row.csv_row());
        }
        Command::Bsr => {
            let row = p.bsr()?;
            println!("{}\n{}", CurveRow::CSV_HEADER, row.csv_row());
        }
        Command::Ablate { ckpt } => {
            let trained = match ckpt {
                Some(dir) => load_input(dir)?,
                None => p.train()?,
            };
            let rows = p.ablate(&trained)?;
            if rows.is_empty() {
                bail!("no ablation seeds configured");
            }
            print_json(&rows).context("printing ablation rows")?;
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<bsr::Error>() {
        Some(bsr::Error::Config(_)) => 2,
        Some(bsr::Error::SearchFailure { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
