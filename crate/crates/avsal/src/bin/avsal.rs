//! Command-line front end: generate data, train, evaluate, score maps,
//! benchmark attention, and sweep predictive-coding iterations. All logic
//! lives in the library; this binary only parses arguments and reports.

use avsal::config::HarnessConfig;
use avsal::error::{Error, Result};
use avsal::harness;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "avsal",
    about = "Audio-visual saliency prediction on synthetic data",
    version
)]
struct Cli {
    /// JSON configuration; defaults to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (data, checkpoints, reports).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic audio-visual dataset.
    GenData,
    /// Train a model on the dataset under --out (generating it if absent).
    Train {
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write per-clip metrics and map dumps.
    Eval {
        /// Checkpoint directory; defaults to <out>/ckpt.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Dataset directory; defaults to <out>/data.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score one saliency map file against fixation/dense ground truth.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        fix: PathBuf,
        /// Densified ground truth; derived from --fix when omitted.
        #[arg(long)]
        den: Option<PathBuf>,
    },
    /// Measure attention cost scaling across token counts.
    BenchAttn {
        /// Comma-separated token counts.
        #[arg(long, default_value = "64,128,256,512,1024")]
        lengths: String,
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
    /// Emit per-iteration prediction-error traces for a range of step sizes.
    CpcSweep {
        #[arg(long, default_value_t = 6)]
        max_iters: usize,
        /// Comma-separated step sizes.
        #[arg(long, default_value = "0.1,0.01")]
        alphas: String,
        #[arg(long, default_value_t = 8)]
        clips: usize,
    },
}

fn load_config(cli: &Cli) -> Result<HarnessConfig> {
    let mut cfg = match &cli.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Input(format!("cannot parse {what} entry {p:?}")))
        })
        .collect()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli)?;
            let dir = harness::run_gen_data(&cfg, &cli.out)?;
            println!("wrote {} clips to {}", cfg.synth.clips, dir.display());
        }
        Command::Train { resume } => {
            let cfg = load_config(cli)?;
            let ckpt = harness::run_train(&cfg, &cli.out, resume.as_deref())?;
            println!("checkpoint at {}", ckpt.display());
            println!(
                "loss log at {}",
                harness::reports_dir(&cli.out).join("train_loss.csv").display()
            );
        }
        Command::Eval { ckpt, data } => {
            let ckpt = ckpt.clone().unwrap_or_else(|| harness::ckpt_dir(&cli.out));
            let data = data.clone().unwrap_or_else(|| harness::data_dir(&cli.out));
            let csv = harness::run_eval(&cli.out, &ckpt, &data)?;
            print!("{csv}");
        }
        Command::Metrics { pred, fix, den } => {
            let csv = harness::run_metrics(pred, fix, den.as_deref())?;
            print!("{csv}");
        }
        Command::BenchAttn { lengths, channels } => {
            let ls: Vec<usize> = parse_list(lengths, "token count")?;
            let seed = cli.seed.unwrap_or(7);
            let csv = harness::run_bench_attention(&ls, *channels, seed, &cli.out)?;
            print!("{csv}");
        }
        Command::CpcSweep { max_iters, alphas, clips } => {
            let cfg = load_config(cli)?;
            let al: Vec<f32> = parse_list(alphas, "alpha")?;
            let csv = harness::run_cpc_sweep(&cfg, &al, *max_iters, *clips, &cli.out)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; anything else is a
            // usage problem (exit 1).
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
