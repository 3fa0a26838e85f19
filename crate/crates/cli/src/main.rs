//! Command-line interface for the cryorec pipeline: dataset simulation,
//! training, evaluation, and conformational traversal.

use clap::{Parser, Subcommand};
use cryorec::sim::{self, parse_key_values, Dataset, SimConfig};
use cryorec::train::TrainConfig;
use cryorec::{report, train};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cryorec",
    about = "Synthetic cryo-EM simulation and ab initio heterogeneous reconstruction",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic particle dataset from an analytic phantom.
    Simulate {
        /// Config file with `key = value` lines (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the amortized encoder and neural-field decoder.
    Train {
        /// Config file with `key = value` lines (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset: metrics, plots, reconstructions.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the report, plots, and volumes.
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract volumes along a principal component of the latent space.
    Traverse {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (sets the observed latent range).
        #[arg(long)]
        data: PathBuf,
        /// Axis to traverse (only `pc1` is supported).
        #[arg(long, default_value = "pc1")]
        axis: String,
        /// Number of equally spaced points.
        #[arg(long, default_value_t = 5)]
        points: usize,
        /// Output directory for the volume stack.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Option<PathBuf>) -> cryorec::Result<std::collections::BTreeMap<String, String>> {
    match path {
        None => Ok(Default::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| cryorec::Error::io(p, e))?;
            parse_key_values(&text)
        }
    }
}

fn run(cli: Cli) -> cryorec::Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = SimConfig::from_key_values(&read_config(&config)?)?;
            sim::make_dataset(&cfg, &out)?;
            println!(
                "wrote {} images (D = {}) to {}",
                cfg.n,
                cfg.d,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let cfg = TrainConfig::from_key_values(&read_config(&config)?)?;
            let dataset = Dataset::load(&data)?;
            let rows = train::train(&cfg, &dataset, &out, resume.as_deref())?;
            if let Some(last) = rows.last() {
                println!("done; final metrics row: {last}");
            }
            println!("checkpoints and metrics.csv in {}", out.display());
        }
        Command::Eval { ckpt, data, out } => {
            let dataset = Dataset::load(&data)?;
            let summary = report::evaluate_checkpoint(&ckpt, &dataset, &out)?;
            println!(
                "evaluated {} images; confusion {}  spearman {}  rot_median_deg {}",
                summary.n,
                opt(summary.confusion),
                opt(summary.spearman_pc1),
                opt(summary.pose.as_ref().map(|p| p.rot_median_deg)),
            );
            println!("report and plots in {}", out.display());
        }
        Command::Traverse {
            ckpt,
            data,
            axis,
            points,
            out,
        } => {
            if axis != "pc1" {
                return Err(cryorec::Error::invalid_argument(format!(
                    "unsupported axis {axis:?}; only pc1 is available"
                )));
            }
            let dataset = Dataset::load(&data)?;
            let vals = report::traverse_checkpoint(&ckpt, &dataset, points, &out)?;
            println!(
                "wrote {} volumes along PC1 ∈ [{:.4}, {:.4}] to {}",
                vals.len(),
                vals.first().unwrap(),
                vals.last().unwrap(),
                out.display()
            );
        }
    }
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
