use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use strider_core::config::{Dataset, PipelineConfig, Profile};
use strider_core::pipeline;
use strider_core::{Error, Result};

#[derive(Parser)]
#[command(name = "strider", version, about = "Structured pruning and fixed-point optimization of small CNNs")]
struct Cli {
    /// key = value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Cifar10,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Full,
    Desk,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline network
    Train,
    /// Staged prune-retrain from a checkpoint
    Prune {
        /// Baseline checkpoint (default: <out>/baseline.spcn)
        checkpoint: Option<PathBuf>,
    },
    /// Fixed-point retraining for every configured level row
    Quantize {
        /// Checkpoint to quantize (default: <out>/pruned.spcn)
        checkpoint: Option<PathBuf>,
    },
    /// Dense vs reduced lowering sizes, MACs and GEMM timing
    LowerBench,
    /// Pruned small network vs the same network trained from scratch
    Transfer,
    /// Mask heatmaps and size summary of a checkpoint
    Report { checkpoint: PathBuf },
    /// Print the effective configuration
    PrintConfig,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let dataset = cli.dataset.map(|d| match d {
        DatasetArg::Mnist => Dataset::Mnist,
        DatasetArg::Cifar10 => Dataset::Cifar10,
        DatasetArg::Synthetic => Dataset::Synthetic,
    });
    let profile = cli.profile.map(|p| match p {
        ProfileArg::Full => Profile::Full,
        ProfileArg::Desk => Profile::Desk,
    });
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    let mut cfg = PipelineConfig::parse(&text, dataset, profile)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", x * 100.0)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::PrintConfig => print!("{}", cfg.render()),
        Command::Train => {
            let splits = pipeline::load_dataset(&cfg)?;
            let out = pipeline::cmd_train(&cfg, &splits)?;
            println!(
                "trained {} for {} epochs: test MCR {} -> {}",
                out.net.arch(),
                out.report.epochs.len(),
                pct(out.test_mcr),
                out.checkpoint.display()
            );
        }
        Command::Prune { checkpoint } => {
            let splits = pipeline::load_dataset(&cfg)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join("baseline.spcn"));
            let out = pipeline::cmd_prune(&cfg, &splits, &ck)?;
            print!("{}", pipeline::stage_reports_csv(&out.reports));
        }
        Command::Quantize { checkpoint } => {
            let splits = pipeline::load_dataset(&cfg)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join("pruned.spcn"));
            let out = pipeline::cmd_quantize(&cfg, &splits, &ck)?;
            println!("float test MCR {}", pct(out.float_mcr));
            for ((levels, r), (_, d)) in out.retrained.iter().zip(&out.direct) {
                println!("{levels:?}: retrained {} direct {}", pct(*r), pct(*d));
            }
        }
        Command::LowerBench => {
            let rows = pipeline::cmd_lower_bench(&cfg)?;
            print!("{}", pipeline::bench_csv(&rows));
        }
        Command::Transfer => {
            let splits = pipeline::load_dataset(&cfg)?;
            let out = pipeline::cmd_transfer(&cfg, &splits)?;
            println!("conv connections {}/{}", out.small_connections, out.large_connections);
            for run in ["nw1", "pruned_nw2", "scratch_nw2"] {
                println!("{run}: median final test MCR {}", pct(out.median_final(run)));
            }
        }
        Command::Report { checkpoint } => {
            print!("{}", pipeline::cmd_report(&checkpoint, &cfg.out_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
