use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ebst::config::ExperimentConfig;
use ebst::experiment::{alpha_sweep, emit_plot_data, run_experiment};
use ebst::Result;

/// Energy-constrained self-training experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run self-training for every configured seed.
    Run(RunArgs),
    /// Turn run reports into long-format plot data.
    Plot {
        /// Output CSV path.
        #[arg(long, default_value = "plot.csv")]
        out: PathBuf,
        /// Report JSON files.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Config file (key = value text, or a run report to rerun).
    #[arg(long)]
    config: Option<PathBuf>,
    /// cbst, crst-ls, rebm, lebm or anneal.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    rounds: Option<String>,
    /// Seed list, e.g. 0,1,2.
    #[arg(long)]
    seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run an alpha sweep over this list instead of a single alpha.
    #[arg(long, value_delimiter = ',')]
    sweep_alphas: Option<Vec<f64>>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| ebst::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [("train.mode", &args.mode), ("train.alpha", &args.alpha), ("rounds", &args.rounds), ("seeds", &args.seed)];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    if let Some(out) = args.out {
        cfg.out = out;
    }
    cfg.validate()?;
    match args.sweep_alphas {
        Some(alphas) => {
            let (path, rows) = alpha_sweep(&cfg, &alphas)?;
            for r in &rows {
                println!("{}\t{}\tfinal_target_acc={:.4}", r.run_id, r.status_str(), r.final_target_acc);
            }
            println!("sweep written to {}", path.display());
        }
        None => {
            for path in run_experiment(&cfg)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Plot { out, reports } => emit_plot_data(&reports, &out).map(|n| {
            println!("{n} rows written to {}", out.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
