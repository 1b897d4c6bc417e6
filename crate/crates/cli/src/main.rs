use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlp_meta::config::ExperimentConfig;
use tlp_meta::experiment::{self, deltas_csv, export_tau_table, Stage};
use tlp_meta::sampling::Temperature;

#[derive(Parser)]
#[command(name = "tlpmeta", version, about = "Meta-learning over task-language grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate data, train and evaluate one configuration.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory receiving the run artifacts.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Stop after `data`, `train`, or run everything (`all`).
        #[arg(long, default_value = "all")]
        stage: Stage,
    },
    /// Write the sampling probability of every TLP for a list of temperatures.
    ExportTau {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated temperatures; `inf` selects uniform sampling.
        #[arg(long, value_delimiter = ',', default_value = "1,2,5,inf")]
        tau: Vec<Temperature>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-TLP deltas of runs against the best of the baseline runs.
    Compare {
        /// Baseline run directories.
        #[arg(long = "baseline", required = true, num_args = 1..)]
        baselines: Vec<PathBuf>,
        /// Run directories to compare.
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-score the stored parameters of a finished run; writes eval.csv.
    Eval {
        /// Run directory holding config.txt and params.bin.
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config; the bundled default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> tlp_meta::Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        let mut extra = String::new();
        if let Some(seed) = self.seed {
            extra += &format!("seed = {seed}\n");
        }
        if let Some(threads) = self.threads {
            extra += &format!("run.threads = {threads}\n");
        }
        for kv in &self.set {
            extra += kv;
            extra.push('\n');
        }
        if extra.is_empty() {
            Ok(base)
        } else {
            base.with_overrides(&extra)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), String> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| format!("{}: {e}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out, stage } => {
            let cfg = config.load().map_err(|e| e.to_string())?;
            let output = experiment::run(cfg, &out, stage).map_err(|e| format!("stage {stage:?}: {e}"))?;
            eprintln!("wrote {} result rows to {}", output.rows.len(), out.display());
            Ok(())
        }
        Command::ExportTau { config, tau, out } => {
            let cfg = config.load().map_err(|e| e.to_string())?;
            let grid = cfg.grid.build().map_err(|e| e.to_string())?;
            let csv = export_tau_table(&grid, &tau).map_err(|e| e.to_string())?;
            emit(out.as_deref(), &csv)
        }
        Command::Compare { baselines, runs, out } => {
            let rows = experiment::compare(&baselines, &runs).map_err(|e| e.to_string())?;
            emit(out.as_deref(), &deltas_csv(&rows))
        }
        Command::Eval { run_dir } => {
            let rows = experiment::replay(&run_dir).map_err(|e| e.to_string())?;
            eprintln!("wrote {} rows to {}", rows.len(), run_dir.join("eval.csv").display());
            Ok(())
        }
    }
}
