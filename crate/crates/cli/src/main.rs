//! `ecg-icd`: build datasets, train and evaluate ECG diagnosis classifiers.
//!
//! Exit codes: 0 success, 1 invalid data, 2 I/O or configuration error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecg_icd::dataset::ScenarioSpec;
use ecg_icd::synth::PlantedConfig;

use config::{EvalSection, Overrides, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "ecg-icd", version, about = "ECG-based ICD-10 diagnosis prediction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Sets every seed in `[seeds]`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses one per core.
    #[arg(long)]
    threads: Option<usize>,
    /// Scenario such as "T(ED2ALL)-E(ED2ALL)".
    #[arg(long)]
    scenario: Option<ScenarioSpec>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let ov = Overrides { seed: self.seed, threads: self.threads, scenario: self.scenario };
        let cfg = RunConfig::load(&self.config, &ov)?;
        if cfg.threads > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build_global()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Link, label and preprocess the raw tables into `run/<name>/`.
    Build(RunArgs),
    /// Train on the built dataset and write `checkpoint.bin`.
    Train(RunArgs),
    /// Score the test split and write reports and tables.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to score; defaults to the run's own.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Predictions CSV (`record_id,<code>...`) used instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
    },
    /// Paired bootstrap comparison of two checkpoints or prediction CSVs.
    Compare {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Coverage and chapter tables from a per-code AUROC CSV.
    Tables {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// "AUROC above" thresholds.
        #[arg(long, num_args = 1.., default_values_t = [0.9, 0.8])]
        coverage: Vec<f64>,
        /// "AUROC below" thresholds.
        #[arg(long, num_args = 1.., default_values_t = [0.7])]
        below: Vec<f64>,
    },
    /// ICD-10 reference data.
    Icd {
        #[command(subcommand)]
        command: IcdCommand,
    },
    /// Synthetic inputs for smoke runs and tests.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
}

#[derive(Subcommand)]
enum IcdCommand {
    /// Print the chapter range table.
    DumpChapters {
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Raw tables for a 20-subject cohort plus a matching `run.toml`.
    Cohort {
        #[arg(long)]
        out: PathBuf,
    },
    /// A built dataset whose labels are planted in the waveforms.
    Planted {
        /// Run directory to populate.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        records: usize,
        #[arg(long, default_value_t = 1000)]
        len: usize,
        #[arg(long, default_value_t = 12)]
        leads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Build(a) => commands::build(&a.load()?),
        Command::Train(a) => commands::train(&a.load()?),
        Command::Eval { run, checkpoint, scores } => commands::evaluate_run(&run.load()?, checkpoint, scores),
        Command::Compare { run, a, b } => commands::compare(&run.load()?, &a, &b),
        Command::Tables { report, out, coverage, below } => {
            let eval = EvalSection { coverage, below, ..EvalSection::default() };
            commands::tables(&report, &eval, &out)
        }
        Command::Icd { command: IcdCommand::DumpChapters { json } } => commands::dump_chapters(json),
        Command::Synth { command: SynthCommand::Cohort { out } } => commands::synth_cohort(&out),
        Command::Synth { command: SynthCommand::Planted { out, records, len, leads, seed } } => {
            let cfg = PlantedConfig { n_records: records, len, n_leads: leads, seed, ..PlantedConfig::default() };
            commands::synth_planted(&cfg, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
