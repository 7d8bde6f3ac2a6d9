use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fairbreath::dataset::{self, DatasetError};
use fairbreath::experiment::{self, AudioConfig, ExperimentConfig, ExperimentError};
use fairbreath::report::{self, ReportError};
use fairbreath::synthetic::{self, SyntheticError};
use fairbreath::{DspConfig, ParamGrid, SplitSpec, SyntheticSpec, TreeParams};

#[derive(Parser)]
#[command(name = "fairbreath", version, about = "Fairness audit and mitigation for respiratory-sound classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode, segment and featurize a corpus (metadata.csv + audio/).
    Featurize {
        corpus: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = 22050)]
        sample_rate: u32,
        #[arg(long, default_value_t = 14.0)]
        min_seconds: f64,
    },
    /// Write a synthetic cohort as a feature CSV.
    Synth {
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        bias: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit one tree on a balanced split of a feature CSV and print a summary.
    Train {
        features: PathBuf,
        /// Grid-search the default parameter grid.
        #[arg(long, conflicts_with = "params")]
        grid: bool,
        /// Fixed parameters as `criterion,min_samples_leaf,min_samples_split`.
        #[arg(long)]
        params: Option<TreeParams>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the fitted tree as JSON.
        #[arg(long)]
        tree_out: Option<PathBuf>,
    },
    /// Run the repeated before/after mitigation experiment.
    Experiment {
        #[arg(short, long)]
        config: PathBuf,
        /// Defaults to `output_dir` from the config.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Re-emit figures from `<dir>/report.json`.
    Report { dir: PathBuf },
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: e.into() }
    }
    fn data(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 3, error: e.into() }
    }
    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 4, error: e.into() }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(_) => Failure::config(e),
            ExperimentError::Data(_) => Failure::data(e),
            ExperimentError::Run { .. } | ExperimentError::Io(_) => Failure::runtime(e),
        }
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io(_) => Failure::runtime(e),
            _ => Failure::data(e),
        }
    }
}

impl From<ReportError> for Failure {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Json(_) => Failure::data(e),
            _ => Failure::runtime(e),
        }
    }
}

impl From<SyntheticError> for Failure {
    fn from(e: SyntheticError) -> Self {
        Failure::config(e)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Featurize {
            corpus,
            output,
            sample_rate,
            min_seconds,
        } => {
            let audio = AudioConfig {
                sample_rate,
                min_seconds,
            };
            let dsp = DspConfig::default();
            dsp.validate(sample_rate).map_err(Failure::config)?;
            let (instances, log) = experiment::featurize_corpus_dir(&corpus, &audio, &dsp)?;
            for reject in &log.rejected {
                log::warn!("skipped {}: {:?}", reject.record.filename, reject.reason);
            }
            dataset::write_feature_file(&output, &instances)?;
            println!("{}", serde_json::to_string_pretty(&log).map_err(Failure::runtime)?);
        }
        Command::Synth { output, bias, seed } => {
            let mut spec = SyntheticSpec::default();
            if let Some(b) = bias {
                spec.bias = b;
            }
            let instances = synthetic::generate_synthetic(&spec, seed)?;
            dataset::write_feature_file(&output, &instances)?;
            log::info!("wrote {} instances to {}", instances.len(), output.display());
        }
        Command::Train {
            features,
            grid,
            params,
            seed,
            tree_out,
        } => {
            let instances = dataset::filter_zero(dataset::read_feature_file(&features)?);
            let grid = grid.then(ParamGrid::default);
            let summary = experiment::train_model(
                &instances,
                &SplitSpec::default(),
                grid.as_ref(),
                params.unwrap_or(TreeParams::PUBLISHED),
                seed,
            )?;
            if let Some(path) = tree_out {
                std::fs::write(&path, summary.tree.to_json())
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(Failure::runtime)?;
            }
            let mut value = serde_json::to_value(&summary).map_err(Failure::runtime)?;
            if let Some(obj) = value.as_object_mut() {
                obj.remove("tree");
            }
            println!("{}", serde_json::to_string_pretty(&value).map_err(Failure::runtime)?);
        }
        Command::Experiment { config, output } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let dir = output
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Failure::config(anyhow::anyhow!("no output directory: pass -o or set output_dir")))?;
            log::info!("positive class = covid; {} runs, master seed {}", cfg.runs, cfg.master_seed);
            let report = experiment::run_experiment(&cfg)?;
            for path in report::emit_outputs(&report, &dir)? {
                log::info!("wrote {}", path.display());
            }
            for (constraint, agg) in &report.aggregate {
                let key = match constraint {
                    fairbreath::Constraint::DemographicParity => "dp_difference",
                    fairbreath::Constraint::EqualizedOdds => "eo_difference",
                };
                if let Some(m) = agg.metrics.get(key) {
                    let p = m.welch.as_ref().map_or(f64::NAN, |w| w.p);
                    println!(
                        "{}: {key} {:.4} -> {:.4} ({:.2}% improvement, p = {p:.3e})",
                        constraint.name(),
                        m.before.mean,
                        m.after.mean,
                        m.pct_improvement.unwrap_or(f64::NAN),
                    );
                }
            }
        }
        Command::Report { dir } => {
            for path in report::reemit_figures(&dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
