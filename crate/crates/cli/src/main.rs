use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pkvc::experiment::{
    cmd_gen_corpus, cmd_report, cmd_run, cmd_sweep, cmd_train, AnonChoice, ExperimentConfig,
    Stage, StageError, SweepGrid,
};
use pkvc::select::StrategyKind;

#[derive(Parser)]
#[command(name = "pkvc", version, about = "Anonymization experiments on synthetic speech features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic corpus.
    GenCorpus(Common),
    /// Train the phone classifier and duration model.
    Train(Common),
    /// Run one anonymization and attack experiment.
    Run(Common),
    /// Run a grid of experiments into results.csv.
    Sweep(Common),
    /// Summarize a run directory, privacy_report.json or results.csv.
    Report {
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; required without --config, overrides it otherwise.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Selection strategy: random, same_gender, cross_gender, disjoint_1, disjoint_2.
    #[arg(long)]
    strategy: Option<String>,
    /// Anonymizer identifier such as "(7-8)" or "(0-8)_r", or "original".
    #[arg(long)]
    anon: Option<String>,
}

fn config_error(error: impl Into<pkvc::Error>) -> StageError {
    StageError { stage: Stage::Config, error: error.into() }
}

impl Common {
    fn resolve(&self, sweep: bool) -> Result<ExperimentConfig, StageError> {
        let mut config = match (&self.config, self.seed) {
            (Some(path), _) => ExperimentConfig::load(path).map_err(config_error)?,
            (None, Some(seed)) => ExperimentConfig::new(seed),
            (None, None) => {
                return Err(config_error(pkvc::Error::InvalidArgument("--seed is required without --config".into())))
            }
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(anon) = &self.anon {
            config.anon = anon.parse::<AnonChoice>().map_err(config_error)?;
        }
        if let Some(name) = &self.strategy {
            let kind = name.parse::<StrategyKind>().map_err(config_error)?;
            config.strategy = Some(kind);
            if let Some(grid) = &mut config.sweep {
                grid.strategies = vec![kind];
            }
        }
        if sweep && config.sweep.is_none() {
            let mut grid = SweepGrid::default();
            if let Some(kind) = config.strategy {
                grid.strategies = vec![kind];
            }
            config.sweep = Some(grid);
        }
        config.validate().map_err(config_error)?;
        Ok(config)
    }

    fn out(&self) -> Option<&Path> {
        self.out.as_deref()
    }
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> anyhow::Result<T> {
    match jobs {
        None => Ok(f()),
        Some(0) => anyhow::bail!("--jobs must be at least 1"),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f)),
    }
}

fn execute(command: Command) -> anyhow::Result<Result<String, StageError>> {
    let result = match command {
        Command::GenCorpus(c) => with_jobs(c.jobs, || {
            let config = c.resolve(false)?;
            cmd_gen_corpus(&config, c.out()).map(|p| format!("wrote {}\n", p.display()))
        })?,
        Command::Train(c) => with_jobs(c.jobs, || {
            let config = c.resolve(false)?;
            cmd_train(&config, c.out()).map(|p| format!("wrote models to {}\n", p.display()))
        })?,
        Command::Run(c) => with_jobs(c.jobs, || {
            let config = c.resolve(false)?;
            let out = cmd_run(&config, c.out())?;
            let r = &out.report;
            Ok(format!(
                "EER female {:.2}  male {:.2}  avg {:.2}  PER proxy {:.4}  duration distortion {:.4}\n",
                r.eer_female, r.eer_male, r.eer_averaged, r.utility.per_proxy, r.utility.duration_distortion
            ))
        })?,
        Command::Sweep(c) => with_jobs(c.jobs, || {
            let config = c.resolve(true)?;
            let rows = cmd_sweep(&config, c.out())?;
            let failed = rows.iter().filter(|r| !r.error.is_empty()).count();
            Ok(format!("{} rows, {failed} failed\n", rows.len()))
        })?,
        Command::Report { path } => cmd_report(&path),
    };
    Ok(result)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Ok(text)) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Ok(Err(e)) => {
            eprintln!("pkvc: {e}");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("pkvc: {e:#}");
            ExitCode::from(2)
        }
    }
}
