use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use sales_transfer::datagen::{generate_universe, read_universe, validate_universe, write_universe, GeneratorError};
use sales_transfer::eval::{improvement_report, read_records_csv, AggregateScope};
use sales_transfer::experiment::{
    load_sources, run_experiment, save_sources, train_sources, ExperimentConfig, ExperimentError,
};

/// Transfer-learning sales forecasts for a newly introduced product.
#[derive(Parser, Debug)]
#[command(version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (overrides the file).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    report_dir: Option<PathBuf>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic universe and its calibration report.
    Generate {
        /// Number of stores (overrides the file).
        #[arg(long)]
        stores: Option<usize>,
    },
    /// Train one network per source product.
    TrainSources,
    /// Run the walk-forward experiment grid.
    Run {
        /// Restrict the grid to the quick settings.
        #[arg(long)]
        quick: bool,
    },
    /// Summarise the records of a previous run.
    Report {
        /// Records CSV; defaults to records.csv in the report directory.
        #[arg(long)]
        records: Option<PathBuf>,
    },
}

/// Exit status classes.
#[derive(Debug, Clone, Copy)]
enum Status {
    Usage = 1,
    Data = 2,
    Failed = 3,
}

struct Failure {
    status: Status,
    error: anyhow::Error,
}

trait Classify<T> {
    fn status(self, status: Status) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn status(self, status: Status) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            status,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Status::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.common.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.status as u8)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path).status(Status::Usage)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = jobs;
    }
    for (flag, slot) in [
        (&common.data_dir, &mut cfg.paths.data_dir),
        (&common.model_dir, &mut cfg.paths.model_dir),
        (&common.report_dir, &mut cfg.paths.report_dir),
    ] {
        if let Some(p) = flag {
            slot.clone_from(p);
        }
    }
    Ok(cfg)
}

fn echo_config(dir: &Path, cfg: &ExperimentConfig) -> Result<(), Failure> {
    let text = cfg.to_toml().status(Status::Usage)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text)
        .with_context(|| path.display().to_string())
        .status(Status::Data)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Generate { stores } => {
            if let Some(n) = stores {
                cfg.generator.n_stores = n;
            }
            cfg.validate().status(Status::Usage)?;
            generate(&cfg)
        }
        Command::TrainSources => {
            cfg.validate().status(Status::Usage)?;
            train(&cfg)
        }
        Command::Run { quick } => {
            if quick {
                cfg.apply_quick();
            }
            cfg.validate().status(Status::Usage)?;
            experiment(&cfg)
        }
        Command::Report { records } => report(&cfg, records),
    }
}

fn generate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let dir = &cfg.paths.data_dir;
    let universe = match generate_universe(&cfg.generator) {
        Ok(u) => u,
        Err(e @ GeneratorError::InvalidSpec(_)) => return Err(e).status(Status::Usage),
        Err(e) => return Err(e).status(Status::Failed),
    };
    write_universe(dir, &universe)
        .with_context(|| format!("writing {}", dir.display()))
        .status(Status::Data)?;
    echo_config(dir, cfg)?;
    let validation = validate_universe(&universe);
    log::info!(
        "wrote {} products to {}; source mean split {:?}",
        universe.sources.len() + 1,
        dir.display(),
        validation.source_mean_split
    );
    if !validation.passed() {
        return Err(anyhow!("calibration failed:\n  {}", validation.failures().join("\n  "))).status(Status::Failed);
    }
    Ok(())
}

fn load_universe(cfg: &ExperimentConfig) -> Result<sales_transfer::datagen::Universe, Failure> {
    let dir = &cfg.paths.data_dir;
    let universe = read_universe(dir)
        .with_context(|| format!("reading universe from {}", dir.display()))
        .status(Status::Data)?;
    if universe.spec != cfg.generator {
        return Err(anyhow!(
            "{} was generated from a different generator spec; rerun `generate` with this configuration",
            dir.display()
        ))
        .status(Status::Data);
    }
    Ok(universe)
}

fn train(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let universe = load_universe(cfg)?;
    let started = Instant::now();
    let bundles = train_sources(&universe, cfg).status(Status::Failed)?;
    let dir = &cfg.paths.model_dir;
    save_sources(dir, &bundles).status(Status::Data)?;
    echo_config(dir, cfg)?;
    log::info!(
        "trained {} source models in {:.1}s into {}",
        bundles.len(),
        started.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

fn experiment(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let universe = load_universe(cfg)?;
    let sources = match load_sources(&cfg.paths.model_dir, &universe) {
        Ok(s) => s,
        Err(e @ ExperimentError::MissingSource(_)) => {
            return Err(anyhow!("{e}; run `train-sources` first")).status(Status::Data)
        }
        Err(e) => return Err(e).status(Status::Data),
    };
    let started = Instant::now();
    let outcome = run_experiment(&universe, &sources, cfg).status(Status::Failed)?;
    let dir = &cfg.paths.report_dir;
    outcome.write(dir, cfg).status(Status::Data)?;
    log::info!(
        "{} records ({} failed), {} leakage checks, written to {} in {:.1}s",
        outcome.records.len(),
        outcome.failed_records(),
        outcome.audit.checks,
        dir.display(),
        started.elapsed().as_secs_f64()
    );
    if !outcome.audit.violations.is_empty() {
        return Err(anyhow!(
            "{} leakage violations, first: {}",
            outcome.audit.violations.len(),
            outcome.audit.violations[0]
        ))
        .status(Status::Failed);
    }
    if outcome.total_failure() {
        return Err(anyhow!("every model failed to train")).status(Status::Failed);
    }
    Ok(())
}

fn report(cfg: &ExperimentConfig, records: Option<PathBuf>) -> Result<(), Failure> {
    let path = records.unwrap_or_else(|| cfg.paths.report_dir.join("records.csv"));
    let records = read_records_csv(&path)
        .with_context(|| path.display().to_string())
        .status(Status::Data)?;
    let report = improvement_report(&records, &cfg.generator.target_promo_weeks).status(Status::Data)?;
    println!("{:<28} {:>10} {:>10} {:>10} {:>12}", "model", "all %", "promo %", "other %", "mean MSE");
    let mut ids: Vec<&str> = report.aggregates.iter().map(|a| a.model_id.as_str()).collect();
    ids.dedup();
    for id in ids {
        let pct = |scope| {
            report
                .aggregate(id, scope)
                .map_or("-".to_string(), |a| format!("{:.2}", a.improvement))
        };
        let mse = report
            .aggregate(id, AggregateScope::All)
            .map_or(f64::NAN, |a| a.mean_mse);
        println!(
            "{id:<28} {:>10} {:>10} {:>10} {mse:>12.4}",
            pct(AggregateScope::All),
            pct(AggregateScope::Promo),
            pct(AggregateScope::NonPromo)
        );
    }
    Ok(())
}
