use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use promptwatt::config::ExperimentConfig;
use promptwatt::metrics::DEFAULT_ALPHAS;
use promptwatt::pipeline::{self, AnalyzeOptions, PipelineError};
use promptwatt::report::{Figure, SqMode};

/// Time, energy, carbon and coverage benchmarking of prompt strategies for
/// unit-test generation.
#[derive(Debug, Parser)]
#[command(name = "promptwatt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Execute every (model, strategy) pair and write per-batch logs.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Continue an interrupted run, skipping batches already logged.
        #[arg(long)]
        resume: bool,
    },
    /// Consolidate logs and coverage into the metric summary.
    Analyze {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        coverage: PathBuf,
        /// Comma-separated exponents for the SQ score.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long = "sq-mode", default_value = "both")]
        sq_mode: SqMode,
        /// Output directory; defaults to `analysis` next to the logs directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check that a run could start, printing a readiness matrix.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write plot series for one figure from an analysis directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        figure: String,
    },
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.exit_code() {
            1 => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn default_out(logs: &Path) -> PathBuf {
    let abs = std::path::absolute(logs).unwrap_or_else(|_| logs.to_path_buf());
    abs.parent()
        .map_or_else(|| PathBuf::from("analysis"), |p| p.join("analysis"))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, resume } => {
            let cfg = ExperimentConfig::load(&config).map_err(PipelineError::from)?;
            let report = pipeline::run(&cfg, resume)?;
            println!(
                "run {}: {} batch(es) written, {} skipped, {} coverage record(s) -> {}",
                report.run_id,
                report.batches_written,
                report.batches_skipped,
                report.records_written,
                cfg.output_dir.display()
            );
            if report.corpus_wrapped {
                println!("note: executions per pair exceed the corpus size; tasks were repeated");
            }
            if !report.failures.is_empty() {
                for f in &report.failures {
                    eprintln!(
                        "failed: {} / {} at batch {}: {}",
                        f.model, f.strategy, f.batch_id, f.error
                    );
                }
                return Err(Failure::Runtime(anyhow::anyhow!(
                    "{} pair(s) aborted",
                    report.failures.len()
                )));
            }
        }
        Command::Analyze {
            logs,
            coverage,
            alpha,
            sq_mode,
            out,
        } => {
            let alphas = if alpha.is_empty() {
                DEFAULT_ALPHAS.to_vec()
            } else {
                alpha
            };
            let opts = AnalyzeOptions {
                alphas,
                mode: sq_mode,
                out_dir: out.unwrap_or_else(|| default_out(&logs)),
            };
            let report = pipeline::analyze(&logs, &coverage, &opts)?;
            print!("{}", report.table);
            println!("wrote {} file(s) to {}", report.written.len(), opts.out_dir.display());
        }
        Command::Validate { config } => {
            let r = pipeline::validate(&config);
            print!("{}", r.render());
            if !r.ready() {
                let config_ok = r.checks.first().is_some_and(|c| c.ok);
                let e = anyhow::anyhow!("not ready");
                return Err(if config_ok {
                    Failure::Runtime(e)
                } else {
                    Failure::Usage(e)
                });
            }
            println!("ready");
        }
        Command::Report { input, figure } => {
            let figure: Figure = figure.parse().map_err(|e| Failure::Usage(anyhow::Error::new(e)))?;
            let files = pipeline::report_figure(&input, figure)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn parse_args() -> anyhow::Result<Cli> {
    match Cli::try_parse() {
        Ok(c) => Ok(c),
        Err(e) if !e.use_stderr() => {
            // --help and --version
            e.print().context("printing help")?;
            std::process::exit(0);
        }
        Err(e) => bail!(e.render().to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match parse_args() {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
