use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ctxpress::experiment::{self, ExperimentConfig, ExperimentError, Runtime};

/// Corpus-in-context retrieval experiments.
#[derive(Parser)]
#[command(name = "ctxpress", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Response cache directory; overrides the config.
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Answer from a mock script instead of HTTP endpoints.
    #[arg(long, global = true, value_name = "SCRIPT.json")]
    mock: Option<PathBuf>,
    /// Concurrent model requests; overrides the config.
    #[arg(long, global = true)]
    max_parallel: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Retrieve for every query and score the run.
    Retrieve,
    /// Compress every document with one or more generators.
    Compress {
        /// Generator endpoint; repeatable. Defaults to the config's list.
        #[arg(long = "generator")]
        generators: Vec<String>,
    },
    /// Build chosen/rejected compression pairs.
    Forge,
    /// Retrieve with the relevant documents moved through the corpus.
    PositionSweep,
    /// Check the preference objective's math and gradients.
    LossCheck {
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Corpus statistics.
    Stats,
}

const EXIT_PARTIAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ExperimentError> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| ExperimentError::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    if let Some(n) = cli.max_parallel {
        cfg.max_parallel = n;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn json(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn run(cli: &Cli) -> Result<u8, ExperimentError> {
    if let Command::LossCheck { inject_sign_flip } = cli.command {
        let seed = match (&cli.config, cli.seed) {
            (_, Some(s)) => s,
            (Some(_), None) => load_config(cli)?.seed,
            (None, None) => ctxpress::seed::DEFAULT_SEED,
        };
        let summary = experiment::run_loss_check(seed, inject_sign_flip)?;
        let out = match (&cli.out, &cli.config) {
            (Some(o), _) => Some(o.clone()),
            (None, Some(_)) => Some(load_config(cli)?.output_dir),
            (None, None) => None,
        };
        if let Some(dir) = out {
            std::fs::create_dir_all(&dir).map_err(|source| ExperimentError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let p = dir.join("loss_check.json");
            std::fs::write(&p, json(&summary) + "\n").map_err(|source| ExperimentError::Io {
                path: p.display().to_string(),
                source,
            })?;
        }
        println!("{}", json(&summary));
        return Ok(if summary.passed { 0 } else { EXIT_PARTIAL });
    }

    let rt = Runtime::new(load_config(cli)?, cli.mock.as_deref())?;
    let code = match &cli.command {
        Command::Retrieve => {
            let s = experiment::run_retrieve(&rt)?;
            print!(
                "{}",
                std::fs::read_to_string(rt.config.output_dir.join("report.txt")).unwrap_or_default()
            );
            if s.n_errors > 0 {
                eprintln!("{} queries failed", s.n_errors);
                EXIT_PARTIAL
            } else {
                0
            }
        }
        Command::Compress { generators } => {
            let s = experiment::run_compress(&rt, generators)?;
            println!("{}", json(&s.generators));
            eprintln!("new requests: {}", s.new_requests);
            if s.failures.is_empty() {
                0
            } else {
                eprintln!("{} documents failed to compress", s.failures.len());
                EXIT_PARTIAL
            }
        }
        Command::Forge => {
            let s = experiment::run_forge(&rt)?;
            println!("{}", json(&s.manifest));
            if s.failed_documents.is_empty() {
                0
            } else {
                eprintln!("{} documents failed generation", s.failed_documents.len());
                EXIT_PARTIAL
            }
        }
        Command::PositionSweep => {
            let rows = experiment::run_position_sweep(&rt)?;
            print!(
                "{}",
                std::fs::read_to_string(rt.config.output_dir.join("sweep.csv")).unwrap_or_default()
            );
            if rows.iter().any(|r| r.report.aggregate.n_errors > 0) {
                EXIT_PARTIAL
            } else {
                0
            }
        }
        Command::Stats => {
            println!("{}", json(&experiment::run_stats(&rt)?));
            0
        }
        Command::LossCheck { .. } => unreachable!("handled above"),
    };
    Ok(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}
