//! Command-line driver: run experiments, sweep the threshold sensitivity,
//! freeze skip sets across corpora, dump per-layer diagnostics, and
//! generate synthetic prompt corpora.

mod config;
mod runner;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{load_prompts, ExperimentConfig, Mode};
use runner::run_experiment;

#[derive(Parser)]
#[command(name = "conflayers", about = "Self-speculative decoding with adaptive layer skipping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment over a prompt corpus.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the experiment once per lambda and tabulate the metrics.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated lambda values, e.g. `0.1,0.3,0.5`.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run with a previously found skip set, no search.
    Freeze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "skip-set")]
        skip_set: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a searching experiment and dump per-layer filter diagnostics.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic prompt corpus (JSON-lines of token-id arrays).
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Logging is stderr-only and off unless `CONFLAYERS_LOG` asks for it.
pub fn log_info(msg: &str) {
    if let Ok(level) = std::env::var("CONFLAYERS_LOG") {
        if matches!(level.as_str(), "info" | "debug" | "trace") {
            eprintln!("[conflayers] {msg}");
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<ConfigPhase>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

/// Marker for errors in the configuration phase (exit code 2).
#[derive(Debug)]
struct ConfigPhase(anyhow::Error);

impl std::fmt::Display for ConfigPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigPhase {}

fn config_phase<T>(result: Result<T>) -> Result<T> {
    result.map_err(|e| anyhow::Error::new(ConfigPhase(e)))
}

struct Prepared {
    cfg: ExperimentConfig,
    backend: Box<dyn conflayers::backend::ModelBackend>,
    prompts: Vec<Vec<conflayers::TokenId>>,
    out_dir: PathBuf,
}

fn prepare(
    config_path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    forced_mode: Option<Mode>,
    skip_set: Option<PathBuf>,
) -> Result<Prepared> {
    let mut cfg = config_phase(ExperimentConfig::load(config_path))?;
    if let Some(mode) = forced_mode {
        cfg.mode = mode;
    }
    if let Some(path) = skip_set {
        cfg.skip_set_file = Some(path);
    }
    if cfg.mode == Mode::FrozenSet && cfg.skip_set_file.is_none() {
        return config_phase(Err(anyhow::anyhow!("frozen-set mode requires --skip-set")));
    }
    let backend = config_phase(cfg.build_backend(seed))?;
    let prompts = config_phase(load_prompts(&cfg.prompts, backend.vocab_size()))?;
    // Frozen sets are validated up front so a bad file is a config error.
    if let (Mode::FrozenSet, Some(path)) = (cfg.mode, cfg.skip_set_file.as_ref()) {
        config_phase(config::load_skip_set(path, backend.num_layers()))?;
    }
    let out_dir = out.unwrap_or_else(|| PathBuf::from("out"));
    Ok(Prepared {
        cfg,
        backend,
        prompts,
        out_dir,
    })
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { config, seed, out } => {
            let p = prepare(&config, seed, out, None, None)?;
            let artifacts = run_experiment(&p.cfg, p.backend.as_ref(), &p.prompts, &p.out_dir)?;
            println!("{}", serde_json::to_string(&artifacts.report)?);
            Ok(())
        }
        Command::Sweep {
            config,
            lambdas,
            seed,
            out,
        } => {
            if lambdas.len() < 2 {
                return config_phase(Err(anyhow::anyhow!(
                    "sweep needs at least 2 lambda values"
                )));
            }
            let p = prepare(&config, seed, out, None, None)?;
            let mut csv = String::from("lambda,beta,alpha,m,speedup_est\n");
            for &lambda in &lambdas {
                let mut cfg = p.cfg.clone();
                cfg.filter.lambda = lambda;
                config_phase(cfg.filter.validate().map_err(Into::into))?;
                let sub_dir = p.out_dir.join(format!("lambda_{lambda}"));
                let artifacts =
                    run_experiment(&cfg, p.backend.as_ref(), &p.prompts, &sub_dir)?;
                let r = &artifacts.report;
                csv.push_str(&format!(
                    "{lambda},{},{},{},{}\n",
                    fmt_opt(r.beta_mean),
                    fmt_opt(r.alpha),
                    fmt_opt(r.mean_accepted),
                    fmt_opt(r.speedup_est),
                ));
                log_info(&format!("lambda {lambda} done"));
            }
            fs::create_dir_all(&p.out_dir)?;
            let path = p.out_dir.join("sweep.csv");
            fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            print!("{csv}");
            Ok(())
        }
        Command::Freeze {
            config,
            skip_set,
            seed,
            out,
        } => {
            let p = prepare(&config, seed, out, Some(Mode::FrozenSet), Some(skip_set))?;
            let artifacts = run_experiment(&p.cfg, p.backend.as_ref(), &p.prompts, &p.out_dir)?;
            println!("{}", serde_json::to_string(&artifacts.report)?);
            Ok(())
        }
        Command::Diagnose { config, seed, out } => {
            let p = prepare(&config, seed, out, Some(Mode::ConfLayers), None)?;
            let artifacts = run_experiment(&p.cfg, p.backend.as_ref(), &p.prompts, &p.out_dir)?;
            println!("{}", serde_json::to_string(&artifacts.report)?);
            Ok(())
        }
        Command::GenCorpus {
            out,
            count,
            len,
            vocab,
            seed,
        } => {
            if count == 0 || len == 0 || vocab < 2 {
                return config_phase(Err(anyhow::anyhow!(
                    "gen-corpus needs count >= 1, len >= 1, vocab >= 2"
                )));
            }
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = BufWriter::new(File::create(&out)?);
            for _ in 0..count {
                let prompt: Vec<u32> =
                    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect();
                writeln!(w, "{}", serde_json::to_string(&prompt)?)?;
            }
            w.flush()?;
            log_info(&format!("wrote {count} prompts to {}", out.display()));
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}
