//! `rnm`: train, evaluate and sweep the meta-learned RIS/NOMA optimizer.
//!
//! Any `--KEY=VALUE` argument whose key is a configuration key overrides
//! the config file. Exit codes: 0 success, 1 configuration error, 2 runtime
//! failure. `RNM_THREADS` caps the worker count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rnm_core::harness::{self, ExperimentConfig, Mode};
use rnm_core::maml::{self, Trainer};
use rnm_core::Error;

#[derive(Parser)]
#[command(name = "rnm", version, about = "Meta-learned phase-shift and power optimization for RIS-assisted MISO-NOMA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a power-allocation network.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Model file; the learned step size and training log are written next to it.
        #[arg(long, default_value = "model.bin")]
        out: PathBuf,
    },
    /// Evaluate a trained model on fresh test scenarios.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate one model per value of a swept parameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `VAR=v1,v2,...` with VAR one of K, N, P_max_dbm, clustering, access.
        #[arg(long)]
        vary: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Parse { .. }
            | Error::UnknownKey { .. }
            | Error::InvalidConfig(_)
            | Error::OddUserCount(_)
            | Error::TooLarge { .. } => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

/// Splits `--KEY=VALUE` configuration overrides from the rest of the arguments.
fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").and_then(|s| s.split_once('=')).map(|(k, _)| k);
        match key {
            Some(k) if harness::CONFIG_KEYS.contains(&k) => overrides.push(a[2..].to_string()),
            _ => rest.push(a),
        }
    }
    (rest, overrides)
}

fn load(path: Option<&Path>, overrides: &[String], mode: Mode) -> Result<ExperimentConfig, Failure> {
    let mut cfg = harness::load_config(path, overrides).map_err(|e| match e {
        Error::Io(io) => Failure::Config(format!("cannot read config: {io}")),
        other => other.into(),
    })?;
    cfg.mode = mode;
    cfg.validate()?;
    Ok(cfg)
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let mut trainer = Trainer::new(&cfg.topology, &cfg.training)?;
    let total = cfg.training.episodes;
    for e in 0..total {
        let report = trainer.run_episode()?;
        if (e + 1) % 100 == 0 || e + 1 == total {
            eprintln!(
                "episode {}/{total}: loss {:.3}, sum rate {:.3} Mbit/s, gamma_theta {:.5}",
                e + 1,
                report.mean_loss,
                report.mean_sum_rate_mbps,
                trainer.step_size().gamma()
            );
        }
    }
    let model = trainer.finish();
    let io = |e: std::io::Error| Failure::Runtime(e.to_string());
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    harness::save_model(&model, out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.csv");
    std::fs::write(&log_path, maml::log_to_csv(&model.log)).map_err(io)?;
    println!("model: {}", out.display());
    println!("step size: {}", harness::step_size_path(out).display());
    println!("training log: {}", PathBuf::from(log_path).display());
    Ok(())
}

fn eval(cfg: &ExperimentConfig, model_path: &Path) -> Result<(), Failure> {
    let model = harness::load_model(model_path, cfg.training.gamma_theta_init)?;
    let dims = cfg.training.layer_dims(&cfg.topology);
    model.weights.expect_dims(&dims)?;
    let (row, _) = harness::evaluate_point(cfg, 0, &cfg.topology, &cfg.training, &model)?;
    print!("{}", harness::results_csv(&[row]));
    Ok(())
}

fn sweep(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = harness::run_sweep(cfg)?;
    let dir = &cfg.out_dir;
    harness::write_results(&out.rows, dir)?;
    let io = |e: std::io::Error| Failure::Runtime(e.to_string());
    std::fs::write(dir.join("trials.csv"), harness::trials_csv(&out.trials)).map_err(io)?;
    for (i, model) in out.models.iter().enumerate() {
        harness::save_model(model, &dir.join(format!("model_{i}.bin")))?;
        std::fs::write(dir.join(format!("train_log_{i}.csv")), maml::log_to_csv(&model.log)).map_err(io)?;
    }
    print!("{}", harness::results_csv(&out.rows));
    Ok(())
}

fn run(cli: Cli, mut overrides: Vec<String>) -> Result<(), Failure> {
    let pool = harness::worker_pool()?;
    match cli.command {
        Command::Train { config, seed, out } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            let cfg = load(config.as_deref(), &overrides, Mode::Train)?;
            pool.install(|| train(&cfg, &out))
        }
        Command::Eval { model, config } => {
            let cfg = load(config.as_deref(), &overrides, Mode::Eval)?;
            pool.install(|| eval(&cfg, &model))
        }
        Command::Sweep { config, vary, out_dir } => {
            if let Some(v) = vary {
                let (var, values) = v
                    .split_once('=')
                    .ok_or_else(|| Failure::Config(format!("--vary expects VAR=v1,v2,..., got `{v}`")))?;
                overrides.push(format!("sweep_var={var}"));
                overrides.push(format!("sweep_values={values}"));
            }
            if let Some(d) = out_dir {
                overrides.push(format!("out_dir={}", d.display()));
            }
            let cfg = load(config.as_deref(), &overrides, Mode::Sweep)?;
            pool.install(|| sweep(&cfg))
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
