//! Experiment configuration, sweeps and result files.
//!
//! Configuration is plain `key=value` text; `#` starts a comment. Overrides
//! (for example from command-line flags) replace file values key by key.
//! Unknown keys are rejected. Keys and defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `mode` | `train` | `train`, `eval` or `sweep` |
//! | `seed` | `0` | base seed for training and test scenarios |
//! | `trials` | `100` | test scenarios per sweep point |
//! | `out_dir` | `results` | output directory |
//! | `model` | none | model file for `eval` |
//! | `record_wall_time` | `true` | `false` writes 0 into `wall_s` |
//! | `K`, `N`, `M` | `4`, `16`, `16` | users, RIS elements, BS antennas |
//! | `P_max_dbm` | `20` | power budget |
//! | `area_width` | `10` | square side, meters |
//! | `bs_x`, `bs_y` | `0`, `0` | BS position |
//! | `ris_x`, `ris_y` | none | fixed RIS position (both or neither) |
//! | `alpha` | `3` | BS-MU and RIS-MU path loss exponent |
//! | `ris_alpha` | `2.2` | BS-RIS path loss exponent |
//! | `kappa` | `10` | Rician factor |
//! | `bandwidth_hz` | `4e6` | total bandwidth |
//! | `noise_psd_dbm_hz` | `-169` | noise PSD |
//! | `qos_min_mbps`, `qos_max_mbps` | `0.5`, `2.5` | QoS draw range |
//! | `min_distance` | `1` | minimum node separation, meters |
//! | `J` | `5` | inner steps |
//! | `gamma_theta` | `0.01` | initial inner step size |
//! | `gamma_eta` | `0.001` | outer learning rate |
//! | `episodes`, `batch` | `2000`, `16` | training budget |
//! | `second_order` | `true` | differentiate through the inner loop |
//! | `w1`, `w2` | `-1`, `10` | loss weights |
//! | `phase_mode` | `wrap` | `wrap` or `clip` |
//! | `optimizer` | `sgd` | `sgd` or `adam` |
//! | `hidden` | `128,128` | hidden layer widths |
//! | `access` | `noma` | `noma` or `oma` |
//! | `clustering` | `qos` | `qos` or `channel` |
//! | `fixed_scenarios` | `false` | train on the first batch only |
//! | `grad_clip` | `100` | outer gradient norm cap, `0` disables |
//! | `sweep_var` | none | `K`, `N`, `P_max_dbm`, `clustering` or `access` |
//! | `sweep_values` | none | comma-separated values |
//!
//! A sweep trains one model per point, since the network input size depends
//! on `K` and `M`. Test scenario `t` and its initial phases are seeded from
//! `(seed, t)` alone, so every sweep point sees the same user drops.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::channel::{dbm_to_watts, TopologyConfig};
use crate::error::{Error, Result};
use crate::maml::{self, Access, ClusteringRule, LearnedStepSize, OuterOptimizer, PhaseMode, Task, TrainedModel, TrainingConfig};
use crate::policy::NetworkWeights;
use crate::seeding;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Sweep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepVar {
    Users,
    Elements,
    PmaxDbm,
    Clustering,
    Access,
}

impl SweepVar {
    pub fn key(self) -> &'static str {
        match self {
            SweepVar::Users => "K",
            SweepVar::Elements => "N",
            SweepVar::PmaxDbm => "P_max_dbm",
            SweepVar::Clustering => "clustering",
            SweepVar::Access => "access",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            SweepVar::Users,
            SweepVar::Elements,
            SweepVar::PmaxDbm,
            SweepVar::Clustering,
            SweepVar::Access,
        ]
        .into_iter()
        .find(|v| v.key() == s)
    }

    fn is_categorical(self) -> bool {
        matches!(self, SweepVar::Clustering | SweepVar::Access)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepValue {
    Count(usize),
    Dbm(f64),
    Clustering(ClusteringRule),
    Noma,
    Oma,
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Count(n) => write!(f, "{n}"),
            SweepValue::Dbm(x) => write!(f, "{x}"),
            SweepValue::Clustering(ClusteringRule::Qos) => f.write_str("qos"),
            SweepValue::Clustering(ClusteringRule::Channel) => f.write_str("channel"),
            SweepValue::Noma => f.write_str("noma"),
            SweepValue::Oma => f.write_str("oma"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub var: SweepVar,
    pub values: Vec<SweepValue>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub trials: usize,
    pub out_dir: PathBuf,
    pub model: Option<PathBuf>,
    pub record_wall_time: bool,
    pub topology: TopologyConfig,
    pub training: TrainingConfig,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Train,
            seed: 0,
            trials: 100,
            out_dir: PathBuf::from("results"),
            model: None,
            record_wall_time: true,
            topology: TopologyConfig::default(),
            training: TrainingConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials < 1 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if self.mode == Mode::Sweep {
            match &self.sweep {
                Some(s) if !s.values.is_empty() => {}
                _ => return Err(Error::InvalidConfig("a sweep needs sweep_var and nonempty sweep_values".into())),
            }
        }
        for (topology, training) in self.points()? {
            topology.validate()?;
            if training.access == Access::Oma {
                topology.validate_for_oma()?;
            }
            training.validate()?;
        }
        Ok(())
    }

    /// Topology and training configuration per sweep point; a single point
    /// when no sweep is configured.
    pub fn points(&self) -> Result<Vec<(TopologyConfig, TrainingConfig)>> {
        let Some(sweep) = &self.sweep else {
            return Ok(vec![(self.topology.clone(), self.training.clone())]);
        };
        let rule = match self.training.access {
            Access::Noma(rule) => rule,
            Access::Oma => ClusteringRule::Qos,
        };
        sweep
            .values
            .iter()
            .map(|value| {
                let mut topology = self.topology.clone();
                let mut training = self.training.clone();
                match (sweep.var, value) {
                    (SweepVar::Users, SweepValue::Count(k)) => topology.num_users = *k,
                    (SweepVar::Elements, SweepValue::Count(n)) => topology.num_elements = *n,
                    (SweepVar::PmaxDbm, SweepValue::Dbm(p)) => topology.p_max = dbm_to_watts(*p),
                    (SweepVar::Clustering, SweepValue::Clustering(r)) => training.access = Access::Noma(*r),
                    (SweepVar::Access, SweepValue::Noma) => training.access = Access::Noma(rule),
                    (SweepVar::Access, SweepValue::Oma) => training.access = Access::Oma,
                    (var, value) => {
                        return Err(Error::InvalidConfig(format!("`{value}` is not a value of {}", var.key())));
                    }
                }
                Ok((topology, training))
            })
            .collect()
    }
}

/// Every recognized configuration key.
pub const CONFIG_KEYS: &[&str] = &[
    "mode",
    "seed",
    "trials",
    "out_dir",
    "model",
    "record_wall_time",
    "K",
    "N",
    "M",
    "P_max_dbm",
    "area_width",
    "bs_x",
    "bs_y",
    "ris_x",
    "ris_y",
    "alpha",
    "ris_alpha",
    "kappa",
    "bandwidth_hz",
    "noise_psd_dbm_hz",
    "qos_min_mbps",
    "qos_max_mbps",
    "min_distance",
    "J",
    "gamma_theta",
    "gamma_eta",
    "episodes",
    "batch",
    "second_order",
    "w1",
    "w2",
    "phase_mode",
    "optimizer",
    "hidden",
    "access",
    "clustering",
    "fixed_scenarios",
    "grad_clip",
    "sweep_var",
    "sweep_values",
];

/// Source line of an override that did not come from a file.
pub const OVERRIDE_LINE: usize = 0;

struct Entry {
    line: usize,
    value: String,
}

impl Entry {
    fn err(&self, message: String) -> Error {
        Error::Parse {
            line: self.line,
            message,
        }
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        self.value
            .parse()
            .map_err(|_| self.err(format!("{key}: `{}` is not {what}", self.value)))
    }

    fn real(&self, key: &str) -> Result<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if !x.is_finite() {
            return Err(self.err(format!("{key}: `{}` is not finite", self.value)));
        }
        Ok(x)
    }

    fn count(&self, key: &str) -> Result<usize> {
        self.parse(key, "a nonnegative integer")
    }

    fn flag(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    fn choice<T: Copy>(&self, key: &str, options: &[(&str, T)]) -> Result<T> {
        options
            .iter()
            .find(|(name, _)| *name == self.value)
            .map(|&(_, v)| v)
            .ok_or_else(|| {
                let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
                self.err(format!("{key}: `{}` is not one of {}", self.value, names.join(", ")))
            })
    }
}

fn split_pair(text: &str, line: usize) -> Result<(String, String)> {
    let (k, v) = text.split_once('=').ok_or_else(|| Error::Parse {
        line,
        message: format!("expected key=value, got `{text}`"),
    })?;
    let key = k.trim().trim_start_matches("--").to_string();
    if !CONFIG_KEYS.contains(&key.as_str()) {
        return Err(Error::UnknownKey { line, key });
    }
    Ok((key, v.trim().to_string()))
}

/// Parses `key=value` text and applies `overrides` (each `key=value`, an
/// optional leading `--` is accepted) on top.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_pair(line, i + 1)?;
        entries.insert(key, Entry { line: i + 1, value });
    }
    for o in overrides {
        let (key, value) = split_pair(o, OVERRIDE_LINE)?;
        entries.insert(
            key,
            Entry {
                line: OVERRIDE_LINE,
                value,
            },
        );
    }
    build_config(&entries)
}

/// Reads the file at `path` (if any) and applies `overrides`.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

fn build_config(entries: &BTreeMap<String, Entry>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let t = &mut cfg.topology;
    let tr = &mut cfg.training;
    let mut ris = (None, None);
    let mut clustering = ClusteringRule::Qos;
    let mut oma = false;
    let mut qos = (t.qos_range.0 / 1e6, t.qos_range.1 / 1e6);
    let mut sweep_var = None;
    let mut sweep_values = None;

    for (key, e) in entries {
        let k = key.as_str();
        match k {
            "mode" => cfg.mode = e.choice(k, &[("train", Mode::Train), ("eval", Mode::Eval), ("sweep", Mode::Sweep)])?,
            "seed" => cfg.seed = e.parse(k, "a seed")?,
            "trials" => cfg.trials = e.count(k)?,
            "out_dir" => cfg.out_dir = PathBuf::from(&e.value),
            "model" => cfg.model = Some(PathBuf::from(&e.value)),
            "record_wall_time" => cfg.record_wall_time = e.flag(k)?,
            "K" => t.num_users = e.count(k)?,
            "N" => t.num_elements = e.count(k)?,
            "M" => t.num_antennas = e.count(k)?,
            "P_max_dbm" => t.p_max = dbm_to_watts(e.real(k)?),
            "area_width" => t.area_width = e.real(k)?,
            "bs_x" => t.bs_position[0] = e.real(k)?,
            "bs_y" => t.bs_position[1] = e.real(k)?,
            "ris_x" => ris.0 = Some(e.real(k)?),
            "ris_y" => ris.1 = Some(e.real(k)?),
            "alpha" => t.path_loss_exponent = e.real(k)?,
            "ris_alpha" => t.ris_link_exponent = e.real(k)?,
            "kappa" => t.rician_factor = e.real(k)?,
            "bandwidth_hz" => t.bandwidth = e.real(k)?,
            "noise_psd_dbm_hz" => t.noise_psd = e.real(k)?,
            "qos_min_mbps" => qos.0 = e.real(k)?,
            "qos_max_mbps" => qos.1 = e.real(k)?,
            "min_distance" => t.min_distance = e.real(k)?,
            "J" => tr.inner_steps = e.count(k)?,
            "gamma_theta" => tr.gamma_theta_init = e.real(k)?,
            "gamma_eta" => tr.gamma_eta = e.real(k)?,
            "episodes" => tr.episodes = e.count(k)?,
            "batch" => tr.batch_size = e.count(k)?,
            "second_order" => tr.second_order = e.flag(k)?,
            "w1" => tr.loss_weights.w1 = e.real(k)?,
            "w2" => tr.loss_weights.w2 = e.real(k)?,
            "phase_mode" => tr.phase_mode = e.choice(k, &[("wrap", PhaseMode::Wrap), ("clip", PhaseMode::Clip)])?,
            "optimizer" => tr.optimizer = e.choice(k, &[("sgd", OuterOptimizer::Sgd), ("adam", OuterOptimizer::Adam)])?,
            "hidden" => {
                tr.hidden = e
                    .value
                    .split(',')
                    .map(|w| w.trim().parse().map_err(|_| e.err(format!("hidden: `{w}` is not a width"))))
                    .collect::<Result<_>>()?
            }
            "access" => oma = e.choice(k, &[("noma", false), ("oma", true)])?,
            "clustering" => {
                clustering = e.choice(k, &[("qos", ClusteringRule::Qos), ("channel", ClusteringRule::Channel)])?
            }
            "fixed_scenarios" => tr.fixed_scenarios = e.flag(k)?,
            "grad_clip" => tr.grad_clip = e.real(k)?,
            "sweep_var" => {
                let var = SweepVar::parse(&e.value).ok_or_else(|| {
                    e.err(format!("sweep_var: `{}` is not one of K, N, P_max_dbm, clustering, access", e.value))
                })?;
                sweep_var = Some((var, e.line));
            }
            "sweep_values" => sweep_values = Some(e),
            _ => unreachable!("keys are checked against CONFIG_KEYS"),
        }
    }

    t.qos_range = (qos.0 * 1e6, qos.1 * 1e6);
    t.ris_position = match ris {
        (Some(x), Some(y)) => Some([x, y]),
        (None, None) => None,
        _ => return Err(Error::InvalidConfig("ris_x and ris_y must be given together".into())),
    };
    tr.access = if oma { Access::Oma } else { Access::Noma(clustering) };
    tr.seed = cfg.seed;
    cfg.sweep = match (sweep_var, sweep_values) {
        (Some((var, _)), Some(e)) => Some(Sweep {
            var,
            values: parse_sweep_values(var, e)?,
        }),
        (None, None) => None,
        (Some((_, line)), None) => {
            return Err(Error::Parse {
                line,
                message: "sweep_var needs sweep_values".into(),
            })
        }
        (None, Some(e)) => return Err(e.err("sweep_values needs sweep_var".into())),
    };
    Ok(cfg)
}

fn parse_sweep_values(var: SweepVar, e: &Entry) -> Result<Vec<SweepValue>> {
    e.value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let bad = || e.err(format!("sweep_values: `{s}` is not a value of {}", var.key()));
            match var {
                SweepVar::Users | SweepVar::Elements => s.parse().map(SweepValue::Count).map_err(|_| bad()),
                SweepVar::PmaxDbm => s
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(SweepValue::Dbm)
                    .ok_or_else(bad),
                SweepVar::Clustering => match s {
                    "qos" => Ok(SweepValue::Clustering(ClusteringRule::Qos)),
                    "channel" => Ok(SweepValue::Clustering(ClusteringRule::Channel)),
                    _ => Err(bad()),
                },
                SweepVar::Access => match s {
                    "noma" => Ok(SweepValue::Noma),
                    "oma" => Ok(SweepValue::Oma),
                    _ => Err(bad()),
                },
            }
        })
        .collect()
}

/// Rayon pool with at most `RNM_THREADS` workers (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let threads = match std::env::var("RNM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n.min(cores),
            _ => return Err(Error::InvalidConfig(format!("RNM_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => cores,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))
}

/// Aggregate over the test scenarios of one sweep point.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub sweep_var: String,
    pub value: String,
    /// NaN when every trial failed.
    pub mean_rate_mbps: f64,
    pub stderr: f64,
    pub mean_violation_mbps: f64,
    /// Successful trials.
    pub trials: usize,
    pub wall_s: f64,
}

impl ResultRow {
    pub fn failed(&self) -> bool {
        self.trials == 0
    }
}

/// Outcome of one test scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub point: usize,
    pub trial: usize,
    /// Sum rate at the initial phases, Mbit/s.
    pub initial_rate_mbps: f64,
    /// Sum rate after the inner loop, Mbit/s; NaN when the trial failed.
    pub rate_mbps: f64,
    pub violation_mbps: f64,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.rate_mbps.is_nan()
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    pub trials: Vec<TrialRecord>,
    pub models: Vec<TrainedModel>,
}

// stream tags under the experiment seed
const STREAM_TEST_TASK: u64 = 10;
const STREAM_TEST_PHASE: u64 = 11;

/// Test scenario and initial phases for `trial`.
pub fn test_case(topology: &TopologyConfig, access: Access, seed: u64, trial: usize) -> Result<(Task, Vec<f64>)> {
    let task = Task::sample(topology, seeding::derive(seed, &[STREAM_TEST_TASK, trial as u64]), access)?;
    let theta0 = maml::random_phases(
        topology.num_elements,
        seeding::derive(seed, &[STREAM_TEST_PHASE, trial as u64]),
    );
    Ok((task, theta0))
}

fn is_trial_failure(e: &Error) -> bool {
    matches!(e, Error::SingularMatrix { .. } | Error::NonFiniteValue { .. })
}

fn run_trial(
    topology: &TopologyConfig,
    training: &TrainingConfig,
    model: &TrainedModel,
    seed: u64,
    point: usize,
    trial: usize,
) -> Result<TrialRecord> {
    let (task, theta0) = test_case(topology, training.access, seed, trial)?;
    let out = maml::infer(
        &model.weights,
        &model.step_size,
        &task,
        &theta0,
        training.inner_steps,
        training.loss_weights,
        training.phase_mode,
    );
    match out {
        Ok(inf) => Ok(TrialRecord {
            point,
            trial,
            initial_rate_mbps: inf.trajectory.sum_rates_mbps[0],
            rate_mbps: inf.report.sum_rate_mbps(),
            violation_mbps: inf.report.total_violation_mbps(),
        }),
        Err(e) if is_trial_failure(&e) => Ok(TrialRecord {
            point,
            trial,
            initial_rate_mbps: f64::NAN,
            rate_mbps: f64::NAN,
            violation_mbps: f64::NAN,
        }),
        Err(e) => Err(e),
    }
}

/// Mean and standard error of the mean; the error is 0 for one sample.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Evaluates `model` on the test scenarios of sweep point `point`.
pub fn evaluate_point(
    cfg: &ExperimentConfig,
    point: usize,
    topology: &TopologyConfig,
    training: &TrainingConfig,
    model: &TrainedModel,
) -> Result<(ResultRow, Vec<TrialRecord>)> {
    let start = Instant::now();
    let records: Vec<TrialRecord> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(topology, training, model, cfg.seed, point, t))
        .collect::<Result<_>>()?;
    let ok: Vec<&TrialRecord> = records.iter().filter(|r| !r.failed()).collect();
    let rates: Vec<f64> = ok.iter().map(|r| r.rate_mbps).collect();
    let (mean, stderr) = mean_and_stderr(&rates);
    let violation = if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().map(|r| r.violation_mbps).sum::<f64>() / ok.len() as f64
    };
    let (var, value) = match &cfg.sweep {
        Some(s) => (s.var.key().to_string(), s.values[point].to_string()),
        None => ("none".to_string(), "-".to_string()),
    };
    let row = ResultRow {
        sweep_var: var,
        value,
        mean_rate_mbps: mean,
        stderr,
        mean_violation_mbps: violation,
        trials: ok.len(),
        wall_s: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
    };
    Ok((row, records))
}

/// Trains one model per sweep point, then evaluates each.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let models = cfg
        .points()?
        .iter()
        .map(|(topology, training)| maml::train(topology, training))
        .collect::<Result<Vec<_>>>()?;
    run_sweep_with_models(cfg, models)
}

/// Evaluates already trained models, one per sweep point.
pub fn run_sweep_with_models(cfg: &ExperimentConfig, models: Vec<TrainedModel>) -> Result<SweepOutcome> {
    cfg.validate()?;
    let points = cfg.points()?;
    if models.len() != points.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} models for {} sweep points",
            models.len(),
            points.len()
        )));
    }
    let mut rows = Vec::with_capacity(points.len());
    let mut trials = Vec::new();
    for (i, ((topology, training), model)) in points.iter().zip(&models).enumerate() {
        model.weights.expect_dims(&training.layer_dims(topology))?;
        let (row, records) = evaluate_point(cfg, i, topology, training, model)?;
        rows.push(row);
        trials.extend(records);
    }
    Ok(SweepOutcome { rows, trials, models })
}

pub const RESULTS_HEADER: &str = "sweep_var,value,mean_rate_mbps,stderr,mean_violation_mbps,trials,wall_s";
pub const TRIALS_HEADER: &str = "point,trial,initial_rate_mbps,rate_mbps,violation_mbps";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep_var, r.value, r.mean_rate_mbps, r.stderr, r.mean_violation_mbps, r.trials, r.wall_s
        ));
    }
    out
}

pub fn parse_results_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(Error::FormatVersionMismatch("results.csv header".into())),
    }
    lines
        .map(|(i, l)| {
            let err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(err("expected 7 fields"));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
            Ok(ResultRow {
                sweep_var: f[0].to_string(),
                value: f[1].to_string(),
                mean_rate_mbps: real(f[2])?,
                stderr: real(f[3])?,
                mean_violation_mbps: real(f[4])?,
                trials: f[5].parse().map_err(|_| err("bad trial count"))?,
                wall_s: real(f[6])?,
            })
        })
        .collect()
}

pub fn trials_csv(records: &[TrialRecord]) -> String {
    let mut out = format!("{TRIALS_HEADER}\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.point, r.trial, r.initial_rate_mbps, r.rate_mbps, r.violation_mbps
        ));
    }
    out
}

/// Gnuplot data: one block per series (mean rate, mean violation), blocks
/// separated by two blank lines. Categorical sweeps use the point index as
/// the x coordinate.
pub fn plot_data(rows: &[ResultRow]) -> String {
    let categorical = rows
        .first()
        .and_then(|r| SweepVar::parse(&r.sweep_var))
        .is_none_or(SweepVar::is_categorical);
    let x = |i: usize, r: &ResultRow| if categorical { i.to_string() } else { r.value.clone() };
    let mut out = String::new();
    if categorical {
        let labels: Vec<String> = rows.iter().enumerate().map(|(i, r)| format!("{i}={}", r.value)).collect();
        out.push_str(&format!("# x labels: {}\n", labels.join(" ")));
    }
    let series: [(&str, fn(&ResultRow) -> f64); 2] = [
        ("mean_rate_mbps", |r| r.mean_rate_mbps),
        ("mean_violation_mbps", |r| r.mean_violation_mbps),
    ];
    for (s, (name, get)) in series.iter().enumerate() {
        if s > 0 {
            out.push_str("\n\n");
        }
        let var = rows.first().map_or("value", |r| r.sweep_var.as_str());
        out.push_str(&format!("# {var} {name}\n"));
        for (i, r) in rows.iter().enumerate() {
            out.push_str(&format!("{} {}\n", x(i, r), get(r)));
        }
    }
    out
}

/// Writes `results.csv` and `plot_data.txt` into `out_dir`.
pub fn write_results(rows: &[ResultRow], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("results.csv"), results_csv(rows))?;
    std::fs::write(out_dir.join("plot_data.txt"), plot_data(rows))?;
    Ok(())
}

/// Path of the learned step size stored next to a model file.
pub fn step_size_path(model: &Path) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(".gamma");
    PathBuf::from(s)
}

/// Saves weights plus a `<model>.gamma` file holding `log gamma_theta`.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    model.weights.save(path)?;
    std::fs::write(step_size_path(path), format!("{:?}\n", model.step_size.log_gamma))?;
    Ok(())
}

/// Loads a model saved by [`save_model`]; a missing step-size file falls
/// back to `fallback_gamma`.
pub fn load_model(path: &Path, fallback_gamma: f64) -> Result<TrainedModel> {
    let weights = NetworkWeights::load(path)?;
    let step_size = match std::fs::read_to_string(step_size_path(path)) {
        Ok(text) => LearnedStepSize {
            log_gamma: text.trim().parse().map_err(|_| Error::Parse {
                line: 1,
                message: "step size file does not hold a number".into(),
            })?,
        },
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => LearnedStepSize::new(fallback_gamma),
        Err(e) => return Err(e.into()),
    };
    Ok(TrainedModel {
        weights,
        step_size,
        log: Vec::new(),
    })
}
