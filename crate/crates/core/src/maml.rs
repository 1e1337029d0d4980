//! Meta-learned power allocation with unrolled phase-shift descent.
//!
//! For a task (scenario + channels) the loss at phase shifts `theta` is
//!
//! ```text
//! L(theta, eta) = w1 * sum_k R_k + w2 * sum_k max(Q_k - R_k, 0)      (Mbit/s)
//! ```
//!
//! where the powers come from the network `G_eta` evaluated on the combined
//! channel `H(theta)`. The inner loop takes `J` gradient steps on `theta`
//! with step size `gamma = exp(g)`; the outer step moves `eta` and `g`
//! against the gradient of the final loss, differentiating through every
//! inner step when second-order mode is on.

use std::f64::consts::TAU;

use rayon::prelude::*;

use crate::channel::{self, ChannelSet, Scenario, TapeChannels, TopologyConfig};
use crate::error::{Error, Result};
use crate::noma::{self, Clustering, PowerAllocation, RateReport, TapeRates};
use crate::policy::{self, NetworkWeights, TapeNetwork};
use crate::seeding;
use crate::tape::{Tape, Var};

/// Weights of the rate term (`w1 < 0`) and the QoS shortfall term (`w2 > 0`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w1: -1.0, w2: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 < 0.0 && self.w2 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights need w1 < 0 and w2 > 0, got w1={} w2={}",
                self.w1, self.w2
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClusteringRule {
    Qos,
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Noma(ClusteringRule),
    Oma,
}

impl Default for Access {
    fn default() -> Self {
        Access::Noma(ClusteringRule::Qos)
    }
}

/// How phases are brought back into range after an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PhaseMode {
    /// Modulo `2 pi` into `[0, 2 pi)`; the loss is periodic so values are unchanged.
    #[default]
    Wrap,
    /// Clamp to `[0, 2 pi]`.
    Clip,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OuterOptimizer {
    /// `p <- p - gamma_eta * grad`.
    #[default]
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    /// Inner steps `J`.
    pub inner_steps: usize,
    pub gamma_theta_init: f64,
    /// Outer learning rate `gamma_eta`.
    pub gamma_eta: f64,
    pub episodes: usize,
    pub batch_size: usize,
    pub second_order: bool,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub phase_mode: PhaseMode,
    pub optimizer: OuterOptimizer,
    pub hidden: Vec<usize>,
    pub access: Access,
    /// Reuse the first batch of scenarios in every episode.
    pub fixed_scenarios: bool,
    /// Cap on the norm of the batch-mean outer gradient over the network
    /// parameters and `log_gamma`; 0 disables it. Once `gamma_theta` grows the
    /// unrolled steps turn chaotic and single batches can produce gradients
    /// orders of magnitude above the typical ones, which saturate the softmax
    /// for good.
    pub grad_clip: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            inner_steps: 5,
            gamma_theta_init: 0.01,
            gamma_eta: 1e-3,
            episodes: 2000,
            batch_size: 16,
            second_order: true,
            seed: 0,
            loss_weights: LossWeights::default(),
            phase_mode: PhaseMode::Wrap,
            optimizer: OuterOptimizer::Sgd,
            hidden: policy::DEFAULT_HIDDEN.to_vec(),
            access: Access::default(),
            fixed_scenarios: false,
            grad_clip: 100.0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.inner_steps < 1 {
            return bad("at least one inner step is required".into());
        }
        if !(self.gamma_theta_init > 0.0) || !(self.gamma_eta > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be nonempty".into());
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return bad(format!("gradient clip must be finite and nonnegative, got {}", self.grad_clip));
        }
        self.loss_weights.validate()
    }

    pub fn layer_dims(&self, topology: &TopologyConfig) -> Vec<usize> {
        policy::layer_dims(topology.num_users, topology.num_antennas, &self.hidden)
    }
}

/// Meta-learned inner step size, `gamma_theta = exp(log_gamma)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearnedStepSize {
    pub log_gamma: f64,
}

impl LearnedStepSize {
    pub fn new(gamma: f64) -> Self {
        LearnedStepSize { log_gamma: gamma.ln() }
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma.exp()
    }
}

/// One problem instance together with its user ordering.
#[derive(Clone, Debug)]
pub struct Task {
    pub scenario: Scenario,
    pub channels: ChannelSet,
    pub access: Access,
    /// NOMA only.
    pub clustering: Option<Clustering>,
    /// User index per power slot.
    pub slots: Vec<usize>,
}

impl Task {
    pub fn new(scenario: Scenario, channels: ChannelSet, access: Access) -> Result<Self> {
        let clustering = match access {
            Access::Noma(ClusteringRule::Qos) => Some(noma::cluster_by_qos(&scenario.qos)?),
            Access::Noma(ClusteringRule::Channel) => Some(noma::cluster_by_channel(&channels.direct_gains())?),
            Access::Oma => None,
        };
        let slots = match &clustering {
            Some(c) => c.slots(),
            None => (0..scenario.num_users()).collect(),
        };
        Ok(Task {
            scenario,
            channels,
            access,
            clustering,
            slots,
        })
    }

    /// Draws topology and fading from one seed.
    pub fn sample(topology: &TopologyConfig, seed: u64, access: Access) -> Result<Self> {
        if access == Access::Oma {
            topology.validate_for_oma()?;
        }
        let scenario = channel::generate_topology(topology, seeding::derive(seed, &[0]))?;
        let channels = channel::sample_channels(&scenario, seeding::derive(seed, &[1]))?;
        Self::new(scenario, channels, access)
    }

    pub fn num_elements(&self) -> usize {
        self.scenario.config.num_elements
    }

    /// Rates for plain (non-tape) phases and slot-ordered powers.
    pub fn rates(&self, theta: &[f64], power: &PowerAllocation) -> Result<RateReport> {
        match &self.clustering {
            Some(c) => noma::sum_rate(&self.channels, theta, c, power, &self.scenario),
            None => noma::oma_sum_rate(&self.channels, theta, power, &self.scenario),
        }
    }
}

/// Uniform initial phases on `[0, 2 pi)`.
pub fn random_phases(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = seeding::rng(seed);
    (0..n).map(|_| rng.random::<f64>() * TAU).collect()
}

/// Loss and intermediate quantities at one phase vector, on a tape.
pub struct Evaluation {
    pub loss: Var,
    pub rates: TapeRates,
    /// Slot order.
    pub powers: Vec<Var>,
}

pub fn loss_on_tape(
    tape: &mut Tape,
    task: &Task,
    channels: &TapeChannels,
    net: &TapeNetwork,
    theta: &[Var],
    weights: LossWeights,
) -> Result<Evaluation> {
    let s = &task.scenario;
    let h = channels.combined(tape, theta)?;
    let h_slots: Vec<_> = task.slots.iter().map(|&u| h[u].clone()).collect();
    let qos: Vec<f64> = task.slots.iter().map(|&u| s.qos[u]).collect();
    let pl: Vec<f64> = task.slots.iter().map(|&u| task.channels.path_loss[u]).collect();
    let input = policy::encode_inputs_on_tape(tape, &h_slots, &qos, &pl)?;
    let logits = net.forward(tape, &input)?;
    let powers = policy::map_to_power_on_tape(tape, &logits, s.config.p_max)?;
    let rates = match &task.clustering {
        Some(c) => noma::noma_rates_on_tape(tape, &h, c, &powers, s.noise_power, s.config.bandwidth)?,
        None => noma::oma_rates_on_tape(tape, &h, &powers, s.config.noise_psd, s.config.bandwidth)?,
    };

    let total_rate = tape.sum(&rates.rate_mbps)?;
    let mut shortfalls = Vec::with_capacity(rates.rate_mbps.len());
    for (&r, &q) in rates.rate_mbps.iter().zip(&s.qos) {
        let q = tape.constant(q / 1e6)?;
        let gap = tape.sub(q, r)?;
        shortfalls.push(tape.hinge(gap)?);
    }
    let total_shortfall = tape.sum(&shortfalls)?;
    let a = tape.scale(total_rate, weights.w1)?;
    let b = tape.scale(total_shortfall, weights.w2)?;
    let loss = tape.add(a, b)?;
    Ok(Evaluation { loss, rates, powers })
}

/// Loss value at plain phases.
pub fn loss(theta: &[f64], weights: &NetworkWeights, task: &Task, loss_weights: LossWeights) -> Result<f64> {
    let mut tape = Tape::new();
    let channels = TapeChannels::load(&mut tape, &task.channels)?;
    let net = TapeNetwork::load(&mut tape, weights)?;
    let theta = tape.constants(theta)?;
    let eval = loss_on_tape(&mut tape, task, &channels, &net, &theta, loss_weights)?;
    Ok(tape.value(eval.loss))
}

/// `(loss, dL/dtheta)` at plain phases.
pub fn loss_and_phase_gradient(theta: &[f64], weights: &NetworkWeights, task: &Task, loss_weights: LossWeights) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let channels = TapeChannels::load(&mut tape, &task.channels)?;
    let net = TapeNetwork::load(&mut tape, weights)?;
    let theta = tape.constants(theta)?;
    let eval = loss_on_tape(&mut tape, task, &channels, &net, &theta, loss_weights)?;
    Ok((tape.value(eval.loss), tape.backward(eval.loss, &theta)))
}

/// Wraps into `[0, 2 pi)` or clamps into `[0, 2 pi]`, numerically.
pub fn project_phase(value: f64, mode: PhaseMode) -> f64 {
    match mode {
        PhaseMode::Wrap => {
            let r = value.rem_euclid(TAU);
            if r >= TAU {
                0.0
            } else {
                r
            }
        }
        PhaseMode::Clip => value.clamp(0.0, TAU),
    }
}

fn project_on_tape(tape: &mut Tape, theta: Var, mode: PhaseMode) -> Result<Var> {
    let v = tape.value(theta);
    match mode {
        PhaseMode::Wrap => {
            if (0.0..TAU).contains(&v) {
                return Ok(theta);
            }
            let offset = v - v.rem_euclid(TAU);
            let c = tape.constant(offset)?;
            let wrapped = tape.sub(theta, c)?;
            if (0.0..TAU).contains(&tape.value(wrapped)) {
                Ok(wrapped)
            } else {
                // rounding landed exactly on the boundary
                tape.constant(project_phase(v, mode))
            }
        }
        PhaseMode::Clip => {
            if v < 0.0 {
                tape.constant(0.0)
            } else if v > TAU {
                tape.constant(TAU)
            } else {
                Ok(theta)
            }
        }
    }
}

/// Trajectory of one inner loop.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    /// `L(theta^(j))` for `j = 0..=J`.
    pub losses: Vec<f64>,
    /// Sum rate, Mbit/s, for `j = 0..=J`.
    pub sum_rates_mbps: Vec<f64>,
    /// Phases for `j = 0..=J`.
    pub thetas: Vec<Vec<f64>>,
    /// Slot-ordered powers for `j = 0..=J`.
    pub powers: Vec<Vec<f64>>,
    pub final_theta: Vec<f64>,
    pub final_power: PowerAllocation,
    pub report: RateReport,
}

/// Runs the inner loop on `tape`. With `differentiable` set, every gradient
/// step is recorded so the returned final loss depends on the network leaves
/// and `gamma` through all steps; otherwise each step restarts from constants.
#[allow(clippy::too_many_arguments)]
pub fn inner_loop(
    tape: &mut Tape,
    task: &Task,
    net: &TapeNetwork,
    gamma: Var,
    theta0: &[f64],
    steps: usize,
    loss_weights: LossWeights,
    mode: PhaseMode,
    differentiable: bool,
) -> Result<(Var, EpisodeResult)> {
    if steps < 1 {
        return Err(Error::InvalidConfig("the inner loop needs at least one step".into()));
    }
    if theta0.len() != task.num_elements() {
        return Err(Error::DimensionMismatch(format!(
            "{} phases for {} RIS elements",
            theta0.len(),
            task.num_elements()
        )));
    }
    let channels = TapeChannels::load(tape, &task.channels)?;
    let mut theta = tape.constants(theta0)?;
    let mut losses = Vec::with_capacity(steps + 1);
    let mut rates = Vec::with_capacity(steps + 1);
    let mut thetas = Vec::with_capacity(steps + 1);
    let mut powers = Vec::with_capacity(steps + 1);

    for step in 0..=steps {
        let eval = loss_on_tape(tape, task, &channels, net, &theta, loss_weights)?;
        losses.push(tape.value(eval.loss));
        rates.push(eval.rates.rate_mbps.iter().map(|&r| tape.value(r)).sum());
        thetas.push(tape.values(&theta));
        powers.push(tape.values(&eval.powers));
        if step == steps {
            let result = EpisodeResult {
                losses,
                sum_rates_mbps: rates,
                final_theta: tape.values(&theta),
                final_power: PowerAllocation(tape.values(&eval.powers)),
                report: eval.rates.report(tape, &task.scenario.qos),
                thetas,
                powers,
            };
            return Ok((eval.loss, result));
        }
        theta = if differentiable {
            let grads = tape.backward_as_graph(eval.loss, &theta)?;
            let mut next = Vec::with_capacity(theta.len());
            for (&t, &g) in theta.iter().zip(&grads) {
                let delta = tape.mul(gamma, g)?;
                let moved = tape.sub(t, delta)?;
                next.push(project_on_tape(tape, moved, mode)?);
            }
            next
        } else {
            let grads = tape.backward(eval.loss, &theta);
            let g = tape.value(gamma);
            let values: Vec<f64> = theta
                .iter()
                .zip(&grads)
                .map(|(&t, d)| project_phase(tape.value(t) - g * d, mode))
                .collect();
            tape.constants(&values)?
        };
    }
    unreachable!("loop returns on its last iteration")
}

/// Final loss, its gradient in `(eta..., g)` and the trajectory for one task.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    pub loss: f64,
    pub grad_params: Vec<f64>,
    pub grad_log_gamma: f64,
    pub result: EpisodeResult,
}

pub fn meta_gradient(weights: &NetworkWeights, step: &LearnedStepSize, task: &Task, theta0: &[f64], cfg: &TrainingConfig) -> Result<MetaGradient> {
    let mut tape = Tape::new();
    let net = TapeNetwork::load(&mut tape, weights)?;
    let log_gamma = tape.constant(step.log_gamma)?;
    let gamma = tape.exp(log_gamma)?;
    let (final_loss, result) = inner_loop(
        &mut tape,
        task,
        &net,
        gamma,
        theta0,
        cfg.inner_steps,
        cfg.loss_weights,
        cfg.phase_mode,
        cfg.second_order,
    )?;
    let mut wrt = net.params().to_vec();
    wrt.push(log_gamma);
    let mut grad = tape.backward(final_loss, &wrt);
    let grad_log_gamma = grad.pop().expect("log gamma appended");
    Ok(MetaGradient {
        loss: tape.value(final_loss),
        grad_params: grad,
        grad_log_gamma,
        result,
    })
}

/// Optimizer state for the outer update over `(eta..., g)`.
#[derive(Clone, Debug)]
pub struct OuterState {
    kind: OuterOptimizer,
    first: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl OuterState {
    pub fn new(kind: OuterOptimizer, num_params: usize) -> Self {
        let len = if kind == OuterOptimizer::Adam { num_params + 1 } else { 0 };
        OuterState {
            kind,
            first: vec![0.0; len],
            second: vec![0.0; len],
            t: 0,
        }
    }

    fn apply(&mut self, weights: &mut NetworkWeights, step: &mut LearnedStepSize, grad: &[f64], grad_g: f64, lr: f64) {
        match self.kind {
            OuterOptimizer::Sgd => {
                for (p, g) in weights.params_mut().zip(grad) {
                    *p -= lr * g;
                }
                step.log_gamma -= lr * grad_g;
            }
            OuterOptimizer::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.t += 1;
                let c1 = 1.0 - B1.powi(self.t);
                let c2 = 1.0 - B2.powi(self.t);
                let params = weights.params_mut().chain(std::iter::once(&mut step.log_gamma));
                let grads = grad.iter().chain(std::iter::once(&grad_g));
                for (((p, g), m), v) in params.zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = B1 * *m + (1.0 - B1) * g;
                    *v = B2 * *v + (1.0 - B2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                }
            }
        }
    }
}

/// Aggregate of one outer update.
#[derive(Clone, Debug)]
pub struct OuterStepReport {
    pub mean_loss: f64,
    pub mean_sum_rate_mbps: f64,
    /// Norm of the batch-mean gradient before clipping.
    pub grad_norm: f64,
    /// Tasks dropped because zero-forcing or the tape failed.
    pub skipped: usize,
    pub results: Vec<EpisodeResult>,
}

fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::SingularMatrix { .. } | Error::NonFiniteValue { .. })
}

/// One meta-update of `weights` and `step` over a batch of `(task, theta0)`.
pub fn outer_step(
    weights: &mut NetworkWeights,
    step: &mut LearnedStepSize,
    state: &mut OuterState,
    batch: &[(Task, Vec<f64>)],
    cfg: &TrainingConfig,
) -> Result<OuterStepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("outer step needs a nonempty batch".into()));
    }
    let outcomes: Vec<Result<MetaGradient>> = {
        let w = &*weights;
        let s = &*step;
        batch
            .par_iter()
            .map(|(task, theta0)| meta_gradient(w, s, task, theta0, cfg))
            .collect()
    };

    let mut grad = vec![0.0; weights.num_params()];
    let mut grad_g = 0.0;
    let (mut loss_sum, mut rate_sum, mut used, mut skipped) = (0.0, 0.0, 0usize, 0usize);
    let mut results = Vec::with_capacity(batch.len());
    for outcome in outcomes {
        match outcome {
            Ok(m) => {
                for (a, b) in grad.iter_mut().zip(&m.grad_params) {
                    *a += b;
                }
                grad_g += m.grad_log_gamma;
                loss_sum += m.loss;
                rate_sum += m.result.report.sum_rate_mbps();
                used += 1;
                results.push(m.result);
            }
            Err(e) if is_skippable(&e) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Ok(OuterStepReport {
            mean_loss: f64::NAN,
            mean_sum_rate_mbps: f64::NAN,
            grad_norm: 0.0,
            skipped,
            results,
        });
    }
    let n = used as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    grad_g /= n;
    let grad_norm = (grad.iter().map(|g| g * g).sum::<f64>() + grad_g * grad_g).sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let scale = cfg.grad_clip / grad_norm;
        grad.iter_mut().for_each(|g| *g *= scale);
        grad_g *= scale;
    }
    state.apply(weights, step, &grad, grad_g, cfg.gamma_eta);
    Ok(OuterStepReport {
        mean_loss: loss_sum / n,
        mean_sum_rate_mbps: rate_sum / n,
        grad_norm,
        skipped,
        results,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    pub mean_loss: f64,
    pub mean_sum_rate_mbps: f64,
    pub gamma_theta: f64,
    /// Cumulative count of skipped tasks.
    pub skipped_episodes: usize,
}

pub const LOG_HEADER: &str = "episode,mean_loss,mean_sum_rate_mbps,gamma_theta,skipped_episodes";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{}",
            self.episode, self.mean_loss, self.mean_sum_rate_mbps, self.gamma_theta, self.skipped_episodes
        )
    }
}

pub fn log_to_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

/// Output of [`train`].
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub weights: NetworkWeights,
    pub step_size: LearnedStepSize,
    pub log: Vec<LogRow>,
}

// stream tags under the training seed
const STREAM_INIT: u64 = 0;
const STREAM_TASK: u64 = 1;
const STREAM_PHASE: u64 = 2;

/// Episode-by-episode driver for the meta-training loop.
pub struct Trainer {
    topology: TopologyConfig,
    cfg: TrainingConfig,
    weights: NetworkWeights,
    step: LearnedStepSize,
    state: OuterState,
    episode: usize,
    skipped: usize,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(topology: &TopologyConfig, cfg: &TrainingConfig) -> Result<Self> {
        topology.validate()?;
        if cfg.access == Access::Oma {
            topology.validate_for_oma()?;
        }
        cfg.validate()?;
        let weights = policy::init_weights(&cfg.layer_dims(topology), seeding::derive(cfg.seed, &[STREAM_INIT]))?;
        let state = OuterState::new(cfg.optimizer, weights.num_params());
        Ok(Trainer {
            topology: topology.clone(),
            cfg: cfg.clone(),
            weights,
            step: LearnedStepSize::new(cfg.gamma_theta_init),
            state,
            episode: 0,
            skipped: 0,
            log: Vec::new(),
        })
    }

    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn weights(&self) -> &NetworkWeights {
        &self.weights
    }

    pub fn step_size(&self) -> LearnedStepSize {
        self.step
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Tasks and initial phases for `episode`.
    pub fn batch(&self, episode: usize) -> Result<Vec<(Task, Vec<f64>)>> {
        let task_episode = if self.cfg.fixed_scenarios { 0 } else { episode as u64 };
        (0..self.cfg.batch_size as u64)
            .map(|b| {
                let task = Task::sample(
                    &self.topology,
                    seeding::derive(self.cfg.seed, &[STREAM_TASK, task_episode, b]),
                    self.cfg.access,
                )?;
                let theta0 = random_phases(
                    self.topology.num_elements,
                    seeding::derive(self.cfg.seed, &[STREAM_PHASE, episode as u64, b]),
                );
                Ok((task, theta0))
            })
            .collect()
    }

    /// Draws a batch, runs the inner loops and applies one outer update.
    pub fn run_episode(&mut self) -> Result<OuterStepReport> {
        let batch = self.batch(self.episode)?;
        let report = outer_step(&mut self.weights, &mut self.step, &mut self.state, &batch, &self.cfg)?;
        self.skipped += report.skipped;
        self.log.push(LogRow {
            episode: self.episode,
            mean_loss: report.mean_loss,
            mean_sum_rate_mbps: report.mean_sum_rate_mbps,
            gamma_theta: self.step.gamma(),
            skipped_episodes: self.skipped,
        });
        self.episode += 1;
        Ok(report)
    }

    pub fn finish(self) -> TrainedModel {
        TrainedModel {
            weights: self.weights,
            step_size: self.step,
            log: self.log,
        }
    }
}

/// Meta-trains a power-allocation network for `topology`.
pub fn train(topology: &TopologyConfig, cfg: &TrainingConfig) -> Result<TrainedModel> {
    let mut trainer = Trainer::new(topology, cfg)?;
    for _ in 0..cfg.episodes {
        trainer.run_episode()?;
    }
    Ok(trainer.finish())
}

/// Result of running the inner loop with frozen weights.
#[derive(Clone, Debug)]
pub struct Inference {
    pub theta: Vec<f64>,
    pub power: PowerAllocation,
    pub report: RateReport,
    pub trajectory: EpisodeResult,
}

/// Optimizes phases for `task` from `theta0` with `steps` inner steps; the
/// network supplies the matching power allocation.
pub fn infer(
    weights: &NetworkWeights,
    step: &LearnedStepSize,
    task: &Task,
    theta0: &[f64],
    steps: usize,
    loss_weights: LossWeights,
    mode: PhaseMode,
) -> Result<Inference> {
    let mut tape = Tape::new();
    let net = TapeNetwork::load(&mut tape, weights)?;
    let gamma = tape.constant(step.gamma())?;
    let (_, trajectory) = inner_loop(&mut tape, task, &net, gamma, theta0, steps, loss_weights, mode, false)?;
    Ok(Inference {
        theta: trajectory.final_theta.clone(),
        power: trajectory.final_power.clone(),
        report: trajectory.report.clone(),
        trajectory,
    })
}
