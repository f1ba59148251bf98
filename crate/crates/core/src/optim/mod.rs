//! Optimizer loops over a [`ShardedProblem`] on the simulated cluster.
//!
//! Every run starts from a given point, executes `K` epochs of `T` inner
//! steps and charges each message to a [`CommLedger`]. Per epoch the SVRG
//! variants pay for distributing the snapshot `x̄`, gathering the shard
//! gradients at `x̄` and broadcasting `∇F(x̄)`. Per inner step all methods pay
//! for broadcasting `x_{t−1}`, telling each sampled worker it was drawn
//! (one scalar) and collecting `d` scalars from every distinct sampled
//! worker. ASD-SVRG additionally runs the weighted-sampling protocol among
//! the workers and ships the `R` sampled indices to the server.

mod rates;
mod trace;

pub use rates::{theoretical_rate, RateKind, RateParams};
pub use trace::{RunTrace, TraceRow};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::comm::{optimal_comm_sample, pc_sample, server_broadcast, server_gather, CommLedger, SampleHistogram};
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::problem::ShardedProblem;
use crate::sampling::{estimate_shard_weight, Categorical, EstimationConfig};

/// Runs abort once the train loss exceeds this multiple of the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistributionMode {
    Uniform,
    /// `p_m ∝ L_m` from [`ShardedProblem::lipschitz_info`].
    LipschitzImportance,
    /// Re-estimated on every inner step.
    Adaptive,
}

impl fmt::Display for DistributionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionMode::Uniform => "uniform",
            DistributionMode::LipschitzImportance => "lipschitz_importance",
            DistributionMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for DistributionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(DistributionMode::Uniform),
            "lipschitz_importance" | "importance" => Ok(DistributionMode::LipschitzImportance),
            "adaptive" => Ok(DistributionMode::Adaptive),
            other => Err(Error::invalid(format!("unknown distribution mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorPolicy {
    /// Next snapshot drawn uniformly from `x_0, …, x_{T−1}`.
    RandomIterate,
    LastIterate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingProtocol {
    Pc,
    OptimalComm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub eta: f64,
    pub epochs: usize,
    pub inner_iters: usize,
    /// Worker draws averaged per inner step.
    pub group_size: usize,
    pub estimation: EstimationConfig,
    pub distribution_mode: DistributionMode,
    pub l2_for_sgd: f64,
    pub seed: u64,
    pub anchor: AnchorPolicy,
    pub protocol: SamplingProtocol,
    /// Record a trace row every this many inner steps (the last step of each
    /// epoch is always recorded).
    pub record_every: usize,
    pub divergence_factor: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            eta: 0.01,
            epochs: 30,
            inner_iters: 100,
            group_size: 4,
            estimation: EstimationConfig::default(),
            distribution_mode: DistributionMode::Uniform,
            l2_for_sgd: 0.02,
            seed: 0,
            anchor: AnchorPolicy::RandomIterate,
            protocol: SamplingProtocol::Pc,
            record_every: 1,
            divergence_factor: DIVERGENCE_FACTOR,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("step size must be finite and nonnegative, got {}", self.eta)));
        }
        if self.epochs == 0 || self.inner_iters == 0 || self.group_size == 0 {
            return Err(Error::invalid("K, T and R must all be at least 1"));
        }
        if self.record_every == 0 {
            return Err(Error::invalid("record cadence must be at least 1"));
        }
        if !(self.l2_for_sgd >= 0.0) {
            return Err(Error::invalid("l2 coefficient must be nonnegative"));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::invalid("divergence factor must exceed 1"));
        }
        self.estimation.validate()
    }
}

/// `(∇F_m(x) − ∇F_m(x̄)) / (M p_m) + ∇F(x̄)`.
pub fn vr_direction(
    problem: &ShardedProblem,
    worker: usize,
    x: &[f64],
    anchor: &[f64],
    anchor_full_grad: &[f64],
    p_m: f64,
) -> Result<Vec<f64>> {
    if !(p_m > 0.0) {
        return Err(Error::invalid(format!("sampling probability must be positive, got {p_m}")));
    }
    if anchor_full_grad.len() != problem.dim() {
        return Err(Error::invalid("anchor gradient length does not match problem dimension"));
    }
    let gx = problem.shard_gradient(worker, x)?;
    let ga = problem.shard_gradient(worker, anchor)?;
    Ok(combine(&gx, &ga, anchor_full_grad, p_m, problem.num_workers()))
}

fn combine(gx: &[f64], ga: &[f64], anchor_full_grad: &[f64], p_m: f64, workers: usize) -> Vec<f64> {
    let s = 1.0 / (workers as f64 * p_m);
    gx.iter()
        .zip(ga)
        .zip(anchor_full_grad)
        .map(|((a, b), g)| s * (a - b) + g)
        .collect()
}

/// What an ASD-SVRG step looked like, for instrumentation.
#[derive(Debug)]
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    pub x_prev: &'a [f64],
    pub anchor: &'a [f64],
    pub anchor_full_grad: &'a [f64],
    pub estimated_weights: &'a [f64],
    pub probabilities: &'a [f64],
    pub histogram: &'a SampleHistogram,
    /// True when every estimated weight was zero and uniform was used.
    pub fell_back_to_uniform: bool,
}

struct Recorder<'p> {
    problem: &'p ShardedProblem,
    trace: RunTrace,
    limit: f64,
    record_every: usize,
    inner_iters: usize,
}

impl<'p> Recorder<'p> {
    fn new(problem: &'p ShardedProblem, config: &OptimizerConfig, x0: &[f64]) -> Self {
        let initial = problem.train_loss(x0);
        let limit = if initial > 0.0 {
            config.divergence_factor * initial
        } else {
            f64::INFINITY
        };
        Recorder {
            problem,
            trace: RunTrace {
                epoch_train_loss: vec![initial],
                ..RunTrace::default()
            },
            limit,
            record_every: config.record_every,
            inner_iters: config.inner_iters,
        }
    }

    fn check(&self, epoch: usize, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() || loss > self.limit {
            return Err(Error::Diverged {
                epoch,
                step,
                loss,
                limit: self.limit,
            });
        }
        Ok(())
    }

    fn step(&mut self, epoch: usize, step: usize, x: &[f64], ledger: &CommLedger) -> Result<()> {
        if step % self.record_every != 0 && step != self.inner_iters {
            return Ok(());
        }
        let train_loss = self.problem.train_loss(x);
        self.check(epoch, step, train_loss)?;
        self.trace.rows.push(TraceRow {
            epoch,
            step,
            train_loss,
            test_loss: self.problem.test_loss(x),
            test_accuracy: self.problem.test_accuracy(x),
            ledger: *ledger,
        });
        Ok(())
    }

    fn epoch_end(&mut self, epoch: usize, output: &[f64]) -> Result<()> {
        let loss = self.problem.train_loss(output);
        self.check(epoch, self.inner_iters, loss)?;
        self.trace.epoch_train_loss.push(loss);
        Ok(())
    }

    fn finish(mut self, x: Vec<f64>, ledger: CommLedger) -> RunTrace {
        self.trace.final_x = x;
        self.trace.ledger = ledger;
        self.trace
    }
}

fn check_start(problem: &ShardedProblem, x0: &[f64]) -> Result<()> {
    if x0.len() != problem.dim() {
        return Err(Error::invalid(format!(
            "initial point has length {}, problem dimension is {}",
            x0.len(),
            problem.dim()
        )));
    }
    Ok(())
}

/// Snapshot set-up shared by the SVRG variants: distribute `x̄`, gather the
/// shard gradients, broadcast `∇F(x̄)`.
fn anchor_phase(problem: &ShardedProblem, anchor: &[f64], ledger: &mut CommLedger) -> (Vec<Vec<f64>>, Vec<f64>) {
    let d = problem.dim();
    let m = problem.num_workers();
    server_broadcast(ledger, d, m);
    let shard_grads: Vec<Vec<f64>> = (0..m).map(|w| problem.shard_gradient_unchecked(w, anchor)).collect();
    server_gather(ledger, d, m);
    let mut full = vec![0.0; d];
    for g in &shard_grads {
        axpy(1.0, g, &mut full);
    }
    full.iter_mut().for_each(|v| *v /= m as f64);
    server_broadcast(ledger, d, m);
    (shard_grads, full)
}

/// Sampled workers learn they were drawn, then each returns `d` scalars.
fn collect_sampled(ledger: &mut CommLedger, distinct: usize, d: usize) {
    ledger.server_to_worker(distinct as u64);
    ledger.round(1);
    ledger.worker_to_server((distinct * d) as u64);
    ledger.round(1);
}

fn pick_anchor_slot(config: &OptimizerConfig, rng: &mut ChaCha8Rng) -> Option<usize> {
    match config.anchor {
        AnchorPolicy::RandomIterate => Some(rng.random_range(0..config.inner_iters)),
        AnchorPolicy::LastIterate => None,
    }
}

/// SVRG with a fixed sampling distribution, averaging `R` independent draws
/// per inner step (`R = 1` is the classical single-draw method).
pub fn run_svrg(problem: &ShardedProblem, config: &OptimizerConfig) -> Result<RunTrace> {
    run_svrg_from(problem, config, &vec![0.0; problem.dim()])
}

pub fn run_svrg_from(problem: &ShardedProblem, config: &OptimizerConfig, x0: &[f64]) -> Result<RunTrace> {
    config.validate()?;
    check_start(problem, x0)?;
    let m = problem.num_workers();
    let d = problem.dim();
    let dist = match config.distribution_mode {
        DistributionMode::Uniform => Categorical::uniform(m),
        DistributionMode::LipschitzImportance => {
            Categorical::from_weights(problem.lipschitz_info().per_shard).or_else(|e| match e {
                Error::DegenerateWeights => Ok(Categorical::uniform(m)),
                other => Err(other),
            })?
        }
        DistributionMode::Adaptive => {
            return Err(Error::invalid("run_svrg needs a fixed distribution; use run_asd_svrg"));
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ledger = CommLedger::new();
    let mut rec = Recorder::new(problem, config, x0);
    let mut anchor = x0.to_vec();
    let mut x = anchor.clone();
    let r = config.group_size;

    for epoch in 1..=config.epochs {
        let (anchor_grads, anchor_full) = anchor_phase(problem, &anchor, &mut ledger);
        x.copy_from_slice(&anchor);
        let slot = pick_anchor_slot(config, &mut rng);
        let mut next_anchor = None;
        for step in 1..=config.inner_iters {
            if slot == Some(step - 1) {
                next_anchor = Some(x.clone());
            }
            server_broadcast(&mut ledger, d, m);
            let draws: Vec<usize> = (0..r).map(|_| dist.sample(&mut rng)).collect();
            let hist = SampleHistogram::from_indices(&draws);
            collect_sampled(&mut ledger, hist.distinct_workers(), d);
            let mut direction = vec![0.0; d];
            for (w, count) in hist.iter() {
                let gx = problem.shard_gradient_unchecked(w, &x);
                let v = combine(&gx, &anchor_grads[w], &anchor_full, dist.probabilities()[w], m);
                axpy(count as f64 / r as f64, &v, &mut direction);
            }
            axpy(-config.eta, &direction, &mut x);
            rec.step(epoch, step, &x, &ledger)?;
        }
        anchor = next_anchor.unwrap_or_else(|| x.clone());
        rec.epoch_end(epoch, &anchor)?;
    }
    Ok(rec.finish(anchor, ledger))
}

/// Adaptive Sampling Distributed SVRG.
pub fn run_asd_svrg(problem: &ShardedProblem, config: &OptimizerConfig) -> Result<RunTrace> {
    run_asd_svrg_observed(problem, config, &vec![0.0; problem.dim()], &mut |_| {})
}

pub fn run_asd_svrg_from(problem: &ShardedProblem, config: &OptimizerConfig, x0: &[f64]) -> Result<RunTrace> {
    run_asd_svrg_observed(problem, config, x0, &mut |_| {})
}

/// As [`run_asd_svrg_from`], calling `observe` before every update.
pub fn run_asd_svrg_observed(
    problem: &ShardedProblem,
    config: &OptimizerConfig,
    x0: &[f64],
    observe: &mut dyn FnMut(&StepView<'_>),
) -> Result<RunTrace> {
    config.validate()?;
    check_start(problem, x0)?;
    if config.distribution_mode != DistributionMode::Adaptive {
        return Err(Error::invalid("run_asd_svrg needs distribution_mode = adaptive"));
    }
    let m = problem.num_workers();
    let d = problem.dim();
    let r = config.group_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ledger = CommLedger::new();
    let mut rec = Recorder::new(problem, config, x0);
    let mut anchor = x0.to_vec();
    let mut x = anchor.clone();
    let uniform = Categorical::uniform(m);

    for epoch in 1..=config.epochs {
        let (anchor_grads, anchor_full) = anchor_phase(problem, &anchor, &mut ledger);
        x.copy_from_slice(&anchor);
        let slot = pick_anchor_slot(config, &mut rng);
        let mut next_anchor = None;
        for step in 1..=config.inner_iters {
            if slot == Some(step - 1) {
                next_anchor = Some(x.clone());
            }
            server_broadcast(&mut ledger, d, m);

            let mut estimated = Vec::with_capacity(m);
            for w in 0..m {
                let n = config.estimation.size_for(problem, w, &x, &anchor)?;
                estimated.push(estimate_shard_weight(problem, w, &x, &anchor, n, &mut rng)?);
            }
            let (dist, fell_back) = match Categorical::from_weights(estimated.clone()) {
                Ok(c) => (c, false),
                Err(Error::DegenerateWeights) => (uniform.clone(), true),
                Err(e) => return Err(e),
            };
            let hist = match config.protocol {
                SamplingProtocol::Pc => pc_sample(dist.weights(), r, &mut ledger, &mut rng)?,
                SamplingProtocol::OptimalComm => optimal_comm_sample(dist.weights(), r, &mut ledger, &mut rng)?,
            };
            // the last machine hands the histogram to the server
            ledger.worker_to_server(r as u64);
            ledger.round(1);
            collect_sampled(&mut ledger, hist.distinct_workers(), d);

            observe(&StepView {
                epoch,
                step,
                x_prev: &x,
                anchor: &anchor,
                anchor_full_grad: &anchor_full,
                estimated_weights: &estimated,
                probabilities: dist.probabilities(),
                histogram: &hist,
                fell_back_to_uniform: fell_back,
            });

            let mut direction = vec![0.0; d];
            for (w, count) in hist.iter() {
                let gx = problem.shard_gradient_unchecked(w, &x);
                let v = combine(&gx, &anchor_grads[w], &anchor_full, dist.probabilities()[w], m);
                axpy(count as f64 / r as f64, &v, &mut direction);
            }
            axpy(-config.eta, &direction, &mut x);
            rec.step(epoch, step, &x, &ledger)?;
        }
        anchor = next_anchor.unwrap_or_else(|| x.clone());
        rec.epoch_end(epoch, &anchor)?;
    }
    Ok(rec.finish(anchor, ledger))
}

/// Distributed SGD with weight decay: one uniformly drawn worker per step,
/// `x ← x − η(∇F_m(x) + l2·x)`. Uses the same `K × T` schedule as SVRG;
/// the epoch output is the last iterate.
pub fn run_sgd(problem: &ShardedProblem, config: &OptimizerConfig) -> Result<RunTrace> {
    run_sgd_from(problem, config, &vec![0.0; problem.dim()])
}

pub fn run_sgd_from(problem: &ShardedProblem, config: &OptimizerConfig, x0: &[f64]) -> Result<RunTrace> {
    config.validate()?;
    check_start(problem, x0)?;
    let m = problem.num_workers();
    let d = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut ledger = CommLedger::new();
    let mut rec = Recorder::new(problem, config, x0);
    let mut x = x0.to_vec();
    for epoch in 1..=config.epochs {
        for step in 1..=config.inner_iters {
            server_broadcast(&mut ledger, d, m);
            let w = rng.random_range(0..m);
            collect_sampled(&mut ledger, 1, d);
            let mut g = problem.shard_gradient_unchecked(w, &x);
            axpy(config.l2_for_sgd, &x, &mut g);
            axpy(-config.eta, &g, &mut x);
            rec.step(epoch, step, &x, &ledger)?;
        }
        rec.epoch_end(epoch, &x)?;
    }
    Ok(rec.finish(x, ledger))
}
