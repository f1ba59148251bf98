//! Experiment sweeps: every `(algorithm, η, seed)` cell of a grid is run on
//! the same per-seed problem from `x = 0`, traced to CSV and summarized.
//!
//! # Config files
//!
//! Flat `key = value` lines; `#` starts a comment. Keys:
//!
//! | key | value |
//! |-----|-------|
//! | `preset` | `linear`, `logistic` or `csv` |
//! | `data` | CSV path (sets `preset = csv`) |
//! | `task` | `linear` or `logistic`, for CSV data |
//! | `workers`, `samples`, `dim`, `growth` | synthetic generator inputs |
//! | `algos` | comma list of `sgd`, `svrg`, `svrg_is`, `asd` or the long names |
//! | `etas` | comma list, shared by all algorithms |
//! | `etas.<algo>` | comma list for one algorithm |
//! | `seeds` | comma list |
//! | `epochs`, `inner`, `R` | `K`, `T`, `R` |
//! | `tau`, `delta` | weight estimation accuracy |
//! | `subsample` | `auto`, `full`, `lemma1` or a fixed size |
//! | `l2` | SGD weight decay |
//! | `record_every` | trace cadence in inner steps |
//! | `protocol` | `pc` or `optimal` |
//! | `anchor` | `random` or `last` |
//! | `threshold` | relative gap for epochs-to-threshold |
//! | `jobs` | parallel cells, `0` for all cores |
//! | `out` | output directory |

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::optim::{
    run_asd_svrg, run_sgd, run_svrg, AnchorPolicy, DistributionMode, OptimizerConfig, RunTrace, SamplingProtocol,
};
use crate::problem::{format_f64, generate_heterogeneous, Dataset, ShardedProblem, Task};
use crate::sampling::{EstimationConfig, SubsamplePolicy};

/// Relative difference below which two final losses count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    Sgd,
    SvrgUniform,
    SvrgImportance,
    AsdSvrg,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::Sgd,
        Algorithm::SvrgUniform,
        Algorithm::SvrgImportance,
        Algorithm::AsdSvrg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Sgd => "sgd",
            Algorithm::SvrgUniform => "svrg_uniform",
            Algorithm::SvrgImportance => "svrg_importance",
            Algorithm::AsdSvrg => "asd_svrg",
        }
    }

    pub fn run(&self, problem: &ShardedProblem, config: &OptimizerConfig) -> Result<RunTrace> {
        let mut cfg = config.clone();
        match self {
            Algorithm::Sgd => run_sgd(problem, &cfg),
            Algorithm::SvrgUniform => {
                cfg.distribution_mode = DistributionMode::Uniform;
                run_svrg(problem, &cfg)
            }
            Algorithm::SvrgImportance => {
                cfg.distribution_mode = DistributionMode::LipschitzImportance;
                run_svrg(problem, &cfg)
            }
            Algorithm::AsdSvrg => {
                cfg.distribution_mode = DistributionMode::Adaptive;
                run_asd_svrg(problem, &cfg)
            }
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sgd" => Ok(Algorithm::Sgd),
            "svrg" | "svrg_uniform" => Ok(Algorithm::SvrgUniform),
            "svrg_is" | "svrg_importance" => Ok(Algorithm::SvrgImportance),
            "asd" | "asd_svrg" => Ok(Algorithm::AsdSvrg),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preset {
    LinearSynthetic,
    LogisticSynthetic,
    CustomCsv { path: PathBuf, task: Task },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub workers: usize,
    pub samples: usize,
    pub dim: usize,
    pub growth_base: f64,
    pub algorithms: Vec<Algorithm>,
    pub eta_grid: Vec<f64>,
    /// Per-algorithm grids replacing `eta_grid`.
    pub eta_overrides: BTreeMap<Algorithm, Vec<f64>>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub inner_iters: usize,
    pub group_size: usize,
    pub estimation: EstimationConfig,
    pub l2_for_sgd: f64,
    pub record_every: usize,
    pub protocol: SamplingProtocol,
    pub anchor: AnchorPolicy,
    pub threshold: f64,
    /// Cells run concurrently; 0 uses every available core.
    pub jobs: usize,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    /// 8 workers, 500 samples of dimension 10.
    pub fn linear() -> Self {
        ExperimentSpec {
            preset: Preset::LinearSynthetic,
            workers: 8,
            samples: 500,
            dim: 10,
            growth_base: 1.5,
            algorithms: Algorithm::ALL.to_vec(),
            eta_grid: vec![0.01, 0.02, 0.05, 0.1, 0.2],
            eta_overrides: BTreeMap::new(),
            seeds: vec![1, 2, 3, 4, 5],
            epochs: 30,
            inner_iters: 100,
            group_size: 4,
            estimation: EstimationConfig::default(),
            l2_for_sgd: 0.02,
            record_every: 1,
            protocol: SamplingProtocol::Pc,
            anchor: AnchorPolicy::RandomIterate,
            threshold: 1e-3,
            jobs: 0,
            output_dir: None,
        }
    }

    /// 8 workers, 300 samples of dimension 100, with the SVRG grids around
    /// 7.5e-5 and the ASD-SVRG grid around 2.5e-3.
    pub fn logistic() -> Self {
        let svrg = vec![2.5e-5, 5e-5, 7.5e-5, 1e-4, 2.5e-4];
        let mut eta_overrides = BTreeMap::new();
        eta_overrides.insert(Algorithm::SvrgUniform, svrg.clone());
        eta_overrides.insert(Algorithm::SvrgImportance, svrg);
        eta_overrides.insert(Algorithm::AsdSvrg, vec![7.5e-4, 1.5e-3, 2.5e-3, 5e-3, 7.5e-3]);
        ExperimentSpec {
            preset: Preset::LogisticSynthetic,
            samples: 300,
            dim: 100,
            eta_grid: vec![2.5e-4, 7.5e-4, 2.5e-3, 7.5e-3, 2.5e-2],
            eta_overrides,
            ..ExperimentSpec::linear()
        }
    }

    pub fn custom_csv(path: impl Into<PathBuf>, task: Task) -> Self {
        ExperimentSpec {
            preset: Preset::CustomCsv { path: path.into(), task },
            ..ExperimentSpec::linear()
        }
    }

    pub fn grid_for(&self, algorithm: Algorithm) -> &[f64] {
        self.eta_overrides.get(&algorithm).map(Vec::as_slice).unwrap_or(&self.eta_grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithms.is_empty() {
            return Err(Error::invalid("algorithm list is empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::invalid("seed list is empty"));
        }
        for &a in &self.algorithms {
            let grid = self.grid_for(a);
            if grid.is_empty() {
                return Err(Error::invalid(format!("step-size grid for {a} is empty")));
            }
            if let Some(eta) = grid.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
                return Err(Error::invalid(format!("step size {eta} for {a} is not positive")));
            }
        }
        if !(self.threshold > 0.0) {
            return Err(Error::invalid("threshold must be positive"));
        }
        if !matches!(self.preset, Preset::CustomCsv { .. }) {
            if self.workers == 0 || self.dim == 0 || self.samples / self.workers.max(1) < 2 {
                return Err(Error::invalid(format!(
                    "{} samples cannot fill {} workers",
                    self.samples, self.workers
                )));
            }
            if !(self.growth_base > 0.0 && self.growth_base.is_finite()) {
                return Err(Error::invalid("growth base must be positive"));
            }
        }
        self.base_config(0.0, 0).validate_except_eta()
    }

    fn task(&self) -> Task {
        match &self.preset {
            Preset::LinearSynthetic => Task::LinearRegression,
            Preset::LogisticSynthetic => Task::LogisticRegression,
            Preset::CustomCsv { task, .. } => *task,
        }
    }

    fn base_config(&self, eta: f64, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            eta,
            epochs: self.epochs,
            inner_iters: self.inner_iters,
            group_size: self.group_size,
            estimation: self.estimation,
            distribution_mode: DistributionMode::Uniform,
            l2_for_sgd: self.l2_for_sgd,
            seed,
            anchor: self.anchor,
            protocol: self.protocol,
            record_every: self.record_every,
            ..OptimizerConfig::default()
        }
    }

    /// Problem used for `seed`. CSV data is the same for every seed.
    pub fn problem(&self, seed: u64) -> Result<ShardedProblem> {
        match &self.preset {
            Preset::CustomCsv { path, task } => Dataset::load_csv(path, *task)?.into_problem(),
            _ => generate_heterogeneous(self.task(), self.workers, self.samples, self.dim, self.growth_base, seed),
        }
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut spec = ExperimentSpec::linear();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line {}: expected `key = value`", lineno + 1)))?;
            spec.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("config line {}: {e}", lineno + 1)))?;
        }
        Ok(spec)
    }

    pub fn load_config(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_config_str(&text)
    }

    /// Applies one `key = value` setting. `preset` resets every other field
    /// to that preset's defaults, so it should come first.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => {
                let out = self.output_dir.take();
                *self = match value {
                    "linear" | "linear_synthetic" => ExperimentSpec::linear(),
                    "logistic" | "logistic_synthetic" => ExperimentSpec::logistic(),
                    "csv" | "custom_csv" => match &self.preset {
                        Preset::CustomCsv { path, task } => ExperimentSpec::custom_csv(path.clone(), *task),
                        _ => ExperimentSpec::custom_csv(PathBuf::new(), self.task()),
                    },
                    other => return Err(Error::invalid(format!("unknown preset `{other}`"))),
                };
                self.output_dir = out;
            }
            "data" => {
                self.preset = Preset::CustomCsv {
                    path: PathBuf::from(value),
                    task: self.task(),
                }
            }
            "task" => {
                let task: Task = value.parse()?;
                match &mut self.preset {
                    Preset::CustomCsv { task: t, .. } => *t = task,
                    _ => {
                        self.preset = match task {
                            Task::LinearRegression => Preset::LinearSynthetic,
                            Task::LogisticRegression => Preset::LogisticSynthetic,
                        }
                    }
                }
            }
            "workers" => self.workers = parse(key, value)?,
            "samples" => self.samples = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "growth" => self.growth_base = parse(key, value)?,
            "algos" => self.algorithms = parse_list(value, |s| s.parse::<Algorithm>())?,
            "etas" => {
                self.eta_grid = parse_list(value, |s| parse("etas", s))?;
                self.eta_overrides.clear();
            }
            "seeds" => self.seeds = parse_list(value, |s| parse("seeds", s))?,
            "epochs" => self.epochs = parse(key, value)?,
            "inner" => self.inner_iters = parse(key, value)?,
            "R" => self.group_size = parse(key, value)?,
            "tau" => self.estimation.tau = parse(key, value)?,
            "delta" => self.estimation.delta = parse(key, value)?,
            "subsample" => {
                self.estimation.policy = match value {
                    "auto" => SubsamplePolicy::Auto,
                    "full" => SubsamplePolicy::Full,
                    "lemma1" => SubsamplePolicy::Lemma1,
                    n => SubsamplePolicy::Fixed(parse(key, n)?),
                }
            }
            "l2" => self.l2_for_sgd = parse(key, value)?,
            "record_every" => self.record_every = parse(key, value)?,
            "protocol" => {
                self.protocol = match value {
                    "pc" => SamplingProtocol::Pc,
                    "optimal" => SamplingProtocol::OptimalComm,
                    other => return Err(Error::invalid(format!("unknown protocol `{other}`"))),
                }
            }
            "anchor" => {
                self.anchor = match value {
                    "random" => AnchorPolicy::RandomIterate,
                    "last" => AnchorPolicy::LastIterate,
                    other => return Err(Error::invalid(format!("unknown anchor policy `{other}`"))),
                }
            }
            "threshold" => self.threshold = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "out" => self.output_dir = Some(PathBuf::from(value)),
            k if k.starts_with("etas.") => {
                let algo: Algorithm = k["etas.".len()..].parse()?;
                self.eta_overrides.insert(algo, parse_list(value, |s| parse(k, s))?);
            }
            other => return Err(Error::invalid(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

impl OptimizerConfig {
    fn validate_except_eta(&self) -> Result<()> {
        OptimizerConfig { eta: 0.0, ..self.clone() }.validate()
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn parse_list<T>(value: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect()
}

/// Order-sensitive hash of every sample of `problem`.
pub fn problem_fingerprint(problem: &ShardedProblem) -> u64 {
    let mut h = DefaultHasher::new();
    problem.task.hash(&mut h);
    problem.fit_intercept.hash(&mut h);
    for shard in &problem.shards {
        shard.worker_id.hash(&mut h);
        for s in &shard.samples {
            s.target.to_bits().hash(&mut h);
            s.features.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    for s in &problem.test {
        s.target.to_bits().hash(&mut h);
        s.features.iter().for_each(|v| v.to_bits().hash(&mut h));
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Ok,
    Diverged { epoch: usize, step: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub seed: u64,
    pub status: CellStatus,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    pub final_accuracy: f64,
    /// First epoch within the relative threshold of the best loss seen for
    /// this seed anywhere in the sweep.
    pub epochs_to_threshold: Option<usize>,
    pub total_scalars: u64,
}

impl CellReport {
    pub fn diverged(&self) -> bool {
        matches!(self.status, CellStatus::Diverged { .. })
    }
}

/// Grid point with the lowest median final train loss for one algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct BestRow {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub median_train_loss: f64,
    pub median_test_loss: f64,
    pub median_accuracy: f64,
    /// Infinite when the median seed never reached the threshold.
    pub median_epochs_to_threshold: f64,
    pub median_total_scalars: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonReport {
    pub algorithms: Vec<Algorithm>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellReport>,
    pub best: Vec<BestRow>,
    /// Best train loss found per seed.
    pub reference_loss: BTreeMap<u64, f64>,
    pub problem_fingerprints: BTreeMap<u64, u64>,
    /// Traces of the completed cells, keyed like [`trace_file_name`].
    pub traces: BTreeMap<String, RunTrace>,
}

pub fn trace_file_name(algorithm: Algorithm, eta: f64, seed: u64) -> String {
    format!("trace_{algorithm}_eta{}_seed{seed}.csv", format_f64(eta))
}

pub const REPORT_HEADER: &str =
    "algorithm,eta,seed,status,final_train_loss,final_test_loss,final_test_acc,epochs_to_threshold,total_scalars";
pub const BEST_HEADER: &str = "algorithm,eta,median_final_train_loss,median_final_test_loss,median_final_test_acc,median_epochs_to_threshold,median_total_scalars";

impl ComparisonReport {
    pub fn cells_for(&self, algorithm: Algorithm) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(move |c| c.algorithm == algorithm)
    }

    pub fn best_for(&self, algorithm: Algorithm) -> Option<&BestRow> {
        self.best.iter().find(|b| b.algorithm == algorithm)
    }

    pub fn trace(&self, algorithm: Algorithm, eta: f64, seed: u64) -> Option<&RunTrace> {
        self.traces.get(&trace_file_name(algorithm, eta, seed))
    }

    pub fn report_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for c in &self.cells {
            let status = match c.status {
                CellStatus::Ok => "ok".to_string(),
                CellStatus::Diverged { epoch, step } => format!("diverged@{epoch}:{step}"),
            };
            out += &format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.algorithm,
                format_f64(c.eta),
                c.seed,
                status,
                format_f64(c.final_train_loss),
                format_f64(c.final_test_loss),
                format_f64(c.final_accuracy),
                c.epochs_to_threshold.map(|e| e.to_string()).unwrap_or_default(),
                c.total_scalars
            );
        }
        out
    }

    pub fn best_csv(&self) -> String {
        let mut out = format!("{BEST_HEADER}\n");
        for b in &self.best {
            out += &format!(
                "{},{},{},{},{},{},{}\n",
                b.algorithm,
                format_f64(b.eta),
                format_f64(b.median_train_loss),
                format_f64(b.median_test_loss),
                format_f64(b.median_accuracy),
                format_f64(b.median_epochs_to_threshold),
                format_f64(b.median_total_scalars)
            );
        }
        out
    }
}

/// Median of `values`, NaN when empty. Infinite values sort last.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Best grid point for `algorithm`: the step size whose seeds all finished
/// and whose median final train loss is lowest, ties (within
/// [`TIE_TOLERANCE`] relative) going to the larger step.
pub fn grid_best(report: &ComparisonReport, algorithm: Algorithm) -> Result<BestRow> {
    let mut by_eta: BTreeMap<u64, Vec<&CellReport>> = BTreeMap::new();
    for c in report.cells_for(algorithm) {
        by_eta.entry(c.eta.to_bits()).or_default().push(c);
    }
    let mut best: Option<BestRow> = None;
    for cells in by_eta.values() {
        if cells.iter().any(|c| c.diverged()) {
            continue;
        }
        let col = |f: fn(&CellReport) -> f64| median(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
        let row = BestRow {
            algorithm,
            eta: cells[0].eta,
            median_train_loss: col(|c| c.final_train_loss),
            median_test_loss: col(|c| c.final_test_loss),
            median_accuracy: col(|c| c.final_accuracy),
            median_epochs_to_threshold: col(|c| c.epochs_to_threshold.map_or(f64::INFINITY, |e| e as f64)),
            median_total_scalars: col(|c| c.total_scalars as f64),
        };
        best = match best {
            None => Some(row),
            Some(b) => {
                let scale = b.median_train_loss.abs().max(row.median_train_loss.abs()).max(f64::MIN_POSITIVE);
                let diff = (row.median_train_loss - b.median_train_loss) / scale;
                let tie = diff.abs() <= TIE_TOLERANCE;
                if diff < 0.0 && !tie || tie && row.eta > b.eta {
                    Some(row)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.ok_or_else(|| Error::AllDiverged(algorithm.to_string()))
}

struct Job {
    seed_index: usize,
    algorithm: Algorithm,
    eta: f64,
}

/// Runs every cell of `spec`; writes traces, `report.csv` and `best.csv`
/// when `spec.output_dir` is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ComparisonReport> {
    spec.validate()?;
    let problems = spec.seeds.iter().map(|&s| spec.problem(s)).collect::<Result<Vec<_>>>()?;

    let mut jobs = Vec::new();
    for (seed_index, _) in spec.seeds.iter().enumerate() {
        for &algorithm in &spec.algorithms {
            for &eta in spec.grid_for(algorithm) {
                jobs.push(Job { seed_index, algorithm, eta });
            }
        }
    }
    let threads = match spec.jobs {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(jobs.len())
    .max(1);
    let results: Vec<Mutex<Option<Result<RunTrace>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let cfg = spec.base_config(job.eta, spec.seeds[job.seed_index]);
                let out = job.algorithm.run(&problems[job.seed_index], &cfg);
                *results[i].lock().expect("result slot") = Some(out);
            });
        }
    });

    let mut report = ComparisonReport {
        algorithms: spec.algorithms.clone(),
        seeds: spec.seeds.clone(),
        ..ComparisonReport::default()
    };
    for (&seed, p) in spec.seeds.iter().zip(&problems) {
        report.problem_fingerprints.insert(seed, problem_fingerprint(p));
    }
    let mut outcomes = Vec::with_capacity(jobs.len());
    for (job, slot) in jobs.iter().zip(results) {
        let out = slot.into_inner().expect("result slot").expect("every job ran");
        match out {
            Ok(trace) => outcomes.push((job, Ok(trace))),
            Err(Error::Diverged { epoch, step, .. }) => outcomes.push((job, Err((epoch, step)))),
            Err(e) => return Err(e),
        }
    }

    for (job, out) in &outcomes {
        if let Ok(trace) = out {
            let seed = spec.seeds[job.seed_index];
            let best_seen = trace
                .rows
                .iter()
                .map(|r| r.train_loss)
                .chain(trace.epoch_train_loss.iter().copied())
                .fold(f64::INFINITY, f64::min);
            let entry = report.reference_loss.entry(seed).or_insert(f64::INFINITY);
            *entry = entry.min(best_seen);
        }
    }

    for (job, out) in outcomes {
        let seed = spec.seeds[job.seed_index];
        let cell = match out {
            Ok(trace) => {
                let last = trace.final_row();
                let cell = CellReport {
                    algorithm: job.algorithm,
                    eta: job.eta,
                    seed,
                    status: CellStatus::Ok,
                    final_train_loss: trace.final_train_loss(),
                    final_test_loss: last.map_or(f64::NAN, |r| r.test_loss),
                    final_accuracy: last.map_or(f64::NAN, |r| r.test_accuracy),
                    epochs_to_threshold: trace.epochs_to_gap(report.reference_loss[&seed], spec.threshold),
                    total_scalars: trace.ledger.total_scalars(),
                };
                report.traces.insert(trace_file_name(job.algorithm, job.eta, seed), trace);
                cell
            }
            Err((epoch, step)) => CellReport {
                algorithm: job.algorithm,
                eta: job.eta,
                seed,
                status: CellStatus::Diverged { epoch, step },
                final_train_loss: f64::NAN,
                final_test_loss: f64::NAN,
                final_accuracy: f64::NAN,
                epochs_to_threshold: None,
                total_scalars: 0,
            },
        };
        report.cells.push(cell);
    }
    for &a in &spec.algorithms {
        match grid_best(&report, a) {
            Ok(b) => report.best.push(b),
            Err(Error::AllDiverged(_)) => {}
            Err(e) => return Err(e),
        }
    }

    if let Some(dir) = &spec.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes every trace plus `report.csv` and `best.csv` into `dir`.
pub fn write_report(report: &ComparisonReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, trace) in &report.traces {
        trace.save_csv(&dir.join(name))?;
    }
    write_file(&dir.join("report.csv"), &report.report_csv())?;
    write_file(&dir.join("best.csv"), &report.best_csv())
}

/// Per-figure CSVs for the first seed of the sweep, in the trace schema:
/// `best_<algo>.csv` holds the best-η run and `ablation_<algo>_eta<η>.csv`
/// every completed grid point. Algorithms without a completed run get a
/// header-only `best_` file. Traces are read back from `trace_dir`.
pub fn emit_plotdata(report: &ComparisonReport, trace_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let header = format!("{}\n", RunTrace::CSV_HEADER);
    let mut written = Vec::new();
    let seed = report.seeds.first().copied();
    for &a in &report.algorithms {
        let best_path = out_dir.join(format!("best_{a}.csv"));
        let best = grid_best(report, a).ok();
        let mut best_body = header.clone();
        if let (Some(seed), Some(b)) = (seed, &best) {
            best_body = read_trace(trace_dir, a, b.eta, seed)?;
        }
        write_file(&best_path, &best_body)?;
        written.push(best_path);

        let Some(seed) = seed else { continue };
        let mut etas: Vec<f64> = report
            .cells_for(a)
            .filter(|c| c.seed == seed && !c.diverged())
            .map(|c| c.eta)
            .collect();
        etas.sort_by(f64::total_cmp);
        etas.dedup();
        for eta in etas {
            let path = out_dir.join(format!("ablation_{a}_eta{}.csv", format_f64(eta)));
            write_file(&path, &read_trace(trace_dir, a, eta, seed)?)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn read_trace(dir: &Path, algorithm: Algorithm, eta: f64, seed: u64) -> Result<String> {
    let path = dir.join(trace_file_name(algorithm, eta, seed));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    if text.lines().next() != Some(RunTrace::CSV_HEADER) {
        return Err(Error::Input {
            path,
            row: 1,
            column: "header".into(),
            message: "not a trace file".into(),
        });
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(eta: f64, loss: Option<f64>) -> CellReport {
        CellReport {
            algorithm: Algorithm::SvrgUniform,
            eta,
            seed: 1,
            status: if loss.is_some() {
                CellStatus::Ok
            } else {
                CellStatus::Diverged { epoch: 1, step: 1 }
            },
            final_train_loss: loss.unwrap_or(f64::NAN),
            final_test_loss: 0.0,
            final_accuracy: f64::NAN,
            epochs_to_threshold: Some(1),
            total_scalars: 10,
        }
    }

    #[test]
    fn best_of_grid() {
        let report = ComparisonReport {
            cells: vec![cell(0.01, Some(0.5)), cell(0.1, Some(0.2)), cell(1.0, None)],
            ..ComparisonReport::default()
        };
        assert_eq!(grid_best(&report, Algorithm::SvrgUniform).unwrap().eta, 0.1);
        assert!(matches!(grid_best(&report, Algorithm::AsdSvrg), Err(Error::AllDiverged(_))));

        let single = ComparisonReport {
            cells: vec![cell(0.3, Some(1.0))],
            ..ComparisonReport::default()
        };
        let b = grid_best(&single, Algorithm::SvrgUniform).unwrap();
        assert_eq!((b.eta, b.median_train_loss), (0.3, 1.0));
    }

    #[test]
    fn ties_go_to_larger_step() {
        let report = ComparisonReport {
            cells: vec![cell(0.1, Some(0.2)), cell(0.01, Some(0.2 * (1.0 - 1e-12)))],
            ..ComparisonReport::default()
        };
        assert_eq!(grid_best(&report, Algorithm::SvrgUniform).unwrap().eta, 0.1);
    }

    #[test]
    fn any_diverged_seed_disqualifies_a_step() {
        let mut bad = cell(0.1, None);
        bad.seed = 2;
        let report = ComparisonReport {
            cells: vec![cell(0.01, Some(0.5)), cell(0.1, Some(0.1)), bad],
            ..ComparisonReport::default()
        };
        assert_eq!(grid_best(&report, Algorithm::SvrgUniform).unwrap().eta, 0.01);
    }

    #[test]
    fn config_parsing() {
        let spec = ExperimentSpec::from_config_str(
            "preset = logistic\n# comment\nalgos = svrg, asd\nseeds = 7\nepochs = 3 # trailing\nR = 2\nsubsample = 12\netas.asd = 0.5\n",
        )
        .unwrap();
        assert_eq!(spec.preset, Preset::LogisticSynthetic);
        assert_eq!(spec.dim, 100);
        assert_eq!(spec.algorithms, vec![Algorithm::SvrgUniform, Algorithm::AsdSvrg]);
        assert_eq!(spec.seeds, vec![7]);
        assert_eq!((spec.epochs, spec.group_size), (3, 2));
        assert_eq!(spec.estimation.policy, SubsamplePolicy::Fixed(12));
        assert_eq!(spec.grid_for(Algorithm::AsdSvrg), &[0.5]);
        assert_eq!(spec.grid_for(Algorithm::SvrgUniform), &[2.5e-5, 5e-5, 7.5e-5, 1e-4, 2.5e-4]);

        assert!(ExperimentSpec::from_config_str("bogus = 1").is_err());
        assert!(ExperimentSpec::from_config_str("epochs").is_err());
        assert!(ExperimentSpec::from_config_str("epochs = x").is_err());
    }

    #[test]
    fn presets() {
        let l = ExperimentSpec::linear();
        assert_eq!((l.workers, l.samples, l.dim), (8, 500, 10));
        l.validate().unwrap();
        let g = ExperimentSpec::logistic();
        assert_eq!((g.workers, g.samples, g.dim), (8, 300, 100));
        let median_of = |a: Algorithm| median(g.grid_for(a));
        assert_eq!(median_of(Algorithm::SvrgUniform), 7.5e-5);
        assert_eq!(median_of(Algorithm::AsdSvrg), 2.5e-3);
        g.validate().unwrap();
    }

    #[test]
    fn empty_lists_rejected() {
        let spec = ExperimentSpec {
            algorithms: vec![],
            ..ExperimentSpec::linear()
        };
        assert!(matches!(spec.validate(), Err(Error::InvalidArgument(_))));
        let spec = ExperimentSpec {
            eta_grid: vec![],
            ..ExperimentSpec::linear()
        };
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec {
            eta_grid: vec![-0.1],
            ..ExperimentSpec::linear()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn median_handles_parity() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[1.0, f64::INFINITY, f64::INFINITY]), f64::INFINITY);
        assert!(median(&[]).is_nan());
    }
}
