//! Sharded convex objectives.
//!
//! The global objective is the mean of the per-worker objectives,
//! `F(x) = (1/M) Σ_m F_m(x)`, and each `F_m(x) = (1/n_m) Σ_{j ∈ S_m} f_j(x)`.
//! Two per-sample losses are supported:
//!
//! * linear regression, `f_j(x) = (zᵀx − y)²`
//! * logistic regression, `f_j(x) = log(1 + e^{zᵀx}) − y·zᵀx` with `y ∈ {0, 1}`
//!
//! where `z = (a, 1)` is the feature vector augmented with a constant bias
//! coordinate, so the parameter vector has `d + 1` entries and the bias is its
//! last coordinate.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::{dot, eigen_extremes};

/// RMS feature scale across workers; worker `m` uses a scale proportional
/// to `growth^m`, normalized so the mean squared scale is `FEATURE_RMS²`.
pub const FEATURE_RMS: f64 = 2.0;
/// Regression noise standard deviation, relative to the RMS noiseless target.
pub const REGRESSION_NOISE: f64 = 0.1;
/// Every fifth sample (global index ≡ 4 mod 5) is held out for testing.
pub const TEST_STRIDE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    LinearRegression,
    LogisticRegression,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::LinearRegression => f.write_str("linear_regression"),
            Task::LogisticRegression => f.write_str("logistic_regression"),
        }
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" | "linear_regression" => Ok(Task::LinearRegression),
            "logistic" | "logistic_regression" => Ok(Task::LogisticRegression),
            other => Err(Error::invalid(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Regression target, or class label `0.0`/`1.0`.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: usize,
    pub samples: Vec<Sample>,
}

impl Shard {
    pub fn size(&self) -> usize {
        self.samples.len()
    }
}

/// Training shards plus a pooled held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedProblem {
    pub task: Task,
    pub shards: Vec<Shard>,
    pub test: Vec<Sample>,
    /// Only used by optimizers that opt into weight decay.
    pub l2_coefficient: f64,
    /// Append the constant-1 bias coordinate to every feature vector.
    pub fit_intercept: bool,
    features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzInfo {
    /// Per training sample, grouped by shard in worker order.
    pub per_sample: Vec<Vec<f64>>,
    pub per_shard: Vec<f64>,
    pub l_bar: f64,
    pub l_max: f64,
    /// Smallest eigenvalue of the full-data Hessian (0 for logistic).
    pub strong_convexity: f64,
    pub per_shard_strong_convexity: Vec<f64>,
    /// `sup_i l_i / λ_m` when `λ_m > 0`.
    pub per_shard_condition: Vec<Option<f64>>,
}

impl ShardedProblem {
    pub fn new(task: Task, shards: Vec<Shard>, test: Vec<Sample>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::invalid("a problem needs at least one shard"));
        }
        let features = shards[0]
            .samples
            .first()
            .map(|s| s.features.len())
            .ok_or_else(|| Error::invalid("shard 0 is empty"))?;
        for (m, shard) in shards.iter().enumerate() {
            if shard.worker_id != m {
                return Err(Error::invalid(format!(
                    "shard at position {m} has worker_id {}",
                    shard.worker_id
                )));
            }
            if shard.samples.is_empty() {
                return Err(Error::invalid(format!("shard {m} is empty")));
            }
            for s in &shard.samples {
                validate_sample(task, s, features)?;
            }
        }
        for s in &test {
            validate_sample(task, s, features)?;
        }
        Ok(ShardedProblem {
            task,
            shards,
            test,
            l2_coefficient: 0.0,
            fit_intercept: true,
            features,
        })
    }

    pub fn with_intercept(mut self, fit_intercept: bool) -> Self {
        self.fit_intercept = fit_intercept;
        self
    }

    pub fn num_workers(&self) -> usize {
        self.shards.len()
    }

    pub fn num_features(&self) -> usize {
        self.features
    }

    /// Length of the parameter vector.
    pub fn dim(&self) -> usize {
        self.features + usize::from(self.fit_intercept)
    }

    pub fn num_train_samples(&self) -> usize {
        self.shards.iter().map(Shard::size).sum()
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "parameter length {} does not match dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn check_shard(&self, shard_id: usize) -> Result<&Shard> {
        self.shards.get(shard_id).ok_or_else(|| {
            Error::invalid(format!(
                "shard {shard_id} out of range (M = {})",
                self.shards.len()
            ))
        })
    }

    #[inline]
    fn logit(&self, s: &Sample, x: &[f64]) -> f64 {
        let f = self.features;
        let mut v = dot(&s.features, &x[..f]);
        if self.fit_intercept {
            v += x[f];
        }
        v
    }

    /// `out += scale · ∇f(x)` for one sample.
    #[inline]
    pub(crate) fn add_sample_gradient(&self, s: &Sample, x: &[f64], scale: f64, out: &mut [f64]) {
        let coef = scale * self.residual(s, x);
        let f = self.features;
        for (o, a) in out[..f].iter_mut().zip(&s.features) {
            *o += coef * a;
        }
        if self.fit_intercept {
            out[f] += coef;
        }
    }

    /// Derivative of the loss with respect to the logit.
    #[inline]
    fn residual(&self, s: &Sample, x: &[f64]) -> f64 {
        let u = self.logit(s, x);
        match self.task {
            Task::LinearRegression => 2.0 * (u - s.target),
            Task::LogisticRegression => sigmoid(u) - s.target,
        }
    }

    #[inline]
    pub(crate) fn sample_loss(&self, s: &Sample, x: &[f64]) -> f64 {
        let u = self.logit(s, x);
        match self.task {
            Task::LinearRegression => (u - s.target) * (u - s.target),
            Task::LogisticRegression => softplus(u) - s.target * u,
        }
    }

    pub fn atomic_gradient(&self, shard_id: usize, sample_index: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        let shard = self.check_shard(shard_id)?;
        let s = shard.samples.get(sample_index).ok_or_else(|| {
            Error::invalid(format!(
                "sample {sample_index} out of range for shard {shard_id} (n = {})",
                shard.size()
            ))
        })?;
        let mut g = vec![0.0; self.dim()];
        self.add_sample_gradient(s, x, 1.0, &mut g);
        Ok(g)
    }

    pub fn shard_gradient(&self, shard_id: usize, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        self.check_shard(shard_id)?;
        Ok(self.shard_gradient_unchecked(shard_id, x))
    }

    pub(crate) fn shard_gradient_unchecked(&self, shard_id: usize, x: &[f64]) -> Vec<f64> {
        let shard = &self.shards[shard_id];
        let mut g = vec![0.0; self.dim()];
        for s in &shard.samples {
            self.add_sample_gradient(s, x, 1.0, &mut g);
        }
        let inv = 1.0 / shard.size() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    pub fn full_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(self.full_gradient_unchecked(x))
    }

    pub(crate) fn full_gradient_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        for m in 0..self.num_workers() {
            let gm = self.shard_gradient_unchecked(m, x);
            g.iter_mut().zip(&gm).for_each(|(a, b)| *a += b);
        }
        let inv = 1.0 / self.num_workers() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        g
    }

    pub fn shard_loss(&self, shard_id: usize, x: &[f64]) -> Result<f64> {
        self.check_x(x)?;
        let shard = self.check_shard(shard_id)?;
        Ok(self.mean_loss(&shard.samples, x))
    }

    fn mean_loss(&self, samples: &[Sample], x: &[f64]) -> f64 {
        if samples.is_empty() {
            return f64::NAN;
        }
        samples.iter().map(|s| self.sample_loss(s, x)).sum::<f64>() / samples.len() as f64
    }

    /// `F(x)`, the objective being minimized.
    pub fn train_loss(&self, x: &[f64]) -> f64 {
        self.shards
            .iter()
            .map(|sh| self.mean_loss(&sh.samples, x))
            .sum::<f64>()
            / self.num_workers() as f64
    }

    pub fn test_loss(&self, x: &[f64]) -> f64 {
        self.mean_loss(&self.test, x)
    }

    /// Fraction of correctly classified test samples; NaN for regression or
    /// an empty test set.
    pub fn test_accuracy(&self, x: &[f64]) -> f64 {
        if self.task != Task::LogisticRegression || self.test.is_empty() {
            return f64::NAN;
        }
        let correct = self
            .test
            .iter()
            .filter(|s| (self.logit(s, x) > 0.0) == (s.target > 0.5))
            .count();
        correct as f64 / self.test.len() as f64
    }

    fn curvature_factor(&self) -> f64 {
        match self.task {
            Task::LinearRegression => 2.0,
            Task::LogisticRegression => 0.25,
        }
    }

    fn augmented(&self, s: &Sample) -> Vec<f64> {
        let mut z = s.features.clone();
        if self.fit_intercept {
            z.push(1.0);
        }
        z
    }

    /// `(1/n_m) Σ z zᵀ` for one shard.
    fn shard_second_moment(&self, shard: &Shard) -> DMatrix<f64> {
        let p = self.dim();
        let mut g = DMatrix::<f64>::zeros(p, p);
        for s in &shard.samples {
            let z = DVector::from_vec(self.augmented(s));
            g.ger(1.0, &z, &z, 1.0);
        }
        g / shard.size() as f64
    }

    pub fn lipschitz_info(&self) -> LipschitzInfo {
        let c = self.curvature_factor();
        let mut per_sample = Vec::with_capacity(self.num_workers());
        let mut per_shard = Vec::with_capacity(self.num_workers());
        let mut per_shard_sc = Vec::with_capacity(self.num_workers());
        let mut per_shard_condition = Vec::with_capacity(self.num_workers());
        let p = self.dim();
        let mut total = DMatrix::<f64>::zeros(p, p);
        for shard in &self.shards {
            let ls: Vec<f64> = shard
                .samples
                .iter()
                .map(|s| {
                    let z = self.augmented(s);
                    c * dot(&z, &z)
                })
                .collect();
            let moment = self.shard_second_moment(shard);
            total += &moment;
            let (lo, hi) = eigen_extremes(moment);
            let lm = (c * hi).max(0.0);
            let sc = match self.task {
                Task::LinearRegression => (c * lo).max(0.0),
                Task::LogisticRegression => 0.0,
            };
            let sup = ls.iter().cloned().fold(0.0, f64::max);
            per_shard_condition.push((sc > 0.0).then(|| sup / sc));
            per_shard_sc.push(sc);
            per_shard.push(lm);
            per_sample.push(ls);
        }
        let strong_convexity = match self.task {
            Task::LinearRegression => {
                let (lo, _) = eigen_extremes(total * (c / self.num_workers() as f64));
                lo.max(0.0)
            }
            Task::LogisticRegression => 0.0,
        };
        let l_bar = per_shard.iter().sum::<f64>() / per_shard.len() as f64;
        let l_max = per_shard.iter().cloned().fold(0.0, f64::max);
        LipschitzInfo {
            per_sample,
            per_shard,
            l_bar,
            l_max,
            strong_convexity,
            per_shard_strong_convexity: per_shard_sc,
            per_shard_condition,
        }
    }

    /// Exact minimizer of the linear-regression objective via the normal
    /// equations, with an optional ridge term `ridge·‖x‖²` added to `F`.
    pub fn least_squares_minimizer(&self, ridge: f64) -> Result<Vec<f64>> {
        if self.task != Task::LinearRegression {
            return Err(Error::invalid("normal equations need a linear-regression problem"));
        }
        let p = self.dim();
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let inv_m = 1.0 / self.num_workers() as f64;
        for shard in &self.shards {
            let w = 2.0 * inv_m / shard.size() as f64;
            for s in &shard.samples {
                let z = DVector::from_vec(self.augmented(s));
                h.ger(w, &z, &z, 1.0);
                rhs.axpy(w * s.target, &z, 1.0);
            }
        }
        for i in 0..p {
            h[(i, i)] += 2.0 * ridge;
        }
        let chol = h
            .cholesky()
            .ok_or_else(|| Error::invalid("normal equations are singular"))?;
        Ok(chol.solve(&rhs).iter().cloned().collect())
    }
}

fn validate_sample(task: Task, s: &Sample, features: usize) -> Result<()> {
    if s.features.len() != features {
        return Err(Error::invalid(format!(
            "sample has {} features, expected {features}",
            s.features.len()
        )));
    }
    if task == Task::LogisticRegression && s.target != 0.0 && s.target != 1.0 {
        return Err(Error::invalid(format!(
            "classification label must be 0 or 1, got {}",
            s.target
        )));
    }
    Ok(())
}

#[inline]
fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// A flat labelled dataset: each row remembers the worker that holds it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub rows: Vec<(usize, Sample)>,
}

impl Dataset {
    /// Holds out rows whose index is `≡ 4 (mod 5)`, then groups the rest by
    /// worker in row order.
    pub fn into_problem(self) -> Result<ShardedProblem> {
        if self.rows.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let m = self.rows.iter().map(|(w, _)| *w).max().unwrap() + 1;
        let mut shards: Vec<Shard> = (0..m)
            .map(|worker_id| Shard {
                worker_id,
                samples: Vec::new(),
            })
            .collect();
        let mut test = Vec::new();
        for (i, (w, s)) in self.rows.into_iter().enumerate() {
            if i % TEST_STRIDE == TEST_STRIDE - 1 {
                test.push(s);
            } else {
                shards[w].samples.push(s);
            }
        }
        ShardedProblem::new(self.task, shards, test)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let d = self.rows.first().map(|(_, s)| s.features.len()).unwrap_or(0);
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["worker_id".to_string(), "target".to_string()];
        header.extend((0..d).map(|j| format!("f_{j}")));
        w.write_record(&header).map_err(csv_io)?;
        for (worker, s) in &self.rows {
            let mut rec = Vec::with_capacity(d + 2);
            rec.push(worker.to_string());
            rec.push(format_f64(s.target));
            rec.extend(s.features.iter().map(|v| format_f64(*v)));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load_csv(path: &Path, task: Task) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(f, task, path)
    }

    /// `origin` only labels diagnostics.
    pub fn read_csv<R: Read>(reader: R, task: Task, origin: &Path) -> Result<Self> {
        let input_err = |row: usize, column: &str, message: String| Error::Input {
            path: origin.to_path_buf(),
            row,
            column: column.to_string(),
            message,
        };
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r
            .headers()
            .map_err(|e| input_err(0, "-", e.to_string()))?
            .clone();
        if header.len() < 3 {
            return Err(input_err(0, "-", "need worker_id, target and at least one feature".into()));
        }
        for (i, expected) in ["worker_id", "target"].iter().enumerate() {
            if &header[i] != *expected {
                return Err(input_err(0, &header[i], format!("expected column `{expected}`")));
            }
        }
        for (j, name) in header.iter().skip(2).enumerate() {
            if name != format!("f_{j}") {
                return Err(input_err(0, name, format!("expected column `f_{j}`")));
            }
        }
        let d = header.len() - 2;
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let row = i + 1;
            let rec = rec.map_err(|e| input_err(row, "-", e.to_string()))?;
            if rec.len() != d + 2 {
                return Err(input_err(row, "-", format!("expected {} fields, found {}", d + 2, rec.len())));
            }
            let worker: usize = rec[0]
                .parse()
                .map_err(|e| input_err(row, "worker_id", format!("`{}`: {e}", &rec[0])))?;
            let target: f64 = rec[1]
                .parse()
                .map_err(|e| input_err(row, "target", format!("`{}`: {e}", &rec[1])))?;
            if task == Task::LogisticRegression && target != 0.0 && target != 1.0 {
                return Err(input_err(row, "target", format!("label must be 0 or 1, got {target}")));
            }
            let mut features = Vec::with_capacity(d);
            for j in 0..d {
                let v: f64 = rec[j + 2].parse().map_err(|e| {
                    input_err(row, &header[j + 2], format!("`{}`: {e}", &rec[j + 2]))
                })?;
                features.push(v);
            }
            rows.push((worker, Sample { features, target }));
        }
        Ok(Dataset { task, rows })
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::io("<csv>", std::io::Error::other(e.to_string()))
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Synthetic dataset whose per-worker gradient-Lipschitz constants grow
/// exponentially with the worker index: worker `m` draws features from
/// `N(0, (c · growth_base^m)²)`, with `c` chosen so the mean of the squared
/// scales over workers is `FEATURE_RMS²`.
///
/// Workers own contiguous blocks of `samples_total / M` rows, the last one
/// also taking the remainder. Regression targets come from a fixed Gaussian
/// ground truth plus noise; classification labels are the sign of the
/// ground-truth logit.
pub fn generate_dataset(
    task: Task,
    workers: usize,
    samples_total: usize,
    d: usize,
    growth_base: f64,
    seed: u64,
) -> Result<Dataset> {
    if workers == 0 {
        return Err(Error::invalid("need at least one worker"));
    }
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(growth_base.is_finite() && growth_base > 0.0) {
        return Err(Error::invalid(format!("growth base must be positive, got {growth_base}")));
    }
    let per_worker = samples_total / workers;
    // every shard must keep at least one training row after the hold-out
    if per_worker < 2 {
        return Err(Error::invalid(format!(
            "{samples_total} samples cannot fill {workers} workers"
        )));
    }
    let mean_sq = (0..workers).map(|m| growth_base.powi(2 * m as i32)).sum::<f64>() / workers as f64;
    let base = FEATURE_RMS / mean_sq.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth_scale = 1.0 / (d as f64).sqrt();
    let truth: Vec<f64> = (0..d)
        .map(|_| truth_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let bias: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);

    let mut rows = Vec::with_capacity(samples_total);
    let mut clean = Vec::with_capacity(samples_total);
    for i in 0..samples_total {
        let worker = (i / per_worker).min(workers - 1);
        let s = base * growth_base.powi(worker as i32);
        let features: Vec<f64> = (0..d)
            .map(|_| s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let u = dot(&features, &truth) + bias;
        clean.push(u);
        rows.push((worker, Sample { features, target: 0.0 }));
    }
    match task {
        Task::LinearRegression => {
            let rms = (clean.iter().map(|u| u * u).sum::<f64>() / clean.len() as f64).sqrt();
            let sd = REGRESSION_NOISE * rms;
            for ((_, s), u) in rows.iter_mut().zip(&clean) {
                s.target = u + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Task::LogisticRegression => {
            for ((_, s), u) in rows.iter_mut().zip(&clean) {
                s.target = if *u > 0.0 { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Dataset { task, rows })
}

pub fn generate_heterogeneous(
    task: Task,
    workers: usize,
    samples_total: usize,
    d: usize,
    growth_base: f64,
    seed: u64,
) -> Result<ShardedProblem> {
    generate_dataset(task, workers, samples_total, d, growth_base, seed)?.into_problem()
}
