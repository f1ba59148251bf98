//! Categorical distributions over workers.
//!
//! The variance of the SVRG direction depends on the sampling distribution
//! only through `Σ_m ‖g_m‖² / p_m`, where `g_m = ∇F_m(x) − ∇F_m(x̄)`. That sum
//! is minimized on the simplex by `p_m ∝ ‖g_m‖`, which is what
//! [`optimal_distribution`] returns. Workers only estimate `‖g_m‖` from a
//! subsample, so the distribution actually used is a perturbation of the
//! optimal one; [`decompose_perturbed`] splits it into the optimal
//! distribution plus a residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::problem::ShardedProblem;

#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    weights: Vec<f64>,
    probabilities: Vec<f64>,
}

impl Categorical {
    /// Fails with [`Error::DegenerateWeights`] when every weight is zero.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("a categorical distribution needs at least one category"));
        }
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
        {
            return Err(Error::invalid(format!("weight {i} is {w}, expected finite and nonnegative")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::DegenerateWeights);
        }
        let probabilities = weights.iter().map(|w| w / total).collect();
        Ok(Categorical {
            weights,
            probabilities,
        })
    }

    pub fn uniform(categories: usize) -> Self {
        Categorical::from_weights(vec![1.0; categories.max(1)]).expect("unit weights are valid")
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Inverse-CDF draw of a 0-based category index.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, p) in self.probabilities.iter().enumerate() {
            if *p > 0.0 {
                cum += p;
                last_positive = i;
                if u < cum {
                    return i;
                }
            }
        }
        // cumulative rounding left u above the final sum
        last_positive
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(dist: &Categorical, rng: &mut R) -> usize {
    dist.sample(rng)
}

/// Variance-minimizing distribution `p_m ∝ ‖∇F_m(x) − ∇F_m(x̄)‖`.
pub fn optimal_distribution(diff_norms: &[f64]) -> Result<Categorical> {
    Categorical::from_weights(diff_norms.to_vec())
}

/// Objective `Σ g_m² / p_m` minimized by [`optimal_distribution`].
pub fn variance_objective(diff_norms: &[f64], probabilities: &[f64]) -> f64 {
    diff_norms
        .iter()
        .zip(probabilities)
        .map(|(g, p)| if *g == 0.0 { 0.0 } else { g * g / p })
        .sum()
}

/// A base distribution and its perturbation `w + δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedPair {
    pub base: Categorical,
    pub perturbed: Categorical,
    pub deltas: Vec<f64>,
}

impl PerturbedPair {
    pub fn new(base_weights: Vec<f64>, perturbed_weights: Vec<f64>) -> Result<Self> {
        if base_weights.len() != perturbed_weights.len() {
            return Err(Error::invalid(format!(
                "base has {} categories, perturbation has {}",
                base_weights.len(),
                perturbed_weights.len()
            )));
        }
        let deltas = perturbed_weights
            .iter()
            .zip(&base_weights)
            .map(|(p, b)| p - b)
            .collect();
        Ok(PerturbedPair {
            base: Categorical::from_weights(base_weights)?,
            perturbed: Categorical::from_weights(perturbed_weights)?,
            deltas,
        })
    }

    fn require_positive_base(&self) -> Result<()> {
        if let Some(i) = self.base.weights().iter().position(|w| *w <= 0.0) {
            return Err(Error::invalid(format!(
                "base weight {i} is zero, so the ratio δ_i / w_i is undefined"
            )));
        }
        Ok(())
    }
}

/// `P̃ = (1 − γ)·P + γ·Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub gamma: f64,
    pub residual: Categorical,
}

impl Decomposition {
    pub fn mixture(&self, base: &Categorical) -> Vec<f64> {
        base.probabilities()
            .iter()
            .zip(self.residual.probabilities())
            .map(|(p, q)| (1.0 - self.gamma) * p + self.gamma * q)
            .collect()
    }
}

/// Smallest `γ` such that `P̃` is a mixture of `P` (mass `1 − γ`) and some
/// other distribution `Q`.
///
/// `Q` has weights `δ_i − w_i · min_j(δ_j / w_j)`; the minimizing category
/// receives weight exactly zero. When `δ` is proportional to `w` (including
/// `δ = 0`) the mixture needs no residual, `γ = 0` and `Q` is returned as `P`.
pub fn decompose_perturbed(pair: &PerturbedPair) -> Result<Decomposition> {
    pair.require_positive_base()?;
    let w = pair.base.weights();
    let (argmin, min_ratio) = pair
        .deltas
        .iter()
        .zip(w)
        .map(|(d, w)| d / w)
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, r)| if r < acc.1 { (i, r) } else { acc });

    let p = pair.base.probabilities();
    let pt = pair.perturbed.probabilities();
    let min_prob_ratio = pt
        .iter()
        .zip(p)
        .map(|(a, b)| a / b)
        .fold(f64::INFINITY, f64::min);
    let gamma = (1.0 - min_prob_ratio).clamp(0.0, 1.0);

    let mut q: Vec<f64> = pair
        .deltas
        .iter()
        .zip(w)
        .map(|(d, w)| (d - w * min_ratio).max(0.0))
        .collect();
    q[argmin] = 0.0;
    let residual = match Categorical::from_weights(q) {
        Ok(c) => c,
        Err(Error::DegenerateWeights) => pair.base.clone(),
        Err(e) => return Err(e),
    };
    Ok(Decomposition { gamma, residual })
}

/// `max_i p_i / p̃_i`, which equals `1 / (1 − γ)`.
pub fn gamma_inverse_bound(pair: &PerturbedPair) -> Result<f64> {
    pair.require_positive_base()?;
    let ratio = pair
        .base
        .probabilities()
        .iter()
        .zip(pair.perturbed.probabilities())
        .map(|(p, pt)| p / pt)
        .fold(0.0, f64::max);
    let decomposition = decompose_perturbed(pair)?;
    let via_gamma = 1.0 / (1.0 - decomposition.gamma);
    if ratio.is_finite() && (ratio - via_gamma).abs() > 1e-10 * ratio {
        return Err(Error::invalid(format!(
            "max p/p̃ = {ratio} disagrees with 1/(1-γ) = {via_gamma}"
        )));
    }
    Ok(ratio)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SubsamplePolicy {
    /// `min(n_m, max(16, ⌈0.1 n_m⌉))` samples per worker.
    Auto,
    Fixed(usize),
    /// Size from the concentration bound, with the range and mean of the
    /// per-sample gradient differences measured on the shard.
    Lemma1,
    /// Exact weights from the whole shard.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimationConfig {
    pub tau: f64,
    pub delta: f64,
    pub policy: SubsamplePolicy,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            tau: 1.0 / 3.0,
            delta: 0.05,
            policy: SubsamplePolicy::Auto,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if let SubsamplePolicy::Fixed(0) = self.policy {
            return Err(Error::invalid("fixed subsample size must be at least 1"));
        }
        Ok(())
    }

    /// Subsample size for one worker, clamped to `[1, shard_size]`.
    pub fn size_for(
        &self,
        problem: &ShardedProblem,
        shard_id: usize,
        x: &[f64],
        anchor: &[f64],
    ) -> Result<usize> {
        let n = problem.shards[shard_id].size();
        let raw = match self.policy {
            SubsamplePolicy::Auto => auto_subsample_size(n),
            SubsamplePolicy::Fixed(k) => k,
            SubsamplePolicy::Full => n,
            SubsamplePolicy::Lemma1 => {
                let (range, mean) = gradient_difference_bounds(problem, shard_id, x, anchor)?;
                if mean == 0.0 {
                    // x == anchor on this shard: any subsample returns 0
                    1
                } else {
                    subsample_size(self, problem.dim(), range, mean)?
                }
            }
        };
        Ok(raw.clamp(1, n))
    }
}

pub fn auto_subsample_size(shard_size: usize) -> usize {
    let tenth = (shard_size as f64 * 0.1).ceil() as usize;
    shard_size.min(tenth.max(16))
}

/// `⌈(1/τ²) · ‖b − a‖² / (2‖μ‖²) · ln(2d/δ)⌉`, at least 1.
pub fn subsample_size(config: &EstimationConfig, d: usize, range_norm: f64, mean_norm: f64) -> Result<usize> {
    config.validate()?;
    if d == 0 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if !(range_norm >= 0.0 && range_norm.is_finite()) {
        return Err(Error::invalid(format!("range norm must be finite and nonnegative, got {range_norm}")));
    }
    if mean_norm == 0.0 {
        return Err(Error::DegenerateWeights);
    }
    if !(mean_norm > 0.0 && mean_norm.is_finite()) {
        return Err(Error::invalid(format!("mean norm must be positive, got {mean_norm}")));
    }
    let ratio = range_norm / mean_norm;
    let raw = ratio * ratio / 2.0 * (2.0 * d as f64 / config.delta).ln() / (config.tau * config.tau);
    // values that are integers up to rounding noise should not be bumped
    let nearest = raw.round();
    let n = if (raw - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        raw.ceil()
    };
    Ok((n as usize).max(1))
}

/// Per-sample gradient differences `a_j = ∇f_j(x) − ∇f_j(x̄)` on one shard.
pub fn gradient_differences(problem: &ShardedProblem, shard_id: usize, x: &[f64], anchor: &[f64]) -> Vec<Vec<f64>> {
    problem.shards[shard_id]
        .samples
        .iter()
        .map(|s| {
            let mut a = vec![0.0; problem.dim()];
            problem.add_sample_gradient(s, x, 1.0, &mut a);
            problem.add_sample_gradient(s, anchor, -1.0, &mut a);
            a
        })
        .collect()
}

/// `(‖b − a‖, ‖μ‖)` for the coordinate-wise bounding box `[a, b]` and mean
/// `μ` of the shard's gradient differences.
pub fn gradient_difference_bounds(
    problem: &ShardedProblem,
    shard_id: usize,
    x: &[f64],
    anchor: &[f64],
) -> Result<(f64, f64)> {
    if shard_id >= problem.num_workers() {
        return Err(Error::invalid(format!("shard {shard_id} out of range")));
    }
    if x.len() != problem.dim() || anchor.len() != problem.dim() {
        return Err(Error::invalid("parameter length does not match problem dimension"));
    }
    let diffs = gradient_differences(problem, shard_id, x, anchor);
    let p = problem.dim();
    let mut lo = vec![f64::INFINITY; p];
    let mut hi = vec![f64::NEG_INFINITY; p];
    let mut mean = vec![0.0; p];
    for a in &diffs {
        for i in 0..p {
            lo[i] = lo[i].min(a[i]);
            hi[i] = hi[i].max(a[i]);
            mean[i] += a[i];
        }
    }
    let n = diffs.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    let range: Vec<f64> = hi.iter().zip(&lo).map(|(h, l)| h - l).collect();
    Ok((norm(&range), norm(&mean)))
}

/// `‖(1/n) Σ_{j ∈ S̃} (∇f_j(x) − ∇f_j(x̄))‖` over `n` rows drawn without
/// replacement. The same subsample is used at both endpoints.
pub fn estimate_shard_weight<R: Rng + ?Sized>(
    problem: &ShardedProblem,
    shard_id: usize,
    x: &[f64],
    anchor: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<f64> {
    let shard = problem
        .shards
        .get(shard_id)
        .ok_or_else(|| Error::invalid(format!("shard {shard_id} out of range")))?;
    if x.len() != problem.dim() || anchor.len() != problem.dim() {
        return Err(Error::invalid("parameter length does not match problem dimension"));
    }
    let size = shard.size();
    if n == 0 || n > size {
        return Err(Error::invalid(format!(
            "subsample size {n} outside [1, {size}] for shard {shard_id}"
        )));
    }
    let mut acc = vec![0.0; problem.dim()];
    if n == size {
        for s in &shard.samples {
            problem.add_sample_gradient(s, x, 1.0, &mut acc);
            problem.add_sample_gradient(s, anchor, -1.0, &mut acc);
        }
    } else {
        // partial Fisher-Yates
        let mut idx: Vec<usize> = (0..size).collect();
        for i in 0..n {
            let j = rng.random_range(i..size);
            idx.swap(i, j);
        }
        for &j in &idx[..n] {
            let s = &shard.samples[j];
            problem.add_sample_gradient(s, x, 1.0, &mut acc);
            problem.add_sample_gradient(s, anchor, -1.0, &mut acc);
        }
    }
    Ok(norm(&acc) / n as f64)
}

/// Exact `‖∇F_m(x) − ∇F_m(x̄)‖` for every worker.
pub fn exact_weights(problem: &ShardedProblem, x: &[f64], anchor: &[f64]) -> Vec<f64> {
    (0..problem.num_workers())
        .map(|m| {
            let gx = problem.shard_gradient_unchecked(m, x);
            let ga = problem.shard_gradient_unchecked(m, anchor);
            gx.iter()
                .zip(&ga)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{Sample, Shard, Task};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn optimal_distribution_examples() {
        let c = optimal_distribution(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c.probabilities(), &[0.25; 4]);
        let c = optimal_distribution(&[1.0, 3.0]).unwrap();
        assert_eq!(c.probabilities(), &[0.25, 0.75]);
        assert!(matches!(optimal_distribution(&[0.0, 0.0]), Err(Error::DegenerateWeights)));
        assert!(matches!(optimal_distribution(&[1.0, -1.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn optimal_distribution_beats_simplex_grid() {
        let g = [1.0, 2.0, 5.0];
        let best = variance_objective(&g, optimal_distribution(&g).unwrap().probabilities());
        let steps = 100;
        for i in 1..steps {
            for j in 1..(steps - i) {
                let p = [i as f64 / 100.0, j as f64 / 100.0, (steps - i - j) as f64 / 100.0];
                assert!(best <= variance_objective(&g, &p) + 1e-12);
            }
        }
        let uniform = variance_objective(&g, &[1.0 / 3.0; 3]);
        assert!(best <= uniform);
        assert!((best - 64.0).abs() < 1e-12); // (Σ g)²
    }

    #[test]
    fn decomposition_of_worked_example() {
        let pair = PerturbedPair::new(vec![40.0, 40.0, 60.0, 60.0], vec![39.0, 41.0, 58.0, 61.0]).unwrap();
        let d = decompose_perturbed(&pair).unwrap();
        let expected = 1.0 - (58.0 / 199.0) / 0.3;
        assert!((d.gamma - expected).abs() < 1e-14);
        assert!((d.gamma - 0.0285).abs() < 1e-4);
        let mix = d.mixture(&pair.base);
        for (a, b) in mix.iter().zip(pair.perturbed.probabilities()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(d.residual.weights()[2], 0.0);
        let inv = gamma_inverse_bound(&pair).unwrap();
        assert!((inv - 1.0 / (1.0 - expected)).abs() < 1e-12);
        assert!((inv - 1.0293).abs() < 1e-4);
    }

    #[test]
    fn zero_perturbation() {
        let pair = PerturbedPair::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        let d = decompose_perturbed(&pair).unwrap();
        assert_eq!(d.gamma, 0.0);
        assert_eq!(d.mixture(&pair.base), pair.base.probabilities());
        assert_eq!(gamma_inverse_bound(&pair).unwrap(), 1.0);
    }

    #[test]
    fn zero_base_weight_is_rejected() {
        let pair = PerturbedPair::new(vec![0.0, 2.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(decompose_perturbed(&pair), Err(Error::InvalidArgument(_))));
        assert!(matches!(gamma_inverse_bound(&pair), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn subsample_size_examples() {
        let cfg = |tau, delta| EstimationConfig {
            tau,
            delta,
            policy: SubsamplePolicy::Lemma1,
        };
        // τ = 1 lies outside the open interval, so evaluate the formula at the
        // closest admissible configuration and check the ratio instead.
        let e = std::f64::consts::E;
        let raw = |tau: f64, d: usize, delta: f64, r: f64, mu: f64| {
            (r / mu).powi(2) / 2.0 * (2.0 * d as f64 / delta).ln() / (tau * tau)
        };
        assert!((raw(1.0, 1, 2.0 / e, 2f64.sqrt(), 1.0) - 1.0).abs() < 1e-12);

        assert_eq!(subsample_size(&cfg(1.0 / 3.0, 0.05), 10, 2f64.sqrt(), 1.0).unwrap(), 54);
        let a = subsample_size(&cfg(0.4, 0.05), 10, 30.0, 1.0).unwrap();
        let b = subsample_size(&cfg(0.2, 0.05), 10, 30.0, 1.0).unwrap();
        let ra = raw(0.4, 10, 0.05, 30.0, 1.0);
        let rb = raw(0.2, 10, 0.05, 30.0, 1.0);
        assert!((rb / ra - 4.0).abs() < 1e-12);
        assert_eq!(a, ra.ceil() as usize);
        assert_eq!(b, rb.ceil() as usize);
        assert!(matches!(
            subsample_size(&cfg(0.3, 0.05), 10, 1.0, 0.0),
            Err(Error::DegenerateWeights)
        ));
        assert!(subsample_size(&cfg(1.0, 0.05), 10, 1.0, 1.0).is_err());
    }

    #[test]
    fn exact_integer_sizes_are_not_bumped() {
        // tiny τ-independent case: ratio² / 2 · ln(2d/δ) / τ² = 9 exactly in reals
        let cfg = EstimationConfig {
            tau: 0.5,
            delta: 2.0 / std::f64::consts::E,
            policy: SubsamplePolicy::Lemma1,
        };
        assert_eq!(subsample_size(&cfg, 1, 2f64.sqrt() * 1.5, 1.0).unwrap(), 9);
    }

    #[test]
    fn auto_policy_sizes() {
        assert_eq!(auto_subsample_size(10), 10);
        assert_eq!(auto_subsample_size(50), 16);
        assert_eq!(auto_subsample_size(500), 50);
    }

    #[test]
    fn categorical_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let single = Categorical::from_weights(vec![3.0]).unwrap();
        let skewed = Categorical::from_weights(vec![0.0, 1.0]).unwrap();
        for _ in 0..1000 {
            assert_eq!(single.sample(&mut rng), 0);
            assert_eq!(sample_categorical(&skewed, &mut rng), 1);
        }
        let c = Categorical::from_weights(vec![0.25, 0.75]).unwrap();
        let draws = 100_000;
        let hits = (0..draws).filter(|_| c.sample(&mut rng) == 1).count();
        assert!((hits as f64 / draws as f64 - 0.75).abs() < 0.01);
    }

    fn toy_problem() -> ShardedProblem {
        let samples = (0..30)
            .map(|i| Sample {
                features: vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()],
                target: i as f64 * 0.1,
            })
            .collect();
        ShardedProblem::new(Task::LinearRegression, vec![Shard { worker_id: 0, samples }], vec![]).unwrap()
    }

    #[test]
    fn estimate_edge_cases() {
        let p = toy_problem();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.5, -0.2, 0.1];
        let anchor = [0.0, 0.3, -0.4];
        assert_eq!(estimate_shard_weight(&p, 0, &x, &x, 7, &mut rng).unwrap(), 0.0);
        let full = estimate_shard_weight(&p, 0, &x, &anchor, 30, &mut rng).unwrap();
        let exact = exact_weights(&p, &x, &anchor)[0];
        assert!((full - exact).abs() < 1e-12);
        assert!(estimate_shard_weight(&p, 0, &x, &anchor, 0, &mut rng).is_err());
        assert!(estimate_shard_weight(&p, 0, &x, &anchor, 31, &mut rng).is_err());
    }

    #[test]
    fn estimates_are_reproducible() {
        let p = toy_problem();
        let x = [0.5, -0.2, 0.1];
        let anchor = [0.0, 0.3, -0.4];
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5)
                .map(|_| estimate_shard_weight(&p, 0, &x, &anchor, 6, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(11), run(11));
    }

    #[test]
    fn lemma1_policy_clamps_to_shard() {
        let p = toy_problem();
        let cfg = EstimationConfig {
            policy: SubsamplePolicy::Lemma1,
            ..EstimationConfig::default()
        };
        let x = [0.5, -0.2, 0.1];
        let n = cfg.size_for(&p, 0, &x, &[0.0; 3]).unwrap();
        assert!((1..=30).contains(&n));
        assert_eq!(cfg.size_for(&p, 0, &x, &x).unwrap(), 1);
    }
}
