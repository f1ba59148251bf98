//! Closed-form per-epoch contraction factors `ρ`, with
//! `E[F(x̄_k) − F*] ≤ ρ · E[F(x̄_{k−1}) − F*]`. Convergence is only claimed
//! when `ρ < 1`.
//!
//! The ASD-SVRG bounds share the shape
//! `1 / (λ η T (1 − η(1 + c) L̄)) + η c L̄ / (1 − η(1 + c) L̄)` and differ in the
//! coefficient `c`: `2/R` with exact weights, `(2 + 5τ)/R` with subsampled
//! weights, and `8/R` in the variant that goes through `1/(1 − γ) ≤ 2`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RateKind {
    /// Uniform sampling; depends on the largest Lipschitz constant.
    SvrgUniform,
    /// Fixed `p_m ∝ L_m`; depends on the average Lipschitz constant.
    SvrgImportance,
    AsdMain,
    AsdLemma4,
    AsdAppendix,
}

impl RateKind {
    pub const ALL: [RateKind; 5] = [
        RateKind::SvrgUniform,
        RateKind::SvrgImportance,
        RateKind::AsdMain,
        RateKind::AsdLemma4,
        RateKind::AsdAppendix,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RateKind::SvrgUniform => "svrg_uniform",
            RateKind::SvrgImportance => "svrg_importance",
            RateKind::AsdMain => "asd_main",
            RateKind::AsdLemma4 => "asd_lemma4",
            RateKind::AsdAppendix => "asd_appendix",
        }
    }
}

impl fmt::Display for RateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RateKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown rate kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateParams {
    pub lambda: f64,
    pub l_bar: f64,
    pub l_max: f64,
    pub eta: f64,
    pub inner_iters: usize,
    pub group_size: usize,
    pub tau: f64,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive, got {v}")))
    }
}

/// `1/(λ η T · den) + numerator/den` with `den` checked positive.
fn contraction(kind: RateKind, p: &RateParams, den: f64, numerator: f64) -> Result<f64> {
    if den <= 0.0 || !den.is_finite() {
        return Err(Error::RateUndefined(format!(
            "{kind}: denominator {den} is not positive (step size too large)"
        )));
    }
    Ok(1.0 / (p.lambda * p.eta * p.inner_iters as f64 * den) + numerator / den)
}

pub fn theoretical_rate(kind: RateKind, p: &RateParams) -> Result<f64> {
    positive("lambda", p.lambda)?;
    positive("eta", p.eta)?;
    if p.inner_iters == 0 {
        return Err(Error::invalid("T must be at least 1"));
    }
    match kind {
        RateKind::SvrgUniform => {
            positive("l_max", p.l_max)?;
            let den = 1.0 - 2.0 * p.eta * p.l_max;
            contraction(kind, p, den, 2.0 * p.eta * p.l_max)
        }
        RateKind::SvrgImportance => {
            positive("l_bar", p.l_bar)?;
            let den = 1.0 - 2.0 * p.eta * p.l_bar;
            contraction(kind, p, den, 2.0 * p.eta * p.l_bar)
        }
        RateKind::AsdMain | RateKind::AsdLemma4 | RateKind::AsdAppendix => {
            positive("l_bar", p.l_bar)?;
            if p.group_size == 0 {
                return Err(Error::invalid("R must be at least 1"));
            }
            let r = p.group_size as f64;
            let c = match kind {
                RateKind::AsdMain => {
                    if !(p.tau >= 0.0 && p.tau < 1.0) {
                        return Err(Error::invalid(format!("tau must lie in [0, 1), got {}", p.tau)));
                    }
                    (2.0 + 5.0 * p.tau) / r
                }
                RateKind::AsdLemma4 => 2.0 / r,
                _ => 8.0 / r,
            };
            let den = 1.0 - p.eta * (1.0 + c) * p.l_bar;
            contraction(kind, p, den, p.eta * c * p.l_bar)
        }
    }
}
