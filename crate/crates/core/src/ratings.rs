//! Rating histograms and the distances between them.
//!
//! Rating classes are valued `1..=N`. Distances between two histograms use
//! the closed form of the earth mover's distance for ordered one-dimensional
//! supports: the `r`-norm of the gap between the two cumulative distributions,
//! averaged over the `N` classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of rating classes in AVA-style data.
pub const DEFAULT_CLASSES: usize = 10;

/// Per-entry tolerance used for distribution equality and the sum-to-one check.
pub const DIST_TOLERANCE: f64 = 1e-9;

/// Sums within this distance of 1 are renormalized instead of rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-6;

/// A normalized histogram over rating classes `1..=N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RatingDistribution {
    probs: Vec<f64>,
}

impl RatingDistribution {
    /// Builds a distribution from probabilities. Sums off by more than `1e-9`
    /// but at most `1e-6` are divided out; anything further is rejected.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 classes, got {}",
                probs.len()
            )));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "entry {bad} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, not 1"
            )));
        }
        let probs = if (sum - 1.0).abs() <= DIST_TOLERANCE {
            probs
        } else {
            probs.into_iter().map(|p| p / sum).collect()
        };
        Ok(RatingDistribution { probs })
    }

    /// Normalizes raw vote counts.
    pub fn from_counts(counts: &[u32]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidHistogram(format!(
                "need at least 2 classes, got {}",
                counts.len()
            )));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total == 0 {
            return Err(Error::InvalidHistogram("all counts are zero".into()));
        }
        let total = total as f64;
        Ok(RatingDistribution {
            probs: counts.iter().map(|&c| f64::from(c) / total).collect(),
        })
    }

    /// Softmax of `logits`, shifted by the maximum for stability.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.len() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "need at least 2 logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidDistribution("non-finite logit".into()));
        }
        Ok(RatingDistribution {
            probs: softmax(logits),
        })
    }

    /// All mass on `class` (1-based).
    pub fn one_hot(class: usize, n: usize) -> Result<Self> {
        if n < 2 || class == 0 || class > n {
            return Err(Error::InvalidParameter(format!(
                "class {class} outside 1..={n}"
            )));
        }
        let mut probs = vec![0.0; n];
        probs[class - 1] = 1.0;
        Ok(RatingDistribution { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("need n >= 2, got {n}")));
        }
        Ok(RatingDistribution {
            probs: vec![1.0 / n as f64; n],
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Entrywise comparison at [`DIST_TOLERANCE`].
    pub fn approx_eq(&self, other: &RatingDistribution) -> bool {
        self.probs.len() == other.probs.len()
            && self
                .probs
                .iter()
                .zip(&other.probs)
                .all(|(a, b)| (a - b).abs() <= DIST_TOLERANCE)
    }
}

impl TryFrom<Vec<f64>> for RatingDistribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        RatingDistribution::new(probs)
    }
}

impl From<RatingDistribution> for Vec<f64> {
    fn from(d: RatingDistribution) -> Self {
        d.probs
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Hyperparameters of the EMD-derived certainty and patch weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmdParams {
    /// Norm order of the distance.
    pub r: f64,
    /// Expansion coefficient of the certainty transform.
    pub k: f64,
    /// Exponent of the patch weight.
    pub beta: f64,
    /// Floor of the certainty transform.
    pub epsilon: f64,
}

impl Default for EmdParams {
    fn default() -> Self {
        EmdParams {
            r: 2.0,
            k: 1.2,
            beta: 0.4,
            epsilon: 1e-6,
        }
    }
}

impl EmdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.r >= 1.0 && self.r.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "r must be >= 1, got {}",
                self.r
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "k must be > 0, got {}",
                self.k
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta must be > 0, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Normalizes a vector of vote counts.
pub fn normalize(counts: &[u32]) -> Result<RatingDistribution> {
    RatingDistribution::from_counts(counts)
}

/// Expected rating, `sum_i i * p_i` with 1-based classes.
pub fn mean_score(d: &RatingDistribution) -> f64 {
    d.probs
        .iter()
        .enumerate()
        .map(|(i, p)| (i + 1) as f64 * p)
        .sum()
}

pub fn cdf(d: &RatingDistribution) -> Vec<f64> {
    d.probs
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// `r`-norm earth mover's distance between two histograms on the same classes.
pub fn emd(p: &RatingDistribution, q: &RatingDistribution, r: f64) -> Result<f64> {
    if p.num_classes() != q.num_classes() {
        return Err(Error::mismatch(p.num_classes(), q.num_classes()));
    }
    if !(r >= 1.0 && r.is_finite()) {
        return Err(Error::InvalidParameter(format!("r must be >= 1, got {r}")));
    }
    let n = p.num_classes() as f64;
    let gaps = cdf_gaps(p.probs(), q.probs());
    let value = if r == 2.0 {
        (gaps.iter().map(|d| d * d).sum::<f64>() / n).sqrt()
    } else if r == 1.0 {
        gaps.iter().map(|d| d.abs()).sum::<f64>() / n
    } else {
        (gaps.iter().map(|d| d.abs().powf(r)).sum::<f64>() / n).powf(1.0 / r)
    };
    Ok(value)
}

/// Running differences `CDF_p(k) - CDF_q(k)`.
pub(crate) fn cdf_gaps(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    p.iter()
        .zip(q)
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect()
}

/// Certainty transform `max(eps, 1 - k * emd)`.
pub fn emd_certainty(emd_value: f64, params: &EmdParams) -> f64 {
    let c = 1.0 - params.k * emd_value;
    if c >= params.epsilon {
        c
    } else {
        params.epsilon
    }
}

/// Patch weight `1 - emd_c^beta`: near 1 for uncertain patches, 0 at certainty 1.
pub fn patch_weight(emd_c: f64, beta: f64) -> f64 {
    1.0 - emd_c.powf(beta)
}
