//! EMD-certainty losses over predicted logits.
//!
//! Every variant is built from the same per-patch term. With
//! `c = emd_certainty(emd(softmax(z), truth))` and `w = 1 - c^beta`:
//!
//! | variant  | term        |
//! |----------|-------------|
//! | simple   | `-c`        |
//! | weighted | `-w * c`    |
//! | log      | `-ln c`     |
//! | full     | `-w * ln c` |
//!
//! The collective strategy averages the term over a set of patches from one
//! image; the individual strategy uses the term of a single patch.
//!
//! The weighted variant is not minimized by a perfect prediction. Its value is
//! 0 both at `c = 1` and as `c -> 0`, and its true minimum sits in between at
//! `c = (1 + beta)^(-1/beta)` (about 0.43 for `beta = 0.4`). The other three
//! variants reach their minimum (`-1` for simple, 0 for log and full) exactly
//! when the prediction matches the ground truth.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ratings::{cdf_gaps, emd, emd_certainty, patch_weight, EmdParams, RatingDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Collective,
    Individual,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Collective => "collective",
            Strategy::Individual => "individual",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collective" => Ok(Strategy::Collective),
            "individual" => Ok(Strategy::Individual),
            other => Err(Error::InvalidParameter(format!(
                "unknown strategy '{other}' (expected collective or individual)"
            ))),
        }
    }
}

/// One of the eight loss variants plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub strategy: Strategy,
    pub use_log: bool,
    pub use_weight: bool,
    pub params: EmdParams,
    /// Treat the patch weight as a constant when differentiating.
    #[serde(default)]
    pub stop_weight_gradient: bool,
}

/// Slugs of the eight variants, collective first.
pub const LOSS_SLUGS: [&str; 8] = [
    "col-emd-simple",
    "col-emd-weighted",
    "col-emd-log",
    "col-emd",
    "ind-emd-simple",
    "ind-emd-weighted",
    "ind-emd-log",
    "ind-emd",
];

impl LossSpec {
    pub fn new(strategy: Strategy, use_log: bool, use_weight: bool) -> Self {
        LossSpec {
            strategy,
            use_log,
            use_weight,
            params: EmdParams::default(),
            stop_weight_gradient: false,
        }
    }

    /// All eight variants in [`LOSS_SLUGS`] order, with default parameters.
    pub fn all() -> Vec<LossSpec> {
        LOSS_SLUGS
            .iter()
            .map(|s| s.parse().expect("built-in slug"))
            .collect()
    }

    pub fn slug(&self) -> &'static str {
        let base = match self.strategy {
            Strategy::Collective => 0,
            Strategy::Individual => 4,
        };
        let offset = match (self.use_log, self.use_weight) {
            (false, false) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (true, true) => 3,
        };
        LOSS_SLUGS[base + offset]
    }

    pub fn with_params(mut self, params: EmdParams) -> Self {
        self.params = params;
        self
    }
}

impl fmt::Display for LossSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for LossSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (strategy, rest) = if let Some(rest) = s.strip_prefix("col-emd") {
            (Strategy::Collective, rest)
        } else if let Some(rest) = s.strip_prefix("ind-emd") {
            (Strategy::Individual, rest)
        } else {
            return Err(unknown_loss(s));
        };
        let (use_log, use_weight) = match rest {
            "-simple" => (false, false),
            "-weighted" => (false, true),
            "-log" => (true, false),
            "" => (true, true),
            _ => return Err(unknown_loss(s)),
        };
        Ok(LossSpec::new(strategy, use_log, use_weight))
    }
}

fn unknown_loss(s: &str) -> Error {
    Error::InvalidParameter(format!(
        "unknown loss '{s}' (valid: {})",
        LOSS_SLUGS.join(", ")
    ))
}

/// Logits of one patch together with their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub logits: Vec<f64>,
    pub dist: RatingDistribution,
}

impl PatchPrediction {
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        let dist = RatingDistribution::from_logits(&logits)?;
        Ok(PatchPrediction { logits, dist })
    }
}

/// Loss term of a single patch under the individual strategy.
pub fn per_patch_loss(
    spec: &LossSpec,
    pred: &PatchPrediction,
    truth: &RatingDistribution,
) -> Result<f64> {
    if spec.strategy != Strategy::Individual {
        return Err(Error::InvalidParameter(format!(
            "per-patch loss needs an individual variant, got {spec}"
        )));
    }
    patch_term(spec, pred, truth)
}

/// Mean of the per-patch terms over a set of patches from one image.
pub fn collective_loss(
    spec: &LossSpec,
    preds: &[PatchPrediction],
    truth: &RatingDistribution,
) -> Result<f64> {
    if spec.strategy != Strategy::Collective {
        return Err(Error::InvalidParameter(format!(
            "collective loss needs a collective variant, got {spec}"
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let mut total = 0.0;
    for pred in preds {
        total += patch_term(spec, pred, truth)?;
    }
    Ok(total / preds.len() as f64)
}

/// Per-patch term, shared by both strategies.
pub fn patch_term(
    spec: &LossSpec,
    pred: &PatchPrediction,
    truth: &RatingDistribution,
) -> Result<f64> {
    let distance = emd(&pred.dist, truth, spec.params.r)?;
    let c = emd_certainty(distance, &spec.params);
    let base = if spec.use_log { -c.ln() } else { -c };
    Ok(if spec.use_weight {
        patch_weight(c, spec.params.beta) * base
    } else {
        base
    })
}

/// Gradient of [`patch_term`] with respect to the logits.
///
/// The distance is differentiated for `r > 1`; `r = 1` is rejected. At an
/// exact match (distance 0) and on the clamped branch of the certainty the
/// gradient is the zero vector.
pub fn loss_gradient(
    spec: &LossSpec,
    pred: &PatchPrediction,
    truth: &RatingDistribution,
) -> Result<Vec<f64>> {
    let n = pred.dist.num_classes();
    if n != truth.num_classes() {
        return Err(Error::mismatch(n, truth.num_classes()));
    }
    if pred.logits.len() != n {
        return Err(Error::mismatch(n, pred.logits.len()));
    }
    let r = spec.params.r;
    if r <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gradients need r > 1, got {r}"
        )));
    }
    let p = pred.dist.probs();
    let distance = emd(&pred.dist, truth, r)?;
    let k = spec.params.k;
    let unclamped = 1.0 - k * distance;
    if distance == 0.0 || unclamped <= spec.params.epsilon {
        return Ok(vec![0.0; n]);
    }
    let c = unclamped;
    let dloss_dc = certainty_derivative(spec, c);
    let dloss_demd = -k * dloss_dc;

    // d emd / d p_i = emd^(1-r)/N * sum_{j >= i} |g_j|^(r-1) sign(g_j)
    let gaps = cdf_gaps(p, truth.probs());
    let scale = distance.powf(1.0 - r) / n as f64;
    let mut dloss_dp = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        let g = gaps[i];
        tail += if r == 2.0 {
            g
        } else {
            g.signum() * g.abs().powf(r - 1.0)
        };
        dloss_dp[i] = dloss_demd * scale * tail;
    }
    Ok(softmax_backward(p, &dloss_dp))
}

/// Gradients for every patch of a collective loss, each already divided by
/// the number of patches.
pub fn collective_gradient(
    spec: &LossSpec,
    preds: &[PatchPrediction],
    truth: &RatingDistribution,
) -> Result<Vec<Vec<f64>>> {
    if preds.is_empty() {
        return Err(Error::EmptyPatchSet);
    }
    let inv = 1.0 / preds.len() as f64;
    preds
        .iter()
        .map(|pred| {
            loss_gradient(spec, pred, truth).map(|g| g.into_iter().map(|v| v * inv).collect())
        })
        .collect()
}

fn certainty_derivative(spec: &LossSpec, c: f64) -> f64 {
    let beta = spec.params.beta;
    let w = patch_weight(c, beta);
    // dw/dc = -beta c^(beta-1)
    let dw = if spec.stop_weight_gradient {
        0.0
    } else {
        -beta * c.powf(beta - 1.0)
    };
    match (spec.use_log, spec.use_weight) {
        (false, false) => -1.0,
        (false, true) => -(dw * c + w),
        (true, false) => -1.0 / c,
        (true, true) => -(dw * c.ln() + w / c),
    }
}

/// Plain distance objective used for square-resize pre-training.
pub fn emd_loss(pred: &PatchPrediction, truth: &RatingDistribution, r: f64) -> Result<f64> {
    emd(&pred.dist, truth, r)
}

/// Gradient of [`emd_loss`] with respect to the logits (`r > 1`).
pub fn emd_loss_gradient(
    pred: &PatchPrediction,
    truth: &RatingDistribution,
    r: f64,
) -> Result<Vec<f64>> {
    let n = pred.dist.num_classes();
    if n != truth.num_classes() {
        return Err(Error::mismatch(n, truth.num_classes()));
    }
    if r <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gradients need r > 1, got {r}"
        )));
    }
    let p = pred.dist.probs();
    let distance = emd(&pred.dist, truth, r)?;
    if distance == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let gaps = cdf_gaps(p, truth.probs());
    let scale = distance.powf(1.0 - r) / n as f64;
    let mut dp = vec![0.0; n];
    let mut tail = 0.0;
    for i in (0..n).rev() {
        let g = gaps[i];
        tail += if r == 2.0 {
            g
        } else {
            g.signum() * g.abs().powf(r - 1.0)
        };
        dp[i] = scale * tail;
    }
    Ok(softmax_backward(p, &dp))
}

/// Pulls a gradient with respect to probabilities back through softmax.
fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(pi, gi)| pi * (gi - dot)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ratings::patch_weight;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pred(logits: &[f64]) -> PatchPrediction {
        PatchPrediction::from_logits(logits.to_vec()).unwrap()
    }

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        (0..x.len())
            .map(|i| {
                probe[i] = x[i] + h;
                let plus = f(&probe);
                probe[i] = x[i] - h;
                let minus = f(&probe);
                probe[i] = x[i];
                (plus - minus) / (2.0 * h)
            })
            .collect()
    }

    fn relative_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    /// Logits whose softmax has a chosen distance to `truth`: bisect along the
    /// line from `truth`'s log-probabilities to a far-away logit vector.
    fn logits_at_certainty(
        truth: &RatingDistribution,
        target_c: f64,
        params: &EmdParams,
    ) -> Vec<f64> {
        let target_emd = (1.0 - target_c) / params.k;
        let base: Vec<f64> = truth.probs().iter().map(|p| p.max(1e-12).ln()).collect();
        let far: Vec<f64> = (0..10).map(|i| if i == 9 { 30.0 } else { 0.0 }).collect();
        let far = if truth.probs()[9] > 0.5 {
            (0..10).map(|i| if i == 0 { 30.0 } else { 0.0 }).collect()
        } else {
            far
        };
        let at = |t: f64| -> Vec<f64> {
            base.iter()
                .zip(&far)
                .map(|(b, f)| b + t * (f - b))
                .collect()
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let d = emd(&pred(&at(mid)).dist, truth, 2.0).unwrap();
            if d < target_emd {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        at(0.5 * (lo + hi))
    }

    #[test]
    fn slugs_round_trip() {
        let all = LossSpec::all();
        assert_eq!(all.len(), 8);
        for (spec, slug) in all.iter().zip(LOSS_SLUGS) {
            assert_eq!(spec.slug(), slug);
            assert_eq!(spec.to_string().parse::<LossSpec>().unwrap(), *spec);
        }
        let err = "emd".parse::<LossSpec>().unwrap_err().to_string();
        for slug in LOSS_SLUGS {
            assert!(err.contains(slug));
        }
    }

    #[test]
    fn perfect_prediction_is_zero_for_full_variant() {
        let spec: LossSpec = "ind-emd".parse().unwrap();
        let p = pred(&[0.1, -0.3, 0.5, 1.0, 0.0, 0.2, -1.0, 0.4, 0.3, 0.0]);
        let truth = p.dist.clone();
        assert_eq!(per_patch_loss(&spec, &p, &truth).unwrap(), 0.0);
        assert!(loss_gradient(&spec, &p, &truth)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn certainty_half_values() {
        let truth = RatingDistribution::one_hot(3, 10).unwrap();
        let params = EmdParams::default();
        let z = logits_at_certainty(&truth, 0.5, &params);
        let p = pred(&z);
        let c = emd_certainty(emd(&p.dist, &truth, 2.0).unwrap(), &params);
        assert!((c - 0.5).abs() < 1e-9);

        let full: LossSpec = "ind-emd".parse().unwrap();
        let value = per_patch_loss(&full, &p, &truth).unwrap();
        assert!((value - 0.167840).abs() < 1e-6);
        assert!((value - patch_weight(0.5, 0.4) * 2f64.ln()).abs() < 1e-8);

        let simple: LossSpec = "ind-emd-simple".parse().unwrap();
        assert!((per_patch_loss(&simple, &p, &truth).unwrap() + 0.5).abs() < 1e-9);

        let col: LossSpec = "col-emd".parse().unwrap();
        let exact = PatchPrediction {
            logits: truth
                .probs()
                .iter()
                .map(|p| if *p > 0.0 { 50.0 } else { 0.0 })
                .collect(),
            dist: truth.clone(),
        };
        let mean = collective_loss(&col, &[p.clone(), exact], &truth).unwrap();
        assert!((mean - 0.083920).abs() < 1e-6);
        assert!((mean - value / 2.0).abs() < 1e-12);

        let single = collective_loss(&col, std::slice::from_ref(&p), &truth).unwrap();
        assert_eq!(single, value);
    }

    #[test]
    fn strategy_preconditions() {
        let truth = RatingDistribution::uniform(10).unwrap();
        let p = pred(&[0.0; 10]);
        let col: LossSpec = "col-emd".parse().unwrap();
        let ind: LossSpec = "ind-emd".parse().unwrap();
        assert!(per_patch_loss(&col, &p, &truth).is_err());
        assert!(collective_loss(&ind, std::slice::from_ref(&p), &truth).is_err());
        assert!(matches!(
            collective_loss(&col, &[], &truth),
            Err(Error::EmptyPatchSet)
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let spec: LossSpec = "ind-emd".parse().unwrap();
        let truth = RatingDistribution::uniform(5).unwrap();
        let p = pred(&[0.0; 10]);
        assert!(matches!(
            per_patch_loss(&spec, &p, &truth),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(loss_gradient(&spec, &p, &truth).is_err());
    }

    #[test]
    fn clamped_branch_has_zero_gradient() {
        let spec: LossSpec = "ind-emd-log".parse().unwrap();
        let truth = RatingDistribution::one_hot(1, 10).unwrap();
        let mut z = vec![0.0; 10];
        z[9] = 40.0;
        let p = pred(&z);
        assert_eq!(
            emd_certainty(emd(&p.dist, &truth, 2.0).unwrap(), &spec.params),
            spec.params.epsilon
        );
        assert!(loss_gradient(&spec, &p, &truth)
            .unwrap()
            .iter()
            .all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for spec in LossSpec::all() {
            let mut checked = 0;
            while checked < 25 {
                let z: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let w: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
                let s: f64 = w.iter().sum();
                let truth = RatingDistribution::new(w.iter().map(|x| x / s).collect()).unwrap();
                let p = pred(&z);
                let c = emd_certainty(emd(&p.dist, &truth, 2.0).unwrap(), &spec.params);
                if !(0.05..0.95).contains(&c) {
                    continue;
                }
                let analytic = loss_gradient(&spec, &p, &truth).unwrap();
                let numeric =
                    central_diff(|x| patch_term(&spec, &pred(x), &truth).unwrap(), &z, 1e-5);
                let err = relative_error(&analytic, &numeric);
                assert!(err < 1e-4, "{spec}: relative error {err}");
                checked += 1;
            }
        }
    }

    #[test]
    fn stop_weight_gradient_drops_weight_derivative() {
        let truth = RatingDistribution::one_hot(4, 10).unwrap();
        let mut spec: LossSpec = "ind-emd".parse().unwrap();
        let z = logits_at_certainty(&truth, 0.5, &spec.params);
        let p = pred(&z);
        let full = loss_gradient(&spec, &p, &truth).unwrap();
        spec.stop_weight_gradient = true;
        let stopped = loss_gradient(&spec, &p, &truth).unwrap();
        // With the weight frozen only the -w/c part of dL/dc remains.
        let w = patch_weight(0.5, 0.4);
        let ratio = (w / 0.5) / (w / 0.5 - 0.4 * 0.5f64.powf(-0.6) * 0.5f64.ln());
        for (a, b) in full.iter().zip(&stopped) {
            assert!((a * ratio - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_invariance() {
        let truth = RatingDistribution::one_hot(6, 10).unwrap();
        let z = [0.3, -0.2, 0.1, 0.9, -0.5, 0.0, 0.4, 0.2, -0.1, 0.6];
        let shifted: Vec<f64> = z.iter().map(|v| v + 3.25).collect();
        for spec in LossSpec::all() {
            let a = loss_gradient(&spec, &pred(&z), &truth).unwrap();
            let b = loss_gradient(&spec, &pred(&shifted), &truth).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn emd_objective_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z: Vec<f64> = (0..10).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let truth = RatingDistribution::one_hot(rng.gen_range(1..=10), 10).unwrap();
            let analytic = emd_loss_gradient(&pred(&z), &truth, 2.0).unwrap();
            let numeric = central_diff(|x| emd_loss(&pred(x), &truth, 2.0).unwrap(), &z, 1e-5);
            assert!(relative_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn minimum_at_perfect_prediction() {
        let truth =
            RatingDistribution::new(vec![0.05, 0.05, 0.1, 0.1, 0.2, 0.2, 0.1, 0.1, 0.05, 0.05])
                .unwrap();
        let exact = PatchPrediction {
            logits: truth.probs().iter().map(|p| p.ln()).collect(),
            dist: truth.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for spec in LossSpec::all() {
            let ind = LossSpec {
                strategy: Strategy::Individual,
                ..spec
            };
            let at_truth = per_patch_loss(&ind, &exact, &truth).unwrap();
            let expected = match (ind.use_log, ind.use_weight) {
                (false, false) => -1.0,
                _ => 0.0,
            };
            assert!((at_truth - expected).abs() < 1e-12, "{spec}");
            if ind.use_weight && !ind.use_log {
                // weighted: c = (1+beta)^(-1/beta) beats a perfect prediction
                let c_star = (1.0 + ind.params.beta).powf(-1.0 / ind.params.beta);
                assert!(-patch_weight(c_star, ind.params.beta) * c_star < at_truth);
                continue;
            }
            for _ in 0..200 {
                let z: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..3.0)).collect();
                assert!(per_patch_loss(&ind, &pred(&z), &truth).unwrap() >= at_truth - 1e-12);
            }
        }
    }

    #[test]
    fn full_variant_grows_with_distance() {
        let truth = RatingDistribution::one_hot(5, 10).unwrap();
        let spec: LossSpec = "ind-emd".parse().unwrap();
        let mut last = -1.0;
        for step in 1..80 {
            let c = 1.0 - step as f64 * 0.0118;
            let z = logits_at_certainty(&truth, c, &spec.params);
            let value = per_patch_loss(&spec, &pred(&z), &truth).unwrap();
            assert!(value >= last);
            last = value;
        }
    }
}
