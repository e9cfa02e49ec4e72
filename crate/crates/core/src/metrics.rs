//! Multi-patch aggregation and the evaluation suite.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabeledImage;
use crate::error::{Error, Result};
use crate::patchgrid::{
    rescale_shorter_edge, select_from_rescaled, Geometry, ImageBuffer, PatchPlan, SelectionStrategy,
};
use crate::ratings::{emd, mean_score, RatingDistribution};
use crate::scorer::PatchPredictor;

/// Scores above this are positive for binary accuracy; equal is negative.
pub const BINARY_THRESHOLD: f64 = 5.0;

pub const AE_BIN_WIDTH: f64 = 0.1;
/// Closed bins cover `[0, 2)`; one open bin collects everything above.
pub const AE_CLOSED_BINS: usize = 20;

/// Entrywise mean of the patch distributions.
pub fn aggregate_patches(dists: &[RatingDistribution]) -> Result<RatingDistribution> {
    let first = dists.first().ok_or(Error::EmptyPatchSet)?;
    let n = first.num_classes();
    let mut sum = vec![0.0; n];
    for d in dists {
        if d.num_classes() != n {
            return Err(Error::mismatch(n, d.num_classes()));
        }
        sum.iter_mut().zip(d.probs()).for_each(|(s, p)| *s += p);
    }
    let count = dists.len() as f64;
    RatingDistribution::new(sum.into_iter().map(|s| s / count).collect())
}

fn check_pair(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::mismatch(truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset("no scores to compare".into()));
    }
    Ok(())
}

/// Pearson linear correlation coefficient.
pub fn lcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    if pred.len() < 2 {
        return Err(Error::DegenerateSeries);
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::DegenerateSeries);
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks, ties sharing the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j + 1) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = rank;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
pub fn srcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    lcc(&average_ranks(pred), &average_ranks(truth))
}

pub fn mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    Ok(pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    mse(pred, truth).map(f64::sqrt)
}

/// Fraction of images whose predicted and true scores fall on the same side
/// of [`BINARY_THRESHOLD`].
pub fn binary_accuracy(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair(pred, truth)?;
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (**p > BINARY_THRESHOLD) == (**t > BINARY_THRESHOLD))
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Histogram of absolute score errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeHistogram {
    pub bin_width: f64,
    /// `counts[i]` holds errors in `[i * w, (i + 1) * w)`; the last bin is `[2, inf)`.
    pub counts: Vec<usize>,
}

impl AeHistogram {
    pub fn from_errors(errors: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0; AE_CLOSED_BINS + 1];
        for e in errors {
            // nudge so that exact multiples such as 0.3 land in the bin they open
            let bin = ((e / AE_BIN_WIDTH + 1e-9).floor().max(0.0) as usize).min(AE_CLOSED_BINS);
            counts[bin] += 1;
        }
        AeHistogram {
            bin_width: AE_BIN_WIDTH,
            counts,
        }
    }

    /// Lower edge and (for closed bins) upper edge of bin `i`.
    pub fn bin_edges(&self, i: usize) -> (f64, Option<f64>) {
        let lo = i as f64 * self.bin_width;
        if i + 1 < self.counts.len() {
            (lo, Some((i + 1) as f64 * self.bin_width))
        } else {
            (lo, None)
        }
    }
}

/// Height/width buckets used for the per-aspect-ratio error breakdown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AspectBucket {
    R04To06,
    R06To08,
    R08To10,
    R10To12,
    R12To14,
    R14To16,
    R16Up,
}

impl AspectBucket {
    pub const ALL: [AspectBucket; 7] = [
        AspectBucket::R04To06,
        AspectBucket::R06To08,
        AspectBucket::R08To10,
        AspectBucket::R10To12,
        AspectBucket::R12To14,
        AspectBucket::R14To16,
        AspectBucket::R16Up,
    ];

    /// Lower-inclusive buckets; ratios below 0.4 fold into the first.
    pub fn of(ratio: f64) -> Self {
        // compare on tenths to keep 0.6, 1.4 etc. on the right side of the edge
        let tenths = (ratio * 10.0 + 1e-9).floor();
        match tenths as i64 {
            i64::MIN..=5 => AspectBucket::R04To06,
            6 | 7 => AspectBucket::R06To08,
            8 | 9 => AspectBucket::R08To10,
            10 | 11 => AspectBucket::R10To12,
            12 | 13 => AspectBucket::R12To14,
            14 | 15 => AspectBucket::R14To16,
            _ => AspectBucket::R16Up,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AspectBucket::R04To06 => "0.4-0.6",
            AspectBucket::R06To08 => "0.6-0.8",
            AspectBucket::R08To10 => "0.8-1.0",
            AspectBucket::R10To12 => "1.0-1.2",
            AspectBucket::R12To14 => "1.2-1.4",
            AspectBucket::R14To16 => "1.4-1.6",
            AspectBucket::R16Up => "1.6-",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketMse {
    pub count: usize,
    pub mse: f64,
}

/// Evaluation result for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    pub image_id: String,
    pub predicted_dist: RatingDistribution,
    pub predicted_score: f64,
    pub ground_truth_dist: RatingDistribution,
    pub ground_truth_score: f64,
    /// Height over width of the original image.
    pub aspect_ratio: f64,
}

impl ImagePrediction {
    pub fn new(
        image_id: impl Into<String>,
        predicted_dist: RatingDistribution,
        ground_truth_dist: RatingDistribution,
        aspect_ratio: f64,
    ) -> Self {
        ImagePrediction {
            image_id: image_id.into(),
            predicted_score: mean_score(&predicted_dist),
            ground_truth_score: mean_score(&ground_truth_dist),
            predicted_dist,
            ground_truth_dist,
            aspect_ratio,
        }
    }
}

/// Per-bucket MSE. Empty buckets are left out of the map.
pub fn bucket_mse(preds: &[ImagePrediction]) -> Result<BTreeMap<String, BucketMse>> {
    let mut groups: BTreeMap<AspectBucket, (usize, f64)> = BTreeMap::new();
    for p in preds {
        if p.aspect_ratio.is_nan() || p.aspect_ratio <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "aspect ratio of {} must be positive, got {}",
                p.image_id, p.aspect_ratio
            )));
        }
        let e = groups.entry(AspectBucket::of(p.aspect_ratio)).or_default();
        e.0 += 1;
        e.1 += (p.predicted_score - p.ground_truth_score).powi(2);
    }
    Ok(groups
        .into_iter()
        .map(|(b, (count, sum))| {
            (
                b.label().to_owned(),
                BucketMse {
                    count,
                    mse: sum / count as f64,
                },
            )
        })
        .collect())
}

/// `(mse_a - mse_b) / mse_a` for buckets present in both tables.
pub fn mse_reduction_rate(
    baseline: &BTreeMap<String, BucketMse>,
    candidate: &BTreeMap<String, BucketMse>,
) -> BTreeMap<String, f64> {
    baseline
        .iter()
        .filter_map(|(label, a)| {
            let b = candidate.get(label)?;
            (a.mse > 0.0).then(|| (label.clone(), (a.mse - b.mse) / a.mse))
        })
        .collect()
}

/// Headline metrics over a set of image predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `None` when either score series has zero variance.
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub mse: f64,
    pub rmse: f64,
    pub mean_emd: f64,
    pub binary_accuracy: f64,
}

impl Metrics {
    pub fn from_predictions(preds: &[ImagePrediction]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::EmptyDataset("no predictions to summarize".into()));
        }
        let p: Vec<f64> = preds.iter().map(|x| x.predicted_score).collect();
        let t: Vec<f64> = preds.iter().map(|x| x.ground_truth_score).collect();
        let degenerate_ok = |r: Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::DegenerateSeries) => Ok(None),
            Err(e) => Err(e),
        };
        let mut emd_sum = 0.0;
        for x in preds {
            emd_sum += emd(&x.predicted_dist, &x.ground_truth_dist, 2.0)?;
        }
        let mse_value = mse(&p, &t)?;
        Ok(Metrics {
            lcc: degenerate_ok(lcc(&p, &t))?,
            srcc: degenerate_ok(srcc(&p, &t))?,
            mse: mse_value,
            rmse: mse_value.sqrt(),
            mean_emd: emd_sum / preds.len() as f64,
            binary_accuracy: binary_accuracy(&p, &t)?,
        })
    }
}

/// One row of a patch-strategy sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: SelectionStrategy,
    /// Grid side (local strategies) or random patch count.
    pub param: usize,
    pub patch_count: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: SelectionStrategy,
    pub param: usize,
    pub patch_count: usize,
    pub n_images: usize,
    #[serde(flatten)]
    pub metrics: Metrics,
    pub ae_histogram: AeHistogram,
    pub mse_by_aspect_bucket: BTreeMap<String, BucketMse>,
    pub sweep: Vec<SweepRow>,
    pub predictions: Vec<ImagePrediction>,
}

/// Images prepared once for repeated evaluation under one geometry.
pub struct EvalSet<'a> {
    images: &'a [LabeledImage],
    rescaled: Vec<ImageBuffer>,
    geometry: Geometry,
}

impl<'a> EvalSet<'a> {
    pub fn new(images: &'a [LabeledImage], geometry: Geometry) -> Result<Self> {
        geometry.validate()?;
        let rescaled = images
            .par_iter()
            .map(|img| rescale_shorter_edge(&img.image, geometry.s))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            images,
            rescaled,
            geometry,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Per-image predictions under `plan`. Random crops for image `i` come
    /// from stream `i` of a ChaCha8 generator seeded with `seed`.
    pub fn predict<P: PatchPredictor + ?Sized>(
        &self,
        predictor: &P,
        plan: &PatchPlan,
        seed: u64,
    ) -> Result<Vec<ImagePrediction>> {
        plan.validate()?;
        if plan.geometry != self.geometry {
            return Err(Error::InvalidParameter(
                "plan geometry differs from the prepared evaluation set".into(),
            ));
        }
        if self.images.is_empty() {
            return Err(Error::EmptyDataset("evaluation set is empty".into()));
        }
        (0..self.images.len())
            .into_par_iter()
            .map(|i| {
                let item = &self.images[i];
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let patches = select_from_rescaled(&item.image, &self.rescaled[i], plan, &mut rng)?;
                let dists = patches
                    .iter()
                    .map(|p| predictor.predict(&p.pixels))
                    .collect::<Result<Vec<_>>>()?;
                Ok(ImagePrediction::new(
                    item.id.clone(),
                    aggregate_patches(&dists)?,
                    item.truth.clone(),
                    item.image.aspect_ratio(),
                ))
            })
            .collect()
    }

    pub fn evaluate<P: PatchPredictor + ?Sized>(
        &self,
        predictor: &P,
        plan: &PatchPlan,
        seed: u64,
    ) -> Result<EvalReport> {
        let predictions = self.predict(predictor, plan, seed)?;
        let metrics = Metrics::from_predictions(&predictions)?;
        Ok(EvalReport {
            strategy: plan.strategy,
            param: plan.count,
            patch_count: plan.patches_per_image(),
            n_images: predictions.len(),
            metrics,
            ae_histogram: AeHistogram::from_errors(
                predictions
                    .iter()
                    .map(|p| (p.predicted_score - p.ground_truth_score).abs()),
            ),
            mse_by_aspect_bucket: bucket_mse(&predictions)?,
            sweep: Vec::new(),
            predictions,
        })
    }

    pub fn sweep<P: PatchPredictor + ?Sized>(
        &self,
        predictor: &P,
        plans: &[PatchPlan],
        seed: u64,
    ) -> Result<Vec<SweepRow>> {
        plans
            .iter()
            .map(|plan| {
                let preds = self.predict(predictor, plan, seed)?;
                Ok(SweepRow {
                    strategy: plan.strategy,
                    param: plan.count,
                    patch_count: plan.patches_per_image(),
                    metrics: Metrics::from_predictions(&preds)?,
                })
            })
            .collect()
    }
}

/// Evaluates `predictor` on `images` under one patch plan.
pub fn evaluate<P: PatchPredictor + ?Sized>(
    predictor: &P,
    images: &[LabeledImage],
    plan: &PatchPlan,
    seed: u64,
) -> Result<EvalReport> {
    EvalSet::new(images, plan.geometry)?.evaluate(predictor, plan, seed)
}

/// MP-Random with 1..=10 patches, then MP-Local and MP-GlobalLocal with
/// grid sides 1..=3.
pub fn standard_sweep_plans(geometry: Geometry) -> Vec<PatchPlan> {
    let mut plans: Vec<PatchPlan> = (1..=10).map(|n| PatchPlan::random(n, geometry)).collect();
    plans.extend((1..=3).map(|m| PatchPlan::local(m, geometry)));
    plans.extend((1..=3).map(|m| PatchPlan::global_local(m, geometry)));
    plans
}

/// Plans for one strategy over a range of counts.
pub fn strategy_plans(
    strategy: SelectionStrategy,
    counts: impl IntoIterator<Item = usize>,
    geometry: Geometry,
) -> Vec<PatchPlan> {
    counts
        .into_iter()
        .map(|count| PatchPlan {
            strategy,
            count,
            geometry,
        })
        .collect()
}
