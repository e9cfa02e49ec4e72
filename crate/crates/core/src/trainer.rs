//! Square-resize pre-training and the collective and individual patch
//! training strategies.
//!
//! Every epoch reshuffles the training images with the run's ChaCha8
//! generator and draws all crops for a mini-batch sequentially from it before
//! the per-image gradients are computed in parallel. Gradients are summed in
//! batch order, so results do not depend on the number of worker threads.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::LabeledImage;
use crate::error::{Error, Result};
use crate::loss::{
    collective_gradient, emd_loss, emd_loss_gradient, loss_gradient, patch_term, LossSpec,
    PatchPrediction, Strategy,
};
use crate::metrics::{EvalSet, ImagePrediction, Metrics};
use crate::patchgrid::{
    horizontal_flip, random_crop, rescale_shorter_edge, Geometry, ImageBuffer, PatchPlan,
};
use crate::ratings::RatingDistribution;
use crate::scorer::{
    lr_at_epoch, sgd_step, Checkpoint, OptimizerConfig, OptimizerState, ParameterGradients,
    RngState, Scorer,
};

/// Patches per image and step for the collective strategy.
pub const COLLECTIVE_PATCHES: usize = 8;
pub const DEFAULT_BATCH_IMAGES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainSquare,
    Collective,
    Individual,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::PretrainSquare => "pretrain_square",
            Phase::Collective => "collective",
            Phase::Individual => "individual",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain_square" => Ok(Phase::PretrainSquare),
            "collective" => Ok(Phase::Collective),
            "individual" => Ok(Phase::Individual),
            other => Err(Error::InvalidParameter(format!(
                "unknown phase '{other}' (expected pretrain_square, collective or individual)"
            ))),
        }
    }
}

/// Learning-rate schedule and epoch count for a loss variant.
pub fn schedule_for(loss: &LossSpec) -> (OptimizerConfig, usize) {
    let (init_lr, decay_factor, decay_interval_epochs, epochs) =
        match (loss.strategy, loss.use_log, loss.use_weight) {
            (Strategy::Collective, false, false) => (1e-4, 0.85, 5, 50),
            (Strategy::Collective, false, true) => (1e-3, 0.85, 5, 50),
            (Strategy::Collective, true, _) => (1e-3, 0.7, 10, 50),
            (Strategy::Individual, false, false) => (1e-3, 0.9, 10, 200),
            (Strategy::Individual, false, true) => (1e-2, 0.9, 10, 200),
            (Strategy::Individual, true, false) => (1e-3, 0.9, 10, 200),
            (Strategy::Individual, true, true) => (1e-2, 0.9, 10, 200),
        };
    (
        OptimizerConfig {
            init_lr,
            decay_factor,
            decay_interval_epochs,
            ..OptimizerConfig::default()
        },
        epochs,
    )
}

/// Schedule of the square-resize pre-training phase.
pub fn pretrain_schedule() -> (OptimizerConfig, usize) {
    (
        OptimizerConfig {
            init_lr: 1e-3,
            decay_factor: 0.95,
            decay_interval_epochs: 10,
            ..OptimizerConfig::default()
        },
        100,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phase: Phase,
    /// Ignored by pre-training, which minimizes the plain distance with `loss.params.r`.
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_images: usize,
    pub patches_per_image: usize,
    pub geometry: Geometry,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub validation_interval: usize,
    pub optimizer: OptimizerConfig,
    /// Test-time plan used for validation in the patch phases.
    pub validation_plan: PatchPlan,
}

impl TrainPlan {
    fn base(phase: Phase, loss: LossSpec, geometry: Geometry, seed: u64) -> Self {
        let (optimizer, epochs) = match phase {
            Phase::PretrainSquare => pretrain_schedule(),
            _ => schedule_for(&loss),
        };
        TrainPlan {
            phase,
            loss,
            epochs,
            batch_images: DEFAULT_BATCH_IMAGES,
            patches_per_image: if phase == Phase::Collective {
                COLLECTIVE_PATCHES
            } else {
                1
            },
            geometry,
            seed,
            validation_interval: 1,
            optimizer,
            validation_plan: PatchPlan::global_local(2, geometry),
        }
    }

    pub fn pretrain(geometry: Geometry, seed: u64) -> Self {
        TrainPlan::base(
            Phase::PretrainSquare,
            "col-emd".parse().expect("built-in slug"),
            geometry,
            seed,
        )
    }

    /// Phase follows the loss strategy; schedule follows the variant.
    pub fn for_loss(loss: LossSpec, geometry: Geometry, seed: u64) -> Self {
        let phase = match loss.strategy {
            Strategy::Collective => Phase::Collective,
            Strategy::Individual => Phase::Individual,
        };
        TrainPlan::base(phase, loss, geometry, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.optimizer.validate()?;
        self.loss.params.validate()?;
        self.validation_plan.validate()?;
        if self.validation_plan.geometry != self.geometry {
            return Err(Error::InvalidParameter(
                "validation plan geometry differs from the training geometry".into(),
            ));
        }
        if self.epochs == 0
            || self.batch_images == 0
            || self.patches_per_image == 0
            || self.validation_interval == 0
        {
            return Err(Error::InvalidParameter(
                "epochs, batch_images, patches_per_image and validation_interval must be positive"
                    .into(),
            ));
        }
        let expected = match self.phase {
            Phase::PretrainSquare => None,
            Phase::Collective => Some(Strategy::Collective),
            Phase::Individual => Some(Strategy::Individual),
        };
        if let Some(strategy) = expected {
            if self.loss.strategy != strategy {
                return Err(Error::InvalidParameter(format!(
                    "loss {} does not match phase {}",
                    self.loss, self.phase
                )));
            }
        }
        Ok(())
    }
}

/// Validation summary of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    pub lcc: Option<f64>,
    pub rmse: f64,
    pub mean_emd: f64,
}

impl From<&Metrics> for ValidationMetrics {
    fn from(m: &Metrics) -> Self {
        ValidationMetrics {
            lcc: m.lcc,
            rmse: m.rmse,
            mean_emd: m.mean_emd,
        }
    }
}

/// One line of the training log. Epoch 0 is the model before any update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-image training loss; `None` for epoch 0.
    pub train_loss: Option<f64>,
    /// `None` on epochs skipped by the validation interval.
    pub validation: Option<ValidationMetrics>,
}

impl EpochRecord {
    /// Tab-separated: epoch, lr, train loss, validation LCC, RMSE, mean EMD.
    pub fn log_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let v = self.validation;
        format!(
            "{}\t{:.6e}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.lr,
            opt(self.train_loss),
            opt(v.and_then(|v| v.lcc)),
            opt(v.map(|v| v.rmse)),
            opt(v.map(|v| v.mean_emd)),
        )
    }
}

pub const LOG_HEADER: &str = "epoch\tlr\ttrain_loss\tval_lcc\tval_rmse\tval_mean_emd";

fn better_by_lcc(a: &ValidationMetrics, b: &ValidationMetrics) -> bool {
    let la = a.lcc.unwrap_or(f64::NEG_INFINITY);
    let lb = b.lcc.unwrap_or(f64::NEG_INFINITY);
    la > lb || (la == lb && a.rmse < b.rmse)
}

/// Epoch with the highest validation LCC; ties go to the lower RMSE, then
/// to the earlier epoch. A missing LCC ranks below every value.
pub fn select_best(history: &[(usize, ValidationMetrics)]) -> Result<usize> {
    let mut best: Option<&(usize, ValidationMetrics)> = None;
    for entry in history {
        best = match best {
            None => Some(entry),
            Some(b)
                if better_by_lcc(&entry.1, &b.1)
                    || (!better_by_lcc(&b.1, &entry.1) && entry.0 < b.0) =>
            {
                Some(entry)
            }
            keep => keep,
        };
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::StateError("cannot select from an empty history".into()))
}

/// Epoch with the lowest validation mean EMD, earliest on ties.
pub fn select_lowest_emd(history: &[(usize, ValidationMetrics)]) -> Result<usize> {
    history
        .iter()
        .min_by(|a, b| a.1.mean_emd.total_cmp(&b.1.mean_emd).then(a.0.cmp(&b.0)))
        .map(|b| b.0)
        .ok_or_else(|| Error::StateError("cannot select from an empty history".into()))
}

/// Training and validation images of one run.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a [LabeledImage],
    pub validation: &'a [LabeledImage],
}

/// Observer of each epoch record; an error aborts the run.
pub type EpochCallback<'a> = dyn FnMut(&EpochRecord) -> Result<()> + 'a;

/// Optional observers of a run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after every epoch record, including epoch 0.
    pub on_epoch: Option<&'a mut EpochCallback<'a>>,
    /// Checked between mini-batches; when set the run stops and returns what it has.
    pub stop: Option<&'a AtomicBool>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the selected epoch.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// State after the last completed epoch, or at the interruption point.
    pub last: Checkpoint,
    pub interrupted: bool,
}

/// Square pre-training: square resize to `S x S`, random `P x P` crop,
/// random horizontal flip, plain distance objective. The returned best model
/// has the lowest validation mean EMD on center crops.
pub fn pretrain_square(
    data: TrainData<'_>,
    init: Scorer,
    plan: &TrainPlan,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    expect_phase(plan, Phase::PretrainSquare)?;
    run(data, init, plan, hooks)
}

/// Collective strategy: `patches_per_image` fresh random crops per image and
/// epoch, averaged inside the loss.
pub fn train_collective(
    data: TrainData<'_>,
    init: Scorer,
    plan: &TrainPlan,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    expect_phase(plan, Phase::Collective)?;
    run(data, init, plan, hooks)
}

/// Individual strategy: each random crop is its own training sample.
pub fn train_individual(
    data: TrainData<'_>,
    init: Scorer,
    plan: &TrainPlan,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    expect_phase(plan, Phase::Individual)?;
    run(data, init, plan, hooks)
}

fn expect_phase(plan: &TrainPlan, phase: Phase) -> Result<()> {
    if plan.phase != phase {
        return Err(Error::InvalidParameter(format!(
            "plan phase is {}, expected {phase}",
            plan.phase
        )));
    }
    Ok(())
}

enum Validator<'a> {
    /// Center crops of the square-resized validation images.
    Square(Vec<(ImageBuffer, &'a LabeledImage)>),
    Patches(EvalSet<'a>),
}

impl Validator<'_> {
    fn metrics(&self, scorer: &Scorer, plan: &TrainPlan) -> Result<ValidationMetrics> {
        let preds = match self {
            Validator::Square(items) => items
                .par_iter()
                .map(|(crop, item)| {
                    let dist = RatingDistribution::from_logits(&scorer.logits(crop)?)?;
                    Ok(ImagePrediction::new(
                        item.id.clone(),
                        dist,
                        item.truth.clone(),
                        item.image.aspect_ratio(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
            Validator::Patches(set) => set.predict(scorer, &plan.validation_plan, plan.seed)?,
        };
        Ok(ValidationMetrics::from(&Metrics::from_predictions(&preds)?))
    }
}

fn square_resize(img: &ImageBuffer, s: usize) -> Result<ImageBuffer> {
    img.resize(s, s)
}

/// Gradient and loss of one training image from its already drawn crops.
fn image_gradient(
    scorer: &Scorer,
    plan: &TrainPlan,
    crops: &[ImageBuffer],
    truth: &RatingDistribution,
) -> Result<(ParameterGradients, f64)> {
    let passes = crops
        .iter()
        .map(|c| scorer.forward(c))
        .collect::<Result<Vec<_>>>()?;
    let preds = passes
        .iter()
        .map(|p| PatchPrediction::from_logits(p.logits.clone()))
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / crops.len() as f64;
    let (logit_grads, loss) = match plan.phase {
        Phase::PretrainSquare => {
            let mut grads = Vec::with_capacity(preds.len());
            let mut loss = 0.0;
            for pred in &preds {
                loss += emd_loss(pred, truth, plan.loss.params.r)? * inv;
                grads.push(
                    emd_loss_gradient(pred, truth, plan.loss.params.r)?
                        .into_iter()
                        .map(|g| g * inv)
                        .collect(),
                );
            }
            (grads, loss)
        }
        Phase::Collective => {
            let mut loss = 0.0;
            for pred in &preds {
                loss += patch_term(&plan.loss, pred, truth)? * inv;
            }
            (collective_gradient(&plan.loss, &preds, truth)?, loss)
        }
        Phase::Individual => {
            // several individual patches of one image count as separate samples
            let mut grads = Vec::with_capacity(preds.len());
            let mut loss = 0.0;
            for pred in &preds {
                loss += patch_term(&plan.loss, pred, truth)? * inv;
                grads.push(
                    loss_gradient(&plan.loss, pred, truth)?
                        .into_iter()
                        .map(|g| g * inv)
                        .collect(),
                );
            }
            (grads, loss)
        }
    };
    let mut total = ParameterGradients::zeros_like(scorer);
    for (pass, g) in passes.iter().zip(&logit_grads) {
        total.add_assign(&scorer.backward(&pass.trace, g)?)?;
    }
    Ok((total, loss))
}

fn run(
    data: TrainData<'_>,
    init: Scorer,
    plan: &TrainPlan,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::EmptyDataset("validation split is empty".into()));
    }
    let geometry = plan.geometry;
    let pretrain = plan.phase == Phase::PretrainSquare;

    // training images at the size crops are drawn from
    let sources = data
        .train
        .par_iter()
        .map(|item| {
            if pretrain {
                square_resize(&item.image, geometry.s)
            } else {
                rescale_shorter_edge(&item.image, geometry.s)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let validator = if pretrain {
        let offset = (geometry.s - geometry.p) / 2;
        Validator::Square(
            data.validation
                .par_iter()
                .map(|item| {
                    let sq = square_resize(&item.image, geometry.s)?;
                    Ok((sq.crop(offset, offset, geometry.p, geometry.p)?, item))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        Validator::Patches(EvalSet::new(data.validation, geometry)?)
    };

    let mut scorer = init;
    let mut optimizer = OptimizerState::new(&scorer);
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut history = Vec::with_capacity(plan.epochs + 1);
    let mut scored: Vec<(usize, ValidationMetrics)> = Vec::new();

    let record = |history: &mut Vec<EpochRecord>,
                  rec: EpochRecord,
                  hooks: &mut TrainHooks<'_>|
     -> Result<()> {
        history.push(rec);
        if let Some(f) = hooks.on_epoch.as_mut() {
            f(&rec)?;
        }
        Ok(())
    };

    let v0 = validator.metrics(&scorer, plan)?;
    scored.push((0, v0));
    let mut best = Checkpoint {
        scorer: scorer.clone(),
        optimizer: optimizer.clone(),
        epoch: 0,
        rng: RngState::capture(&rng),
    };
    let mut best_epoch = 0;
    record(
        &mut history,
        EpochRecord {
            epoch: 0,
            lr: lr_at_epoch(&plan.optimizer, 0),
            train_loss: None,
            validation: Some(v0),
        },
        &mut hooks,
    )?;

    let stopped = |hooks: &TrainHooks<'_>| hooks.stop.is_some_and(|s| s.load(Ordering::SeqCst));
    let mut completed = 0usize;
    let mut interrupted = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    'epochs: for epoch in 1..=plan.epochs {
        let lr = lr_at_epoch(&plan.optimizer, epoch - 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(plan.batch_images) {
            if stopped(&hooks) {
                interrupted = true;
                break 'epochs;
            }
            let mut crops = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut image_crops = Vec::with_capacity(plan.patches_per_image);
                for _ in 0..plan.patches_per_image {
                    let mut crop = random_crop(&sources[i], geometry.p, &mut rng)?.pixels;
                    if pretrain && rng.gen_bool(0.5) {
                        crop = horizontal_flip(&crop);
                    }
                    image_crops.push(crop);
                }
                crops.push(image_crops);
            }
            let results = batch
                .par_iter()
                .zip(crops.par_iter())
                .map(|(&i, c)| image_gradient(&scorer, plan, c, &data.train[i].truth))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = ParameterGradients::zeros_like(&scorer);
            for (g, loss) in &results {
                grads.add_assign(g)?;
                loss_sum += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut scorer, &grads, &mut optimizer, lr, &plan.optimizer)?;
        }
        completed = epoch;
        let validate_now = epoch % plan.validation_interval == 0 || epoch == plan.epochs;
        let validation = if validate_now {
            let v = validator.metrics(&scorer, plan)?;
            scored.push((epoch, v));
            let chosen = if pretrain {
                select_lowest_emd(&scored)?
            } else {
                select_best(&scored)?
            };
            if chosen == epoch {
                best = Checkpoint {
                    scorer: scorer.clone(),
                    optimizer: optimizer.clone(),
                    epoch: epoch as u64,
                    rng: RngState::capture(&rng),
                };
                best_epoch = epoch;
            }
            Some(v)
        } else {
            None
        };
        record(
            &mut history,
            EpochRecord {
                epoch,
                lr,
                train_loss: Some(loss_sum / data.train.len() as f64),
                validation,
            },
            &mut hooks,
        )?;
    }

    let last = Checkpoint {
        scorer,
        optimizer,
        epoch: completed as u64,
        rng: RngState::capture(&rng),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        history,
        last,
        interrupted,
    })
}
