use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mpa_core::dataio::{
    decode_image, load_labeled, load_manifest, split_dataset, synth_generate, LabeledImage, Split,
    SynthConfig, TeacherParams,
};
use mpa_core::metrics::{
    aggregate_patches, mse_reduction_rate, standard_sweep_plans, strategy_plans, EvalReport,
    EvalSet,
};
use mpa_core::patchgrid::{select_test_patches, PatchPlan, SelectionStrategy};
use mpa_core::ratings::mean_score;
use mpa_core::scorer::{init_scorer, Checkpoint, PatchPredictor};
use mpa_core::trainer::{
    pretrain_square, train_collective, train_individual, EpochRecord, Phase, TrainData, TrainHooks,
    LOG_HEADER,
};

use crate::config::{read_config_file, RawConfig, RunConfig};
use crate::{CliError, ConfigArgs, EvalArgs, PredictArgs, SynthArgs, TrainArgs};

static STOP: AtomicBool = AtomicBool::new(false);

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(runtime(format!("cannot write {}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(runtime(format!("cannot create {}", path.display())))
}

fn resolve(common: &ConfigArgs, flags: &[(&str, &Option<String>)]) -> Result<RunConfig, CliError> {
    let mut layers = Vec::new();
    if let Some(path) = &common.config {
        layers.push(read_config_file(path)?);
    }
    let mut cli = RawConfig::new();
    for (k, v) in &common.set {
        cli.insert(k.clone(), v.clone());
    }
    let shared = [
        ("data", &common.data),
        ("seed", &common.seed),
        ("split_seed", &common.split_seed),
        ("s", &common.s),
        ("p", &common.p),
        ("g", &common.g),
    ];
    for (k, v) in shared.iter().chain(flags) {
        if let Some(v) = v {
            cli.insert(k.to_string(), v.clone());
        }
    }
    layers.push(cli);
    RunConfig::resolve(&layers)
}

/// Manifest path and the directory image paths are relative to.
fn manifest_location(data: &Path) -> (PathBuf, PathBuf) {
    if data.is_dir() {
        (data.join("manifest.jsonl"), data.to_owned())
    } else {
        let base = data.parent().map(Path::to_owned).unwrap_or_default();
        (data.to_owned(), base)
    }
}

fn load_splits(cfg: &RunConfig, splits: &[Split]) -> Result<Vec<Vec<LabeledImage>>, CliError> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("no dataset given (use --data or data = ...)".into()))?;
    let (manifest, base) = manifest_location(data);
    let entries = load_manifest(&manifest).map_err(|e| match e {
        mpa_core::Error::Io(io) => {
            CliError::Data(format!("cannot read manifest {}: {io}", manifest.display()))
        }
        other => other.into(),
    })?;
    let dataset = split_dataset(entries, cfg.split_seed)?;
    splits
        .iter()
        .map(|&s| Ok(load_labeled(&dataset.entries_of(s), &base)?))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path)
        .map_err(|e| CliError::Data(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    ck.save(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let config = SynthConfig {
        n: args.n,
        size_range: (args.min_size, args.max_size),
        aspect_range: (args.min_aspect, args.max_aspect),
        seed: args.seed,
    };
    config.validate()?;
    if config.n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let dataset = synth_generate(&config, &TeacherParams::default())?;
    dataset.write_to(&args.out).map_err(|e| {
        CliError::Runtime(format!(
            "cannot write dataset to {}: {e}",
            args.out.display()
        ))
    })?;
    println!("wrote {} images to {}", config.n, args.out.display());
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = resolve(
        &args.common,
        &[
            ("out", &args.out),
            ("loss", &args.loss),
            ("strategy", &args.strategy),
            ("epochs", &args.epochs),
            ("batch_images", &args.batch_images),
            ("lr", &args.lr),
        ],
    )?;
    let out = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory given (use --out)".into()))?;
    let mut splits = load_splits(&cfg, &[Split::Train, Split::Validation])?;
    let validation = splits.pop().expect("two splits");
    let train = splits.pop().expect("two splits");
    create_dir(&out)?;
    write_file(&out.join("resolved-config.txt"), cfg.to_text())?;
    // a second handler cannot be installed; the first one sets the same flag
    let _ = ctrlc::set_handler(|| STOP.store(true, Ordering::SeqCst));

    let data = TrainData {
        train: &train,
        validation: &validation,
    };
    let mut scorer = init_scorer(&cfg.scorer_config(), cfg.seed)?;
    for plan in cfg.train_plans() {
        let pretrain = plan.phase == Phase::PretrainSquare;
        let prefix = if pretrain { "pretrain-" } else { "" };
        let log_path = out.join(if pretrain {
            "pretrain.log"
        } else {
            "train.log"
        });
        let mut log = fs::File::create(&log_path)
            .map_err(runtime(format!("cannot create {}", log_path.display())))?;
        writeln!(log, "{LOG_HEADER}").map_err(runtime("cannot write log"))?;
        let mut on_epoch = |r: &EpochRecord| -> mpa_core::Result<()> {
            let line = r.log_line();
            writeln!(log, "{line}")?;
            eprintln!("[{}] {line}", plan.phase);
            Ok(())
        };
        let hooks = TrainHooks {
            on_epoch: Some(&mut on_epoch),
            stop: Some(&STOP),
        };
        let outcome = match plan.phase {
            Phase::PretrainSquare => pretrain_square(data, scorer, &plan, hooks),
            Phase::Collective => train_collective(data, scorer, &plan, hooks),
            Phase::Individual => train_individual(data, scorer, &plan, hooks),
        }?;
        save_checkpoint(&outcome.best, &out.join(format!("{prefix}best.mpak")))?;
        save_checkpoint(&outcome.last, &out.join(format!("{prefix}last.mpak")))?;
        write_file(
            &out.join(format!("{prefix}best_epoch.txt")),
            format!("{}\n", outcome.best_epoch),
        )?;
        if outcome.interrupted {
            return Err(CliError::Runtime(format!(
                "interrupted during {} after epoch {}; checkpoints saved in {}",
                plan.phase,
                outcome.last.epoch,
                out.display()
            )));
        }
        let best = outcome.history[outcome.best_epoch].validation;
        println!(
            "{}: best epoch {} ({})",
            plan.phase,
            outcome.best_epoch,
            best.map(|v| format!(
                "val lcc {}, rmse {:.6}, mean emd {:.6}",
                v.lcc.map_or("nan".into(), |l| format!("{l:.6}")),
                v.rmse,
                v.mean_emd
            ))
            .unwrap_or_default()
        );
        scorer = outcome.best.scorer;
    }
    Ok(())
}

/// `k` or an inclusive range `a..b`.
fn parse_counts(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("expected a count or a range a..b, got '{s}'"));
    let counts: Vec<usize> = match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
            if a > b {
                return Err(bad());
            }
            (a..=b).collect()
        }
        None => vec![s.trim().parse().map_err(|_| bad())?],
    };
    if counts.contains(&0) {
        return Err(CliError::Usage("patch counts must be positive".into()));
    }
    Ok(counts)
}

#[derive(Serialize)]
struct SweepCsvRow {
    strategy: SelectionStrategy,
    param: usize,
    patch_count: usize,
    lcc: Option<f64>,
    srcc: Option<f64>,
    mse: f64,
    rmse: f64,
    mean_emd: f64,
    binary_accuracy: f64,
}

#[derive(Serialize)]
struct AeCsvRow {
    lower: f64,
    upper: Option<f64>,
    count: usize,
}

#[derive(Serialize)]
struct BucketCsvRow<'a> {
    bucket: &'a str,
    count: usize,
    mse: f64,
    reduction_rate: Option<f64>,
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Runtime(format!("cannot write {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush()
        .map_err(runtime(format!("cannot write {}", path.display())))
}

fn eval_plans(args: &EvalArgs, cfg: &RunConfig) -> Result<Vec<PatchPlan>, CliError> {
    let geometry = cfg.geometry;
    if args.strategy == "all" {
        return Ok(standard_sweep_plans(geometry));
    }
    let strategy: SelectionStrategy = args.strategy.parse()?;
    let counts = match strategy {
        SelectionStrategy::Random => parse_counts(args.n.as_deref().unwrap_or("1..10"))?,
        _ => parse_counts(args.m.as_deref().unwrap_or("1..3"))?,
    };
    Ok(strategy_plans(strategy, counts, geometry))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut cfg = resolve(&args.common, &[])?;
    cfg.out = Some(args.out.clone());
    let plans = eval_plans(args, &cfg)?;
    let split: Split = args.split.parse()?;
    let baseline: Option<EvalReport> = match &args.baseline {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Data(format!("cannot read baseline {}: {e}", path.display()))
            })?;
            Some(serde_json::from_str(&text).map_err(|e| {
                CliError::Data(format!("baseline {} is not a report: {e}", path.display()))
            })?)
        }
        None => None,
    };
    let ck = load_checkpoint(&args.checkpoint)?;
    let images = load_splits(&cfg, &[split])?.pop().expect("one split");
    let set = EvalSet::new(&images, cfg.geometry)?;
    let headline = *plans.last().expect("at least one plan");
    let mut report = set.evaluate(&ck.scorer, &headline, cfg.seed)?;
    report.sweep = set.sweep(&ck.scorer, &plans, cfg.seed)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("resolved-config.txt"), cfg.to_text())?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&args.out.join("report.json"), json + "\n")?;
    write_csv(
        &args.out.join("sweep.csv"),
        report.sweep.iter().map(|r| SweepCsvRow {
            strategy: r.strategy,
            param: r.param,
            patch_count: r.patch_count,
            lcc: r.metrics.lcc,
            srcc: r.metrics.srcc,
            mse: r.metrics.mse,
            rmse: r.metrics.rmse,
            mean_emd: r.metrics.mean_emd,
            binary_accuracy: r.metrics.binary_accuracy,
        }),
    )?;
    let hist = &report.ae_histogram;
    write_csv(
        &args.out.join("ae_histogram.csv"),
        hist.counts.iter().enumerate().map(|(i, &count)| {
            let (lower, upper) = hist.bin_edges(i);
            AeCsvRow {
                lower,
                upper,
                count,
            }
        }),
    )?;
    let rates = baseline
        .as_ref()
        .map(|b| mse_reduction_rate(&b.mse_by_aspect_bucket, &report.mse_by_aspect_bucket))
        .unwrap_or_default();
    write_csv(
        &args.out.join("bucket_mse.csv"),
        report
            .mse_by_aspect_bucket
            .iter()
            .map(|(label, b)| BucketCsvRow {
                bucket: label,
                count: b.count,
                mse: b.mse,
                reduction_rate: rates.get(label).copied(),
            }),
    )?;
    println!(
        "{} m/n={} on {} images: lcc {} srcc {} mse {:.6} rmse {:.6} mean emd {:.6} accuracy {:.4}",
        report.strategy,
        report.param,
        report.n_images,
        report
            .metrics
            .lcc
            .map_or("nan".into(), |v| format!("{v:.6}")),
        report
            .metrics
            .srcc
            .map_or("nan".into(), |v| format!("{v:.6}")),
        report.metrics.mse,
        report.metrics.rmse,
        report.metrics.mean_emd,
        report.metrics.binary_accuracy,
    );
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    image: &'a Path,
    strategy: SelectionStrategy,
    param: usize,
    patches: usize,
    distribution: &'a [f64],
    score: f64,
}

pub fn predict(args: &PredictArgs) -> Result<(), CliError> {
    let cfg = resolve(&args.common, &[])?;
    let plan = PatchPlan {
        strategy: args.strategy.parse()?,
        count: args.m,
        geometry: cfg.geometry,
    };
    plan.validate()?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let image = decode_image(&args.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let patches = select_test_patches(&image, &plan, &mut rng)?;
    let dists = patches
        .iter()
        .map(|p| ck.scorer.predict(&p.pixels))
        .collect::<mpa_core::Result<Vec<_>>>()?;
    let dist = aggregate_patches(&dists)?;
    let out = Prediction {
        image: &args.image,
        strategy: plan.strategy,
        param: plan.count,
        patches: patches.len(),
        distribution: dist.probs(),
        score: mean_score(&dist),
    };
    println!(
        "{}",
        serde_json::to_string(&out).map_err(|e| CliError::Runtime(e.to_string()))?
    );
    Ok(())
}
