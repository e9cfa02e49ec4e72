//! Flat `key = value` run configuration.
//!
//! Values are layered: built-in defaults, then a `--config` file, then
//! command-line flags. Keys left on `auto` are filled from the loss variant's
//! schedule. The resolved configuration is written back in the same format,
//! so it can be passed to `--config` to repeat a run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mpa_core::loss::{LossSpec, Strategy};
use mpa_core::patchgrid::{Geometry, PatchPlan};
use mpa_core::ratings::EmdParams;
use mpa_core::scorer::{OptimizerConfig, ScorerConfig};
use mpa_core::trainer::{pretrain_schedule, schedule_for, Phase, TrainPlan};

use crate::CliError;

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    (
        "data",
        "",
        "dataset directory (with manifest.jsonl) or manifest file",
    ),
    ("out", "", "output directory"),
    ("loss", "ind-emd", "loss variant slug"),
    (
        "strategy",
        "auto",
        "collective or individual; must agree with the loss",
    ),
    ("k", "1.2", "certainty slope"),
    ("beta", "0.4", "patch weight exponent"),
    ("epsilon", "1e-6", "certainty floor"),
    ("r", "2", "distance norm"),
    (
        "stop_weight_gradient",
        "false",
        "treat the patch weight as a constant",
    ),
    ("s", "342", "shorter edge after rescale"),
    ("p", "299", "local patch side"),
    ("g", "342", "global patch side"),
    ("m", "2", "grid side of the MP-GlobalLocal validation plan"),
    ("channels", "8,16,32", "scorer convolution widths"),
    ("batch_images", "32", "images per mini-batch"),
    (
        "patches_per_image",
        "auto",
        "8 for collective, 1 for individual",
    ),
    ("epochs", "auto", "training epochs (variant table)"),
    ("lr", "auto", "initial learning rate (variant table)"),
    (
        "decay_factor",
        "auto",
        "learning-rate decay factor (variant table)",
    ),
    (
        "decay_interval",
        "auto",
        "epochs between decays (variant table)",
    ),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "1e-4", "coupled weight decay"),
    (
        "pretrain",
        "auto",
        "square-resize pre-training before collective training",
    ),
    ("pretrain_epochs", "auto", "pre-training epochs"),
    ("pretrain_lr", "auto", "pre-training initial learning rate"),
    ("pretrain_decay_factor", "auto", "pre-training decay factor"),
    (
        "pretrain_decay_interval",
        "auto",
        "pre-training epochs between decays",
    ),
    (
        "validation_interval",
        "1",
        "validate every this many epochs",
    ),
    (
        "seed",
        "0",
        "seed for initialization, shuffling and random crops",
    ),
    ("split_seed", "0", "seed of the train/validation/test split"),
];

pub type RawConfig = BTreeMap<String, String>;

/// Reads `key = value` lines; `#` starts a comment.
pub fn read_config_file(path: &Path) -> Result<RawConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut out = RawConfig::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Usage(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            ))
        })?;
        out.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(out)
}

/// Parses a `KEY=VALUE` override.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))?;
    Ok((k.trim().to_owned(), v.trim().to_owned()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub loss: LossSpec,
    pub geometry: Geometry,
    pub m: usize,
    pub channels: Vec<usize>,
    pub batch_images: usize,
    pub patches_per_image: usize,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_optimizer: OptimizerConfig,
    pub validation_interval: usize,
    pub seed: u64,
    pub split_seed: u64,
}

fn parse<T: FromStr>(map: &RawConfig, key: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    let v = &map[key];
    v.parse()
        .map_err(|e| CliError::Usage(format!("invalid value '{v}' for {key}: {e}")))
}

fn parse_auto<T: FromStr>(map: &RawConfig, key: &str, auto: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    if map[key] == "auto" {
        Ok(auto)
    } else {
        parse(map, key)
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Merges `layers` over the defaults (later layers win) and resolves
    /// every key. Unknown keys are rejected.
    pub fn resolve(layers: &[RawConfig]) -> Result<Self, CliError> {
        let mut map: RawConfig = KEYS
            .iter()
            .map(|(k, v, _)| (k.to_string(), v.to_string()))
            .collect();
        for layer in layers {
            for (k, v) in layer {
                if !map.contains_key(k) {
                    let known: Vec<&str> = KEYS.iter().map(|k| k.0).collect();
                    return Err(CliError::Usage(format!(
                        "unknown config key '{k}' (known keys: {})",
                        known.join(", ")
                    )));
                }
                map.insert(k.clone(), v.clone());
            }
        }

        let mut loss: LossSpec = map["loss"]
            .parse()
            .map_err(|e: mpa_core::Error| CliError::Usage(e.to_string()))?;
        if map["strategy"] != "auto" {
            let strategy: Strategy = parse(&map, "strategy")?;
            if strategy != loss.strategy {
                return Err(CliError::Usage(format!(
                    "strategy {} conflicts with loss {loss}, which is {}",
                    strategy.as_str(),
                    loss.strategy.as_str()
                )));
            }
        }
        loss.params = EmdParams {
            r: parse(&map, "r")?,
            k: parse(&map, "k")?,
            beta: parse(&map, "beta")?,
            epsilon: parse(&map, "epsilon")?,
        };
        loss.params
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        loss.stop_weight_gradient = parse(&map, "stop_weight_gradient")?;

        let (table, table_epochs) = schedule_for(&loss);
        let optimizer = OptimizerConfig {
            momentum: parse(&map, "momentum")?,
            weight_decay: parse(&map, "weight_decay")?,
            init_lr: parse_auto(&map, "lr", table.init_lr)?,
            decay_factor: parse_auto(&map, "decay_factor", table.decay_factor)?,
            decay_interval_epochs: parse_auto(&map, "decay_interval", table.decay_interval_epochs)?,
        };
        let (pre, pre_epochs) = pretrain_schedule();
        let pretrain_optimizer = OptimizerConfig {
            momentum: optimizer.momentum,
            weight_decay: optimizer.weight_decay,
            init_lr: parse_auto(&map, "pretrain_lr", pre.init_lr)?,
            decay_factor: parse_auto(&map, "pretrain_decay_factor", pre.decay_factor)?,
            decay_interval_epochs: parse_auto(
                &map,
                "pretrain_decay_interval",
                pre.decay_interval_epochs,
            )?,
        };
        let collective = loss.strategy == Strategy::Collective;
        let pretrain = parse_auto(&map, "pretrain", collective)?;
        if pretrain && !collective {
            return Err(CliError::Usage(
                "pre-training applies to collective training only".into(),
            ));
        }
        let channels = map["channels"]
            .split(',')
            .map(|c| c.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(format!("invalid channels '{}': {e}", map["channels"])))?;

        let cfg = RunConfig {
            data: path_or_none(&map["data"]),
            out: path_or_none(&map["out"]),
            loss,
            geometry: Geometry {
                s: parse(&map, "s")?,
                p: parse(&map, "p")?,
                g: parse(&map, "g")?,
            },
            m: parse(&map, "m")?,
            channels,
            batch_images: parse(&map, "batch_images")?,
            patches_per_image: parse_auto(
                &map,
                "patches_per_image",
                if collective { 8 } else { 1 },
            )?,
            epochs: parse_auto(&map, "epochs", table_epochs)?,
            optimizer,
            pretrain,
            pretrain_epochs: parse_auto(&map, "pretrain_epochs", pre_epochs)?,
            pretrain_optimizer,
            validation_interval: parse(&map, "validation_interval")?,
            seed: parse(&map, "seed")?,
            split_seed: parse(&map, "split_seed")?,
        };
        cfg.geometry
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        cfg.scorer_config()
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        for plan in cfg.train_plans() {
            plan.validate()
                .map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn scorer_config(&self) -> ScorerConfig {
        let default = ScorerConfig::default();
        ScorerConfig {
            conv_channels: self.channels.clone(),
            input_min_side: default
                .input_min_side
                .min(self.geometry.p)
                .min(self.geometry.g),
            ..default
        }
    }

    /// Pre-training plan (when enabled) followed by the main plan.
    pub fn train_plans(&self) -> Vec<TrainPlan> {
        let mut plans = Vec::new();
        if self.pretrain {
            let mut pre = TrainPlan::pretrain(self.geometry, self.seed);
            pre.loss.params = self.loss.params;
            pre.epochs = self.pretrain_epochs;
            pre.batch_images = self.batch_images;
            pre.optimizer = self.pretrain_optimizer;
            pre.validation_interval = self.validation_interval;
            pre.validation_plan = PatchPlan::global_local(self.m, self.geometry);
            plans.push(pre);
        }
        let mut main = TrainPlan::for_loss(self.loss, self.geometry, self.seed);
        main.epochs = self.epochs;
        main.batch_images = self.batch_images;
        main.patches_per_image = self.patches_per_image;
        main.optimizer = self.optimizer;
        main.validation_interval = self.validation_interval;
        main.validation_plan = PatchPlan::global_local(self.m, self.geometry);
        debug_assert!(main.phase != Phase::PretrainSquare);
        plans.push(main);
        plans
    }

    /// Every key with its resolved value, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let values: BTreeMap<&str, String> = [
            ("data", path(&self.data)),
            ("out", path(&self.out)),
            ("loss", self.loss.slug().to_owned()),
            ("strategy", self.loss.strategy.as_str().to_owned()),
            ("k", self.loss.params.k.to_string()),
            ("beta", self.loss.params.beta.to_string()),
            ("epsilon", self.loss.params.epsilon.to_string()),
            ("r", self.loss.params.r.to_string()),
            (
                "stop_weight_gradient",
                self.loss.stop_weight_gradient.to_string(),
            ),
            ("s", self.geometry.s.to_string()),
            ("p", self.geometry.p.to_string()),
            ("g", self.geometry.g.to_string()),
            ("m", self.m.to_string()),
            ("channels", channels.join(",")),
            ("batch_images", self.batch_images.to_string()),
            ("patches_per_image", self.patches_per_image.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lr", self.optimizer.init_lr.to_string()),
            ("decay_factor", self.optimizer.decay_factor.to_string()),
            (
                "decay_interval",
                self.optimizer.decay_interval_epochs.to_string(),
            ),
            ("momentum", self.optimizer.momentum.to_string()),
            ("weight_decay", self.optimizer.weight_decay.to_string()),
            ("pretrain", self.pretrain.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_optimizer.init_lr.to_string()),
            (
                "pretrain_decay_factor",
                self.pretrain_optimizer.decay_factor.to_string(),
            ),
            (
                "pretrain_decay_interval",
                self.pretrain_optimizer.decay_interval_epochs.to_string(),
            ),
            ("validation_interval", self.validation_interval.to_string()),
            ("seed", self.seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
        ]
        .into_iter()
        .collect();
        let mut out = String::new();
        for (key, _, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {}", values[key]);
        }
        out
    }

    /// Help text listing every key and its default.
    pub fn reference() -> String {
        let mut out =
            String::from("Config keys (defaults in brackets; auto = from the loss variant):\n");
        for (key, default, doc) in KEYS {
            let _ = writeln!(out, "  {key:<24} {doc} [{default}]");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(pairs: &[(&str, &str)]) -> RawConfig {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn schedule_defaults_follow_the_loss() {
        let cfg = RunConfig::resolve(&[layer(&[("loss", "ind-emd"), ("strategy", "individual")])])
            .unwrap();
        assert_eq!(cfg.optimizer.init_lr, 1e-2);
        assert_eq!(
            (
                cfg.optimizer.decay_factor,
                cfg.optimizer.decay_interval_epochs
            ),
            (0.9, 10)
        );
        assert_eq!(cfg.epochs, 200);
        assert!(!cfg.pretrain);
        assert_eq!(cfg.patches_per_image, 1);

        let cfg = RunConfig::resolve(&[layer(&[("loss", "col-emd-log")])]).unwrap();
        assert_eq!(cfg.optimizer.init_lr, 1e-3);
        assert_eq!(
            (
                cfg.optimizer.decay_factor,
                cfg.optimizer.decay_interval_epochs
            ),
            (0.7, 10)
        );
        assert_eq!(cfg.epochs, 50);
        assert!(cfg.pretrain);
        assert_eq!(cfg.patches_per_image, 8);
        assert_eq!(cfg.train_plans().len(), 2);
    }

    #[test]
    fn later_layers_win() {
        let cfg = RunConfig::resolve(&[
            layer(&[("epochs", "5"), ("seed", "1")]),
            layer(&[("epochs", "7")]),
        ])
        .unwrap();
        assert_eq!((cfg.epochs, cfg.seed), (7, 1));
    }

    #[test]
    fn errors_are_usage_errors() {
        for bad in [
            layer(&[("loss", "emd")]),
            layer(&[("colour", "red")]),
            layer(&[("loss", "ind-emd"), ("strategy", "collective")]),
            layer(&[("p", "400")]),
            layer(&[("epochs", "many")]),
            layer(&[("loss", "ind-emd"), ("pretrain", "true")]),
        ] {
            assert!(matches!(
                RunConfig::resolve(&[bad]),
                Err(CliError::Usage(_))
            ));
        }
        let msg = match RunConfig::resolve(&[layer(&[("loss", "emd")])]) {
            Err(CliError::Usage(m)) => m,
            _ => unreachable!(),
        };
        assert!(msg.contains("col-emd-weighted") && msg.contains("ind-emd-log"));
    }

    #[test]
    fn resolved_text_round_trips() {
        let cfg = RunConfig::resolve(&[layer(&[
            ("loss", "col-emd"),
            ("s", "64"),
            ("p", "56"),
            ("g", "64"),
            ("data", "d"),
        ])])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, cfg.to_text()).unwrap();
        let again = RunConfig::resolve(&[read_config_file(&path).unwrap()]).unwrap();
        assert_eq!(again, cfg);
    }
}
