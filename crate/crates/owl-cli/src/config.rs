//! Run configuration: a flat, namespaced key-value surface over every tunable
//! of the pipeline.
//!
//! The file format is one `key = value` pair per line, `#` comments allowed.
//! Unknown keys are rejected, values are validated per key, and canonical
//! serialisation round-trips (parse -> serialize -> parse is the identity).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use owl_core::cluster::{ClusteringConfig, DistanceKind};
use owl_core::energy::EnergyConfig;
use owl_core::protocol::{
    AblationFlags, AutoLabelConfig, EvalConfig, OpenWorldConfig, SyntheticWorldConfig,
    TaskSchedule, TrainConfig, UnknownIdentifierKind,
};

use crate::CliError;

/// Every tunable of a run, under namespaced keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub cluster: ClusteringConfig,
    pub energy: EnergyConfig,
    pub autolabel: AutoLabelConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub flags: AblationFlags,
    pub n_exemplars: usize,
    pub world: WorldKeys,
}

/// World keys, including the schedule shape.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldKeys {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub synth: SyntheticWorldConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            cluster: ClusteringConfig::default(),
            energy: EnergyConfig::default(),
            autolabel: AutoLabelConfig::default(),
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            flags: AblationFlags::default(),
            n_exemplars: 50,
            world: WorldKeys {
                tasks: 2,
                classes_per_task: 5,
                synth: SyntheticWorldConfig::default(),
            },
        }
    }
}

/// All recognised keys, in canonical serialisation order.
pub const KEYS: &[&str] = &[
    "seed",
    "cluster.delta",
    "cluster.eta",
    "cluster.queue_size",
    "cluster.burn_in",
    "cluster.update_period",
    "energy.temperature",
    "energy.mask_value",
    "autolabel.top_k",
    "autolabel.overlap_thresh",
    "eval.iou_thresh",
    "eval.wi_recall",
    "eval.aose_score_thresh",
    "replay.n_ex",
    "train.learning_rate",
    "train.epochs",
    "train.weight_decay",
    "train.lambda_cc",
    "train.finetune_fraction",
    "train.objectness_floor",
    "train.unknown_identifier",
    "train.softmax_threshold",
    "world.tasks",
    "world.classes_per_task",
    "world.dim",
    "world.train_per_class",
    "world.val_per_class",
    "world.test_per_class",
    "world.separation",
    "world.feature_noise",
    "world.box_jitter",
    "world.background_rate",
    "world.scene_extent",
    "world.max_per_scene",
    "world.unknown_rate",
    "flags.cc",
    "flags.alu",
    "flags.ebui",
];

fn config_err(msg: String) -> CliError {
    CliError::Config(msg)
}

fn parse_num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse()
        .map_err(|_| config_err(format!("invalid value for key \"{key}\": \"{raw}\"")))
}

impl RunConfig {
    /// Read one key's canonical string value.
    pub fn get(&self, key: &str) -> Option<String> {
        let v = match key {
            "seed" => self.seed.to_string(),
            "cluster.delta" => self.cluster.margin.to_string(),
            "cluster.eta" => self.cluster.momentum.to_string(),
            "cluster.queue_size" => self.cluster.queue_size.to_string(),
            "cluster.burn_in" => self.cluster.burn_in.to_string(),
            "cluster.update_period" => self.cluster.update_period.to_string(),
            "energy.temperature" => self.energy.temperature.to_string(),
            "energy.mask_value" => self.energy.mask_value.to_string(),
            "autolabel.top_k" => self.autolabel.top_k.to_string(),
            "autolabel.overlap_thresh" => self.autolabel.overlap_thresh.to_string(),
            "eval.iou_thresh" => self.eval.iou_thresh.to_string(),
            "eval.wi_recall" => self.eval.wi_recall.to_string(),
            "eval.aose_score_thresh" => self.eval.aose_score_thresh.to_string(),
            "replay.n_ex" => self.n_exemplars.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.lambda_cc" => self.train.lambda_cc.to_string(),
            "train.finetune_fraction" => self.train.finetune_fraction.to_string(),
            "train.objectness_floor" => self.train.objectness_floor.to_string(),
            "train.unknown_identifier" => match self.train.unknown_identifier {
                UnknownIdentifierKind::Energy => "energy".into(),
                UnknownIdentifierKind::SoftmaxThreshold => "softmax".into(),
            },
            "train.softmax_threshold" => self.train.softmax_threshold.to_string(),
            "world.tasks" => self.world.tasks.to_string(),
            "world.classes_per_task" => self.world.classes_per_task.to_string(),
            "world.dim" => self.world.synth.dim.to_string(),
            "world.train_per_class" => self.world.synth.train_per_class.to_string(),
            "world.val_per_class" => self.world.synth.val_per_class.to_string(),
            "world.test_per_class" => self.world.synth.test_per_class.to_string(),
            "world.separation" => self.world.synth.separation.to_string(),
            "world.feature_noise" => self.world.synth.feature_noise.to_string(),
            "world.box_jitter" => self.world.synth.box_jitter.to_string(),
            "world.background_rate" => self.world.synth.background_rate.to_string(),
            "world.scene_extent" => self.world.synth.scene_extent.to_string(),
            "world.max_per_scene" => self.world.synth.max_per_scene.to_string(),
            "world.unknown_rate" => self.world.synth.unknown_rate.to_string(),
            "flags.cc" => self.flags.cc.to_string(),
            "flags.alu" => self.flags.alu.to_string(),
            "flags.ebui" => self.flags.ebui.to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Set one key from its string form. Rejects unknown keys and invalid
    /// values, naming the key.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_num(key, raw)?,
            "cluster.delta" => self.cluster.margin = parse_num(key, raw)?,
            "cluster.eta" => self.cluster.momentum = parse_num(key, raw)?,
            "cluster.queue_size" => self.cluster.queue_size = parse_num(key, raw)?,
            "cluster.burn_in" => self.cluster.burn_in = parse_num(key, raw)?,
            "cluster.update_period" => self.cluster.update_period = parse_num(key, raw)?,
            "energy.temperature" => self.energy.temperature = parse_num(key, raw)?,
            "energy.mask_value" => self.energy.mask_value = parse_num(key, raw)?,
            "autolabel.top_k" => self.autolabel.top_k = parse_num(key, raw)?,
            "autolabel.overlap_thresh" => self.autolabel.overlap_thresh = parse_num(key, raw)?,
            "eval.iou_thresh" => self.eval.iou_thresh = parse_num(key, raw)?,
            "eval.wi_recall" => self.eval.wi_recall = parse_num(key, raw)?,
            "eval.aose_score_thresh" => self.eval.aose_score_thresh = parse_num(key, raw)?,
            "replay.n_ex" => self.n_exemplars = parse_num(key, raw)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, raw)?,
            "train.epochs" => self.train.epochs = parse_num(key, raw)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, raw)?,
            "train.lambda_cc" => self.train.lambda_cc = parse_num(key, raw)?,
            "train.finetune_fraction" => self.train.finetune_fraction = parse_num(key, raw)?,
            "train.objectness_floor" => self.train.objectness_floor = parse_num(key, raw)?,
            "train.unknown_identifier" => {
                self.train.unknown_identifier = match raw {
                    "energy" => UnknownIdentifierKind::Energy,
                    "softmax" => UnknownIdentifierKind::SoftmaxThreshold,
                    _ => {
                        return Err(config_err(format!(
                            "invalid value for key \"{key}\": \"{raw}\" (expected energy or softmax)"
                        )))
                    }
                }
            }
            "train.softmax_threshold" => self.train.softmax_threshold = parse_num(key, raw)?,
            "world.tasks" => self.world.tasks = parse_num(key, raw)?,
            "world.classes_per_task" => self.world.classes_per_task = parse_num(key, raw)?,
            "world.dim" => self.world.synth.dim = parse_num(key, raw)?,
            "world.train_per_class" => self.world.synth.train_per_class = parse_num(key, raw)?,
            "world.val_per_class" => self.world.synth.val_per_class = parse_num(key, raw)?,
            "world.test_per_class" => self.world.synth.test_per_class = parse_num(key, raw)?,
            "world.separation" => self.world.synth.separation = parse_num(key, raw)?,
            "world.feature_noise" => self.world.synth.feature_noise = parse_num(key, raw)?,
            "world.box_jitter" => self.world.synth.box_jitter = parse_num(key, raw)?,
            "world.background_rate" => self.world.synth.background_rate = parse_num(key, raw)?,
            "world.scene_extent" => self.world.synth.scene_extent = parse_num(key, raw)?,
            "world.max_per_scene" => self.world.synth.max_per_scene = parse_num(key, raw)?,
            "world.unknown_rate" => self.world.synth.unknown_rate = parse_num(key, raw)?,
            "flags.cc" => self.flags.cc = parse_num(key, raw)?,
            "flags.alu" => self.flags.alu = parse_num(key, raw)?,
            "flags.ebui" => self.flags.ebui = parse_num(key, raw)?,
            _ => return Err(config_err(format!("unknown config key \"{key}\""))),
        }
        Ok(())
    }

    /// Parse the flat key-value file format.
    pub fn parse(text: &str) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!(
                    "line {}: expected \"key = value\", got \"{line}\"",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(first) = seen.insert(key.to_string(), lineno + 1) {
                return Err(config_err(format!(
                    "line {}: duplicate key \"{key}\" (first set on line {first})",
                    lineno + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| config_err(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialisation: every key, sorted by the registry order.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            writeln!(out, "{key} = {}", self.get(key).unwrap()).unwrap();
        }
        out
    }

    /// Flat map of all keys, for embedding into reports.
    pub fn as_map(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).unwrap()))
            .collect()
    }

    /// Cross-field invariants, with the offending key in the message.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| {
            Err(config_err(format!("invalid value for key \"{key}\": {why}")))
        };
        if self.cluster.margin.is_nan() || self.cluster.margin <= 0.0 {
            return bad("cluster.delta", "must be > 0");
        }
        if !(0.0..=1.0).contains(&self.cluster.momentum) {
            return bad("cluster.eta", "must lie in [0, 1]");
        }
        if self.cluster.queue_size == 0 {
            return bad("cluster.queue_size", "must be positive");
        }
        if self.cluster.update_period == 0 {
            return bad("cluster.update_period", "must be >= 1");
        }
        if self.energy.temperature.is_nan() || self.energy.temperature <= 0.0 {
            return bad("energy.temperature", "must be > 0");
        }
        if self.energy.mask_value >= 0.0 {
            return bad("energy.mask_value", "must be a large negative value");
        }
        if !(0.0..1.0).contains(&self.autolabel.overlap_thresh) {
            return bad("autolabel.overlap_thresh", "must lie in [0, 1)");
        }
        if !(self.eval.iou_thresh > 0.0 && self.eval.iou_thresh <= 1.0) {
            return bad("eval.iou_thresh", "must lie in (0, 1]");
        }
        if !(self.eval.wi_recall > 0.0 && self.eval.wi_recall <= 1.0) {
            return bad("eval.wi_recall", "must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.eval.aose_score_thresh) {
            return bad("eval.aose_score_thresh", "must lie in [0, 1]");
        }
        if self.train.learning_rate.is_nan() || self.train.learning_rate <= 0.0 {
            return bad("train.learning_rate", "must be > 0");
        }
        if self.train.epochs == 0 {
            return bad("train.epochs", "must be positive");
        }
        if self.train.weight_decay < 0.0 {
            return bad("train.weight_decay", "must be >= 0");
        }
        if self.train.lambda_cc < 0.0 {
            return bad("train.lambda_cc", "must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.train.finetune_fraction) {
            return bad("train.finetune_fraction", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.train.objectness_floor) {
            return bad("train.objectness_floor", "must lie in [0, 1]");
        }
        if !(self.train.softmax_threshold > 0.0 && self.train.softmax_threshold < 1.0) {
            return bad("train.softmax_threshold", "must lie in (0, 1)");
        }
        if self.world.tasks == 0 {
            return bad("world.tasks", "must be positive");
        }
        if self.world.classes_per_task == 0 {
            return bad("world.classes_per_task", "must be positive");
        }
        if self.world.synth.dim == 0 {
            return bad("world.dim", "must be positive");
        }
        if self.world.synth.train_per_class == 0 {
            return bad("world.train_per_class", "must be positive");
        }
        if self.world.synth.test_per_class == 0 {
            return bad("world.test_per_class", "must be positive");
        }
        if self.world.synth.separation.is_nan() || self.world.synth.separation <= 0.0 {
            return bad("world.separation", "must be > 0");
        }
        if self.world.synth.feature_noise.is_nan() || self.world.synth.feature_noise <= 0.0 {
            return bad("world.feature_noise", "must be > 0");
        }
        if self.world.synth.box_jitter.is_nan() || self.world.synth.box_jitter <= 0.0 {
            return bad("world.box_jitter", "must be > 0");
        }
        if self.world.synth.background_rate < 0.0 {
            return bad("world.background_rate", "must be >= 0");
        }
        if self.world.synth.scene_extent.is_nan() || self.world.synth.scene_extent <= 0.0 {
            return bad("world.scene_extent", "must be > 0");
        }
        if self.world.synth.max_per_scene == 0 {
            return bad("world.max_per_scene", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.world.synth.unknown_rate) {
            return bad("world.unknown_rate", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// The schedule described by the world keys.
    pub fn schedule(&self) -> Result<TaskSchedule, CliError> {
        TaskSchedule::uniform(self.world.tasks, self.world.classes_per_task)
            .map_err(|e| config_err(e.to_string()))
    }

    /// World parameters with the run seed applied.
    pub fn world_config(&self) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            seed: self.seed,
            ..self.world.synth.clone()
        }
    }

    /// The protocol-facing bundle.
    pub fn open_world_config(&self) -> OpenWorldConfig {
        OpenWorldConfig {
            cluster: ClusteringConfig {
                distance: DistanceKind::Euclidean,
                ..self.cluster.clone()
            },
            energy: self.energy,
            autolabel: self.autolabel,
            eval: self.eval,
            train: self.train.clone(),
            flags: self.flags,
            n_exemplars: self.n_exemplars,
            seed: self.seed,
        }
    }
}
