//! The open-world protocol: an incremental task schedule over a deterministic
//! synthetic world, a linear classification head trained with cross-entropy
//! plus the clustering loss, auto-labelling of unknowns, energy-classifier
//! fitting on held-out validation data, exemplar replay with balanced
//! finetuning, and per-task metric reports.

mod run;
mod train;
mod world;

pub use run::{run_open_world, EnergyFitRecord, OpenWorldConfig, RunOutput, TaskTrace};
pub use train::{
    balanced_finetune, extend_exemplars, fit_unknown_identifier, predict, select_exemplars,
    train_task, EnergyFitInfo, EpochTrace, TrainContext, UnknownIdentifier,
};
pub use world::{generate_world, Scene, SceneObject, SceneProposal, SyntheticWorldConfig, TaskData, World};

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

use crate::boxes::AnnotatedBox;
use crate::cluster::{ClusterError, FeatureVector};
use crate::energy::{mask_unseen, EnergyConfig, EnergyError, LogitVector};
use crate::eval::EvalError;
use crate::{ClassId, ImageId};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid world config: {0}")]
    InvalidWorldConfig(String),
    #[error("exemplar store is empty but replay is enabled")]
    EmptyExemplarStore,
    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<ProtocolError>,
    },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ProtocolError {
    pub(crate) fn at_task(self, task: usize) -> ProtocolError {
        ProtocolError::Task {
            task,
            source: Box::new(self),
        }
    }
}

/// Ordered, pairwise-disjoint class groups introduced one task at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSchedule {
    tasks: Vec<BTreeSet<ClassId>>,
}

impl TaskSchedule {
    pub fn new(tasks: Vec<BTreeSet<ClassId>>) -> Result<Self, ProtocolError> {
        if tasks.is_empty() {
            return Err(ProtocolError::InvalidSchedule("no tasks".into()));
        }
        let mut seen: BTreeSet<ClassId> = BTreeSet::new();
        for (i, task) in tasks.iter().enumerate() {
            if task.is_empty() {
                return Err(ProtocolError::InvalidSchedule(format!("task {} is empty", i + 1)));
            }
            for &c in task {
                if c == 0 {
                    return Err(ProtocolError::InvalidSchedule(
                        "class 0 is reserved for unknown".into(),
                    ));
                }
                if !seen.insert(c) {
                    return Err(ProtocolError::InvalidSchedule(format!(
                        "class {c} appears in more than one task"
                    )));
                }
            }
        }
        Ok(TaskSchedule { tasks })
    }

    /// Classes `1..=n_tasks*classes_per_task` split into consecutive groups.
    pub fn uniform(n_tasks: usize, classes_per_task: usize) -> Result<Self, ProtocolError> {
        if n_tasks == 0 || classes_per_task == 0 {
            return Err(ProtocolError::InvalidSchedule(
                "tasks and classes per task must be positive".into(),
            ));
        }
        let tasks = (0..n_tasks)
            .map(|t| {
                ((t * classes_per_task + 1)..=((t + 1) * classes_per_task))
                    .map(|c| c as ClassId)
                    .collect()
            })
            .collect();
        TaskSchedule::new(tasks)
    }

    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Classes introduced at task index `t` (0-based).
    pub fn task_classes(&self, t: usize) -> &BTreeSet<ClassId> {
        &self.tasks[t]
    }

    /// Cumulative known set through task index `t` inclusive.
    pub fn known_through(&self, t: usize) -> BTreeSet<ClassId> {
        self.tasks[..=t].iter().flatten().copied().collect()
    }

    /// Classes of tasks after index `t` (unknown at that point).
    pub fn future_classes(&self, t: usize) -> BTreeSet<ClassId> {
        self.tasks[t + 1..].iter().flatten().copied().collect()
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.known_through(self.n_tasks() - 1)
    }

    /// Bound on the class-id range (the classification head size).
    pub fn c_max(&self) -> usize {
        self.all_classes().iter().max().map_or(0, |&c| c as usize)
    }
}

/// One annotated object with the latent feature the backbone would emit.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub image_id: ImageId,
    pub annotated: AnnotatedBox,
    pub feature: FeatureVector,
}

/// Linear logit head over a fixed class bound. Rows of classes that have not
/// been introduced stay untouched: gradients flow only into active rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    dim: usize,
}

impl LinearHead {
    pub fn new(c_max: usize, dim: usize) -> Self {
        LinearHead {
            weights: vec![vec![0.0; dim]; c_max],
            bias: vec![0.0; c_max],
            dim,
        }
    }

    pub fn c_max(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weight_row(&self, c: ClassId) -> &[f64] {
        &self.weights[(c - 1) as usize]
    }

    pub fn bias_of(&self, c: ClassId) -> f64 {
        self.bias[(c - 1) as usize]
    }

    /// Raw logits for all classes.
    pub fn logits(&self, f: &FeatureVector) -> LogitVector {
        let values = self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(f.values()).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect();
        LogitVector::new(values)
    }

    /// Logits with every class outside `known` masked out.
    pub fn masked_logits(
        &self,
        f: &FeatureVector,
        known: &BTreeSet<ClassId>,
        cfg: &EnergyConfig,
    ) -> LogitVector {
        mask_unseen(&self.logits(f), known, cfg)
    }

    /// One cross-entropy SGD step (with L2 weight decay) over the active
    /// classes. Returns the loss. Only rows of active classes are updated.
    pub fn ce_step(
        &mut self,
        f: &FeatureVector,
        target: ClassId,
        known: &BTreeSet<ClassId>,
        learning_rate: f64,
        weight_decay: f64,
        cfg: &EnergyConfig,
    ) -> f64 {
        debug_assert!(known.contains(&target), "target must be an active class");
        let masked = self.masked_logits(f, known, cfg);
        let probs = crate::energy::softmax_probs(&masked, cfg);
        let mut loss = 0.0;
        for (&c, &p) in known.iter().zip(probs.iter()) {
            let grad = if c == target {
                loss = -(p.max(f64::MIN_POSITIVE)).ln();
                p - 1.0
            } else {
                p
            };
            let row = &mut self.weights[(c - 1) as usize];
            for (w, x) in row.iter_mut().zip(f.values()) {
                *w -= learning_rate * (grad * x + weight_decay * *w);
            }
            self.bias[(c - 1) as usize] -= learning_rate * grad;
        }
        loss
    }

    /// Highest-logit active class and its softmax probability.
    pub fn argmax(&self, masked: &LogitVector, cfg: &EnergyConfig) -> (ClassId, f64) {
        let probs = crate::energy::softmax_probs(masked, cfg);
        let mut best: Option<(ClassId, f64)> = None;
        for (c, p) in masked.active_ids().zip(probs) {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((c, p));
            }
        }
        best.expect("argmax needs a non-empty active set")
    }
}

/// Replay memory: the first-seen instances of each class, capped per class.
#[derive(Debug, Clone, Default)]
pub struct ExemplarStore {
    per_class: std::collections::BTreeMap<ClassId, Vec<InstanceRecord>>,
    n_ex: usize,
}

impl ExemplarStore {
    pub fn new(n_ex: usize) -> Self {
        ExemplarStore {
            per_class: Default::default(),
            n_ex,
        }
    }

    pub fn n_ex(&self) -> usize {
        self.n_ex
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self, c: ClassId) -> usize {
        self.per_class.get(&c).map_or(0, Vec::len)
    }

    /// Add an instance if its class is below the per-class cap.
    pub fn offer(&mut self, instance: InstanceRecord) {
        if self.n_ex == 0 {
            return;
        }
        let entry = self.per_class.entry(instance.annotated.label).or_default();
        if entry.len() < self.n_ex {
            entry.push(instance);
        }
    }

    /// All exemplars, classes in ascending order, insertion order within.
    pub fn instances(&self) -> Vec<&InstanceRecord> {
        self.per_class.values().flat_map(|v| v.iter()).collect()
    }
}

/// Which parts of the method are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationFlags {
    /// Contrastive clustering.
    pub cc: bool,
    /// Auto-labelling unknowns from background proposals.
    pub alu: bool,
    /// Energy-based unknown identifier at prediction time.
    pub ebui: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            cc: true,
            alu: true,
            ebui: true,
        }
    }
}

/// How predictions are screened for unknowns when `ebui` is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum UnknownIdentifierKind {
    /// Shifted-Weibull energy classifier fitted on held-out validation data.
    Energy,
    /// Threshold on the maximum softmax probability.
    SoftmaxThreshold,
}

/// Optimisation and prediction settings of the linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// L2 penalty on the weight rows of active classes (biases are not
    /// decayed).
    pub weight_decay: f64,
    /// Weight of the clustering loss in the training objective.
    pub lambda_cc: f64,
    /// Fraction of the task epoch budget used by balanced finetuning.
    pub finetune_fraction: f64,
    /// Proposals below this objectness are not scored at prediction time.
    pub objectness_floor: f64,
    pub unknown_identifier: UnknownIdentifierKind,
    /// Threshold for the softmax-baseline identifier.
    pub softmax_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 12,
            weight_decay: 2e-3,
            lambda_cc: 0.1,
            finetune_fraction: 0.4,
            objectness_floor: 0.5,
            unknown_identifier: UnknownIdentifierKind::Energy,
            softmax_threshold: 0.5,
        }
    }
}

/// Auto-labelling settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AutoLabelConfig {
    /// Background proposals pseudo-labelled per scene.
    pub top_k: usize,
    /// A proposal overlapping a labelled ground truth at or above this IoU is
    /// not background.
    pub overlap_thresh: f64,
}

impl Default for AutoLabelConfig {
    fn default() -> Self {
        AutoLabelConfig {
            top_k: 1,
            overlap_thresh: 0.3,
        }
    }
}

/// Evaluation thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Recall level for Wilderness Impact.
    pub wi_recall: f64,
    /// Confidence floor for Absolute Open-Set Error counting.
    pub aose_score_thresh: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresh: 0.5,
            wi_recall: 0.8,
            aose_score_thresh: 0.05,
        }
    }
}
