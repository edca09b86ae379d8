//! Contrastive clustering in latent space.
//!
//! Features streamed during training are kept in bounded per-class FIFO queues
//! (the feature store). Class prototypes are initialised from class-wise queue
//! means after a burn-in period and thereafter blended with fresh means every
//! `update_period` iterations using a momentum parameter. The clustering loss
//! pulls a feature toward its own class prototype and pushes it at least a
//! margin away from every other prototype.

use std::collections::BTreeMap;
use std::collections::VecDeque;

use thiserror::Error;

use crate::ClassId;

/// Errors from feature-store and distance operations.
#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A latent feature vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()));
        FeatureVector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        FeatureVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(values: Vec<f64>) -> Self {
        FeatureVector::new(values)
    }
}

/// Euclidean distance between two feature vectors.
pub fn euclidean_distance(a: &FeatureVector, b: &FeatureVector) -> Result<f64, ClusterError> {
    if a.dim() != b.dim() {
        return Err(ClusterError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let sq: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq.sqrt())
}

/// Per-class bounded FIFO queues of recent feature vectors.
///
/// Class `0` is the unknown queue. The dimension is fixed by the first push.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    queues: BTreeMap<ClassId, VecDeque<FeatureVector>>,
    capacity: usize,
    dim: Option<usize>,
}

impl FeatureStore {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be positive");
        FeatureStore {
            queues: BTreeMap::new(),
            capacity,
            dim: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append a feature to its class queue, evicting the oldest entry when the
    /// queue is at capacity.
    pub fn push(&mut self, label: ClassId, f: FeatureVector) -> Result<(), ClusterError> {
        match self.dim {
            None => self.dim = Some(f.dim()),
            Some(d) if d != f.dim() => {
                return Err(ClusterError::DimensionMismatch {
                    expected: d,
                    got: f.dim(),
                })
            }
            Some(_) => {}
        }
        let queue = self.queues.entry(label).or_default();
        if queue.len() == self.capacity {
            queue.pop_front();
        }
        queue.push_back(f);
        Ok(())
    }

    pub fn queue(&self, label: ClassId) -> Option<&VecDeque<FeatureVector>> {
        self.queues.get(&label)
    }

    pub fn queue_len(&self, label: ClassId) -> usize {
        self.queues.get(&label).map_or(0, VecDeque::len)
    }

    /// Class-wise arithmetic mean of queue contents. Classes with empty queues
    /// are absent from the result (left uninitialised).
    pub fn class_means(&self) -> PrototypeSet {
        let mut means = PrototypeSet::new();
        for (&label, queue) in &self.queues {
            if queue.is_empty() {
                continue;
            }
            let dim = queue[0].dim();
            let mut acc = vec![0.0; dim];
            for f in queue {
                for (a, v) in acc.iter_mut().zip(f.values()) {
                    *a += v;
                }
            }
            let n = queue.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
            means.set(label, FeatureVector::new(acc));
        }
        means
    }
}

/// The set of class prototypes. A class is initialised once it has an entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrototypeSet {
    prototypes: BTreeMap<ClassId, FeatureVector>,
}

impl PrototypeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, label: ClassId, p: FeatureVector) {
        self.prototypes.insert(label, p);
    }

    pub fn get(&self, label: ClassId) -> Option<&FeatureVector> {
        self.prototypes.get(&label)
    }

    pub fn is_initialized(&self, label: ClassId) -> bool {
        self.prototypes.contains_key(&label)
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ClassId, &FeatureVector)> {
        self.prototypes.iter().map(|(&c, p)| (c, p))
    }

    /// Blend with freshly computed prototypes: `momentum * old + (1 - momentum) * new`.
    ///
    /// Classes absent from `fresh` keep their old prototype. Classes that only
    /// exist in `fresh` (first non-empty queue after the initial burn-in) adopt
    /// the fresh mean directly.
    pub fn momentum_update(&self, fresh: &PrototypeSet, momentum: f64) -> PrototypeSet {
        assert!(
            (0.0..=1.0).contains(&momentum),
            "momentum must lie in [0, 1]"
        );
        let mut out = self.clone();
        for (label, new_p) in fresh.iter() {
            match self.get(label) {
                Some(old_p) => {
                    let blended: Vec<f64> = old_p
                        .values()
                        .iter()
                        .zip(new_p.values())
                        .map(|(o, n)| momentum * o + (1.0 - momentum) * n)
                        .collect();
                    out.set(label, FeatureVector::new(blended));
                }
                None => out.set(label, new_p.clone()),
            }
        }
        out
    }
}

/// Configuration of the clustering loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringConfig {
    /// Margin separating a feature from dissimilar prototypes.
    pub margin: f64,
    /// Iterations before the loss activates and prototypes are first formed.
    pub burn_in: u64,
    /// Prototype refresh period (in iterations) after burn-in.
    pub update_period: u64,
    /// Blend weight of the old prototypes in a refresh.
    pub momentum: f64,
    /// Capacity of each class queue.
    pub queue_size: usize,
    pub distance: DistanceKind,
}

/// Distance function used by the clustering loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceKind {
    #[default]
    Euclidean,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            margin: 10.0,
            burn_in: 1000,
            update_period: 3000,
            momentum: 0.9,
            queue_size: 20,
            distance: DistanceKind::Euclidean,
        }
    }
}

impl ClusteringConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(format!("margin must be > 0, got {}", self.margin));
        }
        if self.update_period < 1 {
            return Err("update_period must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(format!("momentum must lie in [0, 1], got {}", self.momentum));
        }
        if self.queue_size == 0 {
            return Err("queue_size must be positive".into());
        }
        Ok(())
    }
}

/// Result of evaluating the clustering loss and its gradient for one feature.
#[derive(Debug, Clone)]
pub struct ContrastiveEval {
    pub loss: f64,
    /// Gradient with respect to the input feature (prototypes are constants).
    pub grad: FeatureVector,
    /// The feature's own class had no initialised prototype; its pull term was
    /// skipped.
    pub own_prototype_missing: bool,
    /// The feature coincided with a dissimilar prototype inside the margin;
    /// that term's direction is undefined and contributed zero gradient.
    pub degenerate_gradient: bool,
}

/// Clustering loss of `f` labelled `c` against the initialised prototypes.
///
/// The own-class term is the distance to the class prototype; every other
/// initialised prototype contributes `max(0, margin - distance)`.
pub fn contrastive_loss(
    f: &FeatureVector,
    c: ClassId,
    prototypes: &PrototypeSet,
    margin: f64,
) -> f64 {
    contrastive_eval(f, c, prototypes, margin).loss
}

/// Analytic gradient of [`contrastive_loss`] with respect to `f`.
///
/// At the hinge kink (distance exactly equal to the margin) the subgradient 0
/// is used for that term.
pub fn contrastive_loss_grad(
    f: &FeatureVector,
    c: ClassId,
    prototypes: &PrototypeSet,
    margin: f64,
) -> FeatureVector {
    contrastive_eval(f, c, prototypes, margin).grad
}

/// Loss and gradient in one pass, with degeneracy flags.
pub fn contrastive_eval(
    f: &FeatureVector,
    c: ClassId,
    prototypes: &PrototypeSet,
    margin: f64,
) -> ContrastiveEval {
    let dim = f.dim();
    let mut loss = 0.0;
    let mut grad = vec![0.0; dim];
    let mut own_prototype_missing = !prototypes.is_initialized(c);
    let mut degenerate_gradient = false;

    for (label, p) in prototypes.iter() {
        debug_assert_eq!(p.dim(), dim, "prototype dimension mismatch");
        let dist = euclidean_distance(f, p).expect("prototype dimensions are uniform");
        if label == c {
            loss += dist;
            if dist > 0.0 {
                for (g, (x, px)) in grad.iter_mut().zip(f.values().iter().zip(p.values())) {
                    *g += (x - px) / dist;
                }
            }
            // dist == 0 is the term's minimum; gradient contribution stays 0.
        } else {
            let hinge = margin - dist;
            if hinge > 0.0 {
                loss += hinge;
                if dist > 0.0 {
                    for (g, (x, px)) in grad.iter_mut().zip(f.values().iter().zip(p.values())) {
                        *g -= (x - px) / dist;
                    }
                } else {
                    degenerate_gradient = true;
                }
            }
            // hinge <= 0 (including the kink at dist == margin): zero subgradient.
        }
    }
    if prototypes.is_empty() {
        own_prototype_missing = true;
    }
    ContrastiveEval {
        loss,
        grad: FeatureVector::new(grad),
        own_prototype_missing,
        degenerate_gradient,
    }
}

/// Output of one clustering step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grad: FeatureVector,
    /// Iteration counter after this step.
    pub iteration: u64,
    pub own_prototype_missing: bool,
    pub degenerate_gradient: bool,
}

/// The evolving clustering state: feature store, prototypes, iteration counter.
///
/// Single-writer: exactly one training loop may call [`ClusteringState::step`];
/// reads for reporting must happen between steps.
#[derive(Debug, Clone)]
pub struct ClusteringState {
    store: FeatureStore,
    prototypes: PrototypeSet,
    iteration: u64,
    config: ClusteringConfig,
}

impl ClusteringState {
    pub fn new(config: ClusteringConfig) -> Self {
        config.validate().expect("invalid clustering config");
        ClusteringState {
            store: FeatureStore::new(config.queue_size),
            prototypes: PrototypeSet::new(),
            iteration: 0,
            config,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn prototypes(&self) -> &PrototypeSet {
        &self.prototypes
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    pub fn config(&self) -> &ClusteringConfig {
        &self.config
    }

    /// Push a feature into its queue without advancing the iteration counter
    /// or touching prototypes. Used when queue upkeep is wanted while the
    /// clustering loss itself is disabled.
    pub fn push_feature(&mut self, f: FeatureVector, c: ClassId) -> Result<(), ClusterError> {
        self.store.push(c, f)
    }

    /// Advance one iteration: push `f` into queue `c`, refresh prototypes when
    /// due, and return the clustering loss and its gradient.
    ///
    /// Before burn-in completes the loss is zero and the gradient is the zero
    /// vector. At the burn-in iteration the prototypes are initialised to the
    /// class-wise queue means; afterwards a momentum refresh runs whenever the
    /// iteration count is a multiple of the update period.
    pub fn step(&mut self, f: FeatureVector, c: ClassId) -> Result<StepOutput, ClusterError> {
        self.iteration += 1;
        let dim = f.dim();
        self.store.push(c, f.clone())?;

        let i = self.iteration;
        let burn_in = self.config.burn_in;
        if i < burn_in {
            return Ok(StepOutput {
                loss: 0.0,
                grad: FeatureVector::zeros(dim),
                iteration: i,
                own_prototype_missing: false,
                degenerate_gradient: false,
            });
        }
        if i == burn_in {
            self.prototypes = self.store.class_means();
        } else if i.is_multiple_of(self.config.update_period) {
            self.prototypes = self
                .prototypes
                .momentum_update(&self.store.class_means(), self.config.momentum);
        }

        let eval = contrastive_eval(&f, c, &self.prototypes, self.config.margin);
        Ok(StepOutput {
            loss: eval.loss,
            grad: eval.grad,
            iteration: i,
            own_prototype_missing: eval.own_prototype_missing,
            degenerate_gradient: eval.degenerate_gradient,
        })
    }
}
