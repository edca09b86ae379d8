//! Task training, unknown-identifier fitting, prediction, and exemplar replay.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::boxes::auto_label_unknowns;
use crate::cluster::{ClusteringState, FeatureVector};
use crate::energy::{
    classify_energy, classify_softmax_baseline, fit_energy_classifier, free_energy,
    EnergyClassifier, EnergyConfig, EnergyLabel,
};
use crate::eval::DetectionRecord;
use crate::protocol::{
    AblationFlags, AutoLabelConfig, ExemplarStore, LinearHead, ProtocolError, Scene, TrainConfig,
};
use crate::{ClassId, UNKNOWN_CLASS};

/// Shared settings for a training phase.
#[derive(Debug, Clone)]
pub struct TrainContext<'a> {
    /// Classes active (introduced) during this phase.
    pub known: &'a BTreeSet<ClassId>,
    pub flags: AblationFlags,
    pub train: &'a TrainConfig,
    pub autolabel: &'a AutoLabelConfig,
    pub energy: &'a EnergyConfig,
}

/// Per-epoch loss summary.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean cross-entropy over labelled instances.
    pub ce_mean: f64,
    /// Mean clustering loss over post-burn-in clustering steps (0 when none).
    pub contrastive_mean: f64,
    /// Clustering steps taken this epoch.
    pub contrastive_steps: usize,
    /// Clustering steps that were past burn-in.
    pub contrastive_active_steps: usize,
    pub ce_steps: usize,
}

impl EpochTrace {
    /// True when every clustering step of the epoch was past burn-in.
    pub fn fully_post_burn_in(&self) -> bool {
        self.contrastive_steps > 0 && self.contrastive_active_steps == self.contrastive_steps
    }
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha12Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

struct EpochAccumulator {
    ce_sum: f64,
    ce_steps: usize,
    cc_sum_active: f64,
    cc_steps: usize,
    cc_active: usize,
}

impl EpochAccumulator {
    fn new() -> Self {
        EpochAccumulator {
            ce_sum: 0.0,
            ce_steps: 0,
            cc_sum_active: 0.0,
            cc_steps: 0,
            cc_active: 0,
        }
    }

    fn record_ce(&mut self, loss: f64) {
        self.ce_sum += loss;
        self.ce_steps += 1;
    }

    fn record_cc(&mut self, loss: f64, burn_in: u64, iteration: u64) {
        self.cc_steps += 1;
        if iteration >= burn_in {
            self.cc_active += 1;
            self.cc_sum_active += loss;
        }
    }

    fn finish(self, epoch: usize) -> EpochTrace {
        EpochTrace {
            epoch,
            ce_mean: if self.ce_steps > 0 {
                self.ce_sum / self.ce_steps as f64
            } else {
                0.0
            },
            contrastive_mean: if self.cc_active > 0 {
                self.cc_sum_active / self.cc_active as f64
            } else {
                0.0
            },
            contrastive_steps: self.cc_steps,
            contrastive_active_steps: self.cc_active,
            ce_steps: self.ce_steps,
        }
    }
}

fn instance_step(
    head: &mut LinearHead,
    state: &mut ClusteringState,
    acc: &mut EpochAccumulator,
    feature: &FeatureVector,
    label: ClassId,
    ctx: &TrainContext,
) -> Result<(), ProtocolError> {
    let ce = head.ce_step(
        feature,
        label,
        ctx.known,
        ctx.train.learning_rate,
        ctx.train.weight_decay,
        ctx.energy,
    );
    acc.record_ce(ce);
    if ctx.flags.cc {
        let burn_in = state.config().burn_in;
        let out = state.step(feature.clone(), label)?;
        acc.record_cc(out.loss, burn_in, out.iteration);
    }
    Ok(())
}

/// Train the head on a task's scenes.
///
/// Each epoch shuffles the scenes; every labelled object contributes a
/// cross-entropy step (and, with clustering on, a clustering step). With
/// auto-labelling on, the top background proposals of each scene push their
/// features into the unknown queue and, with clustering on, contribute a
/// clustering step with the unknown label.
pub fn train_task(
    head: &mut LinearHead,
    state: &mut ClusteringState,
    scenes: &[Scene],
    ctx: &TrainContext,
    epochs: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<EpochTrace>, ProtocolError> {
    let mut traces = Vec::with_capacity(epochs);
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    for epoch in 0..epochs {
        shuffle(&mut order, rng);
        let mut acc = EpochAccumulator::new();
        for &si in &order {
            let scene = &scenes[si];
            for object in &scene.objects {
                if object.label == UNKNOWN_CLASS {
                    continue;
                }
                instance_step(head, state, &mut acc, &object.feature, object.label, ctx)?;
            }
            if ctx.flags.alu {
                let labelled = scene.labelled_gts();
                let plain = scene.plain_proposals();
                let picked = auto_label_unknowns(
                    &plain,
                    &labelled,
                    ctx.autolabel.top_k,
                    ctx.autolabel.overlap_thresh,
                );
                for unk in &picked {
                    // Recover the proposal's feature by its box.
                    let proposal = scene
                        .proposals
                        .iter()
                        .find(|p| p.bbox == unk.bbox)
                        .expect("auto-labelled box comes from the proposal list");
                    if ctx.flags.cc {
                        let burn_in = state.config().burn_in;
                        let out = state.step(proposal.feature.clone(), UNKNOWN_CLASS)?;
                        acc.record_cc(out.loss, burn_in, out.iteration);
                    } else {
                        state.push_feature(proposal.feature.clone(), UNKNOWN_CLASS)?;
                    }
                }
            }
        }
        traces.push(acc.finish(epoch));
    }
    Ok(traces)
}

/// Summary of an energy-classifier fit on validation data.
#[derive(Debug, Clone)]
pub struct EnergyFitInfo {
    pub classifier: EnergyClassifier,
    pub median_known_energy: f64,
    pub median_unknown_energy: f64,
    pub n_known: usize,
    pub n_unknown: usize,
    /// Mean of the known and unknown accuracies of the fitted classifier on
    /// the validation energies it was fitted to.
    pub balanced_accuracy: f64,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Fit the known/unknown energy models on held-out validation scenes.
///
/// Energies are the free energies of the masked logits of each validation
/// object; objects labelled 0 form the unknown sample.
pub fn fit_unknown_identifier(
    head: &LinearHead,
    validation: &[Scene],
    known: &BTreeSet<ClassId>,
    energy_cfg: &EnergyConfig,
) -> Result<EnergyFitInfo, ProtocolError> {
    let mut known_energies = Vec::new();
    let mut unknown_energies = Vec::new();
    for scene in validation {
        for object in &scene.objects {
            let masked = head.masked_logits(&object.feature, known, energy_cfg);
            let e = free_energy(&masked, energy_cfg)?;
            if object.label == UNKNOWN_CLASS {
                unknown_energies.push(e);
            } else {
                known_energies.push(e);
            }
        }
    }
    let classifier = fit_energy_classifier(&known_energies, &unknown_energies)?;
    let known_hits = known_energies
        .iter()
        .filter(|&&e| classify_energy(&classifier, e) == EnergyLabel::Known)
        .count();
    let unknown_hits = unknown_energies
        .iter()
        .filter(|&&e| classify_energy(&classifier, e) == EnergyLabel::Unknown)
        .count();
    let balanced_accuracy = 0.5
        * (known_hits as f64 / known_energies.len() as f64
            + unknown_hits as f64 / unknown_energies.len() as f64);
    known_energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unknown_energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(EnergyFitInfo {
        classifier,
        median_known_energy: median(&known_energies),
        median_unknown_energy: median(&unknown_energies),
        n_known: known_energies.len(),
        n_unknown: unknown_energies.len(),
        balanced_accuracy,
    })
}

/// Unknown screening applied at prediction time.
#[derive(Debug, Clone)]
pub enum UnknownIdentifier<'a> {
    /// No screening: every detection carries a known label.
    None,
    Energy(&'a EnergyClassifier),
    SoftmaxThreshold(f64),
}

impl UnknownIdentifier<'_> {
    fn is_unknown(&self, masked: &crate::energy::LogitVector, cfg: &EnergyConfig) -> bool {
        match self {
            UnknownIdentifier::None => false,
            UnknownIdentifier::Energy(clf) => {
                let e = free_energy(masked, cfg).expect("active set is non-empty");
                classify_energy(clf, e) == EnergyLabel::Unknown
            }
            UnknownIdentifier::SoftmaxThreshold(t) => {
                classify_softmax_baseline(masked, *t, cfg) == EnergyLabel::Unknown
            }
        }
    }
}

/// Run the head over a scene's proposals.
///
/// Proposals under the objectness floor are skipped. A proposal screened as
/// unknown is emitted with label 0 and its objectness as confidence; otherwise
/// the argmax class is emitted with its softmax probability.
pub fn predict(
    head: &LinearHead,
    identifier: &UnknownIdentifier,
    scene: &Scene,
    known: &BTreeSet<ClassId>,
    train_cfg: &TrainConfig,
    energy_cfg: &EnergyConfig,
) -> Vec<DetectionRecord> {
    let mut detections = Vec::new();
    for proposal in &scene.proposals {
        if proposal.objectness < train_cfg.objectness_floor {
            continue;
        }
        let masked = head.masked_logits(&proposal.feature, known, energy_cfg);
        if identifier.is_unknown(&masked, energy_cfg) {
            detections.push(DetectionRecord {
                image_id: scene.image_id,
                bbox: proposal.bbox,
                label: UNKNOWN_CLASS,
                confidence: proposal.objectness,
            });
        } else {
            let (label, confidence) = head.argmax(&masked, energy_cfg);
            detections.push(DetectionRecord {
                image_id: scene.image_id,
                bbox: proposal.bbox,
                label,
                confidence,
            });
        }
    }
    detections
}

/// Keep the first-seen `n_ex` labelled instances of each class, in stream
/// order.
pub fn select_exemplars(scenes: &[Scene], n_ex: usize) -> ExemplarStore {
    let mut store = ExemplarStore::new(n_ex);
    extend_exemplars(&mut store, scenes);
    store
}

/// Offer a task's labelled instances to an existing store.
pub fn extend_exemplars(store: &mut ExemplarStore, scenes: &[Scene]) {
    for scene in scenes {
        for instance in scene.labelled_instances() {
            store.offer(instance);
        }
    }
}

/// Finetune on the balanced exemplar set for a reduced epoch budget
/// (`finetune_fraction` of the task budget, at least one epoch).
///
/// This is plain task training over the exemplar instances, wrapped as
/// single-object scenes without proposals (so auto-labelling has nothing to
/// pick up during replay).
pub fn balanced_finetune(
    head: &mut LinearHead,
    state: &mut ClusteringState,
    store: &ExemplarStore,
    ctx: &TrainContext,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<EpochTrace>, ProtocolError> {
    if store.is_empty() {
        return Err(ProtocolError::EmptyExemplarStore);
    }
    let epochs = ((ctx.train.epochs as f64 * ctx.train.finetune_fraction).ceil() as usize).max(1);
    let scenes: Vec<Scene> = store
        .instances()
        .into_iter()
        .map(|inst| Scene {
            image_id: inst.image_id,
            objects: vec![crate::protocol::SceneObject {
                true_class: inst.annotated.label,
                label: inst.annotated.label,
                bbox: inst.annotated.bbox,
                feature: inst.feature.clone(),
            }],
            proposals: Vec::new(),
        })
        .collect();
    train_task(head, state, &scenes, ctx, epochs, rng)
}
