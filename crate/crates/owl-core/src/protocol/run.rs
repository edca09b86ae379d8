//! The full open-world loop over a task schedule.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::cluster::{ClusteringConfig, ClusteringState};
use crate::energy::{EnergyConfig, WeibullFitDiagnostics};
use crate::eval::{
    absolute_open_set_error, known_only_view, map_over, wilderness_impact, EvalSet, MetricsReport,
};
use crate::protocol::{
    balanced_finetune, extend_exemplars, fit_unknown_identifier, generate_world, predict,
    AblationFlags, AutoLabelConfig, EpochTrace, EvalConfig, ExemplarStore, LinearHead,
    ProtocolError, Scene, SyntheticWorldConfig, TaskSchedule, TrainConfig, TrainContext,
    UnknownIdentifier, UnknownIdentifierKind,
};
use crate::{ImageId, UNKNOWN_CLASS};

/// Everything a run needs besides the schedule and the world parameters.
#[derive(Debug, Clone, Default)]
pub struct OpenWorldConfig {
    pub cluster: ClusteringConfig,
    pub energy: EnergyConfig,
    pub autolabel: AutoLabelConfig,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub flags: AblationFlags,
    /// Minimum instances kept per class for replay; 0 disables finetuning.
    pub n_exemplars: usize,
    /// Seed of the training stream (scene shuffles). The world has its own
    /// seed in [`SyntheticWorldConfig`].
    pub seed: u64,
}

/// Energy-fit diagnostics of one task.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EnergyFitRecord {
    pub task_id: usize,
    pub known: WeibullFitDiagnostics,
    pub unknown: WeibullFitDiagnostics,
    pub median_known_energy: f64,
    pub median_unknown_energy: f64,
    /// Balanced accuracy of the fitted classifier on its validation energies.
    pub validation_balanced_accuracy: f64,
}

/// Per-task loss traces.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TaskTrace {
    pub task_id: usize,
    pub train: Vec<EpochTrace>,
    pub finetune: Vec<EpochTrace>,
}

/// Output of a full run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<MetricsReport>,
    pub traces: Vec<TaskTrace>,
    pub energy_fits: Vec<Option<EnergyFitRecord>>,
}

fn gather_ground_truths(scenes: &[Scene]) -> BTreeMap<ImageId, Vec<crate::boxes::AnnotatedBox>> {
    scenes
        .iter()
        .map(|s| (s.image_id, s.gts()))
        .filter(|(_, gts)| !gts.is_empty())
        .collect()
}

/// Run the full open-world protocol: per task, train on the current classes,
/// select exemplars, finetune on the balanced replay set (incremental steps
/// only), fit the unknown identifier on held-out validation data, and evaluate
/// on the cumulative test set where future classes count as unknown.
pub fn run_open_world(
    schedule: &TaskSchedule,
    world_cfg: &SyntheticWorldConfig,
    cfg: &OpenWorldConfig,
) -> Result<RunOutput, ProtocolError> {
    let world = generate_world(world_cfg, schedule)?;
    let mut head = LinearHead::new(schedule.c_max(), world_cfg.dim);
    let mut state = ClusteringState::new(cfg.cluster.clone());
    let mut store = ExemplarStore::new(cfg.n_exemplars);
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let mut reports = Vec::new();
    let mut traces = Vec::new();
    let mut energy_fits = Vec::new();

    for t in 0..schedule.n_tasks() {
        let task_id = t + 1;
        let known = schedule.known_through(t);
        let ctx = TrainContext {
            known: &known,
            flags: cfg.flags,
            train: &cfg.train,
            autolabel: &cfg.autolabel,
            energy: &cfg.energy,
        };
        let task_data = &world.tasks[t];
        let mut flags_out: Vec<String> = Vec::new();

        let train_trace = crate::protocol::train_task(
            &mut head,
            &mut state,
            &task_data.train,
            &ctx,
            cfg.train.epochs,
            &mut rng,
        )
        .map_err(|e| e.at_task(task_id))?;

        extend_exemplars(&mut store, &task_data.train);

        let mut finetune_trace = Vec::new();
        if t > 0 && cfg.n_exemplars > 0 {
            finetune_trace = balanced_finetune(&mut head, &mut state, &store, &ctx, &mut rng)
                .map_err(|e| e.at_task(task_id))?;
            flags_out.push("balanced_finetune".into());
        }

        // Unknown identifier, fitted after any finetuning so the deployed and
        // evaluated weights match.
        let mut fit_record: Option<EnergyFitRecord> = None;
        let mut fitted = None;
        let mut identifier = UnknownIdentifier::None;
        if cfg.flags.ebui {
            match cfg.train.unknown_identifier {
                UnknownIdentifierKind::SoftmaxThreshold => {
                    flags_out.push("softmax_baseline_identifier".into());
                    identifier = UnknownIdentifier::SoftmaxThreshold(cfg.train.softmax_threshold);
                }
                UnknownIdentifierKind::Energy => {
                    let n_unknown = task_data
                        .validation
                        .iter()
                        .flat_map(|s| s.objects.iter())
                        .filter(|o| o.label == UNKNOWN_CLASS)
                        .count();
                    if n_unknown < 10 {
                        flags_out.push("ebui_skipped_insufficient_unknown_validation".into());
                    } else {
                        let info = fit_unknown_identifier(
                            &head,
                            &task_data.validation,
                            &known,
                            &cfg.energy,
                        )
                        .map_err(|e| e.at_task(task_id))?;
                        fit_record = Some(EnergyFitRecord {
                            task_id,
                            known: info.classifier.known.diagnostics(),
                            unknown: info.classifier.unknown.diagnostics(),
                            median_known_energy: info.median_known_energy,
                            median_unknown_energy: info.median_unknown_energy,
                            validation_balanced_accuracy: info.balanced_accuracy,
                        });
                        if t > 0 && cfg.n_exemplars > 0 {
                            flags_out.push("energy_fit_after_finetune".into());
                        }
                        fitted = Some(info.classifier);
                    }
                }
            }
        }
        if let Some(clf) = &fitted {
            identifier = UnknownIdentifier::Energy(clf);
        }
        energy_fits.push(fit_record);

        // Evaluate on the cumulative test set.
        let mut detections = Vec::new();
        for scene in &task_data.test {
            detections.extend(predict(
                &head,
                &identifier,
                scene,
                &known,
                &cfg.train,
                &cfg.energy,
            ));
        }
        let mixed = EvalSet {
            detections,
            ground_truths: gather_ground_truths(&task_data.test),
            known_set: known.clone(),
        };
        let has_unknown_gts = mixed
            .ground_truths
            .values()
            .flatten()
            .any(|gt| gt.label == UNKNOWN_CLASS);

        let wi = if has_unknown_gts {
            flags_out.push("wi_fixed_threshold_anchoring".into());
            let known_only = known_only_view(&mixed, cfg.eval.iou_thresh);
            let out = wilderness_impact(
                &known_only,
                &mixed,
                cfg.eval.wi_recall,
                cfg.eval.iou_thresh,
            )
            .map_err(|e| ProtocolError::from(e).at_task(task_id))?;
            if !out.recall_reached {
                flags_out.push("wi_recall_not_reached".into());
            }
            out.wi
        } else {
            flags_out.push("no_unknown_ground_truths".into());
            0.0
        };
        let a_ose = if has_unknown_gts {
            absolute_open_set_error(&mixed, cfg.eval.iou_thresh, cfg.eval.aose_score_thresh)
        } else {
            0
        };

        let map_prev_known = if t > 0 {
            map_over(&schedule.known_through(t - 1), &mixed, cfg.eval.iou_thresh).ok()
        } else {
            None
        };
        let map_current_known =
            map_over(schedule.task_classes(t), &mixed, cfg.eval.iou_thresh).ok();
        let map_both = map_over(&known, &mixed, cfg.eval.iou_thresh).ok();

        reports.push(MetricsReport {
            task_id,
            wi,
            a_ose,
            map_prev_known,
            map_current_known,
            map_both,
            flags: flags_out,
        });
        traces.push(TaskTrace {
            task_id,
            train: train_trace,
            finetune: finetune_trace,
        });
    }

    Ok(RunOutput {
        reports,
        traces,
        energy_fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_world(seed: u64) -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            train_per_class: 60,
            val_per_class: 20,
            test_per_class: 20,
            seed,
            ..SyntheticWorldConfig::default()
        }
    }

    fn desk_cfg(seed: u64) -> OpenWorldConfig {
        OpenWorldConfig {
            cluster: ClusteringConfig {
                burn_in: 50,
                update_period: 150,
                ..ClusteringConfig::default()
            },
            n_exemplars: 20,
            seed,
            ..OpenWorldConfig::default()
        }
    }

    #[test]
    fn single_task_run_has_no_unknown_metrics() {
        let schedule = TaskSchedule::uniform(1, 3).unwrap();
        let out = run_open_world(&schedule, &desk_world(1), &desk_cfg(1)).unwrap();
        assert_eq!(out.reports.len(), 1);
        let report = &out.reports[0];
        assert_eq!(report.wi, 0.0);
        assert_eq!(report.a_ose, 0);
        assert!(report.flags.iter().any(|f| f == "no_unknown_ground_truths"));
        assert!(report.map_prev_known.is_none());
        assert!(report.map_current_known.is_some());
    }

    #[test]
    fn two_task_run_is_deterministic() {
        let schedule = TaskSchedule::uniform(2, 3).unwrap();
        let a = run_open_world(&schedule, &desk_world(5), &desk_cfg(5)).unwrap();
        let b = run_open_world(&schedule, &desk_world(5), &desk_cfg(5)).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.reports.len(), 2);
        // Task 1 faces unknowns; task 2 (final) does not.
        assert!(a.reports[0].flags.iter().any(|f| f == "wi_fixed_threshold_anchoring"));
        assert!(a.reports[1].flags.iter().any(|f| f == "no_unknown_ground_truths"));
        assert!(a.reports[1].map_prev_known.is_some());
        // Energy fit happened for task 1 only.
        assert!(a.energy_fits[0].is_some());
        assert!(a.energy_fits[1].is_none());
    }

    #[test]
    fn softmax_baseline_replaces_energy_fitting() {
        let schedule = TaskSchedule::uniform(2, 3).unwrap();
        let mut cfg = desk_cfg(4);
        cfg.train.unknown_identifier = crate::protocol::UnknownIdentifierKind::SoftmaxThreshold;
        cfg.train.softmax_threshold = 0.5;
        let out = run_open_world(&schedule, &desk_world(4), &cfg).unwrap();
        assert!(out.energy_fits.iter().all(Option::is_none));
        assert!(out.reports[0]
            .flags
            .iter()
            .any(|f| f == "softmax_baseline_identifier"));
    }

    #[test]
    fn ebui_off_emits_no_unknown_labels() {
        let schedule = TaskSchedule::uniform(2, 3).unwrap();
        let cfg = OpenWorldConfig {
            flags: AblationFlags { cc: false, alu: false, ebui: false },
            ..desk_cfg(3)
        };
        let out = run_open_world(&schedule, &desk_world(3), &cfg).unwrap();
        // Without the identifier nothing is screened: A-OSE is substantial on
        // a world whose task-1 test scenes carry unknown objects.
        assert!(out.reports[0].a_ose > 0);
        assert!(out.energy_fits.iter().all(Option::is_none));
    }
}
