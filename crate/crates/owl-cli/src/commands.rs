//! Subcommand implementations.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use owl_core::energy::fit_shifted_weibull;
use owl_core::eval::{
    absolute_open_set_error, known_only_view, map_over, wilderness_impact, EvalSet, MetricsReport,
};
use owl_core::protocol::{generate_world, run_open_world, RunOutput};
use owl_core::{ClassId, UNKNOWN_CLASS};

use crate::config::RunConfig;
use crate::io::{
    diagnostics_jsonl, group_ground_truths, loss_trace_csv, read_box_records, read_samples,
    report_csv, report_jsonl, write_box_records, BoxRecord,
};
use crate::CliError;

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn execute_run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let schedule = cfg.schedule()?;
    run_open_world(&schedule, &cfg.world_config(), &cfg.open_world_config())
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn print_report_line(r: &MetricsReport) {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "task {}: wi={:.5} a_ose={} map_prev={} map_curr={} map_both={}",
        r.task_id,
        r.wi,
        r.a_ose,
        opt(r.map_prev_known),
        opt(r.map_current_known),
        opt(r.map_both),
    );
}

/// `owl run`: execute the full open-world protocol and write the report set.
pub fn cmd_run(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out_dir(out)?;
    let output = execute_run(cfg)?;
    write_text(&out.join("config.cfg"), &cfg.serialize())?;
    write_text(
        &out.join("report.jsonl"),
        &report_jsonl(&cfg.as_map(), cfg.seed, &output.reports),
    )?;
    write_text(&out.join("report.csv"), &report_csv(&output.reports))?;
    write_text(
        &out.join("diagnostics.jsonl"),
        &diagnostics_jsonl(&output.energy_fits),
    )?;
    write_text(&out.join("loss_trace.csv"), &loss_trace_csv(&output.traces))?;
    for r in &output.reports {
        print_report_line(r);
    }
    Ok(())
}

/// One sweep axis: a config key and the values to visit.
#[derive(Debug, Clone)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl SweepAxis {
    /// Parse `key=v1,v2,...`.
    pub fn parse(raw: &str) -> Result<SweepAxis, CliError> {
        let Some((key, values)) = raw.split_once('=') else {
            return Err(CliError::Config(format!(
                "invalid sweep axis \"{raw}\": expected key=v1,v2,..."
            )));
        };
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(CliError::Config(format!(
                "sweep axis \"{key}\" has an empty value list"
            )));
        }
        Ok(SweepAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// `owl sweep`: one run per grid point over at most two axes, consolidated
/// into a long-format table. Per-point failures are recorded and the sweep
/// continues.
pub fn cmd_sweep(base: &RunConfig, axes: &[SweepAxis], out: &Path) -> Result<(), CliError> {
    if axes.is_empty() || axes.len() > 2 {
        return Err(CliError::Config(format!(
            "sweep needs 1 or 2 axes, got {}",
            axes.len()
        )));
    }
    // Validate keys and values up front so bad specs fail before any run.
    let mut points: Vec<Vec<(String, String)>> = Vec::new();
    for a in &axes[0].values {
        match axes.get(1) {
            Some(second) => {
                for b in &second.values {
                    points.push(vec![
                        (axes[0].key.clone(), a.clone()),
                        (second.key.clone(), b.clone()),
                    ]);
                }
            }
            None => points.push(vec![(axes[0].key.clone(), a.clone())]),
        }
    }
    for point in &points {
        let mut probe = base.clone();
        for (key, value) in point {
            probe.set(key, value)?;
        }
        probe.validate()?;
    }

    ensure_out_dir(out)?;
    let results: Vec<Result<Vec<MetricsReport>, String>> = points
        .par_iter()
        .map(|point| {
            let mut cfg = base.clone();
            for (key, value) in point {
                cfg.set(key, value).map_err(|e| e.to_string())?;
            }
            execute_run(&cfg)
                .map(|o| o.reports)
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut header = String::from("point");
    for axis in axes {
        header.push(',');
        header.push_str(&axis.key);
    }
    header.push_str(",task_id,wi,a_ose,map_prev,map_curr,map_both,error\n");
    let mut table = header;
    for (i, (point, result)) in points.iter().zip(&results).enumerate() {
        let prefix = {
            let mut s = i.to_string();
            for (_, value) in point {
                s.push(',');
                s.push_str(value);
            }
            s
        };
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        match result {
            Ok(reports) => {
                for r in reports {
                    table.push_str(&format!(
                        "{prefix},{},{},{},{},{},{},\n",
                        r.task_id,
                        r.wi,
                        r.a_ose,
                        opt(r.map_prev_known),
                        opt(r.map_current_known),
                        opt(r.map_both),
                    ));
                }
            }
            Err(message) => {
                table.push_str(&format!(
                    "{prefix},,,,,,,\"{}\"\n",
                    message.replace('"', "'")
                ));
            }
        }
    }
    write_text(&out.join("sweep.csv"), &table)?;
    write_text(&out.join("config.cfg"), &base.serialize())?;
    print!("{table}");
    Ok(())
}

/// `owl fit-weibull`: fit the shifted-Weibull model to a sample file and print
/// the fit record.
pub fn cmd_fit_weibull(input: &Path) -> Result<(), CliError> {
    let samples = read_samples(input)?;
    let fit = fit_shifted_weibull(&samples).map_err(|e| CliError::Schema(e.to_string()))?;
    let record = serde_json::to_string(&fit.diagnostics())
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{record}");
    Ok(())
}

/// Build the evaluation set from parsed records, validating labels against
/// the schedule implied by the config.
fn build_eval_set(
    detections: &[BoxRecord],
    ground_truths: &[BoxRecord],
    det_path: &Path,
    gt_path: &Path,
    cfg: &RunConfig,
) -> Result<(EvalSet, usize), CliError> {
    let c_max = (cfg.world.tasks * cfg.world.classes_per_task) as ClassId;
    let n_tasks = cfg.world.tasks;
    for (i, r) in ground_truths.iter().enumerate() {
        if r.label > c_max {
            return Err(CliError::Schema(format!(
                "{}: record {}: label {} outside the schedule (max class {c_max})",
                gt_path.display(),
                i + 1,
                r.label
            )));
        }
        if r.task_id > n_tasks {
            return Err(CliError::Schema(format!(
                "{}: record {}: task_id {} outside the schedule ({} tasks)",
                gt_path.display(),
                i + 1,
                r.task_id,
                n_tasks
            )));
        }
        if r.label != UNKNOWN_CLASS && r.task_id == 0 {
            return Err(CliError::Schema(format!(
                "{}: record {}: known label {} needs the task_id that introduced it",
                gt_path.display(),
                i + 1,
                r.label
            )));
        }
    }
    for (i, r) in detections.iter().enumerate() {
        if r.label > c_max {
            return Err(CliError::Schema(format!(
                "{}: record {}: label {} outside the schedule (max class {c_max})",
                det_path.display(),
                i + 1,
                r.label
            )));
        }
    }
    let current_task = ground_truths
        .iter()
        .filter(|r| r.label != UNKNOWN_CLASS)
        .map(|r| r.task_id)
        .max()
        .ok_or_else(|| {
            CliError::Schema(format!(
                "{}: no known-labelled ground truths",
                gt_path.display()
            ))
        })?;
    let known_set: BTreeSet<ClassId> = (1..=(current_task * cfg.world.classes_per_task) as ClassId).collect();
    for (i, r) in ground_truths.iter().enumerate() {
        if r.label != UNKNOWN_CLASS && !known_set.contains(&r.label) {
            return Err(CliError::Schema(format!(
                "{}: record {}: label {} belongs to a future task and must be 0",
                gt_path.display(),
                i + 1,
                r.label
            )));
        }
    }
    let eval = EvalSet {
        detections: detections.iter().map(BoxRecord::detection).collect(),
        ground_truths: group_ground_truths(ground_truths),
        known_set,
    };
    Ok((eval, current_task))
}

/// `owl eval`: standalone metrics over detection and ground-truth files.
pub fn cmd_eval(
    det_path: &Path,
    gt_path: &Path,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let detections = read_box_records(det_path)?;
    let ground_truths = read_box_records(gt_path)?;
    let (mixed, current_task) =
        build_eval_set(&detections, &ground_truths, det_path, gt_path, cfg)?;

    let mut flags: Vec<String> = Vec::new();
    let has_unknown = mixed
        .ground_truths
        .values()
        .flatten()
        .any(|gt| gt.label == UNKNOWN_CLASS);
    let wi = if has_unknown {
        flags.push("wi_fixed_threshold_anchoring".into());
        let known_only = known_only_view(&mixed, cfg.eval.iou_thresh);
        let result = wilderness_impact(&known_only, &mixed, cfg.eval.wi_recall, cfg.eval.iou_thresh)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        if !result.recall_reached {
            flags.push("wi_recall_not_reached".into());
        }
        result.wi
    } else {
        flags.push("no_unknown_ground_truths".into());
        0.0
    };
    let a_ose = if has_unknown {
        absolute_open_set_error(&mixed, cfg.eval.iou_thresh, cfg.eval.aose_score_thresh)
    } else {
        0
    };
    let class_range = |task: usize| -> BTreeSet<ClassId> {
        ((((task - 1) * cfg.world.classes_per_task + 1) as ClassId)
            ..=((task * cfg.world.classes_per_task) as ClassId))
            .collect()
    };
    let map_prev_known = if current_task > 1 {
        let prev: BTreeSet<ClassId> = (1..current_task).flat_map(&class_range).collect();
        map_over(&prev, &mixed, cfg.eval.iou_thresh).ok()
    } else {
        None
    };
    let map_current_known = map_over(&class_range(current_task), &mixed, cfg.eval.iou_thresh).ok();
    let map_both = map_over(&mixed.known_set, &mixed, cfg.eval.iou_thresh).ok();

    let report = MetricsReport {
        task_id: current_task,
        wi,
        a_ose,
        map_prev_known,
        map_current_known,
        map_both,
        flags,
    };
    print_report_line(&report);
    if let Some(out) = out {
        ensure_out_dir(out)?;
        let reports = vec![report];
        write_text(
            &out.join("report.jsonl"),
            &report_jsonl(&cfg.as_map(), cfg.seed, &reports),
        )?;
        write_text(&out.join("report.csv"), &report_csv(&reports))?;
        write_text(&out.join("config.cfg"), &cfg.serialize())?;
    }
    Ok(())
}

/// `owl gen-world`: export the synthetic world's ground truths and proposals.
pub fn cmd_gen_world(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let schedule = cfg.schedule()?;
    let world = generate_world(&cfg.world_config(), &schedule)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    ensure_out_dir(out)?;

    let mut gt_records = Vec::new();
    let mut proposal_records = Vec::new();
    for (t, task) in world.tasks.iter().enumerate() {
        let task_id = t + 1;
        for (split, scenes) in [
            ("train", &task.train),
            ("validation", &task.validation),
            ("test", &task.test),
        ] {
            for scene in scenes {
                for object in &scene.objects {
                    gt_records.push(BoxRecord {
                        image_id: scene.image_id,
                        cx: object.bbox.cx,
                        cy: object.bbox.cy,
                        w: object.bbox.w,
                        h: object.bbox.h,
                        label: object.label,
                        score: 1.0,
                        split: split.to_string(),
                        task_id,
                    });
                }
                for proposal in &scene.proposals {
                    proposal_records.push(BoxRecord {
                        image_id: scene.image_id,
                        cx: proposal.bbox.cx,
                        cy: proposal.bbox.cy,
                        w: proposal.bbox.w,
                        h: proposal.bbox.h,
                        label: UNKNOWN_CLASS,
                        score: proposal.objectness,
                        split: split.to_string(),
                        task_id,
                    });
                }
            }
        }
    }
    write_box_records(&out.join("ground_truth.csv"), &gt_records)?;
    write_box_records(&out.join("proposals.csv"), &proposal_records)?;
    write_text(&out.join("config.cfg"), &cfg.serialize())?;
    println!(
        "wrote {} ground truths and {} proposals for {} tasks",
        gt_records.len(),
        proposal_records.len(),
        world.tasks.len()
    );
    Ok(())
}

/// Load, override, and validate the run configuration.
pub fn load_config(
    config_path: Option<&Path>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<RunConfig, CliError> {
    let mut cfg = match config_path {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for raw in sets {
        let Some((key, value)) = raw.split_once('=') else {
            return Err(CliError::Config(format!(
                "invalid --set \"{raw}\": expected key=value"
            )));
        };
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}
