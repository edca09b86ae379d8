//! Dataset and report file formats.
//!
//! Box records (ground truths, proposals, detections) share one CSV schema:
//! `image_id,cx,cy,w,h,label,score,split,task_id` with dot-decimal numbers.
//! The score column holds the detection confidence or proposal objectness
//! (1 for ground truths). Reports are line-delimited JSON records plus a flat
//! CSV for plotting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use owl_core::boxes::{AnnotatedBox, BoundingBox};
use owl_core::eval::{DetectionRecord, MetricsReport};
use owl_core::protocol::{EnergyFitRecord, TaskTrace};
use owl_core::{ClassId, ImageId};

use crate::CliError;

pub const BOX_SCHEMA_HEADER: &str = "image_id,cx,cy,w,h,label,score,split,task_id";

/// One row of the shared box schema.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRecord {
    pub image_id: ImageId,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub label: ClassId,
    /// Confidence or objectness, depending on the file's role.
    pub score: f64,
    pub split: String,
    pub task_id: usize,
}

impl BoxRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.image_id,
            self.cx,
            self.cy,
            self.w,
            self.h,
            self.label,
            self.score,
            self.split,
            self.task_id
        )
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.cx, self.cy, self.w, self.h)
    }

    pub fn annotated(&self) -> AnnotatedBox {
        AnnotatedBox {
            bbox: self.bbox(),
            label: self.label,
        }
    }

    pub fn detection(&self) -> DetectionRecord {
        DetectionRecord {
            image_id: self.image_id,
            bbox: self.bbox(),
            label: self.label,
            confidence: self.score,
        }
    }
}

fn schema_err(path: &Path, record: usize, msg: String) -> CliError {
    CliError::Schema(format!(
        "{}: record {record}: {msg}",
        path.display()
    ))
}

/// Parse a box-schema CSV file. Record indices in errors are 1-based and
/// count data rows (the header is record 0).
pub fn read_box_records(path: &Path) -> Result<Vec<BoxRecord>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == BOX_SCHEMA_HEADER => {}
        Some((_, header)) => {
            return Err(schema_err(
                path,
                0,
                format!("expected header \"{BOX_SCHEMA_HEADER}\", got \"{}\"", header.trim()),
            ))
        }
        None => return Err(schema_err(path, 0, "empty file".into())),
    }
    let mut records = Vec::new();
    let mut record_index = 0usize;
    for (_, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        record_index += 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(schema_err(
                path,
                record_index,
                format!("expected 9 fields, got {}", fields.len()),
            ));
        }
        let num = |i: usize, name: &str| -> Result<f64, CliError> {
            fields[i].trim().parse().map_err(|_| {
                schema_err(path, record_index, format!("invalid {name} \"{}\"", fields[i]))
            })
        };
        let record = BoxRecord {
            image_id: fields[0].trim().parse().map_err(|_| {
                schema_err(path, record_index, format!("invalid image_id \"{}\"", fields[0]))
            })?,
            cx: num(1, "cx")?,
            cy: num(2, "cy")?,
            w: num(3, "w")?,
            h: num(4, "h")?,
            label: fields[5].trim().parse().map_err(|_| {
                schema_err(path, record_index, format!("invalid label \"{}\"", fields[5]))
            })?,
            score: num(6, "score")?,
            split: fields[7].trim().to_string(),
            task_id: fields[8].trim().parse().map_err(|_| {
                schema_err(path, record_index, format!("invalid task_id \"{}\"", fields[8]))
            })?,
        };
        if !(record.w > 0.0 && record.h > 0.0) {
            return Err(schema_err(path, record_index, "box extents must be positive".into()));
        }
        if !record.score.is_finite() || !(0.0..=1.0).contains(&record.score) {
            return Err(schema_err(
                path,
                record_index,
                format!("score {} outside [0, 1]", record.score),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_box_records(path: &Path, records: &[BoxRecord]) -> Result<(), CliError> {
    let mut out = String::from(BOX_SCHEMA_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Group ground-truth records per image.
pub fn group_ground_truths(records: &[BoxRecord]) -> BTreeMap<ImageId, Vec<AnnotatedBox>> {
    let mut map: BTreeMap<ImageId, Vec<AnnotatedBox>> = BTreeMap::new();
    for r in records {
        map.entry(r.image_id).or_default().push(r.annotated());
    }
    map
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// The flat CSV row layout of a task report.
pub fn report_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from("task_id,wi,a_ose,map_prev,map_curr,map_both,flags\n");
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.task_id,
            r.wi,
            r.a_ose,
            fmt_opt(r.map_prev_known),
            fmt_opt(r.map_current_known),
            fmt_opt(r.map_both),
            r.flags.join("|"),
        )
        .unwrap();
    }
    out
}

/// Line-delimited report: one config record followed by one record per task.
pub fn report_jsonl(
    config_map: &BTreeMap<String, String>,
    seed: u64,
    reports: &[MetricsReport],
) -> String {
    let mut out = String::new();
    let header = serde_json::json!({
        "type": "config",
        "seed": seed,
        "config": config_map,
    });
    out.push_str(&header.to_string());
    out.push('\n');
    for r in reports {
        let mut value = serde_json::to_value(r).unwrap();
        value["type"] = serde_json::Value::String("task_report".into());
        out.push_str(&value.to_string());
        out.push('\n');
    }
    out
}

pub fn diagnostics_jsonl(fits: &[Option<EnergyFitRecord>]) -> String {
    let mut out = String::new();
    for fit in fits.iter().flatten() {
        out.push_str(&serde_json::to_value(fit).unwrap().to_string());
        out.push('\n');
    }
    out
}

pub fn loss_trace_csv(traces: &[TaskTrace]) -> String {
    let mut out = String::from(
        "task_id,phase,epoch,ce_mean,contrastive_mean,contrastive_steps,contrastive_active_steps,ce_steps\n",
    );
    for t in traces {
        for (phase, epochs) in [("train", &t.train), ("finetune", &t.finetune)] {
            for e in epochs {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    t.task_id,
                    phase,
                    e.epoch,
                    e.ce_mean,
                    e.contrastive_mean,
                    e.contrastive_steps,
                    e.contrastive_active_steps,
                    e.ce_steps
                )
                .unwrap();
            }
        }
    }
    out
}

/// Newline-delimited numeric samples; errors name the 1-based line.
pub fn read_samples(path: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value: f64 = line.parse().map_err(|_| {
            CliError::Schema(format!(
                "{}: line {}: not a number: \"{line}\"",
                path.display(),
                lineno + 1
            ))
        })?;
        samples.push(value);
    }
    Ok(samples)
}
