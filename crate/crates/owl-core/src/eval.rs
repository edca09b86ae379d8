//! Detection evaluation: greedy matching, precision/recall curves, VOC-style
//! mAP at a fixed IoU threshold, Wilderness Impact at a recall level, and
//! Absolute Open-Set Error.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::boxes::{iou, AnnotatedBox, BoundingBox};
use crate::{ClassId, ImageId, UNKNOWN_CLASS};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("empty precision/recall curve")]
    EmptyCurve,
    #[error("no class in the requested set has ground truths")]
    NoDefinedClasses,
    #[error("degenerate evaluation: {0}")]
    Degenerate(String),
}

/// One detection emitted by the detector. Label `0` is a predicted unknown.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    pub bbox: BoundingBox,
    pub label: ClassId,
    pub confidence: f64,
}

/// Detections plus ground truths for one evaluation pass.
///
/// Every ground-truth label must be in `known_set` or be `0` (unknown).
#[derive(Debug, Clone, Default)]
pub struct EvalSet {
    pub detections: Vec<DetectionRecord>,
    pub ground_truths: BTreeMap<ImageId, Vec<AnnotatedBox>>,
    pub known_set: BTreeSet<ClassId>,
}

impl EvalSet {
    /// Index of the first ground truth violating the label constraint, if any.
    pub fn first_invalid_gt(&self) -> Option<(ImageId, usize)> {
        for (&image, gts) in &self.ground_truths {
            for (i, gt) in gts.iter().enumerate() {
                if gt.label != UNKNOWN_CLASS && !self.known_set.contains(&gt.label) {
                    return Some((image, i));
                }
            }
        }
        None
    }

    fn gt_count(&self, pred: impl Fn(&AnnotatedBox) -> bool) -> usize {
        self.ground_truths
            .values()
            .flat_map(|v| v.iter())
            .filter(|gt| pred(gt))
            .count()
    }
}

/// Outcome of greedy matching: detections in descending-confidence order with
/// their true/false-positive flags, and which ground truths got matched.
#[derive(Debug, Clone)]
pub struct MatchOutcome {
    /// Indices into the input detections, sorted by descending confidence
    /// (ties keep input order).
    pub order: Vec<usize>,
    /// `tp[r]` refers to detection `order[r]`.
    pub tp: Vec<bool>,
    /// Matched ground truths, keyed by `(image, gt index)`, valued by the
    /// matching detection's input index.
    pub gt_matched: BTreeMap<(ImageId, usize), usize>,
}

/// Greedy matching in descending confidence order. A detection is a true
/// positive iff its best-IoU unmatched same-class ground truth (in its image)
/// reaches the IoU threshold; each ground truth matches at most once.
pub fn match_detections(
    dets: &[DetectionRecord],
    gts: &BTreeMap<ImageId, Vec<AnnotatedBox>>,
    iou_thresh: f64,
) -> MatchOutcome {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap());
    let mut gt_matched: BTreeMap<(ImageId, usize), usize> = BTreeMap::new();
    let mut tp = vec![false; order.len()];
    for (rank, &di) in order.iter().enumerate() {
        let det = &dets[di];
        let Some(image_gts) = gts.get(&det.image_id) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in image_gts.iter().enumerate() {
            if gt.label != det.label || gt_matched.contains_key(&(det.image_id, gi)) {
                continue;
            }
            let overlap = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, overlap)) = best {
            if overlap >= iou_thresh {
                tp[rank] = true;
                gt_matched.insert((det.image_id, gi), di);
            }
        }
    }
    MatchOutcome {
        order,
        tp,
        gt_matched,
    }
}

/// One point of a precision/recall curve, recorded at the confidence of the
/// detection that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub recall: f64,
    pub precision: f64,
}

/// Cumulative precision/recall along descending confidence. Recall is
/// non-decreasing along the curve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
}

/// Build the cumulative curve for a detection subset against `n_gt` ground
/// truths.
pub fn pr_curve(
    dets: &[DetectionRecord],
    gts: &BTreeMap<ImageId, Vec<AnnotatedBox>>,
    n_gt: usize,
    iou_thresh: f64,
) -> PrCurve {
    let outcome = match_detections(dets, gts, iou_thresh);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(outcome.order.len());
    for (rank, &di) in outcome.order.iter().enumerate() {
        if outcome.tp[rank] {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            confidence: dets[di].confidence,
            recall: tp as f64 / n_gt as f64,
            precision: tp as f64 / (tp + fp) as f64,
        });
    }
    PrCurve { points }
}

/// All-point interpolated average precision: the area under the precision
/// envelope, where the envelope at recall `r` is the maximum precision at any
/// recall `>= r`.
pub fn average_precision(curve: &PrCurve) -> f64 {
    let n = curve.points.len();
    if n == 0 {
        return 0.0;
    }
    let mut envelope = vec![0.0; n];
    let mut running = 0.0f64;
    for i in (0..n).rev() {
        running = running.max(curve.points[i].precision);
        envelope[i] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (point, env) in curve.points.iter().zip(&envelope) {
        area += (point.recall - prev_recall) * env;
        prev_recall = point.recall;
    }
    area
}

/// Average precision of one class, or `None` when the class has no ground
/// truths (undefined, excluded from mAP).
pub fn class_ap(eval: &EvalSet, class: ClassId, iou_thresh: f64) -> Option<f64> {
    let n_gt = eval.gt_count(|gt| gt.label == class);
    if n_gt == 0 {
        return None;
    }
    let dets: Vec<DetectionRecord> = eval
        .detections
        .iter()
        .filter(|d| d.label == class)
        .cloned()
        .collect();
    Some(average_precision(&pr_curve(
        &dets,
        &eval.ground_truths,
        n_gt,
        iou_thresh,
    )))
}

/// Mean of the defined per-class average precisions over `classes`.
pub fn map_over(
    classes: &BTreeSet<ClassId>,
    eval: &EvalSet,
    iou_thresh: f64,
) -> Result<f64, EvalError> {
    let aps: Vec<f64> = classes
        .iter()
        .filter_map(|&c| class_ap(eval, c, iou_thresh))
        .collect();
    if aps.is_empty() {
        return Err(EvalError::NoDefinedClasses);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Precision read off a curve at a recall level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionAtRecall {
    pub precision: f64,
    /// Confidence of the curve point used (the operating threshold).
    pub confidence: f64,
    pub recall: f64,
    /// False when the curve never reaches the requested recall and the last
    /// point was used instead.
    pub reached: bool,
}

/// Precision at the first curve point whose recall reaches `recall_level`;
/// falls back (flagged) to the final point when the curve never gets there.
pub fn precision_at_recall(
    curve: &PrCurve,
    recall_level: f64,
) -> Result<PrecisionAtRecall, EvalError> {
    if curve.points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    for p in &curve.points {
        if p.recall >= recall_level {
            return Ok(PrecisionAtRecall {
                precision: p.precision,
                confidence: p.confidence,
                recall: p.recall,
                reached: true,
            });
        }
    }
    let last = curve.points.last().unwrap();
    Ok(PrecisionAtRecall {
        precision: last.precision,
        confidence: last.confidence,
        recall: last.recall,
        reached: false,
    })
}

/// Wilderness Impact with its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WildernessImpact {
    pub wi: f64,
    /// Precision on the known-only evaluation at the recall level.
    pub precision_known: f64,
    /// Precision on the mixed evaluation at the same operating threshold.
    pub precision_mixed: f64,
    /// Operating confidence threshold chosen on the known-only curve.
    pub operating_confidence: f64,
    /// False when the known-only curve never reached the recall level.
    pub recall_reached: bool,
}

fn known_class_detections(eval: &EvalSet) -> Vec<DetectionRecord> {
    eval.detections
        .iter()
        .filter(|d| d.label != UNKNOWN_CLASS && eval.known_set.contains(&d.label))
        .cloned()
        .collect()
}

/// Whether the detection's best-overlap ground truth is an unknown object at
/// or above the IoU threshold.
pub fn lands_on_unknown(
    det: &DetectionRecord,
    gts: &BTreeMap<ImageId, Vec<AnnotatedBox>>,
    iou_thresh: f64,
) -> bool {
    let Some(image_gts) = gts.get(&det.image_id) else {
        return false;
    };
    let mut best: Option<(usize, f64)> = None;
    for (gi, gt) in image_gts.iter().enumerate() {
        let overlap = iou(&det.bbox, &gt.bbox);
        if best.is_none_or(|(_, b)| overlap > b) {
            best = Some((gi, overlap));
        }
    }
    match best {
        Some((gi, overlap)) => overlap >= iou_thresh && image_gts[gi].label == UNKNOWN_CLASS,
        None => false,
    }
}

/// Pooled precision over known-class detections with confidence at or above a
/// threshold. Detections landing on unknown objects are false positives by
/// definition and never enter the matching. Returns
/// `(true positives, detections kept)`.
fn pooled_precision_at_threshold(eval: &EvalSet, threshold: f64, iou_thresh: f64) -> (usize, usize) {
    let confident: Vec<DetectionRecord> = known_class_detections(eval)
        .into_iter()
        .filter(|d| d.confidence >= threshold)
        .collect();
    let total = confident.len();
    let dets: Vec<DetectionRecord> = confident
        .into_iter()
        .filter(|d| !lands_on_unknown(d, &eval.ground_truths, iou_thresh))
        .collect();
    let outcome = match_detections(&dets, &eval.ground_truths, iou_thresh);
    let tp = outcome.tp.iter().filter(|t| **t).count();
    (tp, total)
}

/// Pooled precision/recall curve over all known-class detections of a set.
pub fn pooled_known_curve(eval: &EvalSet, iou_thresh: f64) -> Result<PrCurve, EvalError> {
    let n_gt = eval.gt_count(|gt| gt.label != UNKNOWN_CLASS);
    if n_gt == 0 {
        return Err(EvalError::Degenerate("no known ground truths".into()));
    }
    let dets = known_class_detections(eval);
    if dets.is_empty() {
        return Err(EvalError::Degenerate("no known-class detections".into()));
    }
    Ok(pr_curve(&dets, &eval.ground_truths, n_gt, iou_thresh))
}

/// Wilderness Impact `P_K / P_{K u U} - 1` at a recall level.
///
/// The operating threshold is the confidence at which the known-only pooled
/// curve first reaches the recall level; both precisions are then measured
/// over the detections at or above that threshold. The mixed set adds the
/// unknown-labelled ground truths and the detections that land on them, which
/// count as false positives for the known classes.
pub fn wilderness_impact(
    known_only: &EvalSet,
    mixed: &EvalSet,
    recall_level: f64,
    iou_thresh: f64,
) -> Result<WildernessImpact, EvalError> {
    let curve = pooled_known_curve(known_only, iou_thresh)?;
    let at_recall = precision_at_recall(&curve, recall_level)?;
    let threshold = at_recall.confidence;
    let (tp_known, n_known) = pooled_precision_at_threshold(known_only, threshold, iou_thresh);
    let (tp_mixed, n_mixed) = pooled_precision_at_threshold(mixed, threshold, iou_thresh);
    if n_known == 0 || n_mixed == 0 || tp_mixed == 0 {
        return Err(EvalError::Degenerate(
            "no detections at the operating threshold".into(),
        ));
    }
    let precision_known = tp_known as f64 / n_known as f64;
    let precision_mixed = tp_mixed as f64 / n_mixed as f64;
    Ok(WildernessImpact {
        wi: precision_known / precision_mixed - 1.0,
        precision_known,
        precision_mixed,
        operating_confidence: threshold,
        recall_reached: at_recall.reached,
    })
}

/// Absolute Open-Set Error: the number of unknown ground-truth objects that a
/// confident known-class detection lands on without being matched to any known
/// ground truth. Counted per unknown object (at most one detection each).
pub fn absolute_open_set_error(eval: &EvalSet, iou_thresh: f64, score_thresh: f64) -> usize {
    let dets = known_class_detections(eval);
    let outcome = match_detections(&dets, &eval.ground_truths, iou_thresh);
    let mut matched_to_known = vec![false; dets.len()];
    for (rank, &di) in outcome.order.iter().enumerate() {
        matched_to_known[di] = outcome.tp[rank];
    }

    let mut hit_unknown_gts: BTreeSet<(ImageId, usize)> = BTreeSet::new();
    for (di, det) in dets.iter().enumerate() {
        if matched_to_known[di] || det.confidence < score_thresh {
            continue;
        }
        let Some(image_gts) = eval.ground_truths.get(&det.image_id) else {
            continue;
        };
        // Best-overlap ground truth of any label; it must be an unknown object.
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in image_gts.iter().enumerate() {
            let overlap = iou(&det.bbox, &gt.bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, overlap)) = best {
            if overlap >= iou_thresh && image_gts[gi].label == UNKNOWN_CLASS {
                hit_unknown_gts.insert((det.image_id, gi));
            }
        }
    }
    hit_unknown_gts.len()
}

/// The known-only view of a mixed evaluation: unknown-labelled ground truths
/// are dropped, along with the detections that land on them (as if those
/// objects were absent from the world).
pub fn known_only_view(mixed: &EvalSet, iou_thresh: f64) -> EvalSet {
    let mut ground_truths: BTreeMap<ImageId, Vec<AnnotatedBox>> = BTreeMap::new();
    for (&image, gts) in &mixed.ground_truths {
        let known: Vec<AnnotatedBox> = gts
            .iter()
            .filter(|gt| gt.label != UNKNOWN_CLASS)
            .cloned()
            .collect();
        if !known.is_empty() {
            ground_truths.insert(image, known);
        }
    }
    let detections: Vec<DetectionRecord> = mixed
        .detections
        .iter()
        .filter(|det| !lands_on_unknown(det, &mixed.ground_truths, iou_thresh))
        .cloned()
        .collect();
    EvalSet {
        detections,
        ground_truths,
        known_set: mixed.known_set.clone(),
    }
}

/// Per-task metrics in the layout of the open-world protocol report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsReport {
    pub task_id: usize,
    pub wi: f64,
    pub a_ose: usize,
    pub map_prev_known: Option<f64>,
    pub map_current_known: Option<f64>,
    pub map_both: Option<f64>,
    pub flags: Vec<String>,
}
