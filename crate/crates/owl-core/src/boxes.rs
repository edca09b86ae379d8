//! Box geometry, IoU, and auto-labelling of background proposals as unknowns.

use crate::ClassId;

/// Axis-aligned box in center/extent encoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box extents must be positive");
        BoundingBox { cx, cy, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner coordinates `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// A box with a class label. Label `0` marks an unknown object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedBox {
    pub bbox: BoundingBox,
    pub label: ClassId,
}

/// A class-agnostic region proposal with an objectness score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Whether a proposal overlaps no labelled ground-truth box above the
/// threshold.
pub fn is_background(p: &Proposal, gts: &[AnnotatedBox], overlap_thresh: f64) -> bool {
    gts.iter().all(|gt| iou(&p.bbox, &gt.bbox) < overlap_thresh)
}

/// Select the top-k background proposals by objectness and pseudo-label them
/// as unknown objects (label 0). Ties keep input order.
pub fn auto_label_unknowns(
    proposals: &[Proposal],
    gts: &[AnnotatedBox],
    k: usize,
    overlap_thresh: f64,
) -> Vec<AnnotatedBox> {
    let mut background: Vec<&Proposal> = proposals
        .iter()
        .filter(|p| is_background(p, gts, overlap_thresh))
        .collect();
    background.sort_by(|a, b| b.objectness.partial_cmp(&a.objectness).unwrap());
    background
        .into_iter()
        .take(k)
        .map(|p| AnnotatedBox {
            bbox: p.bbox,
            label: 0,
        })
        .collect()
}
