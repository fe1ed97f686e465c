//! Class activation maps and the localization metrics computed from them.
//!
//! The pipeline: weight the final conv features by a classifier row
//! ([`compute_cam`]), upsample to image resolution, threshold the normalized
//! heatmap ([`segment_heatmap`]), box the largest connected blob
//! ([`largest_component_bbox`]), and score the box against ground truth with
//! IoU. Aggregation over a dataset yields Top-1 classification, Top-1
//! localization, and class-agnostic (gt-known) localization rates.

use crate::error::{CoreError, Result};
use crate::tensor::{ChannelVector, FeatureMap, SpatialMap};

/// Axis-aligned pixel box, half-open: covers columns `x0..x1` and rows
/// `y0..y1`, origin at the image's top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(CoreError::InvalidArgument(format!(
                "degenerate box ({x0},{y0})..({x1},{y1})"
            )));
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Overlap over union of two boxes; 0 when disjoint, 1 when identical.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x1.min(b.x1).saturating_sub(a.x0.max(b.x0));
    let iy = a.y1.min(b.y1).saturating_sub(a.y0.max(b.y0));
    let inter = ix * iy;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Per-sample localization verdict.
#[derive(Clone, Debug)]
pub struct LocOutcome {
    pub id: u64,
    pub pred_class: usize,
    pub true_class: usize,
    pub pred_box: Option<BBox>,
    pub gt_box: BBox,
    pub iou: f64,
    pub clas_correct: bool,
    pub loc_correct: bool,
}

impl LocOutcome {
    /// Build an outcome from raw boxes; a missing predicted box scores 0.
    pub fn from_boxes(
        id: u64,
        pred_class: usize,
        true_class: usize,
        pred_box: Option<BBox>,
        gt_box: BBox,
    ) -> Self {
        let overlap = pred_box.as_ref().map(|b| iou(b, &gt_box)).unwrap_or(0.0);
        let clas_correct = pred_class == true_class;
        LocOutcome {
            id,
            pred_class,
            true_class,
            pred_box,
            gt_box,
            iou: overlap,
            clas_correct,
            loc_correct: clas_correct && overlap >= 0.5,
        }
    }
}

/// Aggregate rates over an evaluation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub top1_clas: f64,
    pub top1_loc: f64,
    /// Localization alone: IoU >= 0.5 regardless of the predicted class.
    pub gt_known_loc: f64,
    pub n: usize,
}

/// Mean the per-sample verdicts. The 0.5 IoU cut is inclusive.
pub fn evaluate(outcomes: &[LocOutcome]) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return Err(CoreError::InvalidArgument(
            "cannot evaluate an empty outcome list".into(),
        ));
    }
    let n = outcomes.len();
    let clas = outcomes.iter().filter(|o| o.clas_correct).count();
    let loc = outcomes
        .iter()
        .filter(|o| o.clas_correct && o.iou >= 0.5)
        .count();
    let known = outcomes.iter().filter(|o| o.iou >= 0.5).count();
    Ok(MetricsReport {
        top1_clas: clas as f64 / n as f64,
        top1_loc: loc as f64 / n as f64,
        gt_known_loc: known as f64 / n as f64,
        n,
    })
}

/// `cam[i,j] = Σ_k weights[k] · features[k,i,j]`.
pub fn compute_cam(features: &FeatureMap, class_weights: &ChannelVector) -> Result<SpatialMap> {
    let (c, h, w) = features.shape();
    if class_weights.len() != c {
        return Err(CoreError::ShapeMismatch(format!(
            "{} class weights vs {c} feature channels",
            class_weights.len()
        )));
    }
    let mut out = vec![0.0; h * w];
    for k in 0..c {
        let wk = class_weights.at(k);
        for (acc, v) in out.iter_mut().zip(features.channel(k)) {
            *acc += wk * v;
        }
    }
    SpatialMap::new(h, w, out)
}

/// Corner-aligned bilinear upsampling to `target_h x target_w`.
pub fn upsample_bilinear(m: &SpatialMap, target_h: usize, target_w: usize) -> Result<SpatialMap> {
    if target_h < m.h() || target_w < m.w() {
        return Err(CoreError::InvalidArgument(format!(
            "cannot upsample {}x{} down to {target_h}x{target_w}",
            m.h(),
            m.w()
        )));
    }
    let src_pos = |i: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(target_h * target_w);
    for i in 0..target_h {
        let y = src_pos(i, target_h, m.h());
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(m.h() - 1);
        let fy = y - y0 as f64;
        for j in 0..target_w {
            let x = src_pos(j, target_w, m.w());
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(m.w() - 1);
            let fx = x - x0 as f64;
            let top = m.at(y0, x0) * (1.0 - fx) + m.at(y0, x1) * fx;
            let bottom = m.at(y1, x0) * (1.0 - fx) + m.at(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    SpatialMap::new(target_h, target_w, out)
}

/// Min-max normalize to [0,1] and keep cells at or above `theta_seg`.
/// A flat map segments to all zeros.
pub fn segment_heatmap(cam: &SpatialMap, theta_seg: f64) -> Result<SpatialMap> {
    if !(theta_seg > 0.0 && theta_seg < 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "segmentation threshold must be in (0,1), got {theta_seg}"
        )));
    }
    let min = cam.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cam.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if max == min {
        vec![0.0; cam.data().len()]
    } else {
        let span = max - min;
        cam.data()
            .iter()
            .map(|&v| if (v - min) / span >= theta_seg { 1.0 } else { 0.0 })
            .collect()
    };
    SpatialMap::new(cam.h(), cam.w(), data)
}

/// Tight box of the most populous 8-connected blob of 1s, or `None` for an
/// empty mask. Size ties go to the component whose box starts at the smaller
/// row, then the smaller column.
pub fn largest_component_bbox(mask: &SpatialMap) -> Result<Option<BBox>> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(CoreError::InvalidArgument(
            "component extraction expects a 0/1 mask".into(),
        ));
    }
    let (h, w) = (mask.h(), mask.w());
    let mut seen = vec![false; h * w];
    let mut best: Option<(usize, BBox)> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data()[start] != 1.0 || seen[start] {
            continue;
        }
        // Flood this component.
        let mut count = 0usize;
        let (mut min_i, mut max_i) = (h, 0usize);
        let (mut min_j, mut max_j) = (w, 0usize);
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (i, j) = (idx / w, idx % w);
            count += 1;
            min_i = min_i.min(i);
            max_i = max_i.max(i);
            min_j = min_j.min(j);
            max_j = max_j.max(j);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let (s, t) = (i as i64 + di, j as i64 + dj);
                    if s < 0 || t < 0 || s >= h as i64 || t >= w as i64 {
                        continue;
                    }
                    let nidx = s as usize * w + t as usize;
                    if mask.data()[nidx] == 1.0 && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let bbox = BBox::new(min_j, min_i, max_j + 1, max_i + 1)?;
        let better = match &best {
            None => true,
            Some((best_count, best_box)) => {
                count > *best_count
                    || (count == *best_count
                        && (bbox.y0, bbox.x0) < (best_box.y0, best_box.x0))
            }
        };
        if better {
            best = Some((count, bbox));
        }
    }
    Ok(best.map(|(_, b)| b))
}

/// Full CAM-to-box step at image resolution.
pub fn cam_to_box(
    cam: &SpatialMap,
    image_h: usize,
    image_w: usize,
    theta_seg: f64,
) -> Result<Option<BBox>> {
    let up = upsample_bilinear(cam, image_h, image_w)?;
    let mask = segment_heatmap(&up, theta_seg)?;
    largest_component_bbox(&mask)
}

/// CAM scaled to 0..=255 gray levels for image export. A flat map maps to 0.
pub fn cam_to_u8(cam: &SpatialMap) -> Vec<u8> {
    let min = cam.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = cam.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0; cam.data().len()];
    }
    let span = max - min;
    cam.data()
        .iter()
        .map(|&v| ((v - min) / span * 255.0).round() as u8)
        .collect()
}
