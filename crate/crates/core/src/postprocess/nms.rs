//! Greedy non-maximum suppression.

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::metrics::mask_iou;

/// Box overlap above which a lower-scored detection is dropped before segmentation.
pub const BOX_NMS_THRESHOLD: f64 = 0.7;
/// Region overlap above which a lower-scored region is dropped before evaluation.
pub const REGION_NMS_THRESHOLD: f64 = 0.3;

/// Indices kept by greedy NMS, highest score first.
///
/// Candidates are visited by descending score, ties by ascending index. A candidate is
/// kept unless its overlap with an already kept one exceeds `threshold`.
pub fn nms(scores: &[f64], overlap: impl Fn(usize, usize) -> f64, threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| overlap(k, i) <= threshold) {
            kept.push(i);
        }
    }
    kept
}

pub fn box_nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    nms(scores, |a, b| boxes[a].iou(&boxes[b]), threshold)
}

pub fn region_nms(masks: &[BinaryMask], scores: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if let Some(m) = masks.iter().find(|m| (m.width(), m.height()) != (masks[0].width(), masks[0].height())) {
        return Err(Error::Data(format!(
            "region NMS over masks of different dims ({}x{} vs {}x{})",
            m.width(),
            m.height(),
            masks[0].width(),
            masks[0].height()
        )));
    }
    Ok(nms(scores, |a, b| mask_iou(&masks[a], &masks[b]).expect("dims checked"), threshold))
}
