//! Region AP evaluation and the analysis data built on top of it.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::engine::infer;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::heatmap::Heatmap;
use crate::model::SegNet;
use crate::tensor::Tensor;

/// IoU thresholds reported by default.
pub const APR_THRESHOLDS: [f64; 2] = [0.5, 0.7];

/// Pixel IoU; 0 when both masks are empty.
pub fn mask_iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = a.intersection_count(b)?;
    let union = a.union_count(b)?;
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDetection {
    pub id: usize,
    pub scene: u64,
    pub category: usize,
    pub score: f64,
    pub region: BinaryMask,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene: u64,
    pub category: usize,
    pub mask: BinaryMask,
}

/// Greedy matching on a precomputed IoU matrix (`iou[d][g]`, detections in score order).
///
/// Each detection takes the still-unmatched GT of highest IoU (lowest index on ties)
/// provided that IoU is strictly above `threshold`.
pub fn match_by_iou(iou: &[Vec<f64>], num_gt: usize, threshold: f64) -> Vec<bool> {
    let mut taken = vec![false; num_gt];
    iou.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &v) in row.iter().enumerate() {
                if !taken[g] && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            match best {
                Some((g, v)) if v > threshold => {
                    taken[g] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// Order in which detections are evaluated: score descending, then id ascending.
pub fn score_order(dets: &[&EvalDetection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(dets[a].id.cmp(&dets[b].id)));
    order
}

/// TP/FP labels for detections already sorted by score; a detection only ever matches a
/// ground truth of its own scene and category.
pub fn match_detections(dets: &[&EvalDetection], gts: &[&GroundTruth], threshold: f64) -> Result<Vec<bool>> {
    let mut labels = vec![false; dets.len()];
    let mut by_scene: BTreeMap<(u64, usize), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        by_scene.entry((d.scene, d.category)).or_default().0.push(i);
    }
    for (j, g) in gts.iter().enumerate() {
        if let Some(e) = by_scene.get_mut(&(g.scene, g.category)) {
            e.1.push(j);
        }
    }
    for (det_idx, gt_idx) in by_scene.values() {
        let iou = det_idx
            .iter()
            .map(|&d| gt_idx.iter().map(|&g| mask_iou(&dets[d].region, &gts[g].mask)).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        for (&d, tp) in det_idx.iter().zip(match_by_iou(&iou, gt_idx.len(), threshold)) {
            labels[d] = tp;
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)` after each detection, in score order.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    /// True when there were neither detections nor ground truths; `ap` is then 0.
    pub undefined: bool,
}

/// All-points interpolated AP over TP/FP labels in score order.
pub fn average_precision(labels: &[bool], num_gt: usize) -> PrCurve {
    if num_gt == 0 {
        let points = (1..=labels.len()).map(|k| (0.0, 0.0 / k as f64)).collect();
        return PrCurve {
            points,
            ap: 0.0,
            undefined: labels.is_empty(),
        };
    }
    let mut tp = 0usize;
    let points: Vec<(f64, f64)> = labels
        .iter()
        .enumerate()
        .map(|(k, &is_tp)| {
            tp += is_tp as usize;
            (tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64)
        })
        .collect();
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for k in (0..points.len()).rev() {
        running = running.max(points[k].1);
        envelope[k] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &is_tp) in labels.iter().enumerate() {
        if is_tp {
            ap += (points[k].0 - prev_recall) * envelope[k];
            prev_recall = points[k].0;
        }
    }
    PrCurve {
        points,
        ap,
        undefined: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprEntry {
    pub category: usize,
    pub threshold: f64,
    pub num_gt: usize,
    pub num_detections: usize,
    pub curve: PrCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AprTable {
    pub entries: Vec<AprEntry>,
    /// `(threshold, mean AP)`; the mean runs over categories whose AP is defined.
    pub means: Vec<(f64, f64)>,
}

impl AprTable {
    pub fn mean_at(&self, threshold: f64) -> Option<f64> {
        self.means.iter().find(|(t, _)| *t == threshold).map(|&(_, m)| m)
    }

    pub fn entry(&self, category: usize, threshold: f64) -> Option<&AprEntry> {
        self.entries
            .iter()
            .find(|e| e.category == category && e.threshold == threshold)
    }

    /// `category,threshold,num_gt,num_detections,ap,undefined` rows plus one `mean` row
    /// per threshold.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "category,threshold,num_gt,num_detections,ap,undefined")?;
        for e in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{:.16e},{}",
                e.category, e.threshold, e.num_gt, e.num_detections, e.curve.ap, e.curve.undefined
            )?;
        }
        for (t, m) in &self.means {
            writeln!(w, "mean,{t},,,{m:.16e},false")?;
        }
        Ok(())
    }
}

/// Writes a PR curve as `recall,precision` rows.
pub fn write_pr_csv(mut w: impl Write, curve: &PrCurve) -> std::io::Result<()> {
    writeln!(w, "recall,precision")?;
    for (r, p) in &curve.points {
        writeln!(w, "{r:.16e},{p:.16e}")?;
    }
    Ok(())
}

/// Per-category AP at each threshold, and its mean over categories.
pub fn mean_apr(
    dets: &[EvalDetection],
    gts: &[GroundTruth],
    num_categories: usize,
    thresholds: &[f64],
) -> Result<AprTable> {
    if let Some(d) = dets.iter().find(|d| d.category >= num_categories) {
        return Err(Error::Data(format!("detection {} has category {} of {num_categories}", d.id, d.category)));
    }
    let mut entries = Vec::new();
    let mut means = Vec::new();
    for &threshold in thresholds {
        let mut sum = 0.0;
        let mut defined = 0;
        for category in 0..num_categories {
            let cat_dets: Vec<&EvalDetection> = dets.iter().filter(|d| d.category == category).collect();
            let sorted: Vec<&EvalDetection> = score_order(&cat_dets).into_iter().map(|i| cat_dets[i]).collect();
            let cat_gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.category == category).collect();
            let labels = match_detections(&sorted, &cat_gts, threshold)?;
            let curve = average_precision(&labels, cat_gts.len());
            if !curve.undefined {
                sum += curve.ap;
                defined += 1;
            }
            entries.push(AprEntry {
                category,
                threshold,
                num_gt: cat_gts.len(),
                num_detections: sorted.len(),
                curve,
            });
        }
        means.push((threshold, if defined == 0 { 0.0 } else { sum / defined as f64 }));
    }
    Ok(AprTable { entries, means })
}

/// Largest IoU between `region` and any ground truth of the same scene and category.
pub fn best_iou(region: &BinaryMask, scene: u64, category: usize, gts: &[GroundTruth]) -> Result<f64> {
    let mut best = 0.0f64;
    for g in gts.iter().filter(|g| g.scene == scene && g.category == category) {
        best = best.max(mask_iou(region, &g.mask)?);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub baseline_iou: f64,
    pub proposed_iou: f64,
    pub category: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterSummary {
    pub count: usize,
    pub improved: f64,
    pub degraded: f64,
    pub equal: f64,
}

/// Best-IoU pairs for the same detections segmented by two models.
///
/// `baseline` and `proposed` must list the same detections in the same order.
pub fn overlap_scatter(
    baseline: &[EvalDetection],
    proposed: &[EvalDetection],
    gts: &[GroundTruth],
) -> Result<Vec<ScatterPoint>> {
    if baseline.len() != proposed.len() {
        return Err(Error::Data(format!(
            "scatter needs matching detection lists, got {} and {}",
            baseline.len(),
            proposed.len()
        )));
    }
    baseline
        .iter()
        .zip(proposed)
        .map(|(b, p)| {
            if (b.id, b.scene, b.category) != (p.id, p.scene, p.category) {
                return Err(Error::Data(format!("scatter detections {} and {} differ", b.id, p.id)));
            }
            Ok(ScatterPoint {
                baseline_iou: best_iou(&b.region, b.scene, b.category, gts)?,
                proposed_iou: best_iou(&p.region, p.scene, p.category, gts)?,
                category: b.category,
            })
        })
        .collect()
}

pub fn summarize_scatter(points: &[ScatterPoint]) -> ScatterSummary {
    let n = points.len();
    let frac = |f: &dyn Fn(&ScatterPoint) -> bool| {
        if n == 0 {
            0.0
        } else {
            points.iter().filter(|p| f(p)).count() as f64 / n as f64
        }
    };
    ScatterSummary {
        count: n,
        improved: frac(&|p| p.proposed_iou > p.baseline_iou),
        degraded: frac(&|p| p.proposed_iou < p.baseline_iou),
        equal: frac(&|p| p.proposed_iou == p.baseline_iou),
    }
}

pub fn write_scatter_csv(mut w: impl Write, points: &[ScatterPoint]) -> std::io::Result<()> {
    writeln!(w, "baseline_iou,proposed_iou,category")?;
    for p in points {
        writeln!(w, "{:.16e},{:.16e},{}", p.baseline_iou, p.proposed_iou, p.category)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapProbe {
    /// Final heatmap per forced category label, as flat row-major values.
    pub heatmaps: Vec<Vec<f64>>,
    /// `distances[a][b]`: mean absolute difference of the maps for labels a and b.
    pub distances: Vec<Vec<f64>>,
}

impl SwapProbe {
    pub fn mean_off_diagonal(&self) -> f64 {
        let c = self.distances.len();
        if c < 2 {
            return 0.0;
        }
        let total: f64 = (0..c)
            .flat_map(|a| (0..c).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| self.distances[a][b])
            .sum();
        total / (c * (c - 1)) as f64
    }
}

/// Runs inference on one patch once per category label.
pub fn category_swap_probe(net: &SegNet, patch: &Tensor, iterations: usize) -> Result<SwapProbe> {
    let maps: Vec<Heatmap> = (0..net.arch.num_categories)
        .map(|c| infer(net, patch, c, iterations).map(|t| t.last().expect("trajectory").clone()))
        .collect::<Result<_>>()?;
    let distances = maps
        .iter()
        .map(|a| maps.iter().map(|b| a.mean_abs_diff(b)).collect())
        .collect();
    Ok(SwapProbe {
        heatmaps: maps.into_iter().map(|m| m.values().to_vec()).collect(),
        distances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchDescriptor};
    use proptest::prelude::*;

    fn square(x: usize, y: usize) -> BinaryMask {
        BinaryMask::from_fn(6, 6, |px, py| (x..x + 2).contains(&px) && (y..y + 2).contains(&py))
    }

    fn det(id: usize, score: f64, region: BinaryMask) -> EvalDetection {
        EvalDetection {
            id,
            scene: 0,
            category: 0,
            score,
            bbox: region.tight_bbox().unwrap_or(BBox::new(0, 0, 0, 0)),
            region,
        }
    }

    fn gt(mask: BinaryMask) -> GroundTruth {
        GroundTruth {
            scene: 0,
            category: 0,
            mask,
        }
    }

    #[test]
    fn mask_iou_cases() {
        assert_eq!(mask_iou(&square(0, 0), &square(0, 0)).unwrap(), 1.0);
        assert_eq!(mask_iou(&square(0, 0), &square(3, 3)).unwrap(), 0.0);
        assert_eq!(mask_iou(&square(0, 0), &square(1, 0)).unwrap(), 2.0 / 6.0);
        assert_eq!(mask_iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(2, 2)).unwrap(), 0.0);
        assert!(matches!(
            mask_iou(&BinaryMask::empty(2, 2), &BinaryMask::empty(3, 2)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn matching_rules() {
        let g = gt(square(0, 0));
        let a = det(0, 0.9, square(0, 0));
        assert_eq!(match_detections(&[&a], &[&g], 0.5).unwrap(), vec![true]);
        let b = det(1, 0.8, square(0, 0));
        assert_eq!(match_detections(&[&a, &b], &[&g], 0.5).unwrap(), vec![true, false]);
        // IoU of exactly 1/3 at threshold 1/3 is not a match.
        let c = det(2, 0.7, square(1, 0));
        assert_eq!(match_detections(&[&c], &[&g], 1.0 / 3.0).unwrap(), vec![false]);
    }

    #[test]
    fn matches_stay_within_scene_and_category() {
        let g = GroundTruth {
            scene: 1,
            ..gt(square(0, 0))
        };
        let a = det(0, 0.9, square(0, 0));
        assert_eq!(match_detections(&[&a], &[&g], 0.5).unwrap(), vec![false]);
    }

    #[test]
    fn hand_traced_ap_values() {
        assert_eq!(average_precision(&[true], 1).ap, 1.0);
        assert_eq!(average_precision(&[true, false], 1).ap, 1.0);
        assert_eq!(average_precision(&[false, true], 1).ap, 0.5);
        let none = average_precision(&[], 0);
        assert!(none.undefined && none.ap == 0.0);
        let spurious = average_precision(&[false], 0);
        assert!(!spurious.undefined && spurious.ap == 0.0);
        // [TP, FP, TP] with 2 GTs: 0.5·1 + 0.5·(2/3).
        assert!((average_precision(&[true, false, true], 2).ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let gts = vec![gt(square(0, 0)), gt(square(3, 3))];
        let dets = vec![det(0, 0.9, square(0, 0)), det(1, 0.8, square(3, 3))];
        let table = mean_apr(&dets, &gts, 1, &APR_THRESHOLDS).unwrap();
        assert_eq!(table.mean_at(0.5), Some(1.0));
        assert_eq!(table.mean_at(0.7), Some(1.0));
        let table = mean_apr(&[], &gts, 1, &APR_THRESHOLDS).unwrap();
        assert_eq!(table.mean_at(0.5), Some(0.0));
    }

    #[test]
    fn identical_models_sit_on_the_diagonal() {
        let gts = vec![gt(square(0, 0))];
        let dets = vec![det(0, 0.9, square(1, 0)), det(1, 0.5, square(0, 1))];
        let points = overlap_scatter(&dets, &dets, &gts).unwrap();
        assert_eq!(points.len(), 2);
        let s = summarize_scatter(&points);
        assert_eq!((s.improved, s.degraded, s.equal), (0.0, 0.0, 1.0));
        let mut csv = Vec::new();
        write_scatter_csv(&mut csv, &points).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 3);
    }

    #[test]
    fn swap_probe_matrix_is_symmetric_with_zero_diagonal() {
        let arch = ArchDescriptor {
            patch_size: 16,
            heatmap_size: 8,
            block_channels: vec![4, 4, 4],
            head_width: 4,
            ..ArchDescriptor::default()
        };
        let net = init_params(&arch, 3).unwrap();
        let patch = Tensor::filled([1, 3, 16, 16], 60.0);
        let probe = category_swap_probe(&net, &patch, 3).unwrap();
        for a in 0..4 {
            assert_eq!(probe.distances[a][a], 0.0);
            for b in 0..4 {
                assert_eq!(probe.distances[a][b], probe.distances[b][a]);
            }
        }
    }

    fn labels_strategy() -> impl Strategy<Value = (Vec<bool>, usize)> {
        prop::collection::vec(any::<bool>(), 0..12).prop_flat_map(|labels| {
            let tp = labels.iter().filter(|&&b| b).count();
            (Just(labels), tp..tp + 4)
        })
    }

    proptest! {
        #[test]
        fn trailing_false_positive_never_raises_ap((labels, num_gt) in labels_strategy()) {
            let before = average_precision(&labels, num_gt).ap;
            let mut longer = labels.clone();
            longer.push(false);
            prop_assert!(average_precision(&longer, num_gt).ap <= before);
            prop_assert!((0.0..=1.0).contains(&before));
        }

        #[test]
        fn recall_is_non_decreasing((labels, num_gt) in labels_strategy()) {
            let c = average_precision(&labels, num_gt);
            prop_assert!(c.points.windows(2).all(|w| w[0].0 <= w[1].0));
        }

        #[test]
        fn mask_iou_is_symmetric_and_bounded(
            a in prop::collection::vec(any::<bool>(), 16),
            b in prop::collection::vec(any::<bool>(), 16),
        ) {
            let a = BinaryMask::from_bits(4, 4, a).unwrap();
            let b = BinaryMask::from_bits(4, 4, b).unwrap();
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b && !a.is_empty());
        }
    }
}
