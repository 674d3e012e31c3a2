//! Scene-level segmentation: detections in, regions out, plus the per-iteration
//! statistics used to study refinement.

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::{crop_image, patch_tensor, Dataset, SceneRecord, Split};
use crate::engine::infer;
use crate::error::Result;
use crate::geometry::BinaryMask;
use crate::heatmap::Heatmap;
use crate::metrics::{mask_iou, EvalDetection, GroundTruth};
use crate::model::SegNet;
use crate::postprocess::{
    binarize, box_nms, compute_superpixels, paste_heatmap, project_to_superpixels, region_nms, SuperpixelMap,
    BINARIZE_THRESHOLD,
};

/// One detection run through Algorithm-2 style inference.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedDetection {
    /// Index into the scene's detection list.
    pub detection: usize,
    pub scene: u64,
    pub category: usize,
    pub score: f64,
    /// Heatmaps ŷ⁽⁰⁾..ŷ⁽ᴹ⁾ at heatmap resolution.
    pub trajectory: Vec<Heatmap>,
    /// Binarized scene-resolution region for every trajectory entry.
    pub regions: Vec<BinaryMask>,
}

impl SegmentedDetection {
    pub fn final_region(&self) -> &BinaryMask {
        self.regions.last().expect("trajectory is never empty")
    }

    pub fn to_eval(&self, record: &SceneRecord) -> EvalDetection {
        EvalDetection {
            id: self.detection,
            scene: self.scene,
            category: self.category,
            score: self.score,
            region: self.final_region().clone(),
            bbox: record.detections[self.detection].bbox,
        }
    }
}

/// Indices of the detections that survive per-category box NMS.
pub fn box_nms_per_category(record: &SceneRecord, threshold: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let categories: std::collections::BTreeSet<usize> = record.detections.iter().map(|d| d.category).collect();
    for c in categories {
        let idx: Vec<usize> = (0..record.detections.len())
            .filter(|&i| record.detections[i].category == c)
            .collect();
        let boxes: Vec<_> = idx.iter().map(|&i| record.detections[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| record.detections[i].score).collect();
        kept.extend(box_nms(&boxes, &scores, threshold).into_iter().map(|k| idx[k]));
    }
    kept.sort_unstable();
    kept
}

/// Heat grid → region, with optional superpixel projection.
pub fn heat_to_region(grid: &Heatmap, superpixels: Option<&SuperpixelMap>) -> Result<BinaryMask> {
    Ok(match superpixels {
        Some(sp) => binarize(&project_to_superpixels(grid, sp)?, BINARIZE_THRESHOLD),
        None => binarize(grid, BINARIZE_THRESHOLD),
    })
}

/// Segments the given detections of one scene with `iterations` refinement steps.
pub fn segment_detections(
    net: &SegNet,
    record: &SceneRecord,
    detections: &[usize],
    iterations: usize,
    superpixels: Option<&SuperpixelMap>,
) -> Result<Vec<SegmentedDetection>> {
    let scene = &record.scene;
    detections
        .iter()
        .map(|&d| {
            let det = &record.detections[d];
            let patch = crop_image(scene, &det.bbox, net.arch.patch_size)?;
            let trajectory = infer(net, &patch_tensor(&patch, net.arch.patch_size), det.category, iterations)?;
            let regions = trajectory
                .iter()
                .map(|h| heat_to_region(&paste_heatmap(h, &det.bbox, scene.size, scene.size)?, superpixels))
                .collect::<Result<_>>()?;
            Ok(SegmentedDetection {
                detection: d,
                scene: scene.id,
                category: det.category,
                score: det.score,
                trajectory,
                regions,
            })
        })
        .collect()
}

/// Superpixels of a scene when the config asks for them.
pub fn scene_superpixels(record: &SceneRecord, eval: &EvalConfig) -> Result<Option<SuperpixelMap>> {
    if !eval.superpixels {
        return Ok(None);
    }
    let s = &record.scene;
    compute_superpixels(&s.image, s.size, s.size, &eval.slic).map(Some)
}

/// Box NMS, segmentation, then region NMS per category.
pub fn segment_scene(net: &SegNet, record: &SceneRecord, eval: &EvalConfig) -> Result<Vec<SegmentedDetection>> {
    let sp = scene_superpixels(record, eval)?;
    let kept = box_nms_per_category(record, eval.box_nms);
    let segmented = segment_detections(net, record, &kept, eval.iterations, sp.as_ref())?;
    apply_region_nms(segmented, eval.region_nms)
}

pub fn apply_region_nms(segmented: Vec<SegmentedDetection>, threshold: f64) -> Result<Vec<SegmentedDetection>> {
    let mut keep = vec![false; segmented.len()];
    let categories: std::collections::BTreeSet<usize> = segmented.iter().map(|s| s.category).collect();
    for c in categories {
        let idx: Vec<usize> = (0..segmented.len()).filter(|&i| segmented[i].category == c).collect();
        let masks: Vec<BinaryMask> = idx.iter().map(|&i| segmented[i].final_region().clone()).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| segmented[i].score).collect();
        for k in region_nms(&masks, &scores, threshold)? {
            keep[idx[k]] = true;
        }
    }
    Ok(segmented.into_iter().zip(keep).filter_map(|(s, k)| k.then_some(s)).collect())
}

pub fn ground_truths(record: &SceneRecord) -> Vec<GroundTruth> {
    record
        .scene
        .instances
        .iter()
        .map(|i| GroundTruth {
            scene: record.scene.id,
            category: i.category,
            mask: i.mask.clone(),
        })
        .collect()
}

/// Mean quality of the regions at each inference iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub detections: usize,
    pub abutting_detections: usize,
    /// Mean IoU with the source instance, indexed by iteration 0..=M.
    pub mean_iou: Vec<f64>,
    pub mean_iou_abutting: Vec<f64>,
    /// On the abutting subset: mean fraction of predicted foreground lying inside another
    /// same-category instance.
    pub leak_fraction_abutting: Vec<f64>,
    /// Mean absolute change between consecutive heatmaps, indexed by iteration 1..=M.
    pub convergence: Vec<f64>,
}

/// Runs every detection of `split` (no NMS) and measures each iteration against the
/// detection's source instance.
pub fn iteration_stats(
    net: &SegNet,
    dataset: &Dataset,
    split: Split,
    iterations: usize,
    superpixels: Option<&crate::postprocess::SlicParams>,
) -> Result<IterationStats> {
    let m = iterations + 1;
    let mut iou = vec![0.0; m];
    let mut iou_ab = vec![0.0; m];
    let mut leak = vec![0.0; m];
    let mut conv = vec![0.0; iterations];
    let (mut n, mut n_ab) = (0usize, 0usize);
    for record in dataset.scenes_in(split) {
        let sp = match superpixels {
            Some(p) => Some(compute_superpixels(&record.scene.image, record.scene.size, record.scene.size, p)?),
            None => None,
        };
        let all: Vec<usize> = (0..record.detections.len()).collect();
        let pairs = record.scene.abutting_pairs();
        for seg in segment_detections(net, record, &all, iterations, sp.as_ref())? {
            let source = record.detections[seg.detection].instance;
            let inst = &record.scene.instances[source];
            let abuts = pairs.iter().any(|&(a, b)| a == source || b == source);
            n += 1;
            n_ab += abuts as usize;
            for (t, region) in seg.regions.iter().enumerate() {
                let v = mask_iou(region, &inst.mask)?;
                iou[t] += v;
                if abuts {
                    iou_ab[t] += v;
                    let fg = region.count();
                    if fg > 0 {
                        let mut inside = 0;
                        for (j, other) in record.scene.instances.iter().enumerate() {
                            if j != source && other.category == inst.category {
                                inside += region.intersection_count(&other.mask)?;
                            }
                        }
                        leak[t] += inside as f64 / fg as f64;
                    }
                }
            }
            for (t, d) in crate::engine::convergence_trace(&seg.trajectory).into_iter().enumerate() {
                conv[t] += d;
            }
        }
    }
    let div = |v: Vec<f64>, k: usize| v.into_iter().map(|x| if k == 0 { 0.0 } else { x / k as f64 }).collect();
    Ok(IterationStats {
        detections: n,
        abutting_detections: n_ab,
        mean_iou: div(iou, n),
        mean_iou_abutting: div(iou_ab, n_ab),
        leak_fraction_abutting: div(leak, n_ab),
        convergence: div(conv, n),
    })
}
