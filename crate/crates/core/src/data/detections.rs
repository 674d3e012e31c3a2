//! Detector stand-in: ground-truth boxes plus jittered copies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Jittered boxes emitted per instance, in addition to the ground-truth box.
    pub per_instance: usize,
    /// Largest centre shift, as a fraction of the box side.
    pub max_shift: f64,
    /// Largest relative change of each side length.
    pub max_scale: f64,
    /// Jittered boxes must exceed this IoU with their ground-truth box.
    pub min_iou: f64,
    pub max_tries: usize,
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            per_instance: 1,
            max_shift: 0.12,
            max_scale: 0.15,
            min_iou: 0.7,
            max_tries: 100,
        }
    }
}

impl JitterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_shift >= 0.0 && self.max_scale >= 0.0 && self.max_scale < 1.0) {
            return Err(Error::Config(format!(
                "jitter shift {} / scale {} out of range",
                self.max_shift, self.max_scale
            )));
        }
        if !(0.0..1.0).contains(&self.min_iou) {
            return Err(Error::Config(format!("minimum IoU {} outside [0, 1)", self.min_iou)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDetection {
    pub bbox: BBox,
    pub score: f64,
    pub category: usize,
    /// Index of the instance the box was derived from.
    pub instance: usize,
}

fn jittered_box(gt: &BBox, config: &JitterConfig, size: usize, rng: &mut impl Rng) -> BBox {
    let (w, h) = (gt.width() as f64, gt.height() as f64);
    let cx = (gt.x0 + gt.x1) as f64 / 2.0 + rng.random_range(-1.0..=1.0) * config.max_shift * w;
    let cy = (gt.y0 + gt.y1) as f64 / 2.0 + rng.random_range(-1.0..=1.0) * config.max_shift * h;
    let nw = w * (1.0 + rng.random_range(-1.0..=1.0) * config.max_scale);
    let nh = h * (1.0 + rng.random_range(-1.0..=1.0) * config.max_scale);
    let clamp = |v: f64| v.round().clamp(0.0, size as f64) as usize;
    BBox::new(
        clamp(cx - nw / 2.0),
        clamp(cy - nh / 2.0),
        clamp(cx + nw / 2.0),
        clamp(cy + nh / 2.0),
    )
}

/// Per instance: the ground-truth box (score drawn from [0.9, 1]) followed by
/// `per_instance` jittered boxes whose score shrinks with their IoU.
///
/// Returns the detections and the number of jittered boxes that could not be placed
/// above the IoU bar within `max_tries`.
pub fn simulate_detections(
    scene: &Scene,
    config: &JitterConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<SimulatedDetection>, usize)> {
    config.validate()?;
    let mut out = Vec::with_capacity(scene.instances.len() * (1 + config.per_instance));
    let mut missed = 0;
    for (i, inst) in scene.instances.iter().enumerate() {
        out.push(SimulatedDetection {
            bbox: inst.bbox,
            score: 0.9 + 0.1 * rng.random::<f64>(),
            category: inst.category,
            instance: i,
        });
        for _ in 0..config.per_instance {
            let found = (0..config.max_tries).find_map(|_| {
                let b = jittered_box(&inst.bbox, config, scene.size, rng);
                let iou = b.iou(&inst.bbox);
                (!b.is_empty() && iou > config.min_iou).then_some((b, iou))
            });
            match found {
                Some((bbox, iou)) => out.push(SimulatedDetection {
                    bbox,
                    score: iou * (0.8 + 0.1 * rng.random::<f64>()),
                    category: inst.category,
                    instance: i,
                }),
                None => missed += 1,
            }
        }
    }
    Ok((out, missed))
}
