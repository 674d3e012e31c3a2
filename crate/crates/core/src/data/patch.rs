//! Detection-box patches: the unit of training and inference.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::model::{ArchDescriptor, IMAGE_CHANNELS};
use crate::nn::resize_plane;
use crate::tensor::Tensor;

use super::scene::Scene;

/// Threshold applied to the resized ground-truth mask.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: u64,
    pub detection: usize,
    pub instance: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub sample_id: usize,
    pub patch_size: usize,
    /// Interleaved RGB, `patch_size²` pixels.
    pub patch: Vec<u8>,
    pub gt_mask: BinaryMask,
    pub category: usize,
    /// Box area relative to the mean training box area.
    pub area_weight: f64,
    pub provenance: Provenance,
}

impl PatchSample {
    /// The patch as a `(1, 3, P, P)` tensor of raw values.
    pub fn to_tensor(&self) -> Tensor {
        patch_tensor(&self.patch, self.patch_size)
    }

    /// Ground-truth mask as 0/1 floats, row-major.
    pub fn target(&self) -> Vec<f64> {
        self.gt_mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

fn crop_plane(width: usize, bbox: &BBox, f: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(bbox.area());
    for y in bbox.y0..bbox.y1 {
        for x in bbox.x0..bbox.x1 {
            out.push(f(y * width + x));
        }
    }
    out
}

/// Interleaved RGB crop of `bbox`, resized per axis to `size × size`.
pub fn crop_image(scene: &Scene, bbox: &BBox, size: usize) -> Result<Vec<u8>> {
    let (w, h) = (bbox.width(), bbox.height());
    let mut patch = vec![0u8; 3 * size * size];
    let mut resized = vec![0.0; size * size];
    for c in 0..IMAGE_CHANNELS {
        let crop = crop_plane(scene.size, bbox, |i| f64::from(scene.image[3 * i + c]));
        resize_plane(&crop, h, w, &mut resized, size, size)?;
        for (i, &v) in resized.iter().enumerate() {
            patch[3 * i + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(patch)
}

/// `(1, 3, P, P)` tensor from an interleaved RGB patch.
pub fn patch_tensor(patch: &[u8], size: usize) -> Tensor {
    let mut t = Tensor::zeros([1, IMAGE_CHANNELS, size, size]);
    for c in 0..IMAGE_CHANNELS {
        for (i, v) in t.plane_mut(0, c).iter_mut().enumerate() {
            *v = f64::from(patch[3 * i + c]);
        }
    }
    t
}

/// Crops `bbox` from the scene and scales it anisotropically to the network sizes.
///
/// The area weight is the raw box area; [`normalize_area_weights`] rescales it.
pub fn extract_patch(
    scene: &Scene,
    bbox: &BBox,
    instance: usize,
    detection: usize,
    arch: &ArchDescriptor,
) -> Result<PatchSample> {
    if bbox.is_empty() {
        return Err(Error::Data(format!("scene {}: empty box {bbox:?}", scene.id)));
    }
    if !bbox.fits_in(scene.size, scene.size) {
        return Err(Error::Data(format!(
            "scene {}: box {bbox:?} exceeds the {}×{} scene",
            scene.id, scene.size, scene.size
        )));
    }
    let target = scene.instances.get(instance).ok_or_else(|| {
        Error::Data(format!("scene {}: no instance {instance}", scene.id))
    })?;
    let (w, h, s) = (bbox.width(), bbox.height(), scene.size);
    let p = arch.patch_size;

    let patch = crop_image(scene, bbox, p)?;

    let hs = arch.heatmap_size;
    let crop = crop_plane(s, bbox, |i| if target.mask.bits()[i] { 1.0 } else { 0.0 });
    let mut mask = vec![0.0; hs * hs];
    resize_plane(&crop, h, w, &mut mask, hs, hs)?;
    let gt_mask = BinaryMask::from_bits(hs, hs, mask.iter().map(|&v| v >= MASK_THRESHOLD).collect())?;

    Ok(PatchSample {
        sample_id: 0,
        patch_size: p,
        patch,
        gt_mask,
        category: target.category,
        area_weight: bbox.area() as f64,
        provenance: Provenance {
            scene: scene.id,
            detection,
            instance,
            bbox: *bbox,
        },
    })
}

/// Mean box area over the given (training) patches.
pub fn mean_box_area(patches: &[PatchSample]) -> f64 {
    let total: f64 = patches.iter().map(|p| p.provenance.bbox.area() as f64).sum();
    total / patches.len().max(1) as f64
}

/// Sets every `area_weight` to box area divided by `mean_area`.
pub fn normalize_area_weights(patches: &mut [PatchSample], mean_area: f64) {
    for p in patches {
        p.area_weight = p.provenance.bbox.area() as f64 / mean_area;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, SceneConfig};

    #[test]
    fn patch_sized_box_copies_the_crop() {
        let scene = generate_scene(&SceneConfig::default(), 0, 5).unwrap();
        let arch = ArchDescriptor::default();
        let bbox = BBox::new(10, 20, 74, 84);
        let s = extract_patch(&scene, &bbox, 0, 0, &arch).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let px = scene.pixel(x + 10, y + 20);
                assert_eq!(&s.patch[3 * (y * 64 + x)..3 * (y * 64 + x) + 3], &px);
            }
        }
    }

    #[test]
    fn full_instance_box_has_nonempty_mask_of_the_right_category() {
        let scene = generate_scene(&SceneConfig::default(), 0, 6).unwrap();
        let arch = ArchDescriptor::default();
        for (i, inst) in scene.instances.iter().enumerate() {
            let s = extract_patch(&scene, &inst.bbox, i, i, &arch).unwrap();
            assert!(!s.gt_mask.is_empty());
            assert_eq!(s.category, inst.category);
            assert_eq!(s.gt_mask.width(), arch.heatmap_size);
        }
    }

    #[test]
    fn empty_and_out_of_scene_boxes_are_rejected() {
        let scene = generate_scene(&SceneConfig::default(), 0, 6).unwrap();
        let arch = ArchDescriptor::default();
        assert!(extract_patch(&scene, &BBox::new(5, 5, 5, 9), 0, 0, &arch).is_err());
        assert!(extract_patch(&scene, &BBox::new(100, 5, 129, 9), 0, 0, &arch).is_err());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let scene = generate_scene(&SceneConfig::default(), 0, 7).unwrap();
        let arch = ArchDescriptor::default();
        let s = extract_patch(&scene, &scene.instances[0].bbox, 0, 0, &arch).unwrap();
        let t = s.to_tensor();
        assert_eq!(t.plane(0, 1)[5], f64::from(s.patch[3 * 5 + 1]));
    }
}
