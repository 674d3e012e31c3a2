//! From per-detection heatmaps to scene-level regions.

pub mod nms;
pub mod superpixels;

pub use nms::{box_nms, nms, region_nms, BOX_NMS_THRESHOLD, REGION_NMS_THRESHOLD};
pub use superpixels::{compute_superpixels, project_to_superpixels, SlicParams, SuperpixelMap};

use crate::data::pnm::encode_pgm;
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::heatmap::Heatmap;
use crate::nn::resize_plane;

/// Heat above which a pixel (or superpixel mean) counts as foreground.
pub const BINARIZE_THRESHOLD: f64 = 0.4;

/// Binary region at scene resolution, owned by one detection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    pub detection: usize,
    pub mask: BinaryMask,
}

impl RegionMask {
    /// P5 PGM bytes, 255 for foreground.
    pub fn to_pgm(&self) -> Vec<u8> {
        let gray: Vec<u8> = self.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
        encode_pgm(self.mask.width(), self.mask.height(), &gray)
    }
}

/// Resizes `heat` to the box and writes it into an otherwise zero scene-sized grid.
pub fn paste_heatmap(heat: &Heatmap, bbox: &BBox, scene_width: usize, scene_height: usize) -> Result<Heatmap> {
    if bbox.is_empty() || !bbox.fits_in(scene_width, scene_height) {
        return Err(Error::Data(format!(
            "box {bbox:?} is empty or outside the {scene_width}×{scene_height} scene"
        )));
    }
    let (w, h) = (bbox.width(), bbox.height());
    let mut local = vec![0.0; w * h];
    resize_plane(heat.values(), heat.height(), heat.width(), &mut local, h, w)?;
    let mut grid = vec![0.0; scene_width * scene_height];
    for (row, src) in local.chunks(w).enumerate() {
        let start = (bbox.y0 + row) * scene_width + bbox.x0;
        grid[start..start + w].copy_from_slice(src);
    }
    Heatmap::from_values(scene_height, scene_width, grid)
}

/// Foreground wherever the heat is strictly greater than `threshold`.
pub fn binarize(heat: &Heatmap, threshold: f64) -> BinaryMask {
    let bits = heat.values().iter().map(|&v| v > threshold).collect();
    BinaryMask::from_bits(heat.width(), heat.height(), bits).expect("heatmap dims are consistent")
}

/// Paste, optionally project onto superpixels, and binarize one detection's heatmap.
pub fn region_from_heatmap(
    heat: &Heatmap,
    bbox: &BBox,
    detection: usize,
    scene_width: usize,
    scene_height: usize,
    superpixels: Option<&SuperpixelMap>,
) -> Result<RegionMask> {
    let mut grid = paste_heatmap(heat, bbox, scene_width, scene_height)?;
    if let Some(sp) = superpixels {
        grid = project_to_superpixels(&grid, sp)?;
    }
    Ok(RegionMask {
        detection,
        mask: binarize(&grid, BINARIZE_THRESHOLD),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_one_fills_exactly_the_box() {
        let g = paste_heatmap(&Heatmap::constant(8, 8, 1.0), &BBox::new(3, 2, 10, 5), 12, 7).unwrap();
        for y in 0..7 {
            for x in 0..12 {
                let inside = (3..10).contains(&x) && (2..5).contains(&y);
                assert_eq!(g.get(y, x), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn whole_scene_box_at_native_size_is_identity() {
        let values: Vec<f64> = (0..48).map(|i| i as f64 / 48.0).collect();
        let h = Heatmap::from_values(6, 8, values).unwrap();
        assert_eq!(paste_heatmap(&h, &BBox::new(0, 0, 8, 6), 8, 6).unwrap(), h);
    }

    #[test]
    fn pasted_constant_keeps_its_value() {
        let g = paste_heatmap(&Heatmap::constant(32, 32, 0.37), &BBox::new(1, 1, 20, 9), 24, 12).unwrap();
        assert!((0..12).all(|y| (0..24).all(|x| {
            let v = g.get(y, x);
            v == 0.0 || (v - 0.37).abs() < 1e-15
        })));
    }

    #[test]
    fn binarization_is_strict() {
        let h = Heatmap::from_values(1, 4, vec![0.41, 0.40, 0.0, 1.0]).unwrap();
        assert_eq!(binarize(&h, 0.4).bits(), &[true, false, false, true]);
        assert!(binarize(&Heatmap::constant(3, 3, 0.0), 0.4).is_empty());
        assert_eq!(binarize(&h, 0.0).bits(), &[true, true, false, true]);
    }

    #[test]
    fn region_pgm_uses_255_for_foreground() {
        let r = RegionMask {
            detection: 0,
            mask: BinaryMask::from_fn(2, 1, |x, _| x == 1),
        };
        assert_eq!(r.to_pgm(), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }
}
