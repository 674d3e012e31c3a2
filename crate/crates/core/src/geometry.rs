//! Integer boxes and binary masks on the scene grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box, `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn intersection_area(&self, other: &BBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::Data(format!(
                "mask {width}x{height} needs {} entries, got {}",
                width * height,
                bits.len()
            )));
        }
        Ok(BinaryMask { width, height, bits })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        BinaryMask { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Data(format!(
                "mask dims {}x{} and {}x{} differ",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count())
    }

    pub fn union_count(&self, other: &BinaryMask) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self.bits.iter().zip(&other.bits).filter(|(a, b)| **a || **b).count())
    }

    /// Tight bounding box of the set pixels, `None` when empty.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
    }

    /// True when some set pixel of `self` is 4-adjacent to a set pixel of `other`.
    pub fn touches(&self, other: &BinaryMask) -> bool {
        if self.check_dims(other).is_err() {
            return false;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let neighbours = [
                    (x > 0).then(|| (x - 1, y)),
                    (x + 1 < self.width).then_some((x + 1, y)),
                    (y > 0).then(|| (x, y - 1)),
                    (y + 1 < self.height).then_some((x, y + 1)),
                ];
                if neighbours.into_iter().flatten().any(|(nx, ny)| other.get(nx, ny)) {
                    return true;
                }
            }
        }
        false
    }

    pub fn overlaps(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| *a && *b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_iou_cases() {
        let a = BBox::new(0, 0, 2, 2);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(2, 0, 4, 2)), 0.0);
        assert!((a.iou(&BBox::new(1, 0, 3, 2)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn tight_bbox_is_exclusive() {
        let m = BinaryMask::from_fn(5, 4, |x, y| (1..3).contains(&x) && y == 2);
        assert_eq!(m.tight_bbox(), Some(BBox::new(1, 2, 3, 3)));
        assert_eq!(BinaryMask::empty(3, 3).tight_bbox(), None);
    }

    #[test]
    fn touching_is_four_neighbourhood() {
        let a = BinaryMask::from_fn(4, 4, |x, y| x == 1 && y == 1);
        let side = BinaryMask::from_fn(4, 4, |x, y| x == 2 && y == 1);
        let diagonal = BinaryMask::from_fn(4, 4, |x, y| x == 2 && y == 2);
        assert!(a.touches(&side));
        assert!(!a.touches(&diagonal));
    }
}
