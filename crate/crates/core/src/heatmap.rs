use crate::error::{Error, Result};
use crate::nn::resize_plane;

/// Dense grid of foreground probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Heatmap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// The initial "no information" prediction.
    pub fn half(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.5)
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Config(format!(
                "heatmap {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Heatmap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Heatmap> {
        let mut out = vec![0.0; height * width];
        resize_plane(&self.values, self.height, self.width, &mut out, height, width)?;
        Heatmap::from_values(height, width, out)
    }

    /// Mean absolute per-pixel difference; maps must have equal dims.
    pub fn mean_abs_diff(&self, other: &Heatmap) -> f64 {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        let sum: f64 = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum();
        sum / self.values.len().max(1) as f64
    }
}
