//! Central finite-difference validation of analytic gradients.

use crate::error::Result;

/// Step used for central differences.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// A parameter array passes when its relative error is below this.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// A scalar function of several named real arrays with an analytic gradient.
pub trait Differentiable {
    fn array_names(&self) -> Vec<String>;
    fn array_mut(&mut self, index: usize) -> &mut [f64];
    fn loss(&self) -> Result<f64>;
    /// Loss plus one gradient buffer per array, same order and lengths as the arrays.
    fn loss_and_grads(&self) -> Result<(f64, Vec<Vec<f64>>)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayError {
    pub name: String,
    pub len: usize,
    /// `‖a − f‖ / max(‖a‖, ‖f‖, 1e-8)` over the whole array.
    pub relative_error: f64,
    /// Largest single-element `|a − f|`.
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub arrays: Vec<ArrayError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.arrays.iter().map(|a| a.relative_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.arrays.iter().all(|a| a.relative_error < self.tolerance)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, f)| a - f).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

/// Compares analytic gradients with central differences of step `h` for every array.
pub fn gradcheck<M: Differentiable>(model: &mut M, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_and_grads()?;
    let names = model.array_names();
    let mut arrays = Vec::with_capacity(names.len());
    for (index, name) in names.into_iter().enumerate() {
        let len = model.array_mut(index).len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let original = model.array_mut(index)[j];
            model.array_mut(index)[j] = original + h;
            let plus = model.loss()?;
            model.array_mut(index)[j] = original - h;
            let minus = model.loss()?;
            model.array_mut(index)[j] = original;
            *slot = (plus - minus) / (2.0 * h);
        }
        let a = &analytic[index];
        arrays.push(ArrayError {
            name,
            len,
            relative_error: relative_error(a, &numeric),
            max_abs_error: a.iter().zip(&numeric).map(|(a, f)| (a - f).abs()).fold(0.0, f64::max),
        });
    }
    Ok(GradCheckReport { arrays, tolerance })
}

/// Wraps a model and scales its analytic gradient, for fault-injection self tests.
pub struct ScaledGradient<M> {
    pub inner: M,
    pub scale: f64,
}

impl<M: Differentiable> Differentiable for ScaledGradient<M> {
    fn array_names(&self) -> Vec<String> {
        self.inner.array_names()
    }

    fn array_mut(&mut self, index: usize) -> &mut [f64] {
        self.inner.array_mut(index)
    }

    fn loss(&self) -> Result<f64> {
        self.inner.loss()
    }

    fn loss_and_grads(&self) -> Result<(f64, Vec<Vec<f64>>)> {
        let (loss, mut grads) = self.inner.loss_and_grads()?;
        grads.iter_mut().flatten().for_each(|g| *g *= self.scale);
        Ok((loss, grads))
    }
}
