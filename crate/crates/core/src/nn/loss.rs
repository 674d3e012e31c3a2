//! Pixel-wise binary cross-entropy with per-sample weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the log.
pub const BCE_EPSILON: f64 = 1e-7;

fn check_inputs(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(Error::Config(format!(
            "bce: prediction dims {:?} differ from target dims {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    if weights.len() != pred.batch() {
        return Err(Error::Config(format!(
            "bce: {} sample weights for a batch of {}",
            weights.len(),
            pred.batch()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Data(format!("bce: sample weight {w} is not positive")));
    }
    if let Some(t) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data(format!("bce: target value {t} is not in {{0, 1}}")));
    }
    Ok(())
}

/// `Σ_s w_s Σ_px −[t ln p + (1−t) ln(1−p)]` and its gradient with respect to `pred`.
///
/// Where the clamp is active the loss is flat in `pred`, so the gradient there is zero.
pub fn weighted_bce(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<(f64, Tensor)> {
    check_inputs(pred, target, weights)?;
    let per_sample = pred.len() / pred.batch().max(1);
    let mut grad = Tensor::zeros(pred.dims());
    let mut loss = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        let range = s * per_sample..(s + 1) * per_sample;
        let p = &pred.data()[range.clone()];
        let t = &target.data()[range.clone()];
        let g = &mut grad.data_mut()[range];
        let mut sample_loss = 0.0;
        for ((&p, &t), g) in p.iter().zip(t).zip(g.iter_mut()) {
            let pc = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            sample_loss -= if t == 1.0 { pc.ln() } else { (1.0 - pc).ln() };
            *g = if p <= BCE_EPSILON || p >= 1.0 - BCE_EPSILON {
                0.0
            } else if t == 1.0 {
                -w / pc
            } else {
                w / (1.0 - pc)
            };
        }
        loss += w * sample_loss;
    }
    Ok((loss, grad))
}

/// Weighted BCE evaluated on logits `z` with `p = σ(z)`.
///
/// Uses the overflow-free form `max(z, 0) − z·t + ln(1 + e^{−|z|})`, so loss and the
/// gradient `w (σ(z) − t)` stay consistent even where `σ(z)` would saturate. Inside the
/// clamp range it agrees with [`weighted_bce`] applied to `σ(z)`.
pub fn weighted_bce_with_logits(
    logits: &Tensor,
    target: &Tensor,
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    check_inputs(logits, target, weights)?;
    let per_sample = logits.len() / logits.batch().max(1);
    let mut grad = Tensor::zeros(logits.dims());
    let mut loss = 0.0;
    for (s, &w) in weights.iter().enumerate() {
        let range = s * per_sample..(s + 1) * per_sample;
        let z = &logits.data()[range.clone()];
        let t = &target.data()[range.clone()];
        let g = &mut grad.data_mut()[range];
        let mut sample_loss = 0.0;
        for ((&z, &t), g) in z.iter().zip(t).zip(g.iter_mut()) {
            sample_loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            *g = w * (sigmoid(z) - t);
        }
        loss += w * sample_loss;
    }
    Ok((loss, grad))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
