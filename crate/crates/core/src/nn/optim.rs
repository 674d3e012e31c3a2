//! SGD with heavy-ball momentum: `v ← μ v − lr g`, `w ← w + v`.

use super::conv::LayerParams;
use super::tape::LayerGrads;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    /// One buffer per parameter array, kernel then bias for each layer.
    pub velocity: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &[LayerParams], learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0) || !learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate {learning_rate} must be non-negative")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} must lie in [0, 1)")));
        }
        let velocity = params
            .iter()
            .flat_map(|p| [vec![0.0; p.kernel.len()], vec![0.0; p.bias.len()]])
            .collect();
        Ok(OptimizerState {
            velocity,
            learning_rate,
            momentum,
        })
    }
}

pub fn sgd_step(params: &mut [LayerParams], grads: &[LayerGrads], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || state.velocity.len() != 2 * params.len() {
        return Err(Error::Config(format!(
            "sgd_step: {} layers, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let pairs = [
            (p.kernel.data_mut(), g.kernel.as_slice()),
            (p.bias.as_mut_slice(), g.bias.as_slice()),
        ];
        for (j, (w, g)) in pairs.into_iter().enumerate() {
            let v = &mut state.velocity[2 * i + j];
            if w.len() != g.len() || v.len() != w.len() {
                return Err(Error::Config(format!(
                    "sgd_step: layer {i} array {j} has {} values, gradient {}, velocity {}",
                    w.len(),
                    g.len(),
                    v.len()
                )));
            }
            for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *v = state.momentum * *v - state.learning_rate * g;
                *w += *v;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Vec<LayerParams> {
        let mut p = LayerParams::zeros(1, 1, 1, 1);
        p.kernel.data_mut()[0] = value;
        vec![p]
    }

    fn grad(value: f64) -> Vec<LayerGrads> {
        vec![LayerGrads {
            kernel: vec![value],
            bias: vec![0.0],
        }]
    }

    #[test]
    fn first_step_is_plain_sgd() {
        let mut params = single(1.0);
        let mut state = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        sgd_step(&mut params, &grad(1.0), &mut state).unwrap();
        assert!((params[0].kernel.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_decays_velocity() {
        let mut params = single(0.0);
        let mut state = OptimizerState::new(&params, 0.1, 0.5).unwrap();
        state.velocity[0][0] = 2.0;
        sgd_step(&mut params, &grad(0.0), &mut state).unwrap();
        assert_eq!(params[0].kernel.data()[0], 1.0);
        sgd_step(&mut params, &grad(0.0), &mut state).unwrap();
        assert_eq!(params[0].kernel.data()[0], 1.5);
    }

    #[test]
    fn zero_rate_only_decays_velocity() {
        let mut params = single(3.0);
        let mut state = OptimizerState::new(&params, 0.0, 0.9).unwrap();
        state.velocity[0][0] = 1.0;
        sgd_step(&mut params, &grad(5.0), &mut state).unwrap();
        assert_eq!(state.velocity[0][0], 0.9);
        assert_eq!(params[0].kernel.data()[0], 3.9);

        let mut params = single(3.0);
        let mut state = OptimizerState::new(&params, 0.0, 0.0).unwrap();
        sgd_step(&mut params, &grad(5.0), &mut state).unwrap();
        assert_eq!(params[0].kernel.data()[0], 3.0);
    }

    #[test]
    fn velocity_starts_at_zero_with_matching_shapes() {
        let params = vec![LayerParams::zeros(4, 3, 3, 3), LayerParams::zeros(1, 4, 1, 1)];
        let state = OptimizerState::new(&params, 0.01, 0.9).unwrap();
        let lens: Vec<usize> = state.velocity.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![108, 4, 4, 1]);
        assert!(state.velocity.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = single(1.0);
        let mut state = OptimizerState::new(&params, 0.1, 0.9).unwrap();
        let bad = vec![LayerGrads {
            kernel: vec![1.0, 2.0],
            bias: vec![0.0],
        }];
        assert!(sgd_step(&mut params, &bad, &mut state).is_err());
    }
}
