//! Adam with L2 weight decay and global-norm gradient clipping.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * param` before the moments.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

pub fn adam_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        if grads[i].len() != n || state.m[i].len() != n || state.v[i].len() != n {
            return Err(Error::Contract(format!(
                "parameter {i} has {n} values but gradient has {}",
                grads[i].len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let bias1 = 1.0 - libm::pow(config.beta1, t);
    let bias2 = 1.0 - libm::pow(config.beta2, t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let grad = g[j] + config.weight_decay * *w;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * grad;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * grad * grad;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            *w -= config.learning_rate * m_hat / (libm::sqrt(v_hat) + config.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(|g| g * g).sum::<f64>());
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.5])];
        let mut state = AdamState::new(&params);
        let config = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &[vec![0.0, 0.0]], &mut state, &config).unwrap();
        assert_eq!(params[0].data(), &[0.5, -1.5]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_is_a_signed_learning_rate() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.5, 2.0])];
        let mut state = AdamState::new(&params);
        let config = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let g = vec![0.3, -2.0, 1e-3];
        adam_step(&mut params, &[g.clone()], &mut state, &config).unwrap();
        for ((after, before), gi) in params[0].data().iter().zip([0.5, -1.5, 2.0]).zip(g) {
            let delta = after - before;
            assert!(delta.abs() >= 0.9 * config.learning_rate && delta.abs() <= config.learning_rate);
            assert_eq!(delta.signum(), -gi.signum());
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::vector(vec![0.5, -1.5])];
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &[vec![0.0]], &mut state, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut params, &[], &mut state, &AdamConfig::default()).is_err());
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }
}
