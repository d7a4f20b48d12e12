use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.rows(), p.cols()))
                .collect()
        };
        AdamState {
            config,
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor] {
        &self.second_moment
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first_moment[k].shape() {
                return Err(Error::invalid(format!(
                    "adam: shape mismatch on parameter {k}"
                )));
            }
            if !g.is_finite() {
                return Err(Error::numeric(format!(
                    "adam: non-finite gradient for parameter {k}"
                )));
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(
            self.first_moment
                .iter_mut()
                .zip(self.second_moment.iter_mut()),
        ) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::row_vector(&[0.5, -1.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state.step(&mut params, &[Tensor::zeros(1, 2)]).unwrap();
        assert_eq!(params[0].data(), &[0.5, -1.0]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn zero_gradient_decays_moments() {
        let mut params = vec![Tensor::row_vector(&[0.5, -1.0])];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        state
            .step(&mut params, &[Tensor::row_vector(&[1.0, -3.0])])
            .unwrap();
        let m = state.first_moment()[0].clone();
        let v = state.second_moment()[0].clone();
        state.step(&mut params, &[Tensor::zeros(1, 2)]).unwrap();
        for (a, b) in state.first_moment()[0].data().iter().zip(m.data()) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
        for (a, b) in state.second_moment()[0].data().iter().zip(v.data()) {
            assert!((a - 0.999 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let cfg = AdamConfig::default();
        let g = [0.3, -2.0, 1e-3];
        let mut params = vec![Tensor::zeros(1, 3)];
        let mut state = AdamState::new(cfg, &params);
        state.step(&mut params, &[Tensor::row_vector(&g)]).unwrap();
        for (w, gi) in params[0].data().iter().zip(g) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((w - expected).abs() < 1e-18, "{w} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_descends() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        for _ in 0..100 {
            state.step(&mut params, &[Tensor::scalar(0.7)]).unwrap();
        }
        assert!(params[0].data()[0] < 0.0);
    }

    #[test]
    fn rejects_non_finite_and_mismatch() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(AdamConfig::default(), &params);
        assert!(matches!(
            state.step(&mut params, &[Tensor::scalar(f64::NAN)]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            state.step(&mut params, &[Tensor::zeros(1, 2)]),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(state.step_count(), 0);
    }
}
