//! Adam optimizer with bias correction. One [`AdamState`] instance holds the
//! first/second moment buffers for every trainable tensor of a model, keyed
//! by the order in which the tensors are visited (which is fixed).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every tensor in `params`, consuming the grad
    /// buffers (they are zeroed afterwards). `names` is used only to report
    /// which tensor carried a non-finite gradient.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)]) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, t)| Moments {
                    m: vec![0.0; t.numel()],
                    v: vec![0.0; t.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer state tracks {} tensors but step got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for ((name, param), mom) in params.iter_mut().zip(&mut self.moments) {
            let grad = match param.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in tensor '{name}'"
                )));
            }
            for (((p, g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut mom.m)
                .zip(&mut mom.v)
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
            param.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_unit_gradient_moves_by_almost_lr() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut t = Tensor::zeros(vec![1]);
        t.accumulate_grad(&[1.0]);
        state.step(&mut [("w", &mut t)]).unwrap();
        // m_hat = v_hat = 1 after bias correction, so the update is
        // -lr * 1 / (1 + eps)
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((t.data()[0] - expect).abs() < 1e-15);
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn nan_gradient_is_reported_with_tensor_name() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut t = Tensor::zeros(vec![1]);
        t.accumulate_grad(&[f64::NAN]);
        let err = state.step(&mut [("conv1.weight", &mut t)]).unwrap_err();
        assert!(err.to_string().contains("conv1.weight"));
    }

    #[test]
    fn tensors_without_gradients_are_left_alone() {
        let mut state = AdamState::new(AdamConfig::default());
        let mut a = Tensor::full(vec![1], 5.0);
        let mut b = Tensor::full(vec![1], 7.0);
        b.accumulate_grad(&[2.0]);
        state.step(&mut [("a", &mut a), ("b", &mut b)]).unwrap();
        assert_eq!(a.data()[0], 5.0);
        assert!(b.data()[0] < 7.0);
    }

    #[test]
    fn two_steps_track_reference_sequence() {
        // Hand-computed two-step trace on a scalar with constant gradient 0.5.
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg.clone());
        let mut t = Tensor::zeros(vec![1]);
        let mut reference = 0.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for step in 1..=2 {
            t.accumulate_grad(&[0.5]);
            state.step(&mut [("w", &mut t)]).unwrap();
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * 0.5;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * 0.25;
            let m_hat = m / (1.0 - cfg.beta1.powi(step));
            let v_hat = v / (1.0 - cfg.beta2.powi(step));
            reference -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            assert!((t.data()[0] - reference).abs() < 1e-15);
        }
    }
}
