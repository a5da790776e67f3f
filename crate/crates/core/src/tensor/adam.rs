use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{ensure_finite, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments, one buffer pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        AdamState {
            config,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update of every parameter. Shapes and finiteness are validated
    /// before anything is written.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam state tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.first[i].len() {
                return Err(Error::shape(format!("adam buffer {i} length mismatch")));
            }
            ensure_finite(g, "adam gradient")?;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap()];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0, 3.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.5);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[vec![1.0]]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = 0.5 - 1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_second_step_not_larger() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        st.step(&mut p, &[vec![1.0]]).unwrap();
        let first = -p[0].data()[0];
        st.step(&mut p, &[vec![1.0]]).unwrap();
        let second = -p[0].data()[0] - first;
        assert!(second <= first * 1.01);
        assert!(second > 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::new(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[vec![f64::NAN]]).is_err());
        assert!(st.step(&mut p, &[vec![1.0, 2.0]]).is_err());
        assert_eq!(st.step_count(), 0);
    }
}
