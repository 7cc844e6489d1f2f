//! Bias-corrected Adam.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment accumulators for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One update of every parameter in place. Nothing is modified when a
    /// shape or finiteness check fails.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adam_step",
                left: vec![self.first.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "adam_step" });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((x, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        st.step(&mut [&mut p], &[Tensor::from_vec(vec![1.0])]).unwrap();
        assert!((p.data()[0] + 1e-4).abs() < 1e-7);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = Tensor::from_vec(vec![0.3, -1.2]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Tensor::zeros([2])]).unwrap();
        }
        assert!(p.bit_eq(&before));
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn rejects_mismatch_and_nan_without_side_effects() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros([3])]).is_err());
        assert!(st
            .step(&mut [&mut p], &[Tensor::from_vec(vec![f64::NAN, 0.0])])
            .is_err());
        assert_eq!(st.step_count(), 0);
        assert_eq!(p.data(), &[1.0, 2.0]);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut st = AdamState::new(AdamConfig::with_lr(1e-2), &[&p]);
        let mut last = 1.0f64;
        for _ in 0..100 {
            let g = Tensor::from_vec(vec![2.0 * p.data()[0]]);
            st.step(&mut [&mut p], &[g]).unwrap();
            let now = p.data()[0].abs();
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
    }
}
