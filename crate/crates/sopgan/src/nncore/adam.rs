//! Adam optimizer with bias-corrected moment estimates.

use crate::nncore::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
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

/// First/second moment buffers and step counter for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState {
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            t: 0,
        }
    }

    /// One in-place update of `param` from `grad`.
    pub fn step(&mut self, cfg: &AdamConfig, param: &mut Tensor, grad: &Tensor) {
        debug_assert_eq!(param.numel(), self.m.len());
        debug_assert!(param.same_shape(grad));
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_almost_lr() {
        // With m=v=0, grad 1.0: m_hat = 1, v_hat = 1, so the update is
        // lr / (1 + eps) — for param 1.0 and lr 0.1 the result is ~0.9.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = Tensor::filled(&[1], 1.0);
        let g = Tensor::filled(&[1], 1.0);
        let mut st = AdamState::new(1);
        st.step(&cfg, &mut p, &g);
        assert!((p.data()[0] - 0.9).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_leaves_param_fixed() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::filled(&[3], 2.5);
        let g = Tensor::zeros(&[3]);
        let mut st = AdamState::new(3);
        for _ in 0..5 {
            st.step(&cfg, &mut p, &g);
        }
        assert!(p.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (x - 3)^2 from x = 0
        let cfg = AdamConfig {
            lr: 0.05,
            ..AdamConfig::default()
        };
        let mut p = Tensor::zeros(&[1]);
        let mut st = AdamState::new(1);
        for _ in 0..2000 {
            let x = p.data()[0];
            let g = Tensor::filled(&[1], 2.0 * (x - 3.0));
            st.step(&cfg, &mut p, &g);
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "got {}", p.data()[0]);
    }
}
