//! Adam with bias correction, applied in place to tensors carrying grads.

use super::{Tensor, TensorError};

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self, TensorError> {
        Self::with_hyperparams(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparams(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self, TensorError> {
        if lr <= 0.0 {
            return Err(TensorError::Config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        Ok(Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over a fixed-order parameter list. Parameters without a
    /// populated grad are left unchanged (their moments still decay lazily
    /// from zero, which is a no-op).
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, p) in params.into_iter().enumerate() {
            if self.m.len() <= idx {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
            let g = match &p.grad {
                Some(g) => g,
                None => continue,
            };
            debug_assert_eq!(g.len(), p.numel());
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive_lr() {
        assert!(Adam::new(0.0).is_err());
        assert!(Adam::new(-0.1).is_err());
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::scalar(1.0);
        p.grad = Some(vec![1.0]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(std::iter::once(&mut p));
        // bias-corrected first step is lr·g/(|g|+eps) ≈ lr
        assert!((p.data[0] - 0.9).abs() < 1e-6, "got {}", p.data[0]);
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut p = Tensor::scalar(2.5);
        p.grad = Some(vec![0.0]);
        let mut opt = Adam::new(0.1).unwrap();
        opt.step(std::iter::once(&mut p));
        assert_eq!(p.data[0], 2.5);
    }

    #[test]
    fn quadratic_descent_converges() {
        // f(w) = (w-3)^2, df/dw = 2(w-3)
        let mut w = Tensor::scalar(0.0);
        let mut opt = Adam::new(0.3).unwrap();
        for _ in 0..100 {
            let g = 2.0 * (w.data[0] - 3.0);
            w.grad = Some(vec![g]);
            opt.step(std::iter::once(&mut w));
        }
        assert!((w.data[0] - 3.0).abs() < 1e-2, "w = {}", w.data[0]);
    }
}
