//! Adam with bias correction.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. Every parameter must carry a gradient; gradients are
    /// zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::InvalidArgument {
                op: "adam_step",
                msg: format!("state tracks {} parameters, store has {}", self.m.len(), params.len()),
            });
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(TensorError::MissingGrad(p.name.clone()));
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);

        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.as_mut().expect("checked above");
            let values = p.value.values_mut();
            for i in 0..values.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            grad.iter_mut().for_each(|x| *x = 0.0);
        }
        params.check_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::scalar(w));
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut adam = AdamState::new(&s, 1e-3);
        s.get_mut(0).grad = Some(vec![0.5]);
        adam.step(&mut s).unwrap();
        let w = s.get(0).value.values()[0];
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((w - expected).abs() < 1e-15);
        assert!(((1.0 - w) - 1e-3).abs() < 1e-10);
        assert_eq!(adam.steps(), 1);
        assert_eq!(s.get(0).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut s = scalar_store(0.7);
        let mut adam = AdamState::new(&s, 0.1);
        for _ in 0..10 {
            s.get_mut(0).grad = Some(vec![0.0]);
            adam.step(&mut s).unwrap();
        }
        assert_eq!(s.get(0).value.values()[0], 0.7);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut s = scalar_store(0.0);
        s.push("bias", Tensor::scalar(0.0));
        s.get_mut(0).grad = Some(vec![1.0]);
        let mut adam = AdamState::new(&s, 0.1);
        assert_eq!(adam.step(&mut s), Err(TensorError::MissingGrad("bias".into())));
        assert_eq!(adam.steps(), 0);
    }
}
