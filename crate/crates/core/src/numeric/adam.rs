use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for an ordered list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
    ) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step,
            m,
            v,
        }
    }

    /// One bias-corrected Adam update applied in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len(), self.m.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_does_not_move() {
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut s = AdamState::new(0.1, &p);
        s.step(&mut p, &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn descends_on_square() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(0.1, &p);
        let g = Tensor::scalar(2.0 * p[0].item().unwrap());
        s.step(&mut p, &[g]).unwrap();
        assert!(p[0].item().unwrap() < 1.0);
    }

    #[test]
    fn zero_lr_is_bit_identical() {
        let init = Tensor::vector(vec![0.123456789, -7.5, 1e-9]);
        let mut p = vec![init.clone()];
        let mut s = AdamState::new(0.0, &p);
        for k in 0..5 {
            s.step(&mut p, &[Tensor::vector(vec![k as f64, -1.0, 3.0])]).unwrap();
        }
        assert_eq!(p[0], init);
        assert_eq!(s.step_count(), 5);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(0.1, &p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }

    /// Independent scalar Adam written straight from the update rule.
    fn reference_trace(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w -= lr * mh / (vh.sqrt() + eps);
            out.push(w);
        }
        out
    }

    #[test]
    fn matches_reference_trace() {
        let expected = reference_trace(1.0, 0.1, 10);
        let mut p = vec![Tensor::scalar(1.0)];
        let mut s = AdamState::new(0.1, &p);
        for want in expected {
            let g = Tensor::scalar(2.0 * p[0].item().unwrap());
            s.step(&mut p, &[g]).unwrap();
            assert!((p[0].item().unwrap() - want).abs() < 1e-12);
        }
    }
}
