use super::tensor::Tensor;
use crate::error::{dim_err, numeric_err, Result};

/// Adam optimizer with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update. Gradients are checked for NaN/inf before any
    /// parameter or moment is touched, so a failing step leaves no trace.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(dim_err!(
                "adam tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(dim_err!("adam parameter {} changed shape", i));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(numeric_err!("non-finite gradient for parameter {}", i));
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
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
