//! Adam optimizer with bias correction.

use serde::{Deserialize, Serialize};

use super::{DiffError, DiffResult};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    /// Fresh state with zeroed first/second moments matching `params`.
    pub fn new(lr: f64, params: &[Matrix]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
            v: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of all parameters in place.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> DiffResult<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(DiffError::Contract(format!(
                "adam state tracks {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for i in 0..params.len() {
            if params[i].shape() != self.m[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(DiffError::Dim {
                    op: "adam-step",
                    detail: format!(
                        "parameter {} is {}x{}, moment {}x{}, grad {}x{}",
                        i,
                        params[i].rows(),
                        params[i].cols(),
                        self.m[i].rows(),
                        self.m[i].cols(),
                        grads[i].rows(),
                        grads[i].cols()
                    ),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params[i].data_mut();
            let g = grads[i].data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
