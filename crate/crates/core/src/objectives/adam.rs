//! Adam with bias correction, specialized for a fixed parameter list.

use super::{ObjectiveError, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, aligned index-for-index with the
/// parameter list the state was built from.
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over all params. Gradients are read, applied, and then
    /// cleared so the next tape starts from zero. Frozen params (those no
    /// longer requiring gradients) are skipped entirely: their moments stay
    /// untouched and their values do not move.
    pub fn step(&mut self, params: &[Tensor], lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(ObjectiveError::BadLearningRate(lr));
        }
        if params.len() != self.m.len() {
            return Err(ObjectiveError::StateMismatch { expected: self.m.len(), got: params.len() });
        }
        self.step += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            if p.len() != self.m[i].len() {
                return Err(ObjectiveError::StateMismatch {
                    expected: self.m[i].len(),
                    got: p.len(),
                });
            }
            if !p.requires_grad() {
                continue;
            }
            let grad = p.grad_or_zeros();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut finite = true;
            p.update_data(|data| {
                for (j, g) in grad.iter().enumerate() {
                    m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                    v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = m[j] / bias1;
                    let v_hat = v[j] / bias2;
                    data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    finite &= data[j].is_finite();
                }
            });
            if !finite {
                return Err(ObjectiveError::NonFiniteUpdate);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
