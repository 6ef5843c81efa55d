use serde::{Deserialize, Serialize};

use super::{check_len, NnError};

/// Adam optimizer state for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Standard defaults `β1 = 0.9`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn new(shapes: &[usize], learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one bias-corrected Adam descent step (`p ← p − lr·m̂/(√v̂ + ε)`).
    ///
    /// Gradients are checked for finiteness before anything is touched.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<(), NnError> {
        check_len("adam tensor count", self.first_moment.len(), params.len())?;
        check_len("adam gradient count", self.first_moment.len(), grads.len())?;
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            check_len("adam tensor", m.len(), p.len())?;
            check_len("adam gradient", m.len(), g.len())?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("gradient"));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
