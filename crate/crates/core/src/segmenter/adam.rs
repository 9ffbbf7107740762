use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, kept in `f64`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to `params` in place.
    ///
    /// Gradients are validated before any parameter is touched, so a rejected
    /// step leaves both parameters and state unchanged.
    pub fn update<T: Real, P: AsMut<Tensor<T>>>(
        &mut self,
        params: &mut [P],
        grads: &[Tensor<T>],
        config: &AdamConfig,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.as_mut().shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {i} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.as_mut().shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter tensor {i} at element {pos}"
                )));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &gi), mi), vi) in p
                .as_mut()
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let gi = gi.to_f64_lossy();
                *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
                *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                let delta = config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
                *w = T::from_f64_lossy(w.to_f64_lossy() - delta);
            }
        }
        Ok(())
    }
}

impl<T: Real> AsMut<Tensor<T>> for super::NamedTensor<T> {
    fn as_mut(&mut self) -> &mut Tensor<T> {
        &mut self.tensor
    }
}

impl<T: Real> AsMut<Tensor<T>> for Tensor<T> {
    fn as_mut(&mut self) -> &mut Tensor<T> {
        self
    }
}
