use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::{Scalar, Tensor};

/// Linear beta schedule of a discrete diffusion process. Timesteps are
/// 1-based: `alpha_bar(1)` is the first noising step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self, ModelError> {
        if steps == 0 {
            return Err(ModelError::BadConfig("diffusion steps must be at least 1".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ModelError::BadConfig(format!(
                "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut acc = 1.0;
        let alpha_bars = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check_t(&self, t: usize) -> Result<(), ModelError> {
        if t == 0 || t > self.steps() {
            return Err(ModelError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Cumulative product of `1 - beta` up to and including step `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, ModelError> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps`.
    pub fn add_noise<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<Tensor<T>, ModelError> {
        if x0.shape() != eps.shape() {
            return Err(ModelError::ShapeMismatch {
                what: "noise",
                expected: x0.shape().to_vec(),
                found: eps.shape().to_vec(),
            });
        }
        let ab = self.alpha_bar(t)?;
        let (a, s) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
        let data = x0.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
        Ok(Tensor::new(x0.shape().to_vec(), data)?)
    }
}
