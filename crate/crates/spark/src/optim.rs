//! Nesterov-style momentum on flattened weight vectors.

use ndarray::Array1;

use crate::error::{Result, SparkError};

/// Velocity buffer, same length as the flattened weight vector.
#[derive(Clone, Debug)]
pub struct MomentumState {
    pub velocity: Array1<f64>,
    pub mu: f64,
}

impl MomentumState {
    pub fn new(dim: usize, mu: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&mu) {
            return Err(SparkError::config(format!(
                "momentum coefficient {mu} outside [0, 1)"
            )));
        }
        Ok(Self { velocity: Array1::zeros(dim), mu })
    }

    /// Applies `v' = mu v + delta; w' = w + mu v' + delta` in place.
    ///
    /// With `mu = 0` this reduces exactly to `w' = w + delta`.
    pub fn step(&mut self, weights: &mut Array1<f64>, delta: &Array1<f64>) -> Result<()> {
        if weights.len() != self.velocity.len() || delta.len() != self.velocity.len() {
            return Err(SparkError::contract(format!(
                "momentum dims disagree: weights {}, delta {}, velocity {}",
                weights.len(),
                delta.len(),
                self.velocity.len()
            )));
        }
        self.velocity *= self.mu;
        self.velocity += delta;
        weights.scaled_add(self.mu, &self.velocity);
        *weights += delta;
        Ok(())
    }
}
