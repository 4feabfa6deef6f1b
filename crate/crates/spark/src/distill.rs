//! Stage-wise annealed construction of mixed hard/soft targets.
//!
//! Rounds `1..=warm_rounds` use pure hard labels (alpha = tau = 1). After
//! warm-up the mixing coefficient follows a cosine anneal from `alpha_init`
//! down to `alpha_final` while the temperature rises linearly from
//! `tau_init` to `tau_final`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SparkError};
use crate::model::softmax_rows;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillSchedule {
    pub alpha_init: f64,
    pub alpha_final: f64,
    pub tau_init: f64,
    pub tau_final: f64,
    pub warm_rounds: usize,
    pub total_rounds: usize,
}

impl DistillSchedule {
    /// Defaults: alpha 1.0 -> 0.3, tau 1.0 -> 3.0, warm-up = ceil(0.2 R).
    /// alpha_init = tau_init = 1 keeps the schedule continuous at the
    /// warm-up boundary.
    pub fn defaults(total_rounds: usize) -> Self {
        Self {
            alpha_init: 1.0,
            alpha_final: 0.3,
            tau_init: 1.0,
            tau_final: 3.0,
            warm_rounds: (0.2 * total_rounds as f64).ceil() as usize,
            total_rounds,
        }
    }

    /// Hard labels only in every round, regardless of the anneal knobs.
    pub fn warm_forever(total_rounds: usize) -> Self {
        Self {
            alpha_init: 1.0,
            alpha_final: 1.0,
            tau_init: 1.0,
            tau_final: 1.0,
            warm_rounds: total_rounds,
            total_rounds,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // warm_rounds == total_rounds is the "warm forever" ablation
        if self.warm_rounds > self.total_rounds {
            return Err(SparkError::config(format!(
                "warm_rounds {} exceeds total_rounds {}",
                self.warm_rounds, self.total_rounds
            )));
        }
        for (name, v) in [("alpha_init", self.alpha_init), ("alpha_final", self.alpha_final)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(SparkError::config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        for (name, v) in [("tau_init", self.tau_init), ("tau_final", self.tau_final)] {
            if v < 1.0 {
                return Err(SparkError::config(format!("{name} = {v} must be >= 1")));
            }
        }
        if self.alpha_final > self.alpha_init {
            return Err(SparkError::config("alpha_final must not exceed alpha_init".to_string()));
        }
        if self.tau_final < self.tau_init {
            return Err(SparkError::config("tau_final must not be below tau_init".to_string()));
        }
        Ok(())
    }

    /// `(alpha, tau)` for round `k` (1-based, `1 <= k <= total_rounds`).
    pub fn at(&self, round: usize) -> Result<(f64, f64)> {
        if round < 1 || round > self.total_rounds {
            return Err(SparkError::contract(format!(
                "round {round} outside [1, {}]",
                self.total_rounds
            )));
        }
        if round <= self.warm_rounds {
            return Ok((1.0, 1.0));
        }
        let p = (round - self.warm_rounds) as f64 / (self.total_rounds - self.warm_rounds) as f64;
        let alpha = self.alpha_final
            + 0.5 * (self.alpha_init - self.alpha_final) * (1.0 + (std::f64::consts::PI * p).cos());
        let tau = self.tau_init + (self.tau_final - self.tau_init) * p;
        Ok((alpha, tau))
    }
}

/// Mixed target matrix with the schedule values used to build it.
#[derive(Clone, Debug)]
pub struct TargetMatrix {
    pub rows: Array2<f64>,
    pub alpha_used: f64,
    pub tau_used: f64,
}

/// Row-wise temperature-scaled softmax (max-subtracted).
pub fn soft_labels(logits_agg: &ArrayView2<f64>, tau: f64) -> Result<Array2<f64>> {
    if tau < 1.0 {
        return Err(SparkError::contract(format!("temperature {tau} must be >= 1")));
    }
    let scaled = logits_agg.mapv(|v| v / tau);
    Ok(softmax_rows(&scaled.view()))
}

/// `Y = alpha * Y_hard + (1 - alpha) * softmax(z_agg / tau)` at round `k`.
pub fn build_target(
    hard: &ArrayView2<f64>,
    logits_agg: &ArrayView2<f64>,
    sched: &DistillSchedule,
    round: usize,
) -> Result<TargetMatrix> {
    if hard.dim() != logits_agg.dim() {
        return Err(SparkError::contract(format!(
            "hard labels {:?} and logits {:?} have different shapes",
            hard.dim(),
            logits_agg.dim()
        )));
    }
    for (i, row) in hard.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != row.len() - 1 {
            return Err(SparkError::contract(format!("hard row {i} is not one-hot")));
        }
    }
    let (alpha, tau) = sched.at(round)?;
    let rows = if round <= sched.warm_rounds {
        hard.to_owned()
    } else {
        let soft = soft_labels(logits_agg, tau)?;
        hard.mapv(|v| v * alpha) + soft.mapv(|v| v * (1.0 - alpha))
    };
    Ok(TargetMatrix { rows, alpha_used: alpha, tau_used: tau })
}
