//! Update aggregation: plain FedAvg weights and inverse-propensity
//! reliability-aware weights, plus the propensity tracker they divide by.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learning::{ModelParams, UpdateDelta};

/// Moving-average selection probabilities with an EMA coefficient and a
/// floor that keeps the inverse-propensity divisor bounded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityTracker {
    pub pi: Vec<f64>,
    pub beta: f64,
    pub eps_pi: f64,
}

impl PropensityTracker {
    /// Cold start at the expected selection rate K/N, floored.
    pub fn new(num_clients: usize, k_per_round: usize, beta: f64, eps_pi: f64) -> Result<Self> {
        if !(0.0 < eps_pi && eps_pi <= 1.0) {
            return Err(Error::InvalidConfig(format!("eps_pi must be in (0,1], got {eps_pi}")));
        }
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::InvalidConfig(format!("beta must be in [0,1], got {beta}")));
        }
        let init = (k_per_round as f64 / num_clients.max(1) as f64).clamp(eps_pi, 1.0);
        Ok(PropensityTracker {
            pi: vec![init; num_clients],
            beta,
            eps_pi,
        })
    }

    /// EMA step over every client: selected clients move toward 1, the rest
    /// toward 0, floored at eps_pi. Exactly one update per client per round.
    pub fn update(&mut self, selected: &[usize]) {
        let mut is_selected = vec![false; self.pi.len()];
        for &i in selected {
            is_selected[i] = true;
        }
        for (pi, sel) in self.pi.iter_mut().zip(is_selected) {
            let target = if sel { 1.0 } else { 0.0 };
            *pi = ((1.0 - self.beta) * *pi + self.beta * target).max(self.eps_pi);
        }
    }
}

/// FedAvg weights a_i = n_i / sum n_j over the delivered clients.
pub fn fedavg_weights(delivered: &[(usize, usize)]) -> Result<Vec<(usize, f64)>> {
    if delivered.is_empty() {
        return Err(Error::NoUpdates);
    }
    let total: f64 = delivered.iter().map(|&(_, n)| n as f64).sum();
    Ok(delivered
        .iter()
        .map(|&(client, n)| (client, n as f64 / total))
        .collect())
}

/// Inverse-propensity reliability-aware weights:
/// a_i proportional to n_i * r_i / max(pi_i, eps_pi), normalized over the
/// delivered set. Undelivered clients get no weight at all.
pub fn bias_corrected_weights(
    delivered: &[(usize, usize, f64)],
    tracker: &PropensityTracker,
) -> Result<Vec<(usize, f64)>> {
    if delivered.is_empty() {
        return Err(Error::NoUpdates);
    }
    for &(client, _, r) in delivered {
        if !(0.0 < r && r <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "reliability for client {client} must be in (0,1], got {r}"
            )));
        }
    }
    let raw: Vec<f64> = delivered
        .iter()
        .map(|&(client, n, r)| n as f64 * r / tracker.pi[client].max(tracker.eps_pi))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(delivered
        .iter()
        .zip(raw)
        .map(|(&(client, _, _), w)| (client, w / total))
        .collect())
}

/// w' = w + sum a_i * delta_i. Weights must sum to 1 within 1e-9 and every
/// delta must match the model dimension.
pub fn apply_aggregate(
    model: &ModelParams,
    updates: &[(&UpdateDelta, f64)],
) -> Result<ModelParams> {
    let weight_sum: f64 = updates.iter().map(|&(_, a)| a).sum();
    if (weight_sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidWeights(weight_sum));
    }
    let d = model.d();
    let mut next = model.clone();
    for (update, a) in updates {
        if update.delta.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: update.delta.len(),
            });
        }
        for (w, delta) in next.weights.iter_mut().zip(&update.delta) {
            *w += a * delta;
        }
    }
    Ok(next)
}
