//! Round-wise client selection: per-client utility terms, the selection
//! objective with its log-det diversity bonus and correlated-failure
//! penalty, Algorithm-style greedy selection, a brute-force oracle, and the
//! covariance trackers behind the quadratic terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelSnapshot;
use crate::datasets::ClientPartition;
use crate::error::{Error, Result};
use crate::learning::{mean_cross_entropy, ModelParams};
use crate::linalg::SquareMatrix;
use crate::parallel::{map_slice, ExecMode};
use crate::rng::standard_normal;

/// Scheduler knobs. Utility weights are scale-free because every term is
/// max-normalized per round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub alpha_value: f64,
    pub alpha_novelty: f64,
    pub alpha_fairness: f64,
    pub lambda_channel: f64,
    pub lambda_energy: f64,
    pub lambda_privacy: f64,
    /// Log-det diversity bonus weight.
    pub rho_diversity: f64,
    /// Correlated-failure penalty weight.
    pub rho_failure: f64,
    /// Max clients per round.
    pub k_max: usize,
    pub t_max_s: f64,
    pub eps_max: f64,
    /// Shrinkage toward the identity applied when the trackers are read.
    pub shrinkage_gamma: f64,
    pub sketch_dim: usize,
    /// EMA coefficient for both covariance trackers.
    pub beta_sigma: f64,
    /// Probe-subset size for the update-value term.
    pub probe_size: usize,
    /// Clip applied to the privacy-proxy update norm.
    pub privacy_clip_norm: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            alpha_value: 1.0,
            alpha_novelty: 1.0,
            alpha_fairness: 0.5,
            lambda_channel: 0.5,
            lambda_energy: 0.5,
            lambda_privacy: 0.1,
            rho_diversity: 0.5,
            rho_failure: 0.5,
            k_max: 2,
            t_max_s: 10.0,
            eps_max: 0.9,
            shrinkage_gamma: 0.1,
            sketch_dim: 16,
            beta_sigma: 0.2,
            probe_size: 64,
            privacy_clip_norm: 10.0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha_value", self.alpha_value),
            ("alpha_novelty", self.alpha_novelty),
            ("alpha_fairness", self.alpha_fairness),
            ("lambda_channel", self.lambda_channel),
            ("lambda_energy", self.lambda_energy),
            ("lambda_privacy", self.lambda_privacy),
            ("rho_diversity", self.rho_diversity),
            ("rho_failure", self.rho_failure),
        ];
        for (name, v) in nonneg {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.k_max < 1 {
            return Err(Error::InvalidConfig("k_max must be >= 1".into()));
        }
        if !(0.0 < self.shrinkage_gamma && self.shrinkage_gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "shrinkage_gamma must be in (0,1], got {}",
                self.shrinkage_gamma
            )));
        }
        if self.sketch_dim < 1 {
            return Err(Error::InvalidConfig("sketch_dim must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.beta_sigma) {
            return Err(Error::InvalidConfig("beta_sigma must be in [0,1]".into()));
        }
        if self.probe_size < 1 {
            return Err(Error::InvalidConfig("probe_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-client participation memory feeding the novelty, fairness, and
/// privacy terms.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParticipationState {
    pub last_selected_round: Option<usize>,
    /// Train-buffer label histogram at the last delivered participation.
    pub hist_at_participation: Option<Vec<f64>>,
    /// L2 norm of the last delivered (reconstructed) update.
    pub last_delivered_norm: Option<f64>,
}

/// Divisors used for the per-round max-normalization, recorded so a run can
/// be reproduced from its logs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityDivisors {
    pub value: f64,
    pub novelty: f64,
    pub fairness: f64,
    pub channel_cost: f64,
    pub energy_cost: f64,
    pub privacy: f64,
}

/// Per-client utility terms, each max-normalized into [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityTerms {
    pub value: Vec<f64>,
    pub novelty: Vec<f64>,
    pub fairness: Vec<f64>,
    pub channel_cost: Vec<f64>,
    pub energy_cost: Vec<f64>,
    pub privacy: Vec<f64>,
    pub divisors: UtilityDivisors,
}

impl UtilityTerms {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Modular objective coefficient for one client.
    pub fn modular_coefficient(&self, i: usize, cfg: &SchedulerConfig) -> f64 {
        cfg.alpha_value * self.value[i]
            + cfg.alpha_novelty * self.novelty[i]
            + cfg.alpha_fairness * self.fairness[i]
            - cfg.lambda_channel * self.channel_cost[i]
            - cfg.lambda_energy * self.energy_cost[i]
            - cfg.lambda_privacy * self.privacy[i]
    }

    /// Build terms directly from modular utility values (test and oracle
    /// construction path: value carries everything, other terms zero).
    pub fn from_raw_value(value: Vec<f64>) -> UtilityTerms {
        let n = value.len();
        UtilityTerms {
            value,
            novelty: vec![0.0; n],
            fairness: vec![0.0; n],
            channel_cost: vec![0.0; n],
            energy_cost: vec![0.0; n],
            privacy: vec![0.0; n],
            divisors: UtilityDivisors {
                value: 1.0,
                novelty: 1.0,
                fairness: 1.0,
                channel_cost: 1.0,
                energy_cost: 1.0,
                privacy: 1.0,
            },
        }
    }
}

fn max_normalize(raw: Vec<f64>) -> (Vec<f64>, f64) {
    let max = raw.iter().cloned().fold(0.0f64, f64::max);
    let divisor = if max > 0.0 { max } else { 1.0 };
    (raw.into_iter().map(|v| v / divisor).collect(), divisor)
}

/// Total-variation distance between two histograms.
fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Inputs assembled by the harness before utility estimation.
pub struct UtilityInputs<'a> {
    pub partitions: &'a [ClientPartition],
    pub snapshots: &'a [ChannelSnapshot],
    pub global_model: &'a ModelParams,
    pub participation: &'a [ParticipationState],
    /// Current round index, 0-based.
    pub round: usize,
    pub payload_bits: u64,
    /// Expected round energy per client (train + expected tx + rx).
    pub expected_energy_j: &'a [f64],
    /// Remaining budget per client.
    pub budget_j: &'a [f64],
    pub num_classes: usize,
}

/// Estimate the six utility terms for every client and max-normalize each
/// across clients.
pub fn estimate_utilities(inputs: &UtilityInputs<'_>, cfg: &SchedulerConfig) -> UtilityTerms {
    let n = inputs.partitions.len();
    let mut value_raw = Vec::with_capacity(n);
    let mut novelty_raw = Vec::with_capacity(n);
    let mut fairness_raw = Vec::with_capacity(n);
    let mut channel_raw = Vec::with_capacity(n);
    let mut energy_raw = Vec::with_capacity(n);
    let mut privacy_raw = Vec::with_capacity(n);

    for i in 0..n {
        let part = &inputs.partitions[i];
        let snap = &inputs.snapshots[i];
        let state = &inputs.participation[i];

        // Update value: global-model loss on a fixed probe prefix of the
        // client buffer (higher loss means the client has more to teach).
        let probe_len = cfg.probe_size.min(part.train.len());
        value_raw.push(mean_cross_entropy(inputs.global_model, &part.train[..probe_len]));

        // Data novelty: TV distance between the current label histogram and
        // the histogram at the last delivered participation.
        let hist = part.label_histogram(inputs.num_classes);
        novelty_raw.push(match &state.hist_at_participation {
            Some(prev) => tv_distance(&hist, prev),
            None => 1.0,
        });

        // Fairness debt: rounds since last selection; never selected counts
        // from before round zero.
        fairness_raw.push(match state.last_selected_round {
            Some(r) => (inputs.round - r) as f64,
            None => (inputs.round + 1) as f64,
        });

        // Channel cost: expected airtime of the planned payload.
        channel_raw.push(inputs.payload_bits as f64 * snap.rho / snap.rate_bits_per_s);

        // Energy cost: fraction of the remaining budget, capped at 1.
        let budget = inputs.budget_j[i];
        energy_raw.push(if budget > 0.0 {
            (inputs.expected_energy_j[i] / budget).min(1.0)
        } else {
            1.0
        });

        // Privacy proxy: clipped norm of the last delivered update.
        privacy_raw.push(
            state
                .last_delivered_norm
                .map(|norm| norm.min(cfg.privacy_clip_norm))
                .unwrap_or(0.0),
        );
    }

    let (value, d_value) = max_normalize(value_raw);
    let (novelty, d_novelty) = max_normalize(novelty_raw);
    let (fairness, d_fairness) = max_normalize(fairness_raw);
    let (channel_cost, d_channel) = max_normalize(channel_raw);
    let (energy_cost, d_energy) = max_normalize(energy_raw);
    let (privacy, d_privacy) = max_normalize(privacy_raw);
    UtilityTerms {
        value,
        novelty,
        fairness,
        channel_cost,
        energy_cost,
        privacy,
        divisors: UtilityDivisors {
            value: d_value,
            novelty: d_novelty,
            fairness: d_fairness,
            channel_cost: d_channel,
            energy_cost: d_energy,
            privacy: d_privacy,
        },
    }
}

/// EMA trackers for update-direction similarity and correlated link
/// failures. Raw EMA state is stored; the shrinkage transform
/// (1-gamma) * M + gamma * I is applied when the matrices are read, which is
/// what the selection objective and the PSD invariant operate on.
#[derive(Debug, Clone)]
pub struct CovarianceTrackers {
    /// Raw EMA of pairwise cosine similarity between sketched update
    /// directions; diagonal fixed at 1.
    pub sigma_delta: SquareMatrix,
    /// Raw EMA covariance of link-failure indicators.
    pub sigma_c: SquareMatrix,
    /// EMA mean of the failure indicators (centering state for sigma_c).
    pub failure_mean: Vec<f64>,
    /// Fixed random projection, sketch_dim rows of length d, drawn once per
    /// scenario from the master seed.
    pub sketch: Vec<Vec<f64>>,
    pub beta_sigma: f64,
    pub gamma: f64,
}

impl CovarianceTrackers {
    pub fn new(
        num_clients: usize,
        model_dim: usize,
        cfg: &SchedulerConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / (cfg.sketch_dim as f64).sqrt();
        let sketch = (0..cfg.sketch_dim)
            .map(|_| (0..model_dim).map(|_| scale * standard_normal(rng)).collect())
            .collect();
        CovarianceTrackers {
            sigma_delta: SquareMatrix::identity(num_clients),
            sigma_c: SquareMatrix::zeros(num_clients),
            failure_mean: vec![0.0; num_clients],
            sketch,
            beta_sigma: cfg.beta_sigma,
            gamma: cfg.shrinkage_gamma,
        }
    }

    pub fn num_clients(&self) -> usize {
        self.failure_mean.len()
    }

    fn sketch_vec(&self, delta: &[f64]) -> Vec<f64> {
        self.sketch
            .iter()
            .map(|row| row.iter().zip(delta).map(|(p, d)| p * d).sum())
            .collect()
    }

    /// Shrunk diversity matrix consumed by the objective. The raw diagonal
    /// is 1, so shrinkage keeps it at 1.
    pub fn shrunk_sigma_delta(&self) -> SquareMatrix {
        self.shrunk(&self.sigma_delta)
    }

    pub fn shrunk_sigma_c(&self) -> SquareMatrix {
        self.shrunk(&self.sigma_c)
    }

    fn shrunk(&self, m: &SquareMatrix) -> SquareMatrix {
        let n = m.n();
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                let shrunk = (1.0 - self.gamma) * m.get(i, j) + if i == j { self.gamma } else { 0.0 };
                out.set(i, j, shrunk);
            }
        }
        out
    }

    /// EMA update from this round's delivered (reconstructed) deltas and the
    /// per-client link-failure indicators. Zero-norm sketches leave their
    /// pair entries unchanged.
    pub fn update(&mut self, delivered: &[(usize, &[f64])], failures: &[bool]) {
        let beta = self.beta_sigma;
        let sketched: Vec<(usize, Option<Vec<f64>>)> = delivered
            .iter()
            .map(|&(client, delta)| {
                let y = self.sketch_vec(delta);
                let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm < 1e-12 {
                    (client, None)
                } else {
                    (client, Some(y.into_iter().map(|v| v / norm).collect()))
                }
            })
            .collect();
        for (a, (ci, yi)) in sketched.iter().enumerate() {
            let Some(yi) = yi else { continue };
            for (cj, yj) in sketched.iter().skip(a + 1) {
                let Some(yj) = yj else { continue };
                let cos: f64 = yi.iter().zip(yj).map(|(x, y)| x * y).sum();
                let prev = self.sigma_delta.get(*ci, *cj);
                self.sigma_delta.set_sym(*ci, *cj, (1.0 - beta) * prev + beta * cos);
            }
        }

        // Failure covariance: center on the previous mean, then move the mean.
        let n = self.num_clients();
        debug_assert_eq!(failures.len(), n);
        let centered: Vec<f64> = failures
            .iter()
            .zip(&self.failure_mean)
            .map(|(&f, &m)| (if f { 1.0 } else { 0.0 }) - m)
            .collect();
        for i in 0..n {
            for j in i..n {
                let prev = self.sigma_c.get(i, j);
                self.sigma_c
                    .set_sym(i, j, (1.0 - beta) * prev + beta * centered[i] * centered[j]);
            }
        }
        for (m, &f) in self.failure_mean.iter_mut().zip(failures) {
            *m = (1.0 - beta) * *m + beta * if f { 1.0 } else { 0.0 };
        }
    }
}

/// Precomputed objective context: modular coefficients plus shrunk tracker
/// views, so repeated evaluations don't rebuild matrices.
pub struct ObjectiveContext {
    pub modular: Vec<f64>,
    pub sigma_delta: SquareMatrix,
    pub sigma_c: SquareMatrix,
    pub rho_diversity: f64,
    pub rho_failure: f64,
}

impl ObjectiveContext {
    pub fn new(terms: &UtilityTerms, cfg: &SchedulerConfig, trackers: &CovarianceTrackers) -> Self {
        let modular = (0..terms.len())
            .map(|i| terms.modular_coefficient(i, cfg))
            .collect();
        ObjectiveContext {
            modular,
            sigma_delta: trackers.shrunk_sigma_delta(),
            sigma_c: trackers.shrunk_sigma_c(),
            rho_diversity: cfg.rho_diversity,
            rho_failure: cfg.rho_failure,
        }
    }

    /// Objective value and the raw (unscaled) log-det term for a set.
    pub fn evaluate(&self, set: &[usize]) -> Result<(f64, f64)> {
        if set.is_empty() {
            return Ok((0.0, 0.0));
        }
        let modular: f64 = set.iter().map(|&i| self.modular[i]).sum();
        let sub = self.sigma_delta.principal_submatrix(set);
        // PSD invariant on the shrunk submatrix: cholesky(sub + 1e-8 I)
        // succeeds exactly when the smallest eigenvalue is > -1e-8.
        let mut guard = sub.clone();
        for i in 0..guard.n() {
            let v = guard.get(i, i) + 1e-8;
            guard.set(i, i, v);
        }
        if guard.cholesky().is_none() {
            return Err(Error::InvariantBreach(
                "diversity submatrix lost positive semidefiniteness".into(),
            ));
        }
        let log_det = sub.log_det_identity_plus()?;
        let failure_penalty = self.sigma_c.principal_submatrix(set).sum();
        Ok((
            modular + self.rho_diversity * log_det - self.rho_failure * failure_penalty,
            log_det,
        ))
    }
}

/// Round-wise selection objective for an explicit client set.
pub fn selection_objective(
    set: &[usize],
    terms: &UtilityTerms,
    cfg: &SchedulerConfig,
    trackers: &CovarianceTrackers,
) -> Result<f64> {
    Ok(ObjectiveContext::new(terms, cfg, trackers).evaluate(set)?.0)
}

/// Greedy selection trace: chosen clients in order, their marginal
/// objective gains, and the raw log-det component of each gain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreedySelection {
    pub order: Vec<usize>,
    pub marginal_gains: Vec<f64>,
    pub logdet_gains: Vec<f64>,
}

/// Greedily add the feasible client with the largest marginal gain (ties to
/// the lowest id) until K clients are chosen, nothing feasible remains, or
/// the best gain is nonpositive. Candidate gains within one step may be
/// evaluated in parallel; the argmax reduction is sequential so the result
/// is identical in both modes.
pub fn greedy_select(
    terms: &UtilityTerms,
    cfg: &SchedulerConfig,
    trackers: &CovarianceTrackers,
    feasible: &[bool],
    exec: ExecMode,
) -> Result<GreedySelection> {
    let ctx = ObjectiveContext::new(terms, cfg, trackers);
    greedy_select_with_context(&ctx, cfg.k_max, feasible, exec)
}

/// Greedy on a prebuilt context (also used by the pure log-det trace in the
/// acceptance checks).
pub fn greedy_select_with_context(
    ctx: &ObjectiveContext,
    k_max: usize,
    feasible: &[bool],
    exec: ExecMode,
) -> Result<GreedySelection> {
    let n = feasible.len();
    let mut order: Vec<usize> = Vec::new();
    let mut marginal_gains = Vec::new();
    let mut logdet_gains = Vec::new();
    let mut current_obj = 0.0;
    let mut current_logdet = 0.0;
    while order.len() < k_max {
        let candidates: Vec<usize> =
            (0..n).filter(|&i| feasible[i] && !order.contains(&i)).collect();
        if candidates.is_empty() {
            break;
        }
        let evals: Vec<Result<(f64, f64)>> = map_slice(exec, &candidates, |&i| {
            let mut with = order.clone();
            with.push(i);
            ctx.evaluate(&with)
        });
        let mut best: Option<(usize, f64, f64)> = None;
        for (&cand, eval) in candidates.iter().zip(evals) {
            let (obj, logdet) = eval?;
            let gain = obj - current_obj;
            let better = match best {
                None => true,
                Some((_, best_gain, _)) => gain > best_gain,
            };
            if better {
                best = Some((cand, gain, logdet));
            }
        }
        let (chosen, gain, logdet) = best.expect("candidates nonempty");
        if gain <= 0.0 {
            break;
        }
        marginal_gains.push(gain);
        logdet_gains.push(logdet - current_logdet);
        current_obj += gain;
        current_logdet = logdet;
        order.push(chosen);
    }
    Ok(GreedySelection {
        order,
        marginal_gains,
        logdet_gains,
    })
}

/// Exhaustive oracle over all feasible subsets of size <= K; ties go to the
/// lexicographically smallest sorted set. Limited to 16 clients.
pub fn brute_force_select(
    terms: &UtilityTerms,
    cfg: &SchedulerConfig,
    trackers: &CovarianceTrackers,
    feasible: &[bool],
) -> Result<Vec<usize>> {
    let n = feasible.len();
    if n > 16 {
        return Err(Error::EnumerationTooLarge(n));
    }
    let ctx = ObjectiveContext::new(terms, cfg, trackers);
    let feasible_ids: Vec<usize> = (0..n).filter(|&i| feasible[i]).collect();
    let mut best_set: Vec<usize> = Vec::new();
    let mut best_obj = 0.0; // empty set
    for mask in 0u32..(1u32 << feasible_ids.len()) {
        if (mask.count_ones() as usize) > cfg.k_max {
            continue;
        }
        let set: Vec<usize> = feasible_ids
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &id)| id)
            .collect();
        let (obj, _) = ctx.evaluate(&set)?;
        // Ties go to the lexicographically smallest sorted set; the empty
        // incumbent compares smallest of all, so nonpositive sets never
        // displace it.
        if obj > best_obj || (obj == best_obj && set < best_set) {
            best_obj = obj;
            best_set = set;
        }
    }
    Ok(best_set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Window;
    use crate::rng::{stream, substream};

    fn simple_partition(client_id: usize, labels: &[usize], feature: f64) -> ClientPartition {
        let windows: Vec<Window> = labels
            .iter()
            .map(|&l| Window {
                features: vec![feature],
                label: l,
                subject: "s".into(),
                location: format!("loc{client_id}"),
            })
            .collect();
        ClientPartition {
            client_id,
            location: format!("loc{client_id}"),
            train: windows.clone(),
            heldout: windows,
            subject_disjoint: false,
        }
    }

    fn snapshot(client_id: usize, per: f64, rate: f64) -> ChannelSnapshot {
        ChannelSnapshot {
            client_id,
            loss_db: 60.0,
            per,
            rate_bits_per_s: rate,
            eta_bit_j: 1e-9,
            rho: 1.0 / (1.0 - per),
            link_failed_flag: false,
        }
    }

    fn trackers_for(n: usize, cfg: &SchedulerConfig) -> CovarianceTrackers {
        let mut rng = substream(1, &[stream::SKETCH]);
        CovarianceTrackers::new(n, 4, cfg, &mut rng)
    }

    #[test]
    fn unchanged_buffer_after_participation_has_zero_novelty() {
        let cfg = SchedulerConfig::default();
        let parts = vec![simple_partition(0, &[0, 1], 0.5)];
        let snaps = vec![snapshot(0, 0.1, 1000.0)];
        let model = ModelParams::zeros(1, 2);
        let hist = parts[0].label_histogram(2);
        let participation = vec![ParticipationState {
            last_selected_round: Some(4),
            hist_at_participation: Some(hist),
            last_delivered_norm: Some(0.2),
        }];
        let terms = estimate_utilities(
            &UtilityInputs {
                partitions: &parts,
                snapshots: &snaps,
                global_model: &model,
                participation: &participation,
                round: 5,
                payload_bits: 128,
                expected_energy_j: &[1e-6],
                budget_j: &[1.0],
                num_classes: 2,
            },
            &cfg,
        );
        assert_eq!(terms.novelty[0], 0.0);
        assert_eq!(terms.divisors.novelty, 1.0); // raw max was 0
    }

    #[test]
    fn identical_clients_normalize_to_one_or_zero() {
        let cfg = SchedulerConfig::default();
        let parts = vec![
            simple_partition(0, &[0, 1], 0.5),
            simple_partition(1, &[0, 1], 0.5),
        ];
        let snaps = vec![snapshot(0, 0.2, 1000.0), snapshot(1, 0.2, 1000.0)];
        let model = ModelParams::zeros(1, 2);
        let participation = vec![ParticipationState::default(), ParticipationState::default()];
        let terms = estimate_utilities(
            &UtilityInputs {
                partitions: &parts,
                snapshots: &snaps,
                global_model: &model,
                participation: &participation,
                round: 0,
                payload_bits: 128,
                expected_energy_j: &[1e-6, 1e-6],
                budget_j: &[1.0, 1.0],
                num_classes: 2,
            },
            &cfg,
        );
        for i in 0..2 {
            assert_eq!(terms.value[i], 1.0);
            assert_eq!(terms.novelty[i], 1.0);
            assert_eq!(terms.fairness[i], 1.0);
            assert_eq!(terms.channel_cost[i], 1.0);
            assert_eq!(terms.energy_cost[i], 1.0);
            assert_eq!(terms.privacy[i], 0.0); // raw max 0 -> divisor 1
        }
    }

    #[test]
    fn value_ordering_follows_probe_loss() {
        let cfg = SchedulerConfig::default();
        // Client 1's labels disagree with a model biased toward class 0.
        let parts = vec![
            simple_partition(0, &[0, 0, 0, 0], 1.0),
            simple_partition(1, &[1, 1, 1, 1], 1.0),
        ];
        let snaps = vec![snapshot(0, 0.1, 1000.0), snapshot(1, 0.1, 1000.0)];
        let mut model = ModelParams::zeros(1, 2);
        model.weights = vec![2.0, 0.5, -2.0, -0.5];
        let loss0 = mean_cross_entropy(&model, &parts[0].train);
        let loss1 = mean_cross_entropy(&model, &parts[1].train);
        assert!(loss1 > loss0);
        let participation = vec![ParticipationState::default(), ParticipationState::default()];
        let terms = estimate_utilities(
            &UtilityInputs {
                partitions: &parts,
                snapshots: &snaps,
                global_model: &model,
                participation: &participation,
                round: 0,
                payload_bits: 128,
                expected_energy_j: &[1e-6, 1e-6],
                budget_j: &[1.0, 1.0],
                num_classes: 2,
            },
            &cfg,
        );
        assert!(terms.value[1] > terms.value[0]);
        assert_eq!(terms.value[1], 1.0);
    }

    fn zero_modular_cfg(rho1: f64, rho2: f64) -> SchedulerConfig {
        SchedulerConfig {
            alpha_value: 0.0,
            alpha_novelty: 0.0,
            alpha_fairness: 0.0,
            lambda_channel: 0.0,
            lambda_energy: 0.0,
            lambda_privacy: 0.0,
            rho_diversity: rho1,
            rho_failure: rho2,
            k_max: 8,
            ..Default::default()
        }
    }

    #[test]
    fn empty_set_scores_zero() {
        let cfg = SchedulerConfig::default();
        let terms = UtilityTerms::from_raw_value(vec![1.0, 2.0]);
        let trackers = trackers_for(2, &cfg);
        assert_eq!(selection_objective(&[], &terms, &cfg, &trackers).unwrap(), 0.0);
    }

    #[test]
    fn identity_diversity_gives_three_ln_two() {
        let cfg = zero_modular_cfg(1.0, 0.0);
        let terms = UtilityTerms::from_raw_value(vec![0.0; 3]);
        // Fresh trackers have raw sigma_delta = I; shrinkage keeps it I.
        let trackers = trackers_for(3, &cfg);
        let obj = selection_objective(&[0, 1, 2], &terms, &cfg, &trackers).unwrap();
        assert!((obj - 3.0 * 2.0f64.ln()).abs() < 1e-12, "{obj}");
    }

    /// Independent oracle: evaluate the gated form ln det(I_N + Z S Z) over
    /// the full 3x3 matrix by the Sarrus determinant rule.
    fn gated_logdet_3(sigma: &SquareMatrix, z: [f64; 3]) -> f64 {
        let mut m = [[0.0f64; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = z[i] * sigma.get(i, j) * z[j] + if i == j { 1.0 } else { 0.0 };
            }
        }
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        det.ln()
    }

    #[test]
    fn objective_matches_explicit_gate_vector_form() {
        let cfg = SchedulerConfig {
            rho_diversity: 0.7,
            rho_failure: 0.3,
            k_max: 3,
            ..zero_modular_cfg(0.7, 0.3)
        };
        let mut trackers = trackers_for(3, &cfg);
        trackers.sigma_delta.set_sym(0, 1, 0.6);
        trackers.sigma_delta.set_sym(0, 2, -0.2);
        trackers.sigma_delta.set_sym(1, 2, 0.3);
        trackers.sigma_c.set(0, 0, 0.25);
        trackers.sigma_c.set(1, 1, 0.25);
        trackers.sigma_c.set(2, 2, 0.25);
        trackers.sigma_c.set_sym(0, 1, 0.2);
        trackers.sigma_c.set_sym(1, 2, -0.05);
        let mut terms = UtilityTerms::from_raw_value(vec![0.4, 0.9, 0.1]);
        terms.channel_cost = vec![0.3, 0.0, 0.6];
        let cfg = SchedulerConfig {
            alpha_value: 1.0,
            lambda_channel: 0.5,
            ..cfg
        };

        for set in [vec![0], vec![1, 2], vec![0, 1, 2], vec![0, 2]] {
            let got = selection_objective(&set, &terms, &cfg, &trackers).unwrap();
            let z = [
                set.contains(&0) as u8 as f64,
                set.contains(&1) as u8 as f64,
                set.contains(&2) as u8 as f64,
            ];
            let shrunk_delta = trackers.shrunk_sigma_delta();
            let shrunk_c = trackers.shrunk_sigma_c();
            let mut expect = cfg.rho_diversity * gated_logdet_3(&shrunk_delta, z);
            for i in 0..3 {
                expect += z[i] * (cfg.alpha_value * terms.value[i]
                    - cfg.lambda_channel * terms.channel_cost[i]);
                for j in 0..3 {
                    expect -= cfg.rho_failure * z[i] * z[j] * shrunk_c.get(i, j);
                }
            }
            assert!((got - expect).abs() < 1e-10, "set {set:?}: {got} vs {expect}");
        }
    }

    #[test]
    fn zero_rho_objective_is_exactly_the_modular_sum() {
        let mut cfg = zero_modular_cfg(0.0, 0.0);
        cfg.alpha_value = 1.0;
        cfg.lambda_energy = 0.25;
        let mut terms = UtilityTerms::from_raw_value(vec![0.7, 0.4, 0.9, 0.1]);
        terms.energy_cost = vec![0.2, 0.0, 0.8, 0.5];
        let trackers = trackers_for(4, &cfg);
        for set in [vec![0usize], vec![1, 3], vec![0, 1, 2, 3]] {
            let obj = selection_objective(&set, &terms, &cfg, &trackers).unwrap();
            let modular: f64 = set.iter().map(|&i| terms.modular_coefficient(i, &cfg)).sum();
            assert_eq!(obj, modular, "set {set:?}");
        }
    }

    #[test]
    fn greedy_with_k_one_is_argmax() {
        let cfg = SchedulerConfig {
            k_max: 1,
            rho_diversity: 0.0,
            rho_failure: 0.0,
            ..Default::default()
        };
        let terms = UtilityTerms::from_raw_value(vec![0.5, 0.9, 0.3]);
        let trackers = trackers_for(3, &cfg);
        let sel =
            greedy_select(&terms, &cfg, &trackers, &[true, true, true], ExecMode::Sequential)
                .unwrap();
        assert_eq!(sel.order, vec![1]);
        let brute = brute_force_select(&terms, &cfg, &trackers, &[true, true, true]).unwrap();
        assert_eq!(brute, vec![1]);
    }

    #[test]
    fn single_feasible_positive_client_selected() {
        let cfg = SchedulerConfig {
            rho_diversity: 0.0,
            rho_failure: 0.0,
            ..Default::default()
        };
        let terms = UtilityTerms::from_raw_value(vec![0.5, 0.9, 0.3]);
        let trackers = trackers_for(3, &cfg);
        let sel =
            greedy_select(&terms, &cfg, &trackers, &[false, false, true], ExecMode::Sequential)
                .unwrap();
        assert_eq!(sel.order, vec![2]);
    }

    #[test]
    fn greedy_stops_at_nonpositive_gain() {
        let mut cfg = zero_modular_cfg(0.0, 0.0);
        cfg.alpha_value = 1.0;
        cfg.lambda_channel = 1.0;
        let mut terms = UtilityTerms::from_raw_value(vec![0.2, 0.1]);
        terms.channel_cost = vec![0.9, 0.8]; // both net-negative
        let trackers = trackers_for(2, &cfg);
        let sel = greedy_select(&terms, &cfg, &trackers, &[true, true], ExecMode::Sequential)
            .unwrap();
        assert!(sel.order.is_empty());
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let cfg = SchedulerConfig {
            k_max: 1,
            rho_diversity: 0.0,
            rho_failure: 0.0,
            ..Default::default()
        };
        let terms = UtilityTerms::from_raw_value(vec![0.7, 0.7, 0.7]);
        let trackers = trackers_for(3, &cfg);
        let sel =
            greedy_select(&terms, &cfg, &trackers, &[true, true, true], ExecMode::Sequential)
                .unwrap();
        assert_eq!(sel.order, vec![0]);
    }

    #[test]
    fn brute_force_takes_all_when_modular_and_positive() {
        let cfg = SchedulerConfig {
            k_max: 4,
            rho_diversity: 0.0,
            rho_failure: 0.0,
            ..Default::default()
        };
        let terms = UtilityTerms::from_raw_value(vec![0.5, 0.9, 0.3, 0.1]);
        let trackers = trackers_for(4, &cfg);
        let brute =
            brute_force_select(&terms, &cfg, &trackers, &[true, true, true, true]).unwrap();
        assert_eq!(brute, vec![0, 1, 2, 3]);
    }

    #[test]
    fn brute_force_prefers_empty_over_negative() {
        let mut cfg = zero_modular_cfg(0.0, 0.0);
        cfg.alpha_value = 1.0;
        cfg.lambda_energy = 2.0;
        let mut terms = UtilityTerms::from_raw_value(vec![0.2]);
        terms.energy_cost = vec![0.9];
        let trackers = trackers_for(1, &cfg);
        let brute = brute_force_select(&terms, &cfg, &trackers, &[true]).unwrap();
        assert!(brute.is_empty());
    }

    #[test]
    fn brute_force_rejects_large_n() {
        let cfg = SchedulerConfig::default();
        let terms = UtilityTerms::from_raw_value(vec![0.0; 17]);
        let trackers = trackers_for(17, &cfg);
        assert!(matches!(
            brute_force_select(&terms, &cfg, &trackers, &[true; 17]).unwrap_err(),
            Error::EnumerationTooLarge(17)
        ));
    }

    /// Random PSD matrix with unit diagonal (Gram of random unit vectors).
    fn random_correlation(n: usize, rng: &mut impl Rng) -> SquareMatrix {
        let vecs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..n + 2).map(|_| standard_normal(rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        let mut m = SquareMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let dot: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| a * b).sum();
                m.set_sym(i, j, dot);
            }
        }
        m
    }

    #[test]
    fn greedy_reaches_submodular_bound_on_random_instances() {
        // 20 instances here; the acceptance suite runs 100.
        for seed in 0..20u64 {
            let mut rng = substream(seed, &[stream::POLICY, 99]);
            let n = 4 + (rng.gen::<u64>() % 3) as usize; // 4..=6
            let k = 2 + (rng.gen::<u64>() % 2) as usize;
            let cfg = SchedulerConfig {
                k_max: k,
                rho_diversity: 0.8,
                rho_failure: 0.0,
                ..zero_modular_cfg(0.8, 0.0)
            };
            let cfg = SchedulerConfig { alpha_value: 1.0, ..cfg };
            let values: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let terms = UtilityTerms::from_raw_value(values);
            let mut trackers = trackers_for(n, &cfg);
            trackers.sigma_delta = random_correlation(n, &mut rng);
            let feasible = vec![true; n];
            let greedy =
                greedy_select(&terms, &cfg, &trackers, &feasible, ExecMode::Sequential).unwrap();
            let brute = brute_force_select(&terms, &cfg, &trackers, &feasible).unwrap();
            let g_obj = selection_objective(&greedy.order, &terms, &cfg, &trackers).unwrap();
            let b_obj = selection_objective(&brute, &terms, &cfg, &trackers).unwrap();
            let bound = (1.0 - (-1.0f64).exp()) * b_obj;
            assert!(
                g_obj >= bound - 1e-9,
                "seed {seed}: greedy {g_obj} < (1-1/e) * {b_obj}"
            );
        }
    }

    #[test]
    fn correlated_pair_is_split_when_substitute_exists() {
        // Clients 0 and 1 fail together; client 2 is nearly as useful.
        let cfg = SchedulerConfig {
            alpha_value: 1.0,
            k_max: 2,
            rho_diversity: 0.0,
            rho_failure: 5.0,
            shrinkage_gamma: 0.01,
            ..zero_modular_cfg(0.0, 5.0)
        };
        let terms = UtilityTerms::from_raw_value(vec![1.0, 0.99, 0.97]);
        let mut trackers = trackers_for(3, &cfg);
        trackers.sigma_c.set_sym(0, 1, 1.0);
        let sel = greedy_select(&terms, &cfg, &trackers, &[true; 3], ExecMode::Sequential)
            .unwrap();
        assert_eq!(sel.order.len(), 2);
        assert!(
            !(sel.order.contains(&0) && sel.order.contains(&1)),
            "selected both correlated clients: {:?}",
            sel.order
        );
    }

    #[test]
    fn repeated_identical_deltas_drive_similarity_to_one() {
        let cfg = SchedulerConfig::default();
        let mut trackers = trackers_for(2, &cfg);
        let delta = vec![0.5, -0.25, 1.0, 0.0];
        for _ in 0..200 {
            trackers.update(&[(0, delta.as_slice()), (1, delta.as_slice())], &[false, false]);
        }
        assert!((trackers.sigma_delta.get(0, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_delta_leaves_pairs_unchanged() {
        let cfg = SchedulerConfig::default();
        let mut trackers = trackers_for(2, &cfg);
        trackers.sigma_delta.set_sym(0, 1, 0.4);
        let zero = vec![0.0; 4];
        let live = vec![1.0, 0.0, 0.0, 0.0];
        trackers.update(&[(0, zero.as_slice()), (1, live.as_slice())], &[false, false]);
        assert_eq!(trackers.sigma_delta.get(0, 1), 0.4);
    }

    #[test]
    fn independent_failures_leave_small_off_diagonals() {
        let cfg = SchedulerConfig {
            beta_sigma: 0.02,
            ..SchedulerConfig::default()
        };
        let mut trackers = trackers_for(3, &cfg);
        let mut rng = substream(31, &[stream::LINK_FLAG]);
        for _ in 0..3000 {
            let fails = [rng.gen::<f64>() < 0.5, rng.gen::<f64>() < 0.5, rng.gen::<f64>() < 0.5];
            trackers.update(&[], &fails);
        }
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert!(
                    trackers.sigma_c.get(i, j).abs() < 0.1,
                    "off-diagonal ({i},{j}) = {}",
                    trackers.sigma_c.get(i, j)
                );
            }
        }
    }

    #[test]
    fn shrunk_matrices_stay_psd_under_adversarial_updates() {
        let cfg = SchedulerConfig::default();
        let mut trackers = trackers_for(4, &cfg);
        let mut rng = substream(37, &[stream::SKETCH, 1]);
        for round in 0..500 {
            let deltas: Vec<Vec<f64>> =
                (0..4).map(|_| (0..4).map(|_| standard_normal(&mut rng)).collect()).collect();
            let pairs: Vec<(usize, &[f64])> = deltas
                .iter()
                .enumerate()
                .filter(|(i, _)| (round + i) % 3 != 0)
                .map(|(i, d)| (i, d.as_slice()))
                .collect();
            let fails = [
                rng.gen::<f64>() < 0.3,
                rng.gen::<f64>() < 0.3,
                rng.gen::<f64>() < 0.6,
                rng.gen::<f64>() < 0.6,
            ];
            trackers.update(&pairs, &fails);
            assert!(trackers.shrunk_sigma_delta().is_psd_within(1e-8), "round {round}");
            assert!(trackers.shrunk_sigma_c().is_psd_within(1e-8), "round {round}");
            assert!(trackers.shrunk_sigma_delta().is_symmetric(1e-9));
            assert!(trackers.shrunk_sigma_c().is_symmetric(1e-9));
        }
    }

    #[test]
    fn greedy_is_deterministic_and_mode_independent() {
        let cfg = SchedulerConfig {
            k_max: 3,
            ..Default::default()
        };
        let mut rng = substream(5, &[stream::POLICY]);
        let terms = UtilityTerms::from_raw_value((0..6).map(|_| rng.gen::<f64>()).collect());
        let mut trackers = trackers_for(6, &cfg);
        trackers.sigma_delta = random_correlation(6, &mut rng);
        let feasible = [true, true, false, true, true, true];
        let a = greedy_select(&terms, &cfg, &trackers, &feasible, ExecMode::Sequential).unwrap();
        let b = greedy_select(&terms, &cfg, &trackers, &feasible, ExecMode::Parallel).unwrap();
        let c = greedy_select(&terms, &cfg, &trackers, &feasible, ExecMode::Sequential).unwrap();
        assert_eq!(a.order, b.order);
        assert_eq!(a.order, c.order);
        assert_eq!(a.marginal_gains, b.marginal_gains);
        assert!(a.order.len() <= 3);
        assert!(a.order.iter().all(|&i| feasible[i]));
    }
}
