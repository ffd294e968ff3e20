//! Energy, latency, and memory accounting: per-client ledgers, per-round
//! feasibility against the scheduler caps, and the raw-streaming break-even
//! calculator.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelSnapshot, LinkBudget};
use crate::error::{Error, Result};

/// Which constraint a client failed, in check order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Per,
    Energy,
    Latency,
    Memory,
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConstraintKind::Per => "per",
            ConstraintKind::Energy => "energy",
            ConstraintKind::Latency => "latency",
            ConstraintKind::Memory => "memory",
        };
        f.write_str(s)
    }
}

/// Feasibility verdict plus the quantities it was judged on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeasibilityCheck {
    pub feasible: bool,
    /// First violated constraint in the order (per, energy, latency, memory).
    pub reason: Option<ConstraintKind>,
    /// Worst-case round energy: every packet retried retry_cap times.
    pub worst_case_energy_j: f64,
    /// Expected round energy using E_tx = eta * payload * rho.
    pub expected_energy_j: f64,
    pub latency_s: f64,
    pub memory_bits: u64,
}

/// Caps applied at feasibility time.
#[derive(Debug, Clone, Copy)]
pub struct FeasibilityCaps {
    pub eps_max: f64,
    pub t_max_s: f64,
    pub memory_cap_bits: u64,
    /// Fixed local-training time added to the latency estimate.
    pub t_train_fixed_s: f64,
}

/// Total round energy, the sum of its three parts.
pub fn round_energy(e_train: f64, e_tx: f64, e_rx: f64) -> Result<f64> {
    if e_train < 0.0 || e_tx < 0.0 || e_rx < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "round energy parts must be nonnegative, got ({e_train}, {e_tx}, {e_rx})"
        )));
    }
    Ok(e_train + e_tx + e_rx)
}

/// Expected transmit energy eta * s * q * rho, written as
/// eta * payload_bits * rho since payload_bits = s * q (+ scheme framing).
pub fn expected_tx_energy(eta_bit_j: f64, payload_bits: u64, rho: f64) -> f64 {
    eta_bit_j * payload_bits as f64 * rho
}

/// Receive energy for the model broadcast: eta_rx * model_bits.
pub fn rx_energy(budget: &LinkBudget, model_bits: u64) -> f64 {
    budget.eta_bit_rx_j * model_bits as f64
}

/// Model footprint in bits for memory accounting (fp32 values).
pub fn model_bits(d: usize) -> u64 {
    32 * d as u64
}

/// Check the constraint block for one client: PER cap, worst-case energy
/// against the remaining budget, expected latency, and memory. The energy
/// admission is worst case (every packet spends retry_cap transmissions) so
/// the ledger can never go negative; the expected value is reported for the
/// utility terms.
#[allow(clippy::too_many_arguments)]
pub fn check_feasibility(
    snapshot: &ChannelSnapshot,
    budget_remaining_j: f64,
    payload_bits: u64,
    e_train_j: f64,
    model_d: usize,
    link: &LinkBudget,
    caps: &FeasibilityCaps,
) -> FeasibilityCheck {
    let packets = payload_bits.div_ceil(link.packet_payload_bits);
    let worst_bits = packets * link.packet_payload_bits * link.retry_cap as u64;
    let e_rx = rx_energy(link, model_bits(model_d));
    let worst_case_energy_j = e_train_j + snapshot.eta_bit_j * worst_bits as f64 + e_rx;
    let expected_energy_j =
        e_train_j + expected_tx_energy(snapshot.eta_bit_j, payload_bits, snapshot.rho) + e_rx;
    let latency_s =
        payload_bits as f64 * snapshot.rho / snapshot.rate_bits_per_s + caps.t_train_fixed_s;
    let memory_bits = model_bits(model_d) + payload_bits;

    let reason = if snapshot.per > caps.eps_max {
        Some(ConstraintKind::Per)
    } else if worst_case_energy_j > budget_remaining_j {
        Some(ConstraintKind::Energy)
    } else if latency_s > caps.t_max_s {
        Some(ConstraintKind::Latency)
    } else if memory_bits > caps.memory_cap_bits {
        Some(ConstraintKind::Memory)
    } else {
        None
    };
    FeasibilityCheck {
        feasible: reason.is_none(),
        reason,
        worst_case_energy_j,
        expected_energy_j,
        latency_s,
        memory_bits,
    }
}

/// Per-client energy ledger with spend history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub budget_j: Vec<f64>,
    pub cum_train_j: Vec<f64>,
    pub cum_tx_j: Vec<f64>,
    pub cum_rx_j: Vec<f64>,
    pub memory_cap_bits: u64,
    /// Per client, (round, round energy) spend history.
    pub history: Vec<Vec<(usize, f64)>>,
}

impl EnergyLedger {
    pub fn new(num_clients: usize, initial_budget_j: f64, memory_cap_bits: u64) -> Self {
        EnergyLedger {
            budget_j: vec![initial_budget_j; num_clients],
            cum_train_j: vec![0.0; num_clients],
            cum_tx_j: vec![0.0; num_clients],
            cum_rx_j: vec![0.0; num_clients],
            memory_cap_bits,
            history: vec![Vec::new(); num_clients],
        }
    }

    /// Spend one round's energy for a client. Spending happens on attempt,
    /// not only on delivery; the feasibility pre-check guarantees the budget
    /// stays nonnegative.
    pub fn charge(
        &mut self,
        client: usize,
        round: usize,
        e_train: f64,
        e_tx: f64,
        e_rx: f64,
    ) -> Result<f64> {
        let total = round_energy(e_train, e_tx, e_rx)?;
        if total > self.budget_j[client] + 1e-12 {
            return Err(Error::InvariantBreach(format!(
                "client {client} would overspend: {total} > {}",
                self.budget_j[client]
            )));
        }
        self.budget_j[client] = (self.budget_j[client] - total).max(0.0);
        self.cum_train_j[client] += e_train;
        self.cum_tx_j[client] += e_tx;
        self.cum_rx_j[client] += e_rx;
        self.history[client].push((round, total));
        Ok(total)
    }

    pub fn cumulative_total_j(&self) -> f64 {
        (0..self.budget_j.len())
            .map(|i| self.cum_train_j[i] + self.cum_tx_j[i] + self.cum_rx_j[i])
            .sum()
    }

    /// Sum of per-round history entries for one client.
    pub fn history_total_j(&self, client: usize) -> f64 {
        self.history[client].iter().map(|&(_, e)| e).sum()
    }
}

/// Inputs to the raw-streaming vs FL break-even calculation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BreakEvenSpec {
    /// Task horizon in seconds.
    pub horizon_s: f64,
    pub sampling_rate_hz: f64,
    pub d_x: f64,
    pub bits_per_sample_dim: f64,
    pub eta_bit_j: f64,
    /// FL rounds over the horizon.
    pub rounds: f64,
    /// Values transmitted per round.
    pub s_per_round: f64,
    /// Bits per value.
    pub q_bits: f64,
    pub rho: f64,
    pub e_train_per_round_j: f64,
}

impl BreakEvenSpec {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("horizon_s", self.horizon_s),
            ("sampling_rate_hz", self.sampling_rate_hz),
            ("d_x", self.d_x),
            ("bits_per_sample_dim", self.bits_per_sample_dim),
            ("eta_bit_j", self.eta_bit_j),
            ("rounds", self.rounds),
            ("s_per_round", self.s_per_round),
            ("q_bits", self.q_bits),
            ("rho", self.rho),
            ("e_train_per_round_j", self.e_train_per_round_j),
        ];
        for (name, v) in fields {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "break-even field {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// E_stream = T * f_s * d_x * b_x * eta_bit.
pub fn stream_energy(spec: &BreakEvenSpec) -> f64 {
    stream_energy_at(spec, spec.horizon_s)
}

/// E_stream evaluated at an arbitrary horizon.
pub fn stream_energy_at(spec: &BreakEvenSpec, horizon_s: f64) -> f64 {
    horizon_s * spec.sampling_rate_hz * spec.d_x * spec.bits_per_sample_dim * spec.eta_bit_j
}

/// E_FL = R * s * q * eta_bit * rho + R * E_train.
pub fn fl_energy(spec: &BreakEvenSpec) -> f64 {
    spec.rounds * spec.s_per_round * spec.q_bits * spec.eta_bit_j * spec.rho
        + spec.rounds * spec.e_train_per_round_j
}

/// Horizon T* at which E_stream(T*) = E_FL (the streaming energy is linear
/// in T). Infinite when the streaming rate is zero.
pub fn crossing_horizon_s(spec: &BreakEvenSpec) -> f64 {
    let rate =
        spec.sampling_rate_hz * spec.d_x * spec.bits_per_sample_dim * spec.eta_bit_j;
    if rate == 0.0 {
        return f64::INFINITY;
    }
    fl_energy(spec) / rate
}

/// One break-even report row.
#[derive(Debug, Clone, Serialize)]
pub struct BreakEvenRow {
    pub horizon_s: f64,
    pub e_stream_j: f64,
    pub e_fl_j: f64,
    pub ratio: f64,
}

/// Full report: rows over a geometric horizon grid around the configured
/// horizon, plus the crossing summary.
#[derive(Debug, Clone, Serialize)]
pub struct BreakEvenReport {
    pub rows: Vec<BreakEvenRow>,
    pub crossing_horizon_s: f64,
    pub e_fl_j: f64,
}

pub fn break_even_report(spec: &BreakEvenSpec) -> Result<BreakEvenReport> {
    spec.validate()?;
    let e_fl = fl_energy(spec);
    let mut horizons: Vec<f64> = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|m| m * spec.horizon_s)
        .collect();
    let crossing = crossing_horizon_s(spec);
    if crossing.is_finite() && crossing > 0.0 {
        horizons.push(crossing);
    }
    horizons.sort_by(|a, b| a.partial_cmp(b).expect("finite horizons"));
    horizons.dedup();
    let rows = horizons
        .into_iter()
        .map(|h| {
            let e_stream = stream_energy_at(spec, h);
            BreakEvenRow {
                horizon_s: h,
                e_stream_j: e_stream,
                e_fl_j: e_fl,
                ratio: e_fl / e_stream,
            }
        })
        .collect();
    Ok(BreakEvenReport {
        rows,
        crossing_horizon_s: crossing,
        e_fl_j: e_fl,
    })
}
