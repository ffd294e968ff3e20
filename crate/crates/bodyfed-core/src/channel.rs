//! Posture-dependent body-channel emulation.
//!
//! Loss distributions are fitted per (location, posture) from signal-loss
//! samples; a link budget maps a realized loss to packet-error rate, rate
//! tier, retransmission factor, and energy per bit. Packet transmission is
//! simulated per packet with independent per-transmission failures.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// Posture label used when samples carry none.
pub const DEFAULT_POSTURE: &str = "default";

/// One body-context state with its Markov transition row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostureState {
    pub id: usize,
    pub label: String,
    /// Probability of moving to each posture state; sums to 1.
    pub transition_row: Vec<f64>,
}

/// First-order Markov chain over posture states.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PostureChain {
    pub states: Vec<PostureState>,
}

impl PostureChain {
    pub fn new(states: Vec<PostureState>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidConfig("at least one posture state".into()));
        }
        for (i, s) in states.iter().enumerate() {
            if s.id != i {
                return Err(Error::InvalidConfig(format!(
                    "posture state {i} has id {}",
                    s.id
                )));
            }
            if s.transition_row.len() != states.len() {
                return Err(Error::InvalidConfig(format!(
                    "posture {:?}: transition row length {} != {}",
                    s.label,
                    s.transition_row.len(),
                    states.len()
                )));
            }
            if s.transition_row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidConfig(format!(
                    "posture {:?}: transition probabilities outside [0,1]",
                    s.label
                )));
            }
            let sum: f64 = s.transition_row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "posture {:?}: transition row sums to {sum}",
                    s.label
                )));
            }
        }
        Ok(PostureChain { states })
    }

    /// Single self-looping posture, for scenarios without posture dynamics.
    pub fn single(label: &str) -> Self {
        PostureChain {
            states: vec![PostureState {
                id: 0,
                label: label.to_string(),
                transition_row: vec![1.0],
            }],
        }
    }

    /// Uniform chain over the given labels.
    pub fn uniform(labels: &[String]) -> Result<Self> {
        let n = labels.len().max(1);
        let row = vec![1.0 / n as f64; n];
        let states = if labels.is_empty() {
            vec![PostureState {
                id: 0,
                label: DEFAULT_POSTURE.to_string(),
                transition_row: vec![1.0],
            }]
        } else {
            labels
                .iter()
                .enumerate()
                .map(|(id, label)| PostureState {
                    id,
                    label: label.clone(),
                    transition_row: row.clone(),
                })
                .collect()
        };
        PostureChain::new(states)
    }
}

/// Draw the next posture by inverse CDF on one uniform.
pub fn step_posture<'a>(
    chain: &'a PostureChain,
    current: &PostureState,
    rng: &mut impl Rng,
) -> &'a PostureState {
    let u: f64 = rng.gen();
    step_posture_with_uniform(chain, current, u)
}

/// Inverse-CDF step with an explicit uniform draw (kept separate so tests
/// can pin the draw).
pub fn step_posture_with_uniform<'a>(
    chain: &'a PostureChain,
    current: &PostureState,
    u: f64,
) -> &'a PostureState {
    let row = &current.transition_row;
    let mut cum = 0.0;
    for (next, &p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return &chain.states[next];
        }
    }
    // Rounding left u just at/above the final cumulative mass.
    chain.states.last().expect("chain is nonempty")
}

/// Loss distribution for one (location, posture) group.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossDistribution {
    /// Normal in dB (lognormal in linear power).
    LognormalDb { mu_db: f64, sigma_db: f64 },
    /// Sorted sample table; draws interpolate the empirical quantile
    /// function.
    Empirical { table_db: Vec<f64> },
}

impl LossDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match self {
            LossDistribution::LognormalDb { mu_db, sigma_db } => {
                mu_db + sigma_db * standard_normal(rng)
            }
            LossDistribution::Empirical { table_db } => {
                let u: f64 = rng.gen();
                let n = table_db.len();
                if n == 1 {
                    return table_db[0];
                }
                let pos = u * (n - 1) as f64;
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let frac = pos - lo as f64;
                table_db[lo] * (1.0 - frac) + table_db[hi] * frac
            }
        }
    }
}

/// Per-(location, posture) loss distributions. Keys are
/// `"{location}|{posture}"` so the map serializes with a stable order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossModel {
    pub groups: BTreeMap<String, LossDistribution>,
}

fn group_key(location: &str, posture: &str) -> String {
    format!("{location}|{posture}")
}

impl LossModel {
    pub fn entry(&self, location: &str, posture: &str) -> Result<&LossDistribution> {
        self.groups
            .get(&group_key(location, posture))
            .ok_or_else(|| Error::MissingChannelEntry {
                location: location.to_string(),
                posture: posture.to_string(),
            })
    }

    /// Constant-loss model covering every (location, posture) pair given.
    pub fn constant(locations: &[String], postures: &[String], loss_db: f64) -> Self {
        let mut groups = BTreeMap::new();
        for loc in locations {
            for pos in postures {
                groups.insert(
                    group_key(loc, pos),
                    LossDistribution::LognormalDb {
                        mu_db: loss_db,
                        sigma_db: 0.0,
                    },
                );
            }
        }
        LossModel { groups }
    }
}

/// One signal-loss measurement.
#[derive(Debug, Clone)]
pub struct LossSample {
    pub location: String,
    /// Missing posture labels collapse into [`DEFAULT_POSTURE`].
    pub posture: Option<String>,
    pub loss_db: f64,
}

/// Distribution family to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitFamily {
    Lognormal,
    Empirical,
}

/// Fit options; `min_samples` defaults to 8 per group.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: FitFamily,
    pub min_samples: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            family: FitFamily::Lognormal,
            min_samples: 8,
        }
    }
}

/// Fit per-group loss distributions from samples. Lognormal mode records the
/// sample mean and sample (n-1) standard deviation of the dB losses;
/// empirical mode stores the sorted table. Deterministic.
pub fn fit_loss_model(samples: &[LossSample], opts: &FitOptions) -> Result<LossModel> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for s in samples {
        let posture = s
            .posture
            .clone()
            .filter(|p| !p.is_empty())
            .unwrap_or_else(|| DEFAULT_POSTURE.to_string());
        grouped
            .entry((s.location.clone(), posture))
            .or_default()
            .push(s.loss_db);
    }
    let mut groups = BTreeMap::new();
    for ((location, posture), mut vals) in grouped {
        if vals.len() < opts.min_samples {
            return Err(Error::InsufficientSamples {
                location,
                posture,
                count: vals.len(),
                min: opts.min_samples,
            });
        }
        let dist = match opts.family {
            FitFamily::Lognormal => {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = if vals.len() > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                LossDistribution::LognormalDb {
                    mu_db: mean,
                    sigma_db: var.sqrt(),
                }
            }
            FitFamily::Empirical => {
                vals.sort_by(|a, b| a.partial_cmp(b).expect("finite losses"));
                LossDistribution::Empirical { table_db: vals }
            }
        };
        groups.insert(group_key(&location, &posture), dist);
    }
    Ok(LossModel { groups })
}

/// Parse the loss-sample CSV schema `location,posture,loss_db` (UTF-8, one
/// sample per row; the posture column may be empty).
pub fn parse_loss_csv(text: &str, path: &str) -> Result<Vec<LossSample>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::EmptyDataset)?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let expected = ["location", "posture", "loss_db"];
    if cols != expected {
        let missing = expected
            .iter()
            .find(|c| !cols.contains(*c))
            .copied()
            .unwrap_or("header");
        return Err(Error::CsvSchema {
            path: path.to_string(),
            row: 1,
            msg: format!("missing column {missing:?} (expected header location,posture,loss_db)"),
        });
    }
    let mut samples = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::CsvSchema {
                path: path.to_string(),
                row,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let loss_db: f64 = fields[2].parse().map_err(|_| Error::CsvSchema {
            path: path.to_string(),
            row,
            msg: format!("bad loss_db value {:?}", fields[2]),
        })?;
        samples.push(LossSample {
            location: fields[0].to_string(),
            posture: if fields[1].is_empty() {
                None
            } else {
                Some(fields[1].to_string())
            },
            loss_db,
        });
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(samples)
}

/// Rate tier: applies when the realized loss is at or below the threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateTier {
    pub loss_threshold_db: f64,
    pub rate_bits_per_s: f64,
}

/// Explicit link budget mapping loss to PER, rate, and energy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkBudget {
    /// Loss at which the raw (unclamped) PER is 0.5.
    pub loss_midpoint_db: f64,
    /// Logistic steepness in dB; must be positive so PER rises with loss.
    pub loss_slope_db: f64,
    pub eps_floor: f64,
    pub eps_ceil: f64,
    /// Ascending loss thresholds with descending rates; first matching tier
    /// wins, and losses above every threshold fall back to the last tier.
    pub rate_tiers: Vec<RateTier>,
    pub eta_bit_tx_j: f64,
    pub eta_bit_rx_j: f64,
    pub packet_payload_bits: u64,
    pub retry_cap: u32,
}

impl LinkBudget {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.eps_floor && self.eps_floor < self.eps_ceil && self.eps_ceil < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 <= eps_floor < eps_ceil < 1, got {} and {}",
                self.eps_floor, self.eps_ceil
            )));
        }
        if self.loss_slope_db <= 0.0 {
            return Err(Error::InvalidConfig("loss_slope_db must be positive".into()));
        }
        if self.rate_tiers.is_empty() {
            return Err(Error::InvalidConfig("rate_tiers must be nonempty".into()));
        }
        if self.rate_tiers.iter().any(|t| t.rate_bits_per_s <= 0.0) {
            return Err(Error::InvalidConfig("rate tiers must have positive rates".into()));
        }
        if self.retry_cap < 1 {
            return Err(Error::InvalidConfig("retry_cap must be >= 1".into()));
        }
        if self.packet_payload_bits == 0 {
            return Err(Error::InvalidConfig("packet_payload_bits must be positive".into()));
        }
        if self.eta_bit_tx_j <= 0.0 || self.eta_bit_rx_j < 0.0 {
            return Err(Error::InvalidConfig("energy-per-bit must be positive".into()));
        }
        Ok(())
    }

    /// Clamped logistic PER for a realized loss.
    pub fn per_for_loss(&self, loss_db: f64) -> f64 {
        let raw = 1.0 / (1.0 + (-(loss_db - self.loss_midpoint_db) / self.loss_slope_db).exp());
        raw.clamp(self.eps_floor, self.eps_ceil)
    }

    /// First tier whose threshold covers the loss; last tier as fallback.
    pub fn rate_for_loss(&self, loss_db: f64) -> f64 {
        for tier in &self.rate_tiers {
            if loss_db <= tier.loss_threshold_db {
                return tier.rate_bits_per_s;
            }
        }
        self.rate_tiers.last().expect("nonempty tiers").rate_bits_per_s
    }
}

/// Expected transmissions per delivered packet, 1/(1 - eps).
pub fn retransmission_factor(eps: f64) -> f64 {
    debug_assert!(eps < 1.0);
    1.0 / (1.0 - eps)
}

/// Per-client, per-round link realization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelSnapshot {
    pub client_id: usize,
    pub loss_db: f64,
    pub per: f64,
    pub rate_bits_per_s: f64,
    pub eta_bit_j: f64,
    pub rho: f64,
    /// Pilot-time outage flag: one probe packet failed all `retry_cap`
    /// transmissions (probability per^retry_cap).
    pub link_failed_flag: bool,
}

/// Draw a loss from the fitted distribution and push it through the link
/// budget. Consumes the loss draw and one flag draw from `rng`.
pub fn realize_link(
    client_id: usize,
    location: &str,
    loss_model: &LossModel,
    posture: &PostureState,
    budget: &LinkBudget,
    rng: &mut impl Rng,
) -> Result<ChannelSnapshot> {
    let dist = loss_model.entry(location, &posture.label)?;
    let loss_db = dist.sample(rng);
    let per = budget.per_for_loss(loss_db);
    let rate = budget.rate_for_loss(loss_db);
    let outage_p = per.powi(budget.retry_cap as i32);
    let link_failed_flag = rng.gen::<f64>() < outage_p;
    Ok(ChannelSnapshot {
        client_id,
        loss_db,
        per,
        rate_bits_per_s: rate,
        eta_bit_j: budget.eta_bit_tx_j,
        rho: retransmission_factor(per),
        link_failed_flag,
    })
}

/// Outcome of sending one update over a realized link.
#[derive(Debug, Clone, PartialEq)]
pub struct DeliveryResult {
    pub delivered: bool,
    /// Actual transmissions, retries included.
    pub packets_sent: u64,
    pub tx_energy_j: f64,
    pub tx_time_s: f64,
    /// Delivered packets / total packets; 1.0 for an empty payload.
    pub reliability_r: f64,
}

/// Send `payload_bits` as ceil(payload/packet) packets, each retried up to
/// `retry_cap` times with independent per-transmission failure probability
/// `snapshot.per`. Energy charges the full packet payload per transmission.
pub fn transmit_update(
    snapshot: &ChannelSnapshot,
    payload_bits: u64,
    budget: &LinkBudget,
    rng: &mut impl Rng,
) -> DeliveryResult {
    let packet_bits = budget.packet_payload_bits;
    let packets = payload_bits.div_ceil(packet_bits);
    if packets == 0 {
        return DeliveryResult {
            delivered: true,
            packets_sent: 0,
            tx_energy_j: 0.0,
            tx_time_s: 0.0,
            reliability_r: 1.0,
        };
    }
    let mut sent: u64 = 0;
    let mut delivered_packets: u64 = 0;
    for _ in 0..packets {
        for _attempt in 0..budget.retry_cap {
            sent += 1;
            let failed = rng.gen::<f64>() < snapshot.per;
            if !failed {
                delivered_packets += 1;
                break;
            }
        }
    }
    let bits_sent = (sent * packet_bits) as f64;
    DeliveryResult {
        delivered: delivered_packets == packets,
        packets_sent: sent,
        tx_energy_j: snapshot.eta_bit_j * bits_sent,
        tx_time_s: bits_sent / snapshot.rate_bits_per_s,
        reliability_r: delivered_packets as f64 / packets as f64,
    }
}

/// Persisted channel model: posture chain, fitted loss distributions, link
/// budget, and the (inert) emulation carrier frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelModel {
    pub postures: Vec<PostureState>,
    pub loss_model: LossModel,
    pub link_budget: LinkBudget,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency_hz: Option<f64>,
}

impl ChannelModel {
    pub fn validate(&self) -> Result<PostureChain> {
        self.link_budget.validate()?;
        PostureChain::new(self.postures.clone())
    }
}
