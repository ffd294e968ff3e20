//! The full round loop (pilot links, utility estimation, feasibility,
//! policy selection, local training, transmission, aggregation, tracker
//! updates, evaluation), the scheduling-policy registry, and the
//! deterministic multi-seed experiment runner with CSV/JSON reporting.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    apply_aggregate, bias_corrected_weights, fedavg_weights, PropensityTracker,
};
use crate::channel::{
    realize_link, step_posture, transmit_update, ChannelModel, ChannelSnapshot, LinkBudget,
    LossModel, PostureChain,
};
use crate::datasets::{
    generate_synthetic, normalize_per_split, parse_sensor_csv, partition_by_location,
    split_subject_disjoint, window_stream, ClientPartition, SyntheticSpec, Window,
};
use crate::energy::{
    check_feasibility, expected_tx_energy, model_bits, rx_energy, BreakEvenReport, BreakEvenSpec,
    EnergyLedger, FeasibilityCaps, FeasibilityCheck,
};
use crate::error::{Error, Result};
use crate::learning::{
    compress, evaluate, local_train, LearningConfig, ModelParams, UpdateDelta,
};
use crate::parallel::{map_slice, ExecMode};
use crate::rng::{stream, substream};
use crate::scheduler::{
    estimate_utilities, greedy_select, CovarianceTrackers, GreedySelection, ParticipationState,
    SchedulerConfig, UtilityInputs, UtilityTerms,
};

/// Registered scheduling policies.
pub const POLICIES: &[&str] = &[
    "random_k",
    "round_robin",
    "channel_only",
    "energy_only",
    "data_only",
    "bodyfed",
    "full",
    "none",
];

/// Per-client budgets and the fixed parts of the latency/memory model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyConfig {
    pub initial_budget_j: f64,
    pub memory_cap_bits: u64,
    /// Fixed local-training time added to the latency estimate.
    pub t_train_fixed_s: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            initial_budget_j: 1.0,
            memory_cap_bits: 4_000_000,
            t_train_fixed_s: 0.5,
        }
    }
}

/// Which weighting rule combines delivered updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    BiasCorrected,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub scheme: AggregatorKind,
    /// Propensity EMA coefficient.
    pub beta: f64,
    /// Propensity floor.
    pub eps_pi: f64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            scheme: AggregatorKind::BiasCorrected,
            beta: 0.1,
            eps_pi: 0.01,
        }
    }
}

/// Where the learning task comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv {
        path: String,
        window_s: f64,
        overlap_fraction: f64,
        sampling_rate_hz: f64,
        test_subjects: Vec<String>,
    },
}

/// Channel model, inline or referenced by file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelSource {
    Inline(ChannelModel),
    Path(String),
}

/// Everything one run needs; serializable so runs echo their configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSource,
    pub channel: ChannelSource,
    pub scheduler: SchedulerConfig,
    pub learning: LearningConfig,
    pub energy: EnergyConfig,
    pub aggregation: AggregationConfig,
    pub policy: String,
    pub rounds: usize,
    pub target_f1: f64,
    pub master_seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !POLICIES.contains(&self.policy.as_str()) {
            return Err(Error::UnknownPolicy(self.policy.clone()));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        self.scheduler.validate()?;
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        Ok(())
    }

    /// Load from JSON, resolving a relative channel path against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<ScenarioConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read {}: {e}", path.display()))
        })?;
        let mut cfg: ScenarioConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if let ChannelSource::Path(p) = &cfg.channel {
            let rel = Path::new(p);
            if rel.is_relative() {
                cfg.channel = ChannelSource::Path(base.join(rel).to_string_lossy().into_owned());
            }
        }
        if let DatasetSource::Csv { path: p, .. } = &mut cfg.dataset {
            let rel = Path::new(p);
            if rel.is_relative() {
                *p = base.join(rel).to_string_lossy().into_owned();
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Dataset resolved into client partitions plus evaluation slices.
pub struct ResolvedData {
    pub partitions: Vec<ClientPartition>,
    pub num_classes: usize,
    pub d_x: usize,
    pub global_heldout: Vec<Window>,
}

pub fn resolve_dataset(cfg: &ScenarioConfig, seed: u64) -> Result<ResolvedData> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => {
            let partitions = generate_synthetic(spec, seed)?;
            let global_heldout: Vec<Window> =
                partitions.iter().flat_map(|p| p.heldout.iter().cloned()).collect();
            Ok(ResolvedData {
                partitions,
                num_classes: spec.num_classes,
                d_x: spec.d_x,
                global_heldout,
            })
        }
        DatasetSource::Csv {
            path,
            window_s,
            overlap_fraction,
            sampling_rate_hz,
            test_subjects,
        } => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::InvalidConfig(format!("dataset file {path:?}: {e}"))
            })?;
            let rows = parse_sensor_csv(&text, path)?;
            let ds = window_stream(&rows, *window_s, *overlap_fraction, *sampling_rate_hz)?;
            let subjects: BTreeSet<String> = test_subjects.iter().cloned().collect();
            let (train, heldout) = split_subject_disjoint(&ds, &subjects)?;
            let (train, heldout) = normalize_per_split(&train, &heldout)?;
            let partitions = partition_by_location(train, heldout.clone(), true)?;
            Ok(ResolvedData {
                partitions,
                num_classes: ds.num_classes,
                d_x: ds.d_x,
                global_heldout: heldout,
            })
        }
    }
}

pub fn resolve_channel(source: &ChannelSource) -> Result<ChannelModel> {
    let model = match source {
        ChannelSource::Inline(m) => m.clone(),
        ChannelSource::Path(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::InvalidConfig(format!("channel file {path:?}: {e}"))
            })?;
            serde_json::from_str(&text)?
        }
    };
    model.validate()?;
    Ok(model)
}

/// Per-round learning and systems metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based round index.
    pub round: usize,
    pub policy: String,
    pub selected: Vec<usize>,
    pub delivered: Vec<usize>,
    pub macro_f1: f64,
    pub worst_location_f1: f64,
    /// |delivered| / |selected|; 1.0 when nothing was selected.
    pub success_rate: f64,
    /// Total energy spent this round across clients.
    pub round_energy_j: f64,
    pub cum_energy_j: f64,
    /// Max minus min share of cumulative selection counts.
    pub disparity: f64,
    pub pi: Vec<f64>,
    /// Raw fairness debt (rounds since last selection) per client.
    pub debt: Vec<f64>,
    pub per_client_energy_j: Vec<f64>,
}

/// Everything the fuzz checks and the decisions CSV need about one round.
#[derive(Debug, Clone, Serialize)]
pub struct RoundTrace {
    pub round: usize,
    pub posture_id: usize,
    pub snapshots: Vec<ChannelSnapshot>,
    pub feasibility: Vec<FeasibilityCheck>,
    pub budget_before_j: Vec<f64>,
    pub utilities: UtilityTerms,
    /// Present for the bodyfed policy; other policies have no gain trace.
    pub greedy: Option<GreedySelection>,
    pub selected: Vec<usize>,
    pub delivered: Vec<usize>,
    pub reliability: Vec<(usize, f64)>,
    /// Shrunk diversity matrix the selection objective saw this round.
    pub sigma_delta_shrunk: Vec<Vec<f64>>,
    pub k_max: usize,
}

/// Mutable simulation state for one scenario run.
pub struct SimState {
    pub config: ScenarioConfig,
    pub seed: u64,
    pub exec: ExecMode,
    pub partitions: Vec<ClientPartition>,
    pub num_classes: usize,
    pub global_heldout: Vec<Window>,
    pub model: ModelParams,
    pub posture_chain: PostureChain,
    pub posture_current: usize,
    pub loss_model: LossModel,
    pub link_budget: LinkBudget,
    pub ledger: EnergyLedger,
    pub propensity: PropensityTracker,
    pub covariance: CovarianceTrackers,
    pub participation: Vec<ParticipationState>,
    pub selection_counts: Vec<usize>,
    pub round_robin_cursor: usize,
    /// Next round to run, 0-based.
    pub round: usize,
    /// Planned payload per update at the configured compression.
    pub payload_bits: u64,
}

impl SimState {
    pub fn new(config: &ScenarioConfig, seed: u64, exec: ExecMode) -> Result<SimState> {
        config.validate()?;
        let data = resolve_dataset(config, seed)?;
        let channel = resolve_channel(&config.channel)?;
        let posture_chain = channel.validate()?;
        let n = data.partitions.len();
        let model = ModelParams::zeros(data.d_x, data.num_classes);
        config.learning.compression.validate(model.d())?;
        let payload_bits = config.learning.compression.payload_bits(model.d());
        let propensity = PropensityTracker::new(
            n,
            config.scheduler.k_max,
            config.aggregation.beta,
            config.aggregation.eps_pi,
        )?;
        let mut sketch_rng = substream(seed, &[stream::SKETCH]);
        let covariance = CovarianceTrackers::new(n, model.d(), &config.scheduler, &mut sketch_rng);
        // Every (location, posture) pair must have a loss entry up front.
        for part in &data.partitions {
            for state in &posture_chain.states {
                channel.loss_model.entry(&part.location, &state.label)?;
            }
        }
        Ok(SimState {
            config: config.clone(),
            seed,
            exec,
            ledger: EnergyLedger::new(
                n,
                config.energy.initial_budget_j,
                config.energy.memory_cap_bits,
            ),
            propensity,
            covariance,
            participation: vec![ParticipationState::default(); n],
            selection_counts: vec![0; n],
            round_robin_cursor: 0,
            round: 0,
            payload_bits,
            partitions: data.partitions,
            num_classes: data.num_classes,
            global_heldout: data.global_heldout,
            model,
            posture_chain,
            posture_current: 0,
            loss_model: channel.loss_model,
            link_budget: channel.link_budget,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.partitions.len()
    }

    /// Estimated training energy for one client at the configured epochs.
    fn train_energy_estimate(&self, client: usize) -> f64 {
        self.config.learning.kappa_train_j
            * self.partitions[client].n_train() as f64
            * self.config.learning.epochs as f64
            * self.model.d() as f64
    }

    fn feasibility_caps(&self) -> FeasibilityCaps {
        FeasibilityCaps {
            eps_max: self.config.scheduler.eps_max,
            t_max_s: self.config.scheduler.t_max_s,
            memory_cap_bits: self.config.energy.memory_cap_bits,
            t_train_fixed_s: self.config.energy.t_train_fixed_s,
        }
    }

    /// Raw fairness debt per client after the current round.
    fn debts(&self, round: usize) -> Vec<f64> {
        self.participation
            .iter()
            .map(|p| match p.last_selected_round {
                Some(s) => (round - s) as f64,
                None => (round + 1) as f64,
            })
            .collect()
    }

    fn disparity(&self) -> f64 {
        let total: usize = self.selection_counts.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let shares: Vec<f64> = self
            .selection_counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect();
        let max = shares.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = shares.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Minimum per-location held-out macro-F1 (locations with held-out data).
    fn worst_location_f1(&self) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for part in &self.partitions {
            if part.heldout.is_empty() {
                continue;
            }
            let report = evaluate(&self.model, &part.heldout)?;
            worst = worst.min(report.macro_f1);
        }
        if worst.is_finite() {
            Ok(worst)
        } else {
            Err(Error::EmptyDataset)
        }
    }
}

/// Select clients with the named policy. All policies respect feasibility;
/// selections are in ascending client order except bodyfed, which keeps its
/// greedy order.
#[allow(clippy::too_many_arguments)]
pub fn run_policy(
    policy: &str,
    feasible: &[bool],
    snapshots: &[ChannelSnapshot],
    terms: &UtilityTerms,
    scheduler: &SchedulerConfig,
    budgets: &[f64],
    covariance: &CovarianceTrackers,
    round_robin_cursor: &mut usize,
    policy_rng: &mut impl Rng,
    exec: ExecMode,
) -> Result<(Vec<usize>, Option<GreedySelection>)> {
    let n = feasible.len();
    let k = scheduler.k_max;
    let feasible_ids: Vec<usize> = (0..n).filter(|&i| feasible[i]).collect();
    let take_sorted_by = |key: &dyn Fn(usize) -> f64| -> Vec<usize> {
        let mut ids = feasible_ids.clone();
        ids.sort_by(|&a, &b| {
            key(a).partial_cmp(&key(b)).expect("finite policy key").then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = ids.into_iter().take(k).collect();
        chosen.sort_unstable();
        chosen
    };
    let selection = match policy {
        "random_k" => {
            let mut ids = feasible_ids.clone();
            ids.shuffle(policy_rng);
            let mut chosen: Vec<usize> = ids.into_iter().take(k).collect();
            chosen.sort_unstable();
            (chosen, None)
        }
        "round_robin" => {
            let mut chosen = Vec::new();
            if !feasible_ids.is_empty() {
                for step in 0..n {
                    let id = (*round_robin_cursor + step) % n;
                    if feasible[id] {
                        chosen.push(id);
                        if chosen.len() == k {
                            *round_robin_cursor = (id + 1) % n;
                            break;
                        }
                    }
                }
                if chosen.len() < k && !chosen.is_empty() {
                    *round_robin_cursor = (chosen[chosen.len() - 1] + 1) % n;
                }
                chosen.sort_unstable();
            }
            (chosen, None)
        }
        "channel_only" => (take_sorted_by(&|i| snapshots[i].per), None),
        "energy_only" => (take_sorted_by(&|i| -budgets[i]), None),
        "data_only" => (
            take_sorted_by(&|i| {
                -(scheduler.alpha_value * terms.value[i] + scheduler.alpha_novelty * terms.novelty[i])
            }),
            None,
        ),
        "bodyfed" => {
            let greedy = greedy_select(terms, scheduler, covariance, feasible, exec)?;
            (greedy.order.clone(), Some(greedy))
        }
        "full" => (feasible_ids, None),
        "none" => (Vec::new(), None),
        other => return Err(Error::UnknownPolicy(other.to_string())),
    };
    Ok(selection)
}

/// One full round: posture step, pilot links, utilities, feasibility,
/// selection, local training, compression, transmission, aggregation over
/// delivered updates, and all state updates. An empty delivered set leaves
/// the model unchanged but still emits metrics.
pub fn run_round(state: &mut SimState) -> Result<(MetricsRecord, RoundTrace)> {
    let round = state.round;
    run_round_inner(state).map_err(|e| e.in_round(round + 1))
}

fn run_round_inner(state: &mut SimState) -> Result<(MetricsRecord, RoundTrace)> {
    let r = state.round;
    let n = state.num_clients();
    let seed = state.seed;

    // Posture evolves once per round; every client shares the context.
    let mut posture_rng = substream(seed, &[stream::POSTURE, r as u64]);
    let current = &state.posture_chain.states[state.posture_current];
    state.posture_current = step_posture(&state.posture_chain, current, &mut posture_rng).id;
    let posture = &state.posture_chain.states[state.posture_current];

    // Pilot links for every client.
    let snapshots: Vec<ChannelSnapshot> = {
        let results: Vec<Result<ChannelSnapshot>> =
            map_slice(state.exec, &(0..n).collect::<Vec<_>>(), |&i| {
                let mut rng = substream(seed, &[stream::LOSS, r as u64, i as u64]);
                realize_link(
                    i,
                    &state.partitions[i].location,
                    &state.loss_model,
                    posture,
                    &state.link_budget,
                    &mut rng,
                )
            });
        results.into_iter().collect::<Result<Vec<_>>>()?
    };

    // Expected round energies feed the utility terms.
    let e_rx = rx_energy(&state.link_budget, model_bits(state.model.d()));
    let expected_energy: Vec<f64> = (0..n)
        .map(|i| {
            state.train_energy_estimate(i)
                + expected_tx_energy(snapshots[i].eta_bit_j, state.payload_bits, snapshots[i].rho)
                + e_rx
        })
        .collect();

    let terms = estimate_utilities(
        &UtilityInputs {
            partitions: &state.partitions,
            snapshots: &snapshots,
            global_model: &state.model,
            participation: &state.participation,
            round: r,
            payload_bits: state.payload_bits,
            expected_energy_j: &expected_energy,
            budget_j: &state.ledger.budget_j,
            num_classes: state.num_classes,
        },
        &state.config.scheduler,
    );

    let caps = state.feasibility_caps();
    let feasibility: Vec<FeasibilityCheck> = (0..n)
        .map(|i| {
            check_feasibility(
                &snapshots[i],
                state.ledger.budget_j[i],
                state.payload_bits,
                state.train_energy_estimate(i),
                state.model.d(),
                &state.link_budget,
                &caps,
            )
        })
        .collect();
    let feasible: Vec<bool> = feasibility.iter().map(|f| f.feasible).collect();
    let budget_before = state.ledger.budget_j.clone();

    let mut policy_rng = substream(seed, &[stream::POLICY, r as u64]);
    let (selected, greedy) = run_policy(
        &state.config.policy,
        &feasible,
        &snapshots,
        &terms,
        &state.config.scheduler,
        &state.ledger.budget_j,
        &state.covariance,
        &mut state.round_robin_cursor,
        &mut policy_rng,
        state.exec,
    )?;

    // Selected clients train, compress, and transmit independently.
    struct ClientOutcome {
        client: usize,
        update: UpdateDelta,
        train_energy_j: f64,
        tx_energy_j: f64,
        delivered: bool,
        reliability: f64,
    }
    let outcomes: Vec<Result<ClientOutcome>> = map_slice(state.exec, &selected, |&i| {
        let mut train_rng = substream(seed, &[stream::TRAIN, r as u64, i as u64]);
        let (raw, report) = local_train(
            &state.model,
            &state.partitions[i].train,
            &state.config.learning,
            i,
            &mut train_rng,
        )?;
        let update = compress(&raw, state.config.learning.compression)?;
        let mut tx_rng = substream(seed, &[stream::TRANSMIT, r as u64, i as u64]);
        let delivery = transmit_update(&snapshots[i], update.payload_bits, &state.link_budget, &mut tx_rng);
        Ok(ClientOutcome {
            client: i,
            update,
            train_energy_j: report.train_energy_j,
            tx_energy_j: delivery.tx_energy_j,
            delivered: delivery.delivered,
            reliability: delivery.reliability_r,
        })
    });
    let outcomes: Vec<ClientOutcome> = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    // Spend energy on every attempt; the worst-case pre-check guarantees
    // budgets stay nonnegative.
    let mut per_client_energy = vec![0.0; n];
    for o in &outcomes {
        let spent = state
            .ledger
            .charge(o.client, r, o.train_energy_j, o.tx_energy_j, e_rx)?;
        per_client_energy[o.client] = spent;
    }

    let delivered_ids: Vec<usize> =
        outcomes.iter().filter(|o| o.delivered).map(|o| o.client).collect();
    let reliability: Vec<(usize, f64)> =
        outcomes.iter().map(|o| (o.client, o.reliability)).collect();

    // Aggregate delivered updates.
    if !delivered_ids.is_empty() {
        let weights = match state.config.aggregation.scheme {
            AggregatorKind::Fedavg => {
                let delivered: Vec<(usize, usize)> = outcomes
                    .iter()
                    .filter(|o| o.delivered)
                    .map(|o| (o.client, state.partitions[o.client].n_train()))
                    .collect();
                fedavg_weights(&delivered)?
            }
            AggregatorKind::BiasCorrected => {
                let delivered: Vec<(usize, usize, f64)> = outcomes
                    .iter()
                    .filter(|o| o.delivered)
                    .map(|o| (o.client, state.partitions[o.client].n_train(), o.reliability))
                    .collect();
                bias_corrected_weights(&delivered, &state.propensity)?
            }
        };
        let updates: Vec<(&UpdateDelta, f64)> = weights
            .iter()
            .map(|&(client, a)| {
                let outcome = outcomes
                    .iter()
                    .find(|o| o.client == client)
                    .expect("weight for delivered client");
                (&outcome.update, a)
            })
            .collect();
        state.model = apply_aggregate(&state.model, &updates)?;
    }

    // Participation, propensity, selection counts, covariance trackers.
    for &i in &selected {
        state.participation[i].last_selected_round = Some(r);
        state.selection_counts[i] += 1;
    }
    for o in outcomes.iter().filter(|o| o.delivered) {
        let hist = state.partitions[o.client].label_histogram(state.num_classes);
        state.participation[o.client].hist_at_participation = Some(hist);
        state.participation[o.client].last_delivered_norm = Some(o.update.l2_norm());
    }
    state.propensity.update(&selected);
    let delivered_deltas: Vec<(usize, &[f64])> = outcomes
        .iter()
        .filter(|o| o.delivered)
        .map(|o| (o.client, o.update.delta.as_slice()))
        .collect();
    let failures: Vec<bool> = snapshots.iter().map(|s| s.link_failed_flag).collect();
    let sigma_delta_shrunk_before = state.covariance.shrunk_sigma_delta();
    state.covariance.update(&delivered_deltas, &failures);

    // Metrics.
    let eval = evaluate(&state.model, &state.global_heldout)?;
    let worst_location_f1 = state.worst_location_f1()?;
    let success_rate = if selected.is_empty() {
        1.0
    } else {
        delivered_ids.len() as f64 / selected.len() as f64
    };
    let round_energy_j: f64 = per_client_energy.iter().sum();
    let record = MetricsRecord {
        round: r + 1,
        policy: state.config.policy.clone(),
        selected: selected.clone(),
        delivered: delivered_ids.clone(),
        macro_f1: eval.macro_f1,
        worst_location_f1,
        success_rate,
        round_energy_j,
        cum_energy_j: state.ledger.cumulative_total_j(),
        disparity: state.disparity(),
        pi: state.propensity.pi.clone(),
        debt: state.debts(r),
        per_client_energy_j: per_client_energy,
    };
    let n_mat = sigma_delta_shrunk_before.n();
    let trace = RoundTrace {
        round: r + 1,
        posture_id: state.posture_current,
        snapshots,
        feasibility,
        budget_before_j: budget_before,
        utilities: terms,
        greedy,
        selected,
        delivered: delivered_ids,
        reliability,
        sigma_delta_shrunk: (0..n_mat)
            .map(|i| (0..n_mat).map(|j| sigma_delta_shrunk_before.get(i, j)).collect())
            .collect(),
        k_max: state.config.scheduler.k_max,
    };
    state.round += 1;
    Ok((record, trace))
}

/// Fleet-level averages measured during a run, consumed by the break-even
/// calculator's measured mode.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasuredAverages {
    /// Mean snapshot rho over selected client-rounds (1.0 when none).
    pub mean_rho_selected: f64,
    /// Mean actual training energy per selected client-round.
    pub mean_e_train_j: f64,
    /// Selected client-rounds.
    pub attempts: usize,
    pub delivered_count: usize,
    /// Mean attempts per client over the run.
    pub per_client_attempts: f64,
    /// Transmitted values per update.
    pub s_per_update: f64,
    /// Bits per transmitted value.
    pub q_bits: f64,
    pub payload_bits: u64,
}

/// Final per-seed summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub policy: String,
    pub rounds: usize,
    pub final_macro_f1: f64,
    pub final_worst_location_f1: f64,
    pub rounds_to_target: Option<usize>,
    pub target_reached: bool,
    pub energy_to_target_j: Option<f64>,
    pub total_energy_j: f64,
    pub mean_success_rate: f64,
    pub final_disparity: f64,
    pub measured: MeasuredAverages,
}

/// One seed's full output.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub traces: Vec<RoundTrace>,
    pub summary: RunSummary,
}

/// Run a scenario for one seed.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, exec: ExecMode) -> Result<RunResult> {
    let mut state = SimState::new(cfg, seed, exec)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let mut traces = Vec::with_capacity(cfg.rounds);
    let mut rho_sum = 0.0;
    let mut attempts = 0usize;
    let mut delivered_count = 0usize;
    for _ in 0..cfg.rounds {
        let (record, trace) = run_round(&mut state)?;
        for &i in &trace.selected {
            rho_sum += trace.snapshots[i].rho;
            attempts += 1;
        }
        delivered_count += trace.delivered.len();
        records.push(record);
        traces.push(trace);
    }
    // Wire accounting is fixed per scenario by the compression config.
    use crate::learning::CompressionScheme;
    let d = state.model.d();
    let values_per_update = match cfg.learning.compression {
        CompressionScheme::TopK { k } => k as f64,
        _ => d as f64,
    };
    let bits_per_value = match cfg.learning.compression {
        CompressionScheme::DenseFp32 | CompressionScheme::TopK { .. } => 32.0,
        CompressionScheme::Quantize { bits } => bits as f64,
        CompressionScheme::Sign => 1.0,
    };
    let total_train_energy: f64 = state.ledger.cum_train_j.iter().sum();
    let n = state.num_clients();
    let measured = MeasuredAverages {
        mean_rho_selected: if attempts > 0 { rho_sum / attempts as f64 } else { 1.0 },
        mean_e_train_j: if attempts > 0 { total_train_energy / attempts as f64 } else { 0.0 },
        attempts,
        delivered_count,
        per_client_attempts: attempts as f64 / n as f64,
        s_per_update: if attempts > 0 { values_per_update } else { 0.0 },
        q_bits: if attempts > 0 { bits_per_value } else { 0.0 },
        payload_bits: state.payload_bits,
    };
    let last = records.last().expect("at least one round");
    let hit = records.iter().find(|rec| rec.macro_f1 >= cfg.target_f1);
    let summary = RunSummary {
        seed,
        policy: cfg.policy.clone(),
        rounds: cfg.rounds,
        final_macro_f1: last.macro_f1,
        final_worst_location_f1: last.worst_location_f1,
        rounds_to_target: hit.map(|rec| rec.round),
        target_reached: hit.is_some(),
        energy_to_target_j: hit.map(|rec| rec.cum_energy_j),
        total_energy_j: last.cum_energy_j,
        mean_success_rate: records.iter().map(|rec| rec.success_rate).sum::<f64>()
            / records.len() as f64,
        final_disparity: last.disparity,
        measured,
    };
    Ok(RunResult {
        records,
        traces,
        summary,
    })
}

/// Median and interquartile range of one metric across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricStats {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile on sorted data (the R-7 rule).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn metric_stats(values: &[f64]) -> MetricStats {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite metric"));
    let median = quantile(&sorted, 0.5);
    let q25 = quantile(&sorted, 0.25);
    let q75 = quantile(&sorted, 0.75);
    MetricStats {
        median,
        q25,
        q75,
        iqr: q75 - q25,
    }
}

/// Cross-seed aggregate (median and IQR per metric). Target-dependent
/// metrics aggregate over the seeds that reached the target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateStats {
    pub final_macro_f1: MetricStats,
    pub final_worst_location_f1: MetricStats,
    pub total_energy_j: MetricStats,
    pub mean_success_rate: MetricStats,
    pub final_disparity: MetricStats,
    pub rounds_to_target: Option<MetricStats>,
    pub energy_to_target_j: Option<MetricStats>,
    pub reached_count: usize,
}

/// Whole-experiment summary document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: String,
    pub policy: String,
    pub seeds: Vec<u64>,
    pub aggregate: AggregateStats,
    pub per_seed: Vec<RunSummary>,
    pub config_echo: ScenarioConfig,
}

/// Run every seed (in parallel under the rayon mode) and aggregate.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    seeds: &[u64],
    exec: ExecMode,
) -> Result<(Vec<RunResult>, ExperimentSummary)> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    cfg.validate()?;
    let results: Vec<Result<RunResult>> =
        map_slice(exec, seeds, |&seed| run_scenario(cfg, seed, exec));
    let results: Vec<RunResult> = results.into_iter().collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<RunSummary> = results.iter().map(|r| r.summary.clone()).collect();
    let collect = |f: &dyn Fn(&RunSummary) -> f64| -> Vec<f64> { per_seed.iter().map(f).collect() };
    let reached: Vec<&RunSummary> = per_seed.iter().filter(|s| s.target_reached).collect();
    let aggregate = AggregateStats {
        final_macro_f1: metric_stats(&collect(&|s| s.final_macro_f1)),
        final_worst_location_f1: metric_stats(&collect(&|s| s.final_worst_location_f1)),
        total_energy_j: metric_stats(&collect(&|s| s.total_energy_j)),
        mean_success_rate: metric_stats(&collect(&|s| s.mean_success_rate)),
        final_disparity: metric_stats(&collect(&|s| s.final_disparity)),
        rounds_to_target: if reached.is_empty() {
            None
        } else {
            Some(metric_stats(
                &reached.iter().map(|s| s.rounds_to_target.unwrap() as f64).collect::<Vec<_>>(),
            ))
        },
        energy_to_target_j: if reached.is_empty() {
            None
        } else {
            Some(metric_stats(
                &reached.iter().map(|s| s.energy_to_target_j.unwrap()).collect::<Vec<_>>(),
            ))
        },
        reached_count: reached.len(),
    };
    let summary = ExperimentSummary {
        version: crate::VERSION.to_string(),
        policy: cfg.policy.clone(),
        seeds: seeds.to_vec(),
        aggregate,
        per_seed,
        config_echo: cfg.clone(),
    };
    Ok((results, summary))
}

/// Centralized upper bound: pool every client's train windows and run the
/// same SGD for rounds * epochs epochs; evaluated on the global held-out
/// split with the shared evaluation code.
pub fn run_centralized(cfg: &ScenarioConfig, seed: u64) -> Result<f64> {
    let data = resolve_dataset(cfg, seed)?;
    let pooled: Vec<Window> =
        data.partitions.iter().flat_map(|p| p.train.iter().cloned()).collect();
    let model = ModelParams::zeros(data.d_x, data.num_classes);
    let total_epochs = cfg.rounds * cfg.learning.epochs;
    let learning = LearningConfig {
        epochs: total_epochs,
        ..cfg.learning.clone()
    };
    let mut rng = substream(seed, &[stream::TRAIN, u64::MAX, 0]);
    let (delta, _) = local_train(&model, &pooled, &learning, usize::MAX, &mut rng)?;
    let trained = ModelParams {
        weights: model.weights.iter().zip(&delta.delta).map(|(w, d)| w + d).collect(),
        ..model
    };
    Ok(evaluate(&trained, &data.global_heldout)?.macro_f1)
}

/// Local-only reference: each client trains alone for the same total epoch
/// budget; returns each client's global held-out macro-F1.
pub fn run_local_only(cfg: &ScenarioConfig, seed: u64) -> Result<Vec<(usize, f64)>> {
    let data = resolve_dataset(cfg, seed)?;
    let total_epochs = cfg.rounds * cfg.learning.epochs;
    let learning = LearningConfig {
        epochs: total_epochs,
        ..cfg.learning.clone()
    };
    let mut out = Vec::new();
    for part in &data.partitions {
        let model = ModelParams::zeros(data.d_x, data.num_classes);
        let mut rng = substream(seed, &[stream::TRAIN, u64::MAX - 1, part.client_id as u64]);
        let (delta, _) = local_train(&model, &part.train, &learning, part.client_id, &mut rng)?;
        let trained = ModelParams {
            weights: model.weights.iter().zip(&delta.delta).map(|(w, d)| w + d).collect(),
            ..model
        };
        out.push((part.client_id, evaluate(&trained, &data.global_heldout)?.macro_f1));
    }
    Ok(out)
}

/// Break-even comparison: analytic mode passes the spec through; measured
/// mode substitutes the run's fleet averages for rho, rounds, wire size, and
/// training energy.
pub fn compare_against_streaming(
    spec: &BreakEvenSpec,
    measured: Option<&MeasuredAverages>,
) -> Result<BreakEvenReport> {
    let resolved = match measured {
        None => spec.clone(),
        Some(m) => BreakEvenSpec {
            rounds: m.per_client_attempts,
            s_per_round: m.s_per_update,
            q_bits: m.q_bits,
            rho: m.mean_rho_selected,
            e_train_per_round_j: m.mean_e_train_j,
            ..spec.clone()
        },
    };
    crate::energy::break_even_report(&resolved)
}

fn join_ids(ids: &[usize]) -> String {
    ids.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

fn join_f64(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";")
}

/// Per-round metrics CSV:
/// `round,policy,selected,delivered,macro_f1,worst_location_f1,success_rate,
/// round_energy_j,cum_energy_j,disparity,pi_<id>...,h_<id>...`
/// with id lists joined by ';'.
pub fn metrics_csv(records: &[MetricsRecord], num_clients: usize) -> String {
    let mut out = String::new();
    out.push_str("round,policy,selected,delivered,macro_f1,worst_location_f1,success_rate,round_energy_j,cum_energy_j,disparity");
    for i in 0..num_clients {
        let _ = write!(out, ",pi_{i}");
    }
    for i in 0..num_clients {
        let _ = write!(out, ",h_{i}");
    }
    out.push('\n');
    for rec in records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            rec.round,
            rec.policy,
            join_ids(&rec.selected),
            join_ids(&rec.delivered),
            rec.macro_f1,
            rec.worst_location_f1,
            rec.success_rate,
            rec.round_energy_j,
            rec.cum_energy_j,
            rec.disparity
        );
        for v in &rec.pi {
            let _ = write!(out, ",{v}");
        }
        for v in &rec.debt {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Scheduler decision CSV:
/// `round,selection_order,marginal_gains,logdet_gains,feasible_<id>...`
/// with ';'-joined lists (gains empty for non-greedy policies).
pub fn decisions_csv(traces: &[RoundTrace], num_clients: usize) -> String {
    let mut out = String::new();
    out.push_str("round,selection_order,marginal_gains,logdet_gains");
    for i in 0..num_clients {
        let _ = write!(out, ",feasible_{i}");
    }
    out.push('\n');
    for trace in traces {
        let (gains, logdets) = match &trace.greedy {
            Some(g) => (join_f64(&g.marginal_gains), join_f64(&g.logdet_gains)),
            None => (String::new(), String::new()),
        };
        let _ = write!(
            out,
            "{},{},{},{}",
            trace.round,
            join_ids(&trace.selected),
            gains,
            logdets
        );
        for f in &trace.feasibility {
            let _ = write!(out, ",{}", u8::from(f.feasible));
        }
        out.push('\n');
    }
    out
}

/// Break-even CSV: `horizon_s,e_stream_j,e_fl_j,ratio` rows plus a crossing
/// summary line.
pub fn break_even_csv(report: &BreakEvenReport) -> String {
    let mut out = String::from("horizon_s,e_stream_j,e_fl_j,ratio\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            row.horizon_s, row.e_stream_j, row.e_fl_j, row.ratio
        );
    }
    let _ = writeln!(
        out,
        "# crossing_horizon_s={} e_fl_j={}",
        report.crossing_horizon_s, report.e_fl_j
    );
    out
}
