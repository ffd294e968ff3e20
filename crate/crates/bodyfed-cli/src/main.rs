//! Command-line front end: fit channel models, run scenarios, sweep
//! parameters, compute the streaming break-even, and merge run reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/config error, 3 runtime
//! failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use bodyfed_core::channel::{
    fit_loss_model, parse_loss_csv, ChannelModel, FitFamily, FitOptions, LinkBudget, PostureChain,
    PostureState, RateTier, DEFAULT_POSTURE,
};
use bodyfed_core::energy::BreakEvenSpec;
use bodyfed_core::harness::{
    break_even_csv, compare_against_streaming, decisions_csv, metrics_csv, run_experiment,
    ExperimentSummary, MeasuredAverages, RunResult, ScenarioConfig,
};
use bodyfed_core::{Error, ExecMode, Result};

#[derive(Parser)]
#[command(
    name = "bodyfed",
    version = bodyfed_core::VERSION,
    about = "Deterministic simulator for federated learning over emulated body-channel links"
)]
struct Cli {
    /// Force the sequential execution path (results are identical either way).
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Lognormal,
    Empirical,
}

#[derive(Subcommand)]
enum Command {
    /// Fit per-(location, posture) loss distributions from a loss CSV and
    /// write the channel model JSON.
    FitChannel {
        /// CSV with header location,posture,loss_db.
        #[arg(long)]
        input: PathBuf,
        /// Output channel JSON path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "lognormal")]
        family: FamilyArg,
        /// Minimum samples per (location, posture) group.
        #[arg(long, default_value_t = 8)]
        min_samples: usize,
        /// Optional posture-chain JSON (array of posture states); default is
        /// a uniform chain over the posture labels found in the samples.
        #[arg(long)]
        postures: Option<PathBuf>,
        /// Optional link-budget JSON; a documented default budget otherwise.
        #[arg(long)]
        budget: Option<PathBuf>,
        /// Emulation carrier frequency recorded in the model (metadata).
        #[arg(long)]
        frequency_hz: Option<f64>,
    },
    /// Run one scenario seed; writes metrics.csv, decisions.csv, and
    /// summary.json into the output directory.
    Run {
        /// Scenario JSON.
        #[arg(long)]
        config: PathBuf,
        /// Seed override; defaults to the scenario's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-product sweep of one dotted config path over values and seeds;
    /// one run directory per cell plus a consolidated sweep_summary.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Dotted path into the scenario JSON, e.g. scheduler.k_max.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Raw-streaming vs FL break-even report.
    Breakeven {
        /// Break-even spec JSON.
        #[arg(long)]
        config: PathBuf,
        /// Use the spec as-is instead of measured run averages.
        #[arg(long)]
        analytic: bool,
        /// Run directory with a summary.json (required without --analytic).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run summaries into one CSV keyed by (policy, seed).
    Report {
        /// Comma-separated run directories.
        #[arg(long = "in", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    match execute(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

/// Read an input file, classifying missing/unreadable inputs as config
/// errors (exit 2) rather than runtime failures.
fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

fn write_pretty_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Default link budget used when fit-channel is not given one.
fn default_link_budget() -> LinkBudget {
    LinkBudget {
        loss_midpoint_db: 70.0,
        loss_slope_db: 4.0,
        eps_floor: 0.0,
        eps_ceil: 0.95,
        rate_tiers: vec![
            RateTier { loss_threshold_db: 60.0, rate_bits_per_s: 250_000.0 },
            RateTier { loss_threshold_db: 75.0, rate_bits_per_s: 100_000.0 },
            RateTier { loss_threshold_db: 1e9, rate_bits_per_s: 50_000.0 },
        ],
        eta_bit_tx_j: 2e-9,
        eta_bit_rx_j: 1e-9,
        packet_payload_bits: 256,
        retry_cap: 8,
    }
}

fn execute(command: Command, exec: ExecMode) -> Result<()> {
    match command {
        Command::FitChannel {
            input,
            out,
            family,
            min_samples,
            postures,
            budget,
            frequency_hz,
        } => cmd_fit_channel(&input, &out, family, min_samples, postures, budget, frequency_hz),
        Command::Run { config, seed, out } => cmd_run(&config, seed, &out, exec),
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => cmd_sweep(&config, &param, &values, &seeds, &out, exec),
        Command::Breakeven {
            config,
            analytic,
            run_dir,
            out,
        } => cmd_breakeven(&config, analytic, run_dir.as_deref(), out.as_deref()),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit_channel(
    input: &Path,
    out: &Path,
    family: FamilyArg,
    min_samples: usize,
    postures: Option<PathBuf>,
    budget: Option<PathBuf>,
    frequency_hz: Option<f64>,
) -> Result<()> {
    let text = read_input(input)?;
    let samples = parse_loss_csv(&text, &input.to_string_lossy())?;
    let opts = FitOptions {
        family: match family {
            FamilyArg::Lognormal => FitFamily::Lognormal,
            FamilyArg::Empirical => FitFamily::Empirical,
        },
        min_samples,
    };
    let loss_model = fit_loss_model(&samples, &opts)?;

    let posture_states: Vec<PostureState> = match postures {
        Some(path) => serde_json::from_str(&read_input(&path)?)?,
        None => {
            // Uniform chain over whatever posture labels the samples carry.
            let mut labels: Vec<String> = samples
                .iter()
                .map(|s| {
                    s.posture
                        .clone()
                        .filter(|p| !p.is_empty())
                        .unwrap_or_else(|| DEFAULT_POSTURE.to_string())
                })
                .collect();
            labels.sort();
            labels.dedup();
            PostureChain::uniform(&labels)?.states
        }
    };
    let link_budget: LinkBudget = match budget {
        Some(path) => serde_json::from_str(&read_input(&path)?)?,
        None => default_link_budget(),
    };
    let model = ChannelModel {
        postures: posture_states,
        loss_model,
        link_budget,
        frequency_hz,
    };
    model.validate()?;
    write_pretty_json(out, &model)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Write one run's artifacts into a directory.
fn write_run_outputs(
    dir: &Path,
    results: &[RunResult],
    summary: &ExperimentSummary,
    num_clients: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for result in results {
        let suffix = if results.len() == 1 {
            String::new()
        } else {
            format!("_seed{}", result.summary.seed)
        };
        std::fs::write(
            dir.join(format!("metrics{suffix}.csv")),
            metrics_csv(&result.records, num_clients),
        )?;
        std::fs::write(
            dir.join(format!("decisions{suffix}.csv")),
            decisions_csv(&result.traces, num_clients),
        )?;
    }
    write_pretty_json(&dir.join("summary.json"), summary)?;
    Ok(())
}

fn num_clients_of(cfg: &ScenarioConfig, results: &[RunResult]) -> usize {
    results
        .first()
        .map(|r| r.records.first().map(|rec| rec.pi.len()).unwrap_or(0))
        .unwrap_or(match &cfg.dataset {
            bodyfed_core::harness::DatasetSource::Synthetic(s) => s.locations.len(),
            _ => 0,
        })
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, exec: ExecMode) -> Result<()> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    let seeds = [cfg.master_seed];
    let (results, summary) = run_experiment(&cfg, &seeds, exec)?;
    let n = num_clients_of(&cfg, &results);
    write_run_outputs(out, &results, &summary, n)?;
    println!(
        "policy {} seed {}: final macro-F1 {:.4}, worst-location F1 {:.4}",
        summary.policy,
        cfg.master_seed,
        summary.per_seed[0].final_macro_f1,
        summary.per_seed[0].final_worst_location_f1
    );
    Ok(())
}

/// Set a dotted path inside a JSON document; errors when the path is absent.
fn set_dotted(value: &mut serde_json::Value, path: &str, new_value: serde_json::Value) -> Result<()> {
    let mut cursor = value;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::InvalidConfig(format!("config path {path:?}: {seg:?} is not an object"))
        })?;
        if last {
            if !obj.contains_key(*seg) {
                return Err(Error::InvalidConfig(format!(
                    "config path {path:?} not found (missing key {seg:?})"
                )));
            }
            obj.insert((*seg).to_string(), new_value);
            return Ok(());
        }
        cursor = obj.get_mut(*seg).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "config path {path:?} not found (missing key {seg:?})"
            ))
        })?;
    }
    Ok(())
}

fn sanitize_for_dir(value: &str) -> String {
    value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_sweep(
    config: &Path,
    param: &str,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    exec: ExecMode,
) -> Result<()> {
    let raw = read_input(config)?;
    let base_value: serde_json::Value = serde_json::from_str(&raw)?;
    let base_dir = config.parent().unwrap_or_else(|| Path::new("."));

    // Materialize every cell config up front so path errors surface before
    // any run starts.
    let mut cells: Vec<(String, u64, ScenarioConfig)> = Vec::new();
    for value_text in values {
        let mut doc = base_value.clone();
        let parsed: serde_json::Value = serde_json::from_str(value_text)
            .unwrap_or_else(|_| serde_json::Value::String(value_text.clone()));
        set_dotted(&mut doc, param, parsed)?;
        let mut cfg: ScenarioConfig = serde_json::from_value(doc)?;
        resolve_config_paths(&mut cfg, base_dir);
        cfg.validate()?;
        for &seed in seeds {
            let mut cell_cfg = cfg.clone();
            cell_cfg.master_seed = seed;
            cells.push((value_text.clone(), seed, cell_cfg));
        }
    }

    std::fs::create_dir_all(out)?;
    let mut rows = String::from("param,value,seed,policy,final_macro_f1,final_worst_location_f1,rounds_to_target,energy_to_target_j,total_energy_j,mean_success_rate,final_disparity\n");
    type CellOutput = (String, u64, Vec<RunResult>, ExperimentSummary);
    let results: Vec<Result<CellOutput>> =
        bodyfed_core::parallel::map_slice(exec, &cells, |(value_text, seed, cfg)| {
            let (results, summary) = run_experiment(cfg, &[*seed], exec)?;
            Ok((value_text.clone(), *seed, results, summary))
        });
    for result in results {
        let (value_text, seed, results, summary) = result?;
        let cell_dir = out.join(format!(
            "{}={}__seed={}",
            sanitize_for_dir(param),
            sanitize_for_dir(&value_text),
            seed
        ));
        let n = num_clients_of(&summary.config_echo, &results);
        write_run_outputs(&cell_dir, &results, &summary, n)?;
        let s = &summary.per_seed[0];
        let _ = writeln!(
            rows,
            "{},{},{},{},{},{},{},{},{},{},{}",
            param,
            value_text,
            seed,
            s.policy,
            s.final_macro_f1,
            s.final_worst_location_f1,
            s.rounds_to_target.map(|r| r.to_string()).unwrap_or_else(|| "not_reached".into()),
            s.energy_to_target_j.map(|e| e.to_string()).unwrap_or_else(|| "not_reached".into()),
            s.total_energy_j,
            s.mean_success_rate,
            s.final_disparity
        );
    }
    std::fs::write(out.join("sweep_summary.csv"), rows)?;
    println!("wrote {} cells under {}", cells.len(), out.display());
    Ok(())
}

/// Resolve relative channel/dataset paths against the config's directory
/// (mirrors ScenarioConfig::load for configs built in memory).
fn resolve_config_paths(cfg: &mut ScenarioConfig, base: &Path) {
    use bodyfed_core::harness::{ChannelSource, DatasetSource};
    if let ChannelSource::Path(p) = &cfg.channel {
        if Path::new(p).is_relative() {
            cfg.channel = ChannelSource::Path(base.join(p).to_string_lossy().into_owned());
        }
    }
    if let DatasetSource::Csv { path, .. } = &mut cfg.dataset {
        if Path::new(path.as_str()).is_relative() {
            *path = base.join(path.as_str()).to_string_lossy().into_owned();
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn cmd_breakeven(
    config: &Path,
    analytic: bool,
    run_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let spec: BreakEvenSpec = serde_json::from_str(&read_input(config)?)?;
    let report = if analytic {
        compare_against_streaming(&spec, None)?
    } else {
        let dir = run_dir.ok_or_else(|| {
            Error::InvalidConfig("measured mode requires --run-dir (or pass --analytic)".into())
        })?;
        let summary_path = dir.join("summary.json");
        let summary: ExperimentSummary = serde_json::from_str(&read_input(&summary_path)?)?;
        // Fleet averages across seeds, equally weighted.
        let measured = MeasuredAverages {
            mean_rho_selected: mean(summary.per_seed.iter().map(|s| s.measured.mean_rho_selected)),
            mean_e_train_j: mean(summary.per_seed.iter().map(|s| s.measured.mean_e_train_j)),
            attempts: summary.per_seed.iter().map(|s| s.measured.attempts).sum(),
            delivered_count: summary.per_seed.iter().map(|s| s.measured.delivered_count).sum(),
            per_client_attempts: mean(
                summary.per_seed.iter().map(|s| s.measured.per_client_attempts),
            ),
            s_per_update: mean(summary.per_seed.iter().map(|s| s.measured.s_per_update)),
            q_bits: mean(summary.per_seed.iter().map(|s| s.measured.q_bits)),
            payload_bits: summary
                .per_seed
                .first()
                .map(|s| s.measured.payload_bits)
                .unwrap_or(0),
        };
        compare_against_streaming(&spec, Some(&measured))?
    };
    let csv = break_even_csv(&report);
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("no input directories".into()));
    }
    let mut rows: Vec<(String, u64, String)> = Vec::new();
    for dir in inputs {
        let summary_path = dir.join("summary.json");
        let summary: ExperimentSummary = serde_json::from_str(&read_input(&summary_path)?)?;
        for s in &summary.per_seed {
            let line = format!(
                "{},{},{},{},{},{},{},{},{}",
                s.policy,
                s.seed,
                s.final_macro_f1,
                s.final_worst_location_f1,
                s.rounds_to_target.map(|r| r.to_string()).unwrap_or_else(|| "not_reached".into()),
                s.energy_to_target_j.map(|e| e.to_string()).unwrap_or_else(|| "not_reached".into()),
                s.total_energy_j,
                s.mean_success_rate,
                s.final_disparity
            );
            rows.push((s.policy.clone(), s.seed, line));
        }
    }
    rows.sort();
    let mut csv = String::from("policy,seed,final_macro_f1,final_worst_location_f1,rounds_to_target,energy_to_target_j,total_energy_j,mean_success_rate,final_disparity\n");
    for (_, _, line) in rows {
        csv.push_str(&line);
        csv.push('\n');
    }
    std::fs::write(out, csv)?;
    println!("wrote {}", out.display());
    Ok(())
}
