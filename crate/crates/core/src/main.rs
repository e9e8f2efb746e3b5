use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use vrcast::channel::sample_channel;
use vrcast::harness::config::{ExperimentConfig, Scenario, Scheme, Sweep, SweepParam};
use vrcast::harness::experiment::{
    base_directions, build_instance, dc_settings, plan_scheme, solve_plan, sweep_setups,
};
use vrcast::harness::output::{write_csv, write_outputs, ExperimentOutput};
use vrcast::harness::{load_config, run_experiment};
use vrcast::transcoding::QualitySelection;

#[derive(Parser)]
#[command(name = "vrcast", version, about = "Multicast power minimization for tiled 360° video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the tile partition induced by the configured viewing directions.
    Partition {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve one channel draw with one scheme.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a Monte Carlo sweep and write CSV (and a JSON mirror with --out).
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_scenario)]
        scenario: Option<Scenario>,
        /// Comma-separated scheme list.
        #[arg(long, value_delimiter = ',', value_parser = parse_scheme)]
        scheme: Vec<Scheme>,
        #[arg(long, value_parser = parse_sweep)]
        sweep: Option<SweepParam>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<f64>,
        #[arg(long)]
        draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output path; `.csv` and `.json` are written side by side.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration file and report the first problem with its field path.
    ValidateConfig { path: PathBuf },
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    match s {
        "no_transcode" => Ok(Scenario::NoTranscode),
        "transcode" => Ok(Scenario::Transcode),
        _ => Err("expected no_transcode or transcode".into()),
    }
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| format!("unknown scheme {s:?}"))
}

fn parse_sweep(s: &str) -> Result<SweepParam, String> {
    SweepParam::parse(s).ok_or_else(|| "expected K, M, delta, tau or none".into())
}

fn default_schemes(scenario: Scenario) -> Vec<Scheme> {
    let mut s =
        vec![Scheme::OptimalSmallGroups, Scheme::Asymptotic, Scheme::DcGeneral, Scheme::Baseline1, Scheme::Baseline2];
    if scenario == Scenario::Transcode {
        s.push(Scheme::Baseline3);
    }
    s
}

fn base_config(path: Option<&PathBuf>, scenario: Option<Scenario>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p)?,
        None => {
            let scenario = scenario.unwrap_or(Scenario::NoTranscode);
            ExperimentConfig::standard(scenario, default_schemes(scenario))
        }
    };
    if let Some(s) = scenario {
        cfg.scenario = s;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct CellReport {
    users: String,
    tiles: Vec<(u32, u32)>,
}

fn partition(config: Option<PathBuf>) -> Result<()> {
    let cfg = base_config(config.as_ref(), None)?;
    let base = base_directions(&cfg)?;
    let setup = &sweep_setups(&ExperimentConfig { sweep: Sweep::default(), ..cfg.clone() }, &base)[0];
    let inst = build_instance(&cfg, setup)?;
    let cells: Vec<CellReport> = inst
        .partition
        .parts
        .iter()
        .map(|(s, t)| CellReport { users: s.to_string(), tiles: t.iter().map(|t| (t.h, t.v)).collect() })
        .collect();
    let directions: Vec<(f64, f64)> = base.iter().map(|d| (d.yaw(), d.pitch())).collect();
    let report = serde_json::json!({
        "grid": [cfg.grid.yaw_tiles, cfg.grid.pitch_tiles],
        "directions_deg": directions,
        "cells": cells,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[derive(Serialize)]
struct MessageReport {
    users: String,
    level: usize,
    demand_bps: f64,
    delivered_bps: f64,
    subcarriers: usize,
    power_w: f64,
}

#[derive(Serialize)]
struct SolveReport {
    scenario: Scenario,
    scheme: Scheme,
    seed: u64,
    design: vrcast::realization::BeamDesign,
    objective_w: f64,
    transmit_power_w: f64,
    transcode_power_w: f64,
    messages: Vec<MessageReport>,
    selection: Option<QualitySelection>,
}

fn solve(config: Option<PathBuf>, scenario: Option<Scenario>, scheme: Scheme, seed: Option<u64>) -> Result<()> {
    let mut cfg = base_config(config.as_ref(), scenario)?;
    cfg.scheme = vec![scheme];
    cfg.sweep = Sweep::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let base = base_directions(&cfg)?;
    let inst = build_instance(&cfg, &sweep_setups(&cfg, &base)[0])?;
    let draws = vec![sample_channel(cfg.seed, 0, &inst.params, inst.users.len())];
    let plan = plan_scheme(&cfg, scheme, &inst, &draws)?;
    let outcome = solve_plan(&plan, &inst, &draws, &dc_settings(&cfg))?.remove(0);
    let sol = &outcome.solution;
    let delivered = sol.delivered_bps();
    let messages = sol
        .messages
        .iter()
        .enumerate()
        .map(|(j, key)| {
            let mine = sol.subcarriers.iter().flatten().filter(|p| p.message == j);
            MessageReport {
                users: key.set.to_string(),
                level: key.level,
                demand_bps: sol.demands_bps[j],
                delivered_bps: delivered[j],
                subcarriers: mine.clone().count(),
                power_w: mine.map(|p| p.power_w).sum(),
            }
        })
        .collect();
    let report = SolveReport {
        scenario: cfg.scenario,
        scheme,
        seed: cfg.seed,
        design: outcome.design,
        objective_w: sol.objective_w + inst.params.alpha * plan.transcode_power_w,
        transmit_power_w: sol.objective_w,
        transcode_power_w: plan.transcode_power_w,
        messages,
        selection: plan.selection,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn experiment(
    config: Option<PathBuf>,
    scenario: Option<Scenario>,
    scheme: Vec<Scheme>,
    sweep: Option<SweepParam>,
    values: Vec<f64>,
    draws: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = base_config(config.as_ref(), scenario)?;
    if !scheme.is_empty() {
        cfg.scheme = scheme;
    }
    match (sweep, values.is_empty()) {
        (Some(param), _) => cfg.sweep = Sweep { param, values },
        (None, false) => cfg.sweep.values = values,
        (None, true) => {}
    }
    if let Some(d) = draws {
        cfg.draws = d;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let records = run_experiment(&cfg)?;
    match out {
        Some(path) => {
            write_outputs(&path, &ExperimentOutput { config: cfg, records })?;
            eprintln!("wrote {} and {}", path.with_extension("csv").display(), path.with_extension("json").display());
        }
        None => write_csv(&records, std::io::stdout().lock())?,
    }
    Ok(())
}

fn validate(path: PathBuf) -> Result<()> {
    let cfg = load_config(&path).with_context(|| format!("invalid config {}", path.display()))?;
    if let vrcast::harness::config::DirectionsSource::Csv(p) = &cfg.directions {
        if !p.exists() {
            bail!("directions file {} does not exist", p.display());
        }
    }
    println!(
        "ok: {} scheme(s), {} user(s), sweep {} over {} value(s), {} draw(s)",
        cfg.scheme.len(),
        cfg.users.len(),
        cfg.sweep.param.name(),
        cfg.sweep.values.len(),
        cfg.draws
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Partition { config } => partition(config),
        Command::Solve { config, scenario, scheme, seed } => solve(config, scenario, scheme, seed),
        Command::Experiment { config, scenario, scheme, sweep, values, draws, seed, out } => {
            experiment(config, scenario, scheme, sweep, values, draws, seed, out)
        }
        Command::ValidateConfig { path } => validate(path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
