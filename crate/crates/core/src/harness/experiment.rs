use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::config::{DirectionsSource, ExperimentConfig, Scenario, Scheme, SweepParam};
use super::HarnessError;
use crate::allocation::{AllocationSolution, Message, MessageKey};
use crate::channel::{sample_channel, ChannelRealization, SystemParams, UserProfile};
use crate::dcsolver::DcSettings;
use crate::geometry::{
    compute_partition, load_directions_csv, tiles_for_fov, FovSpec, TileGrid, UserSet, ViewingDirection,
};
use crate::realization::{solve_realization, BeamDesign, RealizationOutcome};
use crate::transcoding::{
    approx_quality_selection, enumerate_selections, evaluate_selection, solve_exhaustive_pruned, transcoding_power,
    InnerSolver, PenaltySettings, QualitySelection, TranscodeInstance, TwoTimescaleResult,
};

/// Pitch spread of synthetic directions, degrees.
pub const SYNTHETIC_PITCH_SD_DEG: f64 = 20.0;

// Keeps the direction stream apart from the channel streams of the same seed.
const DIRECTION_STREAM: u64 = 0x5EED_D1EC;

/// Orders directions along the yaw circle, starting just after the widest empty arc, so that the
/// first and last entries are the two ends of the cluster.
pub fn order_by_yaw(dirs: &[ViewingDirection]) -> Vec<ViewingDirection> {
    let mut sorted = dirs.to_vec();
    sorted.sort_by(|a, b| a.yaw().total_cmp(&b.yaw()));
    if sorted.len() < 2 {
        return sorted;
    }
    let n = sorted.len();
    let gap = |i: usize| (sorted[(i + 1) % n].yaw() - sorted[i].yaw()).rem_euclid(360.0);
    let widest = (0..n).max_by(|&a, &b| gap(a).total_cmp(&gap(b)).then(b.cmp(&a))).expect("nonempty");
    sorted.rotate_left((widest + 1) % n);
    sorted
}

/// Uniform yaw, pitch from a zero-mean normal clamped to the poles, ordered by [`order_by_yaw`].
pub fn synthetic_directions(seed: u64, count: usize) -> Vec<ViewingDirection> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DIRECTION_STREAM);
    let pitch = Normal::new(0.0, SYNTHETIC_PITCH_SD_DEG).expect("valid normal");
    let dirs: Vec<ViewingDirection> = (0..count)
        .map(|_| {
            let yaw = rng.gen_range(0.0..360.0);
            let p: f64 = rng.sample(pitch);
            ViewingDirection::new(yaw, p.clamp(-90.0, 90.0)).expect("valid direction")
        })
        .collect();
    order_by_yaw(&dirs)
}

/// Users before the middle index move by `+delta` in yaw, users after it by `-delta`.
pub fn concentrate(base: &[ViewingDirection], delta: f64) -> Vec<ViewingDirection> {
    let center = (base.len().max(1) - 1) / 2;
    let odd = base.len() % 2 == 1;
    base.iter()
        .enumerate()
        .map(|(i, d)| {
            if i < center || (!odd && i == center) {
                d.shifted_yaw(delta)
            } else if i > center {
                d.shifted_yaw(-delta)
            } else {
                *d
            }
        })
        .collect()
}

pub fn sweep_concentration(base: &[ViewingDirection], deltas: &[f64]) -> Vec<Vec<ViewingDirection>> {
    deltas.iter().map(|&d| concentrate(base, d)).collect()
}

/// Required levels spread around the middle level; `tau` large enough makes them all equal.
/// For five users and five levels this is `(min(τ,3), min(τ+1,3), 3, max(3,5−τ), max(3,6−τ))`.
pub fn similarity_levels(users: usize, tau: usize, levels: usize) -> Vec<usize> {
    let mid = 3.min(levels) as i64;
    let center = (users.max(1) as i64 - 1) / 2;
    let tau = tau as i64;
    (0..users as i64)
        .map(|i| {
            let o = i - center;
            let r = match o.cmp(&0) {
                std::cmp::Ordering::Less => mid.min(tau + mid - 1 + o),
                std::cmp::Ordering::Equal => mid,
                std::cmp::Ordering::Greater => mid.max(mid + 1 + o - tau),
            };
            r.clamp(1, levels as i64) as usize
        })
        .collect()
}

pub fn sweep_similarity(users: usize, taus: &[usize], levels: usize) -> Vec<Vec<usize>> {
    taus.iter().map(|&t| similarity_levels(users, t, levels)).collect()
}

/// Directions of every configured user, in user order.
pub fn base_directions(cfg: &ExperimentConfig) -> Result<Vec<ViewingDirection>, HarnessError> {
    let k = cfg.users.len();
    match &cfg.directions {
        DirectionsSource::Synthetic => Ok(synthetic_directions(cfg.seed, k)),
        DirectionsSource::Csv(path) => {
            let rows = load_directions_csv(path)?;
            if rows.len() < k {
                return Err(HarnessError::Input(format!(
                    "{} lists {} directions for {k} users",
                    path.display(),
                    rows.len()
                )));
            }
            Ok(rows.into_iter().take(k).map(|(_, d)| d).collect())
        }
    }
}

/// One sweep point.
#[derive(Clone, Debug)]
pub struct Setup {
    pub value: Option<f64>,
    pub params: SystemParams,
    pub users: Vec<UserProfile>,
    pub directions: Vec<ViewingDirection>,
}

pub fn sweep_setups(cfg: &ExperimentConfig, base: &[ViewingDirection]) -> Vec<Setup> {
    let plain = Setup { value: None, params: cfg.system, users: cfg.users.clone(), directions: base.to_vec() };
    if cfg.sweep.param == SweepParam::None {
        return vec![plain];
    }
    let levels = cfg.ladder.frame_rates_bps.len();
    cfg.sweep
        .values
        .iter()
        .map(|&v| {
            let mut s = Setup { value: Some(v), ..plain.clone() };
            match cfg.sweep.param {
                SweepParam::K => {
                    s.users.truncate(v as usize);
                    s.directions.truncate(v as usize);
                }
                SweepParam::M => s.params.antennas = v as usize,
                SweepParam::Delta => s.directions = concentrate(base, v),
                SweepParam::Tau => {
                    for (u, r) in s.users.iter_mut().zip(similarity_levels(base.len(), v as usize, levels)) {
                        u.level = r;
                    }
                }
                SweepParam::None => {}
            }
            s
        })
        .collect()
}

pub fn build_instance(cfg: &ExperimentConfig, setup: &Setup) -> Result<TranscodeInstance, HarnessError> {
    let grid = TileGrid::new(cfg.grid.yaw_tiles, cfg.grid.pitch_tiles)?;
    let fov = FovSpec::new(cfg.fov.width_deg, cfg.fov.height_deg, cfg.fov.margin_deg)?;
    let sets: Vec<_> = setup.directions.iter().map(|&d| tiles_for_fov(d, fov, grid)).collect();
    let inst = TranscodeInstance {
        partition: compute_partition(&sets)?,
        users: setup.users.clone(),
        ladder: cfg.tile_ladder(),
        params: setup.params,
    };
    inst.validate()?;
    Ok(inst)
}

/// Channels shared by every scheme at one sweep point.
pub fn sample_draws(seed: u64, draws: usize, params: &SystemParams, users: usize) -> Vec<ChannelRealization> {
    (0..draws as u64).into_par_iter().map(|d| sample_channel(seed, d, params, users)).collect()
}

/// One message per user carrying its whole tile set at its required level.
pub fn unicast_messages(inst: &TranscodeInstance) -> Vec<Message> {
    (0..inst.users.len())
        .map(|k| {
            let tiles: usize = inst.partition.per_user[k].iter().map(|s| inst.partition.cell_size(s)).sum();
            let level = inst.users[k].level;
            Message {
                key: MessageKey { set: UserSet::singleton(k), level },
                demand_bps: tiles as f64 * inst.ladder.rate(level),
                members: vec![k],
            }
        })
        .collect()
}

pub fn dc_settings(cfg: &ExperimentConfig) -> DcSettings {
    DcSettings { initial_points: cfg.solver.dc_initial_points, seed: cfg.seed, ..DcSettings::default() }
}

/// Unicast with per-user maximum ratio beams.
pub fn baseline1(
    inst: &TranscodeInstance,
    channel: &ChannelRealization,
    dc: &DcSettings,
) -> Result<AllocationSolution, HarnessError> {
    let r = solve_realization(
        channel,
        &unicast_messages(inst),
        &inst.betas(),
        &inst.params,
        BeamDesign::UnicastMrt,
        dc,
        None,
    )?;
    Ok(r.solution)
}

/// Natural multicast messages with group maximum ratio beams.
pub fn baseline2(
    inst: &TranscodeInstance,
    channel: &ChannelRealization,
    dc: &DcSettings,
) -> Result<AllocationSolution, HarnessError> {
    let messages = QualitySelection::natural(inst).messages(inst);
    let r = solve_realization(channel, &messages, &inst.betas(), &inst.params, BeamDesign::GroupMrt, dc, None)?;
    Ok(r.solution)
}

/// Every cell multicast at the highest level its members need; beams and allocation from the DC solver.
pub fn baseline3(
    inst: &TranscodeInstance,
    draws: &[ChannelRealization],
    dc: &DcSettings,
) -> Result<TwoTimescaleResult, HarnessError> {
    let solver = InnerSolver { design: BeamDesign::Dc, dc: dc.clone() };
    Ok(evaluate_selection(inst, &QualitySelection::cell_maximum(inst), draws, &solver)?)
}

/// Messages and beam design a scheme uses on every draw.
#[derive(Clone, Debug)]
pub struct SchemePlan {
    pub messages: Vec<Message>,
    pub design: BeamDesign,
    pub selection: Option<QualitySelection>,
    pub transcode_power_w: f64,
    /// Selections skipped by the exhaustive search bound.
    pub pruned: Option<usize>,
}

pub fn plan_scheme(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    inst: &TranscodeInstance,
    draws: &[ChannelRealization],
) -> Result<SchemePlan, HarnessError> {
    let fixed =
        |messages, design| SchemePlan { messages, design, selection: None, transcode_power_w: 0.0, pruned: None };
    let natural = || QualitySelection::natural(inst).messages(inst);
    let with_selection = |x: QualitySelection, design, pruned| SchemePlan {
        messages: x.messages(inst),
        design,
        transcode_power_w: transcoding_power(&x, &inst.partition, &inst.users),
        selection: Some(x),
        pruned,
    };
    Ok(match (cfg.scenario, scheme) {
        (_, Scheme::Baseline1) => fixed(unicast_messages(inst), BeamDesign::UnicastMrt),
        (_, Scheme::Baseline2) => fixed(natural(), BeamDesign::GroupMrt),
        (Scenario::NoTranscode, Scheme::OptimalSmallGroups) => fixed(natural(), BeamDesign::Relaxation),
        (Scenario::NoTranscode, Scheme::Asymptotic) => fixed(natural(), BeamDesign::Asymptotic),
        (Scenario::NoTranscode, Scheme::DcGeneral) => fixed(natural(), BeamDesign::Dc),
        (Scenario::NoTranscode, Scheme::Baseline3) => {
            return Err(HarnessError::Input("baseline3 needs the transcode scenario".into()))
        }
        (Scenario::Transcode, Scheme::OptimalSmallGroups | Scheme::Asymptotic) => {
            let design = if scheme == Scheme::Asymptotic { BeamDesign::Asymptotic } else { BeamDesign::Relaxation };
            let candidates = enumerate_selections(inst, true, u128::from(cfg.solver.enumeration_cap))?;
            let solver = InnerSolver { design, dc: dc_settings(cfg) };
            let found = solve_exhaustive_pruned(inst, &candidates, draws, &solver)?;
            let x = candidates.into_iter().nth(found.best_index).expect("index in range");
            with_selection(x, design, Some(found.pruned))
        }
        (Scenario::Transcode, Scheme::DcGeneral) => {
            let approx = approx_quality_selection(inst, &PenaltySettings::default())?;
            with_selection(approx.x, BeamDesign::Dc, None)
        }
        (Scenario::Transcode, Scheme::Baseline3) => {
            with_selection(QualitySelection::cell_maximum(inst), BeamDesign::Dc, None)
        }
    })
}

pub fn solve_plan(
    plan: &SchemePlan,
    inst: &TranscodeInstance,
    draws: &[ChannelRealization],
    dc: &DcSettings,
) -> Result<Vec<RealizationOutcome>, HarnessError> {
    let betas = inst.betas();
    Ok(draws
        .par_iter()
        .map(|h| solve_realization(h, &plan.messages, &betas, &inst.params, plan.design, dc, None))
        .collect::<Result<_, _>>()?)
}

/// Draw-level results of one scheme at one sweep point.
#[derive(Clone, Debug)]
pub struct SchemeRun {
    pub plan: SchemePlan,
    /// Transmit power plus weighted transcoding power, per draw.
    pub per_draw_w: Vec<f64>,
    pub outcomes: Vec<RealizationOutcome>,
    pub wall_time_ms: u64,
}

pub fn run_scheme(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    inst: &TranscodeInstance,
    draws: &[ChannelRealization],
) -> Result<SchemeRun, HarnessError> {
    let start = Instant::now();
    let dc = dc_settings(cfg);
    let plan = plan_scheme(cfg, scheme, inst, draws)?;
    let outcomes = solve_plan(&plan, inst, draws, &dc)?;
    let wall_time_ms = start.elapsed().as_millis() as u64;
    let extra = inst.params.alpha * plan.transcode_power_w;
    let per_draw_w = outcomes.iter().map(|o| o.solution.objective_w + extra).collect();
    Ok(SchemeRun { plan, per_draw_w, outcomes, wall_time_ms })
}

/// Sample mean and the half-width of its 95% Student-t interval; zero width for one draw.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMetadata {
    pub per_draw_w: Vec<f64>,
    pub transcode_power_w: f64,
    pub users: usize,
    pub antennas: usize,
    pub levels: Vec<usize>,
    pub directions: Vec<ViewingDirection>,
    pub messages: usize,
    /// Design actually used on each draw differs from the planned one on DC fallback.
    pub dc_fallback_draws: usize,
    pub rank_gt_one_blocks: usize,
    pub tie_count: usize,
    pub nonconverged_draws: usize,
    pub selection: Option<QualitySelection>,
    pub pruned_selections: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub scheme: Scheme,
    pub sweep_param: SweepParam,
    pub sweep_value: Option<f64>,
    pub avg_power_w: f64,
    pub ci95_w: f64,
    pub draws: usize,
    pub wall_time_ms: u64,
    pub flags: Vec<String>,
    #[serde(default)]
    pub metadata: RecordMetadata,
}

fn record(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    setup: &Setup,
    inst: &TranscodeInstance,
    run: SchemeRun,
) -> ExperimentRecord {
    let (avg, ci) = mean_ci95(&run.per_draw_w);
    let metadata = RecordMetadata {
        transcode_power_w: run.plan.transcode_power_w,
        users: inst.users.len(),
        antennas: inst.params.antennas,
        levels: inst.required_levels(),
        directions: setup.directions.clone(),
        messages: run.plan.messages.iter().filter(|m| m.demand_bps > 0.0).count(),
        dc_fallback_draws: run.outcomes.iter().filter(|o| o.design != run.plan.design).count(),
        rank_gt_one_blocks: run.outcomes.iter().map(|o| o.rank_gt_one).sum(),
        tie_count: run.outcomes.iter().map(|o| o.ties).sum(),
        nonconverged_draws: run.outcomes.iter().filter(|o| !o.converged).count(),
        selection: run.plan.selection.clone(),
        pruned_selections: run.plan.pruned,
        per_draw_w: run.per_draw_w,
    };
    let mut flags = Vec::new();
    let mut flag = |on: bool, name: &str| {
        if on {
            flags.push(name.to_string());
        }
    };
    flag(cfg.ladder_is_default(), "assumed_ladder");
    flag(cfg.directions == DirectionsSource::Synthetic, "synthetic_directions");
    flag(metadata.dc_fallback_draws > 0, "dc_fallback");
    flag(metadata.rank_gt_one_blocks > 0, "rank_gt_one");
    flag(metadata.tie_count > 0, "ties");
    flag(metadata.nonconverged_draws > 0, "not_converged");
    flag(cfg.draws == 1, "single_draw");
    ExperimentRecord {
        scheme,
        sweep_param: cfg.sweep.param,
        sweep_value: setup.value,
        avg_power_w: avg,
        ci95_w: ci,
        draws: cfg.draws,
        wall_time_ms: run.wall_time_ms,
        flags,
        metadata,
    }
}

/// Worker count from `VRCAST_THREADS`, if set.
pub fn thread_cap() -> Result<Option<usize>, HarnessError> {
    match std::env::var("VRCAST_THREADS") {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::Input(format!("VRCAST_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

/// One record per (sweep value, scheme), in that order. Every scheme at a sweep point sees the
/// same channel draws.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>, HarnessError> {
    cfg.validate()?;
    let work = || -> Result<Vec<ExperimentRecord>, HarnessError> {
        let base = base_directions(cfg)?;
        let mut out = Vec::new();
        for setup in sweep_setups(cfg, &base) {
            let inst = build_instance(cfg, &setup)?;
            let draws = sample_draws(cfg.seed, cfg.draws, &inst.params, inst.users.len());
            for &scheme in &cfg.scheme {
                let run = run_scheme(cfg, scheme, &inst, &draws)?;
                out.push(record(cfg, scheme, &setup, &inst, run));
            }
        }
        Ok(out)
    };
    match thread_cap()? {
        None => work(),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| HarnessError::Input(e.to_string()))?
            .install(work),
    }
}
