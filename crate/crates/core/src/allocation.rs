//! Subcarrier assignment and power/rate allocation for fixed per-subcarrier beam costs.
//!
//! Each message needs `demand` bit/s; on subcarrier `n` it costs `q[n]` watts of beam power per
//! unit of SNR. The dual subgradient picks multipliers and a binary assignment, after which
//! powers are recovered exactly by per-message water-filling and the assignment is polished by
//! a relocate/swap local search.

use std::f64::consts::LN_2;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamforming::BeamSolution;
use crate::channel::ChannelRealization;
use crate::geometry::UserSet;
use crate::numerics::C64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AllocError {
    #[error("invalid allocation input: {0}")]
    InvalidInput(String),
    #[error("{messages} messages with positive demand cannot share {subcarriers} subcarriers")]
    TooManyMessages { messages: usize, subcarriers: usize },
    #[error("no beam for message {message} on subcarrier {subcarrier}")]
    MissingBeam { message: usize, subcarrier: usize },
}

/// Message identity; ordering is by user set, then level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageKey {
    pub set: UserSet,
    pub level: usize,
}

/// A message with its receiving users, as indices into the channel realization.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    pub key: MessageKey,
    pub demand_bps: f64,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MessageDemand {
    pub key: MessageKey,
    /// bit/s; zero means the message is not transmitted.
    pub demand_bps: f64,
    /// Per-subcarrier beam cost.
    pub q: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AllocationSettings {
    pub max_iter: usize,
    /// Target max relative rate residual of the dual iterate.
    pub rate_tol: f64,
    /// Step scale of the multiplicative subgradient step.
    pub step_scale: f64,
    pub local_search: bool,
}

impl Default for AllocationSettings {
    fn default() -> Self {
        Self { max_iter: 10_000, rate_tol: 1e-3, step_scale: 1.0, local_search: true }
    }
}

/// Solution of the assignment/power problem. `power` sums to `total_power`.
#[derive(Clone, Debug)]
pub struct PowerAllocation {
    /// Owning message per subcarrier; `None` only when no message has positive demand.
    pub assignment: Vec<Option<usize>>,
    pub power: Vec<f64>,
    pub rate: Vec<f64>,
    /// Rate multipliers consistent with the recovered water levels.
    pub multipliers: Vec<f64>,
    pub total_power: f64,
    /// Dual function value at the subgradient's best multipliers; lower bound on `total_power`.
    pub dual_bound: f64,
    /// Subcarriers whose best metric was not unique at the final multipliers.
    pub ties: usize,
    pub dual_converged: bool,
    pub iterations: usize,
}

impl PowerAllocation {
    /// Average power across antennas normalization, `Σ P / M`.
    pub fn objective(&self, antennas: usize) -> f64 {
        self.total_power / antennas as f64
    }
}

/// Power above the channel floor at multiplier `lambda`.
pub fn metric_f(lambda: f64, q: f64, bandwidth_hz: f64) -> f64 {
    (bandwidth_hz * lambda / LN_2 - q).max(0.0)
}

/// Per-subcarrier Lagrangian benefit of serving the message at multiplier `lambda`.
pub fn metric_w(lambda: f64, q: f64, bandwidth_hz: f64) -> f64 {
    let f = metric_f(lambda, q, bandwidth_hz);
    if f <= 0.0 {
        return 0.0;
    }
    lambda * bandwidth_hz * ((f / q).ln_1p() / LN_2 - f / ((q + f) * LN_2))
}

#[derive(Clone, Debug)]
pub struct WaterFill {
    /// Common water level `ν`; powers are `[ν − q]⁺`.
    pub level: f64,
    pub powers: Vec<f64>,
    pub cost: f64,
}

/// Minimum total power delivering `bits_per_hz = demand / B` over subcarriers with costs `q`.
pub fn water_fill(q: &[f64], bits_per_hz: f64) -> WaterFill {
    if q.is_empty() {
        return WaterFill { level: f64::INFINITY, powers: vec![], cost: f64::INFINITY };
    }
    if bits_per_hz <= 0.0 {
        let floor = q.iter().copied().fold(f64::INFINITY, f64::min);
        return WaterFill { level: floor, powers: vec![0.0; q.len()], cost: 0.0 };
    }
    let mut order: Vec<usize> = (0..q.len()).collect();
    order.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
    let mut log_sum = 0.0;
    let mut log_level = 0.0;
    for (a, &i) in order.iter().enumerate() {
        log_sum += q[i].log2();
        log_level = (bits_per_hz + log_sum) / (a + 1) as f64;
        match order.get(a + 1) {
            Some(&next) if log_level > q[next].log2() => continue,
            _ => break,
        }
    }
    let level = log_level.exp2();
    let powers: Vec<f64> = q.iter().map(|&qi| (level - qi).max(0.0)).collect();
    let cost = powers.iter().sum();
    WaterFill { level, powers, cost }
}

fn validate(demands: &[MessageDemand], bandwidth_hz: f64) -> Result<usize, AllocError> {
    if !(bandwidth_hz > 0.0) || !bandwidth_hz.is_finite() {
        return Err(AllocError::InvalidInput("bandwidth must be positive".into()));
    }
    let n = demands.first().map_or(0, |d| d.q.len());
    if n == 0 {
        return Err(AllocError::InvalidInput("no subcarriers".into()));
    }
    for (j, d) in demands.iter().enumerate() {
        if d.q.len() != n {
            return Err(AllocError::InvalidInput(format!("message {j} has {} costs, expected {n}", d.q.len())));
        }
        if !(d.demand_bps >= 0.0) || !d.demand_bps.is_finite() {
            return Err(AllocError::InvalidInput(format!("message {j} demand must be finite and >= 0")));
        }
        if d.q.iter().any(|&q| !(q > 0.0) || !q.is_finite()) {
            return Err(AllocError::InvalidInput(format!("message {j} has a non-positive cost")));
        }
    }
    for w in demands.windows(2) {
        if w[0].key >= w[1].key {
            return Err(AllocError::InvalidInput("message keys must be strictly increasing".into()));
        }
    }
    Ok(n)
}

struct DualPass {
    lambda: Vec<f64>,
    assignment: Vec<usize>,
    dual_bound: f64,
    ties: usize,
    converged: bool,
    iterations: usize,
}

/// Best message per subcarrier with lowest-index tie-break; returns owner and whether tied.
fn argmax_metric(active: &[usize], demands: &[MessageDemand], lambda: &[f64], n: usize, b: f64) -> (usize, f64, bool) {
    let mut best = active[0];
    let mut best_w = metric_w(lambda[best], demands[best].q[n], b);
    let mut tied = false;
    for &j in &active[1..] {
        let w = metric_w(lambda[j], demands[j].q[n], b);
        let scale = w.abs().max(best_w.abs());
        if w > best_w + 1e-12 * scale {
            best = j;
            best_w = w;
            tied = false;
        } else if scale > 0.0 && (w - best_w).abs() <= 1e-12 * scale {
            tied = true;
        }
    }
    (best, best_w, tied)
}

fn dual_subgradient(
    active: &[usize],
    demands: &[MessageDemand],
    n_sub: usize,
    b: f64,
    s: &AllocationSettings,
) -> DualPass {
    let mut lambda = vec![0.0; demands.len()];
    for &j in active {
        let mut q = demands[j].q.clone();
        q.sort_by(f64::total_cmp);
        let med = q[q.len() / 2];
        let share = demands[j].demand_bps / (n_sub as f64 * b);
        lambda[j] = med * LN_2 / b * share.exp2();
    }
    let mut best = DualPass {
        lambda: lambda.clone(),
        assignment: vec![active[0]; n_sub],
        dual_bound: f64::NEG_INFINITY,
        ties: 0,
        converged: false,
        iterations: 0,
    };
    let mut since_improve = 0;
    let mut rate = vec![0.0; demands.len()];
    for t in 0..s.max_iter {
        rate.iter_mut().for_each(|r| *r = 0.0);
        let mut assignment = Vec::with_capacity(n_sub);
        let mut ties = 0;
        let mut dual = active.iter().map(|&j| lambda[j] * demands[j].demand_bps).sum::<f64>();
        for n in 0..n_sub {
            let (j, w, tied) = argmax_metric(active, demands, &lambda, n, b);
            ties += tied as usize;
            dual -= w;
            let f = metric_f(lambda[j], demands[j].q[n], b);
            rate[j] += b * (f / demands[j].q[n]).ln_1p() / LN_2;
            assignment.push(j);
        }
        let residual = active
            .iter()
            .map(|&j| ((rate[j] - demands[j].demand_bps) / demands[j].demand_bps).abs())
            .fold(0.0, f64::max);
        if dual > best.dual_bound * (1.0 + 1e-12) + 1e-300 || best.dual_bound == f64::NEG_INFINITY {
            since_improve = 0;
        } else {
            since_improve += 1;
        }
        if dual >= best.dual_bound {
            best.lambda.clone_from(&lambda);
            best.assignment = assignment;
            best.dual_bound = dual;
            best.ties = ties;
        }
        best.iterations = t + 1;
        if residual < s.rate_tol {
            best.converged = true;
            break;
        }
        if since_improve > 1000 {
            break;
        }
        let step = s.step_scale / (t + 1) as f64;
        for &j in active {
            let g = ((demands[j].demand_bps - rate[j]) / demands[j].demand_bps).clamp(-1.0, 1.0);
            lambda[j] *= (step * g).exp();
        }
    }
    best
}

/// Dual value and argmax assignment at `lambda`.
fn dual_value(
    active: &[usize],
    demands: &[MessageDemand],
    lambda: &[f64],
    n_sub: usize,
    b: f64,
) -> (f64, Vec<usize>, usize) {
    let mut dual = active.iter().map(|&j| lambda[j] * demands[j].demand_bps).sum::<f64>();
    let mut assignment = Vec::with_capacity(n_sub);
    let mut ties = 0;
    for n in 0..n_sub {
        let (j, w, tied) = argmax_metric(active, demands, lambda, n, b);
        ties += tied as usize;
        dual -= w;
        assignment.push(j);
    }
    (dual, assignment, ties)
}

/// Cyclic exact maximization of the dual along one multiplier at a time.
fn coordinate_ascent(
    active: &[usize],
    demands: &[MessageDemand],
    n_sub: usize,
    b: f64,
    pass: &mut DualPass,
    sweeps: usize,
) {
    let mut lambda = pass.lambda.clone();
    for _ in 0..sweeps {
        let before = pass.dual_bound;
        for &j in active {
            let others: Vec<f64> = (0..n_sub)
                .map(|n| {
                    active
                        .iter()
                        .filter(|&&i| i != j)
                        .map(|&i| metric_w(lambda[i], demands[i].q[n], b))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            // Rate collected at multiplier `l` minus the demand; nondecreasing in `l`.
            let excess = |l: f64| -> f64 {
                let mut r = 0.0;
                for n in 0..n_sub {
                    if metric_w(l, demands[j].q[n], b) > others[n] {
                        r += b * (metric_f(l, demands[j].q[n], b) / demands[j].q[n]).ln_1p() / LN_2;
                    }
                }
                r - demands[j].demand_bps
            };
            let (mut lo, mut hi) = (lambda[j], lambda[j]);
            while excess(lo) >= 0.0 && lo > 1e-300 {
                lo /= 4.0;
            }
            while excess(hi) < 0.0 && hi < 1e300 {
                hi *= 4.0;
            }
            for _ in 0..80 {
                let mid = (lo * hi).sqrt();
                if excess(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi / lo - 1.0 < 1e-12 {
                    break;
                }
            }
            lambda[j] = (lo * hi).sqrt();
        }
        let (dual, assignment, ties) = dual_value(active, demands, &lambda, n_sub, b);
        if dual > pass.dual_bound {
            pass.lambda.clone_from(&lambda);
            pass.dual_bound = dual;
            pass.assignment = assignment;
            pass.ties = ties;
        }
        if pass.dual_bound <= before * (1.0 + 1e-9) {
            break;
        }
    }
}

fn subset_cost(demand: &MessageDemand, subs: &[usize], b: f64) -> f64 {
    if demand.demand_bps <= 0.0 {
        return 0.0;
    }
    let q: Vec<f64> = subs.iter().map(|&n| demand.q[n]).collect();
    water_fill(&q, demand.demand_bps / b).cost
}

fn owned(assignment: &[usize], j: usize) -> Vec<usize> {
    assignment.iter().enumerate().filter(|(_, &o)| o == j).map(|(n, _)| n).collect()
}

/// Gives every active message at least one subcarrier, cheapest reassignment first.
fn repair(assignment: &mut [usize], active: &[usize], demands: &[MessageDemand], b: f64) {
    for &j in active {
        if assignment.contains(&j) {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for n in 0..assignment.len() {
            let o = assignment[n];
            let mut rest = owned(assignment, o);
            if rest.len() < 2 {
                continue;
            }
            let before = subset_cost(&demands[o], &rest, b);
            rest.retain(|&m| m != n);
            let delta = subset_cost(&demands[o], &rest, b) - before + subset_cost(&demands[j], &[n], b);
            if best.is_none_or(|(d, _)| delta < d) {
                best = Some((delta, n));
            }
        }
        if let Some((_, n)) = best {
            assignment[n] = j;
        }
    }
}

/// Relocate and swap moves until no move lowers the total cost.
fn local_search(assignment: &mut [usize], active: &[usize], demands: &[MessageDemand], b: f64) {
    let n_sub = assignment.len();
    let mut sets: Vec<Vec<usize>> = (0..demands.len()).map(|j| owned(assignment, j)).collect();
    let mut cost: Vec<f64> = (0..demands.len()).map(|j| subset_cost(&demands[j], &sets[j], b)).collect();
    let improves = |old: f64, new: f64| new < old - 1e-12 * old.abs().max(1e-300);
    for _ in 0..100 {
        let mut moved = false;
        for n in 0..n_sub {
            let a = assignment[n];
            if sets[a].len() < 2 && demands[a].demand_bps > 0.0 {
                continue;
            }
            let without: Vec<usize> = sets[a].iter().copied().filter(|&m| m != n).collect();
            let ca = subset_cost(&demands[a], &without, b);
            for &j in active {
                if j == a {
                    continue;
                }
                let mut with = sets[j].clone();
                with.push(n);
                let cj = subset_cost(&demands[j], &with, b);
                if improves(cost[a] + cost[j], ca + cj) {
                    assignment[n] = j;
                    sets[a] = without;
                    with.sort_unstable();
                    sets[j] = with;
                    cost[a] = ca;
                    cost[j] = cj;
                    moved = true;
                    break;
                }
            }
        }
        for n1 in 0..n_sub {
            for n2 in n1 + 1..n_sub {
                let (a, c) = (assignment[n1], assignment[n2]);
                if a == c {
                    continue;
                }
                let sa: Vec<usize> = sets[a].iter().map(|&m| if m == n1 { n2 } else { m }).collect();
                let sc: Vec<usize> = sets[c].iter().map(|&m| if m == n2 { n1 } else { m }).collect();
                let (ca, cc) = (subset_cost(&demands[a], &sa, b), subset_cost(&demands[c], &sc, b));
                if improves(cost[a] + cost[c], ca + cc) {
                    assignment[n1] = c;
                    assignment[n2] = a;
                    sets[a] = sa;
                    sets[c] = sc;
                    cost[a] = ca;
                    cost[c] = cc;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Exact powers, rates and water levels for a fixed assignment.
pub fn powers_for_assignment(
    demands: &[MessageDemand],
    assignment: &[Option<usize>],
    bandwidth_hz: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n_sub = assignment.len();
    let mut power = vec![0.0; n_sub];
    let mut rate = vec![0.0; n_sub];
    let mut multipliers = vec![0.0; demands.len()];
    for (j, d) in demands.iter().enumerate() {
        let subs: Vec<usize> = (0..n_sub).filter(|&n| assignment[n] == Some(j)).collect();
        if subs.is_empty() || d.demand_bps <= 0.0 {
            continue;
        }
        let q: Vec<f64> = subs.iter().map(|&n| d.q[n]).collect();
        let wf = water_fill(&q, d.demand_bps / bandwidth_hz);
        multipliers[j] = wf.level * LN_2 / bandwidth_hz;
        for (i, &n) in subs.iter().enumerate() {
            power[n] = wf.powers[i];
            rate[n] = bandwidth_hz * (wf.powers[i] / q[i]).ln_1p() / LN_2;
        }
    }
    (power, rate, multipliers)
}

/// Assigns subcarriers and powers minimizing total power subject to every message's demand.
/// `demands` must be sorted by key; this order is the tie-break.
pub fn solve_allocation(demands: &[MessageDemand], bandwidth_hz: f64) -> Result<PowerAllocation, AllocError> {
    solve_allocation_with(demands, bandwidth_hz, &AllocationSettings::default())
}

pub fn solve_allocation_with(
    demands: &[MessageDemand],
    bandwidth_hz: f64,
    settings: &AllocationSettings,
) -> Result<PowerAllocation, AllocError> {
    let n_sub = validate(demands, bandwidth_hz)?;
    let active: Vec<usize> = (0..demands.len()).filter(|&j| demands[j].demand_bps > 0.0).collect();
    if active.is_empty() {
        return Ok(PowerAllocation {
            assignment: vec![None; n_sub],
            power: vec![0.0; n_sub],
            rate: vec![0.0; n_sub],
            multipliers: vec![0.0; demands.len()],
            total_power: 0.0,
            dual_bound: 0.0,
            ties: 0,
            dual_converged: true,
            iterations: 0,
        });
    }
    if active.len() > n_sub {
        return Err(AllocError::TooManyMessages { messages: active.len(), subcarriers: n_sub });
    }
    let mut pass = dual_subgradient(&active, demands, n_sub, bandwidth_hz, settings);
    let mut starts = vec![pass.assignment.clone()];
    if !pass.converged {
        coordinate_ascent(&active, demands, n_sub, bandwidth_hz, &mut pass, 200);
        if pass.assignment != starts[0] {
            starts.push(pass.assignment.clone());
        }
    }
    let mut best: Option<(f64, Vec<Option<usize>>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    for mut assignment in starts {
        repair(&mut assignment, &active, demands, bandwidth_hz);
        if settings.local_search {
            local_search(&mut assignment, &active, demands, bandwidth_hz);
        }
        let assignment: Vec<Option<usize>> = assignment.into_iter().map(Some).collect();
        let (power, rate, multipliers) = powers_for_assignment(demands, &assignment, bandwidth_hz);
        let total: f64 = power.iter().sum();
        if best.as_ref().is_none_or(|b| total < b.0) {
            best = Some((total, assignment, power, rate, multipliers));
        }
    }
    let (total_power, assignment, power, rate, multipliers) = best.expect("at least one start");
    Ok(PowerAllocation {
        assignment,
        power,
        rate,
        multipliers,
        total_power,
        dual_bound: pass.dual_bound.max(0.0),
        ties: pass.ties,
        dual_converged: pass.converged,
        iterations: pass.iterations,
    })
}

/// Per-subcarrier transmit plan: owning message, beam power `η`, rate and unit beam.
#[derive(Clone, Debug)]
pub struct SubcarrierPlan {
    pub message: usize,
    pub power_w: f64,
    pub rate_bps: f64,
    pub beam: DVector<C64>,
}

#[derive(Clone, Debug)]
pub struct AllocationSolution {
    pub messages: Vec<MessageKey>,
    pub demands_bps: Vec<f64>,
    pub subcarriers: Vec<Option<SubcarrierPlan>>,
    pub antennas: usize,
    /// `Σ η / M` over assigned subcarriers.
    pub objective_w: f64,
    pub ties: usize,
    pub converged: bool,
}

impl AllocationSolution {
    /// Rate delivered to each message.
    pub fn delivered_bps(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.messages.len()];
        for p in self.subcarriers.iter().flatten() {
            out[p.message] += p.rate_bps;
        }
        out
    }
}

/// Combines an allocation with the per-(message, subcarrier) beams `beams[message][n]`.
pub fn assemble_solution(
    demands: &[MessageDemand],
    alloc: &PowerAllocation,
    beams: &[Vec<BeamSolution>],
    antennas: usize,
) -> Result<AllocationSolution, AllocError> {
    let mut subcarriers = Vec::with_capacity(alloc.assignment.len());
    for (n, owner) in alloc.assignment.iter().enumerate() {
        let Some(j) = *owner else {
            subcarriers.push(None);
            continue;
        };
        let beam = beams.get(j).and_then(|b| b.get(n)).ok_or(AllocError::MissingBeam { message: j, subcarrier: n })?;
        subcarriers.push(Some(SubcarrierPlan {
            message: j,
            power_w: alloc.power[n],
            rate_bps: alloc.rate[n],
            beam: beam.direction(),
        }));
    }
    Ok(AllocationSolution {
        messages: demands.iter().map(|d| d.key).collect(),
        demands_bps: demands.iter().map(|d| d.demand_bps).collect(),
        subcarriers,
        antennas,
        objective_w: alloc.objective(antennas),
        ties: alloc.ties,
        converged: alloc.dual_converged,
    })
}

/// Worst constraint violations of a transmit plan.
#[derive(Clone, Debug, Default, Serialize)]
pub struct AuditReport {
    /// max over messages of `(demand − delivered)/demand`, clipped at 0.
    pub demand_shortfall: f64,
    /// max over assigned subcarriers and group members of `(c − achievable)/c`, clipped at 0.
    pub rate_excess: f64,
    pub max_beam_norm_error: f64,
    pub negative_power: bool,
    /// Some message with positive demand owns no subcarrier while a subcarrier is unowned, or vice versa.
    pub assignment_error: bool,
    /// `|objective − Σ η / M|`.
    pub objective_error: f64,
}

/// Checks a plan against the channel: `groups[message]` lists the receiving users.
pub fn audit_solution(
    sol: &AllocationSolution,
    groups: &[Vec<usize>],
    betas: &[f64],
    channel: &ChannelRealization,
    noise_w: f64,
    bandwidth_hz: f64,
) -> AuditReport {
    let mut report = AuditReport::default();
    let m = sol.antennas as f64;
    let any_demand = sol.demands_bps.iter().any(|&d| d > 0.0);
    let mut total = 0.0;
    for (n, plan) in sol.subcarriers.iter().enumerate() {
        let Some(p) = plan else {
            report.assignment_error |= any_demand;
            continue;
        };
        total += p.power_w;
        report.negative_power |= p.power_w < 0.0;
        report.max_beam_norm_error = report.max_beam_norm_error.max((p.beam.norm() - 1.0).abs());
        if p.rate_bps <= 0.0 {
            continue;
        }
        for &k in &groups[p.message] {
            let snr = p.power_w * betas[k] * channel.h(n, k).dotc(&p.beam).norm_sqr() / (m * noise_w);
            let achievable = bandwidth_hz * snr.ln_1p() / LN_2;
            report.rate_excess = report.rate_excess.max((p.rate_bps - achievable) / p.rate_bps);
        }
    }
    for (d, r) in sol.demands_bps.iter().zip(sol.delivered_bps()) {
        if *d > 0.0 {
            report.demand_shortfall = report.demand_shortfall.max((d - r) / d);
        }
    }
    report.objective_error = (sol.objective_w - total / m).abs();
    report
}
