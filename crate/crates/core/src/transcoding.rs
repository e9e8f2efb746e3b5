//! Transcoding scenario: users may receive a higher quality level of a cell and convert it down
//! locally. A long-timescale quality selection fixes which message each user listens to; the
//! per-draw transmit plan is then solved for the induced multicast groups.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::{Message, MessageKey};
use crate::channel::{ChannelRealization, QualityLadder, SystemParams, UserProfile};
use crate::dcsolver::DcSettings;
use crate::geometry::{Partition, UserSet};
use crate::realization::{solve_realization, BeamCache, BeamDesign, RealizationError, RealizationOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TranscodeError {
    #[error("invalid transcoding input: {0}")]
    InvalidInput(String),
    #[error("{count} selections exceed the enumeration cap {cap}; use the approximate selection")]
    CapExceeded { count: u128, cap: u128 },
    #[error(transparent)]
    Realization(#[from] RealizationError),
}

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

#[derive(Clone, Debug)]
pub struct TranscodeInstance {
    pub partition: Partition,
    pub users: Vec<UserProfile>,
    /// Per-tile rates.
    pub ladder: QualityLadder,
    pub params: SystemParams,
}

impl TranscodeInstance {
    pub fn validate(&self) -> Result<(), TranscodeError> {
        let bad = |e: String| Err(TranscodeError::InvalidInput(e));
        if self.users.len() != self.partition.user_count() {
            return bad(format!(
                "{} user profiles for a {}-user partition",
                self.users.len(),
                self.partition.user_count()
            ));
        }
        if let Err(e) = self.params.validate() {
            return bad(e.to_string());
        }
        if let Err(e) = self.ladder.validate() {
            return bad(e.to_string());
        }
        for u in &self.users {
            if let Err(e) = u.validate(self.ladder.levels()) {
                return bad(e.to_string());
            }
        }
        Ok(())
    }

    pub fn required_levels(&self) -> Vec<usize> {
        self.users.iter().map(|u| u.level).collect()
    }

    pub fn betas(&self) -> Vec<f64> {
        self.users.iter().map(|u| u.beta).collect()
    }

    /// Levels user `k` may take for cell `set`; with `restricted`, only levels some member of the cell requires.
    pub fn allowed_levels(&self, set: &UserSet, k: usize, restricted: bool) -> Vec<usize> {
        let own = self.users[k].level;
        if restricted {
            let mut v: Vec<usize> = set.members().map(|j| self.users[j].level).filter(|&l| l >= own).collect();
            v.sort_unstable();
            v.dedup();
            v
        } else {
            (own..=self.ladder.levels()).collect()
        }
    }

    fn slots(&self) -> impl Iterator<Item = (UserSet, usize)> + '_ {
        self.partition.index_family.iter().flat_map(|s| s.members().map(move |k| (*s, k)))
    }
}

/// Level chosen by one user for one cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Choice {
    pub set: UserSet,
    pub user: usize,
    pub level: usize,
}

/// One level per (cell, member) pair, ordered by cell then user.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QualitySelection {
    choices: Vec<Choice>,
}

impl QualitySelection {
    pub fn from_choices(mut choices: Vec<Choice>) -> Self {
        choices.sort_unstable_by_key(|c| (c.set, c.user));
        Self { choices }
    }

    /// Every user receives its own required level.
    pub fn natural(inst: &TranscodeInstance) -> Self {
        Self::from_choices(
            inst.slots().map(|(set, user)| Choice { set, user, level: inst.users[user].level }).collect(),
        )
    }

    /// Every member of a cell receives the highest level required in that cell.
    pub fn cell_maximum(inst: &TranscodeInstance) -> Self {
        Self::from_choices(
            inst.slots()
                .map(|(set, user)| {
                    let level = set.members().map(|j| inst.users[j].level).max().unwrap_or(1);
                    Choice { set, user, level }
                })
                .collect(),
        )
    }

    pub fn choices(&self) -> &[Choice] {
        &self.choices
    }

    pub fn level(&self, set: &UserSet, user: usize) -> Option<usize> {
        self.choices.binary_search_by_key(&(*set, user), |c| (c.set, c.user)).ok().map(|i| self.choices[i].level)
    }

    /// Indicator of user `k` receiving level `l` of cell `set`.
    pub fn selects(&self, set: &UserSet, level: usize, k: usize) -> bool {
        self.level(set, k) == Some(level)
    }

    pub fn validate(&self, inst: &TranscodeInstance, restricted: bool) -> Result<(), TranscodeError> {
        let expected: Vec<(UserSet, usize)> = inst.slots().collect();
        let got: Vec<(UserSet, usize)> = self.choices.iter().map(|c| (c.set, c.user)).collect();
        if expected != got {
            return Err(TranscodeError::InvalidInput(
                "selection does not cover exactly the (cell, member) pairs".into(),
            ));
        }
        for c in &self.choices {
            if !inst.allowed_levels(&c.set, c.user, restricted).contains(&c.level) {
                return Err(TranscodeError::InvalidInput(format!(
                    "user {} takes level {} of cell {} outside its allowed levels",
                    c.user + 1,
                    c.level,
                    c.set
                )));
            }
        }
        Ok(())
    }

    /// Induced messages: users choosing the same level of a cell share one multicast.
    pub fn messages(&self, inst: &TranscodeInstance) -> Vec<Message> {
        let mut groups: BTreeMap<MessageKey, Vec<usize>> = BTreeMap::new();
        for c in &self.choices {
            groups.entry(MessageKey { set: c.set, level: c.level }).or_default().push(c.user);
        }
        groups
            .into_iter()
            .map(|(key, members)| Message {
                demand_bps: inst.partition.cell_size(&key.set) as f64 * inst.ladder.rate(key.level),
                key,
                members,
            })
            .collect()
    }
}

/// Total transcoding power: every level step on every tile costs the user its per-tile power.
pub fn transcoding_power(x: &QualitySelection, partition: &Partition, users: &[UserProfile]) -> f64 {
    x.choices
        .iter()
        .map(|c| {
            (c.level - users[c.user].level) as f64 * partition.cell_size(&c.set) as f64 * users[c.user].transcode_w
        })
        .sum()
}

/// Number of selections, saturating at `u128::MAX`.
pub fn selection_count(inst: &TranscodeInstance, restricted: bool) -> u128 {
    inst.slots()
        .map(|(s, k)| inst.allowed_levels(&s, k, restricted).len() as u128)
        .fold(1u128, |acc, n| acc.saturating_mul(n))
}

/// All selections, natural first, in mixed-radix order over (cell, member) pairs.
pub fn enumerate_selections(
    inst: &TranscodeInstance,
    restricted: bool,
    cap: u128,
) -> Result<Vec<QualitySelection>, TranscodeError> {
    let count = selection_count(inst, restricted);
    if count > cap {
        return Err(TranscodeError::CapExceeded { count, cap });
    }
    let slots: Vec<(UserSet, usize, Vec<usize>)> =
        inst.slots().map(|(s, k)| (s, k, inst.allowed_levels(&s, k, restricted))).collect();
    let mut digits = vec![0usize; slots.len()];
    let mut out = Vec::with_capacity(count as usize);
    loop {
        out.push(QualitySelection::from_choices(
            slots
                .iter()
                .zip(&digits)
                .map(|((set, user, lv), &d)| Choice { set: *set, user: *user, level: lv[d] })
                .collect(),
        ));
        let mut i = 0;
        while i < slots.len() {
            digits[i] += 1;
            if digits[i] < slots[i].2.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        if i == slots.len() {
            return Ok(out);
        }
    }
}

/// Inner per-draw solver choice for the long-timescale evaluation.
#[derive(Clone, Debug)]
pub struct InnerSolver {
    pub design: BeamDesign,
    pub dc: DcSettings,
}

impl Default for InnerSolver {
    fn default() -> Self {
        Self { design: BeamDesign::Relaxation, dc: DcSettings::default() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TwoTimescaleResult {
    pub x: QualitySelection,
    pub avg_tx_power: f64,
    pub transcode_power: f64,
    pub weighted_objective: f64,
    pub per_draw_tx_power: Vec<f64>,
    /// Draws on which the relaxation path deferred to the DC solver.
    pub dc_fallbacks: usize,
    pub rank_gt_one: usize,
    pub ties: usize,
    pub all_converged: bool,
}

/// Per-draw plan for the messages induced by `x`.
pub fn solve_with_transcoding(
    inst: &TranscodeInstance,
    x: &QualitySelection,
    channel: &ChannelRealization,
    solver: &InnerSolver,
) -> Result<RealizationOutcome, TranscodeError> {
    solve_cached(inst, x, channel, solver, None)
}

fn solve_cached(
    inst: &TranscodeInstance,
    x: &QualitySelection,
    channel: &ChannelRealization,
    solver: &InnerSolver,
    cache: Option<&mut BeamCache>,
) -> Result<RealizationOutcome, TranscodeError> {
    let messages = x.messages(inst);
    Ok(solve_realization(channel, &messages, &inst.betas(), &inst.params, solver.design, &solver.dc, cache)?)
}

fn summarize(
    inst: &TranscodeInstance,
    x: &QualitySelection,
    outcomes: &[&RealizationOutcome],
    solver: &InnerSolver,
) -> TwoTimescaleResult {
    let per_draw: Vec<f64> = outcomes.iter().map(|o| o.solution.objective_w).collect();
    let avg = per_draw.iter().sum::<f64>() / per_draw.len().max(1) as f64;
    let etc = transcoding_power(x, &inst.partition, &inst.users);
    TwoTimescaleResult {
        x: x.clone(),
        avg_tx_power: avg,
        transcode_power: etc,
        weighted_objective: avg + inst.params.alpha * etc,
        per_draw_tx_power: per_draw,
        dc_fallbacks: outcomes.iter().filter(|o| o.design != solver.design).count(),
        rank_gt_one: outcomes.iter().map(|o| o.rank_gt_one).sum(),
        ties: outcomes.iter().map(|o| o.ties).sum(),
        all_converged: outcomes.iter().all(|o| o.converged),
    }
}

/// Monte Carlo average over `draws` for a fixed selection.
pub fn evaluate_selection(
    inst: &TranscodeInstance,
    x: &QualitySelection,
    draws: &[ChannelRealization],
    solver: &InnerSolver,
) -> Result<TwoTimescaleResult, TranscodeError> {
    let outcomes: Vec<RealizationOutcome> =
        draws.par_iter().map(|h| solve_with_transcoding(inst, x, h, solver)).collect::<Result<_, _>>()?;
    Ok(summarize(inst, x, &outcomes.iter().collect::<Vec<_>>(), solver))
}

#[derive(Clone, Debug, Serialize)]
pub struct ExhaustiveResult {
    pub best: TwoTimescaleResult,
    pub best_index: usize,
    /// Weighted objective of every candidate, in input order.
    pub objectives: Vec<f64>,
}

/// Best selection over `x_set` on common draws. Ties go to the lower transcoding power, then the
/// earlier index. Selections inducing more messages than subcarriers are infeasible and get an
/// infinite objective.
pub fn solve_exhaustive(
    inst: &TranscodeInstance,
    x_set: &[QualitySelection],
    draws: &[ChannelRealization],
    solver: &InnerSolver,
) -> Result<ExhaustiveResult, TranscodeError> {
    if x_set.is_empty() || draws.is_empty() {
        return Err(TranscodeError::InvalidInput("need at least one selection and one draw".into()));
    }
    let feasible: Vec<usize> =
        (0..x_set.len()).filter(|&i| x_set[i].messages(inst).len() <= inst.params.subcarriers).collect();
    if feasible.is_empty() {
        return Err(TranscodeError::InvalidInput("every selection needs more messages than subcarriers".into()));
    }
    // outcomes[draw][feasible index]; beams are shared across selections within a draw.
    let outcomes: Vec<Vec<RealizationOutcome>> = draws
        .par_iter()
        .map(|h| {
            let mut cache = BeamCache::default();
            feasible
                .iter()
                .map(|&i| solve_cached(inst, &x_set[i], h, solver, Some(&mut cache)))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let results: Vec<TwoTimescaleResult> = feasible
        .iter()
        .enumerate()
        .map(|(f, &i)| summarize(inst, &x_set[i], &outcomes.iter().map(|row| &row[f]).collect::<Vec<_>>(), solver))
        .collect();
    let mut objectives = vec![f64::INFINITY; x_set.len()];
    for (r, &i) in results.iter().zip(&feasible) {
        objectives[i] = r.weighted_objective;
    }
    let mut best = 0;
    for (f, r) in results.iter().enumerate().skip(1) {
        let b = &results[best];
        if (r.weighted_objective, r.transcode_power) < (b.weighted_objective, b.transcode_power) {
            best = f;
        }
    }
    let best_index = feasible[best];
    let best = results.into_iter().nth(best).expect("nonempty");
    Ok(ExhaustiveResult { best, best_index, objectives })
}

#[derive(Clone, Debug, Serialize)]
pub struct PrunedSearch {
    pub best: TwoTimescaleResult,
    pub best_index: usize,
    pub evaluated: usize,
    /// Candidates skipped because their weighted transcoding power alone reaches the incumbent.
    pub pruned: usize,
}

/// Same optimum and tie rule as [`solve_exhaustive`], visiting candidates by increasing
/// transcoding power and stopping once `α·transcode` cannot beat the incumbent.
pub fn solve_exhaustive_pruned(
    inst: &TranscodeInstance,
    x_set: &[QualitySelection],
    draws: &[ChannelRealization],
    solver: &InnerSolver,
) -> Result<PrunedSearch, TranscodeError> {
    if x_set.is_empty() || draws.is_empty() {
        return Err(TranscodeError::InvalidInput("need at least one selection and one draw".into()));
    }
    let etc: Vec<f64> = x_set.iter().map(|x| transcoding_power(x, &inst.partition, &inst.users)).collect();
    let mut order: Vec<usize> = (0..x_set.len()).collect();
    order.sort_by(|&a, &b| etc[a].total_cmp(&etc[b]).then(a.cmp(&b)));
    let mut caches: Vec<BeamCache> = draws.iter().map(|_| BeamCache::default()).collect();
    let mut best: Option<(usize, TwoTimescaleResult)> = None;
    let mut evaluated = 0;
    for (pos, &i) in order.iter().enumerate() {
        if let Some((_, b)) = &best {
            if inst.params.alpha * etc[i] >= b.weighted_objective {
                let pruned = order.len() - pos;
                let (best_index, best) = best.expect("incumbent");
                return Ok(PrunedSearch { best, best_index, evaluated, pruned });
            }
        }
        if x_set[i].messages(inst).len() > inst.params.subcarriers {
            continue;
        }
        let outcomes: Vec<RealizationOutcome> = draws
            .par_iter()
            .zip(caches.par_iter_mut())
            .map(|(h, cache)| solve_cached(inst, &x_set[i], h, solver, Some(cache)))
            .collect::<Result<_, _>>()?;
        evaluated += 1;
        let r = summarize(inst, &x_set[i], &outcomes.iter().collect::<Vec<_>>(), solver);
        let better = match &best {
            None => true,
            Some((_, b)) => (r.weighted_objective, r.transcode_power) < (b.weighted_objective, b.transcode_power),
        };
        if better {
            best = Some((i, r));
        }
    }
    let (best_index, best) = best
        .ok_or_else(|| TranscodeError::InvalidInput("every selection needs more messages than subcarriers".into()))?;
    Ok(PrunedSearch { best, best_index, evaluated, pruned: 0 })
}

/// Realization-free beam cost of a user: noise over large-scale gain.
pub fn qbar(noise_w: f64, beta: f64) -> f64 {
    noise_w / beta
}

/// Aggregate subcarrier shares and powers per message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BarAllocation {
    pub messages: Vec<MessageKey>,
    pub shares: Vec<f64>,
    pub powers_w: Vec<f64>,
}

/// Per-subcarrier shares and powers, `[message][subcarrier]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubcarrierShares {
    pub messages: Vec<MessageKey>,
    pub shares: Vec<Vec<f64>>,
    pub powers_w: Vec<Vec<f64>>,
}

/// Sums shares and powers over subcarriers.
pub fn reduce_to_bar(point: &SubcarrierShares) -> BarAllocation {
    BarAllocation {
        messages: point.messages.clone(),
        shares: point.shares.iter().map(|r| r.iter().sum()).collect(),
        powers_w: point.powers_w.iter().map(|r| r.iter().sum()).collect(),
    }
}

/// Splits every aggregate evenly over `subcarriers`.
pub fn expand(bar: &BarAllocation, subcarriers: usize) -> SubcarrierShares {
    let n = subcarriers as f64;
    SubcarrierShares {
        messages: bar.messages.clone(),
        shares: bar.shares.iter().map(|&s| vec![s / n; subcarriers]).collect(),
        powers_w: bar.powers_w.iter().map(|&p| vec![p / n; subcarriers]).collect(),
    }
}

/// `share·B·log2(1 + power/(share·q))`, zero for an empty share.
pub fn share_rate(share: f64, power_w: f64, q: f64, bandwidth_hz: f64) -> f64 {
    if share <= 0.0 {
        return 0.0;
    }
    share * bandwidth_hz * (power_w / (share * q)).ln_1p() / LN_2
}

#[derive(Clone, Debug, Serialize)]
pub struct BarSolution {
    pub allocation: BarAllocation,
    /// `ΣP̄ / M`.
    pub tx_power: f64,
    pub transcode_power: f64,
    pub objective: f64,
}

/// Active messages with total spectral load and the largest member beam cost.
fn bar_loads(inst: &TranscodeInstance, x: &QualitySelection) -> (Vec<MessageKey>, Vec<f64>, Vec<f64>) {
    let mut keys = vec![];
    let mut loads = vec![];
    let mut costs = vec![];
    for m in x.messages(inst) {
        keys.push(m.key);
        loads.push(m.demand_bps / inst.params.bandwidth_hz);
        costs.push(m.members.iter().map(|&k| qbar(inst.params.noise_w, inst.users[k].beta)).fold(0.0, f64::max));
    }
    (keys, loads, costs)
}

/// `t` with `e^t (t − 1) + 1 = target`; the left side is increasing from 0.
fn marginal_root(target: f64) -> f64 {
    let f = |t: f64| t.exp() * (t - 1.0) + 1.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    while f(hi) < target && hi < 700.0 {
        lo = hi;
        hi = (2.0 * hi).min(700.0);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Optimal aggregate shares and powers for a fixed selection.
pub fn solve_bar(inst: &TranscodeInstance, x: &QualitySelection) -> BarSolution {
    let (keys, loads, costs) = bar_loads(inst, x);
    let n = inst.params.subcarriers as f64;
    // Power of message j on share s is q·s·(2^{c/s} − 1); equal marginal power across messages.
    let shares_at =
        |nu: f64| -> Vec<f64> { loads.iter().zip(&costs).map(|(&c, &q)| c * LN_2 / marginal_root(nu / q)).collect() };
    let mut shares = if keys.len() <= 1 {
        vec![n; keys.len()]
    } else {
        let total = |nu: f64| shares_at(nu).iter().sum::<f64>();
        let (mut lo, mut hi) = (1e-300f64, 1.0f64);
        while total(hi) > n {
            hi *= 16.0;
        }
        let mut lo_probe = hi;
        while total(lo_probe) < n && lo_probe > 1e-300 {
            lo_probe /= 16.0;
        }
        lo = lo.max(lo_probe);
        for _ in 0..300 {
            let mid = (lo * hi).sqrt();
            if total(mid) > n {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi / lo - 1.0 < 1e-14 {
                break;
            }
        }
        shares_at((lo * hi).sqrt())
    };
    let sum: f64 = shares.iter().sum();
    if sum > 0.0 {
        shares.iter_mut().for_each(|s| *s *= n / sum);
    }
    let powers: Vec<f64> =
        shares.iter().zip(loads.iter().zip(&costs)).map(|(&s, (&c, &q))| q * s * (c / s * LN_2).exp_m1()).collect();
    let tx = powers.iter().sum::<f64>() / inst.params.antennas as f64;
    let etc = transcoding_power(x, &inst.partition, &inst.users);
    BarSolution {
        allocation: BarAllocation { messages: keys, shares, powers_w: powers },
        tx_power: tx,
        transcode_power: etc,
        objective: tx + inst.params.alpha * etc,
    }
}

#[derive(Clone, Debug)]
pub struct PenaltySettings {
    /// Convex-concave iterations per penalty weight.
    pub max_outer: usize,
    /// Projected-gradient sweeps per convex subproblem.
    pub max_inner: usize,
    /// Penalty weight cap as a multiple of the initial weight.
    pub max_doublings: u32,
    /// Exponent of the smooth maximum over group members.
    pub smooth_max_power: f64,
    pub local_search: bool,
}

impl Default for PenaltySettings {
    fn default() -> Self {
        Self { max_outer: 200, max_inner: 300, max_doublings: 10, smooth_max_power: 16.0, local_search: true }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ApproxSelection {
    pub x: QualitySelection,
    pub bar: BarSolution,
    /// Bar objective of the rounded relaxation, before local search.
    pub rounded_objective: f64,
    pub polarized: bool,
    pub final_penalty: f64,
    /// `(penalty weight, penalized objective)` after every convex-concave iteration.
    pub history: Vec<(f64, f64)>,
}

struct Slot {
    set: UserSet,
    user: usize,
    levels: Vec<usize>,
    /// Weighted transcoding power per level.
    cost: Vec<f64>,
}

struct Candidate {
    load: f64,
    /// (slot, level position, beam cost)
    members: Vec<(usize, usize, f64)>,
}

struct Relaxation {
    slots: Vec<Slot>,
    cands: Vec<Candidate>,
    subcarriers: f64,
    antennas: f64,
    power: f64,
    scale: f64,
}

impl Relaxation {
    fn new(inst: &TranscodeInstance, power: f64) -> Self {
        let alpha = inst.params.alpha;
        let slots: Vec<Slot> = inst
            .slots()
            .map(|(set, user)| {
                let levels = inst.allowed_levels(&set, user, true);
                let size = inst.partition.cell_size(&set) as f64;
                let u = &inst.users[user];
                let cost = levels.iter().map(|&l| alpha * (l - u.level) as f64 * size * u.transcode_w).collect();
                Slot { set, user, levels, cost }
            })
            .collect();
        let mut index: BTreeMap<MessageKey, usize> = BTreeMap::new();
        let mut cands: Vec<Candidate> = vec![];
        for (i, s) in slots.iter().enumerate() {
            for (p, &l) in s.levels.iter().enumerate() {
                let key = MessageKey { set: s.set, level: l };
                let j = *index.entry(key).or_insert_with(|| {
                    cands.push(Candidate {
                        load: inst.partition.cell_size(&s.set) as f64 * inst.ladder.rate(l) / inst.params.bandwidth_hz,
                        members: vec![],
                    });
                    cands.len() - 1
                });
                cands[j].members.push((i, p, qbar(inst.params.noise_w, inst.users[s.user].beta)));
            }
        }
        Self {
            slots,
            cands,
            subcarriers: inst.params.subcarriers as f64,
            antennas: inst.params.antennas as f64,
            power,
            scale: 1.0,
        }
    }

    /// Smoothed aggregate power of candidate `j` and its partials in (share fraction, member x).
    fn cand_power(&self, j: usize, s: f64, x: &[Vec<f64>], grad: Option<(&mut f64, &mut [Vec<f64>])>) -> f64 {
        let c = &self.cands[j];
        let share = s * self.subcarriers;
        let mut g = Vec::with_capacity(c.members.len());
        for &(i, p, q) in &c.members {
            let xv = x[i][p];
            if xv <= 0.0 {
                g.push(0.0);
            } else if share <= 0.0 {
                return f64::INFINITY;
            } else {
                g.push(q * share * (c.load * xv / share * LN_2).exp_m1());
            }
        }
        let gmax = g.iter().copied().fold(0.0, f64::max);
        if gmax == 0.0 {
            // Nobody listens yet: charge each member's one-sided slope.
            if let Some((_, dx)) = grad {
                for &(i, p, q) in &c.members {
                    dx[i][p] += q * c.load * LN_2;
                }
            }
            return 0.0;
        }
        if !gmax.is_finite() {
            return f64::INFINITY;
        }
        let pw = self.power;
        let norm = gmax * g.iter().map(|v| (v / gmax).powf(pw)).sum::<f64>().powf(1.0 / pw);
        if let Some((ds, dx)) = grad {
            for (m, &(i, p, q)) in c.members.iter().enumerate() {
                if g[m] == 0.0 && x[i][p] <= 0.0 {
                    // Right derivative at zero.
                    continue;
                }
                let w = (g[m] / norm).powf(pw - 1.0);
                let u = c.load * x[i][p] / share * LN_2;
                dx[i][p] += w * q * c.load * LN_2 * u.exp();
                *ds += w * q * (u.exp_m1() - u * u.exp()) * self.subcarriers;
            }
        }
        norm
    }

    /// Convex surrogate: smoothed transmit power plus a linear term in x.
    fn surrogate(
        &self,
        s: &[f64],
        x: &[Vec<f64>],
        lin: &[Vec<f64>],
        grad: Option<(&mut [f64], &mut [Vec<f64>])>,
    ) -> f64 {
        let mut total = 0.0;
        match grad {
            Some((gs, gx)) => {
                gs.iter_mut().for_each(|v| *v = 0.0);
                gx.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
                for j in 0..self.cands.len() {
                    let mut ds = 0.0;
                    total += self.cand_power(j, s[j], x, Some((&mut ds, gx)));
                    gs[j] = ds;
                }
                let f = 1.0 / (self.antennas * self.scale);
                gs.iter_mut().for_each(|v| *v *= f);
                for (i, r) in gx.iter_mut().enumerate() {
                    for (p, v) in r.iter_mut().enumerate() {
                        *v = *v * f + lin[i][p] / self.scale;
                    }
                }
            }
            None => {
                for j in 0..self.cands.len() {
                    total += self.cand_power(j, s[j], x, None);
                }
            }
        }
        let linear: f64 = x.iter().zip(lin).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>()).sum();
        (total / self.antennas + linear) / self.scale
    }

    fn penalized(&self, s: &[f64], x: &[Vec<f64>], rho: f64) -> f64 {
        let lin: Vec<Vec<f64>> = self.slots.iter().map(|sl| sl.cost.clone()).collect();
        let pen: f64 = x.iter().flatten().map(|v| v * (1.0 - v)).sum();
        self.surrogate(s, x, &lin, None) + rho * pen / self.scale
    }
}

/// Euclidean projection onto `{v ≥ 0, Σv = total}`.
fn project_simplex(v: &mut [f64], total: f64) {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - total) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Projected gradient on the convex surrogate, alternating the share block and the selection block.
fn solve_surrogate(
    rel: &Relaxation,
    s: &mut Vec<f64>,
    x: &mut Vec<Vec<f64>>,
    lin: &[Vec<f64>],
    steps: &mut (f64, f64),
    max_inner: usize,
) {
    let mut gs = vec![0.0; s.len()];
    let mut gx: Vec<Vec<f64>> = x.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut value = rel.surrogate(s, x, lin, Some((&mut gs, &mut gx)));
    for _ in 0..max_inner {
        let start = value;
        // Share block.
        let mut eta = steps.0;
        for _ in 0..60 {
            let mut cand: Vec<f64> = s.iter().zip(&gs).map(|(a, g)| a - eta * g).collect();
            project_simplex(&mut cand, 1.0);
            let d2 = dist2(&cand, s);
            let lin_pred: f64 = cand.iter().zip(s.iter()).zip(&gs).map(|((c, a), g)| g * (c - a)).sum();
            let v = rel.surrogate(&cand, x, lin, None);
            if d2 == 0.0 {
                break;
            }
            if v.is_finite() && v <= value + lin_pred + d2 / (2.0 * eta) && v <= value {
                *s = cand;
                steps.0 = eta * 2.0;
                break;
            }
            eta *= 0.5;
        }
        value = rel.surrogate(s, x, lin, Some((&mut gs, &mut gx)));
        // Selection block.
        let mut eta = steps.1;
        for _ in 0..60 {
            let cand: Vec<Vec<f64>> = x
                .iter()
                .zip(&gx)
                .map(|(r, g)| {
                    let mut c: Vec<f64> = r.iter().zip(g).map(|(a, b)| a - eta * b).collect();
                    project_simplex(&mut c, 1.0);
                    c
                })
                .collect();
            let d2: f64 = cand.iter().zip(x.iter()).map(|(a, b)| dist2(a, b)).sum();
            if d2 == 0.0 {
                break;
            }
            let lin_pred: f64 = cand
                .iter()
                .zip(x.iter())
                .zip(&gx)
                .map(|((c, a), g)| c.iter().zip(a).zip(g).map(|((c, a), g)| g * (c - a)).sum::<f64>())
                .sum();
            let v = rel.surrogate(s, &cand, lin, None);
            if v.is_finite() && v <= value + lin_pred + d2 / (2.0 * eta) && v <= value {
                *x = cand;
                steps.1 = eta * 2.0;
                break;
            }
            eta *= 0.5;
        }
        value = rel.surrogate(s, x, lin, Some((&mut gs, &mut gx)));
        if start - value <= 1e-12 * start.abs() {
            break;
        }
    }
}

fn round_selection(rel: &Relaxation, x: &[Vec<f64>]) -> QualitySelection {
    QualitySelection::from_choices(
        rel.slots
            .iter()
            .zip(x)
            .map(|(sl, r)| {
                let mut best = 0;
                for (p, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = p;
                    }
                }
                Choice { set: sl.set, user: sl.user, level: sl.levels[best] }
            })
            .collect(),
    )
}

/// First-improvement search over single-user level changes and moves of a whole (cell, level) group.
fn polish(inst: &TranscodeInstance, mut x: QualitySelection) -> (QualitySelection, BarSolution) {
    let mut best = solve_bar(inst, &x);
    let better = |a: f64, b: f64| a < b * (1.0 - 1e-12);
    loop {
        let mut improved = false;
        let choices = x.choices.clone();
        'outer: for (i, c) in choices.iter().enumerate() {
            for l in inst.allowed_levels(&c.set, c.user, true) {
                if l == c.level {
                    continue;
                }
                let mut y = x.clone();
                y.choices[i].level = l;
                let sol = solve_bar(inst, &y);
                if better(sol.objective, best.objective) {
                    x = y;
                    best = sol;
                    improved = true;
                    break 'outer;
                }
            }
            let group: Vec<usize> =
                (0..choices.len()).filter(|&j| choices[j].set == c.set && choices[j].level == c.level).collect();
            if group.len() < 2 {
                continue;
            }
            for l in inst.allowed_levels(&c.set, c.user, true) {
                if l == c.level
                    || group.iter().any(|&j| !inst.allowed_levels(&c.set, choices[j].user, true).contains(&l))
                {
                    continue;
                }
                let mut y = x.clone();
                group.iter().for_each(|&j| y.choices[j].level = l);
                let sol = solve_bar(inst, &y);
                if better(sol.objective, best.objective) {
                    x = y;
                    best = sol;
                    improved = true;
                    break 'outer;
                }
            }
        }
        if !improved {
            return (x, best);
        }
    }
}

/// Quality selection from the penalized relaxation of the realization-free problem.
pub fn approx_quality_selection(
    inst: &TranscodeInstance,
    settings: &PenaltySettings,
) -> Result<ApproxSelection, TranscodeError> {
    inst.validate()?;
    let mut rel = Relaxation::new(inst, settings.smooth_max_power);
    let mut s = vec![1.0 / rel.cands.len() as f64; rel.cands.len()];
    let mut x: Vec<Vec<f64>> = rel.slots.iter().map(|sl| vec![1.0 / sl.levels.len() as f64; sl.levels.len()]).collect();
    let zero: Vec<Vec<f64>> = rel.slots.iter().map(|sl| vec![0.0; sl.levels.len()]).collect();
    let start = rel.surrogate(&s, &x, &zero, None);
    rel.scale = if start.is_finite() && start > 0.0 { start } else { 1.0 };

    let max_e = inst.users.iter().map(|u| u.transcode_w).fold(0.0, f64::max);
    let max_cell = inst.partition.parts.values().map(|t| t.len()).max().unwrap_or(1) as f64;
    let rho0 = {
        let r = inst.params.alpha * max_e * max_cell * inst.ladder.levels() as f64;
        // With free transcoding the weight falls back to the transmit-power scale.
        if r > 0.0 {
            r
        } else {
            rel.scale
        }
    };
    let mut rho = rho0;
    let mut history = vec![];
    let mut steps = (1.0, 1.0);
    let polarized = |x: &[Vec<f64>]| x.iter().flatten().all(|v| v.min(1.0 - v) <= 1e-6);
    for doubling in 0..=settings.max_doublings {
        if doubling > 0 {
            rho *= 2.0;
        }
        let mut prev = rel.penalized(&s, &x, rho);
        for _ in 0..settings.max_outer {
            let lin: Vec<Vec<f64>> = rel
                .slots
                .iter()
                .zip(&x)
                .map(|(sl, r)| sl.cost.iter().zip(r).map(|(c, v)| c + rho * (1.0 - 2.0 * v)).collect())
                .collect();
            solve_surrogate(&rel, &mut s, &mut x, &lin, &mut steps, settings.max_inner);
            let value = rel.penalized(&s, &x, rho);
            history.push((rho, value * rel.scale));
            if (prev - value).abs() <= 1e-10 * prev.abs() {
                break;
            }
            prev = value;
        }
        if polarized(&x) {
            break;
        }
    }
    let is_polarized = polarized(&x);
    let rounded = round_selection(&rel, &x);
    let rounded_objective = solve_bar(inst, &rounded).objective;
    let (x, bar) = if settings.local_search {
        polish(inst, rounded)
    } else {
        let b = solve_bar(inst, &rounded);
        (rounded, b)
    };
    Ok(ApproxSelection { x, bar, rounded_objective, polarized: is_polarized, final_penalty: rho, history })
}
