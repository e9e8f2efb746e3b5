//! General-group solver: continuous relaxation of the subcarrier assignment, DC
//! (majorize-minimize) iterations on the aggregated beams, then binary extraction.
//!
//! With `a_k = √β_k h_k / √(Mσ²)` a block (message, subcarrier) carries SNR budget `e` when
//! `|a_kᴴ W|² ≥ e` for every member. Linearizing at the previous beam `W₀` gives the convex
//! restriction `2 Re{g_kᴴ W} ≥ e + b_k` with `g_k = a_k (a_kᴴ W₀)`, `b_k = |a_kᴴ W₀|²`. The
//! block cost `F(e) = min ‖W‖²/M` under it is piecewise quadratic in `e` with one piece per
//! active constraint set.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use crate::allocation::Message;
use crate::allocation::{
    assemble_solution, powers_for_assignment, solve_allocation, AllocError, AllocationSolution, MessageDemand,
    PowerAllocation,
};
use crate::beamforming::{fix_phase, BeamMethod, BeamSolution, BeamStatus};
use crate::channel::{complex_gaussian, ChannelRealization, SystemParams};
use crate::numerics::{solve_nnqp, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DcError {
    #[error("invalid problem: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Allocation(#[from] AllocError),
}

#[derive(Clone, Debug)]
pub struct DcProblem<'a> {
    /// Sorted by key.
    pub messages: Vec<Message>,
    pub channel: &'a ChannelRealization,
    /// Large-scale gain per user.
    pub betas: Vec<f64>,
    pub params: SystemParams,
}

#[derive(Clone, Debug)]
pub struct DcSettings {
    pub max_outer: usize,
    /// Stop when the relative objective change stays below this for `patience` iterations.
    pub rel_tol: f64,
    pub patience: usize,
    /// Starting points tried; the first is the deterministic construction, the rest random.
    pub initial_points: usize,
    pub seed: u64,
    /// Subgradient steps of the assignment dual per DC iteration.
    pub assignment_steps: usize,
}

impl Default for DcSettings {
    fn default() -> Self {
        Self { max_outer: 100, rel_tol: 1e-4, patience: 3, initial_points: 1, seed: 0, assignment_steps: 30 }
    }
}

/// Relaxed iterate over the positive-demand messages, indexed `[message][subcarrier]`.
#[derive(Clone, Debug)]
pub struct DcIterate {
    pub beams: Vec<Vec<DVector<C64>>>,
    pub mu: Vec<Vec<f64>>,
    pub rate: Vec<Vec<f64>>,
    /// SNR budget `μ(2^{c/(Bμ)} − 1)` per block.
    pub budget: Vec<Vec<f64>>,
    /// Rate multiplier per message from the last restricted solve.
    pub multipliers: Vec<f64>,
    /// `Σ ‖W‖² / M`.
    pub objective: f64,
}

impl DcIterate {
    pub fn is_binary(&self) -> bool {
        self.mu.iter().flatten().all(|&m| m == 0.0 || m == 1.0)
    }
}

/// Worst violations of the relaxed problem's constraints, relative.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RelaxedAudit {
    pub mu_sum_error: f64,
    pub demand_shortfall: f64,
    pub snr_shortfall: f64,
    pub negative: bool,
}

/// DC outcome: the binary plan plus the trajectory.
#[derive(Clone, Debug)]
pub struct DcResult {
    pub solution: AllocationSolution,
    /// Relaxed objective after each accepted DC iteration, starting with the initial point.
    pub history: Vec<f64>,
    pub relaxed: DcIterate,
    /// Objective of `η = ‖W‖²` taken directly from the relaxed beams, before the power polish;
    /// only a feasible plan when the relaxed shares are binary.
    pub raw_objective: Option<f64>,
    pub converged: bool,
    pub ties: usize,
    pub initial_points: usize,
}

/// Active positive-demand messages after validation.
struct Prepared {
    active: Vec<usize>,
    demands: Vec<f64>,
    /// Scaled channels per `[active message][n][member]`.
    scaled: Vec<Vec<Vec<DVector<C64>>>>,
    n_sub: usize,
    m: f64,
    bandwidth: f64,
}

fn prepare(problem: &DcProblem) -> Result<Prepared, DcError> {
    problem.params.validate().map_err(|e| DcError::InvalidInput(e.to_string()))?;
    let ch = problem.channel;
    if ch.antennas() != problem.params.antennas || ch.subcarriers() != problem.params.subcarriers {
        return Err(DcError::InvalidInput("channel dimensions differ from system parameters".into()));
    }
    if problem.betas.len() != ch.users() {
        return Err(DcError::InvalidInput("one beta per user required".into()));
    }
    for w in problem.messages.windows(2) {
        if w[0].key >= w[1].key {
            return Err(DcError::InvalidInput("message keys must be strictly increasing".into()));
        }
    }
    let m = problem.params.antennas as f64;
    let scale = (m * problem.params.noise_w).sqrt();
    let mut active = vec![];
    for (j, msg) in problem.messages.iter().enumerate() {
        if !(msg.demand_bps >= 0.0) || !msg.demand_bps.is_finite() {
            return Err(DcError::InvalidInput(format!("message {j} demand must be finite and >= 0")));
        }
        if msg.demand_bps > 0.0 {
            if msg.members.is_empty() || msg.members.iter().any(|&k| k >= ch.users()) {
                return Err(DcError::InvalidInput(format!("message {j} has no valid members")));
            }
            active.push(j);
        }
    }
    let n_sub = ch.subcarriers();
    if active.len() > n_sub {
        return Err(AllocError::TooManyMessages { messages: active.len(), subcarriers: n_sub }.into());
    }
    let scaled = active
        .iter()
        .map(|&j| {
            (0..n_sub)
                .map(|n| {
                    problem.messages[j]
                        .members
                        .iter()
                        .map(|&k| ch.h(n, k).scale(problem.betas[k].sqrt() / scale))
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(Prepared {
        demands: active.iter().map(|&j| problem.messages[j].demand_bps).collect(),
        active,
        scaled,
        n_sub,
        m,
        bandwidth: problem.params.bandwidth_hz,
    })
}

fn min_gain(a: &[DVector<C64>], w: &DVector<C64>) -> f64 {
    a.iter().map(|ak| ak.dotc(w).norm_sqr()).fold(f64::INFINITY, f64::min)
}

/// Block cost on one active set: `F(e) = (c2 e² + 2 c1 e + c0) / (4M)`.
#[derive(Clone, Debug)]
struct Piece {
    active: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
    c2: f64,
    c1: f64,
    c0: f64,
}

struct Block {
    g: Vec<DVector<C64>>,
    b: Vec<f64>,
    gram: DMatrix<f64>,
    m: f64,
    piece: Piece,
}

impl Block {
    fn new(a: &[DVector<C64>], prev: &DVector<C64>, m: f64) -> Self {
        let g: Vec<DVector<C64>> = a.iter().map(|ak| ak * ak.dotc(prev)).collect();
        let b: Vec<f64> = a.iter().map(|ak| ak.dotc(prev).norm_sqr()).collect();
        let k = g.len();
        let gram = DMatrix::from_fn(k, k, |i, j| g[i].dotc(&g[j]).re);
        let empty = Piece { active: vec![], u: vec![], v: vec![], c2: 0.0, c1: 0.0, c0: 0.0 };
        let mut block = Self { g, b, gram, m, piece: empty };
        block.refresh(0.0);
        block
    }

    /// Re-derives the active set at budget `e` from the dual NNQP.
    fn refresh(&mut self, e: f64) {
        let k = self.b.len();
        let h = self.gram.scale(2.0 * self.m);
        let q: Vec<f64> = self.b.iter().map(|bi| e + bi).collect();
        let support = if k == 1 { vec![0] } else { solve_nnqp(&h, &q).support };
        self.piece = self.piece_for(support);
    }

    fn piece_for(&self, active: Vec<usize>) -> Piece {
        let s = active.len();
        if s == 0 {
            return Piece { active, u: vec![], v: vec![], c2: 0.0, c1: 0.0, c0: 0.0 };
        }
        let diag = active.iter().map(|&i| self.gram[(i, i)]).fold(0.0f64, f64::max);
        let sub =
            DMatrix::from_fn(s, s, |x, y| self.gram[(active[x], active[y])] + if x == y { 1e-14 * diag } else { 0.0 });
        let ones = DVector::from_element(s, 1.0);
        let bs = DVector::from_iterator(s, active.iter().map(|&i| self.b[i]));
        let (u, v) = match sub.clone().cholesky() {
            Some(ch) => (ch.solve(&ones), ch.solve(&bs)),
            None => {
                let p = sub.pseudo_inverse(1e-14).unwrap_or_else(|_| DMatrix::zeros(s, s));
                (&p * &ones, &p * &bs)
            }
        };
        Piece {
            c2: ones.dot(&u),
            c1: ones.dot(&v),
            c0: bs.dot(&v),
            u: u.iter().copied().collect(),
            v: v.iter().copied().collect(),
            active,
        }
    }

    /// Whether the cached piece is the true optimum at `e`.
    fn valid(&self, e: f64) -> bool {
        let p = &self.piece;
        let scale = p.u.iter().chain(&p.v).fold(0.0f64, |m, x| m.max(x.abs())) * (1.0 + e);
        for (x, _) in p.active.iter().enumerate() {
            if e * p.u[x] + p.v[x] < -1e-10 * scale {
                return false;
            }
        }
        for i in 0..self.b.len() {
            if p.active.contains(&i) {
                continue;
            }
            let lhs: f64 = p.active.iter().enumerate().map(|(x, &a)| self.gram[(i, a)] * (e * p.u[x] + p.v[x])).sum();
            let rhs = e + self.b[i];
            if lhs < rhs - 1e-10 * rhs.abs().max(1e-300) {
                return false;
            }
        }
        !(p.active.is_empty() && e + self.b.iter().copied().fold(0.0, f64::max) > 0.0)
    }

    fn ensure(&mut self, e: f64) {
        if !self.valid(e) {
            self.refresh(e);
        }
    }

    fn cost(&self, e: f64) -> f64 {
        let p = &self.piece;
        (p.c2 * e * e + 2.0 * p.c1 * e + p.c0) / (4.0 * self.m)
    }

    fn slope(&self, e: f64) -> f64 {
        (self.piece.c2 * e + self.piece.c1) / (2.0 * self.m)
    }

    fn curvature(&self) -> f64 {
        self.piece.c2 / (2.0 * self.m)
    }

    fn beam(&self, e: f64) -> DVector<C64> {
        let p = &self.piece;
        let mut w = DVector::zeros(self.g[0].len());
        for (x, &a) in p.active.iter().enumerate() {
            w += self.g[a].scale(0.5 * (e * p.u[x] + p.v[x]));
        }
        w
    }

    /// Budget maximizing `γ B μ log2(1 + e/μ) − F(e)`: `F'(e) = κ/(μ+e)` with `κ = γBμ/ln2`.
    fn best_budget(&mut self, kappa: f64, mu: f64) -> f64 {
        if mu <= 0.0 || kappa <= 0.0 {
            self.ensure(0.0);
            return 0.0;
        }
        self.ensure(0.0);
        if self.slope(0.0) >= kappa / mu {
            return 0.0;
        }
        for _ in 0..12 {
            let p = &self.piece;
            let lin = p.c2 * mu + p.c1;
            let rhs = 2.0 * self.m * kappa - p.c1 * mu;
            let next = if rhs <= 0.0 {
                0.0
            } else if p.c2 <= 0.0 {
                rhs / lin.max(f64::MIN_POSITIVE)
            } else {
                2.0 * rhs / (lin + (lin * lin + 4.0 * p.c2 * rhs).sqrt())
            };
            if self.valid(next) {
                return next;
            }
            self.refresh(next);
        }
        self.bisect_budget(kappa, mu)
    }

    /// Fallback when piece switching does not settle: bisection on the optimality condition.
    fn bisect_budget(&mut self, kappa: f64, mu: f64) -> f64 {
        let cond = |blk: &mut Self, e: f64| {
            blk.refresh(e);
            blk.slope(e) - kappa / (mu + e)
        };
        if cond(self, 0.0) >= 0.0 {
            return 0.0;
        }
        let mut hi = 1.0;
        while cond(self, hi) < 0.0 && hi < 1e300 {
            hi *= 4.0;
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if cond(self, mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        self.refresh(hi);
        hi
    }

    /// `de/dγ` at the budget `e`, given `κ = γBμ/ln2`.
    fn budget_sensitivity(&self, e: f64, gamma: f64, mu: f64, bandwidth: f64) -> f64 {
        if e <= 0.0 || gamma <= 0.0 {
            return 0.0;
        }
        let dk = bandwidth * mu / ((mu + e) * LN_2);
        dk / (self.curvature() + gamma * dk / (mu + e))
    }
}

fn rate_of(budget: f64, mu: f64, bandwidth: f64) -> f64 {
    if mu <= 0.0 || budget <= 0.0 {
        0.0
    } else {
        bandwidth * mu * (budget / mu).ln_1p() / LN_2
    }
}

/// Per-message exact solve of the linearized problem for fixed shares `mu`.
struct MessageSolve {
    gamma: f64,
    budget: Vec<f64>,
}

fn solve_message(blocks: &mut [Block], mu: &[f64], demand: f64, bandwidth: f64, warm: f64) -> MessageSolve {
    let eval = |blocks: &mut [Block], gamma: f64| -> (Vec<f64>, f64, f64) {
        let mut budget = Vec::with_capacity(blocks.len());
        let (mut rate, mut drate) = (0.0, 0.0);
        for (blk, &m) in blocks.iter_mut().zip(mu) {
            let e = blk.best_budget(gamma * bandwidth * m / LN_2, m);
            if m > 0.0 && e > 0.0 {
                rate += rate_of(e, m, bandwidth);
                drate += bandwidth * m / ((m + e) * LN_2) * blk.budget_sensitivity(e, gamma, m, bandwidth);
            }
            budget.push(e);
        }
        (budget, rate, drate)
    };
    let mut gamma = if warm > 0.0 && warm.is_finite() { warm } else { 1.0 };
    let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..200 {
        let (budget, rate, drate) = eval(blocks, gamma);
        let resid = (rate - demand) / demand;
        if rate >= demand {
            hi = gamma;
            best = Some((gamma, budget));
            if resid < 1e-11 {
                break;
            }
        } else {
            lo = gamma;
        }
        let newton = if drate > 0.0 { gamma + (demand - rate) / drate } else { f64::NAN };
        gamma = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else if hi.is_infinite() {
            gamma * 4.0
        } else if lo == 0.0 {
            hi / 4.0
        } else {
            (lo * hi).sqrt()
        };
        if hi.is_finite() && hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let (gamma, budget) = best.expect("rate grows without bound in the multiplier");
    for (blk, &e) in blocks.iter_mut().zip(&budget) {
        blk.ensure(e);
    }
    MessageSolve { gamma, budget }
}

fn build_blocks(prep: &Prepared, beams: &[Vec<DVector<C64>>]) -> Vec<Vec<Block>> {
    (0..prep.active.len())
        .map(|j| (0..prep.n_sub).map(|n| Block::new(&prep.scaled[j][n], &beams[j][n], prep.m)).collect())
        .collect()
}

fn restricted_solve(prep: &Prepared, blocks: &mut [Vec<Block>], mu: &[Vec<f64>], warm: &[f64]) -> DcIterate {
    let j_count = prep.active.len();
    let mut out = DcIterate {
        beams: Vec::with_capacity(j_count),
        mu: mu.to_vec(),
        rate: Vec::with_capacity(j_count),
        budget: Vec::with_capacity(j_count),
        multipliers: Vec::with_capacity(j_count),
        objective: 0.0,
    };
    for j in 0..j_count {
        let sol = solve_message(&mut blocks[j], &mu[j], prep.demands[j], prep.bandwidth, warm[j]);
        let beams: Vec<DVector<C64>> = blocks[j].iter().zip(&sol.budget).map(|(b, &e)| b.beam(e)).collect();
        out.objective += beams.iter().map(|w| w.norm_squared()).sum::<f64>() / prep.m;
        out.rate.push(sol.budget.iter().zip(&mu[j]).map(|(&e, &m)| rate_of(e, m, prep.bandwidth)).collect());
        out.budget.push(sol.budget);
        out.beams.push(beams);
        out.multipliers.push(sol.gamma);
    }
    out
}

/// Binary shares from the rate-multiplier dual: each subcarrier goes to the largest net benefit.
fn dual_assignment(prep: &Prepared, blocks: &mut [Vec<Block>], warm: &[f64], steps: usize) -> (Vec<usize>, usize) {
    let j_count = prep.active.len();
    let b = prep.bandwidth;
    let mut gamma = warm.to_vec();
    let base: Vec<Vec<f64>> = blocks
        .iter_mut()
        .map(|row| {
            row.iter_mut()
                .map(|blk| {
                    blk.ensure(0.0);
                    blk.cost(0.0)
                })
                .collect()
        })
        .collect();
    let mut best: Option<(f64, Vec<usize>, usize)> = None;
    for t in 0..steps.max(1) {
        let mut owner = vec![0usize; prep.n_sub];
        let mut rate = vec![0.0; j_count];
        let mut ties = 0;
        for n in 0..prep.n_sub {
            let (mut top, mut top_val, mut top_rate, mut tied) = (0, f64::NEG_INFINITY, 0.0, false);
            for j in 0..j_count {
                let blk = &mut blocks[j][n];
                let e = blk.best_budget(gamma[j] * b / LN_2, 1.0);
                let r = rate_of(e, 1.0, b);
                let val = gamma[j] * r - (blk.cost(e) - base[j][n]);
                let scale = val.abs().max(top_val.abs());
                if val > top_val + 1e-12 * scale {
                    (top, top_val, top_rate, tied) = (j, val, r, false);
                } else if (val - top_val).abs() <= 1e-12 * scale && scale > 0.0 {
                    tied = true;
                }
            }
            owner[n] = top;
            rate[top] += top_rate;
            ties += tied as usize;
        }
        let resid = (0..j_count).map(|j| ((rate[j] - prep.demands[j]) / prep.demands[j]).abs()).fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(r, _, _)| resid < *r) {
            best = Some((resid, owner, ties));
        }
        let step = 0.5 / (t + 1) as f64;
        for j in 0..j_count {
            let g = ((prep.demands[j] - rate[j]) / prep.demands[j]).clamp(-1.0, 1.0);
            gamma[j] *= (step * g).exp();
        }
    }
    let (_, mut owner, ties) = best.unwrap();
    // Every message keeps at least one subcarrier: take the cheapest from a multiply-owned one.
    for j in 0..j_count {
        if owner.contains(&j) {
            continue;
        }
        let mut counts = vec![0usize; j_count];
        owner.iter().for_each(|&o| counts[o] += 1);
        let pick = (0..prep.n_sub).filter(|&n| counts[owner[n]] > 1).min_by(|&x, &y| {
            let cx = blocks[j][x].slope(0.0) / blocks[owner[x]][x].slope(0.0).max(f64::MIN_POSITIVE);
            let cy = blocks[j][y].slope(0.0) / blocks[owner[y]][y].slope(0.0).max(f64::MIN_POSITIVE);
            cx.total_cmp(&cy)
        });
        if let Some(n) = pick {
            owner[n] = j;
        }
    }
    (owner, ties)
}

fn binary_mu(owner: &[usize], j_count: usize) -> Vec<Vec<f64>> {
    let mut mu = vec![vec![0.0; owner.len()]; j_count];
    for (n, &j) in owner.iter().enumerate() {
        mu[j][n] = 1.0;
    }
    mu
}

/// Uniform shares, equal-split rates, each beam along the weakest member's channel.
fn initial_from(prep: &Prepared, direction: impl Fn(usize, usize) -> DVector<C64>) -> DcIterate {
    let j_count = prep.active.len();
    let share = 1.0 / j_count as f64;
    let mut it = DcIterate {
        beams: vec![],
        mu: vec![vec![share; prep.n_sub]; j_count],
        rate: vec![],
        budget: vec![],
        multipliers: vec![0.0; j_count],
        objective: 0.0,
    };
    for j in 0..j_count {
        let c = prep.demands[j] / prep.n_sub as f64;
        let e = share * (c / (prep.bandwidth * share)).exp2() - share;
        let mut row = vec![];
        for n in 0..prep.n_sub {
            let a = &prep.scaled[j][n];
            let mut w = direction(j, n);
            if !(min_gain(a, &w) > 0.0) {
                w = a.iter().fold(DVector::zeros(a[0].len()), |acc, ak| acc + ak.normalize());
                w = w.normalize();
            }
            let w = w.scale((e / min_gain(a, &w)).sqrt());
            it.objective += w.norm_squared() / prep.m;
            row.push(w);
        }
        it.rate.push(vec![c; prep.n_sub]);
        it.budget.push(vec![e; prep.n_sub]);
        it.beams.push(row);
    }
    it
}

/// Deterministic feasible starting point of the relaxed problem.
pub fn initial_point(problem: &DcProblem) -> Result<DcIterate, DcError> {
    let prep = prepare(problem)?;
    if prep.active.is_empty() {
        return Err(DcError::InvalidInput("no message with positive demand".into()));
    }
    Ok(initial_from(&prep, |j, n| {
        let a = &prep.scaled[j][n];
        let weakest = a.iter().min_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared())).unwrap();
        weakest.normalize()
    }))
}

fn random_initial(prep: &Prepared, rng: &mut ChaCha8Rng) -> DcIterate {
    let m = prep.scaled[0][0][0].len();
    let dirs: Vec<Vec<DVector<C64>>> = (0..prep.active.len())
        .map(|_| (0..prep.n_sub).map(|_| complex_gaussian(rng, m).normalize()).collect())
        .collect();
    initial_from(prep, |j, n| dirs[j][n].clone())
}

/// Residuals of the relaxed constraints at an iterate.
pub fn audit_iterate(problem: &DcProblem, it: &DcIterate) -> Result<RelaxedAudit, DcError> {
    let prep = prepare(problem)?;
    let mut audit = RelaxedAudit::default();
    for n in 0..prep.n_sub {
        let s: f64 = it.mu.iter().map(|row| row[n]).sum();
        audit.mu_sum_error = audit.mu_sum_error.max((s - 1.0).abs());
    }
    for j in 0..prep.active.len() {
        let total: f64 = it.rate[j].iter().sum();
        audit.demand_shortfall = audit.demand_shortfall.max((prep.demands[j] - total) / prep.demands[j]);
        for n in 0..prep.n_sub {
            let (mu, c) = (it.mu[j][n], it.rate[j][n]);
            audit.negative |= mu < 0.0 || c < 0.0;
            let need = if mu > 0.0 { mu * ((c / (prep.bandwidth * mu)).exp2() - 1.0) } else { 0.0 };
            if need > 0.0 {
                let got = min_gain(&prep.scaled[j][n], &it.beams[j][n]);
                audit.snr_shortfall = audit.snr_shortfall.max((need - got) / need);
            }
        }
    }
    audit.demand_shortfall = audit.demand_shortfall.max(0.0);
    audit.snr_shortfall = audit.snr_shortfall.max(0.0);
    Ok(audit)
}

/// Outcome of one linearized solve.
#[derive(Clone, Debug)]
pub struct DcStep {
    pub iterate: DcIterate,
    pub ties: usize,
    /// False when no candidate improved and the previous iterate was kept.
    pub moved: bool,
}

fn step_prepared(prep: &Prepared, prev: &DcIterate, settings: &DcSettings) -> DcStep {
    let mut blocks = build_blocks(prep, &prev.beams);
    let warm = if prev.multipliers.iter().all(|&g| g > 0.0) {
        prev.multipliers.clone()
    } else {
        // Rate multipliers for the current shares seed the assignment dual.
        restricted_solve(prep, &mut blocks, &prev.mu, &vec![0.0; prep.active.len()]).multipliers
    };
    let (owner, ties) = dual_assignment(prep, &mut blocks, &warm, settings.assignment_steps);
    let dual_mu = binary_mu(&owner, prep.active.len());
    let mut best = restricted_solve(prep, &mut blocks, &dual_mu, &warm);
    if dual_mu != prev.mu {
        // Partial moves toward the dual assignment let fractional shares polarize gradually.
        for theta in [0.0, 0.25, 0.5, 0.75] {
            let mu: Vec<Vec<f64>> = prev
                .mu
                .iter()
                .zip(&dual_mu)
                .map(|(p, d)| p.iter().zip(d).map(|(a, b)| (1.0 - theta) * a + theta * b).collect())
                .collect();
            let cand = restricted_solve(prep, &mut blocks, &mu, &warm);
            if cand.objective < best.objective {
                best = cand;
            }
        }
    }
    if best.objective <= prev.objective {
        DcStep { iterate: best, ties, moved: true }
    } else {
        DcStep { iterate: prev.clone(), ties, moved: false }
    }
}

/// One majorize-minimize step from a feasible iterate; never increases the objective.
pub fn dc_step(problem: &DcProblem, prev: &DcIterate) -> Result<DcStep, DcError> {
    let prep = prepare(problem)?;
    Ok(step_prepared(&prep, prev, &DcSettings::default()))
}

fn run_from(prep: &Prepared, start: DcIterate, settings: &DcSettings) -> (DcIterate, Vec<f64>, bool, usize) {
    let mut it = start;
    let mut history = vec![it.objective];
    let mut calm = 0;
    let mut ties = 0;
    let mut converged = false;
    for _ in 0..settings.max_outer {
        let step = step_prepared(prep, &it, settings);
        ties = step.ties;
        let change = (it.objective - step.iterate.objective).abs() / it.objective.max(f64::MIN_POSITIVE);
        it = step.iterate;
        history.push(it.objective);
        if !step.moved || change < settings.rel_tol {
            calm += 1;
        } else {
            calm = 0;
        }
        if calm >= settings.patience || !step.moved {
            converged = true;
            break;
        }
    }
    (it, history, converged, ties)
}

fn beam_for(a: &[DVector<C64>], w: &DVector<C64>) -> BeamSolution {
    let unit = fix_phase(&w.normalize());
    let q = 1.0 / min_gain(a, &unit);
    BeamSolution {
        v: unit.scale(q.sqrt()),
        q,
        relaxed_value: None,
        method: BeamMethod::Dc,
        status: BeamStatus::RankOne,
    }
}

/// Binary plan from a relaxed iterate: largest share wins each subcarrier (lowest index on ties),
/// beams keep the relaxed directions, powers are re-optimized for those directions.
fn extract(problem: &DcProblem, prep: &Prepared, it: &DcIterate) -> Result<(AllocationSolution, Option<f64>), DcError> {
    let j_count = problem.messages.len();
    let owner: Vec<usize> = (0..prep.n_sub)
        .map(|n| {
            let mut best = 0;
            for j in 1..prep.active.len() {
                if it.mu[j][n] > it.mu[best][n] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let raw =
        it.is_binary().then(|| owner.iter().enumerate().map(|(n, &j)| it.beams[j][n].norm_squared() / prep.m).sum());
    let mut beams: Vec<Vec<BeamSolution>> = vec![vec![]; j_count];
    let mut demands = Vec::with_capacity(j_count);
    let mut slot = vec![None; j_count];
    for (x, &j) in prep.active.iter().enumerate() {
        slot[j] = Some(x);
    }
    for (j, msg) in problem.messages.iter().enumerate() {
        let row: Vec<BeamSolution> = match slot[j] {
            Some(x) => (0..prep.n_sub).map(|n| beam_for(&prep.scaled[x][n], &it.beams[x][n])).collect(),
            None => (0..prep.n_sub)
                .map(|n| {
                    let a: Vec<DVector<C64>> = msg
                        .members
                        .iter()
                        .map(|&k| {
                            problem
                                .channel
                                .h(n, k)
                                .scale(problem.betas[k].sqrt() / (prep.m * problem.params.noise_w).sqrt())
                        })
                        .collect();
                    let w = a.iter().fold(DVector::zeros(a[0].len()), |acc, ak| acc + ak.normalize());
                    beam_for(&a, &w)
                })
                .collect(),
        };
        demands.push(MessageDemand { key: msg.key, demand_bps: msg.demand_bps, q: row.iter().map(|b| b.q).collect() });
        beams[j] = row;
    }
    let fixed: Vec<Option<usize>> = owner.iter().map(|&x| Some(prep.active[x])).collect();
    let (power, rate, multipliers) = powers_for_assignment(&demands, &fixed, prep.bandwidth);
    let total: f64 = power.iter().sum();
    let kept = PowerAllocation {
        assignment: fixed,
        power,
        rate,
        multipliers,
        total_power: total,
        dual_bound: 0.0,
        ties: 0,
        dual_converged: true,
        iterations: 0,
    };
    let realloc = solve_allocation(&demands, prep.bandwidth)?;
    let serves_all = prep.active.iter().all(|j| kept.assignment.contains(&Some(*j)));
    let chosen = if !serves_all || realloc.total_power < kept.total_power { realloc } else { kept };
    Ok((assemble_solution(&demands, &chosen, &beams, problem.params.antennas)?, raw))
}

/// Runs DC iterations from each starting point and returns the best extracted binary plan.
pub fn solve_general(problem: &DcProblem, settings: &DcSettings) -> Result<DcResult, DcError> {
    let prep = prepare(problem)?;
    if prep.active.is_empty() {
        let demands: Vec<MessageDemand> = problem
            .messages
            .iter()
            .map(|m| MessageDemand { key: m.key, demand_bps: 0.0, q: vec![1.0; prep.n_sub] })
            .collect();
        let alloc = solve_allocation(&demands, prep.bandwidth)?;
        let empty =
            DcIterate { beams: vec![], mu: vec![], rate: vec![], budget: vec![], multipliers: vec![], objective: 0.0 };
        let solution = assemble_solution(&demands, &alloc, &vec![vec![]; demands.len()], problem.params.antennas)?;
        return Ok(DcResult {
            solution,
            history: vec![0.0],
            relaxed: empty,
            raw_objective: Some(0.0),
            converged: true,
            ties: 0,
            initial_points: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut best: Option<DcResult> = None;
    for p in 0..settings.initial_points.max(1) {
        let start = if p == 0 { initial_point(problem)? } else { random_initial(&prep, &mut rng) };
        let (relaxed, history, converged, ties) = run_from(&prep, start, settings);
        let (solution, raw) = extract(problem, &prep, &relaxed)?;
        if best.as_ref().is_none_or(|b| solution.objective_w < b.solution.objective_w) {
            best = Some(DcResult {
                solution,
                history,
                relaxed,
                raw_objective: raw,
                converged,
                ties,
                initial_points: settings.initial_points.max(1),
            });
        }
    }
    let mut out = best.unwrap();
    out.solution.ties = out.ties;
    out.solution.converged = out.converged;
    Ok(out)
}
