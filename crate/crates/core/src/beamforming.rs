//! Per-(message, subcarrier) minimum-power beam meeting unit SNR for every group member.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::numerics::{eig_hermitian, solve_sdp, HermitianMatrix, NumericsError, SdpProblem, SdpStatus, C64};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeamError {
    #[error("invalid beam instance: {0}")]
    InvalidInput(String),
    #[error("combined channel vanishes; no asymptotic beam")]
    Degenerate,
    #[error("relaxation solve failed: {0:?}")]
    Solver(SdpStatus),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Group channels `(h_k, β_k)` with antenna count and noise power.
#[derive(Clone, Debug)]
pub struct BeamInstance {
    users: Vec<(DVector<C64>, f64)>,
    antennas: usize,
    noise_w: f64,
}

impl BeamInstance {
    pub fn new(users: Vec<(DVector<C64>, f64)>, antennas: usize, noise_w: f64) -> Result<Self, BeamError> {
        if users.is_empty() {
            return Err(BeamError::InvalidInput("empty group".into()));
        }
        if !(noise_w > 0.0) || antennas == 0 {
            return Err(BeamError::InvalidInput("antennas and noise must be positive".into()));
        }
        for (h, beta) in &users {
            if h.len() != antennas {
                return Err(BeamError::InvalidInput(format!("channel length {} != {antennas}", h.len())));
            }
            if !(h.norm_squared() > 0.0) || !h.norm_squared().is_finite() {
                return Err(BeamError::InvalidInput("zero or non-finite channel".into()));
            }
            if !(*beta > 0.0) {
                return Err(BeamError::InvalidInput("beta must be positive".into()));
            }
        }
        Ok(Self { users, antennas, noise_w })
    }

    pub fn users(&self) -> &[(DVector<C64>, f64)] {
        &self.users
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn noise_w(&self) -> f64 {
        self.noise_w
    }

    /// `M σ²`, the SNR normalizer.
    pub fn snr_scale(&self) -> f64 {
        self.antennas as f64 * self.noise_w
    }

    /// Per-user SNR `β_k |h_k^H v|² / (M σ²)`.
    pub fn snr(&self, v: &DVector<C64>) -> Vec<f64> {
        let s = self.snr_scale();
        self.users.iter().map(|(h, b)| b * h.dotc(v).norm_sqr() / s).collect()
    }

    /// Smallest power along direction `w` that gives every member unit SNR.
    pub fn power_for_direction(&self, w: &DVector<C64>) -> f64 {
        let unit = w.normalize();
        let worst = self.snr(&unit).into_iter().fold(f64::INFINITY, f64::min);
        1.0 / worst
    }

    pub fn constraint_matrices(&self) -> Vec<HermitianMatrix> {
        let s = self.snr_scale();
        self.users.iter().map(|(h, b)| HermitianMatrix::outer(h, b / s)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamMethod {
    SdrRank1,
    Asymptotic,
    Mrt,
    /// Direction taken from the DC solver's aggregated beam.
    Dc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamStatus {
    RankOne,
    /// Rank reduction stalled above rank one; `v` is only a feasible upper bound.
    RankGtOne,
}

#[derive(Clone, Debug)]
pub struct BeamSolution {
    /// Unnormalized beam; `‖v‖² = q`.
    pub v: DVector<C64>,
    pub q: f64,
    /// Optimum of the relaxation when it was solved.
    pub relaxed_value: Option<f64>,
    pub method: BeamMethod,
    pub status: BeamStatus,
}

impl BeamSolution {
    pub fn direction(&self) -> DVector<C64> {
        self.v.unscale(self.q.sqrt())
    }
}

/// Rotates `v` so its largest-magnitude entry is real and positive.
pub fn fix_phase(v: &DVector<C64>) -> DVector<C64> {
    let (mut idx, mut best) = (0, -1.0);
    for (i, z) in v.iter().enumerate() {
        if z.norm() > best * (1.0 + 1e-12) {
            best = z.norm();
            idx = i;
        }
    }
    if best <= 0.0 {
        return v.clone();
    }
    let rot = v[idx].conj() / v[idx].norm();
    v.map(|z| z * rot)
}

fn scaled_solution(
    inst: &BeamInstance,
    w: &DVector<C64>,
    relaxed: Option<f64>,
    method: BeamMethod,
    status: BeamStatus,
) -> BeamSolution {
    let unit = fix_phase(&w.normalize());
    let q = inst.power_for_direction(&unit);
    BeamSolution { v: unit.scale(q.sqrt()), q, relaxed_value: relaxed, method, status }
}

/// Relaxation, rank reduction to a rank-one optimum, and beam extraction.
pub fn solve_qos_sdr(inst: &BeamInstance) -> Result<BeamSolution, BeamError> {
    if inst.users.len() == 1 {
        let (h, b) = &inst.users[0];
        let q = inst.snr_scale() / (b * h.norm_squared());
        let unit = fix_phase(&h.normalize());
        return Ok(BeamSolution {
            v: unit.scale(q.sqrt()),
            q,
            relaxed_value: Some(q),
            method: BeamMethod::SdrRank1,
            status: BeamStatus::RankOne,
        });
    }
    let mats = inst.constraint_matrices();
    let problem = SdpProblem::trace_min(mats.iter().map(|a| (a.clone(), 1.0)).collect())?;
    let sol = solve_sdp(&problem, 1e-10)?;
    if sol.status == SdpStatus::Infeasible {
        return Err(BeamError::Solver(sol.status));
    }
    let relaxed = sol.objective_value;
    let reduced = rank_reduce(&sol.x, &mats)?;
    let eig = eig_hermitian(&reduced.matrix)?;
    let top = eig.vectors.column(eig.values.len() - 1).into_owned();
    let status = if reduced.irreducible { BeamStatus::RankGtOne } else { BeamStatus::RankOne };
    Ok(scaled_solution(inst, &top, Some(relaxed), BeamMethod::SdrRank1, status))
}

#[derive(Clone, Debug)]
pub struct RankReduction {
    pub matrix: HermitianMatrix,
    pub rank: usize,
    /// No nonzero Hermitian direction exists in the constraint null space.
    pub irreducible: bool,
    pub steps: usize,
}

const RANK_THRESHOLD: f64 = 1e-7;

/// Factor `V = U U^H` over eigenvalues above the rank threshold.
fn low_rank_factor(v: &HermitianMatrix) -> Result<(DMatrix<C64>, usize), BeamError> {
    let eig = eig_hermitian(v)?;
    let lmax = eig.values.last().copied().unwrap_or(0.0);
    let n = v.dim();
    if lmax <= 0.0 {
        return Ok((DMatrix::zeros(n, 0), 0));
    }
    let keep: Vec<usize> = (0..n).filter(|&i| eig.values[i] > RANK_THRESHOLD * lmax).collect();
    let u = DMatrix::from_fn(n, keep.len(), |r, c| eig.vectors[(r, keep[c])] * eig.values[keep[c]].sqrt());
    Ok((u, keep.len()))
}

/// Real coordinates of a Hermitian ψ×ψ matrix: diagonal, then (Re, Im) of each upper entry.
fn hermitian_from_params(p: &[f64], psi: usize) -> DMatrix<C64> {
    let mut d = DMatrix::zeros(psi, psi);
    let mut idx = 0;
    for i in 0..psi {
        d[(i, i)] = C64::new(p[idx], 0.0);
        idx += 1;
    }
    for i in 0..psi {
        for j in (i + 1)..psi {
            let z = C64::new(p[idx], p[idx + 1]);
            idx += 2;
            d[(i, j)] = z;
            d[(j, i)] = z.conj();
        }
    }
    d
}

/// Row of the map `Δ ↦ Re tr(B Δ)` in the real coordinates above.
fn linear_row(b: &DMatrix<C64>) -> Vec<f64> {
    let psi = b.nrows();
    let mut row = Vec::with_capacity(psi * psi);
    for i in 0..psi {
        row.push(b[(i, i)].re);
    }
    for i in 0..psi {
        for j in (i + 1)..psi {
            // B_ij conj(Δ_ij) + B_ji Δ_ij = 2 Re(B_ji Δ_ij)
            let bji = b[(j, i)];
            row.push(2.0 * bji.re);
            row.push(-2.0 * bji.im);
        }
    }
    row
}

/// Null vector from the smallest-index free column of the reduced row echelon form.
fn first_null_vector(rows: &[Vec<f64>], cols: usize) -> Option<Vec<f64>> {
    let mut a: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                r.clone()
            }
        })
        .collect();
    let m = a.len();
    let mut pivots: Vec<(usize, usize)> = Vec::new();
    let mut row = 0;
    let mut free = None;
    for col in 0..cols {
        if row >= m {
            free.get_or_insert(col);
            continue;
        }
        let (best, val) =
            (row..m).map(|r| (r, a[r][col].abs())).max_by(|x, y| x.1.total_cmp(&y.1)).unwrap_or((row, 0.0));
        if val <= 1e-10 {
            free.get_or_insert(col);
            continue;
        }
        a.swap(row, best);
        let p = a[row][col];
        for v in a[row].iter_mut() {
            *v /= p;
        }
        for r in 0..m {
            if r != row && a[r][col] != 0.0 {
                let f = a[r][col];
                for c in 0..cols {
                    a[r][c] -= f * a[row][c];
                }
            }
        }
        pivots.push((row, col));
        row += 1;
    }
    let f = free?;
    let mut x = vec![0.0; cols];
    x[f] = 1.0;
    for &(r, c) in &pivots {
        x[c] = -a[r][f];
    }
    Some(x)
}

/// Purifies `V` toward rank one while keeping every `tr(A_k V)` fixed.
pub fn rank_reduce(v: &HermitianMatrix, constraints: &[HermitianMatrix]) -> Result<RankReduction, BeamError> {
    let mut current = v.clone();
    let mut steps = 0;
    loop {
        let (u, psi) = low_rank_factor(&current)?;
        if psi <= 1 {
            let matrix = if psi == 0 { current } else { HermitianMatrix::outer(&u.column(0).into_owned(), 1.0) };
            return Ok(RankReduction { matrix, rank: psi, irreducible: false, steps });
        }
        let rows: Vec<Vec<f64>> = constraints.iter().map(|a| linear_row(&(u.adjoint() * a.as_matrix() * &u))).collect();
        let Some(p) = first_null_vector(&rows, psi * psi) else {
            return Ok(RankReduction { matrix: current, rank: psi, irreducible: true, steps });
        };
        let delta = HermitianMatrix::from_unchecked(hermitian_from_params(&p, psi));
        let eig = eig_hermitian(&delta)?;
        let mut i0 = 0;
        for (i, d) in eig.values.iter().enumerate() {
            if d.abs() > eig.values[i0].abs() {
                i0 = i;
            }
        }
        let d0 = eig.values[i0];
        // U (I − Δ/δ₀) U^H with the factor kept in square-root form.
        let weights: Vec<f64> = eig.values.iter().map(|d| (1.0 - d / d0).max(0.0)).collect();
        let mut factor = &u * &eig.vectors;
        for (c, w) in weights.iter().enumerate() {
            factor.column_mut(c).scale_mut(w.sqrt());
        }
        current = HermitianMatrix::from_unchecked(&factor * factor.adjoint());
        steps += 1;
        if steps > v.dim() + 1 {
            return Ok(RankReduction { matrix: current, rank: psi, irreducible: true, steps });
        }
    }
}

/// Normalized `Σ_k h_k/√β_k`, scaled so the weakest member reaches unit SNR.
pub fn asymptotic_beamformer(inst: &BeamInstance) -> Result<BeamSolution, BeamError> {
    let mut sum = DVector::<C64>::zeros(inst.antennas);
    for (h, b) in &inst.users {
        sum += h.unscale(b.sqrt());
    }
    let scale = inst.users.iter().map(|(h, b)| h.norm() / b.sqrt()).fold(0.0, f64::max);
    if !(sum.norm() > 1e-12 * scale) {
        return Err(BeamError::Degenerate);
    }
    Ok(scaled_solution(inst, &sum, None, BeamMethod::Asymptotic, BeamStatus::RankOne))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MrtMode {
    PerUser,
    Group,
}

/// Maximum-ratio direction: the user channel, or the dominant eigenvector of `Σ β_k h_k h_k^H`.
pub fn mrt_beamformer(inst: &BeamInstance, mode: MrtMode) -> Result<BeamSolution, BeamError> {
    let dir = match mode {
        MrtMode::PerUser => {
            if inst.users.len() != 1 {
                return Err(BeamError::InvalidInput("per-user MRT needs a single-user group".into()));
            }
            inst.users[0].0.clone()
        }
        MrtMode::Group => {
            let gain = inst
                .users
                .iter()
                .fold(HermitianMatrix::zeros(inst.antennas), |acc, (h, b)| acc.add(&HermitianMatrix::outer(h, *b)));
            let eig = eig_hermitian(&gain)?;
            eig.vectors.column(inst.antennas - 1).into_owned()
        }
    };
    Ok(scaled_solution(inst, &dir, None, BeamMethod::Mrt, BeamStatus::RankOne))
}
