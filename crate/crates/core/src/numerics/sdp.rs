use nalgebra::{DMatrix, DVector};

use super::hermitian::{eig_hermitian, HermitianMatrix, C64};
use super::NumericsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintSense {
    GreaterEq,
    Equal,
}

#[derive(Clone, Debug)]
pub struct SdpConstraint {
    pub matrix: HermitianMatrix,
    pub rhs: f64,
    pub sense: ConstraintSense,
}

/// `min tr(C X)` subject to `tr(A_j X) (≥ | =) b_j`, `X ⪰ 0`.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    objective: HermitianMatrix,
    constraints: Vec<SdpConstraint>,
}

impl SdpProblem {
    pub fn new(objective: HermitianMatrix, constraints: Vec<SdpConstraint>) -> Result<Self, NumericsError> {
        if constraints.is_empty() {
            return Err(NumericsError::InvalidInput("at least one constraint is required".into()));
        }
        let n = objective.dim();
        for c in &constraints {
            if c.matrix.dim() != n {
                return Err(NumericsError::DimensionMismatch { expected: n, found: c.matrix.dim() });
            }
            if !c.rhs.is_finite() {
                return Err(NumericsError::InvalidInput("non-finite right-hand side".into()));
            }
            if c.matrix.frobenius_norm() == 0.0 {
                return Err(NumericsError::InvalidInput("zero constraint matrix".into()));
            }
        }
        Ok(Self { objective, constraints })
    }

    /// Trace objective with `tr(A_j X) ≥ b_j` rows.
    pub fn trace_min(constraints: Vec<(HermitianMatrix, f64)>) -> Result<Self, NumericsError> {
        let n = constraints.first().map(|c| c.0.dim()).unwrap_or(0);
        if n == 0 {
            return Err(NumericsError::InvalidInput("at least one constraint is required".into()));
        }
        let rows = constraints
            .into_iter()
            .map(|(matrix, rhs)| SdpConstraint { matrix, rhs, sense: ConstraintSense::GreaterEq })
            .collect();
        Self::new(HermitianMatrix::identity(n), rows)
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn objective(&self) -> &HermitianMatrix {
        &self.objective
    }

    pub fn constraints(&self) -> &[SdpConstraint] {
        &self.constraints
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub x: HermitianMatrix,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub dual_values: Vec<f64>,
    pub status: SdpStatus,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SdpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub infeasible_dual_cap: f64,
}

impl Default for SdpSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 100, infeasible_dual_cap: 1e12 }
    }
}

pub fn solve_sdp(p: &SdpProblem, tol: f64) -> Result<SdpSolution, NumericsError> {
    solve_sdp_with(p, &SdpSettings { tol, ..SdpSettings::default() })
}

struct Scaled {
    c: DMatrix<C64>,
    a: Vec<DMatrix<C64>>,
    b: Vec<f64>,
    ineq: Vec<bool>,
    c_norm: f64,
    a_norm: Vec<f64>,
    x_scale: f64,
}

fn scale_problem(p: &SdpProblem) -> Scaled {
    let c_norm = p.objective.frobenius_norm().max(f64::MIN_POSITIVE);
    let c = p.objective.as_matrix().unscale(c_norm);
    let a_norm: Vec<f64> = p.constraints.iter().map(|r| r.matrix.frobenius_norm()).collect();
    let a = p.constraints.iter().zip(&a_norm).map(|(r, &s)| r.matrix.as_matrix().unscale(s)).collect();
    let b_norm: Vec<f64> = p.constraints.iter().zip(&a_norm).map(|(r, &s)| r.rhs / s).collect();
    let bmax = b_norm.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let x_scale = if bmax > 0.0 { bmax } else { 1.0 };
    let b = b_norm.iter().map(|v| v / x_scale).collect();
    let ineq = p.constraints.iter().map(|r| r.sense == ConstraintSense::GreaterEq).collect();
    Scaled { c, a, b, ineq, c_norm, a_norm, x_scale }
}

fn re_inner(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    a.iter().zip(b.transpose().iter()).map(|(x, y)| x.re * y.re - x.im * y.im).sum()
}

fn hermitize(m: &DMatrix<C64>) -> DMatrix<C64> {
    (m + m.adjoint()).scale(0.5)
}

/// Largest step `t` with `x + t dx ⪰ 0`, infinite when unbounded.
fn max_psd_step(x_chol: &DMatrix<C64>, dx: &DMatrix<C64>) -> f64 {
    let n = dx.nrows();
    let l = x_chol;
    let linv = l.clone().solve_lower_triangular(&DMatrix::identity(n, n)).unwrap_or_else(|| DMatrix::identity(n, n));
    let t = hermitize(&(&linv * dx * linv.adjoint()));
    let lmin = match eig_hermitian(&HermitianMatrix::from_unchecked(t)) {
        Ok(e) => e.values[0],
        Err(_) => return 0.0,
    };
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn max_lp_step(v: &[f64], dv: &[f64], mask: &[bool]) -> f64 {
    v.iter()
        .zip(dv)
        .zip(mask)
        .filter(|((_, d), m)| **m && **d < 0.0)
        .map(|((x, d), _)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

struct Direction {
    dx: DMatrix<C64>,
    dz: DMatrix<C64>,
    dy: Vec<f64>,
    ds: Vec<f64>,
}

pub fn solve_sdp_with(p: &SdpProblem, settings: &SdpSettings) -> Result<SdpSolution, NumericsError> {
    let sp = scale_problem(p);
    let n = p.dim();
    let m = sp.a.len();
    let n_ineq = sp.ineq.iter().filter(|v| **v).count();
    let tol = settings.tol;

    let bmax = sp.b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let xi = 10f64.max((n as f64).sqrt()).max(n as f64 * (1.0 + bmax) / 2.0);
    let eta = 10f64.max((n as f64).sqrt());
    let mut x: DMatrix<C64> = DMatrix::identity(n, n).scale(xi);
    let mut z: DMatrix<C64> = DMatrix::identity(n, n).scale(eta);
    let mut y: Vec<f64> = sp.ineq.iter().map(|&q| if q { eta } else { 0.0 }).collect();
    let mut s: Vec<f64> = sp.ineq.iter().map(|&q| if q { xi } else { 0.0 }).collect();

    let b_norm = sp.b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let c_norm = sp.c.norm();

    let mut best: Option<(f64, DMatrix<C64>, Vec<f64>)> = None;
    let mut status = SdpStatus::MaxIter;
    let mut iterations = 0;

    for it in 0..settings.max_iter {
        iterations = it + 1;
        let ax: Vec<f64> = sp.a.iter().map(|a| re_inner(a, &x)).collect();
        let rp: Vec<f64> = (0..m).map(|i| sp.b[i] - ax[i] + if sp.ineq[i] { s[i] } else { 0.0 }).collect();
        let mut rd = &sp.c - &z;
        for (ai, yi) in sp.a.iter().zip(&y) {
            rd -= ai.scale(*yi);
        }
        let pobj = re_inner(&sp.c, &x);
        let dobj: f64 = sp.b.iter().zip(&y).map(|(b, y)| b * y).sum();
        let comp = re_inner(&x, &z) + s.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>();
        let mu = comp / (n + n_ineq) as f64;

        let pinf = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + b_norm);
        let dinf = rd.norm() / (1.0 + c_norm);
        let gap = (pobj - dobj).abs().max(comp.abs()) / (1.0 + pobj.abs() + dobj.abs());
        let merit = pinf.max(dinf).max(gap);
        if best.as_ref().is_none_or(|(bm, _, _)| merit < *bm) {
            best = Some((merit, x.clone(), y.clone()));
        }
        if pinf <= tol && dinf <= tol && gap <= tol {
            status = SdpStatus::Optimal;
            break;
        }
        if dobj * sp.c_norm * sp.x_scale > settings.infeasible_dual_cap && dinf <= tol.max(1e-6) {
            status = SdpStatus::Infeasible;
            break;
        }

        let Some(zchol) = z.clone().cholesky() else { break };
        let zinv = zchol.inverse();
        let Some(xchol) = x.clone().cholesky() else { break };
        let xl = xchol.l();
        let zl = zchol.l();

        let g: Vec<DMatrix<C64>> = sp.a.iter().map(|a| &x * a * &zinv).collect();
        let mut schur = DMatrix::<f64>::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let v = re_inner(&sp.a[i], &g[j]);
                schur[(i, j)] = v;
                schur[(j, i)] = v;
            }
            if sp.ineq[i] {
                schur[(i, i)] += s[i] / y[i];
            }
        }
        let schur_chol = schur.clone().cholesky();
        let schur_lu = schur.clone().lu();
        let solve_schur = |rhs: &DVector<f64>| -> Option<DVector<f64>> {
            match &schur_chol {
                Some(ch) => Some(ch.solve(rhs)),
                None => schur_lu.solve(rhs),
            }
        };

        let direction = |target: f64, cc: Option<&DMatrix<C64>>, cl: Option<&[f64]>| -> Option<Direction> {
            let mut h = zinv.scale(target) - &x - (&x * &rd) * &zinv;
            if let Some(cc) = cc {
                h -= cc * &zinv;
            }
            let mut rhs = DVector::<f64>::zeros(m);
            let mut gl = vec![0.0; m];
            for i in 0..m {
                let hi = re_inner(&sp.a[i], &h);
                rhs[i] = rp[i] - hi;
                if sp.ineq[i] {
                    let corr = cl.map_or(0.0, |c| c[i]);
                    gl[i] = (target - s[i] * y[i] - corr) / y[i];
                    rhs[i] += gl[i];
                }
            }
            let dy = solve_schur(&rhs)?;
            let mut dz = rd.clone();
            let mut dx = h;
            for j in 0..m {
                dz -= sp.a[j].scale(dy[j]);
                dx += g[j].scale(dy[j]);
            }
            let dx = hermitize(&dx);
            let dz = hermitize(&dz);
            let ds = (0..m).map(|i| if sp.ineq[i] { gl[i] - s[i] / y[i] * dy[i] } else { 0.0 }).collect();
            Some(Direction { dx, dz, dy: dy.iter().copied().collect(), ds })
        };

        let steps = |d: &Direction, tau: f64| -> (f64, f64) {
            let ap = (tau * max_psd_step(&xl, &d.dx)).min(tau * max_lp_step(&s, &d.ds, &sp.ineq)).min(1.0);
            let ad = (tau * max_psd_step(&zl, &d.dz)).min(tau * max_lp_step(&y, &d.dy, &sp.ineq)).min(1.0);
            (ap, ad)
        };

        let Some(aff) = direction(0.0, None, None) else { break };
        let (apa, ada) = steps(&aff, 1.0);
        let x_a = &x + aff.dx.scale(apa);
        let z_a = &z + aff.dz.scale(ada);
        let comp_a = re_inner(&x_a, &z_a)
            + (0..m).filter(|&i| sp.ineq[i]).map(|i| (s[i] + apa * aff.ds[i]) * (y[i] + ada * aff.dy[i])).sum::<f64>();
        let mu_a = comp_a / (n + n_ineq) as f64;
        let sigma = if mu > 0.0 { (mu_a / mu).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        let cc = &aff.dx * &aff.dz;
        let cl: Vec<f64> = (0..m).map(|i| aff.ds[i] * aff.dy[i]).collect();
        let Some(dir) = direction(sigma * mu, Some(&cc), Some(&cl)) else { break };
        let tau = if merit < 1e-4 { 0.995 } else { 0.98 };
        let (ap, ad) = steps(&dir, tau);
        if ap <= 0.0 && ad <= 0.0 {
            break;
        }
        x = hermitize(&(&x + dir.dx.scale(ap)));
        z = hermitize(&(&z + dir.dz.scale(ad)));
        for i in 0..m {
            y[i] += ad * dir.dy[i];
            if sp.ineq[i] {
                s[i] += ap * dir.ds[i];
            }
        }
    }

    if status == SdpStatus::MaxIter {
        if let Some((_, bx, by)) = best {
            x = bx;
            y = by;
        }
    }

    let mut xs = x.scale(sp.x_scale);
    let eig = eig_hermitian(&HermitianMatrix::from_unchecked(xs.clone()))?;
    let lmax = eig.values.last().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    if eig.values[0] < 0.0 && eig.values[0] > -1e-10 * lmax.max(1.0) {
        let clipped = super::hermitian::HermitianEigen {
            values: eig.values.iter().map(|v| v.max(0.0)).collect(),
            vectors: eig.vectors,
        };
        xs = clipped.reconstruct().into_matrix();
    }
    let x_out = HermitianMatrix::from_unchecked(xs);
    let objective_value = x_out.inner(&p.objective);
    let dual_values: Vec<f64> = y.iter().zip(&sp.a_norm).map(|(yi, an)| yi * sp.c_norm / an).collect();
    let dual_objective = p.constraints.iter().zip(&dual_values).map(|(c, y)| c.rhs * y).sum();
    Ok(SdpSolution { x: x_out, objective_value, dual_objective, dual_values, status, iterations })
}
