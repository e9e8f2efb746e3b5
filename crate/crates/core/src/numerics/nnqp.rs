use nalgebra::{DMatrix, DVector};

/// Solution of `min ½ xᵀHx − qᵀx` over `x ≥ 0`.
#[derive(Clone, Debug)]
pub struct NnqpSolution {
    pub x: Vec<f64>,
    /// Indices with `x > 0`, ascending.
    pub support: Vec<usize>,
}

/// Active-set method in the style of Lawson–Hanson. `h` must be symmetric PSD.
pub fn solve_nnqp(h: &DMatrix<f64>, q: &[f64]) -> NnqpSolution {
    let n = q.len();
    debug_assert_eq!(h.nrows(), n);
    let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-13 * scale;
    let ridge = 1e-14 * (0..n).map(|i| h[(i, i)]).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut x = vec![0.0; n];
    let mut free = vec![false; n];

    for _outer in 0..(3 * n + 10) {
        let w: Vec<f64> = (0..n).map(|i| q[i] - (0..n).map(|j| h[(i, j)] * x[j]).sum::<f64>()).collect();
        let entering = (0..n).filter(|&j| !free[j] && w[j] > tol).max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(t) = entering else { break };
        free[t] = true;

        for _inner in 0..(n + 2) {
            let idx: Vec<usize> = (0..n).filter(|&j| free[j]).collect();
            let z = solve_restricted(h, q, &idx, ridge);
            if idx.iter().zip(&z).all(|(_, &v)| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&z) {
                    x[j] = v;
                }
                break;
            }
            let mut alpha = 1.0f64;
            for (&j, &v) in idx.iter().zip(&z) {
                if v <= 0.0 {
                    let denom = x[j] - v;
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            for (&j, &v) in idx.iter().zip(&z) {
                x[j] += alpha * (v - x[j]);
            }
            let xmax = x.iter().fold(0.0f64, |m, v| m.max(*v));
            for (&j, &v) in idx.iter().zip(&z) {
                if v <= 0.0 && x[j] <= 1e-12 * xmax.max(f64::MIN_POSITIVE) {
                    x[j] = 0.0;
                    free[j] = false;
                }
            }
            if !idx.iter().any(|&j| free[j]) {
                break;
            }
        }
    }
    let support = (0..n).filter(|&j| x[j] > 0.0).collect();
    NnqpSolution { x, support }
}

fn solve_restricted(h: &DMatrix<f64>, q: &[f64], idx: &[usize], ridge: f64) -> Vec<f64> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |a, b| h[(idx[a], idx[b])] + if a == b { ridge } else { 0.0 });
    let rhs = DVector::from_iterator(k, idx.iter().map(|&j| q[j]));
    if let Some(ch) = sub.clone().cholesky() {
        return ch.solve(&rhs).iter().copied().collect();
    }
    match sub.clone().lu().solve(&rhs) {
        Some(v) => v.iter().copied().collect(),
        None => sub.pseudo_inverse(1e-14).map(|p| (p * rhs).iter().copied().collect()).unwrap_or(vec![0.0; k]),
    }
}
