//! Dense convex QP solved with a Mehrotra predictor-corrector interior-point
//! method:
//!
//! ```text
//! min  ½ xᵀHx + qᵀx  [+ ρ Σ slack]
//! s.t. x_lo ≤ x ≤ x_hi
//!      a_lo ≤ A x ≤ a_hi          (elastic: a_lo - s ≤ A x ≤ a_hi + s, s ≥ 0)
//! ```
//!
//! Infinite bounds are allowed. Multipliers follow the convention
//! `Hx + q + Aᵀλ + ν = 0`, positive at an active upper bound.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub q: DVector<f64>,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub a: DMatrix<f64>,
    pub a_lo: Vec<f64>,
    pub a_hi: Vec<f64>,
    /// Per-row penalty on violation; `None` makes rows hard.
    pub elastic: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIter,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub row_mult: Vec<f64>,
    pub bound_mult: Vec<f64>,
    /// Per-row violation of the linearized constraint (elastic mode).
    pub row_violation: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
struct GeneralRow {
    row: usize,
    sign: f64,
    rhs: f64,
}

#[derive(Debug, Clone, Copy)]
struct BoundRow {
    var: usize,
    sign: f64,
    rhs: f64,
}

const TOL: f64 = 1e-10;
/// Complementarity target; bound multipliers are accurate to about
/// `MU_TOL / distance`.
const MU_TOL: f64 = 1e-14;
const MAX_ITER: usize = 100;

pub fn solve_qp(p: &QpProblem) -> QpSolution {
    let n = p.q.len();
    let m = p.a.nrows();
    let mut general = Vec::new();
    for i in 0..m {
        if p.a_hi[i].is_finite() {
            general.push(GeneralRow {
                row: i,
                sign: 1.0,
                rhs: p.a_hi[i],
            });
        }
        if p.a_lo[i].is_finite() {
            general.push(GeneralRow {
                row: i,
                sign: -1.0,
                rhs: -p.a_lo[i],
            });
        }
    }
    let mut bounds = Vec::new();
    for j in 0..n {
        if p.x_hi[j].is_finite() {
            bounds.push(BoundRow {
                var: j,
                sign: 1.0,
                rhs: p.x_hi[j],
            });
        }
        if p.x_lo[j].is_finite() {
            bounds.push(BoundRow {
                var: j,
                sign: -1.0,
                rhs: -p.x_lo[j],
            });
        }
    }
    let elastic = p.elastic.as_deref();
    let ng = general.len();
    let nb = bounds.len();
    let ns = if elastic.is_some() { ng } else { 0 };
    let n_ineq = ng + nb + ns;

    // initial point: projection of the origin, nudged inside finite boxes
    let mut x = DVector::from_fn(n, |j, _| {
        let (lo, hi) = (p.x_lo[j], p.x_hi[j]);
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo + 1.0,
            (false, true) => hi - 1.0,
            _ => 0.0,
        }
    });
    let ax = |x: &DVector<f64>, row: usize| -> f64 { p.a.row(row).dot(&x.transpose()) };
    let mut s: Vec<f64> = general
        .iter()
        .map(|g| (g.sign * ax(&x, g.row) - g.rhs).max(0.0) + 1.0)
        .take(ns)
        .collect();
    // slack variables of the inequalities, ordered [general, bounds, s >= 0]
    let mut w = vec![1.0; n_ineq];
    let mut z = vec![1.0; n_ineq];
    for (k, g) in general.iter().enumerate() {
        let sk = if ns > 0 { s[k] } else { 0.0 };
        w[k] = (g.rhs - g.sign * ax(&x, g.row) + sk).max(1.0);
    }
    for (k, b) in bounds.iter().enumerate() {
        w[ng + k] = (b.rhs - b.sign * x[b.var]).max(1.0);
    }
    for k in 0..ns {
        w[ng + nb + k] = s[k].max(1.0);
    }

    let q_norm = p.q.amax().max(1.0);
    let h_norm = general
        .iter()
        .map(|g| g.rhs.abs())
        .chain(bounds.iter().map(|b| b.rhs.abs()))
        .fold(1.0, f64::max);

    let mut status = QpStatus::MaxIter;
    let mut iterations = 0;
    let mut rp = vec![0.0; n_ineq];
    for it in 0..MAX_ITER {
        iterations = it + 1;
        // residuals
        let ax_vals: Vec<f64> = (0..m).map(|i| ax(&x, i)).collect();
        for (k, g) in general.iter().enumerate() {
            let sk = if ns > 0 { s[k] } else { 0.0 };
            rp[k] = g.sign * ax_vals[g.row] - sk + w[k] - g.rhs;
        }
        for (k, b) in bounds.iter().enumerate() {
            rp[ng + k] = b.sign * x[b.var] + w[ng + k] - b.rhs;
        }
        for k in 0..ns {
            rp[ng + nb + k] = -s[k] + w[ng + nb + k];
        }
        let mut rd_x = &p.h * &x + &p.q;
        let mut row_z = vec![0.0; m];
        for (k, g) in general.iter().enumerate() {
            row_z[g.row] += g.sign * z[k];
        }
        rd_x += p.a.tr_mul(&DVector::from_vec(row_z));
        for (k, b) in bounds.iter().enumerate() {
            rd_x[b.var] += b.sign * z[ng + k];
        }
        let rd_s: Vec<f64> = (0..ns)
            .map(|k| elastic.map_or(0.0, |e| e[general[k].row]) - z[k] - z[ng + nb + k])
            .collect();

        let mu = if n_ineq > 0 {
            w.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / n_ineq as f64
        } else {
            0.0
        };
        let dual_res = rd_x.amax().max(rd_s.iter().fold(0.0, |a: f64, b| a.max(b.abs())));
        let prim_res = rp.iter().fold(0.0, |a: f64, b| a.max(b.abs()));
        if dual_res <= TOL * q_norm && prim_res <= TOL * h_norm && mu <= MU_TOL {
            status = QpStatus::Solved;
            break;
        }

        let d: Vec<f64> = w.iter().zip(&z).map(|(wk, zk)| zk / wk).collect();

        // reduced matrix
        let mut k_mat = p.h.clone();
        let mut row_weight = vec![0.0; m];
        for (k, g) in general.iter().enumerate() {
            let dk = d[k];
            let eff = if ns > 0 {
                let dn = d[ng + nb + k];
                dk * dn / (dk + dn)
            } else {
                dk
            };
            row_weight[g.row] += eff;
        }
        if m > 0 {
            // Aᵀ diag(row_weight) A, skipping inactive rows
            let active: Vec<usize> = (0..m).filter(|&i| row_weight[i] != 0.0).collect();
            if !active.is_empty() {
                let mut scaled = DMatrix::zeros(active.len(), n);
                let mut plain = DMatrix::zeros(active.len(), n);
                for (r, &i) in active.iter().enumerate() {
                    let wt = row_weight[i];
                    for j in 0..n {
                        plain[(r, j)] = p.a[(i, j)];
                        scaled[(r, j)] = p.a[(i, j)] * wt;
                    }
                }
                k_mat += plain.tr_mul(&scaled);
            }
        }
        for (k, b) in bounds.iter().enumerate() {
            k_mat[(b.var, b.var)] += d[ng + k];
        }
        let chol = match factor(k_mat) {
            Some(c) => c,
            None => {
                status = QpStatus::NumericalFailure;
                break;
            }
        };

        // solves the Newton system for a complementarity target rc
        let newton = |rc: &[f64]| -> (DVector<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            let e: Vec<f64> = (0..n_ineq).map(|k| (rc[k] + z[k] * rp[k]) / w[k]).collect();
            let mut bx = -&rd_x;
            let mut row_coef = vec![0.0; m];
            let mut bs = vec![0.0; ns];
            for k in 0..ns {
                bs[k] = -rd_s[k] + e[k] + e[ng + nb + k];
            }
            for (k, g) in general.iter().enumerate() {
                let mut c = -g.sign * e[k];
                if ns > 0 {
                    let dk = d[k];
                    let dn = d[ng + nb + k];
                    c += g.sign * dk * bs[k] / (dk + dn);
                }
                row_coef[g.row] += c;
            }
            if m > 0 {
                bx += p.a.tr_mul(&DVector::from_vec(row_coef));
            }
            for (k, b) in bounds.iter().enumerate() {
                bx[b.var] -= b.sign * e[ng + k];
            }
            let dx = chol.solve(&bx);
            let a_dx: Vec<f64> = (0..m).map(|i| ax(&dx, i)).collect();
            let mut ds = vec![0.0; ns];
            for (k, g) in general.iter().enumerate().take(ns) {
                let dk = d[k];
                let dn = d[ng + nb + k];
                ds[k] = (bs[k] + g.sign * dk * a_dx[g.row]) / (dk + dn);
            }
            let mut gdv = vec![0.0; n_ineq];
            for (k, g) in general.iter().enumerate() {
                let sk = if ns > 0 { ds[k] } else { 0.0 };
                gdv[k] = g.sign * a_dx[g.row] - sk;
            }
            for (k, b) in bounds.iter().enumerate() {
                gdv[ng + k] = b.sign * dx[b.var];
            }
            for k in 0..ns {
                gdv[ng + nb + k] = -ds[k];
            }
            let dz: Vec<f64> = (0..n_ineq).map(|k| d[k] * gdv[k] + e[k]).collect();
            let dw: Vec<f64> = (0..n_ineq).map(|k| -rp[k] - gdv[k]).collect();
            (dx, ds, dw, dz)
        };

        let rc_aff: Vec<f64> = (0..n_ineq).map(|k| -w[k] * z[k]).collect();
        let (_, _, dw_a, dz_a) = newton(&rc_aff);
        let alpha_aff = max_step(&w, &dw_a).min(max_step(&z, &dz_a));
        let mu_aff = if n_ineq > 0 {
            (0..n_ineq)
                .map(|k| (w[k] + alpha_aff * dw_a[k]) * (z[k] + alpha_aff * dz_a[k]))
                .sum::<f64>()
                / n_ineq as f64
        } else {
            0.0
        };
        let sigma = if mu > 0.0 { (mu_aff / mu).powi(3).min(1.0) } else { 0.0 };
        let rc: Vec<f64> = (0..n_ineq)
            .map(|k| -w[k] * z[k] - dw_a[k] * dz_a[k] + sigma * mu)
            .collect();
        let (dx, ds, dw, dz) = newton(&rc);
        let alpha = (0.99 * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);
        x.axpy(alpha, &dx, 1.0);
        for k in 0..ns {
            s[k] += alpha * ds[k];
        }
        for k in 0..n_ineq {
            w[k] += alpha * dw[k];
            z[k] += alpha * dz[k];
        }
        if !x.iter().all(|v| v.is_finite()) {
            status = QpStatus::NumericalFailure;
            break;
        }
    }

    let mut row_mult = vec![0.0; m];
    let mut row_violation = vec![0.0f64; m];
    for (k, g) in general.iter().enumerate() {
        row_mult[g.row] += g.sign * z[k];
        if ns > 0 {
            row_violation[g.row] = row_violation[g.row].max(s[k]);
        }
    }
    let mut bound_mult = vec![0.0; n];
    for (k, b) in bounds.iter().enumerate() {
        bound_mult[b.var] += b.sign * z[ng + k];
    }
    QpSolution {
        x,
        row_mult,
        bound_mult,
        row_violation,
        status,
        iterations,
    }
}

fn factor(mut k: DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    let scale = (0..k.nrows()).map(|i| k[(i, i)].abs()).fold(1e-300, f64::max);
    let mut reg = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Some(c);
        }
        let next = if reg == 0.0 { 1e-12 * scale } else { reg * 100.0 };
        for i in 0..k.nrows() {
            k[(i, i)] += next - reg;
        }
        reg = next;
    }
    None
}

/// Largest step in (0, 1] keeping `v + a*dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0, f64::min)
}
