//! SQP with an elastic QP subproblem and an ℓ1 merit line search.
//!
//! The solver works on scaled quantities: controls in units of
//! [`CONTROL_SCALE`] W, the objective in grams, SOC rows in hundredths and
//! coolant rows in °C. Convergence means the scaled KKT residual (projected
//! stationarity, row complementarity and row violation, max-norm) is at most
//! `tol`, so SOC rows hold to `tol / 100` and coolant rows to `tol` °C.

use std::time::Instant;

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::qp::{solve_qp, QpProblem};
use super::{seed, Nlp, NlpSolution, RowKind, SolveStatus};
use crate::plant::PlantError;

pub const CONTROL_SCALE: f64 = 1e4;
/// Distance to a bound below which a returned control is put on it, W.
const BOUND_SNAP: f64 = 1e-2;
pub const OBJECTIVE_SCALE: f64 = 1e-3;
pub const SOC_ROW_SCALE: f64 = 1e-2;
pub const TCL_ROW_SCALE: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("warm start has {got} entries, problem has {expected} variables")]
    WarmStartLength { got: usize, expected: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Also start from the SOC-price seed, keeping the better result.
    pub multistart: bool,
    /// Soften the state boxes when the hard problem is infeasible.
    pub relax_on_infeasible: bool,
    /// Penalty per unit of state violation in the softened problem, kg.
    pub relaxation_weight: f64,
    /// Rows farther than this from both bounds are left out of the QP
    /// (SOC fraction, °C).
    pub screen_soc: f64,
    pub screen_tcl: f64,
    /// Smallest eigenvalue shift of the scaled Hessian model.
    pub hessian_floor: f64,
    /// Problems with at most this many nodes are also started from every
    /// engine on/off pattern.
    pub pattern_starts_max_nodes: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 100,
            multistart: true,
            relax_on_infeasible: true,
            relaxation_weight: 1e4,
            screen_soc: 0.05,
            screen_tcl: 5.0,
            hessian_floor: 1e-6,
            pattern_starts_max_nodes: 6,
        }
    }
}

struct Point {
    x: DVector<f64>,
    f: f64,
    g: DVector<f64>,
    c: Vec<f64>,
    jac: DMatrix<f64>,
}

struct Attempt {
    u: Vec<f64>,
    status: SolveStatus,
    kkt: f64,
    iterations: usize,
    merit: Vec<(f64, f64)>,
    objective: f64,
    violation: f64,
}

struct Scaled<'n, 'a> {
    nlp: &'n Nlp<'a>,
    row_scale: Vec<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    rlo: Vec<f64>,
    rhi: Vec<f64>,
    screen: Vec<f64>,
}

impl<'n, 'a> Scaled<'n, 'a> {
    fn new(nlp: &'n Nlp<'a>, opts: &SolverOptions) -> Self {
        let row_scale: Vec<f64> = nlp
            .rows()
            .iter()
            .map(|r| match r.kind {
                RowKind::Soc => SOC_ROW_SCALE,
                RowKind::Tcl => TCL_ROW_SCALE,
            })
            .collect();
        let screen = nlp
            .rows()
            .iter()
            .zip(&row_scale)
            .map(|(r, s)| match r.kind {
                RowKind::Soc => opts.screen_soc / s,
                RowKind::Tcl => opts.screen_tcl / s,
            })
            .collect();
        Self {
            lo: DVector::from_iterator(nlp.n_vars(), nlp.lower().iter().map(|v| v / CONTROL_SCALE)),
            hi: DVector::from_iterator(nlp.n_vars(), nlp.upper().iter().map(|v| v / CONTROL_SCALE)),
            rlo: nlp.rows().iter().zip(&row_scale).map(|(r, s)| r.lo / s).collect(),
            rhi: nlp.rows().iter().zip(&row_scale).map(|(r, s)| r.hi / s).collect(),
            nlp,
            row_scale,
            screen,
        }
    }

    /// Physical controls; a variable on a scaled bound maps to the exact
    /// physical bound, not to a rounding of it.
    fn controls(&self, x: &DVector<f64>) -> Vec<f64> {
        let (lower, upper) = (self.nlp.lower(), self.nlp.upper());
        x.iter()
            .enumerate()
            .map(|(j, &v)| {
                if v <= self.lo[j] {
                    lower[j]
                } else if v >= self.hi[j] {
                    upper[j]
                } else {
                    (v * CONTROL_SCALE).clamp(lower[j], upper[j])
                }
            })
            .collect()
    }

    fn project(&self, x: &mut DVector<f64>) {
        for j in 0..x.len() {
            x[j] = x[j].clamp(self.lo[j], self.hi[j]);
        }
    }

    /// Projects onto the box and moves coordinates within `BOUND_SNAP` of a
    /// bound onto it, so backtracking cannot leave a variable creeping
    /// towards an active bound.
    fn settle(&self, x: &mut DVector<f64>) {
        let tol = BOUND_SNAP / CONTROL_SCALE;
        for j in 0..x.len() {
            let v = x[j].clamp(self.lo[j], self.hi[j]);
            x[j] = if v - self.lo[j] <= tol {
                self.lo[j]
            } else if self.hi[j] - v <= tol {
                self.hi[j]
            } else {
                v
            };
        }
    }

    fn eval(&self, x: DVector<f64>) -> Result<Point, PlantError> {
        let roll = self.nlp.rollout(&self.controls(&x))?;
        let g = self.nlp.gradient(&roll);
        let jac = self.nlp.jacobian(&roll);
        let c = self.nlp.constraint_values(&roll);
        let n = x.len();
        let gs = DVector::from_iterator(n, g.iter().map(|v| v * CONTROL_SCALE / OBJECTIVE_SCALE));
        let mut js = jac;
        for (i, s) in self.row_scale.iter().enumerate() {
            for j in 0..n {
                js[(i, j)] *= CONTROL_SCALE / s;
            }
        }
        Ok(Point {
            f: roll.objective / OBJECTIVE_SCALE,
            g: gs,
            c: c.iter().zip(&self.row_scale).map(|(v, s)| v / s).collect(),
            jac: js,
            x,
        })
    }

    fn violations(&self, c: &[f64]) -> impl Iterator<Item = f64> + '_ {
        c.iter()
            .zip(self.rlo.iter().zip(&self.rhi))
            .map(|(&v, (&l, &h))| (l - v).max(v - h).max(0.0))
            .collect::<Vec<_>>()
            .into_iter()
    }

    fn max_violation(&self, c: &[f64]) -> f64 {
        self.violations(c).fold(0.0, f64::max)
    }

    fn merit(&self, f: f64, c: &[f64], rho: &[f64]) -> f64 {
        f + self.violations(c).zip(rho).map(|(v, r)| v * r).sum::<f64>()
    }

    /// Scaled gradient of the Lagrangian at `x`.
    fn lagrangian_gradient(&self, x: &DVector<f64>, lambda: &[f64]) -> Result<DVector<f64>, PlantError> {
        let roll = self.nlp.rollout(&self.controls(x))?;
        let w: Vec<f64> = lambda.iter().zip(&self.row_scale).map(|(l, s)| l / s).collect();
        let g = self.nlp.weighted_gradient(&roll, 1.0 / OBJECTIVE_SCALE, &w);
        Ok(DVector::from_iterator(x.len(), g.iter().map(|v| v * CONTROL_SCALE)))
    }

    /// Finite-difference Hessian of the Lagrangian, made positive definite.
    fn hessian(&self, p: &Point, lambda: &[f64], floor: f64) -> Result<DMatrix<f64>, PlantError> {
        let n = p.x.len();
        let base = self.lagrangian_gradient(&p.x, lambda)?;
        let mut h = DMatrix::zeros(n, n);
        for j in 0..n {
            let step = 1e-5;
            let sign = if p.x[j] + step <= self.hi[j] { 1.0 } else { -1.0 };
            let mut xp = p.x.clone();
            xp[j] += sign * step;
            let gp = self.lagrangian_gradient(&xp, lambda)?;
            let col = (gp - &base) / (sign * step);
            h.set_column(j, &col);
        }
        let mut h = (&h + h.transpose()) * 0.5;
        for i in 0..n {
            h[(i, i)] += floor;
        }
        if Cholesky::new(h.clone()).is_some() {
            return Ok(h);
        }
        // indefinite: mirror negative curvature and floor the spectrum
        let eig = h.symmetric_eigen();
        let top = eig.eigenvalues.amax().max(1.0);
        let vals = eig.eigenvalues.map(|v| v.abs().max(floor * top));
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
    }

    fn kkt(&self, p: &Point, lambda: &[f64], soft: bool) -> f64 {
        let n = p.x.len();
        let mut r = p.g.clone();
        for (i, &l) in lambda.iter().enumerate() {
            if l != 0.0 {
                for j in 0..n {
                    r[j] += p.jac[(i, j)] * l;
                }
            }
        }
        let tiny = 1e-9;
        let mut stat: f64 = 0.0;
        for j in 0..n {
            let at_lo = p.x[j] - self.lo[j] <= tiny;
            let at_hi = self.hi[j] - p.x[j] <= tiny;
            let res = match (at_lo, at_hi) {
                (true, true) => 0.0,
                (true, false) => (-r[j]).max(0.0),
                (false, true) => r[j].max(0.0),
                _ => r[j].abs(),
            };
            stat = stat.max(res);
        }
        let mut comp: f64 = 0.0;
        let mut prim: f64 = 0.0;
        for (i, &l) in lambda.iter().enumerate() {
            let v = p.c[i];
            let viol = (self.rlo[i] - v).max(v - self.rhi[i]).max(0.0);
            prim = prim.max(viol);
            if viol > 0.0 {
                continue;
            }
            if l > 0.0 {
                comp = comp.max(l * (self.rhi[i] - v));
            } else if l < 0.0 {
                comp = comp.max(-l * (v - self.rlo[i]));
            }
        }
        if soft {
            stat.max(comp)
        } else {
            stat.max(comp).max(prim)
        }
    }
}

const RHO_MAX: f64 = 1e8;

/// Solves the elastic QP subproblem at `p` with Hessian model `b`.
///
/// Rows far from both bounds are screened out; a screened row that the
/// step would violate is added back and the QP re-solved. Penalties grow
/// tenfold (up to `RHO_MAX`) while a feasible linearization is left with
/// slack. Returns the step and row multipliers.
fn subproblem(
    sc: &Scaled,
    p: &Point,
    c: &[f64],
    b: &DMatrix<f64>,
    rho: &mut [f64],
    soft: bool,
) -> (DVector<f64>, Vec<f64>) {
    let n = p.x.len();
    let m = c.len();
    // per-row sides in the QP: (lower, upper)
    let mut sides: Vec<(bool, bool)> = (0..m)
        .map(|i| {
            let v = c[i];
            (v - sc.rlo[i] <= sc.screen[i], sc.rhi[i] - v <= sc.screen[i])
        })
        .collect();
    loop {
        let idx: Vec<usize> = (0..m).filter(|&i| sides[i].0 || sides[i].1).collect();
        let mut a = DMatrix::zeros(idx.len(), n);
        let mut a_lo = Vec::with_capacity(idx.len());
        let mut a_hi = Vec::with_capacity(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            a.set_row(r, &p.jac.row(i));
            let v = c[i];
            a_lo.push(if sides[i].0 { sc.rlo[i] - v } else { f64::NEG_INFINITY });
            a_hi.push(if sides[i].1 { sc.rhi[i] - v } else { f64::INFINITY });
        }
        let mut scale = 1.0;
        let sol = loop {
            let weights: Vec<f64> = idx.iter().map(|&i| (rho[i] * scale).min(RHO_MAX)).collect();
            let saturated = weights.iter().all(|&w| w >= RHO_MAX);
            let qp = QpProblem {
                h: b.clone(),
                q: p.g.clone(),
                x_lo: (&sc.lo - &p.x).iter().copied().collect(),
                x_hi: (&sc.hi - &p.x).iter().copied().collect(),
                a: a.clone(),
                a_lo: a_lo.clone(),
                a_hi: a_hi.clone(),
                elastic: Some(weights),
            };
            let sol = solve_qp(&qp);
            let slack = sol.row_violation.iter().fold(0.0, |a: f64, &b| a.max(b));
            if soft || slack <= 1e-9 || saturated {
                break sol;
            }
            scale *= 10.0;
        };
        if scale > 1.0 {
            for &i in &idx {
                rho[i] = (rho[i] * scale).min(RHO_MAX);
            }
        }
        let lin = &p.jac * &sol.x;
        let mut added = false;
        for i in 0..m {
            let v = c[i] + lin[i];
            if !sides[i].0 && v < sc.rlo[i] {
                sides[i].0 = true;
                added = true;
            }
            if !sides[i].1 && v > sc.rhi[i] {
                sides[i].1 = true;
                added = true;
            }
        }
        if !added {
            let mut lam = vec![0.0; m];
            for (r, &i) in idx.iter().enumerate() {
                lam[i] = sol.row_mult[r];
            }
            return (sol.x, lam);
        }
    }
}

fn sqp(
    sc: &Scaled,
    start: Vec<f64>,
    opts: &SolverOptions,
    soft: bool,
) -> Result<Attempt, PlantError> {
    let n = sc.nlp.n_vars();
    let m = sc.nlp.rows().len();
    let mut x = DVector::from_iterator(n, start.iter().map(|v| v / CONTROL_SCALE));
    sc.project(&mut x);
    let mut p = sc.eval(x)?;
    let mut lambda = vec![0.0; m];
    let mut rho: Vec<f64> = if soft {
        sc.row_scale
            .iter()
            .map(|s| opts.relaxation_weight * s / OBJECTIVE_SCALE)
            .collect()
    } else {
        vec![10.0; m]
    };
    let mut merit_log = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut best: Option<(f64, DVector<f64>, f64)> = None;
    let feas_tol = opts.tol;

    let record_best = |p: &Point, kkt: f64, best: &mut Option<(f64, DVector<f64>, f64)>| {
        if (soft || sc.max_violation(&p.c) <= feas_tol) && best.as_ref().is_none_or(|b| p.f < b.0) {
            *best = Some((p.f, p.x.clone(), kkt));
        }
    };

    // multiplier estimate so the first Hessian carries constraint curvature
    if !soft && m > 0 {
        let b = sc.hessian(&p, &lambda, opts.hessian_floor)?;
        lambda = subproblem(sc, &p, &p.c, &b, &mut rho.clone(), soft).1;
    }

    for it in 0..opts.max_iter {
        iterations = it + 1;
        let b = sc.hessian(&p, &lambda, opts.hessian_floor)?;

        let (d, qp_lambda) = subproblem(sc, &p, &p.c, &b, &mut rho, soft);

        if !soft {
            for i in 0..m {
                let need = 1.5 * qp_lambda[i].abs() + 1e-2;
                if rho[i] < need {
                    rho[i] = need.min(RHO_MAX);
                }
            }
        }

        let phi0 = sc.merit(p.f, &p.c, &rho);
        let lin = &p.jac * &d;
        let c_lin: Vec<f64> = p.c.iter().zip(lin.iter()).map(|(a, b)| a + b).collect();
        let lin_viol: f64 = sc.violations(&c_lin).zip(&rho).map(|(v, r)| v * r).sum();
        let viol0: f64 = sc.violations(&p.c).zip(&rho).map(|(v, r)| v * r).sum();
        let pred = -(p.g.dot(&d) + 0.5 * d.dot(&(&b * &d))) + viol0 - lin_viol;

        let step_norm = d.amax();
        let mut accepted = None;
        if pred > 0.0 && step_norm > 0.0 {
            let mut alpha = 1.0;
            while alpha >= 1e-10 {
                let mut xt = &p.x + &d * alpha;
                sc.settle(&mut xt);
                let pt = sc.eval(xt)?;
                let phi = sc.merit(pt.f, &pt.c, &rho);
                if phi <= phi0 - 1e-4 * alpha * pred {
                    merit_log.push((phi0, phi));
                    accepted = Some(pt);
                    break;
                }
                if alpha == 1.0 && m > 0 {
                    // second-order correction: re-solve with the rows shifted
                    // by the curvature seen along the full step
                    let shifted: Vec<f64> = pt.c.iter().zip(lin.iter()).map(|(a, b)| a - b).collect();
                    let (dc, _) = subproblem(sc, &p, &shifted, &b, &mut rho.clone(), soft);
                    let mut xc = &p.x + &dc;
                    sc.settle(&mut xc);
                    let pc = sc.eval(xc)?;
                    let phi = sc.merit(pc.f, &pc.c, &rho);
                    if phi <= phi0 - 1e-4 * pred {
                        merit_log.push((phi0, phi));
                        accepted = Some(pc);
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }
        match accepted {
            Some(pt) => {
                p = pt;
                lambda = qp_lambda;
                kkt = sc.kkt(&p, &lambda, soft);
                record_best(&p, kkt, &mut best);
                debug!("sqp it {it}: f {:.6} kkt {kkt:.2e} |d| {step_norm:.2e}", p.f);
                if kkt <= opts.tol {
                    status = SolveStatus::Converged;
                    break;
                }
            }
            None => {
                // no productive step: stationary for the model, or stalled
                kkt = kkt.min(sc.kkt(&p, &qp_lambda, soft));
                record_best(&p, kkt, &mut best);
                if kkt <= opts.tol {
                    status = SolveStatus::Converged;
                }
                break;
            }
        }
    }

    let violation = sc.max_violation(&p.c);
    let (x, kkt) = match (status, best) {
        (SolveStatus::Converged, _) => (p.x.clone(), kkt),
        (_, Some((_, bx, bk))) => (bx, bk),
        (_, None) => (p.x.clone(), kkt),
    };
    let u = sc.controls(&x);
    let roll = sc.nlp.rollout(&u)?;
    let c: Vec<f64> = sc
        .nlp
        .constraint_values(&roll)
        .iter()
        .zip(&sc.row_scale)
        .map(|(v, s)| v / s)
        .collect();
    let violation = if status == SolveStatus::Converged { violation } else { sc.max_violation(&c) };
    if !soft && violation > feas_tol {
        status = SolveStatus::Infeasible;
    }
    Ok(Attempt {
        u,
        status,
        kkt,
        iterations,
        merit: merit_log,
        objective: roll.objective,
        violation,
    })
}

/// Starts with the engine off (control at its upper bound) on a subset of
/// nodes and running at mid-range elsewhere, for every subset of the nodes
/// where both modes exist.
fn pattern_starts(nlp: &Nlp) -> Vec<Vec<f64>> {
    let n = nlp.n_vars();
    let free: Vec<usize> = (0..n)
        .filter(|&k| {
            // braking and standstill nodes too: the engine may run to charge
            let d = nlp.nodes()[k].power_demand;
            nlp.upper()[k] >= d && nlp.lower()[k] < d
        })
        .collect();
    let mid: Vec<f64> = (0..n)
        .map(|k| 0.5 * (nlp.lower()[k] + nlp.upper()[k]))
        .collect();
    (0..1usize << free.len())
        .map(|mask| {
            let mut u = mid.clone();
            for (bit, &k) in free.iter().enumerate() {
                if mask >> bit & 1 == 1 {
                    u[k] = nlp.upper()[k];
                }
            }
            u
        })
        .collect()
}

fn better(a: &Attempt, b: &Attempt, tol: f64) -> bool {
    let fa = a.violation <= tol;
    let fb = b.violation <= tol;
    if fa != fb {
        return fa;
    }
    if !fa {
        return a.violation < b.violation;
    }
    let conv_a = a.status == SolveStatus::Converged;
    let conv_b = b.status == SolveStatus::Converged;
    // objective first; ties resolved in favour of a converged run
    if (a.objective - b.objective).abs() > 1e-9 * (1.0 + b.objective.abs()) {
        return a.objective < b.objective;
    }
    conv_a && !conv_b
}

/// Solves the transcribed problem.
///
/// Starts from the warm start when given and, with `multistart`, also from
/// the SOC-price seed; returns the best result. Deterministic.
pub fn solve(
    nlp: &Nlp,
    warm_start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<NlpSolution, NlpError> {
    let t0 = Instant::now();
    let n = nlp.n_vars();
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(NlpError::WarmStartLength {
                got: w.len(),
                expected: n,
            });
        }
    }
    if n == 0 {
        let mut s = nlp.solution_from(Vec::new(), SolveStatus::Converged, 0.0, 0)?;
        s.solve_time = t0.elapsed().as_secs_f64();
        return Ok(s);
    }
    let sc = Scaled::new(nlp, opts);
    let mut starts = Vec::new();
    if let Some(w) = warm_start {
        starts.push(nlp.clip(w));
    }
    if opts.multistart || starts.is_empty() {
        let s = seed::price_seed(nlp)?;
        if !starts.contains(&s) {
            starts.push(s);
        }
    }
    if n <= opts.pattern_starts_max_nodes {
        for s in pattern_starts(nlp) {
            if !starts.contains(&s) {
                starts.push(s);
            }
        }
    }
    let mut total_iter = 0;
    let mut best: Option<Attempt> = None;
    for s in starts {
        let a = sqp(&sc, s, opts, false)?;
        total_iter += a.iterations;
        if best.as_ref().is_none_or(|b| better(&a, b, opts.tol)) {
            best = Some(a);
        }
    }
    let mut best = best.expect("at least one start");
    let mut relaxed = false;
    if best.status == SolveStatus::Infeasible && opts.relax_on_infeasible {
        let a = sqp(&sc, best.u.clone(), opts, true)?;
        total_iter += a.iterations;
        best = a;
        relaxed = true;
    }
    let u = nlp.snap(&best.u, BOUND_SNAP);
    let mut s = nlp.solution_from(u, best.status, best.kkt, total_iter)?;
    s.relaxed = relaxed;
    s.merit_history = best.merit;
    s.solve_time = t0.elapsed().as_secs_f64();
    Ok(s)
}
