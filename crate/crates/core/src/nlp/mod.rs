//! Single-shooting transcription of the horizon optimal-control problem and
//! its solver.
//!
//! Decision variables are the battery traction powers, one per horizon node.
//! States are eliminated by rolling the stage model forward; the SOC and
//! coolant boxes become path inequalities on every node end, plus an optional
//! interval on the terminal SOC.

pub mod qp;
mod seed;
mod sqp;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::horizon::HorizonNode;
use crate::plant::{PlantError, PlantState};

pub use sqp::{solve, NlpError, SolverOptions, CONTROL_SCALE, OBJECTIVE_SCALE, SOC_ROW_SCALE, TCL_ROW_SCALE};

/// Value and first derivatives of one node transition.
///
/// State vectors are ordered `[soc, t_cl]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageEval {
    pub next: PlantState,
    /// Stage cost, kg.
    pub cost: f64,
    /// `dx[i][j]` = d next_i / d state_j.
    pub dx: [[f64; 2]; 2],
    /// d next / d u.
    pub du: [f64; 2],
    pub cost_dx: [f64; 2],
    pub cost_du: f64,
}

/// Node dynamics and cost as seen by the optimizer.
pub trait StageModel: Sync {
    /// Admissible control interval at a node (state independent).
    fn control_bounds(&self, node: &HorizonNode) -> (f64, f64);

    fn evaluate(&self, node: &HorizonNode, state: &PlantState, u: f64)
        -> Result<StageEval, PlantError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StateBounds {
    pub soc_min: f64,
    pub soc_max: f64,
    pub t_cl_min: f64,
    pub t_cl_max: f64,
}

impl Default for StateBounds {
    fn default() -> Self {
        Self {
            soc_min: 0.4,
            soc_max: 0.8,
            t_cl_min: 40.0,
            t_cl_max: 90.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Terminal {
    None,
    /// `lo <= SOC_end <= hi`.
    SocInterval { lo: f64, hi: f64 },
    /// `weight * (SOC_end - reference)^2` added to the cost, kg.
    SocPenalty { weight: f64, reference: f64 },
}

pub struct OcpSpec<'a> {
    pub nodes: Vec<HorizonNode>,
    pub initial_state: PlantState,
    pub model: &'a dyn StageModel,
    pub state_bounds: StateBounds,
    pub terminal: Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct NlpSolution {
    /// Battery traction power per node, W.
    pub p_bat_sequence: Vec<f64>,
    pub predicted_states: Vec<PlantState>,
    /// Cost of the returned sequence, kg (terminal penalty included).
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    pub solve_time: f64,
    /// Largest constraint violation in physical units (SOC fraction or °C).
    pub max_violation: f64,
    /// The state boxes were softened after the hard problem failed.
    pub relaxed: bool,
    /// Merit values `(before, after)` of every accepted step.
    pub merit_history: Vec<(f64, f64)>,
}

/// Which state a constraint row reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Soc,
    Tcl,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowInfo {
    /// Index of the constrained state in the rollout (1..=n).
    pub node: usize,
    pub kind: RowKind,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<PlantState>,
    pub stages: Vec<StageEval>,
    pub objective: f64,
}

/// Transcribed problem with value and derivative access in physical units.
pub struct Nlp<'a> {
    spec: OcpSpec<'a>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rows: Vec<RowInfo>,
}

pub fn transcribe(spec: OcpSpec<'_>) -> Nlp<'_> {
    let n = spec.nodes.len();
    let (lower, upper) = spec
        .nodes
        .iter()
        .map(|nd| spec.model.control_bounds(nd))
        .unzip();
    let b = spec.state_bounds;
    let mut rows = Vec::with_capacity(2 * n + 1);
    for k in 1..=n {
        rows.push(RowInfo {
            node: k,
            kind: RowKind::Soc,
            lo: b.soc_min,
            hi: b.soc_max,
        });
        rows.push(RowInfo {
            node: k,
            kind: RowKind::Tcl,
            lo: b.t_cl_min,
            hi: b.t_cl_max,
        });
    }
    if let Terminal::SocInterval { lo, hi } = spec.terminal {
        if n > 0 {
            rows.push(RowInfo {
                node: n,
                kind: RowKind::Soc,
                lo,
                hi,
            });
        }
    }
    Nlp {
        spec,
        lower,
        upper,
        rows,
    }
}

fn state_value(s: &PlantState, kind: RowKind) -> f64 {
    match kind {
        RowKind::Soc => s.soc,
        RowKind::Tcl => s.t_cl,
    }
}

impl<'a> Nlp<'a> {
    pub fn n_vars(&self) -> usize {
        self.lower.len()
    }

    pub fn rows(&self) -> &[RowInfo] {
        &self.rows
    }

    /// Number of one-sided inequalities (each finite row side counts once).
    pub fn n_inequalities(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.lo.is_finite() as usize + r.hi.is_finite() as usize)
            .sum()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn spec(&self) -> &OcpSpec<'a> {
        &self.spec
    }

    pub fn nodes(&self) -> &[HorizonNode] {
        &self.spec.nodes
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&l, &h))| x.clamp(l, h))
            .collect()
    }

    /// Moves controls lying within `tol` of a bound onto it. Interior-point
    /// iterates stop a hair inside active bounds; at the EV bound that hair
    /// would leave the engine running at a few pW.
    pub fn snap(&self, u: &[f64], tol: f64) -> Vec<f64> {
        self.clip(u)
            .into_iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(x, (&l, &h))| {
                if x - l <= tol {
                    l
                } else if h - x <= tol {
                    h
                } else {
                    x
                }
            })
            .collect()
    }

    pub fn rollout(&self, u: &[f64]) -> Result<Rollout, PlantError> {
        let mut states = Vec::with_capacity(u.len() + 1);
        let mut stages = Vec::with_capacity(u.len());
        let mut x = self.spec.initial_state;
        states.push(x);
        let mut objective = 0.0;
        for (node, &uk) in self.spec.nodes.iter().zip(u) {
            let e = self.spec.model.evaluate(node, &x, uk)?;
            objective += e.cost;
            x = e.next;
            states.push(x);
            stages.push(e);
        }
        objective += self.terminal_cost(x.soc);
        Ok(Rollout {
            states,
            stages,
            objective,
        })
    }

    fn terminal_cost(&self, soc: f64) -> f64 {
        match self.spec.terminal {
            Terminal::SocPenalty { weight, reference } => weight * (soc - reference).powi(2),
            _ => 0.0,
        }
    }

    pub fn objective(&self, u: &[f64]) -> Result<f64, PlantError> {
        Ok(self.rollout(u)?.objective)
    }

    pub fn constraint_values(&self, r: &Rollout) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| state_value(&r.states[row.node], row.kind))
            .collect()
    }

    /// Largest row violation in physical units.
    pub fn max_violation(&self, r: &Rollout) -> f64 {
        self.rows
            .iter()
            .map(|row| {
                let v = state_value(&r.states[row.node], row.kind);
                (row.lo - v).max(v - row.hi).max(0.0)
            })
            .fold(0.0, f64::max)
    }

    /// Gradient of `f_weight * objective + sum_r row_weights[r] * c_r` by an
    /// adjoint sweep over a rollout.
    pub fn weighted_gradient(&self, r: &Rollout, f_weight: f64, row_weights: &[f64]) -> Vec<f64> {
        let n = self.n_vars();
        // direct seeds on the states x_1..x_n
        let mut seed = vec![[0.0f64; 2]; n + 1];
        for (row, &w) in self.rows.iter().zip(row_weights) {
            let i = match row.kind {
                RowKind::Soc => 0,
                RowKind::Tcl => 1,
            };
            seed[row.node][i] += w;
        }
        let mut adj = seed[n];
        if let Terminal::SocPenalty { weight, reference } = self.spec.terminal {
            if n > 0 {
                adj[0] += f_weight * 2.0 * weight * (r.states[n].soc - reference);
            }
        }
        let mut grad = vec![0.0; n];
        for k in (0..n).rev() {
            let e = &r.stages[k];
            grad[k] = f_weight * e.cost_du + adj[0] * e.du[0] + adj[1] * e.du[1];
            let a = &e.dx;
            let prev = [
                seed[k][0] + f_weight * e.cost_dx[0] + adj[0] * a[0][0] + adj[1] * a[1][0],
                seed[k][1] + f_weight * e.cost_dx[1] + adj[0] * a[0][1] + adj[1] * a[1][1],
            ];
            adj = prev;
        }
        grad
    }

    pub fn gradient(&self, r: &Rollout) -> Vec<f64> {
        self.weighted_gradient(r, 1.0, &vec![0.0; self.rows.len()])
    }

    /// Constraint Jacobian (rows x variables) by forward sensitivities.
    pub fn jacobian(&self, r: &Rollout) -> DMatrix<f64> {
        let n = self.n_vars();
        // sens[k][j] = d x_k / d u_j for j < k
        let mut sens = vec![[0.0f64; 2]; n + 1];
        let mut jac = DMatrix::zeros(self.rows.len(), n);
        // rows grouped by node for the column sweep
        let mut by_node: Vec<Vec<(usize, RowKind)>> = vec![Vec::new(); n + 1];
        for (i, row) in self.rows.iter().enumerate() {
            by_node[row.node].push((i, row.kind));
        }
        for j in 0..n {
            sens[j + 1] = r.stages[j].du;
            for k in (j + 1)..=n {
                if k > j + 1 {
                    let a = &r.stages[k - 1].dx;
                    let s = sens[k - 1];
                    sens[k] = [
                        a[0][0] * s[0] + a[0][1] * s[1],
                        a[1][0] * s[0] + a[1][1] * s[1],
                    ];
                }
                for &(i, kind) in &by_node[k] {
                    jac[(i, j)] = match kind {
                        RowKind::Soc => sens[k][0],
                        RowKind::Tcl => sens[k][1],
                    };
                }
            }
        }
        jac
    }

    /// Evaluates the solution record for a control sequence.
    pub fn solution_from(
        &self,
        u: Vec<f64>,
        status: SolveStatus,
        kkt_residual: f64,
        iterations: usize,
    ) -> Result<NlpSolution, PlantError> {
        let r = self.rollout(&u)?;
        Ok(NlpSolution {
            max_violation: self.max_violation(&r),
            objective: r.objective,
            predicted_states: r.states,
            p_bat_sequence: u,
            kkt_residual,
            iterations,
            status,
            solve_time: 0.0,
            relaxed: false,
            merit_history: Vec::new(),
        })
    }
}


#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use crate::powertrain::{PredictionModel, VehicleParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec<'a>(model: &'a dyn StageModel, demands: &[f64], dt: f64, terminal: Terminal) -> OcpSpec<'a> {
        OcpSpec {
            nodes: nodes(demands, dt, 10.0),
            initial_state: PlantState::new(0.6, 60.0),
            model,
            state_bounds: StateBounds::default(),
            terminal,
        }
    }

    #[test]
    fn counts_variables_and_rows() {
        let v = VehicleParams::default();
        let m = PredictionModel::new(&v);
        let nlp = transcribe(spec(&m, &[5_000.0], 1.0, Terminal::None));
        assert_eq!(nlp.n_vars(), 1);
        assert_eq!(nlp.rows().len(), 2);
        let nlp = transcribe(spec(
            &m,
            &[5_000.0; 59],
            1.0,
            Terminal::SocInterval { lo: 0.594, hi: 0.606 },
        ));
        assert_eq!(nlp.n_vars(), 59);
        assert_eq!(nlp.rows().len(), 2 * 59 + 1);
        assert_eq!(nlp.n_inequalities(), 2 * (2 * 59) + 2);
    }

    #[test]
    fn gradient_and_jacobian_match_central_differences() {
        let v = VehicleParams::default();
        let m = PredictionModel::new(&v);
        let demands = [12_000.0, 4_000.0, -6_000.0, 20_000.0, 8_000.0, 15_000.0];
        let nlp = transcribe(spec(
            &m,
            &demands,
            3.0,
            Terminal::SocPenalty { weight: 10.0, reference: 0.6 },
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let u: Vec<f64> = (0..nlp.n_vars())
                .map(|j| {
                    let (l, h) = (nlp.lower()[j], nlp.upper()[j]);
                    rng.random_range(l..h)
                })
                .collect();
            let r = nlp.rollout(&u).unwrap();
            let g = nlp.gradient(&r);
            let jac = nlp.jacobian(&r);
            for j in 0..u.len() {
                let h = 0.5;
                let mut up = u.clone();
                let mut dn = u.clone();
                up[j] += h;
                dn[j] -= h;
                let rp = nlp.rollout(&up).unwrap();
                let rm = nlp.rollout(&dn).unwrap();
                let fd = (rp.objective - rm.objective) / (2.0 * h);
                let scale = g[j].abs().max(1e-9);
                assert!((g[j] - fd).abs() / scale < 1e-5, "grad {j}: {} vs {fd}", g[j]);
                let cp = nlp.constraint_values(&rp);
                let cm = nlp.constraint_values(&rm);
                for i in 0..cp.len() {
                    let fd = (cp[i] - cm[i]) / (2.0 * h);
                    let a = jac[(i, j)];
                    assert!(
                        (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-12),
                        "jac ({i},{j}): {a} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn weighted_gradient_includes_constraint_rows() {
        let v = VehicleParams::default();
        let m = PredictionModel::new(&v);
        let nlp = transcribe(spec(&m, &[9_000.0, 3_000.0, 11_000.0], 2.0, Terminal::None));
        let u = vec![1_000.0, 2_000.0, -500.0];
        let r = nlp.rollout(&u).unwrap();
        let w: Vec<f64> = (0..nlp.rows().len()).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let g = nlp.weighted_gradient(&r, 2.0, &w);
        let base = nlp.gradient(&r);
        let jac = nlp.jacobian(&r);
        for j in 0..3 {
            let expect = 2.0 * base[j] + (0..w.len()).map(|i| w[i] * jac[(i, j)]).sum::<f64>();
            assert!((g[j] - expect).abs() <= 1e-12 * expect.abs().max(1e-9));
        }
    }

    #[test]
    fn frozen_model_has_constant_states() {
        let nlp = transcribe(spec(&Parabola, &[0.0, 0.0], 1.0, Terminal::None));
        let r = nlp.rollout(&[1.0, 2.0]).unwrap();
        assert_eq!(r.objective, 4.0 + 1.0);
        assert!(r.states.iter().all(|s| *s == PlantState::new(0.6, 60.0)));
    }
}
