//! Dynamic programming benchmark over a (SOC, coolant temperature) grid with
//! full knowledge of the cycle.
//!
//! Backward induction stores, for every step and grid cell, the optimal
//! cost-to-go and control. Values between cells are multilinear
//! interpolations. States leaving the box cost a sentinel. The terminal cost
//! is zero inside the SOC band and grows steeply and linearly outside it; a
//! hard sentinel there interacts badly with interpolation, since the band is
//! only a few cells wide.
//!
//! Between cells, feasibility follows the nearest node and the cost is
//! interpolated over the feasible corners only. Requiring every corner to be
//! feasible would freeze the feasible set whenever one step moves the state
//! less than one cell; blending the sentinel in smears it over the whole
//! grid.
//!
//! Policy file layout (all numbers little endian):
//!
//! ```text
//! magic    8 bytes  "IPTMDP\0\0"
//! version  u32      1
//! meta_len u64      length of the JSON metadata that follows
//! meta     bytes    JSON: grid axes, terminal band, cycle and vehicle data
//! n_steps  u64
//! n_soc    u64
//! n_tcl    u64
//! value    f64 x (n_steps + 1) * n_soc * n_tcl, row-major (step, soc, tcl)
//! control  f64 x n_steps * n_soc * n_tcl, row-major, NaN where infeasible
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controllers::{Command, CommandStatus, Controller, ControllerError, StepInput};
use crate::cycle::DriveCycle;
use crate::maps::power_demand;
use crate::nlp::StateBounds;
use crate::plant::PlantState;
use crate::powertrain::VehicleParams;

/// Cost of leaving the state box, kg.
pub const SENTINEL: f64 = 1e9;


const MAGIC: &[u8; 8] = b"IPTMDP\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DpError {
    #[error("no feasible policy from SOC {soc:.4}, coolant {t_cl:.2} °C")]
    NoFeasiblePolicy { soc: f64, t_cl: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("policy file: {0}")]
    Io(#[from] std::io::Error),
    #[error("policy file: {0}")]
    Format(String),
}

/// Grid resolution; the axes span the state boxes exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpGridConfig {
    pub n_soc: usize,
    pub n_tcl: usize,
    /// Controls per step, spread uniformly over the admissible interval.
    pub n_control: usize,
    /// Half width of the terminal SOC band relative to `soc_init`.
    pub terminal_band: f64,
    /// Terminal cost per unit of SOC outside the band, kg. Charge is worth
    /// roughly 0.3 to 0.4 kg of fuel per unit SOC; anything well above that
    /// keeps the rollout in the band.
    pub band_penalty: f64,
}

impl Default for DpGridConfig {
    fn default() -> Self {
        Self {
            n_soc: 81,
            n_tcl: 26,
            n_control: 41,
            terminal_band: 0.01,
            band_penalty: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpGrid {
    pub soc_points: Vec<f64>,
    pub t_cl_points: Vec<f64>,
    pub n_control: usize,
    /// Step length, s.
    pub dt: f64,
}

impl DpGrid {
    pub fn new(cfg: &DpGridConfig, bounds: &StateBounds) -> Result<Self, DpError> {
        if cfg.n_soc < 2 || cfg.n_tcl < 2 || cfg.n_control < 2 {
            return Err(DpError::InvalidGrid("need at least 2 points per axis".into()));
        }
        if !(cfg.terminal_band > 0.0) {
            return Err(DpError::InvalidGrid("terminal band must be positive".into()));
        }
        if !(cfg.band_penalty > 0.0) {
            return Err(DpError::InvalidGrid("band penalty must be positive".into()));
        }
        Ok(Self {
            soc_points: linspace(bounds.soc_min, bounds.soc_max, cfg.n_soc),
            t_cl_points: linspace(bounds.t_cl_min, bounds.t_cl_max, cfg.n_tcl),
            n_control: cfg.n_control,
            dt: 1.0,
        })
    }

    fn cells(&self) -> usize {
        self.soc_points.len() * self.t_cl_points.len()
    }

    fn contains(&self, x: &PlantState) -> bool {
        let (s, t) = (&self.soc_points, &self.t_cl_points);
        x.soc >= s[0] && x.soc <= s[s.len() - 1] && x.t_cl >= t[0] && x.t_cl <= t[t.len() - 1]
    }
}

/// `n` evenly spaced points from `a` to `b`, both included exactly.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|i| {
            if i + 1 == n {
                b
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        })
        .collect()
}

/// Weights this close to a node are rounding noise and snap onto it.
const NODE_SNAP: f64 = 1e-9;

/// Bracketing index and weight of `x` on a sorted axis. A point on (or within
/// rounding of) a grid node gets weight exactly 0 or 1.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    if axis.len() == 1 {
        return (0, 0.0);
    }
    let i = axis.partition_point(|&a| a <= x).clamp(1, axis.len() - 1) - 1;
    let w = ((x - axis[i]) / (axis[i + 1] - axis[i])).clamp(0.0, 1.0);
    if w < NODE_SNAP {
        (i, 0.0)
    } else if w > 1.0 - NODE_SNAP {
        (i, 1.0)
    } else {
        (i, w)
    }
}

/// Transitions seen by the recursion.
pub trait DpModel: Sync {
    fn n_steps(&self) -> usize;

    /// Candidate controls at step `k`.
    fn controls(&self, k: usize) -> Vec<f64>;

    /// Next state and stage cost, or `None` when the control is not
    /// realizable from `x`.
    fn transition(&self, k: usize, x: &PlantState, u: f64) -> Option<(PlantState, f64)>;

    /// Among equal costs the control with the smaller key wins.
    fn tie_key(&self, u: f64) -> f64 {
        u.abs()
    }
}

/// The vehicle driven over a cycle at 1 s, with the exact fuel map.
pub struct CycleModel {
    pub vehicle: VehicleParams,
    pub speeds: Vec<f64>,
    pub demands: Vec<f64>,
    pub n_control: usize,
}

impl CycleModel {
    pub fn new(cycle: &DriveCycle, vehicle: &VehicleParams, n_control: usize) -> Self {
        let accels = cycle.accels();
        let demands = cycle
            .speeds
            .iter()
            .zip(&accels)
            .map(|(&v, &a)| power_demand(v, a, &vehicle.road_load))
            .collect();
        Self {
            vehicle: vehicle.clone(),
            speeds: cycle.speeds.clone(),
            demands,
            n_control,
        }
    }
}

impl DpModel for CycleModel {
    fn n_steps(&self) -> usize {
        self.speeds.len()
    }

    fn controls(&self, k: usize) -> Vec<f64> {
        let (lo, hi) = self.vehicle.traction_bounds(self.demands[k]);
        if lo == hi {
            vec![lo]
        } else {
            linspace(lo, hi, self.n_control)
        }
    }

    fn transition(&self, k: usize, x: &PlantState, u: f64) -> Option<(PlantState, f64)> {
        let split = self.vehicle.split(self.demands[k], u);
        let (out, fuel) = self.vehicle.advance(*x, &split, self.speeds[k], 1.0).ok()?;
        if out.soc_saturated {
            return None;
        }
        Some((out.state, fuel))
    }

    /// Ties go to the smaller battery power, auxiliary load included.
    fn tie_key(&self, u: f64) -> f64 {
        (u + self.vehicle.road_load.aux_power).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpPolicy {
    pub grid: DpGrid,
    /// Terminal SOC interval.
    pub soc_band: (f64, f64),
    pub n_steps: usize,
    /// Cost-to-go, kg, indexed `(step, soc, tcl)`.
    pub value: Vec<f64>,
    /// Optimal control per cell, W; NaN where the band is out of reach.
    pub best_control: Vec<f64>,
    /// Free-form description used to validate cached files.
    pub meta: String,
}

impl DpPolicy {
    fn idx(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.grid.soc_points.len() + i) * self.grid.t_cl_points.len() + j
    }

    pub fn value_at_node(&self, k: usize, i: usize, j: usize) -> f64 {
        self.value[self.idx(k, i, j)]
    }

    pub fn control_at_node(&self, k: usize, i: usize, j: usize) -> f64 {
        self.best_control[self.idx(k, i, j)]
    }

    /// Interpolated cost-to-go at step `k`; the sentinel outside the grid.
    pub fn value(&self, k: usize, x: &PlantState) -> f64 {
        interpolate(&self.grid, &self.value[self.slice(k)], x)
    }

    fn slice(&self, k: usize) -> std::ops::Range<usize> {
        let c = self.grid.cells();
        k * c..(k + 1) * c
    }

    /// One-step lookahead at the actual state: the control minimizing stage
    /// cost plus interpolated cost-to-go, ties toward the smaller magnitude.
    pub fn lookahead(&self, model: &dyn DpModel, k: usize, x: &PlantState) -> (f64, f64) {
        best_control(model, k, x, |y| self.value(k + 1, y))
    }

    pub fn is_feasible(&self, x: &PlantState) -> bool {
        self.value(0, x) < SENTINEL
    }

    /// Writes the policy file.
    pub fn save(&self, path: &Path) -> Result<(), DpError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let meta = serde_json::to_vec(&FileMeta {
            grid: self.grid.clone(),
            soc_band: self.soc_band,
            context: self.meta.clone(),
        })
        .map_err(|e| DpError::Format(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for n in [self.n_steps, self.grid.soc_points.len(), self.grid.t_cl_points.len()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for v in self.value.iter().chain(&self.best_control) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DpError> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DpError::Format("not a policy file".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut r)?);
        if version != VERSION {
            return Err(DpError::Format(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta: FileMeta = serde_json::from_slice(&meta).map_err(|e| DpError::Format(e.to_string()))?;
        let n_steps = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let n_soc = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let n_tcl = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if n_soc != meta.grid.soc_points.len() || n_tcl != meta.grid.t_cl_points.len() {
            return Err(DpError::Format("axis lengths disagree with the header".into()));
        }
        let cells = n_soc * n_tcl;
        let mut read_vec = |len: usize| -> Result<Vec<f64>, DpError> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect())
        };
        let value = read_vec((n_steps + 1) * cells)?;
        let best_control = read_vec(n_steps * cells)?;
        Ok(Self {
            grid: meta.grid,
            soc_band: meta.soc_band,
            n_steps,
            value,
            best_control,
            meta: meta.context,
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], DpError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

#[derive(Serialize, Deserialize)]
struct FileMeta {
    grid: DpGrid,
    soc_band: (f64, f64),
    context: String,
}

fn interpolate(grid: &DpGrid, slice: &[f64], x: &PlantState) -> f64 {
    if !grid.contains(x) {
        return SENTINEL;
    }
    let n_t = grid.t_cl_points.len();
    let (i, wi) = locate(&grid.soc_points, x.soc);
    let (j, wj) = locate(&grid.t_cl_points, x.t_cl);
    let (mut acc, mut mass) = (0.0, 0.0);
    let mut nearest = (-1.0, 0.0);
    for (di, a) in [(0, 1.0 - wi), (1, wi)] {
        for (dj, b) in [(0, 1.0 - wj), (1, wj)] {
            let w = a * b;
            if w == 0.0 {
                continue;
            }
            let v = slice[(i + di) * n_t + j + dj];
            if w > nearest.0 {
                nearest = (w, v);
            }
            if v < SENTINEL {
                acc += w * v;
                mass += w;
            }
        }
    }
    if nearest.1 >= SENTINEL {
        SENTINEL
    } else {
        acc / mass
    }
}

/// Minimizes stage cost plus `next_value` over the controls of step `k`.
/// Returns `(control, value)`; when nothing is feasible the value is the
/// sentinel and the control the one with the smallest tie key.
fn best_control<F>(model: &dyn DpModel, k: usize, x: &PlantState, next_value: F) -> (f64, f64)
where
    F: Fn(&PlantState) -> f64,
{
    let mut best: Option<(f64, f64)> = None;
    for u in model.controls(k) {
        let v = match model.transition(k, x, u) {
            Some((y, cost)) => (cost + next_value(&y)).min(SENTINEL),
            None => SENTINEL,
        };
        let better = match best {
            None => true,
            Some((bu, bv)) => v < bv || (v == bv && model.tie_key(u) < model.tie_key(bu)),
        };
        if better {
            best = Some((u, v));
        }
    }
    best.expect("every step has at least one control")
}

/// Backward induction over the whole cycle.
///
/// `soc_init` centres the terminal band; `meta` is stored with the policy.
pub fn solve_dp(
    model: &dyn DpModel,
    grid: &DpGrid,
    soc_init: f64,
    terminal_band: f64,
    band_penalty: f64,
    meta: String,
) -> DpPolicy {
    let n = model.n_steps();
    let cells = grid.cells();
    let n_t = grid.t_cl_points.len();
    let band = (soc_init * (1.0 - terminal_band), soc_init * (1.0 + terminal_band));
    let mut value = vec![SENTINEL; (n + 1) * cells];
    let mut control = vec![f64::NAN; n * cells];
    for (c, v) in value[n * cells..].iter_mut().enumerate() {
        let soc = grid.soc_points[c / n_t];
        *v = band_penalty * (band.0 - soc).max(soc - band.1).max(0.0);
    }
    for k in (0..n).rev() {
        let (head, tail) = value.split_at_mut((k + 1) * cells);
        let next = &tail[..cells];
        let rows: Vec<(f64, f64)> = (0..cells)
            .into_par_iter()
            .map(|c| {
                let x = PlantState::new(grid.soc_points[c / n_t], grid.t_cl_points[c % n_t]);
                best_control(model, k, &x, |y| interpolate(grid, next, y))
            })
            .collect();
        for (c, (u, v)) in rows.into_iter().enumerate() {
            head[k * cells + c] = v;
            if v < SENTINEL {
                control[k * cells + c] = u;
            }
        }
    }
    DpPolicy {
        grid: grid.clone(),
        soc_band: band,
        n_steps: n,
        value,
        best_control: control,
        meta,
    }
}

/// Forward simulation of the policy.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub states: Vec<PlantState>,
    pub controls: Vec<f64>,
    pub fuel: f64,
}

/// Applies the policy from `initial` by one-step lookahead at the actual
/// state. Never fails: when no feasible control remains the smallest one is
/// applied and the simulation carries on.
pub fn rollout_policy(policy: &DpPolicy, model: &dyn DpModel, initial: PlantState) -> Rollout {
    let mut x = initial;
    let mut states = vec![x];
    let mut controls = Vec::with_capacity(policy.n_steps);
    let mut fuel = 0.0;
    for k in 0..policy.n_steps {
        let (u, _) = policy.lookahead(model, k, &x);
        let (y, cost) = model.transition(k, &x, u).unwrap_or((x, 0.0));
        fuel += cost;
        controls.push(u);
        states.push(y);
        x = y;
    }
    Rollout {
        states,
        controls,
        fuel,
    }
}

/// Solves the default two-state problem for a cycle.
pub fn solve_cycle(
    cycle: &DriveCycle,
    vehicle: &VehicleParams,
    bounds: &StateBounds,
    cfg: &DpGridConfig,
    initial: PlantState,
) -> Result<DpPolicy, DpError> {
    let grid = DpGrid::new(cfg, bounds)?;
    let model = CycleModel::new(cycle, vehicle, cfg.n_control);
    let meta = cache_key(cycle, vehicle, bounds, cfg, initial.soc);
    let policy = solve_dp(&model, &grid, initial.soc, cfg.terminal_band, cfg.band_penalty, meta);
    if !policy.is_feasible(&initial) {
        return Err(DpError::NoFeasiblePolicy {
            soc: initial.soc,
            t_cl: initial.t_cl,
        });
    }
    Ok(policy)
}

/// Everything a cached policy depends on, as canonical JSON.
pub fn cache_key(
    cycle: &DriveCycle,
    vehicle: &VehicleParams,
    bounds: &StateBounds,
    cfg: &DpGridConfig,
    soc_init: f64,
) -> String {
    serde_json::json!({
        "cycle": cycle.name,
        "speeds": cycle.speeds,
        "vehicle": vehicle,
        "bounds": bounds,
        "grid": cfg,
        "soc_init": soc_init,
    })
    .to_string()
}

/// Closed-loop controller replaying a policy by one-step lookahead.
pub struct DpController {
    policy: DpPolicy,
    model: CycleModel,
}

impl DpController {
    /// `vehicle` must be the one the policy was solved for.
    pub fn new(policy: DpPolicy, cycle: &DriveCycle, vehicle: &VehicleParams) -> Self {
        let model = CycleModel::new(cycle, vehicle, policy.grid.n_control);
        Self { policy, model }
    }
}

impl Controller for DpController {
    fn label(&self) -> String {
        "dp".into()
    }

    fn step(&mut self, input: &StepInput) -> Result<Command, ControllerError> {
        let t0 = std::time::Instant::now();
        if input.t >= self.policy.n_steps {
            return Err(ControllerError::Config(format!(
                "policy covers {} s, asked for t = {}",
                self.policy.n_steps, input.t
            )));
        }
        let (u, _) = self.policy.lookahead(&self.model, input.t, &input.state);
        Ok(Command {
            p_trac: u,
            status: CommandStatus::Policy,
            solve_time: t0.elapsed().as_secs_f64(),
            iterations: 0,
            max_violation: 0.0,
        })
    }

    fn reset(&mut self) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linspace_hits_both_ends() {
        let v = linspace(0.4, 0.8, 81);
        assert_eq!(v[0], 0.4);
        assert_eq!(v[80], 0.8);
        assert_eq!(v.len(), 81);
    }

    #[test]
    fn locate_on_nodes_has_zero_weight() {
        let ax = linspace(0.4, 0.8, 81);
        for (i, &x) in ax.iter().enumerate() {
            let (k, w) = locate(&ax, x);
            assert!((k == i && w == 0.0) || (k + 1 == i && w == 1.0), "{i} {k} {w}");
        }
    }

    #[test]
    fn zero_demand_warm_cycle_costs_nothing() {
        let mut v = VehicleParams::default();
        v.thermal.heating_demand = 0.0;
        v.thermal.ambient_temp = 60.0;
        v.road_load.aux_power = 0.0;
        let cycle = DriveCycle::new("idle", vec![0.0; 10]).unwrap();
        let cfg = DpGridConfig {
            n_soc: 21,
            n_tcl: 6,
            n_control: 11,
            terminal_band: 0.01,
            band_penalty: 10.0,
        };
        let x0 = PlantState::new(0.6, 60.0);
        let p = solve_cycle(&cycle, &v, &StateBounds::default(), &cfg, x0).unwrap();
        assert_eq!(p.value(0, &x0), 0.0);
        let model = CycleModel::new(&cycle, &v, cfg.n_control);
        let r = rollout_policy(&p, &model, x0);
        assert_eq!(r.fuel, 0.0);
        assert!(r.controls.iter().all(|&u| u == 0.0), "{:?}", r.controls);
    }

    #[test]
    fn interpolation_follows_the_nearest_node() {
        let grid = DpGrid {
            soc_points: vec![0.0, 1.0],
            t_cl_points: vec![0.0, 1.0],
            n_control: 2,
            dt: 1.0,
        };
        let slice = [0.0, 1.0, SENTINEL, 3.0];
        assert_eq!(interpolate(&grid, &slice, &PlantState::new(0.0, 0.5)), 0.5);
        // nearest corner (1, 0) is infeasible
        assert_eq!(interpolate(&grid, &slice, &PlantState::new(0.75, 0.25)), SENTINEL);
        // nearest corner (1, 1) is feasible; the cost skips (1, 0)
        let v = interpolate(&grid, &slice, &PlantState::new(0.75, 0.75));
        let (w01, w11, w00) = (0.25 * 0.75, 0.75 * 0.75, 0.25 * 0.25);
        assert!((v - (w01 * 1.0 + w11 * 3.0) / (w00 + w01 + w11)).abs() < 1e-15, "{v}");
        assert_eq!(interpolate(&grid, &slice, &PlantState::new(1.0, 1.0)), 3.0);
        assert_eq!(interpolate(&grid, &slice, &PlantState::new(1.5, 0.0)), SENTINEL);
    }

    #[test]
    fn policy_file_round_trip() {
        let v = VehicleParams::default();
        let cycle = DriveCycle::new("short", vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
        let cfg = DpGridConfig {
            n_soc: 41,
            n_tcl: 11,
            n_control: 5,
            terminal_band: 0.05,
            band_penalty: 10.0,
        };
        let p = solve_cycle(&cycle, &v, &StateBounds::default(), &cfg, PlantState::new(0.6, 60.0)).unwrap();
        let dir = std::env::temp_dir().join(format!("iptm-dp-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("policy.bin");
        p.save(&path).unwrap();
        let q = DpPolicy::load(&path).unwrap();
        assert_eq!(p.grid, q.grid);
        assert_eq!(p.meta, q.meta);
        assert_eq!(p.value, q.value);
        // NaN entries compare by bits
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.best_control), bits(&q.best_control));
        std::fs::write(&path, b"garbage!").unwrap();
        assert!(DpPolicy::load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
