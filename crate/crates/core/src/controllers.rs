//! Online supervisory controllers: rule-based load leveling, a single-rate
//! MPC with a terminal SOC penalty, and the multi-horizon MPC with a terminal
//! SOC interval.
//!
//! Every controller maps `(state, time, preview)` to a battery traction power
//! command. The battery additionally carries the auxiliary load, which the
//! harness adds when applying the split.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cycle::Preview;
use crate::horizon::{self, HorizonError, HorizonNode, HorizonParams};
use crate::nlp::{self, NlpError, NlpSolution, OcpSpec, SolveStatus, SolverOptions, StateBounds, Terminal};
use crate::plant::PlantState;
use crate::powertrain::{PredictionModel, VehicleParams};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Horizon(#[from] HorizonError),
    #[error(transparent)]
    Nlp(#[from] NlpError),
}

/// Everything a controller may look at when choosing the current command.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a> {
    /// Current time, s.
    pub t: usize,
    /// Trip end, s.
    pub t_end: usize,
    pub state: PlantState,
    /// Traction power demand over the coming second, W.
    pub demand: f64,
    pub preview: &'a Preview,
}

/// How a command was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandStatus {
    Rule,
    Converged,
    MaxIter,
    /// State boxes were softened to get a solution.
    Relaxed,
    /// The optimizer failed; the rule-based logic supplied the command.
    Fallback,
    Policy,
}

impl CommandStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rule => "rule",
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
            Self::Relaxed => "relaxed",
            Self::Fallback => "fallback",
            Self::Policy => "policy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    /// Battery traction power, W (battery output minus auxiliary load).
    pub p_trac: f64,
    pub status: CommandStatus,
    /// Wall-clock time spent choosing the command, s.
    pub solve_time: f64,
    pub iterations: usize,
    /// Largest predicted constraint violation of the optimizer's plan.
    pub max_violation: f64,
}

impl Command {
    pub fn rule(p_trac: f64) -> Self {
        Self {
            p_trac,
            status: CommandStatus::Rule,
            solve_time: 0.0,
            iterations: 0,
            max_violation: 0.0,
        }
    }
}

pub trait Controller: Send {
    fn label(&self) -> String;

    /// Exact preview window and coarse block width this controller needs, s.
    fn preview_window(&self) -> (usize, usize) {
        (1, 1)
    }

    fn step(&mut self, input: &StepInput) -> Result<Command, ControllerError>;

    /// Drops all state carried between steps.
    fn reset(&mut self);
}

// ---------------------------------------------------------------------------
// rule based

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleBasedConfig {
    /// Demand above which the engine runs, W.
    pub engine_on_power: f64,
    pub soc_low: f64,
    pub soc_high: f64,
    pub t_cl_floor: f64,
    /// Engine power beyond demand used to charge the battery, W.
    pub charge_power: f64,
    /// The engine is started this far above `t_cl_floor`, so one second of
    /// cooling cannot take the coolant below the floor.
    pub thermal_margin: f64,
}

impl Default for RuleBasedConfig {
    fn default() -> Self {
        Self {
            engine_on_power: 8_000.0,
            soc_low: 0.55,
            soc_high: 0.65,
            t_cl_floor: 50.0,
            charge_power: 5_000.0,
            thermal_margin: 1.0,
        }
    }
}

impl RuleBasedConfig {
    pub fn validate(&self, bounds: &StateBounds) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Config(m.to_string()));
        if !(bounds.soc_min <= self.soc_low && self.soc_low < self.soc_high && self.soc_high <= bounds.soc_max) {
            return bad("need soc_min <= soc_low < soc_high <= soc_max");
        }
        if !(self.t_cl_floor >= bounds.t_cl_min) {
            return bad("t_cl_floor must not be below the coolant lower bound");
        }
        if !(self.charge_power >= 0.0 && self.engine_on_power >= 0.0 && self.thermal_margin >= 0.0) {
            return bad("powers and thermal margin must be non-negative");
        }
        Ok(())
    }
}

/// Load-leveling logic with a charge-sustaining hysteresis latch.
#[derive(Debug, Clone)]
pub struct RuleBased {
    pub config: RuleBasedConfig,
    vehicle: VehicleParams,
    /// Set below `soc_low`, cleared at `soc_high`.
    charging: bool,
}

impl RuleBased {
    pub fn new(config: RuleBasedConfig, vehicle: VehicleParams) -> Self {
        Self {
            config,
            vehicle,
            charging: false,
        }
    }

    pub fn is_charging(&self) -> bool {
        self.charging
    }

    /// Traction command for one step; updates the hysteresis latch.
    pub fn command(&mut self, state: &PlantState, demand: f64) -> f64 {
        let c = &self.config;
        if state.soc < c.soc_low {
            self.charging = true;
        } else if state.soc >= c.soc_high {
            self.charging = false;
        }
        let cold = state.t_cl < c.t_cl_floor + c.thermal_margin;
        let engine_on = cold || self.charging || demand >= c.engine_on_power;
        let (lo, hi) = self.vehicle.traction_bounds(demand);
        let p_trac = if !engine_on {
            demand
        } else if state.soc < c.soc_high {
            demand - (demand.max(0.0) + c.charge_power)
        } else if cold {
            // keep the engine loaded enough to heat without charging much
            demand - demand.max(c.charge_power)
        } else {
            0.0
        };
        p_trac.clamp(lo, hi)
    }
}

/// Battery power chosen by the rule-based logic, aux load included, W.
pub fn rule_based_step(
    state: &PlantState,
    demand: f64,
    cfg: &RuleBasedConfig,
    vehicle: &VehicleParams,
    charging: &mut bool,
) -> f64 {
    let mut rb = RuleBased::new(cfg.clone(), vehicle.clone());
    rb.charging = *charging;
    let p = rb.command(state, demand);
    *charging = rb.charging;
    p + vehicle.road_load.aux_power
}

impl Controller for RuleBased {
    fn label(&self) -> String {
        "rule-based".into()
    }

    fn step(&mut self, input: &StepInput) -> Result<Command, ControllerError> {
        let t0 = Instant::now();
        let mut c = Command::rule(self.command(&input.state, input.demand));
        c.solve_time = t0.elapsed().as_secs_f64();
        Ok(c)
    }

    fn reset(&mut self) {
        self.charging = false;
    }
}

// ---------------------------------------------------------------------------
// shared MPC machinery

/// Settings common to both MPC controllers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcCommon {
    pub solver: SolverOptions,
    /// Width of the smoothed engine start in the prediction model, W.
    pub on_off_width: f64,
    pub state_bounds: StateBounds,
    /// Used when the optimizer fails.
    pub fallback: RuleBasedConfig,
}

impl Default for MpcCommon {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            on_off_width: PredictionModel::DEFAULT_ON_OFF_WIDTH,
            state_bounds: StateBounds::default(),
            fallback: RuleBasedConfig::default(),
        }
    }
}

/// Previous plan, kept for warm starting.
#[derive(Debug, Clone)]
struct Plan {
    nodes: Vec<HorizonNode>,
    u: Vec<f64>,
}

impl Plan {
    /// Samples the plan at the start times of `nodes`, holding each old node's
    /// value over its interval and the last value beyond the old horizon.
    fn resample(&self, nodes: &[HorizonNode]) -> Vec<f64> {
        nodes
            .iter()
            .map(|n| {
                let t = n.start_time + 1e-9;
                let k = self
                    .nodes
                    .iter()
                    .position(|o| o.end_time() > t)
                    .unwrap_or(self.nodes.len() - 1);
                self.u[k]
            })
            .collect()
    }
}

struct MpcCore {
    common: MpcCommon,
    vehicle: VehicleParams,
    plan: Option<Plan>,
    fallback: RuleBased,
}

impl MpcCore {
    fn new(common: MpcCommon, vehicle: VehicleParams) -> Self {
        let fallback = RuleBased::new(common.fallback.clone(), vehicle.clone());
        Self {
            common,
            vehicle,
            plan: None,
            fallback,
        }
    }

    fn solve(
        &mut self,
        input: &StepInput,
        nodes: Vec<HorizonNode>,
        terminal: Terminal,
        t0: Instant,
    ) -> Result<Command, ControllerError> {
        let mut model = PredictionModel::new(&self.vehicle);
        model.on_off_width = self.common.on_off_width;
        let warm = self.plan.as_ref().map(|p| p.resample(&nodes));
        let problem = nlp::transcribe(OcpSpec {
            nodes: nodes.clone(),
            initial_state: input.state,
            model: &model,
            state_bounds: self.common.state_bounds,
            terminal,
        });
        let sol: NlpSolution = nlp::solve(&problem, warm.as_deref(), &self.common.solver)?;
        let status = match sol.status {
            SolveStatus::Infeasible => CommandStatus::Fallback,
            _ if sol.relaxed => CommandStatus::Relaxed,
            SolveStatus::Converged => CommandStatus::Converged,
            SolveStatus::MaxIter => CommandStatus::MaxIter,
        };
        let p_trac = if status == CommandStatus::Fallback {
            log::warn!("t = {} s: optimizer infeasible, rule-based fallback", input.t);
            self.plan = None;
            self.fallback.command(&input.state, input.demand)
        } else {
            if sol.relaxed {
                log::info!(
                    "t = {} s: state bounds relaxed, predicted violation {:.3e}",
                    input.t,
                    sol.max_violation
                );
            }
            // keep the fallback latch consistent with the current SOC
            self.fallback.command(&input.state, input.demand);
            let u0 = sol.p_bat_sequence[0];
            self.plan = Some(Plan {
                nodes,
                u: sol.p_bat_sequence,
            });
            u0
        };
        Ok(Command {
            p_trac,
            status,
            solve_time: t0.elapsed().as_secs_f64(),
            iterations: sol.iterations,
            max_violation: sol.max_violation,
        })
    }

    fn reset(&mut self) {
        self.plan = None;
        self.fallback.reset();
    }
}

// ---------------------------------------------------------------------------
// baseline MPC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineMpcConfig {
    /// Prediction horizon in 1 s steps.
    pub horizon: usize,
    /// Terminal penalty weight, kg per SOC².
    pub lambda: f64,
    /// Reference SOC; the SOC at the first step when unset.
    pub soc_ref: Option<f64>,
    #[serde(flatten)]
    pub common: MpcCommon,
}

impl Default for BaselineMpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            lambda: 100.0,
            soc_ref: None,
            common: MpcCommon::default(),
        }
    }
}

impl BaselineMpcConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.horizon < 1 {
            return Err(ControllerError::Config("H must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(ControllerError::Config("lambda must be non-negative".into()));
        }
        self.common.fallback.validate(&self.common.state_bounds)
    }
}

/// Single-rate MPC over `H` one-second nodes with a quadratic terminal SOC
/// penalty. The horizon is cut at the end of the trip.
pub struct BaselineMpc {
    pub config: BaselineMpcConfig,
    core: MpcCore,
    soc_ref: Option<f64>,
}

impl BaselineMpc {
    pub fn new(config: BaselineMpcConfig, vehicle: VehicleParams) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            core: MpcCore::new(config.common.clone(), vehicle),
            soc_ref: config.soc_ref,
            config,
        })
    }

    fn nodes(&self, input: &StepInput) -> Result<Vec<HorizonNode>, ControllerError> {
        let t_end = (input.t + self.config.horizon).min(input.t_end);
        let n = t_end - input.t;
        let p = input.preview;
        if p.fine_speeds.len() < n {
            return Err(ControllerError::Config(format!(
                "preview holds {} exact seconds, horizon needs {n}",
                p.fine_speeds.len()
            )));
        }
        let params = HorizonParams {
            n_fine: n,
            dt1: 1.0,
            dt2: 1.0,
        };
        let h = horizon::build_from_speeds(
            input.t as f64,
            t_end as f64,
            &params,
            &p.fine_speeds[..n],
            &p.fine_accels[..n],
            &[],
            &self.core.vehicle.road_load,
        )?;
        Ok(h.nodes)
    }
}

impl Controller for BaselineMpc {
    fn label(&self) -> String {
        format!("baseline-mpc(H={})", self.config.horizon)
    }

    fn preview_window(&self) -> (usize, usize) {
        (self.config.horizon, 1)
    }

    fn step(&mut self, input: &StepInput) -> Result<Command, ControllerError> {
        let t0 = Instant::now();
        let reference = *self.soc_ref.get_or_insert(input.state.soc);
        let nodes = self.nodes(input)?;
        let terminal = Terminal::SocPenalty {
            weight: self.config.lambda,
            reference,
        };
        self.core.solve(input, nodes, terminal, t0)
    }

    fn reset(&mut self) {
        self.core.reset();
        self.soc_ref = self.config.soc_ref;
    }
}

// ---------------------------------------------------------------------------
// multi-horizon MPC

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MhMpcConfig {
    /// Number of fine nodes.
    pub n_fine: usize,
    pub dt1: f64,
    pub dt2: f64,
    /// Half width of the terminal SOC interval relative to `soc_init`.
    pub terminal_band: f64,
    /// SOC the trip must return to; the SOC at the first step when unset.
    pub soc_init: Option<f64>,
    #[serde(flatten)]
    pub common: MpcCommon,
}

impl Default for MhMpcConfig {
    fn default() -> Self {
        Self {
            n_fine: 20,
            dt1: 1.0,
            dt2: 20.0,
            terminal_band: 0.01,
            soc_init: None,
            common: MpcCommon::default(),
        }
    }
}

impl MhMpcConfig {
    pub fn params(&self) -> HorizonParams {
        HorizonParams {
            n_fine: self.n_fine,
            dt1: self.dt1,
            dt2: self.dt2,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        self.params().validate()?;
        if self.dt1 != 1.0 {
            return Err(ControllerError::Config(
                "the closed loop runs at 1 s, so dt1 must be 1".into(),
            ));
        }
        if self.dt2.fract() != 0.0 {
            return Err(ControllerError::Config("dt2 must be a whole number of seconds".into()));
        }
        if !(self.terminal_band > 0.0) {
            return Err(ControllerError::Config("terminal band must be positive".into()));
        }
        self.common.fallback.validate(&self.common.state_bounds)
    }
}

/// MPC over `N` fine nodes followed by coarse nodes reaching the end of the
/// trip, with the terminal SOC held inside a band around its initial value.
pub struct MhMpc {
    pub config: MhMpcConfig,
    core: MpcCore,
    soc_init: Option<f64>,
}

impl MhMpc {
    pub fn new(config: MhMpcConfig, vehicle: VehicleParams) -> Result<Self, ControllerError> {
        config.validate()?;
        Ok(Self {
            core: MpcCore::new(config.common.clone(), vehicle),
            soc_init: config.soc_init,
            config,
        })
    }

    /// Terminal SOC interval in force.
    pub fn terminal_interval(&self) -> Option<(f64, f64)> {
        self.soc_init
            .map(|s| (s * (1.0 - self.config.terminal_band), s * (1.0 + self.config.terminal_band)))
    }
}

impl Controller for MhMpc {
    fn label(&self) -> String {
        format!("mh-mpc(N={},dt2={})", self.config.n_fine, self.config.dt2)
    }

    fn preview_window(&self) -> (usize, usize) {
        (self.config.n_fine, self.config.dt2 as usize)
    }

    fn step(&mut self, input: &StepInput) -> Result<Command, ControllerError> {
        let t0 = Instant::now();
        self.soc_init.get_or_insert(input.state.soc);
        let (lo, hi) = self.terminal_interval().expect("set above");
        let h = horizon::build(
            input.t_end as f64,
            &self.config.params(),
            input.preview,
            &self.core.vehicle.road_load,
        )?;
        self.core.solve(input, h.nodes, Terminal::SocInterval { lo, hi }, t0)
    }

    fn reset(&mut self) {
        self.core.reset();
        self.soc_init = self.config.soc_init;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::{preview, DriveCycle, PreviewModel};

    fn input<'a>(state: PlantState, demand: f64, p: &'a Preview, t_end: usize) -> StepInput<'a> {
        StepInput {
            t: p.t,
            t_end,
            state,
            demand,
            preview: p,
        }
    }

    fn rule() -> RuleBased {
        RuleBased::new(RuleBasedConfig::default(), VehicleParams::default())
    }

    #[test]
    fn cold_coolant_forces_the_engine_on() {
        let mut rb = rule();
        let p = rb.command(&PlantState::new(0.7, 45.0), 2_000.0);
        let s = VehicleParams::default().split(2_000.0, p);
        assert!(s.p_eng > 0.0, "{s:?}");
    }

    #[test]
    fn ev_mode_inside_the_band() {
        let v = VehicleParams::default();
        let mut charging = false;
        let p = rule_based_step(&PlantState::new(0.7, 60.0), 2_000.0, &RuleBasedConfig::default(), &v, &mut charging);
        assert_eq!(p, 2_000.0 + v.road_load.aux_power);
    }

    #[test]
    fn hysteresis_latch() {
        let mut rb = rule();
        let v = VehicleParams::default();
        let demand = 2_000.0;
        // below the band: charging with the engine on
        rb.command(&PlantState::new(0.54, 60.0), demand);
        assert!(rb.is_charging());
        let p = rb.command(&PlantState::new(0.60, 60.0), demand);
        assert!(v.split(demand, p).p_eng > demand);
        // reaching the top stops charging; it stays off inside the band
        rb.command(&PlantState::new(0.65, 60.0), demand);
        assert!(!rb.is_charging());
        let p = rb.command(&PlantState::new(0.60, 60.0), demand);
        assert_eq!(v.split(demand, p).p_eng, 0.0);
        assert!(!rb.is_charging());
    }

    #[test]
    fn rule_based_saturates_at_the_limits() {
        let mut rb = rule();
        let v = VehicleParams::default();
        for demand in [-60_000.0, -5_000.0, 0.0, 3_000.0, 30_000.0, 120_000.0] {
            for soc in [0.45, 0.6, 0.7] {
                let p = rb.command(&PlantState::new(soc, 60.0), demand);
                let (lo, hi) = v.traction_bounds(demand);
                assert!(lo <= p && p <= hi, "{demand} {soc} {p}");
            }
        }
    }

    #[test]
    fn plan_resampling_holds_values() {
        let mk = |t: f64, d: f64| HorizonNode {
            start_time: t,
            duration: d,
            speed: 0.0,
            accel: 0.0,
            power_demand: 0.0,
            segment: horizon::Segment::Fine,
        };
        let plan = Plan {
            nodes: vec![mk(0.0, 1.0), mk(1.0, 1.0), mk(2.0, 20.0)],
            u: vec![1.0, 2.0, 3.0],
        };
        let new = [mk(1.0, 1.0), mk(2.0, 1.0), mk(3.0, 1.0), mk(22.0, 20.0)];
        assert_eq!(plan.resample(&new), vec![2.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn zero_demand_at_reference_keeps_the_battery_idle() {
        let cycle = DriveCycle::new("zero", vec![0.0; 40]).unwrap();
        let pm = PreviewModel::default();
        let p = preview(&cycle, 0, &pm).unwrap();
        let mut v = VehicleParams::default();
        v.road_load.aux_power = 0.0;
        v.thermal.heating_demand = 0.0;
        v.thermal.ambient_temp = 70.0;
        let mut mpc = BaselineMpc::new(BaselineMpcConfig::default(), v).unwrap();
        let c = mpc.step(&input(PlantState::new(0.6, 70.0), 0.0, &p, 40)).unwrap();
        assert_eq!(c.status, CommandStatus::Converged);
        assert!(c.p_trac.abs() < 1e-6, "{c:?}");
    }

    #[test]
    fn configs_reject_bad_values() {
        let mut c = MhMpcConfig::default();
        c.terminal_band = 0.0;
        assert!(c.validate().is_err());
        let mut b = BaselineMpcConfig::default();
        b.horizon = 0;
        assert!(b.validate().is_err());
        let mut r = RuleBasedConfig::default();
        r.soc_low = 0.7;
        assert!(r.validate(&StateBounds::default()).is_err());
    }
}
