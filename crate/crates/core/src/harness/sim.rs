//! Closed-loop simulation at 1 s.

use thiserror::Error;

use crate::controllers::{
    Command, CommandStatus, Controller, ControllerError, RuleBased, RuleBasedConfig, StepInput,
};
use crate::cycle::{self, CycleError, DriveCycle, PreviewModel};
use crate::maps::power_demand;
use crate::plant::{PlantError, PlantState};
use crate::powertrain::VehicleParams;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Cycle(#[from] CycleError),
    #[error("t = {t} s: {source}")]
    Controller {
        t: usize,
        #[source]
        source: ControllerError,
    },
    #[error("t = {t} s: {source}")]
    Plant {
        t: usize,
        #[source]
        source: PlantError,
    },
}

/// One logged second. States are at the start of the step; powers and the
/// fuel flow are held over `[t, t + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub t: usize,
    pub speed: f64,
    pub demand: f64,
    pub p_bat: f64,
    pub p_eng: f64,
    pub fuel_rate: f64,
    pub soc: f64,
    pub t_cl: f64,
    pub solve_time: f64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub label: String,
    pub cycle: String,
    /// `cycle.len()` step rows followed by one row holding the final state.
    pub rows: Vec<Row>,
    /// Steps where the optimizer's plan needed relaxed state bounds.
    pub relaxed_steps: usize,
    pub fallback_steps: usize,
    /// Demand left uncovered by saturated sources, J.
    pub unmet_energy: f64,
    /// Braking energy dissipated by friction, J.
    pub friction_energy: f64,
    /// Commands outside the admissible interval, clipped by the loop.
    pub clipped_steps: usize,
}

impl Trajectory {
    pub fn steps(&self) -> &[Row] {
        &self.rows[..self.rows.len() - 1]
    }

    pub fn final_state(&self) -> PlantState {
        let r = self.rows.last().expect("trajectory has a final row");
        PlantState::new(r.soc, r.t_cl)
    }

    pub fn total_fuel(&self) -> f64 {
        self.steps().iter().map(|r| r.fuel_rate).sum()
    }

    /// Solve times of steps that ran the controller, s.
    pub fn solve_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.steps().iter().map(|r| r.solve_time)
    }
}

/// Runs `controller` over the whole cycle from `initial`.
///
/// The preview window and coarse block width come from the controller; the
/// noise settings come from `preview`. A step where the controller fails is
/// logged and served by the rule-based `fallback`; only configuration errors
/// abort the run.
pub fn simulate(
    cycle: &DriveCycle,
    controller: &mut dyn Controller,
    vehicle: &VehicleParams,
    initial: PlantState,
    preview: &PreviewModel,
    fallback: &RuleBasedConfig,
) -> Result<Trajectory, SimError> {
    let (window, coarse) = controller.preview_window();
    let pm = PreviewModel {
        accurate_window: window.max(1),
        coarse_step: coarse.max(1),
        ..preview.clone()
    };
    controller.reset();
    let mut backup = RuleBased::new(fallback.clone(), vehicle.clone());
    let n = cycle.len();
    let accels = cycle.accels();
    let aux = vehicle.road_load.aux_power;
    let mut state = initial;
    let mut traj = Trajectory {
        label: controller.label(),
        cycle: cycle.name.clone(),
        rows: Vec::with_capacity(n + 1),
        relaxed_steps: 0,
        fallback_steps: 0,
        unmet_energy: 0.0,
        friction_energy: 0.0,
        clipped_steps: 0,
    };
    for t in 0..n {
        let speed = cycle.speeds[t];
        let demand = power_demand(speed, accels[t], &vehicle.road_load);
        let pv = cycle::preview(cycle, t, &pm)?;
        let input = StepInput {
            t,
            t_end: n,
            state,
            demand,
            preview: &pv,
        };
        // the backup latch follows the plant even while unused
        let backup_cmd = backup.command(&state, demand);
        let cmd = match controller.step(&input) {
            Ok(c) => c,
            Err(source @ ControllerError::Config(_)) => return Err(SimError::Controller { t, source }),
            Err(e) => {
                log::warn!("t = {t} s: {e}; using the rule-based fallback");
                Command {
                    status: CommandStatus::Fallback,
                    ..Command::rule(backup_cmd)
                }
            }
        };
        match cmd.status {
            CommandStatus::Relaxed => traj.relaxed_steps += 1,
            CommandStatus::Fallback => traj.fallback_steps += 1,
            _ => {}
        }
        let (lo, hi) = vehicle.traction_bounds(demand);
        let p_trac = cmd.p_trac.clamp(lo, hi);
        if p_trac != cmd.p_trac {
            traj.clipped_steps += 1;
        }
        let split = vehicle.split(demand, p_trac);
        // power balance of the split
        assert_eq!(split.p_eng, (demand - p_trac).max(0.0).min(vehicle.engine.p_eng_max));
        assert_eq!(split.p_bat, p_trac + aux);
        assert!((0.0..=vehicle.engine.p_eng_max).contains(&split.p_eng));
        traj.unmet_energy += split.unmet;
        traj.friction_energy += split.friction;

        let (out, fuel) = vehicle
            .advance(state, &split, speed, 1.0)
            .map_err(|source| SimError::Plant { t, source })?;
        traj.rows.push(Row {
            t,
            speed,
            demand,
            p_bat: split.p_bat,
            p_eng: split.p_eng,
            fuel_rate: fuel,
            soc: state.soc,
            t_cl: state.t_cl,
            solve_time: cmd.solve_time,
            status: cmd.status.as_str().to_string(),
        });
        state = out.state;
    }
    traj.rows.push(Row {
        t: n,
        speed: 0.0,
        demand: 0.0,
        p_bat: 0.0,
        p_eng: 0.0,
        fuel_rate: 0.0,
        soc: state.soc,
        t_cl: state.t_cl,
        solve_time: 0.0,
        status: "end".into(),
    });
    Ok(traj)
}
