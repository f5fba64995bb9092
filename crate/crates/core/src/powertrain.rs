//! Power split between engine and battery, and the per-node prediction model
//! handed to the optimizer.
//!
//! The controlled quantity is the battery traction power `p_trac`. The
//! battery also carries the auxiliary load, so `p_bat = p_trac + aux`, and
//! the engine covers what is left: `p_eng = max(0, demand - p_trac)`.

use serde::{Deserialize, Serialize};

use crate::horizon::HorizonNode;
use crate::maps::{AlphaCurve, EngineMap, MapError, RoadLoadParams};
use crate::nlp::{StageEval, StageModel};
use crate::plant::{self, BatteryParams, PlantError, PlantInput, PlantState, ThermalParams};

/// Share of the discriminant-zero battery limit usable by any controller.
pub const BATTERY_LIMIT_MARGIN: f64 = 0.98;

/// Every physical parameter of the vehicle, shared by the simulator, the
/// MPC prediction models and dynamic programming.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleParams {
    pub battery: BatteryParams,
    pub thermal: ThermalParams,
    pub engine: EngineMap,
    pub alpha: AlphaCurve,
    pub road_load: RoadLoadParams,
}

impl VehicleParams {
    pub fn validate(&self) -> Result<(), String> {
        self.battery.validate().map_err(|e| e.to_string())?;
        self.thermal.validate().map_err(|e| e.to_string())?;
        self.engine.validate().map_err(|e| e.to_string())?;
        self.alpha.validate().map_err(|e| e.to_string())?;
        self.road_load.validate().map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Battery discharge power usable at any SOC, W.
    pub fn p_bat_upper(&self) -> f64 {
        self.battery
            .p_bat_max
            .min(BATTERY_LIMIT_MARGIN * self.battery.min_power_limit())
    }

    /// Admissible interval for the battery traction power at `demand`.
    ///
    /// When the demand exceeds what engine and battery can deliver together
    /// the interval collapses to the battery maximum (the shortfall is
    /// reported by [`Self::split`]); when braking exceeds what the battery can
    /// absorb it collapses to the charging limit and friction takes the rest.
    pub fn traction_bounds(&self, demand: f64) -> (f64, f64) {
        let aux = self.road_load.aux_power;
        let bat_lo = self.battery.p_bat_min - aux;
        let bat_hi = self.p_bat_upper() - aux;
        let lo = bat_lo.max(demand - self.engine.p_eng_max);
        let hi = bat_hi.min(demand);
        if lo <= hi {
            (lo, hi)
        } else if demand < bat_lo {
            (bat_lo, bat_lo)
        } else {
            (bat_hi, bat_hi)
        }
    }

    /// Applies the power balance for a traction command.
    pub fn split(&self, demand: f64, p_trac: f64) -> Split {
        let p_eng = (demand - p_trac).clamp(0.0, self.engine.p_eng_max);
        Split {
            p_trac,
            p_bat: p_trac + self.road_load.aux_power,
            p_eng,
            unmet: (demand - p_trac - p_eng).max(0.0),
            friction: (p_trac - demand).max(0.0),
        }
    }

    /// Exact corrected fuel flow, kg/s.
    pub fn fuel_rate(&self, p_eng: f64, t_cl: f64) -> Result<f64, MapError> {
        crate::maps::corrected_fuel_rate(p_eng, t_cl, &self.engine, &self.alpha)
    }

    /// One plant step for a split, with the exact fuel map.
    pub fn advance(
        &self,
        state: PlantState,
        split: &Split,
        speed: f64,
        dt: f64,
    ) -> Result<(plant::StepOutcome, f64), PlantError> {
        let fuel = self
            .fuel_rate(split.p_eng, state.t_cl)
            .map_err(|e| PlantError::InvalidParameter(e.to_string()))?;
        let input = PlantInput {
            p_bat: split.p_bat,
            p_eng: split.p_eng,
            fuel_rate: fuel,
            vehicle_speed: speed,
        };
        let out = plant::step(state, &input, dt, &self.battery, &self.thermal)?;
        Ok((out, fuel))
    }
}

/// Result of the power balance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub p_trac: f64,
    pub p_bat: f64,
    pub p_eng: f64,
    /// Demand neither source could cover, W.
    pub unmet: f64,
    /// Braking power dissipated by friction brakes, W.
    pub friction: f64,
}

/// Prediction model used by the MPC controllers.
///
/// Fuel is `alpha(T) * (idle * r(P/eps) + slope * P)` with `r(x) = x (2 - x)`
/// on `[0, 1]`, so the engine on/off jump becomes a steep but differentiable
/// ramp of width `on_off_width`. The ramp is concave: a small engine power is
/// never cheaper than switching off or running at `eps`, as with the real
/// jump. A width of zero reproduces the exact map.
#[derive(Debug, Clone)]
pub struct PredictionModel<'a> {
    pub vehicle: &'a VehicleParams,
    pub on_off_width: f64,
}

impl<'a> PredictionModel<'a> {
    pub const DEFAULT_ON_OFF_WIDTH: f64 = 200.0;

    pub fn new(vehicle: &'a VehicleParams) -> Self {
        Self {
            vehicle,
            on_off_width: Self::DEFAULT_ON_OFF_WIDTH,
        }
    }

    /// Nominal (alpha = 1) fuel flow and its derivative in engine power.
    ///
    /// At `p_eng = 0` the derivative is the one from above: admissible
    /// controls never make the engine power negative, so that is the side
    /// the optimizer sees.
    pub fn nominal_fuel(&self, p_eng: f64) -> (f64, f64) {
        let em = &self.vehicle.engine;
        if p_eng < 0.0 {
            return (0.0, 0.0);
        }
        let eps = self.on_off_width;
        if eps <= 0.0 || p_eng >= eps {
            let idle = if p_eng > 0.0 { em.idle_fuel_rate } else { 0.0 };
            return (idle + em.willans_slope * p_eng, em.willans_slope);
        }
        let x = p_eng / eps;
        let s = x * (2.0 - x);
        let ds = (2.0 - 2.0 * x) / eps;
        (
            em.idle_fuel_rate * s + em.willans_slope * p_eng,
            em.idle_fuel_rate * ds + em.willans_slope,
        )
    }
}

impl StageModel for PredictionModel<'_> {
    fn control_bounds(&self, node: &HorizonNode) -> (f64, f64) {
        self.vehicle.traction_bounds(node.power_demand)
    }

    fn evaluate(
        &self,
        node: &HorizonNode,
        state: &PlantState,
        u: f64,
    ) -> Result<StageEval, PlantError> {
        let v = self.vehicle;
        let dt = node.duration;
        let demand = node.power_demand;
        let raw_eng = demand - u;
        let (p_eng, deng_du) = if raw_eng >= 0.0 {
            (raw_eng.min(v.engine.p_eng_max), if raw_eng < v.engine.p_eng_max { -1.0 } else { 0.0 })
        } else {
            (0.0, 0.0)
        };
        let p_bat = u + v.road_load.aux_power;
        let (phi, dphi) = self.nominal_fuel(p_eng);
        let (alpha, dalpha) = v.alpha.eval_with_slope(state.t_cl);
        let fuel = alpha * phi;
        let dfuel_dt = dalpha * phi;
        let dfuel_du = alpha * dphi * deng_du;

        let input = PlantInput {
            p_bat,
            p_eng,
            fuel_rate: fuel,
            vehicle_speed: node.speed,
        };
        let out = plant::step(*state, &input, dt, &v.battery, &v.thermal)?;
        let (_, ds_ds, ds_dp) = plant::soc_derivative_partials(state.soc, p_bat, &v.battery)?;
        let (dt_dt, dt_dfuel, dt_deng) = plant::coolant_derivative_partials(node.speed, &v.thermal);

        Ok(StageEval {
            next: out.state,
            cost: fuel * dt,
            dx: [
                [1.0 + dt * ds_ds, 0.0],
                [0.0, 1.0 + dt * (dt_dt + dt_dfuel * dfuel_dt)],
            ],
            du: [dt * ds_dp, dt * (dt_dfuel * dfuel_du + dt_deng * deng_du)],
            cost_dx: [0.0, dt * dfuel_dt],
            cost_du: dt * dfuel_du,
        })
    }
}
