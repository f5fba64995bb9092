//! Static powertrain characterizations: engine fuel map along the optimal
//! operating line, the cold-coolant fuel multiplier, and the road-load model.
//!
//! Map files use the text table format of [`crate::table`]:
//! * operating line: three columns `power_W  speed_rad_s  torque_Nm`
//! * fuel multiplier: two columns `coolant_temp_C  multiplier`

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{read_rows, read_table1d, Table1D, TableError};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("engine power {p_eng:.1} W outside [0, {p_max:.1}] W")]
    PowerOutOfRange { p_eng: f64, p_max: f64 },
    #[error("invalid map: {0}")]
    Invalid(String),
    #[error(transparent)]
    Table(#[from] TableError),
}

/// One row of the optimal operating line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OolRow {
    pub power: f64,
    pub speed: f64,
    pub torque: f64,
}

/// Engine characterization along its optimal operating line, with a Willans
/// line standing in for the BSFC map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineMap {
    pub p_eng_max: f64,
    /// Fuel flow at the lowest firing load, kg/s.
    pub idle_fuel_rate: f64,
    /// Marginal fuel per unit of output energy, kg/J.
    pub willans_slope: f64,
    pub ool_table: Vec<OolRow>,
}

impl Default for EngineMap {
    fn default() -> Self {
        let p_eng_max = 70_000.0;
        Self {
            p_eng_max,
            idle_fuel_rate: 1.0e-4,
            willans_slope: 6.0e-8,
            ool_table: default_ool_table(p_eng_max),
        }
    }
}

/// Operating line with engine speed rising linearly from 1000 rpm at light
/// load to 5200 rpm at rated power; torque follows from `P / omega`.
pub fn default_ool_table(p_eng_max: f64) -> Vec<OolRow> {
    let rpm = std::f64::consts::PI / 30.0;
    let (w_lo, w_hi) = (1000.0 * rpm, 5200.0 * rpm);
    let rows = 15;
    (0..rows)
        .map(|i| {
            let frac = i as f64 / (rows - 1) as f64;
            let power = frac * p_eng_max;
            let speed = w_lo + frac * (w_hi - w_lo);
            OolRow {
                power,
                speed,
                torque: power / speed,
            }
        })
        .collect()
}

impl EngineMap {
    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: &str| Err(MapError::Invalid(m.to_string()));
        if !(self.p_eng_max > 0.0) {
            return bad("p_eng_max must be positive");
        }
        if !(self.idle_fuel_rate >= 0.0 && self.willans_slope > 0.0) {
            return bad("fuel line must have non-negative offset and positive slope");
        }
        let t = &self.ool_table;
        if t.len() < 2 {
            return bad("operating line needs at least two rows");
        }
        if t[0].power > 0.0 || t[t.len() - 1].power < self.p_eng_max {
            return bad("operating line must cover [0, p_eng_max]");
        }
        for (i, row) in t.iter().enumerate() {
            if i > 0 && row.power <= t[i - 1].power {
                return bad("operating-line powers must increase");
            }
            if row.speed < 0.0 || row.torque < 0.0 {
                return bad("operating-line speed and torque must be non-negative");
            }
            let product = row.speed * row.torque;
            if (product - row.power).abs() > 0.01 * row.power.max(1e-9) && row.power > 0.0 {
                return Err(MapError::Invalid(format!(
                    "operating-line row {i}: speed*torque = {product:.1} W vs power {:.1} W",
                    row.power
                )));
            }
        }
        Ok(())
    }

    /// Replaces the operating line with one read from a three-column table.
    pub fn load_ool<R: BufRead>(&mut self, reader: R) -> Result<(), MapError> {
        let rows = read_rows(reader, 3)?;
        self.ool_table = rows
            .into_iter()
            .map(|r| OolRow {
                power: r[0],
                speed: r[1],
                torque: r[2],
            })
            .collect();
        self.validate()
    }

    fn check_power(&self, p_eng: f64) -> Result<(), MapError> {
        // small tolerance absorbs round-off from the power split
        if !(p_eng >= 0.0 && p_eng <= self.p_eng_max * (1.0 + 1e-12)) {
            return Err(MapError::PowerOutOfRange {
                p_eng,
                p_max: self.p_eng_max,
            });
        }
        Ok(())
    }

    /// Engine speed (rad/s) and torque (N·m) on the operating line.
    ///
    /// Speed is interpolated linearly between rows and torque is `P / omega`,
    /// so the delivered power is exact between knots; tabulated rows are
    /// returned verbatim.
    pub fn ool_point(&self, p_eng: f64) -> Result<(f64, f64), MapError> {
        self.check_power(p_eng)?;
        let t = &self.ool_table;
        let i = t.partition_point(|r| r.power <= p_eng);
        if i > 0 && t[i - 1].power == p_eng {
            return Ok((t[i - 1].speed, t[i - 1].torque));
        }
        let i = i.clamp(1, t.len() - 1);
        let (a, b) = (t[i - 1], t[i]);
        let frac = (p_eng - a.power) / (b.power - a.power);
        let speed = a.speed + frac * (b.speed - a.speed);
        let torque = if speed > 0.0 { p_eng / speed } else { 0.0 };
        Ok((speed, torque))
    }
}

/// Nominal fuel flow (kg/s): zero with the engine off, otherwise the Willans
/// line `idle + slope * P`.
pub fn nominal_fuel_rate(p_eng: f64, em: &EngineMap) -> Result<f64, MapError> {
    em.check_power(p_eng)?;
    if p_eng == 0.0 {
        return Ok(0.0);
    }
    Ok(em.idle_fuel_rate + em.willans_slope * p_eng)
}

/// Multiplier on nominal fuel flow for a cold coolant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlphaCurve {
    pub breakpoints: Table1D,
    pub warm_threshold: f64,
}

impl Default for AlphaCurve {
    fn default() -> Self {
        Self {
            breakpoints: Table1D::new(vec![
                (-20.0, 1.35),
                (20.0, 1.13),
                (50.0, 1.05),
                (70.0, 1.0),
            ])
            .expect("static breakpoints are sorted"),
            warm_threshold: 70.0,
        }
    }
}

impl AlphaCurve {
    /// Multiplier identically one.
    pub fn unity() -> Self {
        Self {
            breakpoints: Table1D::constant(1.0),
            warm_threshold: f64::NEG_INFINITY,
        }
    }

    pub fn from_reader<R: BufRead>(reader: R, warm_threshold: f64) -> Result<Self, MapError> {
        let curve = Self {
            breakpoints: read_table1d(reader)?,
            warm_threshold,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let ys = self.breakpoints.ys();
        if ys.iter().any(|&y| y < 1.0) {
            return Err(MapError::Invalid("fuel multiplier must be >= 1".into()));
        }
        if ys.windows(2).any(|w| w[1] > w[0]) {
            return Err(MapError::Invalid(
                "fuel multiplier must not increase with temperature".into(),
            ));
        }
        for (t, y) in self.breakpoints.points() {
            if t >= self.warm_threshold && y != 1.0 {
                return Err(MapError::Invalid(
                    "fuel multiplier must be 1 at and above the warm threshold".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn eval(&self, t_cl: f64) -> f64 {
        self.eval_with_slope(t_cl).0
    }

    pub fn eval_with_slope(&self, t_cl: f64) -> (f64, f64) {
        if t_cl >= self.warm_threshold {
            return (1.0, 0.0);
        }
        self.breakpoints.eval_with_slope(t_cl)
    }
}

/// Temperature-corrected fuel flow: `alpha(T_cl) * nominal(P_eng)`.
pub fn corrected_fuel_rate(
    p_eng: f64,
    t_cl: f64,
    em: &EngineMap,
    ac: &AlphaCurve,
) -> Result<f64, MapError> {
    Ok(ac.eval(t_cl) * nominal_fuel_rate(p_eng, em)?)
}

/// Longitudinal road-load model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadLoadParams {
    pub mass: f64,
    pub rolling_coeff: f64,
    /// Drag coefficient times frontal area, m².
    pub drag_area: f64,
    pub air_density: f64,
    pub driveline_eff: f64,
    /// Largest regenerative braking power, W (positive number).
    pub regen_power_cap: f64,
    /// Electrical auxiliary load on the battery, W.
    pub aux_power: f64,
}

impl Default for RoadLoadParams {
    fn default() -> Self {
        Self {
            mass: 1500.0,
            rolling_coeff: 0.009,
            drag_area: 0.58,
            air_density: 1.2,
            driveline_eff: 0.92,
            regen_power_cap: 25_000.0,
            aux_power: 300.0,
        }
    }
}

impl RoadLoadParams {
    pub fn validate(&self) -> Result<(), MapError> {
        let positive = self.mass > 0.0
            && self.rolling_coeff > 0.0
            && self.drag_area > 0.0
            && self.air_density > 0.0;
        if !positive {
            return Err(MapError::Invalid("road-load coefficients must be positive".into()));
        }
        if !(self.driveline_eff > 0.0 && self.driveline_eff <= 1.0) {
            return Err(MapError::Invalid("driveline efficiency must lie in (0, 1]".into()));
        }
        if !(self.regen_power_cap >= 0.0 && self.aux_power >= 0.0) {
            return Err(MapError::Invalid(
                "regen cap and aux power must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Traction power demand at the wheels (W), positive when propelling.
///
/// Braking power is recovered up to `regen_power_cap`; friction brakes take
/// the rest. Auxiliary load is not included.
pub fn power_demand(speed: f64, accel: f64, rl: &RoadLoadParams) -> f64 {
    let force = rl.mass * accel
        + rl.mass * GRAVITY * rl.rolling_coeff
        + 0.5 * rl.air_density * rl.drag_area * speed * speed;
    let wheel = speed * force;
    if wheel >= 0.0 {
        wheel / rl.driveline_eff
    } else {
        (wheel * rl.driveline_eff).max(-rl.regen_power_cap)
    }
}
