//! Two-state plant: battery state of charge and engine coolant temperature.
//!
//! Sign convention: battery power `p_bat` is positive when the battery
//! discharges. A discharging battery therefore has a negative SOC rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::Table1D;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("battery power {p_bat:.1} W exceeds the deliverable limit {limit:.1} W")]
    InfeasiblePower { p_bat: f64, limit: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Equivalent-circuit battery: open-circuit voltage and internal resistance as
/// functions of SOC, plus the usable power box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatteryParams {
    pub capacity_coulombs: f64,
    pub open_circuit_voltage: Table1D,
    pub internal_resistance: Table1D,
    /// Most negative (charging) battery power, W.
    pub p_bat_min: f64,
    /// Largest discharge power, W.
    pub p_bat_max: f64,
}

impl Default for BatteryParams {
    fn default() -> Self {
        Self {
            // 6.5 Ah pack
            capacity_coulombs: 6.5 * 3600.0,
            open_circuit_voltage: Table1D::constant(201.6),
            internal_resistance: Table1D::constant(0.373),
            p_bat_min: -21_000.0,
            p_bat_max: 21_000.0,
        }
    }
}

impl BatteryParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: &str| Err(PlantError::InvalidParameter(m.to_string()));
        if !(self.capacity_coulombs > 0.0) {
            return bad("battery capacity must be positive");
        }
        if !(self.open_circuit_voltage.min_value() > 0.0) {
            return bad("open-circuit voltage must be positive");
        }
        if !(self.internal_resistance.min_value() > 0.0) {
            return bad("internal resistance must be positive");
        }
        if !(self.p_bat_min < 0.0 && 0.0 < self.p_bat_max) {
            return bad("battery power box must straddle zero");
        }
        Ok(())
    }

    /// Largest discharge power the circuit can deliver at `soc` (discriminant zero).
    pub fn power_limit(&self, soc: f64) -> f64 {
        let u = self.open_circuit_voltage.eval(soc);
        let r = self.internal_resistance.eval(soc);
        u * u / (4.0 * r)
    }

    /// Smallest [`Self::power_limit`] over the whole SOC range.
    pub fn min_power_limit(&self) -> f64 {
        let u = self.open_circuit_voltage.min_value();
        let r = self.internal_resistance.max_value();
        u * u / (4.0 * r)
    }
}

/// Lumped coolant thermal model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThermalParams {
    /// Equivalent thermal mass times heat capacity, J/°C.
    pub thermal_mass_capacity: f64,
    /// Fuel lower heating value, J/kg.
    pub lower_heating_value: f64,
    /// Share of fuel heat leaving with the exhaust.
    pub exhaust_fraction: f64,
    /// Convective loss coefficient at standstill, W/°C.
    pub air_conv_coeff_base: f64,
    /// Additional convective loss per m/s of vehicle speed, W/°C/(m/s).
    pub air_conv_coeff_speed: f64,
    pub ambient_temp: f64,
    /// Cabin heating draw from the coolant, W.
    pub heating_demand: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            thermal_mass_capacity: 150_000.0,
            lower_heating_value: 44.0e6,
            exhaust_fraction: 0.30,
            air_conv_coeff_base: 10.0,
            air_conv_coeff_speed: 2.5,
            ambient_temp: -7.0,
            heating_demand: 1500.0,
        }
    }
}

impl ThermalParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: &str| Err(PlantError::InvalidParameter(m.to_string()));
        if !(self.thermal_mass_capacity > 0.0) {
            return bad("thermal mass capacity must be positive");
        }
        if !(self.lower_heating_value > 0.0) {
            return bad("lower heating value must be positive");
        }
        if !(0.0..1.0).contains(&self.exhaust_fraction) {
            return bad("exhaust fraction must lie in [0, 1)");
        }
        if !(self.air_conv_coeff_base >= 0.0 && self.air_conv_coeff_speed >= 0.0) {
            return bad("convection coefficients must be non-negative");
        }
        if !(self.heating_demand >= 0.0) || !self.ambient_temp.is_finite() {
            return bad("heating demand must be non-negative and ambient finite");
        }
        Ok(())
    }

    /// Convective conductance at `speed`, W/°C.
    pub fn convection(&self, speed: f64) -> f64 {
        self.air_conv_coeff_base + self.air_conv_coeff_speed * speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub soc: f64,
    /// Coolant temperature, °C.
    pub t_cl: f64,
}

impl PlantState {
    pub fn new(soc: f64, t_cl: f64) -> Self {
        Self { soc, t_cl }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantInput {
    /// Battery electrical power including auxiliaries, W (discharge positive).
    pub p_bat: f64,
    /// Engine mechanical output, W.
    pub p_eng: f64,
    /// Fuel mass flow, kg/s.
    pub fuel_rate: f64,
    /// Vehicle speed, m/s.
    pub vehicle_speed: f64,
}

/// Result of one integration step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: PlantState,
    /// The SOC update left [0, 1] and was clamped.
    pub soc_saturated: bool,
}

/// SOC rate (1/s) of the equivalent-circuit model.
pub fn soc_derivative(soc: f64, p_bat: f64, bp: &BatteryParams) -> Result<f64, PlantError> {
    soc_derivative_partials(soc, p_bat, bp).map(|(rate, _, _)| rate)
}

/// SOC rate with its partial derivatives `(rate, d/dsoc, d/dp_bat)`.
///
/// At the discriminant-zero boundary the power derivative is infinite.
pub fn soc_derivative_partials(
    soc: f64,
    p_bat: f64,
    bp: &BatteryParams,
) -> Result<(f64, f64, f64), PlantError> {
    let (u, du) = bp.open_circuit_voltage.eval_with_slope(soc);
    let (r, dr) = bp.internal_resistance.eval_with_slope(soc);
    let c = bp.capacity_coulombs;
    let disc = u * u - 4.0 * r * p_bat;
    if disc < 0.0 {
        return Err(PlantError::InfeasiblePower {
            p_bat,
            limit: u * u / (4.0 * r),
        });
    }
    let root = disc.sqrt();
    let rate = -(u - root) / (2.0 * r * c);
    let d_p = if root > 0.0 {
        -1.0 / (c * root)
    } else {
        f64::NEG_INFINITY
    };
    // d/dsoc through U_oc(soc) and R_int(soc)
    let d_soc = if du == 0.0 && dr == 0.0 {
        0.0
    } else if root > 0.0 {
        let d_root = (2.0 * u * du - 4.0 * dr * p_bat) / (2.0 * root);
        let num = u - root;
        let d_num = du - d_root;
        -(d_num * r - num * dr) / (2.0 * r * r * c)
    } else {
        0.0
    };
    Ok((rate, d_soc, d_p))
}

/// Coolant temperature rate (°C/s).
pub fn coolant_derivative(
    t_cl: f64,
    fuel_rate: f64,
    p_eng: f64,
    speed: f64,
    tp: &ThermalParams,
) -> f64 {
    let q_fuel = tp.lower_heating_value * fuel_rate;
    let q_exh = tp.exhaust_fraction * q_fuel;
    let q_air = tp.convection(speed) * (t_cl - tp.ambient_temp);
    (q_fuel - p_eng - q_exh - q_air - tp.heating_demand) / tp.thermal_mass_capacity
}

/// Partial derivatives of [`coolant_derivative`]: `(d/dt_cl, d/dfuel_rate, d/dp_eng)`.
pub fn coolant_derivative_partials(speed: f64, tp: &ThermalParams) -> (f64, f64, f64) {
    let mc = tp.thermal_mass_capacity;
    (
        -tp.convection(speed) / mc,
        tp.lower_heating_value * (1.0 - tp.exhaust_fraction) / mc,
        -1.0 / mc,
    )
}

/// Forward-Euler update of both states over `dt` seconds.
pub fn step(
    state: PlantState,
    input: &PlantInput,
    dt: f64,
    bp: &BatteryParams,
    tp: &ThermalParams,
) -> Result<StepOutcome, PlantError> {
    if !(dt > 0.0) {
        return Err(PlantError::InvalidParameter(format!(
            "step size must be positive, got {dt}"
        )));
    }
    let dsoc = soc_derivative(state.soc, input.p_bat, bp)?;
    let dtcl = coolant_derivative(
        state.t_cl,
        input.fuel_rate,
        input.p_eng,
        input.vehicle_speed,
        tp,
    );
    let raw_soc = state.soc + dt * dsoc;
    let soc = raw_soc.clamp(0.0, 1.0);
    Ok(StepOutcome {
        state: PlantState {
            soc,
            t_cl: state.t_cl + dt * dtcl,
        },
        soc_saturated: soc != raw_soc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn battery(u: f64, r: f64, c: f64) -> BatteryParams {
        BatteryParams {
            capacity_coulombs: c,
            open_circuit_voltage: Table1D::constant(u),
            internal_resistance: Table1D::constant(r),
            ..BatteryParams::default()
        }
    }

    #[test]
    fn zero_power_gives_zero_rate() {
        let bp = BatteryParams::default();
        assert_eq!(soc_derivative(0.6, 0.0, &bp).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_discharge_rate() {
        // (300 - sqrt(300^2 - 4*0.1*1e4)) / (2*0.1*23400), evaluated by hand
        let bp = battery(300.0, 0.1, 23_400.0);
        let rate = soc_derivative(0.5, 10_000.0, &bp).unwrap();
        assert!(rate < 0.0);
        assert!((rate.abs() - 1.440_691_03e-3).abs() < 1e-11, "{rate}");
    }

    #[test]
    fn discriminant_zero_boundary() {
        let (u, r, c) = (300.0, 0.1, 23_400.0);
        let bp = battery(u, r, c);
        let p = u * u / (4.0 * r);
        let rate = soc_derivative(0.5, p, &bp).unwrap();
        assert!((rate.abs() - u / (2.0 * r * c)).abs() < 1e-15);
        assert!(matches!(
            soc_derivative(0.5, p * 1.0001, &bp),
            Err(PlantError::InfeasiblePower { .. })
        ));
    }

    #[test]
    fn coolant_rate_examples() {
        let mut tp = ThermalParams {
            heating_demand: 0.0,
            ..ThermalParams::default()
        };
        assert_eq!(coolant_derivative(tp.ambient_temp, 0.0, 0.0, 5.0, &tp), 0.0);

        tp.heating_demand = 1500.0;
        tp.thermal_mass_capacity = 150_000.0;
        let r = coolant_derivative(tp.ambient_temp, 0.0, 0.0, 5.0, &tp);
        assert!((r + 0.01).abs() < 1e-15);

        // constructed steady state: Q_fuel (1 - x) = P_eng + Q_air + Q_heat
        let (t, speed, p_eng) = (80.0, 12.0, 15_000.0);
        let q_air = tp.convection(speed) * (t - tp.ambient_temp);
        let fuel = (p_eng + q_air + tp.heating_demand)
            / (tp.lower_heating_value * (1.0 - tp.exhaust_fraction));
        assert!(coolant_derivative(t, fuel, p_eng, speed, &tp).abs() < 1e-12);
    }

    #[test]
    fn step_without_input_is_stationary() {
        let tp = ThermalParams {
            heating_demand: 0.0,
            ..ThermalParams::default()
        };
        let bp = BatteryParams::default();
        let s = PlantState::new(0.63, tp.ambient_temp);
        let out = step(s, &PlantInput::default(), 1.0, &bp, &tp).unwrap();
        assert_eq!(out.state, s);
        assert!(!out.soc_saturated);
    }

    #[test]
    fn step_reports_saturation() {
        let bp = battery(201.6, 0.373, 100.0);
        let tp = ThermalParams::default();
        let s = PlantState::new(0.8, 60.0);
        let input = PlantInput {
            p_bat: -20_000.0,
            ..PlantInput::default()
        };
        let out = step(s, &input, 1.0, &bp, &tp).unwrap();
        assert_eq!(out.state.soc, 1.0);
        assert!(out.soc_saturated);
    }

    #[test]
    fn halving_the_step_agrees_to_first_order() {
        let bp = battery(300.0, 0.1, 23_400.0);
        let tp = ThermalParams::default();
        let input = PlantInput {
            p_bat: 10_000.0,
            p_eng: 12_000.0,
            fuel_rate: 1.0e-3,
            vehicle_speed: 15.0,
        };
        let s0 = PlantState::new(0.6, 60.0);
        let one = step(s0, &input, 1.0, &bp, &tp).unwrap().state;
        let half = step(s0, &input, 0.5, &bp, &tp).unwrap().state;
        let two = step(half, &input, 0.5, &bp, &tp).unwrap().state;
        assert!((one.soc - two.soc).abs() < 1e-3);
        assert!((one.t_cl - two.t_cl).abs() < 1e-2);
    }

    #[test]
    fn euler_error_converges_at_first_order() {
        // SOC-dependent voltage makes the SOC dynamics genuinely nonlinear
        let bp = BatteryParams {
            open_circuit_voltage: Table1D::new(vec![(0.0, 180.0), (1.0, 220.0)]).unwrap(),
            ..BatteryParams::default()
        };
        let tp = ThermalParams::default();
        let input = PlantInput {
            p_bat: 15_000.0,
            p_eng: 10_000.0,
            fuel_rate: 8e-4,
            vehicle_speed: 10.0,
        };
        let integrate = |dt: f64, horizon: f64| {
            let mut s = PlantState::new(0.7, 55.0);
            for _ in 0..(horizon / dt).round() as usize {
                s = step(s, &input, dt, &bp, &tp).unwrap().state;
            }
            s
        };
        let reference = integrate(1.0 / 4096.0, 40.0);
        let errs: Vec<f64> = [1.0, 0.5, 0.25, 0.125]
            .iter()
            .map(|&dt| {
                let s = integrate(dt, 40.0);
                (s.t_cl - reference.t_cl).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.7..2.3).contains(&ratio), "ratio {ratio}, errs {errs:?}");
        }
    }

    #[test]
    fn coolant_balance_closes_over_a_step() {
        // LHV*fuel*dt = P_eng*dt + M*C*dT + Q_exh*dt + Q_air*dt + Q_heat*dt
        let tp = ThermalParams::default();
        let bp = BatteryParams::default();
        let input = PlantInput {
            p_bat: 0.0,
            p_eng: 18_000.0,
            fuel_rate: 1.2e-3,
            vehicle_speed: 20.0,
        };
        let s0 = PlantState::new(0.6, 62.0);
        let dt = 1.0;
        let s1 = step(s0, &input, dt, &bp, &tp).unwrap().state;
        let q_fuel = tp.lower_heating_value * input.fuel_rate * dt;
        let stored = tp.thermal_mass_capacity * (s1.t_cl - s0.t_cl);
        let out = input.p_eng * dt
            + tp.exhaust_fraction * q_fuel
            + tp.convection(input.vehicle_speed) * (s0.t_cl - tp.ambient_temp) * dt
            + tp.heating_demand * dt;
        assert!((q_fuel - stored - out).abs() < 1e-6 * q_fuel);
    }

    proptest! {
        #[test]
        fn soc_rate_decreases_with_power(soc in 0.0f64..1.0, p in -20_000.0f64..20_000.0, dp in 1.0f64..5_000.0) {
            let bp = BatteryParams::default();
            let a = soc_derivative(soc, p, &bp).unwrap();
            let b = soc_derivative(soc, (p + dp).min(bp.power_limit(soc)), &bp).unwrap();
            prop_assert!(b <= a);
        }

        #[test]
        fn coolant_rate_is_affine_in_temperature(t in 0.0f64..100.0, speed in 0.0f64..35.0) {
            let tp = ThermalParams::default();
            let h = 1e-3;
            let f = |t| coolant_derivative(t, 5e-4, 6_000.0, speed, &tp);
            let slope = (f(t + h) - f(t - h)) / (2.0 * h);
            let (d_t, _, _) = coolant_derivative_partials(speed, &tp);
            prop_assert!(slope < 0.0);
            prop_assert!((slope - d_t).abs() < 1e-9);
        }

        #[test]
        fn soc_partials_match_finite_differences(soc in 0.05f64..0.95, p in -15_000.0f64..15_000.0) {
            let bp = BatteryParams {
                open_circuit_voltage: Table1D::new(vec![(0.0, 180.0), (1.0, 225.0)]).unwrap(),
                internal_resistance: Table1D::new(vec![(0.0, 0.45), (1.0, 0.33)]).unwrap(),
                ..BatteryParams::default()
            };
            let (_, d_soc, d_p) = soc_derivative_partials(soc, p, &bp).unwrap();
            let h = 1e-6;
            let fs = (soc_derivative(soc + h, p, &bp).unwrap() - soc_derivative(soc - h, p, &bp).unwrap()) / (2.0 * h);
            let hp = 1e-2;
            let fp = (soc_derivative(soc, p + hp, &bp).unwrap() - soc_derivative(soc, p - hp, &bp).unwrap()) / (2.0 * hp);
            // cancellation in U - sqrt(..) leaves ~1e-12 absolute error in fs
            prop_assert!((fs - d_soc).abs() <= 1e-6 * fs.abs() + 1e-11);
            prop_assert!((fp - d_p).abs() <= 1e-6 * fp.abs());
        }
    }
}
