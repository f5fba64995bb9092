//! Run metrics, conservation audit, comparison tables and trajectory files.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::nlp::StateBounds;
use crate::plant::{coolant_derivative, soc_derivative};
use crate::powertrain::VehicleParams;

use super::sim::{Row, Trajectory};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveTimeStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl SolveTimeStats {
    pub fn from_samples(samples: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut min, mut max) = (0usize, 0.0, f64::INFINITY, 0.0f64);
        for s in samples {
            n += 1;
            sum += s;
            min = min.min(s);
            max = max.max(s);
        }
        if n == 0 {
            return Self::default();
        }
        Self {
            min,
            mean: sum / n as f64,
            max,
        }
    }
}

/// Energy and charge bookkeeping rebuilt from the logged rows. Residuals
/// compare the logged state changes with the sum of per-step increments and
/// should sit at rounding level.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConservationAudit {
    /// Battery terminal energy delivered (positive power), J.
    pub battery_out: f64,
    /// Battery terminal energy absorbed (negative power), J.
    pub battery_in: f64,
    /// Resistive loss inside the battery, J.
    pub battery_loss: f64,
    /// Charge balance, C: capacity times SOC change minus summed current.
    pub charge_residual: f64,
    /// Open-circuit energy minus terminal energy and loss, J.
    pub battery_energy_residual: f64,
    /// Fuel chemical energy, J.
    pub fuel_energy: f64,
    pub engine_work: f64,
    /// Heat stored in the coolant, J.
    pub thermal_storage: f64,
    /// Stored heat minus the summed heat flows, J.
    pub thermal_residual: f64,
    /// Traction demand minus what battery, engine and brakes provided, J.
    pub drive_residual: f64,
}

impl ConservationAudit {
    pub fn compute(traj: &Trajectory, vehicle: &VehicleParams) -> Self {
        let bp = &vehicle.battery;
        let tp = &vehicle.thermal;
        let aux = vehicle.road_load.aux_power;
        let q = bp.capacity_coulombs;
        let mut a = Self::default();
        let mut current_sum = 0.0;
        let mut heat_sum = 0.0;
        let mut supplied = 0.0;
        let mut demanded = 0.0;
        for r in traj.steps() {
            if r.p_bat >= 0.0 {
                a.battery_out += r.p_bat;
            } else {
                a.battery_in -= r.p_bat;
            }
            // discharge current from the SOC rate of the equivalent circuit
            let i = -soc_derivative(r.soc, r.p_bat, bp).unwrap_or(0.0) * q;
            let u = bp.open_circuit_voltage.eval(r.soc);
            let res = bp.internal_resistance.eval(r.soc);
            current_sum += i;
            a.battery_loss += i * i * res;
            a.battery_energy_residual += u * i - r.p_bat - i * i * res;
            a.fuel_energy += r.fuel_rate * tp.lower_heating_value;
            a.engine_work += r.p_eng;
            heat_sum += coolant_derivative(r.t_cl, r.fuel_rate, r.p_eng, r.speed, tp) * tp.thermal_mass_capacity;
            supplied += r.p_bat - aux + r.p_eng;
            demanded += r.demand;
        }
        let first = traj.rows.first().expect("trajectory has rows");
        let last = traj.rows.last().expect("trajectory has rows");
        a.charge_residual = q * (first.soc - last.soc) - current_sum;
        a.thermal_storage = tp.thermal_mass_capacity * (last.t_cl - first.t_cl);
        a.thermal_residual = a.thermal_storage - heat_sum;
        a.drive_residual = demanded - (supplied + traj.unmet_energy - traj.friction_energy);
        a
    }

    /// Largest residual relative to the energy or charge it reconciles.
    pub fn worst_relative(&self, capacity: f64) -> f64 {
        let scale_e = (self.battery_out + self.battery_in).max(1.0);
        [
            self.charge_residual.abs() / capacity,
            self.battery_energy_residual.abs() / scale_e,
            self.thermal_residual.abs() / self.fuel_energy.max(self.thermal_storage.abs()).max(1.0),
            self.drive_residual.abs() / (scale_e + self.engine_work).max(1.0),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub controller: String,
    pub cycle: String,
    pub seed: u64,
    pub steps: usize,
    /// kg
    pub total_fuel: f64,
    /// Reference the saving is measured against, when compared.
    pub reference_label: Option<String>,
    /// Percent fuel saved relative to the reference.
    pub fuel_saving: Option<f64>,
    pub soc_init: f64,
    pub terminal_soc: f64,
    /// Terminal SOC minus initial SOC.
    pub terminal_soc_error: f64,
    /// Peak-to-peak SOC over the run.
    pub soc_range: f64,
    pub t_cl_min: f64,
    pub t_cl_max: f64,
    /// Integral of the SOC box violation, s.
    pub soc_violation: f64,
    /// Integral of the coolant box violation, °C·s.
    pub t_cl_violation: f64,
    pub solve_time: SolveTimeStats,
    pub relaxed_steps: usize,
    pub fallback_steps: usize,
    pub clipped_steps: usize,
    /// J
    pub unmet_energy: f64,
    /// J
    pub friction_energy: f64,
    pub audit: ConservationAudit,
    pub trajectory_file: Option<String>,
    /// Whether a DP run reused a cached policy.
    pub dp_cache_hit: Option<bool>,
}

fn violation(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(0.0) + (x - hi).max(0.0)
}

impl RunReport {
    pub fn from_trajectory(
        traj: &Trajectory,
        vehicle: &VehicleParams,
        bounds: &StateBounds,
        seed: u64,
    ) -> Self {
        let rows = &traj.rows;
        let soc_init = rows[0].soc;
        let end = traj.final_state();
        let (mut smin, mut smax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut sv, mut tv) = (0.0, 0.0);
        // states at the end of each step; the initial state is given
        for r in &rows[1..] {
            sv += violation(r.soc, bounds.soc_min, bounds.soc_max);
            tv += violation(r.t_cl, bounds.t_cl_min, bounds.t_cl_max);
        }
        for r in rows {
            smin = smin.min(r.soc);
            smax = smax.max(r.soc);
            tmin = tmin.min(r.t_cl);
            tmax = tmax.max(r.t_cl);
        }
        Self {
            label: traj.label.clone(),
            controller: traj.label.clone(),
            cycle: traj.cycle.clone(),
            seed,
            steps: traj.steps().len(),
            total_fuel: traj.total_fuel(),
            reference_label: None,
            fuel_saving: None,
            soc_init,
            terminal_soc: end.soc,
            terminal_soc_error: end.soc - soc_init,
            soc_range: smax - smin,
            t_cl_min: tmin,
            t_cl_max: tmax,
            soc_violation: sv,
            t_cl_violation: tv,
            solve_time: SolveTimeStats::from_samples(traj.solve_times()),
            relaxed_steps: traj.relaxed_steps,
            fallback_steps: traj.fallback_steps,
            clipped_steps: traj.clipped_steps,
            unmet_energy: traj.unmet_energy,
            friction_energy: traj.friction_energy,
            audit: ConservationAudit::compute(traj, vehicle),
            trajectory_file: None,
            dp_cache_hit: None,
        }
    }

    /// Recomputes the totals from trajectory rows read back from disk.
    pub fn check_rows(&self, rows: &[Row]) -> Result<(), String> {
        if rows.len() != self.steps + 1 {
            return Err(format!("{} rows for {} steps", rows.len(), self.steps));
        }
        let fuel: f64 = rows[..self.steps].iter().map(|r| r.fuel_rate).sum();
        if fuel != self.total_fuel {
            return Err(format!("fuel {fuel} in file, {} in report", self.total_fuel));
        }
        let end = rows[self.steps].soc;
        if end != self.terminal_soc {
            return Err(format!("terminal SOC {end} in file, {} in report", self.terminal_soc));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(format!("report: {e}")))
    }
}

pub const TRAJECTORY_HEADER: &str = "t,v,P_d,p_bat,p_eng,fuel_rate,soc,t_cl,solve_time,status";

/// Writes the trajectory CSV. Numbers use the shortest representation that
/// reads back to the same value. Solve times are written only when
/// `with_timing` is set, as they differ from run to run.
pub fn write_trajectory<W: Write>(mut w: W, rows: &[Row], with_timing: bool) -> std::io::Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in rows {
        let st = if with_timing { r.solve_time } else { 0.0 };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            r.t, r.speed, r.demand, r.p_bat, r.p_eng, r.fuel_rate, r.soc, r.t_cl, st, r.status
        )?;
    }
    w.flush()
}

pub fn read_trajectory<R: BufRead>(r: R) -> Result<Vec<Row>, HarnessError> {
    let mut rows = Vec::new();
    let mut lines = r.lines();
    let bad = |m: String| HarnessError::Config(format!("trajectory file: {m}"));
    match lines.next() {
        Some(Ok(h)) if h.trim() == TRAJECTORY_HEADER => {}
        _ => return Err(bad("missing header".into())),
    }
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| bad(e.to_string()))?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(bad(format!("line {}: expected 10 fields", n + 2)));
        }
        let num = |i: usize| -> Result<f64, HarnessError> {
            f[i].parse().map_err(|_| bad(format!("line {}: bad number {:?}", n + 2, f[i])))
        };
        rows.push(Row {
            t: f[0].parse().map_err(|_| bad(format!("line {}: bad time", n + 2)))?,
            speed: num(1)?,
            demand: num(2)?,
            p_bat: num(3)?,
            p_eng: num(4)?,
            fuel_rate: num(5)?,
            soc: num(6)?,
            t_cl: num(7)?,
            solve_time: num(8)?,
            status: f[9].to_string(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub total_fuel: f64,
    /// Percent saved relative to the reference.
    pub fuel_saving: f64,
    pub terminal_soc: f64,
    pub soc_range: f64,
    pub soc_violation: f64,
    pub t_cl_violation: f64,
    pub mean_solve_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub cycle: String,
    pub reference: String,
    pub rows: Vec<ComparisonRow>,
}

/// Percent of the reference fuel saved.
pub fn saving_percent(fuel: f64, reference: f64) -> f64 {
    100.0 * (reference - fuel) / reference
}

/// Fuel savings of every report against the one labelled `reference`.
pub fn compare(reports: &[RunReport], reference: &str) -> Result<Comparison, HarnessError> {
    if reports.len() < 2 {
        return Err(HarnessError::Config("comparison needs at least two reports".into()));
    }
    let r0 = reports
        .iter()
        .find(|r| r.label == reference)
        .ok_or_else(|| HarnessError::Config(format!("no report labelled {reference:?}")))?;
    if let Some(r) = reports.iter().find(|r| r.cycle != r0.cycle) {
        return Err(HarnessError::Config(format!(
            "reports cover different cycles ({} and {})",
            r0.cycle, r.cycle
        )));
    }
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            total_fuel: r.total_fuel,
            fuel_saving: saving_percent(r.total_fuel, r0.total_fuel),
            terminal_soc: r.terminal_soc,
            soc_range: r.soc_range,
            soc_violation: r.soc_violation,
            t_cl_violation: r.t_cl_violation,
            mean_solve_time: r.solve_time.mean,
        })
        .collect();
    Ok(Comparison {
        cycle: r0.cycle.clone(),
        reference: reference.to_string(),
        rows,
    })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "label,total_fuel_kg,fuel_saving_pct,terminal_soc,soc_range,soc_violation,t_cl_violation,mean_solve_time_s\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.label,
                r.total_fuel,
                r.fuel_saving,
                r.terminal_soc,
                r.soc_range,
                r.soc_violation,
                r.t_cl_violation,
                r.mean_solve_time
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(10);
        let mut s = format!("cycle {}, savings vs {}\n", self.cycle, self.reference);
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>9}  {:>8}  {:>9}  {:>11}",
            "controller", "fuel [kg]", "saving", "SOC end", "SOC range", "solve [ms]"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:>10.5}  {:>8.2}%  {:>8.4}  {:>9.4}  {:>11.2}",
                r.label,
                r.total_fuel,
                r.fuel_saving,
                r.terminal_soc,
                r.soc_range,
                1e3 * r.mean_solve_time
            );
        }
        s
    }
}
