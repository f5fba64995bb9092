//! Drive cycles and the two-tier speed preview: exact speeds over a short
//! moving window, block-averaged (optionally noisy) speeds from there to the
//! end of the trip.
//!
//! Cycle CSV format: one `time_s,speed_mps` row per sample, optional header
//! line, `#` starts a comment. A cycle with `n` samples spans `n` one-second
//! control steps, so its end time is `n` seconds.

use std::io::BufRead;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::maps::{power_demand, RoadLoadParams};

const NYCC_LIKE: &str = include_str!("../data/nycc_like.csv");
const NEDC_LIKE: &str = include_str!("../data/nedc_like.csv");

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid cycle: {0}")]
    Validation(String),
    #[error("time {t} s outside cycle of {len} s")]
    OutOfRange { t: usize, len: usize },
    #[error("invalid preview model: {0}")]
    InvalidPreview(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vehicle speed trace on a uniform 1 s grid starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveCycle {
    pub name: String,
    pub speeds: Vec<f64>,
}

/// A parsed cycle plus any non-fatal notes produced while loading it.
#[derive(Debug, Clone)]
pub struct LoadedCycle {
    pub cycle: DriveCycle,
    pub warnings: Vec<String>,
}

impl DriveCycle {
    pub fn new(name: impl Into<String>, speeds: Vec<f64>) -> Result<Self, CycleError> {
        let cycle = Self {
            name: name.into(),
            speeds,
        };
        cycle.validate()?;
        Ok(cycle)
    }

    pub fn validate(&self) -> Result<(), CycleError> {
        if self.speeds.len() < 2 {
            return Err(CycleError::Validation("cycle needs at least two samples".into()));
        }
        if let Some(i) = self.speeds.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(CycleError::Validation(format!(
                "speed at t = {i} s is negative or not finite"
            )));
        }
        Ok(())
    }

    /// Bundled low-speed stop-and-go cycle (600 s).
    pub fn nycc_like() -> Self {
        load_cycle(NYCC_LIKE.as_bytes(), "nycc-like")
            .expect("bundled cycle parses")
            .cycle
    }

    /// Bundled urban / extra-urban / urban cycle (800 s).
    pub fn nedc_like() -> Self {
        load_cycle(NEDC_LIKE.as_bytes(), "nedc-like")
            .expect("bundled cycle parses")
            .cycle
    }

    /// Looks up a bundled cycle by name.
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "nycc-like" | "nycc" => Some(Self::nycc_like()),
            "nedc-like" | "nedc" => Some(Self::nedc_like()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    /// Trip end time in seconds.
    pub fn end_time(&self) -> usize {
        self.speeds.len()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.speeds.len()).map(|i| i as f64)
    }

    /// Forward-difference accelerations, the last sample reusing the previous one.
    pub fn accels(&self) -> Vec<f64> {
        forward_accels(&self.speeds, 1.0)
    }

    /// Distance covered, m.
    pub fn distance(&self) -> f64 {
        self.speeds.iter().sum()
    }
}

/// Parses a cycle CSV. Non-unit time steps are resampled onto the 1 s grid
/// by linear interpolation, with a warning.
pub fn load_cycle<R: BufRead>(reader: R, name: &str) -> Result<LoadedCycle, CycleError> {
    let mut rows: Vec<(f64, f64)> = Vec::new();
    let mut first_content = true;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split(',').map(str::trim).collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed {
            Some(vals) if vals.len() == 2 => rows.push((vals[0], vals[1])),
            _ if first_content => {} // header row
            _ => {
                return Err(CycleError::Parse {
                    line: idx + 1,
                    msg: format!("expected `time_s,speed_mps`, got {content:?}"),
                })
            }
        }
        first_content = false;
    }
    if rows.len() < 2 {
        return Err(CycleError::Validation("cycle needs at least two samples".into()));
    }
    for (i, &(t, v)) in rows.iter().enumerate() {
        if !t.is_finite() || !v.is_finite() {
            return Err(CycleError::Validation(format!("row {i}: non-finite value")));
        }
        if v < 0.0 {
            return Err(CycleError::Validation(format!(
                "row {i}: negative speed {v} m/s"
            )));
        }
        if i > 0 && t <= rows[i - 1].0 {
            return Err(CycleError::Validation(format!(
                "row {i}: time {t} s does not increase"
            )));
        }
    }

    let t0 = rows[0].0;
    let uniform = rows
        .iter()
        .enumerate()
        .all(|(i, &(t, _))| t - t0 == i as f64);
    let mut warnings = Vec::new();
    if t0 != 0.0 {
        warnings.push(format!("cycle starts at t = {t0} s; shifted to 0"));
    }
    let speeds = if uniform {
        rows.iter().map(|&(_, v)| v).collect()
    } else {
        let span = rows[rows.len() - 1].0 - t0;
        let n = span.floor() as usize + 1;
        warnings.push(format!(
            "non-uniform time grid; resampled {} rows onto {n} one-second samples",
            rows.len()
        ));
        let mut out = Vec::with_capacity(n);
        let mut j = 0;
        for k in 0..n {
            let t = t0 + k as f64;
            while j + 2 < rows.len() && rows[j + 1].0 < t {
                j += 1;
            }
            let (ta, va) = rows[j];
            let (tb, vb) = rows[j + 1];
            let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
            out.push(va + frac * (vb - va));
        }
        out
    };
    for w in &warnings {
        log::warn!("{name}: {w}");
    }
    Ok(LoadedCycle {
        cycle: DriveCycle::new(name, speeds)?,
        warnings,
    })
}

/// Configuration of the speed preview.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreviewModel {
    /// Length of the exact preview window, s.
    pub accurate_window: usize,
    /// Width of a coarse forecast block, s.
    pub coarse_step: usize,
    /// Standard deviation of the noise on coarse block speeds, m/s.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PreviewModel {
    fn default() -> Self {
        Self {
            accurate_window: 20,
            coarse_step: 20,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl PreviewModel {
    pub fn validate(&self) -> Result<(), CycleError> {
        if self.accurate_window < 1 {
            return Err(CycleError::InvalidPreview("accurate window must be >= 1 s".into()));
        }
        if self.coarse_step < 1 {
            return Err(CycleError::InvalidPreview("coarse step must be >= 1 s".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CycleError::InvalidPreview("noise std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Speed preview available to a controller at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preview {
    pub t: usize,
    /// Exact speeds over `[t, min(t + window, t_end))`.
    pub fine_speeds: Vec<f64>,
    /// Exact accelerations matching `fine_speeds` (cycle convention).
    pub fine_accels: Vec<f64>,
    /// Block-mean speeds over `[t + window, t_end)`.
    pub coarse_speeds: Vec<f64>,
    /// Width of each coarse block, s (the last may be partial).
    pub coarse_widths: Vec<f64>,
}

pub fn preview(cycle: &DriveCycle, t: usize, pm: &PreviewModel) -> Result<Preview, CycleError> {
    pm.validate()?;
    let n = cycle.len();
    if t >= n {
        return Err(CycleError::OutOfRange { t, len: n });
    }
    let fine_end = (t + pm.accurate_window).min(n);
    let accels = cycle.accels();
    let fine_speeds = cycle.speeds[t..fine_end].to_vec();
    let fine_accels = accels[t..fine_end].to_vec();

    let mut coarse_speeds = Vec::new();
    let mut coarse_widths = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(pm.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let noise = Normal::new(0.0, pm.noise_std.max(0.0)).ok();
    let mut start = fine_end;
    while start < n {
        let end = (start + pm.coarse_step).min(n);
        let block = &cycle.speeds[start..end];
        let mut mean = block.iter().sum::<f64>() / block.len() as f64;
        if pm.noise_std > 0.0 {
            if let Some(dist) = &noise {
                mean = (mean + dist.sample(&mut rng)).max(0.0);
            }
        }
        coarse_speeds.push(mean);
        coarse_widths.push((end - start) as f64);
        start = end;
    }
    Ok(Preview {
        t,
        fine_speeds,
        fine_accels,
        coarse_speeds,
        coarse_widths,
    })
}

fn forward_accels(speeds: &[f64], step: f64) -> Vec<f64> {
    let n = speeds.len();
    let mut acc = Vec::with_capacity(n);
    for i in 0..n.saturating_sub(1) {
        acc.push((speeds[i + 1] - speeds[i]) / step);
    }
    if n > 0 {
        acc.push(if n >= 2 { acc[n - 2] } else { 0.0 });
    }
    acc
}

/// Per-node traction power demand with forward-difference accelerations.
pub fn demand_profile(speeds: &[f64], step: f64, rl: &RoadLoadParams) -> Vec<f64> {
    speeds
        .iter()
        .zip(forward_accels(speeds, step))
        .map(|(&v, a)| power_demand(v, a, rl))
        .collect()
}
