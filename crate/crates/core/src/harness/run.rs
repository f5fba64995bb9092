use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::{BaselineMpc, Controller, MhMpc, RuleBased};
use crate::cycle::{load_cycle, DriveCycle};
use crate::dp::{cache_key, solve_cycle, DpController, DpPolicy};

use super::config::{ControllerKind, ExperimentConfig};
use super::report::{write_trajectory, RunReport};
use super::sim::{simulate, Trajectory};
use super::HarnessError;

/// A bundled cycle name or a path to a cycle CSV.
pub fn load_cycle_spec(spec: &str) -> Result<DriveCycle, HarnessError> {
    if let Some(c) = DriveCycle::bundled(spec) {
        return Ok(c);
    }
    let path = Path::new(spec);
    let file = File::open(path).map_err(|e| {
        HarnessError::Config(format!("cycle {spec:?} is neither bundled nor a readable file: {e}"))
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    let loaded = load_cycle(BufReader::new(file), &name)?;
    for w in &loaded.warnings {
        log::warn!("{spec}: {w}");
    }
    Ok(loaded.cycle)
}

/// Loads the cached policy when it was solved for exactly this problem,
/// otherwise solves and stores it. `force` skips the cache. Returns the
/// policy and whether the cache was used.
pub fn dp_policy(
    cfg: &ExperimentConfig,
    cycle: &DriveCycle,
    force: bool,
) -> Result<(DpPolicy, bool), HarnessError> {
    let path = cfg.policy_file();
    let key = cache_key(
        cycle,
        &cfg.vehicle,
        &cfg.state_bounds,
        &cfg.dp.grid,
        cfg.initial.soc,
    );
    if !force && path.exists() {
        match DpPolicy::load(&path) {
            Ok(p) if p.meta == key => {
                log::info!("reusing DP policy {}", path.display());
                return Ok((p, true));
            }
            Ok(_) => log::info!("{} was solved for another problem; re-solving", path.display()),
            Err(e) => log::warn!("ignoring {}: {e}", path.display()),
        }
    }
    let t0 = std::time::Instant::now();
    let policy = solve_cycle(
        cycle,
        &cfg.vehicle,
        &cfg.state_bounds,
        &cfg.dp.grid,
        cfg.initial_state(),
    )?;
    log::info!("DP solved in {:.1} s", t0.elapsed().as_secs_f64());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    policy.save(&path)?;
    Ok((policy, false))
}

/// Builds the configured controller. The experiment's state bounds and
/// rule-based settings replace those inside the MPC configurations, so one
/// value governs every controller. Returns whether a DP policy came from the
/// cache.
pub fn build_controller(
    cfg: &ExperimentConfig,
    cycle: &DriveCycle,
) -> Result<(Box<dyn Controller>, Option<bool>), HarnessError> {
    let vehicle = cfg.vehicle.clone();
    Ok(match cfg.controller {
        ControllerKind::RuleBased => {
            cfg.rule_based
                .validate(&cfg.state_bounds)
                .map_err(HarnessError::Controller)?;
            (Box::new(RuleBased::new(cfg.rule_based.clone(), vehicle)), None)
        }
        ControllerKind::BaselineMpc => {
            let mut c = cfg.baseline_mpc.clone();
            c.common.state_bounds = cfg.state_bounds;
            c.common.fallback = cfg.rule_based.clone();
            (Box::new(BaselineMpc::new(c, vehicle)?), None)
        }
        ControllerKind::MhMpc => {
            let mut c = cfg.mh_mpc.clone();
            c.common.state_bounds = cfg.state_bounds;
            c.common.fallback = cfg.rule_based.clone();
            (Box::new(MhMpc::new(c, vehicle)?), None)
        }
        ControllerKind::Dp => {
            let (policy, hit) = dp_policy(cfg, cycle, false)?;
            (Box::new(DpController::new(policy, cycle, &vehicle)), Some(hit))
        }
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub trajectory: Trajectory,
}

/// Runs the experiment without writing trajectory or summary files (a DP
/// run still reads and writes its policy cache).
pub fn run_in_memory(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    cfg.validate()?;
    let cycle = load_cycle_spec(&cfg.cycle)?;
    let (mut controller, hit) = build_controller(cfg, &cycle)?;
    let preview = crate::cycle::PreviewModel {
        seed: cfg.seed,
        ..cfg.preview.clone()
    };
    let mut traj = simulate(
        &cycle,
        controller.as_mut(),
        &cfg.vehicle,
        cfg.initial_state(),
        &preview,
        &cfg.rule_based,
    )?;
    traj.label = cfg.label();
    let mut report = RunReport::from_trajectory(&traj, &cfg.vehicle, &cfg.state_bounds, cfg.seed);
    report.controller = cfg.controller.to_string();
    report.dp_cache_hit = hit;
    Ok(RunOutput {
        report,
        trajectory: traj,
    })
}

/// Runs the experiment and writes `<label>.csv` (trajectory) and
/// `<label>.json` (summary) into the output directory.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput, HarnessError> {
    let mut out = run_in_memory(cfg)?;
    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let label = cfg.label();
    let csv = dir.join(format!("{label}.csv"));
    let file = File::create(&csv).map_err(|e| HarnessError::io(&csv, e))?;
    write_trajectory(std::io::BufWriter::new(file), &out.trajectory.rows, cfg.record_timing)
        .map_err(|e| HarnessError::io(&csv, e))?;
    out.report.trajectory_file = Some(format!("{label}.csv"));
    let json = dir.join(format!("{label}.json"));
    std::fs::write(&json, out.report.to_json()).map_err(|e| HarnessError::io(&json, e))?;
    Ok(out)
}

/// Parameters a sweep can vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepParam {
    /// Baseline MPC terminal SOC weight.
    Lambda,
    /// MH-MPC fine node count.
    N,
    /// Baseline MPC horizon.
    H,
    /// MH-MPC coarse step.
    Dt2,
    /// Coarse-preview noise, m/s.
    NoiseStd,
}

impl SweepParam {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lambda" => Some(Self::Lambda),
            "n" => Some(Self::N),
            "h" | "horizon" => Some(Self::H),
            "dt2" => Some(Self::Dt2),
            "noise_std" | "noise-std" | "noise" => Some(Self::NoiseStd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lambda => "lambda",
            Self::N => "n",
            Self::H => "h",
            Self::Dt2 => "dt2",
            Self::NoiseStd => "noise_std",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<(), HarnessError> {
        let count = |v: f64| -> Result<usize, HarnessError> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(HarnessError::Config(format!("{} needs positive integers, got {v}", self.as_str())))
            }
        };
        let wanted = match self {
            Self::Lambda | Self::H => Some(ControllerKind::BaselineMpc),
            Self::N | Self::Dt2 => Some(ControllerKind::MhMpc),
            Self::NoiseStd => None,
        };
        if let Some(k) = wanted.filter(|&k| k != cfg.controller) {
            return Err(HarnessError::Config(format!(
                "sweeping {} needs controller {k}, config has {}",
                self.as_str(),
                cfg.controller
            )));
        }
        match self {
            Self::Lambda => cfg.baseline_mpc.lambda = value,
            Self::H => cfg.baseline_mpc.horizon = count(value)?,
            Self::N => cfg.mh_mpc.n_fine = count(value)?,
            Self::Dt2 => cfg.mh_mpc.dt2 = value,
            Self::NoiseStd => cfg.preview.noise_std = value,
        }
        Ok(())
    }
}

/// One run per value, labelled `<label>-<param>=<value>`, each written like
/// [`run`].
pub fn sweep(
    base: &ExperimentConfig,
    param: SweepParam,
    values: &[f64],
) -> Result<Vec<RunReport>, HarnessError> {
    let mut reports = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        param.apply(&mut cfg, v)?;
        cfg.label = Some(format!("{}-{}={v}", base.label(), param.as_str()));
        reports.push(run(&cfg)?.report);
    }
    Ok(reports)
}
