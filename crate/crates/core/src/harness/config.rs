//! Experiment configuration. Every field has a default, so an empty TOML
//! file describes a complete run (MH-MPC on the bundled NEDC-like cycle).
//!
//! ```toml
//! cycle = "nycc-like"          # bundled name or path to a cycle CSV
//! controller = "baseline-mpc"  # rule-based | baseline-mpc | mh-mpc | dp
//! seed = 3
//! out_dir = "out"
//!
//! [initial]
//! soc = 0.6
//! t_cl = 50.0
//!
//! [vehicle.thermal]
//! heating_demand = 1500.0
//!
//! [preview]
//! noise_std = 0.5
//!
//! [baseline_mpc]
//! horizon = 50
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controllers::{BaselineMpcConfig, MhMpcConfig, RuleBasedConfig};
use crate::cycle::PreviewModel;
use crate::dp::DpGridConfig;
use crate::nlp::StateBounds;
use crate::plant::PlantState;
use crate::powertrain::VehicleParams;

use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    RuleBased,
    #[serde(alias = "baseline")]
    BaselineMpc,
    MhMpc,
    Dp,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 4] = [Self::RuleBased, Self::BaselineMpc, Self::MhMpc, Self::Dp];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::RuleBased => "rule-based",
            Self::BaselineMpc => "baseline-mpc",
            Self::MhMpc => "mh-mpc",
            Self::Dp => "dp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rule-based" => Some(Self::RuleBased),
            "baseline-mpc" | "baseline" => Some(Self::BaselineMpc),
            "mh-mpc" => Some(Self::MhMpc),
            "dp" => Some(Self::Dp),
            _ => None,
        }
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialState {
    pub soc: f64,
    /// Coolant temperature, °C. The engine starts warmed up.
    pub t_cl: f64,
}

impl Default for InitialState {
    fn default() -> Self {
        Self { soc: 0.6, t_cl: 50.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DpSettings {
    #[serde(flatten)]
    pub grid: DpGridConfig,
    /// Policy cache; defaults to `<out_dir>/dp-<cycle>.bin`.
    pub policy_file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bundled cycle name (`nedc-like`, `nycc-like`) or path to a cycle CSV.
    pub cycle: String,
    pub controller: ControllerKind,
    /// Run label used for output file names; defaults to `<controller>-<cycle>`.
    pub label: Option<String>,
    /// Seeds the coarse-preview noise.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write wall-clock solve times into the trajectory file. Off by default
    /// so that repeated runs produce identical files; the summary always
    /// carries timing statistics.
    pub record_timing: bool,
    pub initial: InitialState,
    /// SOC and coolant boxes used by every controller and the report.
    pub state_bounds: StateBounds,
    pub vehicle: VehicleParams,
    pub preview: PreviewModel,
    pub rule_based: RuleBasedConfig,
    pub baseline_mpc: BaselineMpcConfig,
    pub mh_mpc: MhMpcConfig,
    pub dp: DpSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            cycle: "nedc-like".into(),
            controller: ControllerKind::MhMpc,
            label: None,
            seed: 0,
            out_dir: PathBuf::from("out"),
            record_timing: false,
            initial: InitialState::default(),
            state_bounds: StateBounds::default(),
            vehicle: VehicleParams::default(),
            preview: PreviewModel::default(),
            rule_based: RuleBasedConfig::default(),
            baseline_mpc: BaselineMpcConfig::default(),
            mh_mpc: MhMpcConfig::default(),
            dp: DpSettings::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| format!("{}-{}", self.controller, self.cycle_stem()))
    }

    /// Cycle name without directories or extension.
    pub fn cycle_stem(&self) -> String {
        Path::new(&self.cycle)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.cycle.clone())
    }

    pub fn initial_state(&self) -> PlantState {
        PlantState::new(self.initial.soc, self.initial.t_cl)
    }

    pub fn policy_file(&self) -> PathBuf {
        self.dp
            .policy_file
            .clone()
            .unwrap_or_else(|| self.out_dir.join(format!("dp-{}.bin", self.cycle_stem())))
    }

    /// Checks everything that does not need the cycle file.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let b = &self.state_bounds;
        let bad = |m: String| Err(HarnessError::Config(m));
        if !(b.soc_min < b.soc_max && b.t_cl_min < b.t_cl_max) {
            return bad("state bounds must be ordered intervals".into());
        }
        let x = &self.initial;
        if !(x.soc >= b.soc_min && x.soc <= b.soc_max) {
            return bad(format!("initial SOC {} outside [{}, {}]", x.soc, b.soc_min, b.soc_max));
        }
        if !(x.t_cl >= b.t_cl_min && x.t_cl <= b.t_cl_max) {
            return bad(format!(
                "initial coolant temperature {} outside [{}, {}]",
                x.t_cl, b.t_cl_min, b.t_cl_max
            ));
        }
        self.vehicle.validate().map_err(HarnessError::Config)?;
        self.preview
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.initial.t_cl, 50.0);
        assert_eq!(c.vehicle.thermal.heating_demand, 1500.0);
        assert_eq!(c.label(), "mh-mpc-nedc-like");
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let c = ExperimentConfig::from_toml(
            "controller = \"baseline\"\ncycle = \"data/my cycle.csv\"\n[baseline_mpc]\nhorizon = 50\n[vehicle.thermal]\nheating_demand = 0.0\n",
        )
        .unwrap();
        assert_eq!(c.controller, ControllerKind::BaselineMpc);
        assert_eq!(c.baseline_mpc.horizon, 50);
        assert_eq!(c.baseline_mpc.lambda, BaselineMpcConfig::default().lambda);
        assert_eq!(c.vehicle.thermal.heating_demand, 0.0);
        assert_eq!(c.vehicle.thermal.ambient_temp, VehicleParams::default().thermal.ambient_temp);
        assert_eq!(c.label(), "baseline-mpc-my cycle");
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::default();
        c.seed = 17;
        c.preview.noise_std = 1.5;
        c.dp.grid.n_soc = 41;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ExperimentConfig::from_toml("controler = \"dp\"").is_err());
        assert!(ExperimentConfig::from_toml("controller = \"fuzzy\"").is_err());
        let mut c = ExperimentConfig::default();
        c.initial.t_cl = 30.0;
        assert!(c.validate().is_err());
        c.initial.t_cl = 50.0;
        c.initial.soc = 0.9;
        assert!(c.validate().is_err());
    }
}
