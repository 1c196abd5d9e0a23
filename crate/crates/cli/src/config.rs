//! Run configuration: a single JSON document with every default embedded,
//! so an empty `{}` reproduces the reference middle-case pipeline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use rossviab_core::estimation::{FitTolerances, ParamBounds, Theta};
use rossviab_core::{ControlGrid, Horizon, Mode, StateGrid, UncertaintySet};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub control: ControlSection,
    pub uncertainty: UncertaintySection,
    pub horizon: HorizonSection,
    pub estimation: EstimationSection,
    pub io: IoSection,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            grid: GridSection::default(),
            control: ControlSection::default(),
            uncertainty: UncertaintySection::default(),
            horizon: HorizonSection::default(),
            estimation: EstimationSection::default(),
            io: IoSection::default(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: f64,
    pub substeps: u32,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { gamma: 0.1, substeps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n_m: usize,
    pub n_h: usize,
    pub h_cap: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { n_m: 70, n_h: 70, h_cap: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSection {
    pub u_lo: f64,
    pub u_hi: f64,
    pub n_u: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        ControlSection { u_lo: 0.0333, u_hi: 0.05, n_u: 70 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub a_m_lo: f64,
    pub a_m_hi: f64,
    pub a_h_lo: f64,
    pub a_h_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySection {
    pub sets: BTreeMap<String, Rect>,
    pub n_am: usize,
    pub n_ah: usize,
    pub mode: Mode,
}

impl Default for UncertaintySection {
    fn default() -> Self {
        let mut sets = BTreeMap::new();
        sets.insert(
            "low".to_string(),
            Rect { a_m_lo: 0.076608, a_m_hi: 0.076608, a_h_lo: 0.0722633, a_h_hi: 0.0722633 },
        );
        sets.insert("middle".to_string(), Rect { a_m_lo: 0.0, a_m_hi: 5.0, a_h_lo: 0.0, a_h_hi: 25.0 });
        sets.insert("high".to_string(), Rect { a_m_lo: 0.0, a_m_hi: 10.0, a_h_lo: 0.0, a_h_hi: 50.0 });
        UncertaintySection { sets, n_am: 70, n_ah: 70, mode: Mode::Corners }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonSection {
    pub t0: u32,
    pub t_final: u32,
}

impl Default for HorizonSection {
    fn default() -> Self {
        HorizonSection { t0: 0, t_final: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub bounds: ParamBounds,
    pub theta0: Theta,
    pub m0_ratio: f64,
    pub population: f64,
    pub infectious_days: u32,
    pub tolerances: FitTolerances,
    pub multistart: usize,
    pub synthetic: SyntheticSection,
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            bounds: ParamBounds::reference(),
            theta0: Theta { alpha: 1.0, p_m: 0.5, p_h: 0.5, xi: 1.0, delta: 0.035 },
            m0_ratio: 3.0,
            population: 2_400_000.0,
            infectious_days: 10,
            tolerances: FitTolerances::default(),
            multistart: 8,
            synthetic: SyntheticSection::default(),
        }
    }
}

/// Generator settings for `generate-synthetic`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub theta: Theta,
    pub h0: f64,
    pub days: u32,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        SyntheticSection {
            theta: Theta { alpha: 0.36, p_m: 0.2128, p_h: 0.1990, xi: 1.0087, delta: 0.0333 },
            h0: 5e-5,
            days: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    pub out_dir: String,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { out_dir: "out".to_string() }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Field-path validation of everything the solver types would reject.
    pub fn validate(&self) -> Result<(), CliError> {
        self.state_grid().map_err(|e| CliError::Config(format!("grid: {e}")))?;
        self.control_grid().map_err(|e| CliError::Config(format!("control: {e}")))?;
        self.horizon().map_err(|e| CliError::Config(format!("horizon: {e}")))?;
        if self.uncertainty.sets.is_empty() {
            return Err(CliError::Config("uncertainty.sets: at least one set is required".to_string()));
        }
        for name in self.uncertainty.sets.keys() {
            self.uncertainty_set(name)
                .map_err(|e| CliError::Config(format!("uncertainty.sets.{name}: {e}")))?;
        }
        if !self.model.gamma.is_finite() || self.model.gamma < 0.0 {
            return Err(CliError::Config(format!("model.gamma: {} must be finite and >= 0", self.model.gamma)));
        }
        if self.model.substeps == 0 {
            return Err(CliError::Config("model.substeps: must be >= 1".to_string()));
        }
        self.estimation
            .bounds
            .validate()
            .map_err(|e| CliError::Config(format!("estimation.bounds: {e}")))?;
        if !self.estimation.bounds.contains(&self.estimation.theta0) {
            return Err(CliError::Config("estimation.theta0: outside estimation.bounds".to_string()));
        }
        if self.estimation.population <= 0.0 {
            return Err(CliError::Config(format!(
                "estimation.population: {} must be > 0",
                self.estimation.population
            )));
        }
        if self.estimation.multistart == 0 {
            return Err(CliError::Config("estimation.multistart: must be >= 1".to_string()));
        }
        Ok(())
    }

    pub fn state_grid(&self) -> rossviab_core::Result<StateGrid> {
        StateGrid::new(self.grid.n_m, self.grid.n_h, self.grid.h_cap)
    }

    pub fn control_grid(&self) -> rossviab_core::Result<ControlGrid> {
        ControlGrid::new(self.control.n_u, self.control.u_lo, self.control.u_hi)
    }

    pub fn horizon(&self) -> rossviab_core::Result<Horizon> {
        Horizon::new(self.horizon.t0, self.horizon.t_final)
    }

    pub fn uncertainty_set(&self, name: &str) -> rossviab_core::Result<UncertaintySet> {
        let rect = self.uncertainty.sets.get(name).ok_or_else(|| {
            rossviab_core::Error::Domain(format!(
                "unknown uncertainty set '{name}' (available: {})",
                self.uncertainty.sets.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        // degenerate axes keep a single lattice point
        let n_am = if rect.a_m_lo == rect.a_m_hi { 1 } else { self.uncertainty.n_am };
        let n_ah = if rect.a_h_lo == rect.a_h_hi { 1 } else { self.uncertainty.n_ah };
        UncertaintySet::new(rect.a_m_lo, rect.a_m_hi, rect.a_h_lo, rect.a_h_hi, n_am, n_ah)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_json_is_the_reference_configuration() {
        let parsed: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.grid.n_m, 70);
        assert_eq!(parsed.horizon.t_final, 60);
        assert_eq!(parsed.uncertainty.sets.len(), 3);
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = RunConfig::default();
        let text = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let r: Result<RunConfig, _> = serde_json::from_str(r#"{"grdi": {}}"#);
        assert!(r.is_err());
    }

    #[test]
    fn unknown_set_error_names_the_available_sets() {
        let config = RunConfig::default();
        let err = config.uncertainty_set("typo").unwrap_err().to_string();
        assert!(err.contains("high, low, middle"), "{err}");
    }
}
