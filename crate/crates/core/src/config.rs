//! TOML run configuration: a [`TrainConfig`] plus simulation, level-set and output
//! sections.
//!
//! ```toml
//! system = "dubins"
//! seed = 1
//!
//! [network]
//! hidden_layers = [64]
//!
//! [conformal]
//! n_samples = 20000
//! target_epsilon = 0.01
//! beta = 0.001
//!
//! [simulation]
//! n_rollouts = 1000
//!
//! [levelset]
//! free_axes = [0, 1]
//! fixed_values = [0.0]
//! resolution = 201
//!
//! [output]
//! dir = "runs/dubins"
//! ```

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::dynamics::{ControlAffineSystem, SystemRegistry};
use crate::error::{Error, Result};
use crate::simulator::SliceSpec;
use crate::trainer::{join_issues, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_rollouts: usize,
    pub horizon_steps: usize,
    pub dt: f64,
    /// Seed of the start-state sampler; derived from the run seed when absent.
    pub seed: Option<u64>,
    /// Number of trajectories written as CSV.
    pub trajectories: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { n_rollouts: 1000, horizon_steps: 500, dt: 0.02, seed: None, trajectories: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LevelSetConfig {
    pub free_axes: [usize; 2],
    /// Remaining coordinates in ascending index order; zeros when absent.
    pub fixed_values: Option<Vec<f64>>,
    pub resolution: usize,
}

impl Default for LevelSetConfig {
    fn default() -> Self {
        Self { free_axes: [0, 1], fixed_values: None, resolution: 201 }
    }
}

impl LevelSetConfig {
    pub fn slice(&self, state_dim: usize) -> SliceSpec {
        SliceSpec {
            free_axes: self.free_axes,
            fixed_values: self.fixed_values.clone().unwrap_or_else(|| vec![0.0; state_dim.saturating_sub(2)]),
            resolution: self.resolution,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub write_datasets: bool,
    pub write_scores: bool,
}

/// A full run description.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub simulation: SimulationConfig,
    pub levelset: LevelSetConfig,
    pub output: OutputConfig,
}

const RUN_SECTIONS: [&str; 3] = ["simulation", "levelset", "output"];

fn section<T: for<'de> Deserialize<'de> + Default>(table: &mut toml::Table, key: &str) -> Result<T> {
    match table.remove(key) {
        None => Ok(T::default()),
        Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::config(key, e.message().to_string())),
    }
}

impl RunConfig {
    pub fn new(train: TrainConfig) -> Self {
        Self {
            train,
            simulation: SimulationConfig::default(),
            levelset: LevelSetConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let simulation = section(&mut table, RUN_SECTIONS[0])?;
        let levelset = section(&mut table, RUN_SECTIONS[1])?;
        let output = section(&mut table, RUN_SECTIONS[2])?;
        let train: TrainConfig = toml::Value::Table(table).try_into()?;
        Ok(Self { train, simulation, levelset, output })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("", e.to_string()))
    }

    /// Validates every section and resolves the system.
    pub fn validate(&self, registry: &SystemRegistry) -> Result<ControlAffineSystem> {
        let sys = registry.build(&self.train.system, &self.train.system_params);
        let mut issues = self.train.issues(sys.as_ref().ok());
        if let Err(e) = &sys {
            issues.insert(0, ("system".into(), e.to_string()));
        }
        let s = &self.simulation;
        if s.n_rollouts == 0 {
            issues.push(("simulation.n_rollouts".into(), "must be at least 1".into()));
        }
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            issues.push(("simulation.dt".into(), format!("must be positive, got {}", s.dt)));
        }
        if let Ok(sys) = &sys {
            if let Err(Error::Config { path, message }) = self.levelset.slice(sys.state_dim()).validate(sys.state_dim()) {
                issues.push((path, message));
            }
        }
        if issues.is_empty() {
            sys
        } else {
            Err(join_issues(issues))
        }
    }

    /// Fully resolved configuration as JSON, including every default.
    pub fn resolved_json(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self)?;
        if let Ok(alpha) = self.train.conformal.resolved_alpha() {
            v["conformal"]["resolved_alpha"] = serde_json::json!(alpha);
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_defaults() {
        let text = r#"
            system = "dubins"
            seed = 3
            [training]
            epochs_phase0 = 5
            [simulation]
            n_rollouts = 10
            [levelset]
            resolution = 11
            [output]
            dir = "out"
        "#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.train.seed, 3);
        assert_eq!(c.train.training.epochs_phase0, 5);
        assert_eq!(c.simulation.n_rollouts, 10);
        assert_eq!(c.simulation.dt, 0.02);
        assert_eq!(c.levelset.slice(3).fixed_values, vec![0.0]);
        assert_eq!(c.output.dir.as_deref(), Some(Path::new("out")));
        c.validate(&SystemRegistry::with_builtins()).unwrap();
        let again = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
        let json = c.resolved_json().unwrap();
        assert_eq!(json["training"]["batch_size"], 256);
        assert_eq!(json["conformal"]["resolved_alpha"], 0.005);
    }

    #[test]
    fn rejects_unknown_fields_everywhere() {
        assert!(RunConfig::from_toml("system = \"dubins\"\n[simulation]\nsteps = 3").is_err());
        assert!(RunConfig::from_toml("system = \"dubins\"\n[training]\nepoch = 3").is_err());
        assert!(RunConfig::from_toml("system = \"dubins\"\nextra = 1").is_err());
        assert!(RunConfig::from_toml("seed = 1").is_err());
    }

    #[test]
    fn validation_collects_paths() {
        let text = r#"
            system = "dubins"
            [conformal]
            n_samples = 100
            alpha = 0.001
            [simulation]
            dt = 0.0
            [levelset]
            free_axes = [0, 0]
        "#;
        let err = RunConfig::from_toml(text).unwrap().validate(&SystemRegistry::with_builtins()).unwrap_err();
        let msg = err.to_string();
        for needle in ["conformal.alpha", "simulation.dt", "levelset.free_axes"] {
            assert!(msg.contains(needle), "{needle}: {msg}");
        }
    }
}
