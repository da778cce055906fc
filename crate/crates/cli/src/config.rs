//! JSON run configuration.

use std::path::{Path, PathBuf};

use opesel_core::env::{Axis, EnvParams, GridSpec};
use opesel_core::data::SampleMode;
use opesel_core::selectors::Selector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Directory receiving every stage's outputs.
    pub output_dir: PathBuf,
    pub master_seed: u64,
    pub world: EnvParams,
    pub grid: GridConfig,
    /// Index of the groundtruth model within the grid.
    pub groundtruth: usize,
    pub targets: TargetConfig,
    pub behavior: BehaviorSpec,
    pub n: usize,
    #[serde(default = "default_mode")]
    pub mode: SampleMode,
    pub rollouts: RolloutConfig,
    pub selectors: Vec<Selector>,
    pub bootstrap_reps: usize,
    #[serde(default)]
    pub sweeps: SweepConfig,
}

fn default_mode() -> SampleMode {
    SampleMode::Iid
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axis: Axis,
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl GridConfig {
    pub fn spec(&self) -> GridSpec {
        GridSpec { start: self.start, stop: self.stop, count: self.count }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub count: usize,
    /// Target ids (`target_00`, ...) to evaluate; all when omitted.
    #[serde(default)]
    pub evaluate: Option<Vec<String>>,
}

/// How the behavior policy is derived from the target policies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorSpec {
    /// One of the target policies, i.e. on-policy data for that target.
    Target { policy: String },
    /// `policy` with probability `act_prob`, otherwise a uniform action.
    Noisy { policy: String, act_prob: f64 },
    Uniform,
}

impl BehaviorSpec {
    fn validate(&self, targets: usize) -> Result<(), String> {
        let known = |p: &str| (0..targets).any(|k| opesel_core::env::target_policy_id(k) == p);
        match self {
            BehaviorSpec::Target { policy } if !known(policy) => Err(format!("unknown behavior policy {policy}")),
            BehaviorSpec::Noisy { policy, .. } if !known(policy) => Err(format!("unknown behavior policy {policy}")),
            BehaviorSpec::Noisy { act_prob, .. } if !(0.0..=1.0).contains(act_prob) => {
                Err(format!("act_prob {act_prob} outside [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutConfig {
    pub num_rollouts: usize,
    /// Truncation horizon; the tail rule for the discount when omitted.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "yes")]
    pub split: bool,
    #[serde(default)]
    pub with_backups: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub gap: Option<GapSweep>,
    #[serde(default)]
    pub misspec: Option<MisspecSweep>,
    #[serde(default)]
    pub coverage: Option<CoverageSweep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSweep {
    pub radii: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MisspecSweep {
    pub window: usize,
    pub offsets: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageSweep {
    pub lambdas: Vec<f64>,
    /// Behavior of the off-policy source.
    pub off_behavior: BehaviorSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate().map_err(CliError::Config)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let g = &self.grid;
        if g.count == 0 {
            return Err("grid.count must be at least 1".into());
        }
        if !(g.start.is_finite() && g.stop.is_finite()) {
            return Err("grid bounds must be finite".into());
        }
        if self.groundtruth >= g.count {
            return Err(format!("groundtruth index {} outside a grid of {}", self.groundtruth, g.count));
        }
        if self.targets.count == 0 {
            return Err("targets.count must be at least 1".into());
        }
        if let Some(ids) = &self.targets.evaluate {
            if ids.is_empty() {
                return Err("targets.evaluate is empty".into());
            }
            for id in ids {
                if !(0..self.targets.count).any(|k| opesel_core::env::target_policy_id(k) == *id) {
                    return Err(format!("unknown target policy {id}"));
                }
            }
        }
        self.behavior.validate(self.targets.count)?;
        if self.n == 0 {
            return Err("n must be at least 1".into());
        }
        let r = &self.rollouts;
        if r.num_rollouts == 0 || (r.split && !r.num_rollouts.is_multiple_of(2)) {
            return Err(format!("rollouts.num_rollouts = {} (split needs an even count)", r.num_rollouts));
        }
        if r.horizon == Some(0) {
            return Err("rollouts.horizon must be at least 1".into());
        }
        if self.selectors.is_empty() {
            return Err("no selectors".into());
        }
        for s in &self.selectors {
            if s.needs_backups() && !r.with_backups {
                return Err(format!("selector {s} needs rollouts.with_backups = true"));
            }
            if matches!(s, Selector::LstdTournament(_)) && !r.split {
                return Err(format!("selector {s} needs split rollouts"));
            }
        }
        if self.bootstrap_reps == 0 {
            return Err("bootstrap_reps must be at least 1".into());
        }
        if let Some(gap) = &self.sweeps.gap {
            for &rad in &gap.radii {
                if rad == 0 || rad > self.groundtruth || self.groundtruth + rad >= g.count {
                    return Err(format!("gap radius {rad} leaves the grid around {}", self.groundtruth));
                }
            }
        }
        if let Some(ms) = &self.sweeps.misspec {
            if ms.window == 0 || ms.offsets.iter().any(|&o| o + ms.window > g.count) {
                return Err("misspec windows must lie inside the grid".into());
            }
        }
        if let Some(cov) = &self.sweeps.coverage {
            if cov.lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
                return Err("coverage lambdas must lie in [0, 1]".into());
            }
            cov.off_behavior.validate(self.targets.count)?;
        }
        Ok(())
    }

    /// Ids of the target policies to evaluate.
    pub fn evaluated_targets(&self) -> Vec<String> {
        match &self.targets.evaluate {
            Some(ids) => ids.clone(),
            None => (0..self.targets.count).map(opesel_core::env::target_policy_id).collect(),
        }
    }
}

/// SHA-256 of the canonical JSON of `value`.
pub fn content_hash<T: Serialize>(value: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(value).expect("serializable")))
}
