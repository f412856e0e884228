//! Run configuration files.

use std::path::{Path, PathBuf};

use etclab::baselines::{linearized_pendulum_env, TriggerKind};
use etclab::envsim::linearize_pendulum;
use etclab::envsim::{EnvConfig, EtcEnv, LinearSystem, PendulumParams};
use etclab::retrainer::RetrainConfig;
use etclab::trainer::{EvalConfig, TrainConfig};
use etclab::verifier::{BoxRegion, VerifierConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Pendulum,
    LinearizedPendulum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub kind: PlantKind,
    #[serde(default)]
    pub params: PendulumParams,
}

impl PlantConfig {
    pub fn env(&self, cfg: &EnvConfig) -> etclab::Result<EtcEnv> {
        match self.kind {
            PlantKind::Pendulum => EtcEnv::pendulum(self.params.clone(), cfg.clone()),
            PlantKind::LinearizedPendulum => linearized_pendulum_env(&self.params, cfg.clone()),
        }
    }

    /// Linear model used for verification and retraining.
    pub fn linear(&self) -> LinearSystem {
        linearize_pendulum(&self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    Values(Vec<f64>),
    Geometric { start: f64, stop: f64, count: usize },
}

impl Grid {
    pub fn values(&self) -> Result<Vec<f64>, CliError> {
        match *self {
            Grid::Values(ref v) => Ok(v.clone()),
            Grid::Geometric { start, stop, count } => {
                if !(start > 0.0 && stop > 0.0) || count == 0 {
                    return Err(CliError::Usage("geometric grid needs positive ends and count".into()));
                }
                if count == 1 {
                    return Ok(vec![start]);
                }
                let ratio = (stop / start).powf(1.0 / (count - 1) as f64);
                Ok((0..count)
                    .map(|i| {
                        if i + 1 == count {
                            stop
                        } else {
                            start * ratio.powi(i as i32)
                        }
                    })
                    .collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub rule: TriggerKind,
    pub xi: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub rollouts: usize,
    pub angle_limit: f64,
    pub grids: Vec<SweepGrid>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rollouts: 10,
            angle_limit: std::f64::consts::FRAC_PI_2,
            grids: vec![
                SweepGrid {
                    rule: TriggerKind::Always,
                    xi: Grid::Values(vec![0.0]),
                },
                SweepGrid {
                    rule: TriggerKind::StateDiff,
                    xi: Grid::Geometric {
                        start: 0.1,
                        stop: 1.0,
                        count: 30,
                    },
                },
            ],
        }
    }
}

/// Box `M` of states to certify, and the input bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Defaults to the plant's torque limit.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub action_limit: Option<Vec<f64>>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        let deg = std::f64::consts::PI / 180.0;
        Self {
            lower: vec![-2.5 * deg, -5.0 * deg],
            upper: vec![2.5 * deg, 5.0 * deg],
            action_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Saved policy directory for evaluate, verify and retrain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PathBuf>,
    pub plant: PlantConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub region: RegionConfig,
    #[serde(default)]
    pub verifier: VerifierConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn region(&self) -> Result<(BoxRegion, Vec<f64>), CliError> {
        let region = BoxRegion::new(self.region.lower.clone(), self.region.upper.clone())
            .map_err(|e| CliError::Usage(format!("region: {e}")))?;
        let limit = self
            .region
            .action_limit
            .clone()
            .unwrap_or_else(|| vec![self.plant.params.max_torque]);
        Ok((region, limit))
    }

    pub fn policy_dir(&self) -> Result<&Path, CliError> {
        self.policy
            .as_deref()
            .ok_or_else(|| CliError::Usage("no policy given (use --policy or set `policy` in the config)".into()))
    }
}
