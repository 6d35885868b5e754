//! Experiment configuration files.

use std::path::{Path, PathBuf};

use filtertube::asynchronous::AsyncConfig;
use filtertube::sim::{GridSpec, RoaMethod, SamplerSpec};
use filtertube::sltmpc::SigmaMode;
use filtertube::sysmodel::{double_integrator, vtol, CostSpec, DoubleIntegratorParams, UncertainLTI, VtolParams};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    DoubleIntegrator,
    Vtol,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Receding,
    Shrinking,
    Async,
}

/// Optional overrides of the cost regularization weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOverrides {
    pub p_reg: Option<f64>,
    pub lambda0_reg: Option<f64>,
}

/// Parameter varied by a region-of-attraction sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    EpsA,
    EpsB,
    SigmaW,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::EpsA => "eps_a",
            SweepParam::EpsB => "eps_b",
            SweepParam::SigmaW => "sigma_w",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoaSection {
    pub grid: GridSpec,
    pub method: RoaMethod,
    pub horizons: Vec<usize>,
    pub sweeps: Vec<Sweep>,
}

impl Default for RoaSection {
    fn default() -> Self {
        RoaSection { grid: GridSpec::default(), method: RoaMethod::Convex, horizons: vec![5, 10], sweeps: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AsyncSection {
    #[serde(flatten)]
    pub scheme: AsyncConfig,
    /// Also run the receding-horizon controller on the same realizations.
    pub compare: bool,
}

impl Default for AsyncSection {
    fn default() -> Self {
        AsyncSection { scheme: AsyncConfig::default(), compare: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemId,
    #[serde(default)]
    pub double_integrator: DoubleIntegratorParams,
    #[serde(default)]
    pub vtol: VtolParams,
    #[serde(default)]
    pub cost: CostOverrides,
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    pub horizon: usize,
    #[serde(default = "default_sigma_mode")]
    pub sigma_mode: SigmaMode,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub roa: RoaSection,
    #[serde(default, rename = "async")]
    pub async_: AsyncSection,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn default_controller() -> ControllerKind {
    ControllerKind::Receding
}

fn default_sigma_mode() -> SigmaMode {
    SigmaMode::Diagonal
}

fn default_steps() -> usize {
    25
}

fn default_runs() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {0}: {1}")]
    Read(PathBuf, std::io::Error),
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(ExperimentConfig, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read(path.to_path_buf(), e))?;
        let cfg = Self::parse(&text)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<ExperimentConfig, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that can be made before building any model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.horizon < 2 {
            return bad("horizon must be at least 2");
        }
        let n = match self.system {
            SystemId::DoubleIntegrator => 2,
            SystemId::Vtol => 6,
        };
        if !self.x0.is_empty() && self.x0.len() != n {
            return bad(&format!("x0 must have {n} entries"));
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return bad("x0 must be finite");
        }
        let di = &self.double_integrator;
        if di.eps_a < 0.0 || di.eps_b < 0.0 || di.sigma_w < 0.0 {
            return bad("uncertainty levels must be nonnegative");
        }
        if self.async_.scheme.memory_size < 2 {
            return bad("memory_size must be at least 2");
        }
        if self.async_.scheme.cadence == 0 {
            return bad("cadence must be positive");
        }
        for s in &self.async_.scheme.seeds {
            if s.slot < 2 || s.slot >= self.async_.scheme.memory_size {
                return bad("seed slots must lie in 2..memory_size");
            }
            if s.state.len() != n {
                return bad(&format!("seed states must have {n} entries"));
            }
        }
        if self.roa.grid.nx == 0 || self.roa.grid.ny == 0 {
            return bad("grid must be nonempty");
        }
        if self.roa.horizons.iter().any(|h| *h < 2) {
            return bad("RoA horizons must be at least 2");
        }
        for sw in &self.roa.sweeps {
            if sw.values.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return bad("sweep values must be nonnegative");
            }
        }
        if let Some(p) = self.cost.p_reg {
            if p < 0.0 {
                return bad("p_reg must be nonnegative");
            }
        }
        Ok(())
    }

    pub fn model(&self) -> (UncertainLTI, CostSpec) {
        self.model_with(&self.double_integrator)
    }

    pub fn model_with(&self, di: &DoubleIntegratorParams) -> (UncertainLTI, CostSpec) {
        let (sys, mut cost) = match self.system {
            SystemId::DoubleIntegrator => double_integrator(di),
            SystemId::Vtol => vtol(&self.vtol),
        };
        if let Some(p) = self.cost.p_reg {
            cost.p_reg = p;
        }
        if let Some(l) = self.cost.lambda0_reg {
            cost.lambda0_reg = l;
        }
        (sys, cost)
    }

    /// Initial state, defaulting to the standard start of each system.
    pub fn initial_state(&self) -> Vec<f64> {
        if !self.x0.is_empty() {
            return self.x0.clone();
        }
        match self.system {
            SystemId::DoubleIntegrator => vec![-7.0, 0.0],
            SystemId::Vtol => vec![10.0, 0.0, 12.5, 0.0, 0.0, 0.0],
        }
    }
}
