//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use agdmpc::agd::AgdSettings;
use agdmpc::cost::{CostWeights, ReferenceSpec};
use agdmpc::ddp::DdpSettings;
use agdmpc::dynamics::{ModelSpec, StateVec};
use agdmpc::mpc::{DisturbanceEvent, MpcConfig};
use agdmpc::ocp::OcpDef;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Solver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub cost: CostSection,
    pub ocp: OcpSection,
    #[serde(default)]
    pub agd: AgdSettings,
    #[serde(default)]
    pub ddp: DdpSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpc: Option<MpcSection>,
    #[serde(default)]
    pub disturbances: Vec<DisturbanceEvent>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub weights: CostWeights,
    pub reference: ReferenceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcpSection {
    pub horizon: usize,
    pub dt: f64,
    pub x0: Vec<f64>,
}

/// Closed-loop settings. `iters_per_cycle` is either one budget for both
/// solvers or an `{"agd": .., "ddp": ..}` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcSection {
    pub sim_duration: f64,
    pub control_dt: f64,
    pub iters_per_cycle: IterBudget,
    pub preview_reference: bool,
    pub seed: u64,
    pub warm_start: bool,
    pub log_grad_norm: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IterBudget {
    Uniform(usize),
    PerSolver { agd: usize, ddp: usize },
}

impl Default for MpcSection {
    fn default() -> Self {
        let d = MpcConfig::default();
        MpcSection {
            sim_duration: d.sim_duration,
            control_dt: d.control_dt,
            iters_per_cycle: IterBudget::Uniform(d.iters_per_cycle),
            preview_reference: d.preview_reference,
            seed: d.seed,
            warm_start: d.warm_start,
            log_grad_norm: d.log_grad_norm,
        }
    }
}

impl MpcSection {
    pub fn resolve(&self, solver: Solver) -> MpcConfig {
        let iters_per_cycle = match (self.iters_per_cycle, solver) {
            (IterBudget::Uniform(n), _) => n,
            (IterBudget::PerSolver { agd, .. }, Solver::Agd) => agd,
            (IterBudget::PerSolver { ddp, .. }, Solver::Ddp) => ddp,
        };
        MpcConfig {
            sim_duration: self.sim_duration,
            control_dt: self.control_dt,
            iters_per_cycle,
            preview_reference: self.preview_reference,
            seed: self.seed,
            warm_start: self.warm_start,
            log_grad_norm: self.log_grad_norm,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Invalid(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text).map_err(|(line, msg)| CliError::Invalid(format!("{}:{line}: {msg}", path.display())))
    }

    /// Parses and validates; errors carry the 1-based line they refer to.
    pub fn parse(text: &str) -> Result<Self, (usize, String)> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| (e.line().max(1), e.to_string()))?;
        cfg.validate().map_err(|(section, key, msg)| (key_line(text, section, key), msg))?;
        Ok(cfg)
    }

    /// Semantic checks; errors name the offending section and key.
    fn validate(&self) -> Result<(), (&'static str, &'static str, String)> {
        let m = &self.model;
        let o = &self.ocp;
        if o.horizon == 0 {
            return Err(("ocp", "horizon", "ocp.horizon must be positive".into()));
        }
        if !(o.dt.is_finite() && o.dt > 0.0) {
            return Err(("ocp", "dt", format!("ocp.dt must be positive, got {}", o.dt)));
        }
        if o.x0.len() != m.nx() || o.x0.iter().any(|v| !v.is_finite()) {
            return Err(("ocp", "x0", format!("ocp.x0 must hold {} finite values", m.nx())));
        }
        let w = &self.cost.weights;
        w.validate(m).map_err(|e| ("cost", "weights", e.to_string()))?;
        self.cost.reference.validate(m).map_err(|e| ("cost", "reference", e.to_string()))?;
        self.agd.validate().map_err(|e| ("agd", "agd", e.to_string()))?;
        self.ddp.validate().map_err(|e| ("ddp", "ddp", e.to_string()))?;
        if let Some(mpc) = &self.mpc {
            for solver in [Solver::Agd, Solver::Ddp] {
                mpc.resolve(solver).validate().map_err(|e| ("mpc", "mpc", e.to_string()))?;
            }
            if mpc.control_dt > o.dt {
                return Err(("mpc", "control_dt", "mpc.control_dt must not exceed ocp.dt".into()));
            }
        }
        for ev in &self.disturbances {
            ev.validate(m.nu()).map_err(|e| ("disturbances", "disturbances", e.to_string()))?;
        }
        Ok(())
    }

    pub fn ocp_def(&self) -> OcpDef {
        OcpDef::new(
            self.model.clone(),
            self.cost.weights.clone(),
            self.cost.reference.clone(),
            self.ocp.horizon,
            self.ocp.dt,
            StateVec::from_column_slice(&self.ocp.x0),
        )
        .expect("validated config")
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Line of `"key"` inside `"section"`, falling back to the section's line.
fn key_line(text: &str, section: &str, key: &str) -> usize {
    let line_of = |pos: usize| text[..pos].matches('\n').count() + 1;
    let Some(start) = text.find(&format!("\"{section}\"")) else {
        return 1;
    };
    match text[start..].find(&format!("\"{key}\"")) {
        Some(off) if key != section => line_of(start + off),
        _ => line_of(start),
    }
}
