//! Run configuration. Every section has defaults so a partial document is
//! enough; unknown keys are rejected at every level.

use frge_core::convex::{Axis, ProbeConfig};
use frge_core::flow::{Controller, InitMode};
use frge_core::functionals::Budget;
use frge_core::model::{Interaction, ModelSpec, Window};
use frge_core::regulator::SamplePlan;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::LabError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    pub model: ModelSpec,
    /// `litim`, `exponential` or `table:<path>`.
    pub regulator: String,
    /// Accept odd interactions whose integrability cannot be certified.
    pub allow_unbounded: bool,
    pub budget: BudgetConfig,
    pub regulator_check: PlanConfig,
    pub exact: ExactConfig,
    pub flow: FlowConfig,
    pub frge_check: CheckConfig,
    pub converge: ConvergeConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::single_mode(1.0, 1.0, Interaction::quartic(0.1)),
            regulator: "litim".into(),
            allow_unbounded: false,
            budget: BudgetConfig::default(),
            regulator_check: PlanConfig::default(),
            exact: ExactConfig::default(),
            flow: FlowConfig::default(),
            frge_check: CheckConfig::default(),
            converge: ConvergeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetConfig {
    pub tolerance: f64,
    pub newton_tolerance: f64,
    pub newton_max_iterations: usize,
    pub polish_steps: usize,
    pub self_check: bool,
    pub max_source: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        let b = Budget::default();
        Self {
            tolerance: b.tolerance,
            newton_tolerance: b.newton_tolerance,
            newton_max_iterations: b.newton_max_iterations,
            polish_steps: b.polish_steps,
            self_check: b.self_check,
            max_source: b.max_source,
        }
    }
}

impl BudgetConfig {
    pub fn budget(&self) -> Budget {
        Budget {
            tolerance: self.tolerance,
            levels: None,
            newton_tolerance: self.newton_tolerance,
            newton_max_iterations: self.newton_max_iterations,
            polish_steps: self.polish_steps,
            self_check: self.self_check,
            max_source: self.max_source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    /// Regulators to check; empty means the top-level `regulator`.
    pub regulators: Vec<String>,
    pub k_max: f64,
    pub p_max: f64,
    pub samples: usize,
    pub seed: u64,
    pub fd_rel_tol: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        let p = SamplePlan::default();
        Self { regulators: Vec::new(), k_max: p.k_max, p_max: p.p_max, samples: p.samples, seed: p.seed, fd_rel_tol: p.fd_rel_tol }
    }
}

impl PlanConfig {
    pub fn plan(&self) -> SamplePlan {
        SamplePlan {
            k_max: self.k_max,
            p_max: self.p_max,
            samples: self.samples,
            seed: self.seed,
            fd_rel_tol: self.fd_rel_tol,
            ..SamplePlan::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExactConfig {
    pub ks: Vec<f64>,
}

impl Default for ExactConfig {
    fn default() -> Self {
        Self { ks: vec![10.0, 1.0, 0.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Grid,
    Vertex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub representation: Representation,
    pub init: InitMode,
    pub k_uv: f64,
    pub k_to: f64,
    pub checkpoints: Vec<f64>,
    pub rtol: f64,
    pub atol: f64,
    pub freeze_boundary: bool,
    /// Evaluate the exact action at every grid checkpoint.
    pub compare: bool,
    pub compare_radius: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let c = Controller::default();
        Self {
            representation: Representation::Grid,
            init: InitMode::Exact,
            k_uv: 100.0,
            k_to: 0.0,
            checkpoints: vec![10.0, 1.0, 0.0],
            rtol: c.rtol,
            atol: c.atol,
            freeze_boundary: false,
            compare: true,
            compare_radius: 2.0,
        }
    }
}

impl FlowConfig {
    pub fn controller(&self) -> Controller {
        Controller { rtol: self.rtol, atol: self.atol, ..Controller::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Probe {
    pub k: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Empty means five default probes along the zero-momentum mode.
    pub probes: Vec<Probe>,
    pub tolerance: f64,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { probes: Vec::new(), tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub radius: f64,
    pub nodes: usize,
}

impl AxisConfig {
    fn axis(&self) -> Axis {
        Axis::symmetric(self.radius, self.nodes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvergeConfig {
    /// Scalar windows `r_n` of the sequence; the model's own window is the limit.
    pub r: Vec<f64>,
    pub source_axis: AxisConfig,
    pub field_axis: AxisConfig,
    pub radius: f64,
    pub aw_radii: Vec<f64>,
    pub dictionary: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for ConvergeConfig {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            r: (1..=6).map(|n| 1.0 - 0.5f64.powi(n)).collect(),
            source_axis: AxisConfig { radius: p.source_axis.max, nodes: p.source_axis.nodes },
            field_axis: AxisConfig { radius: p.field_axis.max, nodes: p.field_axis.nodes },
            radius: p.radius,
            aw_radii: p.aw_radii,
            dictionary: p.dictionary,
            samples: p.samples,
            seed: p.seed,
        }
    }
}

impl ConvergeConfig {
    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            source_axis: self.source_axis.axis(),
            field_axis: self.field_axis.axis(),
            radius: self.radius,
            aw_radii: self.aw_radii.clone(),
            dictionary: self.dictionary.clone(),
            samples: self.samples,
            seed: self.seed,
        }
    }

    pub fn sequence(&self, base: &ModelSpec) -> Vec<ModelSpec> {
        self.r
            .iter()
            .map(|&r| ModelSpec { window: Window::Scalar { r }, ..base.clone() })
            .collect()
    }
}

impl LabConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, LabError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))
    }

    /// Canonical JSON: object keys sorted, defaults filled in.
    pub fn canonical(&self) -> String {
        serde_json::to_value(self).expect("config serialises").to_string()
    }

    /// First 8 bytes of the SHA-256 of the canonical JSON, as hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
