//! TOML experiment configuration.
//!
//! ```toml
//! scenario = "mean/commonnoise"
//! seed = 7
//!
//! [grid]
//! horizon = 1.0
//! steps = 1024
//!
//! [ensemble]
//! particles = 1000
//! replications = 32
//!
//! [ladder]
//! from = 4
//! to = 8
//! ```
//!
//! Every section has defaults; each command reads the sections it needs and
//! validates them before any simulation starts.

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Output directory; the `--out` flag takes precedence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub ladder: LadderConfig,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Coefficients>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derivative: Option<DerivativeConfig>,
    #[serde(default)]
    pub debug: DebugConfig,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 1024 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub particles: usize,
    pub replications: u32,
    #[serde(default)]
    pub antithetic: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            replications: 32,
            antithetic: false,
        }
    }
}

/// ε ladder: either dyadic exponents `ε = 2^-from .. 2^-to` (times `T`) or an
/// explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderConfig {
    #[serde(default = "default_from")]
    pub from: u32,
    #[serde(default = "default_to")]
    pub to: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
}

fn default_from() -> u32 {
    4
}

fn default_to() -> u32 {
    8
}

impl Default for LadderConfig {
    fn default() -> Self {
        Self {
            from: default_from(),
            to: default_to(),
            eps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    /// Multiplier `C` in the bounds `C (Δ^{1/2} + N^{-1/2})`.
    #[serde(default = "default_residual_factor")]
    pub residual_factor: f64,
    /// Duality inequality tolerance; defaults to `Δ^{1/2} + N^{-1/2}`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    /// Extra slack in `|J_feedback - V(0, m_0)| ≤ CI + bias`; defaults to
    /// `2 (Δ + N^{-1/2})`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
}

fn default_theta() -> f64 {
    0.05
}

fn default_factor() -> f64 {
    1.1
}

fn default_residual_factor() -> f64 {
    3.0
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            theta: default_theta(),
            factor: default_factor(),
            residual_factor: default_residual_factor(),
            tol: None,
            bias: None,
        }
    }
}

/// A registry entry with numeric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Selection {
    pub name: String,
    #[serde(default)]
    pub params: Vec<f64>,
}

impl Selection {
    pub fn new(name: &str, params: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            params: params.to_vec(),
        }
    }
}

/// Scalar coefficients of the `custom` preset. Missing entries are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coefficients {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vol: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub common_vol: Option<Selection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum InitialConfig {
    Dirac { point: f64 },
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    #[serde(default = "default_value_model")]
    pub value_model: String,
    #[serde(default = "default_brute_grid")]
    pub brute_grid: Vec<f64>,
    #[serde(default = "default_pieces")]
    pub pieces: usize,
    /// Extra certificates `(v0, φ ≡ const)` whose residuals are reported.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_v0: Vec<f64>,
    #[serde(default)]
    pub time_frozen: bool,
}

fn default_value_model() -> String {
    "lq".into()
}

fn default_brute_grid() -> Vec<f64> {
    vec![-1.0, -0.5, 0.0, 0.5, 1.0]
}

fn default_pieces() -> usize {
    2
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            value_model: default_value_model(),
            brute_grid: default_brute_grid(),
            pieces: default_pieces(),
            probe_v0: Vec::new(),
            time_frozen: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivativeConfig {
    pub functionals: Vec<Selection>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_atoms")]
    pub atoms: usize,
    #[serde(default = "default_quad_steps")]
    pub quad_steps: usize,
    #[serde(default = "default_derivative_tol")]
    pub tol: f64,
}

fn default_pairs() -> usize {
    100
}

fn default_atoms() -> usize {
    32
}

fn default_quad_steps() -> usize {
    256
}

fn default_derivative_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DebugConfig {
    /// Halve the common-noise integral in `ito-verify`.
    #[serde(default)]
    pub corrupt_common_integral: bool,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn read(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks shared by every command.
    pub fn validate_common(&self) -> Result<(), CliError> {
        let bad = |what: String| Err(CliError::Config(what));
        if !(self.grid.horizon.is_finite() && self.grid.horizon > 0.0) {
            return bad(format!("grid.horizon must be positive, got {}", self.grid.horizon));
        }
        if self.grid.steps == 0 || self.grid.steps > 1 << 20 {
            return bad(format!("grid.steps must be in 1..=2^20, got {}", self.grid.steps));
        }
        if self.ensemble.particles < 2 || self.ensemble.particles > 1_000_000 {
            return bad(format!("ensemble.particles must be in 2..=10^6, got {}", self.ensemble.particles));
        }
        if self.ensemble.replications < 2 || self.ensemble.replications > 100_000 {
            return bad(format!("ensemble.replications must be in 2..=10^5, got {}", self.ensemble.replications));
        }
        if self.ensemble.antithetic && self.ensemble.particles % 2 == 1 {
            return bad("ensemble.antithetic needs an even particle count".into());
        }
        let t = &self.thresholds;
        if !(t.theta.is_finite() && t.theta > 0.0) || !(t.factor.is_finite() && t.factor >= 1.0) {
            return bad(format!("thresholds need theta > 0 and factor ≥ 1, got {} and {}", t.theta, t.factor));
        }
        if !(t.residual_factor.is_finite() && t.residual_factor > 0.0) {
            return bad(format!("thresholds.residual_factor must be positive, got {}", t.residual_factor));
        }
        for (name, v) in [("tol", t.tol), ("bias", t.bias)] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return bad(format!("thresholds.{name} must be non-negative, got {v}"));
                }
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.grid.horizon / self.grid.steps as f64
    }

    /// `Δ^{1/2} + N^{-1/2}`.
    pub fn error_scale(&self) -> f64 {
        self.dt().sqrt() + 1.0 / (self.ensemble.particles as f64).sqrt()
    }
}
