//! Flat JSON experiment configuration.

use std::path::Path;

use degen_lab::{CoefficientKind, MeshParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Solve,
    Mms,
    Sweep,
    Caccioppoli,
    Wlemma,
    Lipschitz,
    Duality,
    Corollary2,
    Trace,
    Hardy,
    Oscillation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Random,
    Sweep,
    Local,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub command: Command,

    pub dim: usize,
    pub xd_length: f64,
    pub xd_cells: usize,
    pub grading_exponent: f64,
    pub xprime_count: usize,
    pub xprime_length: f64,
    pub final_time: f64,
    pub time_count: usize,

    pub nu: f64,
    pub lambda: Option<f64>,
    pub lambdas: Option<Vec<f64>>,
    pub p: Option<f64>,
    pub p_grid: Option<Vec<f64>>,
    pub coefficient_kind: CoefficientKind,
    pub coefficient_kinds: Option<Vec<CoefficientKind>>,
    pub eps: f64,
    pub rho0: f64,
    pub seed: u64,
    /// Number of consecutive seeds starting at `seed`.
    pub samples: u64,
    pub sources: SourceKind,

    pub theta: f64,
    pub linear_tol: f64,
    pub refine: bool,

    /// `M` ladder of the `mms` command.
    pub mms_cells: Vec<usize>,
    /// `dt = dt_factor * (L_d / M)^2` on the ladder.
    pub dt_factor: f64,
    pub min_rate0: f64,
    pub min_rate1: f64,

    /// Inner and outer radii of the local checks.
    pub radius: f64,
    pub outer_radius: f64,

    pub out: Option<String>,
    pub write_binary: bool,
    pub write_matrix_market: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = MeshParams::default();
        Self {
            schema_version: SCHEMA_VERSION,
            command: Command::Solve,
            dim: m.dim,
            xd_length: m.xd_length,
            xd_cells: m.xd_cells,
            grading_exponent: m.grading_exponent,
            xprime_count: m.xprime_count,
            xprime_length: std::f64::consts::TAU,
            final_time: m.final_time,
            time_count: m.time_count,
            nu: 0.5,
            lambda: None,
            lambdas: None,
            p: None,
            p_grid: None,
            coefficient_kind: CoefficientKind::Constant,
            coefficient_kinds: None,
            eps: 0.2,
            rho0: 1.0,
            seed: 0,
            samples: 1,
            sources: SourceKind::Random,
            theta: 1.0,
            linear_tol: 1e-10,
            refine: false,
            mms_cells: vec![16, 32, 64],
            dt_factor: 1.0,
            min_rate0: 1.8,
            min_rate1: 0.9,
            radius: 0.25,
            outer_radius: 0.5,
            out: None,
            write_binary: true,
            write_matrix_market: true,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let probe: serde_json::Value = serde_json::from_str(text).map_err(|e| invalid(format!("malformed JSON: {e}")))?;
        let obj = probe.as_object().ok_or_else(|| invalid("config must be a JSON object"))?;
        for key in ["schema_version", "command"] {
            if !obj.contains_key(key) {
                return Err(invalid(format!("missing required key `{key}`")));
            }
        }
        let cfg: Self = serde_json::from_value(probe).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn mesh_params(&self) -> MeshParams {
        MeshParams {
            dim: self.dim,
            xd_length: self.xd_length,
            xd_cells: self.xd_cells,
            grading_exponent: self.grading_exponent,
            xprime_count: if self.dim == 2 { self.xprime_count } else { 1 },
            xprime_length: self.xprime_length,
            final_time: self.final_time,
            time_count: self.time_count,
        }
    }

    pub fn lambda_grid(&self) -> Vec<f64> {
        self.lambdas.clone().or(self.lambda.map(|l| vec![l])).unwrap_or_else(|| vec![1.0])
    }

    pub fn p_values(&self) -> Vec<f64> {
        self.p_grid.clone().or(self.p.map(|p| vec![p])).unwrap_or_else(|| vec![2.0])
    }

    pub fn kinds(&self) -> Vec<CoefficientKind> {
        self.coefficient_kinds.clone().unwrap_or_else(|| vec![self.coefficient_kind])
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.samples).map(|i| self.seed.wrapping_add(i)).collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.lambda.is_some() && self.lambdas.is_some() {
            return Err(invalid("give either `lambda` or `lambdas`, not both"));
        }
        if self.p.is_some() && self.p_grid.is_some() {
            return Err(invalid("give either `p` or `p_grid`, not both"));
        }
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(invalid(format!("nu = {} outside (0, 1]", self.nu)));
        }
        let lambdas = self.lambda_grid();
        if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(invalid(format!("lambda values must be finite and >= 0, got {lambdas:?}")));
        }
        let ps = self.p_values();
        if ps.is_empty() || ps.iter().any(|p| !(p.is_finite() && *p > 1.0)) {
            return Err(invalid(format!("p values must be finite and > 1, got {ps:?}")));
        }
        if self.kinds().is_empty() {
            return Err(invalid("`coefficient_kinds` is empty"));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(invalid(format!("eps = {} must be finite and >= 0", self.eps)));
        }
        if !(self.rho0 > 0.0 && self.rho0.is_finite()) {
            return Err(invalid(format!("rho0 = {} must be positive", self.rho0)));
        }
        if self.samples == 0 {
            return Err(invalid("samples must be at least 1"));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(invalid(format!("theta = {} outside [1/2, 1]", self.theta)));
        }
        if !(self.linear_tol > 0.0 && self.linear_tol < 1.0) {
            return Err(invalid(format!("linear_tol = {} outside (0, 1)", self.linear_tol)));
        }
        if !(0.0 < self.radius && self.radius < self.outer_radius) {
            return Err(invalid(format!(
                "need 0 < radius < outer_radius, got {} and {}",
                self.radius, self.outer_radius
            )));
        }
        if !(self.dt_factor > 0.0 && self.dt_factor.is_finite()) {
            return Err(invalid(format!("dt_factor = {} must be positive", self.dt_factor)));
        }
        match self.command {
            Command::Mms if self.mms_cells.len() < 3 => Err(invalid("mms needs at least three entries in `mms_cells`")),
            Command::Corollary2 if lambdas != [1.0] => Err(invalid("corollary2 runs at lambda = 1 only")),
            Command::Corollary2 | Command::Trace if ps.iter().any(|&p| p < 2.0) => {
                Err(invalid(format!("{:?} needs p >= 2", self.command)))
            }
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_json(r#"{"schema_version":1,"command":"solve","lamda":2}"#).unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn required_keys() {
        assert!(ExperimentConfig::from_json(r#"{"command":"solve"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version":1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version":2,"command":"solve"}"#).is_err());
    }

    #[test]
    fn echo_round_trips() {
        let cfg = ExperimentConfig::from_json(
            r#"{"schema_version":1,"command":"sweep","lambdas":[1,10,100],"p_grid":[2,3],"coefficient_kinds":["constant","xd_only"]}"#,
        )
        .unwrap();
        let echo = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), cfg);
    }

    #[test]
    fn conflicting_grids_rejected() {
        let err = ExperimentConfig::from_json(r#"{"schema_version":1,"command":"sweep","lambda":1,"lambdas":[1]}"#);
        assert!(err.is_err());
        let err = ExperimentConfig::from_json(r#"{"schema_version":1,"command":"solve","nu":0}"#);
        assert!(err.is_err());
    }
}
