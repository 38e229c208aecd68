//! JSON experiment configuration.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::estimator;
use crate::fixtures::{fixture, Problem};
use crate::measures::{CostSpec, DiscreteMeasure, SampleSource};
use crate::sinkhorn::{DEFAULT_MAX_ITER, DEFAULT_TOL};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Atoms {
    Scalars(Vec<f64>),
    Points(Vec<Vec<f64>>),
}

impl Atoms {
    fn points(&self) -> Vec<Vec<f64>> {
        match self {
            Atoms::Scalars(v) => v.iter().map(|x| vec![*x]).collect(),
            Atoms::Points(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureConfig {
    pub atoms: Atoms,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EtaChoice {
    #[default]
    Cost,
    CustomMatrix { matrix: Vec<Vec<f64>> },
}

fn default_eps() -> f64 {
    1.0
}
fn default_tol() -> f64 {
    DEFAULT_TOL
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_n_list() -> Vec<usize> {
    vec![12]
}
fn default_replicates() -> usize {
    1000
}
fn default_method() -> String {
    "auto".into()
}
fn default_strict() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho0: Option<MeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<MeasureConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost: Option<CostSpec>,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub eta: EtaChoice,
    #[serde(default = "default_n_list")]
    pub n_list: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_method")]
    pub method: String,
    /// Overrides the experiment's natural sampling source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SampleSource>,
    /// Number of limit-law draws; ten times the replicates when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit_draws: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default = "default_strict")]
    pub strict: bool,
}

impl ExperimentConfig {
    /// Defaults for a named fixture.
    pub fn for_fixture(name: &str) -> Self {
        Self {
            fixture: Some(name.to_string()),
            rho0: None,
            rho1: None,
            cost: None,
            eps: default_eps(),
            tol: default_tol(),
            max_iter: default_max_iter(),
            eta: EtaChoice::Cost,
            n_list: default_n_list(),
            replicates: default_replicates(),
            seed: 0,
            method: default_method(),
            source: None,
            limit_draws: None,
            output_dir: None,
            strict: default_strict(),
        }
    }

    pub fn fixture_label(&self) -> String {
        self.fixture.clone().unwrap_or_else(|| "custom".into())
    }

    pub fn problem(&self) -> Result<Problem> {
        let mut problem = match &self.fixture {
            Some(name) => fixture(name)?,
            None => {
                let (Some(r0), Some(r1), Some(cost)) = (&self.rho0, &self.rho1, &self.cost) else {
                    return Err(violation(".", "either `fixture` or all of `rho0`, `rho1`, `cost` are required"));
                };
                let rho0 = DiscreteMeasure::new(r0.atoms.points(), r0.weights.clone())
                    .map_err(|e| violation(".rho0", &e.to_string()))?;
                let rho1 = DiscreteMeasure::new(r1.atoms.points(), r1.weights.clone())
                    .map_err(|e| violation(".rho1", &e.to_string()))?;
                Problem::new(rho0, rho1, cost.clone(), self.eps).map_err(|e| violation(".cost", &e.to_string()))?
            }
        };
        problem.eps = self.eps;
        Ok(problem)
    }

    pub fn eta_matrix(&self, problem: &Problem) -> Result<DMatrix<f64>> {
        match &self.eta {
            EtaChoice::Cost => Ok(problem.cost.clone()),
            EtaChoice::CustomMatrix { matrix } => {
                let (m0, m1) = problem.cost.shape();
                if matrix.len() != m0 || matrix.iter().any(|r| r.len() != m1) {
                    return Err(violation(".eta.matrix", &format!("expected a {m0}x{m1} matrix")));
                }
                if matrix.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(violation(".eta.matrix", "entries must be finite"));
                }
                Ok(DMatrix::from_fn(m0, m1, |i, j| matrix[i][j]))
            }
        }
    }

    pub fn limit_draws(&self) -> usize {
        self.limit_draws.unwrap_or(10 * self.replicates)
    }

    /// Semantic checks beyond the JSON shape.
    pub fn validate(&self) -> Result<()> {
        if self.fixture.is_some() && (self.rho0.is_some() || self.rho1.is_some() || self.cost.is_some()) {
            return Err(violation(".fixture", "a fixture cannot be combined with explicit measures"));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(violation(".eps", "must be a positive number"));
        }
        if !(self.tol > 0.0 && self.tol <= 1e-6) {
            return Err(violation(".tol", "must lie in (0, 1e-6]"));
        }
        if self.max_iter == 0 {
            return Err(violation(".max_iter", "must be positive"));
        }
        if self.replicates < 100 {
            return Err(violation(".replicates", "at least 100 replicates are required"));
        }
        let method = estimator(&self.method).map_err(|_| violation(".method", "expected brute, permanent or auto"))?;
        if self.n_list.is_empty() {
            return Err(violation(".n_list", "must not be empty"));
        }
        for (i, &n) in self.n_list.iter().enumerate() {
            if n == 0 || n > method.max_n() {
                return Err(violation(
                    &format!(".n_list[{i}]"),
                    &format!("N must lie in 1..={} for method {}", method.max_n(), method.name()),
                ));
            }
        }
        if let Some(0) = self.limit_draws {
            return Err(violation(".limit_draws", "must be positive"));
        }
        let problem = self.problem()?;
        self.eta_matrix(&problem)?;
        Ok(())
    }
}

fn violation(path: &str, message: &str) -> Error {
    Error::SchemaViolation {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// Parses and validates a config from JSON text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { path } else { format!(".{path}") };
        violation(&path, &e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    parse_config(&text)
}

pub fn dump_config(config: &ExperimentConfig) -> Result<String> {
    Ok(serde_json::to_string_pretty(config)?)
}
