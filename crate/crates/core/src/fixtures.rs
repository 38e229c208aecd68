//! Built-in two-point problems, looked up by name.

use crate::error::{Error, Result};
use crate::measures::{cost_matrix, CostMatrix, CostSpec, DiscreteMeasure};
use crate::sinkhorn::{solve_bridge, GibbsKernel, SinkhornReport, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// A fully specified transport problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub rho0: DiscreteMeasure,
    pub rho1: DiscreteMeasure,
    pub cost_spec: CostSpec,
    pub cost: CostMatrix,
    pub eps: f64,
}

impl Problem {
    pub fn new(rho0: DiscreteMeasure, rho1: DiscreteMeasure, cost_spec: CostSpec, eps: f64) -> Result<Self> {
        let cost = cost_matrix(&cost_spec, &rho0, &rho1)?;
        Ok(Self {
            rho0,
            rho1,
            cost_spec,
            cost,
            eps,
        })
    }

    pub fn solve(&self) -> Result<(GibbsKernel, SinkhornReport)> {
        solve_bridge(&self.rho0, &self.rho1, &self.cost, self.eps, DEFAULT_TOL, DEFAULT_MAX_ITER)
    }
}

pub trait Fixture: Send + Sync {
    fn name(&self) -> &'static str;
    fn description(&self) -> &'static str;
    fn build(&self) -> Result<Problem>;
}

struct TwoPoint {
    name: &'static str,
    description: &'static str,
    target: [f64; 2],
}

impl Fixture for TwoPoint {
    fn name(&self) -> &'static str {
        self.name
    }

    fn description(&self) -> &'static str {
        self.description
    }

    fn build(&self) -> Result<Problem> {
        let rho0 = DiscreteMeasure::on_integers(vec![0.5, 0.5])?;
        let rho1 = DiscreteMeasure::on_integers(self.target.to_vec())?;
        Problem::new(rho0, rho1, CostSpec::SquaredEuclidean, 1.0)
    }
}

pub fn registry() -> Vec<Box<dyn Fixture>> {
    vec![
        Box::new(TwoPoint {
            name: "sym2",
            description: "atoms {0,1}, uniform marginals, squared distance, eps = 1",
            target: [0.5, 0.5],
        }),
        Box::new(TwoPoint {
            name: "asym23",
            description: "atoms {0,1}, source uniform, target (0.3, 0.7), squared distance, eps = 1",
            target: [0.3, 0.7],
        }),
    ]
}

pub fn fixture_names() -> Vec<&'static str> {
    registry().iter().map(|f| f.name()).collect()
}

pub fn fixture(name: &str) -> Result<Problem> {
    registry()
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| Error::Unknown {
            kind: "fixture",
            name: name.to_string(),
        })?
        .build()
}
