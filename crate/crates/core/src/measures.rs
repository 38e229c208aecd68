//! Finite probability measures, cost matrices and seeded sampling.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sinkhorn::GibbsKernel;

/// Probability measure on finitely many points of R^d.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Builds a measure, rescaling the weights so they sum to one.
    pub fn new(atoms: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::EmptySupport);
        }
        if atoms.len() != weights.len() {
            return Err(Error::LengthMismatch(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        let dim = atoms[0].len();
        for (i, a) in atoms.iter().enumerate() {
            if a.len() != dim {
                return Err(Error::LengthMismatch(format!(
                    "atom {i} has dimension {} instead of {dim}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("atom {i} is not finite")));
            }
            if atoms[..i].iter().any(|b| b == a) {
                return Err(Error::DuplicateAtom(i));
            }
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::NonpositiveWeight { index, value });
            }
        }
        let total = compensated_sum(weights.iter().copied());
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { atoms, weights })
    }

    /// Measure on the integers `0..weights.len()` viewed as points of R.
    pub fn on_integers(weights: Vec<f64>) -> Result<Self> {
        let atoms = (0..weights.len()).map(|i| vec![i as f64]).collect();
        Self::new(atoms, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws `n` atom indices by inverse-CDF over insertion order.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        let cdf = cumulative(&self.weights);
        (0..n).map(|_| invert_cdf(&cdf, rng.random::<f64>())).collect()
    }
}

/// Neumaier summation.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect()
}

fn invert_cdf(cdf: &[f64], u: f64) -> usize {
    let total = *cdf.last().expect("non-empty cdf");
    let target = u * total;
    cdf.iter()
        .position(|&c| target < c)
        .unwrap_or(cdf.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CostSpec {
    SquaredEuclidean,
    /// `|x - y|^p`.
    EuclideanPower { p: f64 },
    ExplicitMatrix { matrix: Vec<Vec<f64>> },
}

impl CostSpec {
    /// Growth exponent of the cost; carried as metadata.
    pub fn growth_exponent(&self) -> f64 {
        match self {
            CostSpec::SquaredEuclidean => 2.0,
            CostSpec::EuclideanPower { p } => *p,
            CostSpec::ExplicitMatrix { .. } => 1.0,
        }
    }
}

/// Dense cost matrix, rows indexed by source atoms and columns by target atoms.
pub type CostMatrix = DMatrix<f64>;

pub fn cost_matrix(
    spec: &CostSpec,
    rho0: &DiscreteMeasure,
    rho1: &DiscreteMeasure,
) -> Result<CostMatrix> {
    let (m0, m1) = (rho0.len(), rho1.len());
    let dist = |x: &[f64], y: &[f64]| -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch(
                "source and target atoms differ in dimension".into(),
            ));
        }
        Ok(x.iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    };
    let c = match spec {
        CostSpec::SquaredEuclidean => {
            let mut c = DMatrix::zeros(m0, m1);
            for i in 0..m0 {
                for j in 0..m1 {
                    let d = dist(&rho0.atoms[i], &rho1.atoms[j])?;
                    c[(i, j)] = d * d;
                }
            }
            c
        }
        CostSpec::EuclideanPower { p } => {
            if !(*p >= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "cost exponent must be at least 1, got {p}"
                )));
            }
            let mut c = DMatrix::zeros(m0, m1);
            for i in 0..m0 {
                for j in 0..m1 {
                    c[(i, j)] = dist(&rho0.atoms[i], &rho1.atoms[j])?.powf(*p);
                }
            }
            c
        }
        CostSpec::ExplicitMatrix { matrix } => {
            if matrix.len() != m0 || matrix.iter().any(|r| r.len() != m1) {
                return Err(Error::LengthMismatch(format!(
                    "cost matrix must be {m0}x{m1}"
                )));
            }
            let mut c = DMatrix::zeros(m0, m1);
            for (i, row) in matrix.iter().enumerate() {
                for (j, &v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::InvalidParameter(format!(
                            "cost entry ({i}, {j}) is not finite"
                        )));
                    }
                    if v < 0.0 {
                        return Err(Error::NegativeCost {
                            row: i,
                            col: j,
                            value: v,
                        });
                    }
                    c[(i, j)] = v;
                }
            }
            c
        }
    };
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    Product,
    Bridge,
}

/// `N` index pairs into the atoms of the two marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub x_idx: Vec<usize>,
    pub y_idx: Vec<usize>,
    pub source: SampleSource,
    pub seed: u64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x_idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_idx.is_empty()
    }

    /// `out[(i, j)] = table[(x_i, y_j)]`.
    pub fn gather(&self, table: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.len();
        DMatrix::from_fn(n, n, |i, j| table[(self.x_idx[i], self.y_idx[j])])
    }
}

/// Random stream keyed by a master seed and a replicate index.
///
/// Each replicate gets its own ChaCha stream, so results do not depend on
/// which thread ran which replicate.
pub struct SeededStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl SeededStream {
    pub fn new(seed: u64, replicate: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replicate);
        Self { seed, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Independent draws from `rho0 ⊗ rho1`.
pub fn sample_product(
    rho0: &DiscreteMeasure,
    rho1: &DiscreteMeasure,
    n: usize,
    stream: &mut SeededStream,
) -> SampleBatch {
    let x_idx = rho0.sample(n, stream.rng());
    let y_idx = rho1.sample(n, stream.rng());
    SampleBatch {
        x_idx,
        y_idx,
        source: SampleSource::Product,
        seed: stream.seed(),
    }
}

/// Pairs drawn from the bridge coupling, row-major over its cells.
pub fn sample_bridge(kernel: &GibbsKernel, n: usize, stream: &mut SeededStream) -> SampleBatch {
    let m1 = kernel.mu.ncols();
    let flat: Vec<f64> = kernel.mu.transpose().iter().copied().collect();
    let cdf = cumulative(&flat);
    let (x_idx, y_idx) = (0..n)
        .map(|_| {
            let cell = invert_cdf(&cdf, stream.rng().random::<f64>());
            (cell / m1, cell % m1)
        })
        .unzip();
    SampleBatch {
        x_idx,
        y_idx,
        source: SampleSource::Bridge,
        seed: stream.seed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizes_weights() {
        let m = DiscreteMeasure::on_integers(vec![1.0, 1.0]).unwrap();
        assert_eq!(m.weights(), &[0.5, 0.5]);
        let m = DiscreteMeasure::on_integers(vec![0.3, 0.7]).unwrap();
        assert_eq!(m.weights(), &[0.3, 0.7]);
    }

    #[test]
    fn rejects_bad_measures() {
        assert!(matches!(
            DiscreteMeasure::new(vec![vec![0.0], vec![0.0]], vec![1.0, 2.0]),
            Err(Error::DuplicateAtom(1))
        ));
        assert!(matches!(
            DiscreteMeasure::new(vec![], vec![]),
            Err(Error::EmptySupport)
        ));
        assert!(matches!(
            DiscreteMeasure::on_integers(vec![1.0, 0.0]),
            Err(Error::NonpositiveWeight { index: 1, .. })
        ));
    }

    #[test]
    fn cost_kinds() {
        let a = DiscreteMeasure::on_integers(vec![1.0, 1.0]).unwrap();
        let c = cost_matrix(&CostSpec::SquaredEuclidean, &a, &a).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));

        let x = DiscreteMeasure::new(vec![vec![0.0], vec![2.0]], vec![1.0, 1.0]).unwrap();
        let y = DiscreteMeasure::new(vec![vec![1.0]], vec![1.0]).unwrap();
        let c = cost_matrix(&CostSpec::EuclideanPower { p: 1.0 }, &x, &y).unwrap();
        assert_eq!(c, DMatrix::from_row_slice(2, 1, &[1.0, 1.0]));

        let bad = CostSpec::ExplicitMatrix {
            matrix: vec![vec![0.0, -1.0], vec![1.0, 0.0]],
        };
        assert!(matches!(
            cost_matrix(&bad, &a, &a),
            Err(Error::NegativeCost { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn point_mass_sampling() {
        let m = DiscreteMeasure::on_integers(vec![1.0]).unwrap();
        let mut s = SeededStream::new(3, 0);
        assert_eq!(m.sample(5, s.rng()), vec![0; 5]);
    }

    #[test]
    fn sampling_is_reproducible() {
        let m = DiscreteMeasure::on_integers(vec![0.2, 0.5, 0.3]).unwrap();
        let a = m.sample(100, SeededStream::new(11, 4).rng());
        let b = m.sample(100, SeededStream::new(11, 4).rng());
        let c = m.sample(100, SeededStream::new(11, 5).rng());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn fair_coin_frequency() {
        let m = DiscreteMeasure::on_integers(vec![0.5, 0.5]).unwrap();
        let n = 1_000_000;
        let draws = m.sample(n, SeededStream::new(2024, 0).rng());
        let zeros = draws.iter().filter(|&&i| i == 0).count() as f64 / n as f64;
        assert!((zeros - 0.5).abs() <= 0.002, "{zeros}");
    }
}
