//! Exact evaluation of the Gibbs permutation law, `T_N` and `L_N`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::measures::{compensated_sum, SampleBatch};
use crate::sinkhorn::{scale_to_uniform, GibbsKernel};

pub const BRUTE_MAX_N: usize = 8;
pub const PERMANENT_MAX_N: usize = 16;
pub const PERMANENT_LIMIT: usize = 20;
pub const Q_STAR_MAX_N: usize = 10;
pub const OBJECTIVE_MAX_N: usize = 6;
/// `auto` uses brute force below this size.
pub const AUTO_SWITCH_N: usize = 8;

const SCALING_TOL: f64 = 1e-13;
const SCALING_MAX_ITER: usize = 100_000;

/// Advances `perm` to the next permutation in lexicographic order.
pub fn next_permutation(perm: &mut [usize]) -> bool {
    let n = perm.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && perm[i - 1] >= perm[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while perm[j] <= perm[i - 1] {
        j -= 1;
    }
    perm.swap(i - 1, j);
    perm[i..].reverse();
    true
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut perm: Vec<usize> = (0..n).collect();
    let mut out = vec![perm.clone()];
    while next_permutation(&mut perm) {
        out.push(perm.clone());
    }
    out
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<usize> {
    if !m.is_square() {
        return Err(Error::LengthMismatch(format!("{what} must be square")));
    }
    Ok(m.nrows())
}

/// Ryser permanent with Gray-code subset order.
///
/// Rows are scaled to unit maximum before summation; the true permanent is
/// `value * exp(log_scale)`.
pub fn permanent(w: &DMatrix<f64>) -> Result<(f64, f64)> {
    let n = check_square(w, "permanent input")?;
    if n > PERMANENT_LIMIT {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: PERMANENT_LIMIT,
        });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow);
    }
    if n == 0 {
        return Ok((1.0, 0.0));
    }
    let mut scaled = w.clone();
    let mut log_scale = 0.0;
    for i in 0..n {
        let peak = scaled.row(i).amax();
        if peak == 0.0 {
            return Ok((0.0, 0.0));
        }
        scaled.row_mut(i).scale_mut(1.0 / peak);
        log_scale += peak.ln();
    }
    let value = ryser(&scaled);
    if !value.is_finite() {
        return Err(Error::Overflow);
    }
    Ok((value, log_scale))
}

fn ryser(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).iter().copied().collect()).collect();
    let mut row_sums = vec![0.0; n];
    let mut in_set = vec![false; n];
    let mut sum = 0.0;
    let mut comp = 0.0;
    let mut odd = false;
    for k in 1u64..(1u64 << n) {
        let j = k.trailing_zeros() as usize;
        in_set[j] = !in_set[j];
        odd = !odd;
        let col = &cols[j];
        if in_set[j] {
            for (r, c) in row_sums.iter_mut().zip(col) {
                *r += c;
            }
        } else {
            for (r, c) in row_sums.iter_mut().zip(col) {
                *r -= c;
            }
        }
        let prod: f64 = row_sums.iter().product();
        let term = if odd { -prod } else { prod };
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    let total = sum + comp;
    if n % 2 == 1 {
        -total
    } else {
        total
    }
}

fn minor(w: &DMatrix<f64>, row: usize, col: usize) -> DMatrix<f64> {
    w.clone().remove_row(row).remove_column(col)
}

/// `N x N` sample matrices for one batch.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub eta: DMatrix<f64>,
    pub cost: DMatrix<f64>,
    pub eps: f64,
    /// Population potentials evaluated at the sample points, `(a(X_i), b(Y_j))`.
    pub potentials: Option<(DVector<f64>, DVector<f64>)>,
}

impl SampleInput {
    pub fn from_batch(
        batch: &SampleBatch,
        eta: &DMatrix<f64>,
        cost: &DMatrix<f64>,
        kernel: &GibbsKernel,
    ) -> Self {
        Self {
            eta: batch.gather(eta),
            cost: batch.gather(cost),
            eps: kernel.eps,
            potentials: Some((
                DVector::from_iterator(batch.len(), batch.x_idx.iter().map(|&i| kernel.a_eps[i])),
                DVector::from_iterator(batch.len(), batch.y_idx.iter().map(|&j| kernel.b_eps[j])),
            )),
        }
    }

    pub fn n(&self) -> usize {
        self.eta.nrows()
    }

    fn validate(&self) -> Result<usize> {
        let n = check_square(&self.eta, "eta sample")?;
        if self.cost.shape() != (n, n) {
            return Err(Error::LengthMismatch("cost and eta samples differ in shape".into()));
        }
        if n == 0 {
            return Err(Error::BatchTooSmall(0));
        }
        if let Some((a, b)) = &self.potentials {
            if a.len() != n || b.len() != n {
                return Err(Error::LengthMismatch("potentials vs sample size".into()));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidParameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(n)
    }

    /// `exp(-(c_ij - a_i - b_j)/eps)` when potentials are known.
    fn potential_weights(&self) -> Option<DMatrix<f64>> {
        self.potentials.as_ref().map(|(a, b)| {
            DMatrix::from_fn(self.n(), self.n(), |i, j| {
                (-(self.cost[(i, j)] - a[i] - b[j]) / self.eps).exp()
            })
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    Brute,
    Permanent,
}

#[derive(Debug, Clone)]
pub struct BridgeEstimate {
    pub t_n: f64,
    pub coupling: DMatrix<f64>,
    /// Likelihood ratio; available when population potentials were supplied.
    pub l_n: Option<f64>,
    pub method: EstimateMethod,
}

/// Gibbs probability of one permutation, by full enumeration.
pub fn q_star(cost: &DMatrix<f64>, eps: f64, sigma: &[usize]) -> Result<f64> {
    let n = check_square(cost, "cost sample")?;
    if n > Q_STAR_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: Q_STAR_MAX_N,
        });
    }
    let law = gibbs_distribution(cost, eps)?;
    let perms = permutations(n);
    let idx = perms
        .iter()
        .position(|p| p.as_slice() == sigma)
        .ok_or_else(|| Error::InvalidParameter("sigma is not a permutation".into()))?;
    Ok(law[idx])
}

/// Gibbs law over all permutations, lexicographic order.
pub fn gibbs_distribution(cost: &DMatrix<f64>, eps: f64) -> Result<Vec<f64>> {
    let n = check_square(cost, "cost sample")?;
    if n > Q_STAR_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: Q_STAR_MAX_N,
        });
    }
    let logs: Vec<f64> = permutations(n)
        .iter()
        .map(|p| -(0..n).map(|i| cost[(i, p[i])]).sum::<f64>() / eps)
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total = compensated_sum(weights.iter().copied());
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Brute-force `T_N` and coupling over all `N!` permutations.
pub fn t_n_brute(input: &SampleInput) -> Result<BridgeEstimate> {
    let n = input.validate()?;
    if n > BRUTE_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: BRUTE_MAX_N,
        });
    }
    // Log-weights relative to the potentials when given, so L_N comes for free.
    let shift: Vec<(f64, f64)> = match &input.potentials {
        Some((a, b)) => (0..n).map(|i| (a[i], b[i])).collect(),
        None => vec![(0.0, 0.0); n],
    };
    let base: f64 = shift.iter().map(|(a, b)| a + b).sum::<f64>() / input.eps;
    let log_weight = |perm: &[usize]| -> f64 {
        -(0..n).map(|i| input.cost[(i, perm[i])]).sum::<f64>() / input.eps + base
    };

    let mut perm: Vec<usize> = (0..n).collect();
    let mut max = f64::NEG_INFINITY;
    loop {
        max = max.max(log_weight(&perm));
        if !next_permutation(&mut perm) {
            break;
        }
    }

    let mut perm: Vec<usize> = (0..n).collect();
    let mut weights = Vec::new();
    let mut values = Vec::new();
    let mut coupling = DMatrix::zeros(n, n);
    loop {
        let w = (log_weight(&perm) - max).exp();
        let v: f64 = (0..n).map(|i| input.eta[(i, perm[i])]).sum::<f64>() / n as f64;
        weights.push(w);
        values.push(w * v);
        for i in 0..n {
            coupling[(i, perm[i])] += w;
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    let total = compensated_sum(weights.iter().copied());
    let t_n = compensated_sum(values) / total;
    coupling /= total * n as f64;
    let l_n = input
        .potentials
        .as_ref()
        .map(|_| (total.ln() + max - ln_gamma(n as f64 + 1.0)).exp());
    Ok(BridgeEstimate {
        t_n,
        coupling,
        l_n,
        method: EstimateMethod::Brute,
    })
}

/// `T_N` and coupling from Ryser permanents of the weight matrix and its minors.
pub fn t_n_permanent(input: &SampleInput) -> Result<BridgeEstimate> {
    let n = input.validate()?;
    if n > PERMANENT_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: PERMANENT_MAX_N,
        });
    }
    let w = match input.potential_weights() {
        Some(w) => w,
        None => scale_to_uniform(&input.cost, input.eps, SCALING_TOL, SCALING_MAX_ITER)?,
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Overflow);
    }
    let (full, full_log) = permanent(&w)?;
    if !(full > 0.0) {
        return Err(Error::DegeneratePermanent);
    }
    let mut coupling = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (v, log_scale) = permanent(&minor(&w, i, j))?;
            coupling[(i, j)] = w[(i, j)] * v / full * (log_scale - full_log).exp() / n as f64;
        }
    }
    let t_n = compensated_sum(
        coupling
            .iter()
            .zip(input.eta.iter())
            .map(|(m, e)| m * e),
    );
    let l_n = input
        .potentials
        .as_ref()
        .map(|_| (full.ln() + full_log - ln_gamma(n as f64 + 1.0)).exp());
    Ok(BridgeEstimate {
        t_n,
        coupling,
        l_n,
        method: EstimateMethod::Permanent,
    })
}

/// `L_N = per(xi(X_i, Y_j)) / N!`.
pub fn likelihood_ratio(batch: &SampleBatch, kernel: &GibbsKernel) -> Result<f64> {
    let n = batch.len();
    if n > PERMANENT_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: PERMANENT_MAX_N,
        });
    }
    let (v, log_scale) = permanent(&batch.gather(&kernel.xi))?;
    if v <= 0.0 {
        return Ok(0.0);
    }
    Ok((v.ln() + log_scale - ln_gamma(n as f64 + 1.0)).exp())
}

/// `<M_q, C> + (eps/N) sum q ln q` for a law `q` over permutations in
/// lexicographic order.
pub fn gibbs_objective_check(q: &[f64], cost: &DMatrix<f64>, eps: f64) -> Result<f64> {
    let n = check_square(cost, "cost sample")?;
    if n > OBJECTIVE_MAX_N {
        return Err(Error::TooLargeForEnumeration {
            n,
            limit: OBJECTIVE_MAX_N,
        });
    }
    let perms = permutations(n);
    if q.len() != perms.len() {
        return Err(Error::NotADistribution(format!(
            "expected {} probabilities, got {}",
            perms.len(),
            q.len()
        )));
    }
    if q.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::NotADistribution("negative mass".into()));
    }
    let total = compensated_sum(q.iter().copied());
    if (total - 1.0).abs() > 1e-10 {
        return Err(Error::NotADistribution(format!("total mass {total}")));
    }
    let transport = compensated_sum(perms.iter().zip(q).map(|(p, w)| {
        w * (0..n).map(|i| cost[(i, p[i])]).sum::<f64>() / n as f64
    }));
    let entropy = compensated_sum(q.iter().filter(|w| **w > 0.0).map(|w| w * w.ln()));
    Ok(transport + eps / n as f64 * entropy)
}

/// Largest relative gap between `prod_{i in A} v_i` and
/// `sum_{C ⊆ A} prod_{i in C} (v_i - 1)` over all subsets `A`.
pub fn hoeffding_product_residual(values: &[f64]) -> f64 {
    let n = values.len();
    let mut worst: f64 = 0.0;
    for a in 0u64..(1u64 << n) {
        let direct: f64 = (0..n).filter(|i| a >> i & 1 == 1).map(|i| values[i]).product();
        let mut expansion = 0.0;
        let mut c = a;
        loop {
            expansion += (0..n)
                .filter(|i| c >> i & 1 == 1)
                .map(|i| values[i] - 1.0)
                .product::<f64>();
            if c == 0 {
                break;
            }
            c = (c - 1) & a;
        }
        worst = worst.max((direct - expansion).abs() / direct.abs().max(1e-300));
    }
    worst
}

pub trait TnEstimator: Send + Sync {
    fn name(&self) -> &'static str;
    fn max_n(&self) -> usize;
    fn estimate(&self, input: &SampleInput) -> Result<BridgeEstimate>;
}

struct Brute;
struct Permanent;
struct Auto;

impl TnEstimator for Brute {
    fn name(&self) -> &'static str {
        "brute"
    }
    fn max_n(&self) -> usize {
        BRUTE_MAX_N
    }
    fn estimate(&self, input: &SampleInput) -> Result<BridgeEstimate> {
        t_n_brute(input)
    }
}

impl TnEstimator for Permanent {
    fn name(&self) -> &'static str {
        "permanent"
    }
    fn max_n(&self) -> usize {
        PERMANENT_MAX_N
    }
    fn estimate(&self, input: &SampleInput) -> Result<BridgeEstimate> {
        t_n_permanent(input)
    }
}

impl TnEstimator for Auto {
    fn name(&self) -> &'static str {
        "auto"
    }
    fn max_n(&self) -> usize {
        PERMANENT_MAX_N
    }
    fn estimate(&self, input: &SampleInput) -> Result<BridgeEstimate> {
        if input.n() < AUTO_SWITCH_N {
            t_n_brute(input)
        } else {
            t_n_permanent(input)
        }
    }
}

pub fn registry() -> Vec<Box<dyn TnEstimator>> {
    vec![Box::new(Brute), Box::new(Permanent), Box::new(Auto)]
}

pub fn estimator(name: &str) -> Result<Box<dyn TnEstimator>> {
    registry()
        .into_iter()
        .find(|e| e.name() == name)
        .ok_or_else(|| Error::Unknown {
            kind: "method",
            name: name.to_string(),
        })
}
