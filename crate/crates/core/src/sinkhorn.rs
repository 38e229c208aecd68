//! Static Schrödinger bridge on a finite product space.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::measures::{CostMatrix, DiscreteMeasure};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Solved bridge: `xi = exp(-(c - a - b) / eps)` and `mu = xi * (rho0 ⊗ rho1)`.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    pub xi: DMatrix<f64>,
    pub a_eps: DVector<f64>,
    pub b_eps: DVector<f64>,
    pub eps: f64,
    pub rho0: DiscreteMeasure,
    pub rho1: DiscreteMeasure,
    pub mu: DMatrix<f64>,
}

impl GibbsKernel {
    pub fn p(&self) -> DVector<f64> {
        DVector::from_column_slice(self.rho0.weights())
    }

    pub fn q(&self) -> DVector<f64> {
        DVector::from_column_slice(self.rho1.weights())
    }

    /// Largest violation of `sum_j xi_ij q_j = 1` and `sum_i xi_ij p_i = 1`.
    pub fn marginal_residual(&self) -> f64 {
        scaled_residual(&self.xi, self.rho0.weights(), self.rho1.weights())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornReport {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

fn scaled_residual(xi: &DMatrix<f64>, p: &[f64], q: &[f64]) -> f64 {
    let (m0, m1) = xi.shape();
    let mut worst: f64 = 0.0;
    for i in 0..m0 {
        let s: f64 = (0..m1).map(|j| xi[(i, j)] * q[j]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    for j in 0..m1 {
        let s: f64 = (0..m0).map(|i| xi[(i, j)] * p[i]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    worst
}

fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain alternating scaling of `exp(-cost/eps)` towards marginals `p`, `q`.
///
/// Returns dual potentials divided by `eps` (gauge `sum f p = 0`), the scaled
/// kernel and a report.
pub(crate) fn scale_log_kernel(
    cost_over_eps: &DMatrix<f64>,
    p: &[f64],
    q: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(DVector<f64>, DVector<f64>, DMatrix<f64>, SinkhornReport)> {
    let (m0, m1) = cost_over_eps.shape();
    let log_p: Vec<f64> = p.iter().map(|w| w.ln()).collect();
    let log_q: Vec<f64> = q.iter().map(|w| w.ln()).collect();
    let mut f = DVector::zeros(m0);
    let mut g = DVector::zeros(m1);
    let mut xi = DMatrix::zeros(m0, m1);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..m0 {
            f[i] = -log_sum_exp((0..m1).map(|j| g[j] - cost_over_eps[(i, j)] + log_q[j]));
        }
        for j in 0..m1 {
            g[j] = -log_sum_exp((0..m0).map(|i| f[i] - cost_over_eps[(i, j)] + log_p[i]));
        }
        if f.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::OverflowInKernel(
                "potentials left the floating-point range".into(),
            ));
        }
        let shift: f64 = f.iter().zip(p).map(|(a, w)| a * w).sum();
        f.add_scalar_mut(-shift);
        g.add_scalar_mut(shift);
        for i in 0..m0 {
            for j in 0..m1 {
                xi[(i, j)] = (f[i] + g[j] - cost_over_eps[(i, j)]).exp();
            }
        }
        residual = scaled_residual(&xi, p, q);
        if residual <= tol {
            break;
        }
    }
    let report = SinkhornReport {
        iterations,
        residual,
        converged: residual <= tol,
    };
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations,
            residual,
        });
    }
    Ok((f, g, xi, report))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

pub fn solve_bridge(
    rho0: &DiscreteMeasure,
    rho1: &DiscreteMeasure,
    cost: &CostMatrix,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(GibbsKernel, SinkhornReport)> {
    check_eps(eps)?;
    if !(tol > 0.0 && tol <= 1e-6) {
        return Err(Error::InvalidParameter(format!(
            "tol must lie in (0, 1e-6], got {tol}"
        )));
    }
    if cost.shape() != (rho0.len(), rho1.len()) {
        return Err(Error::LengthMismatch(format!(
            "cost is {:?} but marginals have {} and {} atoms",
            cost.shape(),
            rho0.len(),
            rho1.len()
        )));
    }
    let scaled = cost / eps;
    if scaled.iter().any(|v| !v.is_finite()) {
        return Err(Error::OverflowInKernel("cost / eps is not finite".into()));
    }
    let (f, g, xi, report) =
        scale_log_kernel(&scaled, rho0.weights(), rho1.weights(), tol, max_iter)?;
    let (p, q) = (rho0.weights(), rho1.weights());
    let mu = DMatrix::from_fn(xi.nrows(), xi.ncols(), |i, j| xi[(i, j)] * p[i] * q[j]);
    let kernel = GibbsKernel {
        xi,
        a_eps: f * eps,
        b_eps: g * eps,
        eps,
        rho0: rho0.clone(),
        rho1: rho1.clone(),
        mu,
    };
    Ok((kernel, report))
}

/// Row-stochastic kernel `exp(-c_ij/eps) q_j / Z_i`.
pub fn markov_kernel(cost: &CostMatrix, eps: f64, rho1: &DiscreteMeasure) -> Result<DMatrix<f64>> {
    check_eps(eps)?;
    let q = rho1.weights();
    let (m0, m1) = cost.shape();
    if m1 != q.len() {
        return Err(Error::LengthMismatch("cost columns vs target atoms".into()));
    }
    let mut out = DMatrix::zeros(m0, m1);
    for i in 0..m0 {
        let logs: Vec<f64> = (0..m1).map(|j| -cost[(i, j)] / eps + q[j].ln()).collect();
        let z = log_sum_exp(logs.iter().copied());
        if !z.is_finite() {
            return Err(Error::OverflowInKernel(format!("row {i} normalizer")));
        }
        for j in 0..m1 {
            out[(i, j)] = (logs[j] - z).exp();
        }
    }
    Ok(out)
}

/// `sum c nu + eps * KL(nu | rho0 ⊗ rho1)` for a coupling of the two marginals.
pub fn entropic_objective(
    coupling: &DMatrix<f64>,
    rho0: &DiscreteMeasure,
    rho1: &DiscreteMeasure,
    cost: &CostMatrix,
    eps: f64,
) -> Result<f64> {
    let (p, q) = (rho0.weights(), rho1.weights());
    let (m0, m1) = coupling.shape();
    if (m0, m1) != (p.len(), q.len()) || cost.shape() != (m0, m1) {
        return Err(Error::LengthMismatch("coupling shape".into()));
    }
    if coupling.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::MarginalMismatch(f64::INFINITY));
    }
    let mut gap: f64 = 0.0;
    for i in 0..m0 {
        gap = gap.max((coupling.row(i).sum() - p[i]).abs());
    }
    for j in 0..m1 {
        gap = gap.max((coupling.column(j).sum() - q[j]).abs());
    }
    if gap > 1e-8 {
        return Err(Error::MarginalMismatch(gap));
    }
    let mut total = 0.0;
    for i in 0..m0 {
        for j in 0..m1 {
            let v = coupling[(i, j)];
            total += cost[(i, j)] * v;
            if v > 0.0 {
                total += eps * v * (v / (p[i] * q[j])).ln();
            }
        }
    }
    Ok(total)
}

/// Scales an `n x n` sample kernel `exp(-cost/eps)` to uniform marginals.
///
/// Returns `n * coupling`, whose entries are `O(1)`.
pub fn scale_to_uniform(cost: &DMatrix<f64>, eps: f64, tol: f64, max_iter: usize) -> Result<DMatrix<f64>> {
    check_eps(eps)?;
    let n = cost.nrows();
    let uniform = vec![1.0 / n as f64; n];
    let (_, _, xi, _) = scale_log_kernel(&(cost / eps), &uniform, &uniform, tol, max_iter)?;
    Ok(xi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{fixture, Problem};

    fn sym2() -> Problem {
        fixture("sym2").unwrap()
    }

    #[test]
    fn zero_cost_decouples() {
        let rho0 = DiscreteMeasure::on_integers(vec![0.2, 0.3, 0.5]).unwrap();
        let rho1 = DiscreteMeasure::on_integers(vec![0.6, 0.4]).unwrap();
        let (k, _) = solve_bridge(&rho0, &rho1, &DMatrix::zeros(3, 2), 1.0, 1e-12, 1000).unwrap();
        assert!(k.xi.iter().all(|v| (v - 1.0).abs() < 1e-14));
        assert!(k.a_eps.iter().chain(k.b_eps.iter()).all(|v| v.abs() < 1e-14));
        assert!((k.mu[(2, 0)] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn sym2_markov_row() {
        let pb = sym2();
        let k = markov_kernel(&pb.cost, 1.0, &pb.rho1).unwrap();
        let e = std::f64::consts::E;
        assert!((k[(0, 0)] - e / (1.0 + e)).abs() < 1e-15);
        assert!((k[(0, 1)] - 1.0 / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn high_temperature_kernel() {
        let pb = fixture("asym23").unwrap();
        let k = markov_kernel(&pb.cost, 1e6, &pb.rho1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((k[(i, j)] - pb.rho1.weights()[j]).abs() <= 1e-5);
            }
        }
        let zero = markov_kernel(&DMatrix::zeros(2, 2), 1.0, &pb.rho1).unwrap();
        assert!((zero[(1, 1)] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn objective_prefers_bridge() {
        let pb = sym2();
        let (k, _) = pb.solve().unwrap();
        let indep = DMatrix::from_element(2, 2, 0.25);
        let at_bridge = entropic_objective(&k.mu, &pb.rho0, &pb.rho1, &pb.cost, 1.0).unwrap();
        let at_indep = entropic_objective(&indep, &pb.rho0, &pb.rho1, &pb.cost, 1.0).unwrap();
        assert!(at_bridge < at_indep);
        let zero = entropic_objective(&indep, &pb.rho0, &pb.rho1, &DMatrix::zeros(2, 2), 1.0).unwrap();
        assert!(zero.abs() < 1e-15);
    }

    #[test]
    fn objective_rejects_wrong_marginals() {
        let pb = sym2();
        let bad = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.4]);
        assert!(matches!(
            entropic_objective(&bad, &pb.rho0, &pb.rho1, &pb.cost, 1.0),
            Err(Error::MarginalMismatch(_))
        ));
    }

    #[test]
    fn tolerance_must_be_tight() {
        let pb = sym2();
        assert!(solve_bridge(&pb.rho0, &pb.rho1, &pb.cost, 1.0, 1e-3, 10).is_err());
        assert!(solve_bridge(&pb.rho0, &pb.rho1, &pb.cost, -1.0, 1e-12, 10).is_err());
    }

    #[test]
    fn uniform_scaling_is_doubly_stochastic() {
        let c = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.7);
        let w = scale_to_uniform(&c, 0.5, 1e-13, 10_000).unwrap();
        for i in 0..5 {
            assert!((w.row(i).sum() / 5.0 - 1.0).abs() < 1e-12);
            assert!((w.column(i).sum() / 5.0 - 1.0).abs() < 1e-12);
        }
    }
}
