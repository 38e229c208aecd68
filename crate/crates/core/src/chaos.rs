//! First- and second-order chaos kernels, limit laws and the exact `U_N` variance.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{next_permutation, permutations};
use crate::measures::{SampleBatch, SeededStream};
use crate::operators::{check_degenerate, direct_sum, product_weights, BridgeOperators, Factor, DEGENERACY_TOL};
use crate::sinkhorn::GibbsKernel;

/// Below this, the first-order variance counts as zero.
pub const ZERO_VARIANCE_TOL: f64 = 1e-10;
pub const U_N_MAX_N: usize = 4;
pub const U_N_MAX_CELLS: usize = 16;

#[derive(Debug, Clone)]
pub struct FirstOrderKernels {
    pub theta: f64,
    pub kappa10: DVector<f64>,
    pub kappa01: DVector<f64>,
    pub f_chaos: DVector<f64>,
    pub g_chaos: DVector<f64>,
    pub sigma2: f64,
}

pub fn first_order_kernels(
    eta: &DMatrix<f64>,
    kernel: &GibbsKernel,
    ops: &BridgeOperators,
) -> Result<FirstOrderKernels> {
    if eta.shape() != kernel.xi.shape() {
        return Err(Error::LengthMismatch("eta must match the kernel shape".into()));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("eta has non-finite entries".into()));
    }
    let theta = eta.component_mul(&kernel.mu).sum();
    let centered = eta.add_scalar(-theta).component_mul(&kernel.xi);
    let kappa10 = &centered * &ops.q;
    let kappa01 = centered.transpose() * &ops.p;
    let f_chaos = ops.solve_resolvent_x(&(&kappa10 - ops.apply_a_star(&kappa01)))?;
    let g_chaos = ops.solve_resolvent_y(&(&kappa01 - ops.apply_a(&kappa10)))?;
    let sigma2 = ops.inner_x(&f_chaos, &f_chaos) + ops.inner_y(&g_chaos, &g_chaos);
    Ok(FirstOrderKernels {
        theta,
        kappa10,
        kappa01,
        f_chaos,
        g_chaos,
        sigma2,
    })
}

impl FirstOrderKernels {
    /// `(I + B)^{-1}(kappa10 ⊕ kappa01)`, which equals `f_chaos ⊕ g_chaos`.
    pub fn summand_via_b(&self, ops: &BridgeOperators) -> Result<DMatrix<f64>> {
        ops.solve_i_plus_b(&direct_sum(&self.kappa10, &self.kappa01))
    }

    /// The variance recomputed from the `(I + B)^{-1}` form.
    pub fn sigma2_via_b(&self, ops: &BridgeOperators) -> Result<f64> {
        let h = self.summand_via_b(ops)?;
        let f = &h * &ops.q;
        let g = h.transpose() * &ops.p;
        Ok(ops.inner_x(&f, &f) + ops.inner_y(&g, &g))
    }
}

/// `(1/N) sum_i [f(X_i) + g(Y_i)]`.
pub fn first_chaos_value(batch: &SampleBatch, fk: &FirstOrderKernels) -> f64 {
    let n = batch.len() as f64;
    batch
        .x_idx
        .iter()
        .zip(&batch.y_idx)
        .map(|(&x, &y)| fk.f_chaos[x] + fk.g_chaos[y])
        .sum::<f64>()
        / n
}

/// Same value through `(1/N) sum_i (I + B)^{-1}(kappa10 ⊕ kappa01)(X_i, Y_i)`.
pub fn first_chaos_value_via_b(batch: &SampleBatch, fk: &FirstOrderKernels, ops: &BridgeOperators) -> Result<f64> {
    let h = fk.summand_via_b(ops)?;
    let n = batch.len() as f64;
    Ok(batch
        .x_idx
        .iter()
        .zip(&batch.y_idx)
        .map(|(&x, &y)| h[(x, y)])
        .sum::<f64>()
        / n)
}

/// `constant + x_part(x) + y_part(y)`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub constant: f64,
    pub x_part: DVector<f64>,
    pub y_part: DVector<f64>,
}

impl Affine {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.constant + self.x_part[x] + self.y_part[y]
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        direct_sum(&self.x_part, &self.y_part).add_scalar(self.constant)
    }
}

#[derive(Debug, Clone)]
pub struct SecondOrderKernels {
    pub eta_tilde: DMatrix<f64>,
    /// `C^{-1}(eta_tilde * xi)`.
    pub c_inverse: DMatrix<f64>,
    pub kappa20: DMatrix<f64>,
    pub kappa02: DMatrix<f64>,
    pub kappa11p: DMatrix<f64>,
    pub theta11p: f64,
    pub ell11p: Affine,
    /// Coefficients of `eta_tilde * xi` on `alpha_k ⊗ beta_l`, `k, l >= 1`.
    pub gamma: DMatrix<f64>,
}

pub fn second_order_kernels(
    eta: &DMatrix<f64>,
    kernel: &GibbsKernel,
    ops: &BridgeOperators,
    fk: &FirstOrderKernels,
) -> Result<SecondOrderKernels> {
    let eta_tilde = DMatrix::from_fn(eta.nrows(), eta.ncols(), |x, y| {
        eta[(x, y)] - fk.theta - fk.f_chaos[x] - fk.g_chaos[y]
    });
    let h = eta_tilde.component_mul(&kernel.xi);
    let report = check_degenerate(&product_weights(&ops.p, &ops.q), &h);
    if report.max() > DEGENERACY_TOL * h.amax().max(1.0) {
        return Err(Error::NotDegenerate(report.residual_x, report.residual_y));
    }
    let c_inverse = ops.solve_c(&h)?;
    let kappa20 = -ops.tensor(Factor::Identity, Factor::AStar, &c_inverse);
    let kappa02 = -ops.tensor(Factor::A, Factor::Identity, &c_inverse);
    let kappa11p = &c_inverse + ops.apply_b(&c_inverse);
    let theta11p = kappa11p.component_mul(&kernel.mu).sum();
    let centering = first_order_kernels(&kappa11p, kernel, ops)?;
    let ell11p = Affine {
        constant: theta11p,
        x_part: centering.f_chaos,
        y_part: centering.g_chaos,
    };
    let coeffs = ops.coefficients(&h);
    let gamma = coeffs.view((1, 1), (ops.m0() - 1, ops.m1() - 1)).into_owned();
    Ok(SecondOrderKernels {
        eta_tilde,
        c_inverse,
        kappa20,
        kappa02,
        kappa11p,
        theta11p,
        ell11p,
        gamma,
    })
}

/// Entrywise residuals of the three degeneracy identities linking the kernels.
pub fn kernel_identity_residuals(sk: &SecondOrderKernels, kernel: &GibbsKernel, ops: &BridgeOperators) -> [f64; 3] {
    let sym = |m: DMatrix<f64>| &m + m.transpose();
    let x_side = sym(&sk.kappa20
        + ops.tensor(Factor::AStar, Factor::AStar, &sk.kappa02)
        + ops.tensor(Factor::Identity, Factor::AStar, &sk.kappa11p));
    let y_side = sym(ops.tensor(Factor::A, Factor::A, &sk.kappa20)
        + &sk.kappa02
        + ops.tensor(Factor::A, Factor::Identity, &sk.kappa11p));
    let rebuilt = ops.tensor(Factor::Identity, Factor::A, &sym(sk.kappa20.clone()))
        + ops.tensor(Factor::AStar, Factor::Identity, &sym(sk.kappa02.clone()))
        + &sk.kappa11p
        + ops.apply_b(&sk.kappa11p);
    let target = sk.eta_tilde.component_mul(&kernel.xi);
    [x_side.amax(), y_side.amax(), (rebuilt - target).amax()]
}

/// Second-order chaos evaluated on a batch, including the affine diagonal correction.
pub fn second_chaos_value(batch: &SampleBatch, sk: &SecondOrderKernels) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let (xs, ys) = (&batch.x_idx, &batch.y_idx);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += sk.kappa20[(xs[i], xs[j])] + sk.kappa02[(ys[i], ys[j])];
            }
            total += sk.kappa11p[(xs[i], ys[j])];
        }
        total -= sk.ell11p.at(xs[i], ys[i]);
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// `<(eta - theta) xi, alpha_k ⊗ beta_l>` for `k, l >= 1`, defined when the first
/// chaos vanishes.
pub fn gamma_coefficients(eta: &DMatrix<f64>, kernel: &GibbsKernel, ops: &BridgeOperators) -> Result<DMatrix<f64>> {
    let fk = first_order_kernels(eta, kernel, ops)?;
    if fk.sigma2 > ZERO_VARIANCE_TOL {
        return Err(Error::NotDegenerateFirstOrder(fk.sigma2));
    }
    let h = eta.add_scalar(-fk.theta).component_mul(&kernel.xi);
    let coeffs = ops.coefficients(&h);
    Ok(coeffs.view((1, 1), (ops.m0() - 1, ops.m1() - 1)).into_owned())
}

/// One draw of the second-order limit given standard normals `u`, `v` indexed
/// from 1 (index 0 unused).
pub fn second_order_limit_value(gamma: &DMatrix<f64>, s: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let mut z = 0.0;
    for r in 0..gamma.nrows() {
        for c in 0..gamma.ncols() {
            let g = gamma[(r, c)];
            if g == 0.0 {
                continue;
            }
            let (k, l) = (r + 1, c + 1);
            let (sk, sl) = (s[k], s[l]);
            let delta = if k == l { 1.0 } else { 0.0 };
            let bracket = u[k] * v[l] + sk * sl * u[l] * v[k] - sl * (u[k] * u[l] - delta) - sk * (v[k] * v[l] - delta);
            z += g / ((1.0 - sk * sk) * (1.0 - sl * sl)) * bracket;
        }
    }
    z
}

/// Draws from the second-order limit law; draw `i` uses its own stream `(seed, i)`.
pub fn simulate_second_order_limit(gamma: &DMatrix<f64>, s: &[f64], n_draws: usize, seed: u64) -> Vec<f64> {
    let width = gamma.nrows().max(gamma.ncols()) + 1;
    let mut s_padded = s.to_vec();
    s_padded.resize(s_padded.len().max(width), 0.0);
    (0..n_draws)
        .into_par_iter()
        .map(|i| {
            let mut stream = SeededStream::new(seed, i as u64);
            let rng = stream.rng();
            let mut u = vec![0.0; width];
            let mut v = vec![0.0; width];
            for slot in u.iter_mut().skip(1) {
                *slot = StandardNormal.sample(rng);
            }
            for slot in v.iter_mut().skip(1) {
                *slot = StandardNormal.sample(rng);
            }
            second_order_limit_value(gamma, &s_padded, &u, &v)
        })
        .collect()
}

/// `gamma^2 ((1 + s^2)^2 + 4 s^2) / (1 - s^2)^4`, the variance of a single-term limit.
pub fn single_term_limit_variance(gamma: f64, s: f64) -> f64 {
    let s2 = s * s;
    gamma * gamma * ((1.0 + s2).powi(2) + 4.0 * s2) / (1.0 - s2).powi(4)
}

fn check_u_n_inputs(h: &DMatrix<f64>, xi: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Result<()> {
    if h.shape() != xi.shape() || h.shape() != (p.len(), q.len()) {
        return Err(Error::LengthMismatch("h, xi and the marginals disagree in shape".into()));
    }
    Ok(())
}

/// Cells of the product space with their probabilities.
fn cells(p: &[f64], q: &[f64]) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(p.len() * q.len());
    for (x, px) in p.iter().enumerate() {
        for (y, qy) in q.iter().enumerate() {
            out.push((x, y, px * qy));
        }
    }
    out
}

/// Calls `visit(xs, ys, prob)` for every configuration of `r` i.i.d. cells.
fn for_each_configuration(cells: &[(usize, usize, f64)], r: usize, mut visit: impl FnMut(&[usize], &[usize], f64)) {
    let mut digits = vec![0usize; r];
    let mut xs = vec![0usize; r];
    let mut ys = vec![0usize; r];
    loop {
        let mut prob = 1.0;
        for (t, &d) in digits.iter().enumerate() {
            let (x, y, w) = cells[d];
            xs[t] = x;
            ys[t] = y;
            prob *= w;
        }
        visit(&xs, &ys, prob);
        let mut t = 0;
        loop {
            if t == r {
                return;
            }
            digits[t] += 1;
            if digits[t] < cells.len() {
                break;
            }
            digits[t] = 0;
            t += 1;
        }
    }
}

/// Exact `E[U_N^2]` from its Hoeffding expansion, each expectation enumerated.
pub fn u_n_variance_exact(h: &DMatrix<f64>, xi: &DMatrix<f64>, p: &[f64], q: &[f64], n: usize) -> Result<f64> {
    check_u_n_inputs(h, xi, p, q)?;
    if n > U_N_MAX_N || p.len() * q.len() > U_N_MAX_CELLS {
        return Err(Error::TooLargeForEnumeration { n, limit: U_N_MAX_N });
    }
    let cells = cells(p, q);
    let mut total = 0.0;
    let mut factorial = 1.0;
    for r in 1..=n {
        factorial *= r as f64;
        let perms = permutations(r);
        let mut expectation = 0.0;
        for_each_configuration(&cells, r, |xs, ys, prob| {
            let left = h[(xs[0], ys[0])] * (1..r).map(|j| xi[(xs[j], ys[j])] - 1.0).product::<f64>();
            if left == 0.0 {
                return;
            }
            let mut right = 0.0;
            for sigma in &perms {
                for i in 0..r {
                    let mut term = h[(xs[i], ys[sigma[i]])];
                    for j in (0..r).filter(|&j| j != i) {
                        term *= xi[(xs[j], ys[sigma[j]])] - 1.0;
                    }
                    right += term;
                }
            }
            expectation += prob * left * right;
        });
        total += r as f64 / factorial * expectation;
    }
    Ok(total / (n * n) as f64)
}

/// `E[U_N^2]` straight from the definition of `U_N`, enumerating every sample.
pub fn u_n_second_moment_direct(h: &DMatrix<f64>, xi: &DMatrix<f64>, p: &[f64], q: &[f64], n: usize) -> Result<f64> {
    check_u_n_inputs(h, xi, p, q)?;
    let configs = ((p.len() * q.len()) as f64).powi(n as i32);
    if n > 6 || configs > 1e7 {
        return Err(Error::TooLargeForEnumeration { n, limit: 6 });
    }
    let cells = cells(p, q);
    let factorial: f64 = (1..=n).map(|k| k as f64).product();
    let mut moment = 0.0;
    for_each_configuration(&cells, n, |xs, ys, prob| {
        let mut sigma: Vec<usize> = (0..n).collect();
        let mut u = 0.0;
        loop {
            for i in 0..n {
                let mut term = h[(xs[i], ys[sigma[i]])];
                for j in (0..n).filter(|&j| j != i) {
                    term *= xi[(xs[j], ys[sigma[j]])];
                }
                u += term;
            }
            if !next_permutation(&mut sigma) {
                break;
            }
        }
        u /= n as f64 * factorial;
        moment += prob * u * u;
    });
    Ok(moment)
}

/// Unsigned Stirling numbers of the first kind `c(r, k)`, `k = 0..=r`.
pub fn stirling_first(r: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    for m in 0..r {
        let mut next = vec![0.0; row.len() + 1];
        for (k, &c) in row.iter().enumerate() {
            next[k] += m as f64 * c;
            next[k + 1] += c;
        }
        row = next;
    }
    row
}

/// `prod_{i=1}^r (1 - 1/i + u/i)`, the generating function of the cycle count
/// of a uniform permutation.
pub fn cycle_mgf(r: usize, u: f64) -> f64 {
    (1..=r).map(|i| 1.0 - 1.0 / i as f64 + u / i as f64).product()
}

/// Upper bound on `E[U_N^2]` from the spectral gap:
/// `(1/N^2) sum_r (r^2/r!) sum_sigma s1^{2(r - #sigma)} v0^{#sigma - 1} v`, with
/// `v0 = ||xi - 1||^2` and `v = ||h||^2`.
pub fn u_n_variance_bound(s1: f64, xi_dev_norm2: f64, h_norm2: f64, n: usize) -> f64 {
    let mut total = 0.0;
    let mut factorial = 1.0;
    for r in 1..=n {
        factorial *= r as f64;
        let counts = stirling_first(r);
        let inner: f64 = (1..=r)
            .map(|k| counts[k] * s1.powi(2 * (r - k) as i32) * xi_dev_norm2.powi(k as i32 - 1))
            .sum();
        total += (r * r) as f64 / factorial * inner * h_norm2;
    }
    total / (n * n) as f64
}

/// Weighted squared norm under `p ⊗ q`.
pub fn norm2_product(m: &DMatrix<f64>, p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (x, px) in p.iter().enumerate() {
        for (y, qy) in q.iter().enumerate() {
            total += m[(x, y)] * m[(x, y)] * px * qy;
        }
    }
    total
}
