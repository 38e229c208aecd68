//! Conditional-expectation operators of the bridge and their inverses.
//!
//! Functions on the source atoms are vectors of length `m0`, functions on the
//! target atoms have length `m1`, and bivariate functions are matrices whose
//! rows follow the first argument. For operators realized as matrices `L` and
//! `R`, the tensor product acts as `(L ⊗ R) K = L K Rᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sinkhorn::GibbsKernel;

pub const GAP_TOL: f64 = 1e-10;
pub const DEGENERACY_TOL: f64 = 1e-9;
const MEAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct BridgeOperators {
    /// `(A f)(y) = sum_x f(x) xi(x, y) p(x)`, shape `m1 x m0`.
    pub a: DMatrix<f64>,
    /// `(A* g)(x) = sum_y g(y) xi(x, y) q(y)`, shape `m0 x m1`.
    pub a_star: DMatrix<f64>,
    /// Singular values, descending, padded with zeros to `max(m0, m1)`.
    pub s: Vec<f64>,
    /// Columns are the singular functions on the source atoms.
    pub alpha: DMatrix<f64>,
    /// Columns are the singular functions on the target atoms.
    pub beta: DMatrix<f64>,
    pub gap: f64,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

/// One side of a tensor-product operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Identity,
    A,
    AStar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DegeneracyReport {
    pub residual_x: f64,
    pub residual_y: f64,
}

impl DegeneracyReport {
    pub fn max(&self) -> f64 {
        self.residual_x.max(self.residual_y)
    }
}

fn orthonormal_completion(cols: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let mut basis: Vec<DVector<f64>> = cols.column_iter().map(|c| c.into_owned()).collect();
    while basis.len() < dim {
        let mut best: Option<DVector<f64>> = None;
        for e in 0..dim {
            let mut v = DVector::zeros(dim);
            v[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v -= b * c;
                }
            }
            if best.as_ref().is_none_or(|b| v.norm() > b.norm() + 1e-12) {
                best = Some(v);
            }
        }
        let v = best.expect("dimension is positive");
        let n = v.norm();
        basis.push(v / n);
    }
    DMatrix::from_columns(&basis)
}

/// True when the largest-magnitude entry (first one on ties) is negative.
fn leads_negative(col: &DVector<f64>) -> bool {
    let peak = col.amax();
    col.iter()
        .copied()
        .find(|v| v.abs() >= peak - 1e-9 * peak.max(1.0))
        .is_some_and(|v| v < 0.0)
}

pub fn build_operators(kernel: &GibbsKernel) -> Result<BridgeOperators> {
    let residual = kernel.marginal_residual();
    if residual > 1e-10 {
        return Err(Error::MarginalMismatch(residual));
    }
    let p = kernel.p();
    let q = kernel.q();
    let xi = &kernel.xi;
    let (m0, m1) = xi.shape();
    let a = DMatrix::from_fn(m1, m0, |y, x| xi[(x, y)] * p[x]);
    let a_star = DMatrix::from_fn(m0, m1, |x, y| xi[(x, y)] * q[y]);

    let sym = DMatrix::from_fn(m0, m1, |x, y| p[x].sqrt() * xi[(x, y)] * q[y].sqrt());
    let svd = sym.svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let v = svd.v_t.expect("right vectors requested").transpose();
    let r = svd.singular_values.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u_sorted = DMatrix::from_columns(&order.iter().map(|&k| u.column(k)).collect::<Vec<_>>());
    let v_sorted = DMatrix::from_columns(&order.iter().map(|&k| v.column(k)).collect::<Vec<_>>());
    let mut s: Vec<f64> = order.iter().map(|&k| svd.singular_values[k]).collect();
    s.resize(m0.max(m1), 0.0);

    let u_full = orthonormal_completion(&u_sorted, m0);
    let v_full = orthonormal_completion(&v_sorted, m1);
    let mut alpha = DMatrix::from_fn(m0, m0, |x, k| u_full[(x, k)] / p[x].sqrt());
    let mut beta = DMatrix::from_fn(m1, m1, |y, k| v_full[(y, k)] / q[y].sqrt());
    for k in 0..m0 {
        if leads_negative(&alpha.column(k).into_owned()) {
            alpha.column_mut(k).neg_mut();
            if k < r {
                beta.column_mut(k).neg_mut();
            }
        }
    }
    for l in r..m1 {
        if leads_negative(&beta.column(l).into_owned()) {
            beta.column_mut(l).neg_mut();
        }
    }

    let s1 = s.get(1).copied().unwrap_or(0.0);
    if s1 > 1.0 - GAP_TOL {
        return Err(Error::SpectralGapViolation(s1));
    }
    Ok(BridgeOperators {
        a,
        a_star,
        s,
        alpha,
        beta,
        gap: 1.0 - s1,
        p,
        q,
    })
}

impl BridgeOperators {
    pub fn m0(&self) -> usize {
        self.p.len()
    }

    pub fn m1(&self) -> usize {
        self.q.len()
    }

    pub fn apply_a(&self, f: &DVector<f64>) -> DVector<f64> {
        &self.a * f
    }

    pub fn apply_a_star(&self, g: &DVector<f64>) -> DVector<f64> {
        &self.a_star * g
    }

    pub fn mean_x(&self, f: &DVector<f64>) -> f64 {
        f.dot(&self.p)
    }

    pub fn mean_y(&self, g: &DVector<f64>) -> f64 {
        g.dot(&self.q)
    }

    pub fn inner_x(&self, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
        f.iter().zip(g.iter()).zip(self.p.iter()).map(|((a, b), w)| a * b * w).sum()
    }

    pub fn inner_y(&self, f: &DVector<f64>, g: &DVector<f64>) -> f64 {
        f.iter().zip(g.iter()).zip(self.q.iter()).map(|((a, b), w)| a * b * w).sum()
    }

    pub fn mean_xy(&self, h: &DMatrix<f64>) -> f64 {
        (self.p.transpose() * h * &self.q)[(0, 0)]
    }

    /// Squared norm in `L²(rho0 ⊗ rho1)`.
    pub fn norm2_xy(&self, h: &DMatrix<f64>) -> f64 {
        let sq = h.component_mul(h);
        self.mean_xy(&sq)
    }

    fn require_mean_zero(mean: f64, scale: f64) -> Result<()> {
        if mean.abs() > MEAN_TOL * scale.max(1.0) {
            return Err(Error::NotMeanZero(mean));
        }
        Ok(())
    }

    fn require_gap(&self) -> Result<()> {
        if self.gap <= GAP_TOL {
            return Err(Error::SpectralGapViolation(1.0 - self.gap));
        }
        Ok(())
    }

    /// `(I - A*A)^{-1} f` on mean-zero functions of the source atoms.
    pub fn solve_resolvent_x(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        Self::require_mean_zero(self.mean_x(f), f.amax())?;
        self.require_gap()?;
        let mut g = DVector::zeros(self.m0());
        for k in 1..self.m0() {
            let alpha_k = self.alpha.column(k).into_owned();
            let c = self.inner_x(f, &alpha_k);
            g += alpha_k * (c / (1.0 - self.s[k] * self.s[k]));
        }
        Ok(g)
    }

    /// `(I - AA*)^{-1} g` on mean-zero functions of the target atoms.
    pub fn solve_resolvent_y(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        Self::require_mean_zero(self.mean_y(g), g.amax())?;
        self.require_gap()?;
        let mut f = DVector::zeros(self.m1());
        for l in 1..self.m1() {
            let beta_l = self.beta.column(l).into_owned();
            let c = self.inner_y(g, &beta_l);
            f += beta_l * (c / (1.0 - self.s[l] * self.s[l]));
        }
        Ok(f)
    }

    fn factor_matrix(&self, factor: Factor, dim: usize) -> DMatrix<f64> {
        match factor {
            Factor::Identity => DMatrix::identity(dim, dim),
            Factor::A => self.a.clone(),
            Factor::AStar => self.a_star.clone(),
        }
    }

    /// `(left ⊗ right) k`.
    pub fn tensor(&self, left: Factor, right: Factor, k: &DMatrix<f64>) -> DMatrix<f64> {
        let l = self.factor_matrix(left, k.nrows());
        let r = self.factor_matrix(right, k.ncols());
        l * k * r.transpose()
    }

    /// `(Bh)(x, y) = sum h(x', y') xi(x', y) xi(x, y') p(x') q(y')`.
    pub fn apply_b(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a_star * h.transpose() * self.a.transpose()
    }

    /// Coefficients `<h, alpha_k ⊗ beta_l>` in `L²(rho0 ⊗ rho1)`.
    pub fn coefficients(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let weighted = DMatrix::from_fn(h.nrows(), h.ncols(), |x, y| h[(x, y)] * self.p[x] * self.q[y]);
        self.alpha.transpose() * weighted * &self.beta
    }

    pub fn from_coefficients(&self, gamma: &DMatrix<f64>) -> DMatrix<f64> {
        &self.alpha * gamma * self.beta.transpose()
    }

    /// `(I + B)^{-1} h` on mean-zero bivariate functions.
    ///
    /// `B` sends `alpha_k ⊗ beta_l` to `s_k s_l alpha_l ⊗ beta_k`, so the solve
    /// couples the coefficients `(k, l)` and `(l, k)` in 2x2 blocks.
    pub fn solve_i_plus_b(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Self::require_mean_zero(self.mean_xy(h), h.amax())?;
        let gamma = self.coefficients(h);
        let (m0, m1) = (self.m0(), self.m1());
        let mut x = DMatrix::zeros(m0, m1);
        for k in 0..m0 {
            for l in 0..m1 {
                let t = self.s[k] * self.s[l];
                x[(k, l)] = if k == l {
                    gamma[(k, l)] / (1.0 + t)
                } else if l < m0 && k < m1 {
                    (gamma[(k, l)] - t * gamma[(l, k)]) / (1.0 - t * t)
                } else {
                    gamma[(k, l)]
                };
            }
        }
        x[(0, 0)] = 0.0;
        Ok(self.from_coefficients(&x))
    }

    /// `C h = (I - A*A) ⊗ (I - AA*) h`.
    pub fn apply_c(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let left = DMatrix::identity(self.m0(), self.m0()) - &self.a_star * &self.a;
        let right = DMatrix::identity(self.m1(), self.m1()) - &self.a * &self.a_star;
        left * h * right.transpose()
    }

    /// `C^{-1} h` on doubly degenerate functions.
    pub fn solve_c(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let report = check_degenerate(&product_weights(&self.p, &self.q), h);
        if report.max() > DEGENERACY_TOL * h.amax().max(1.0) {
            return Err(Error::NotDegenerate(report.residual_x, report.residual_y));
        }
        self.require_gap()?;
        let gamma = self.coefficients(h);
        let x = DMatrix::from_fn(self.m0(), self.m1(), |k, l| {
            if k == 0 || l == 0 {
                0.0
            } else {
                gamma[(k, l)] / ((1.0 - self.s[k] * self.s[k]) * (1.0 - self.s[l] * self.s[l]))
            }
        });
        Ok(self.from_coefficients(&x))
    }

    /// Gram matrix of `{alpha_k ⊗ beta_l}` in `L²(rho0 ⊗ rho1)`, flattened row-major.
    pub fn product_gram(&self) -> DMatrix<f64> {
        let (m0, m1) = (self.m0(), self.m1());
        let n = m0 * m1;
        let w = DVector::from_fn(n, |idx, _| self.p[idx / m1] * self.q[idx % m1]);
        let basis = DMatrix::from_fn(n, n, |idx, kl| {
            self.alpha[(idx / m1, kl / m1)] * self.beta[(idx % m1, kl % m1)]
        });
        basis.transpose() * DMatrix::from_diagonal(&w) * basis
    }
}

/// `h(x) + g(y)`.
pub fn direct_sum(f: &DVector<f64>, g: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(f.len(), g.len(), |x, y| f[x] + g[y])
}

pub fn product_weights(p: &DVector<f64>, q: &DVector<f64>) -> DMatrix<f64> {
    p * q.transpose()
}

/// Largest conditional means of `h` given either coordinate under `weights`.
pub fn check_degenerate(weights: &DMatrix<f64>, h: &DMatrix<f64>) -> DegeneracyReport {
    let (m0, m1) = h.shape();
    let mut residual_x: f64 = 0.0;
    for y in 0..m1 {
        let mass: f64 = (0..m0).map(|x| weights[(x, y)]).sum();
        let v: f64 = (0..m0).map(|x| h[(x, y)] * weights[(x, y)]).sum();
        residual_x = residual_x.max((v / mass).abs());
    }
    let mut residual_y: f64 = 0.0;
    for x in 0..m0 {
        let mass: f64 = (0..m1).map(|y| weights[(x, y)]).sum();
        let v: f64 = (0..m1).map(|y| h[(x, y)] * weights[(x, y)]).sum();
        residual_y = residual_y.max((v / mass).abs());
    }
    DegeneracyReport {
        residual_x,
        residual_y,
    }
}
