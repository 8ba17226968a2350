//! Nonlinear systems `F(x, u, D u, .., D^p u)` evaluated on jets, with optional zero-set oracles.
//!
//! A jet of order `p` is stored as the concatenation of its blocks `X_1, .., X_p`, block `q`
//! holding `N n^q` entries in row-major order (range index first). Blocks of order two and
//! higher are symmetric in their domain indices.

use crate::error::{Error, Result};
use crate::linalg::{norm, sym_pairs};
use crate::tensor::Tensor4;
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

type JetFn = dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync;

/// Supplies points of `{J : F(x, u, J) = target}` inside a ball.
pub trait ZeroSetOracle: Send + Sync {
    /// A point of the zero set within the closed ball of radius `radius`, close to `query`.
    fn nearest(&self, x: &[f64], u: &[f64], target: &[f64], query: &[f64], radius: f64) -> Option<Vec<f64>>;
}

/// Layout of the jet space of a system.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JetLayout {
    pub order: usize,
    pub range_dim: usize,
    pub domain_dim: usize,
}

impl JetLayout {
    pub fn block_len(&self, q: usize) -> usize {
        self.range_dim * self.domain_dim.pow(q as u32)
    }

    pub fn block_offset(&self, q: usize) -> usize {
        (1..q).map(|r| self.block_len(r)).sum()
    }

    pub fn len(&self) -> usize {
        self.block_offset(self.order + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Orthonormal basis of the jet space respecting the symmetry of blocks of order two;
    /// higher blocks use unit vectors on nondecreasing index tuples, symmetrised.
    pub fn basis(&self) -> Vec<Vec<f64>> {
        let (big_n, n) = (self.range_dim, self.domain_dim);
        let total = self.len();
        let mut out = Vec::new();
        for q in 1..=self.order {
            let off = self.block_offset(q);
            let blk = n.pow(q as u32);
            if q == 1 {
                for k in 0..big_n * n {
                    let mut e = vec![0.0; total];
                    e[off + k] = 1.0;
                    out.push(e);
                }
                continue;
            }
            for a in 0..big_n {
                let mut seen = std::collections::BTreeSet::new();
                for j in 0..blk {
                    let mut idx = Vec::with_capacity(q);
                    let mut r = j;
                    for _ in 0..q {
                        idx.push(r % n);
                        r /= n;
                    }
                    idx.sort_unstable();
                    if !seen.insert(idx.clone()) {
                        continue;
                    }
                    let mut e = vec![0.0; total];
                    let mut count = 0.0;
                    for jj in 0..blk {
                        let mut t = Vec::with_capacity(q);
                        let mut r = jj;
                        for _ in 0..q {
                            t.push(r % n);
                            r /= n;
                        }
                        t.sort_unstable();
                        if t == idx {
                            e[off + a * blk + jj] = 1.0;
                            count += 1.0;
                        }
                    }
                    let s = 1.0 / f64::sqrt(count);
                    e.iter_mut().for_each(|v| *v *= s);
                    out.push(e);
                }
            }
        }
        out
    }
}

/// `F(x, u, J)` with values in R^M.
#[derive(Clone)]
pub struct CoefficientSystem {
    name: String,
    layout: JetLayout,
    out_dim: usize,
    eval: Arc<JetFn>,
    oracle: Option<Arc<dyn ZeroSetOracle>>,
    affine: bool,
}

impl std::fmt::Debug for CoefficientSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSystem")
            .field("name", &self.name)
            .field("layout", &self.layout)
            .field("out_dim", &self.out_dim)
            .field("affine", &self.affine)
            .field("oracle", &self.oracle.is_some())
            .finish()
    }
}

impl CoefficientSystem {
    pub fn new(
        name: impl Into<String>,
        order: usize,
        domain_dim: usize,
        range_dim: usize,
        out_dim: usize,
        eval: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        CoefficientSystem {
            name: name.into(),
            layout: JetLayout { order, range_dim, domain_dim },
            out_dim,
            eval: Arc::new(eval),
            oracle: None,
            affine: false,
        }
    }

    /// Declares `F(x, u, .)` affine in the jet and installs the generic affine oracle.
    pub fn affine(mut self) -> Self {
        self.affine = true;
        if self.oracle.is_none() {
            self.oracle = Some(Arc::new(AffineOracle { system: self.clone_without_oracle() }));
        }
        self
    }

    pub fn with_oracle(mut self, oracle: Arc<dyn ZeroSetOracle>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    fn clone_without_oracle(&self) -> CoefficientSystem {
        CoefficientSystem { oracle: None, ..self.clone() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn order(&self) -> usize {
        self.layout.order
    }

    pub fn layout(&self) -> JetLayout {
        self.layout
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_affine(&self) -> bool {
        self.affine
    }

    pub fn oracle(&self) -> Option<&Arc<dyn ZeroSetOracle>> {
        self.oracle.as_ref()
    }

    pub fn evaluate(&self, x: &[f64], u: &[f64], jet: &[f64]) -> Vec<f64> {
        (self.eval)(x, u, jet)
    }

    /// Checked evaluation.
    pub fn try_evaluate(&self, x: &[f64], u: &[f64], jet: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.layout.range_dim || jet.len() != self.layout.len() || x.len() != self.layout.domain_dim {
            return Err(Error::Dimension(format!(
                "system {} expects x in R^{}, u in R^{}, jet of length {}",
                self.name,
                self.layout.domain_dim,
                self.layout.range_dim,
                self.layout.len()
            )));
        }
        let v = self.evaluate(x, u, jet);
        if v.len() != self.out_dim {
            return Err(Error::Dimension(format!("system {} returned {} values", self.name, v.len())));
        }
        Ok(v)
    }

    /// Jacobian with respect to the jet in full coordinates, by central differences.
    pub fn jet_jacobian(&self, x: &[f64], u: &[f64], jet: &[f64]) -> DMatrix<f64> {
        let len = jet.len();
        let mut out = DMatrix::zeros(self.out_dim, len);
        let mut j = jet.to_vec();
        for k in 0..len {
            let h = 1e-6 * (1.0 + jet[k].abs());
            j[k] = jet[k] + h;
            let p = self.evaluate(x, u, &j);
            j[k] = jet[k] - h;
            let m = self.evaluate(x, u, &j);
            j[k] = jet[k];
            for r in 0..self.out_dim {
                out[(r, k)] = (p[r] - m[r]) / (2.0 * h);
            }
        }
        out
    }
}

/// Zero-set oracle for systems affine in the jet: projection onto the affine zero set, pulled
/// towards the least-norm zero when the projection leaves the ball.
struct AffineOracle {
    system: CoefficientSystem,
}

impl ZeroSetOracle for AffineOracle {
    fn nearest(&self, x: &[f64], u: &[f64], target: &[f64], query: &[f64], radius: f64) -> Option<Vec<f64>> {
        let basis = self.system.layout.basis();
        let len = query.len();
        let zero = vec![0.0; len];
        let f0 = self.system.evaluate(x, u, &zero);
        let m = f0.len();
        let mut lmat = DMatrix::zeros(m, basis.len());
        for (c, e) in basis.iter().enumerate() {
            let fe = self.system.evaluate(x, u, e);
            for r in 0..m {
                lmat[(r, c)] = fe[r] - f0[r];
            }
        }
        let to_coords = |v: &[f64]| DVector::from_iterator(basis.len(), basis.iter().map(|e| e.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()));
        let from_coords = |c: &DVector<f64>| {
            let mut v = vec![0.0; len];
            for (k, e) in basis.iter().enumerate() {
                for (o, x) in v.iter_mut().zip(e) {
                    *o += c[k] * x;
                }
            }
            v
        };
        let pinv = lmat.clone().pseudo_inverse(1e-12).ok()?;
        let rhs = DVector::from_iterator(m, target.iter().zip(&f0).map(|(t, f)| t - f));
        let least = &pinv * &rhs;
        let scale = 1.0 + rhs.norm();
        if (&lmat * &least - &rhs).norm() > 1e-8 * scale {
            return None;
        }
        let q = to_coords(query);
        let resid = &lmat * &q - &rhs;
        let proj = &q - &pinv * resid;
        let pn = proj.norm();
        if pn <= radius {
            return Some(from_coords(&proj));
        }
        let ln = least.norm();
        if ln > radius * (1.0 + 1e-12) {
            return None;
        }
        // largest t with |least + t (proj - least)| <= radius
        let d = &proj - &least;
        let (a, b, c) = (d.dot(&d), 2.0 * least.dot(&d), ln * ln - radius * radius);
        let t = if a > 0.0 { ((-b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a)).clamp(0.0, 1.0) } else { 0.0 };
        Some(from_coords(&(&least + d * t)))
    }
}

/// `F(x, u, J) = A : X_2`, the linear constant-coefficient system of a tensor.
pub fn linear_system(tensor: &Tensor4) -> CoefficientSystem {
    let t = tensor.clone();
    let (big_n, n) = (t.range_dim(), t.domain_dim());
    let off = big_n * n;
    CoefficientSystem::new("linear", 2, n, big_n, big_n, move |_, _, j| t.apply_hessian_unchecked(&j[off..])).affine()
}

/// Projector onto the orthogonal complement of the range of an `N x n` matrix.
pub fn range_complement(p: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let big_n = p.nrows();
    if p.ncols() == 0 || p.abs().max() == 0.0 {
        return DMatrix::identity(big_n, big_n);
    }
    let svd = nalgebra::SVD::new(p.clone(), true, false);
    let u = svd.u.expect("left vectors");
    let smax = svd.singular_values.max();
    let mut proj = DMatrix::identity(big_n, big_n);
    for k in 0..svd.singular_values.len() {
        if svd.singular_values[k] > rank_tol * smax {
            let c = u.column(k);
            proj -= c * c.transpose();
        }
    }
    proj
}

/// Evaluates `(P x P + |P|^2 [P]_perp x I) : X` for `P` in R^{N x n} and `X` in R_s^{N n^2}.
pub fn infinity_laplacian(big_n: usize, n: usize, p: &[f64], x: &[f64], rank_tol: f64) -> Vec<f64> {
    let pm = DMatrix::from_row_slice(big_n, n, p);
    let perp = range_complement(&pm, rank_tol);
    let p2: f64 = p.iter().map(|v| v * v).sum();
    let mut out = vec![0.0; big_n];
    let mut traces = vec![0.0; big_n];
    for b in 0..big_n {
        traces[b] = (0..n).map(|i| x[(b * n + i) * n + i]).sum();
    }
    for a in 0..big_n {
        let mut s = 0.0;
        for i in 0..n {
            let pa = p[a * n + i];
            if pa == 0.0 {
                continue;
            }
            for b in 0..big_n {
                for j in 0..n {
                    s += pa * p[b * n + j] * x[(b * n + i) * n + j];
                }
            }
        }
        let t: f64 = (0..big_n).map(|b| perp[(a, b)] * traces[b]).sum();
        out[a] = s + p2 * t;
    }
    out
}

/// The infinity-Laplace system for maps R^n -> R^N.
pub fn infinity_laplace_system(n: usize, big_n: usize, rank_tol: f64) -> CoefficientSystem {
    let off = big_n * n;
    let sys = CoefficientSystem::new("infinity-laplace", 2, n, big_n, big_n, move |_, _, j| {
        infinity_laplacian(big_n, n, &j[..off], &j[off..], rank_tol)
    });
    let inner = sys.clone();
    sys.with_oracle(Arc::new(InfinityLaplaceOracle { system: inner }))
}

/// For fixed `P` the system is linear in `X`; candidates are the projection in `X` and, for a
/// zero target, the point with `P = 0`.
struct InfinityLaplaceOracle {
    system: CoefficientSystem,
}

impl ZeroSetOracle for InfinityLaplaceOracle {
    fn nearest(&self, x: &[f64], u: &[f64], target: &[f64], query: &[f64], radius: f64) -> Option<Vec<f64>> {
        let lay = self.system.layout;
        let off = lay.block_len(1);
        let p = query[..off].to_vec();
        let fixed_p = CoefficientSystem::new("slice", 2, lay.domain_dim, lay.range_dim, self.system.out_dim, {
            let sys = self.system.clone();
            let p = p.clone();
            move |x: &[f64], u: &[f64], j: &[f64]| {
                let mut jj = j.to_vec();
                jj[..p.len()].copy_from_slice(&p);
                sys.evaluate(x, u, &jj)
            }
        });
        let mut cands = Vec::new();
        let affine = AffineOracle { system: fixed_p };
        if let Some(mut c) = affine.nearest(x, u, target, query, radius) {
            c[..off].copy_from_slice(&p);
            if norm(&c) <= radius * (1.0 + 1e-9) {
                cands.push(c);
            }
        }
        if norm(target) == 0.0 {
            let mut c = query.to_vec();
            c[..off].iter_mut().for_each(|v| *v = 0.0);
            let nc = norm(&c);
            if nc > radius {
                c.iter_mut().for_each(|v| *v *= radius / nc);
            }
            cands.push(c);
        }
        cands.into_iter().min_by(|a, b| {
            let da = norm(&a.iter().zip(query).map(|(p, q)| p - q).collect::<Vec<_>>());
            let db = norm(&b.iter().zip(query).map(|(p, q)| p - q).collect::<Vec<_>>());
            da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
        })
    }
}

/// `F(D u) = |D u|^2 - c^2`.
pub fn eikonal_system(n: usize, big_n: usize, c: f64) -> CoefficientSystem {
    let sys = CoefficientSystem::new("eikonal", 1, n, big_n, 1, move |_, _, j| vec![j.iter().map(|v| v * v).sum::<f64>() - c * c]);
    sys.with_oracle(Arc::new(EikonalOracle { c }))
}

struct EikonalOracle {
    c: f64,
}

impl ZeroSetOracle for EikonalOracle {
    fn nearest(&self, _x: &[f64], _u: &[f64], target: &[f64], query: &[f64], radius: f64) -> Option<Vec<f64>> {
        let r2 = self.c * self.c + target[0];
        if r2 < 0.0 {
            return None;
        }
        let rho = r2.sqrt();
        if rho > radius * (1.0 + 1e-12) {
            return None;
        }
        let nq = norm(query);
        if nq == 0.0 {
            let mut v = vec![0.0; query.len()];
            v[0] = rho;
            return Some(v);
        }
        Some(query.iter().map(|v| v * rho / nq).collect())
    }
}

/// `F(x, X) = G(x, X_2)` for a map acting on hessians only.
pub fn hessian_system(
    name: impl Into<String>,
    n: usize,
    big_n: usize,
    out_dim: usize,
    g: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
) -> CoefficientSystem {
    let off = big_n * n;
    CoefficientSystem::new(name, 2, n, big_n, out_dim, move |x, _, j| g(x, &j[off..]))
}

/// Partial derivatives of a system, each returned row-major.
#[derive(Clone)]
pub struct SystemDerivatives {
    /// `M x n`.
    pub dx: Arc<JetFn>,
    /// `M x N`.
    pub du: Arc<JetFn>,
    /// `M x len(jet)` in full jet coordinates.
    pub djet: Arc<JetFn>,
}

impl SystemDerivatives {
    /// Derivatives of the eikonal system: only the jet derivative `2 X_1` is nonzero.
    pub fn eikonal(n: usize, big_n: usize) -> Self {
        SystemDerivatives {
            dx: Arc::new(move |_, _, _| vec![0.0; n]),
            du: Arc::new(move |_, _, _| vec![0.0; big_n]),
            djet: Arc::new(|_, _, j| j.iter().map(|v| 2.0 * v).collect()),
        }
    }
}

/// Whether a tangent system used exact derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DerivativeSource {
    Exact,
    FiniteDifference,
}

/// Tangent system of order `p + 1` with `M n` outputs: component `(mu, i)` is
/// `F_{x_i} + F_eta . D_i u + F_J : D_i J`, where `D_i J` is read from the next jet block.
pub fn tangent_system(f: &CoefficientSystem, derivs: Option<SystemDerivatives>) -> (CoefficientSystem, DerivativeSource) {
    let lay = f.layout();
    let (big_n, n, p) = (lay.range_dim, lay.domain_dim, lay.order);
    let m = f.out_dim();
    let inner_len = lay.len();
    let next = JetLayout { order: p + 1, ..lay };
    let source = if derivs.is_some() { DerivativeSource::Exact } else { DerivativeSource::FiniteDifference };
    let d = derivs.unwrap_or_else(|| finite_difference_derivatives(f));
    let name = format!("tangent({})", f.name());
    let sys = CoefficientSystem::new(name, p + 1, n, big_n, m * n, move |x, u, j| {
        let jp = &j[..inner_len];
        let dx = (d.dx)(x, u, jp);
        let du = (d.du)(x, u, jp);
        let dj = (d.djet)(x, u, jp);
        let mut out = vec![0.0; m * n];
        for mu in 0..m {
            for i in 0..n {
                let mut s = dx[mu * n + i];
                for b in 0..big_n {
                    s += du[mu * big_n + b] * j[b * n + i];
                }
                for q in 1..=p {
                    let off_q = next.block_offset(q);
                    let off_next = next.block_offset(q + 1);
                    let blk = n.pow(q as u32);
                    for b in 0..big_n {
                        for t in 0..blk {
                            let w = dj[mu * inner_len + off_q + b * blk + t];
                            if w != 0.0 {
                                s += w * j[off_next + (b * blk + t) * n + i];
                            }
                        }
                    }
                }
                out[mu * n + i] = s;
            }
        }
        out
    });
    (sys, source)
}

fn finite_difference_derivatives(f: &CoefficientSystem) -> SystemDerivatives {
    let fx = f.clone();
    let fu = f.clone();
    let fj = f.clone();
    let fd = |sys: &CoefficientSystem, arg: usize, x: &[f64], u: &[f64], j: &[f64]| -> Vec<f64> {
        let m = sys.out_dim();
        let base: Vec<f64> = match arg {
            0 => x.to_vec(),
            1 => u.to_vec(),
            _ => j.to_vec(),
        };
        let len = base.len();
        let mut out = vec![0.0; m * len];
        let mut v = base.clone();
        for k in 0..len {
            let h = 1e-6 * (1.0 + base[k].abs());
            let eval = |v: &[f64]| match arg {
                0 => sys.evaluate(v, u, j),
                1 => sys.evaluate(x, v, j),
                _ => sys.evaluate(x, u, v),
            };
            v[k] = base[k] + h;
            let p = eval(&v);
            v[k] = base[k] - h;
            let q = eval(&v);
            v[k] = base[k];
            for r in 0..m {
                out[r * len + k] = (p[r] - q[r]) / (2.0 * h);
            }
        }
        out
    };
    SystemDerivatives {
        dx: Arc::new(move |x, u, j| fd(&fx, 0, x, u, j)),
        du: Arc::new(move |x, u, j| fd(&fu, 1, x, u, j)),
        djet: Arc::new(move |x, u, j| fd(&fj, 2, x, u, j)),
    }
}

/// Number of independent entries of a symmetric order-two block, for reporting.
pub fn sym_block_dim(big_n: usize, n: usize) -> usize {
    big_n * sym_pairs(n).len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_infinity_laplacian_is_u1_squared_u11() {
        let v = infinity_laplacian(1, 1, &[3.0], &[2.0], 1e-9);
        assert!((v[0] - 18.0).abs() < 1e-12);
    }

    #[test]
    fn infinity_laplacian_full_rank_drops_projection_term() {
        let p = [1.0, 0.5, -0.2, 2.0];
        let x = [1.0, 0.3, 0.3, -1.0, 0.2, 0.7, 0.7, 0.4];
        let v = infinity_laplacian(2, 2, &p, &x, 1e-9);
        let mut expect = [0.0; 2];
        for a in 0..2 {
            for i in 0..2 {
                for b in 0..2 {
                    for j in 0..2 {
                        expect[a] += p[a * 2 + i] * p[b * 2 + j] * x[(b * 2 + i) * 2 + j];
                    }
                }
            }
        }
        assert!((v[0] - expect[0]).abs() < 1e-12 && (v[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn infinity_laplacian_rank_one_uses_complement() {
        // P = e1 x e1, |P| = 1, complement of range is e2
        let p = [1.0, 0.0, 0.0, 0.0];
        let x = [0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 3.0];
        let v = infinity_laplacian(2, 2, &p, &x, 1e-9);
        assert!((v[0]).abs() < 1e-12);
        assert!((v[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn eikonal_tangent_is_twice_gradient_contraction() {
        let f = eikonal_system(2, 1, 1.0);
        let (t, src) = tangent_system(&f, Some(SystemDerivatives::eikonal(2, 1)));
        assert_eq!(src, DerivativeSource::Exact);
        let jet = [0.6, 0.8, 1.0, 2.0, 2.0, -1.0];
        let v = t.evaluate(&[0.0, 0.0], &[0.0], &jet);
        assert!((v[0] - 2.0 * (0.6 * 1.0 + 0.8 * 2.0)).abs() < 1e-12);
        assert!((v[1] - 2.0 * (0.6 * 2.0 + 0.8 * -1.0)).abs() < 1e-12);
        let (tf, src) = tangent_system(&f, None);
        assert_eq!(src, DerivativeSource::FiniteDifference);
        let w = tf.evaluate(&[0.0, 0.0], &[0.0], &jet);
        assert!((w[0] - v[0]).abs() < 1e-6 && (w[1] - v[1]).abs() < 1e-6);
    }

    #[test]
    fn jet_basis_is_orthonormal() {
        let lay = JetLayout { order: 2, range_dim: 2, domain_dim: 2 };
        let b = lay.basis();
        assert_eq!(b.len(), 4 + 6);
        for (i, x) in b.iter().enumerate() {
            for (j, y) in b.iter().enumerate() {
                let ip: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                assert!((ip - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_oracle_projects_onto_zero_set() {
        let sys = linear_system(&Tensor4::laplacian(1, 2));
        let oracle = sys.oracle().unwrap();
        let q = [0.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let z = oracle.nearest(&[0.0, 0.0], &[0.0], &[0.0], &q, 10.0).unwrap();
        assert!(sys.evaluate(&[0.0, 0.0], &[0.0], &z)[0].abs() < 1e-12);
        let d = norm(&z.iter().zip(&q).map(|(a, b)| a - b).collect::<Vec<_>>());
        assert!((d - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn eikonal_oracle_projects_radially() {
        let sys = eikonal_system(2, 1, 1.0);
        let z = sys.oracle().unwrap().nearest(&[0.0; 2], &[0.0], &[0.0], &[3.0, 4.0], 2.0).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-14 && (z[1] - 0.8).abs() < 1e-14);
    }
}
