//! Degenerate linear systems `A : D^2 u = f` with zero Dirichlet data, solved through the
//! eps-regularised tensor and extrapolated to `eps = 0` on the fibre components.

use crate::banded::{BandedCholesky, BandedSym};
use crate::error::{Error, Result};
use crate::grid::{GridFunction, Lattice};
use crate::linalg::{sym_eigen, TOL_LIN};
use crate::tensor::{Decomposition, EllipticityData, Tensor4};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// `-sum C^{alpha beta}_{ij} D_ij u_beta` on the unknown nodes of a lattice, factored.
#[derive(Clone, Debug)]
pub struct DiscreteOperator {
    lattice: Lattice,
    comps: usize,
    unknowns: Vec<usize>,
    slot: Vec<Option<usize>>,
    matrix: BandedSym,
    factor: BandedCholesky,
}

impl DiscreteOperator {
    /// `coef(alpha, beta)` is the `n x n` coefficient block coupling component `beta` into equation `alpha`.
    pub fn assemble(lattice: &Lattice, comps: usize, coef: &dyn Fn(usize, usize) -> DMatrix<f64>) -> Result<Self> {
        let n = lattice.dim();
        let unknowns: Vec<usize> = (0..lattice.len()).filter(|&k| lattice.is_unknown(k)).collect();
        let mut slot = vec![None; lattice.len()];
        for (m, &k) in unknowns.iter().enumerate() {
            slot[k] = Some(m);
        }
        let blocks: Vec<Vec<DMatrix<f64>>> = (0..comps).map(|a| (0..comps).map(|b| coef(a, b)).collect()).collect();
        let h = &lattice.spacing;
        // (row node, row comp, col node, col comp, value) of -L
        let mut entries: Vec<(usize, usize, usize, f64)> = Vec::new();
        let push = |row: usize, a: usize, col: Option<usize>, b: usize, v: f64, entries: &mut Vec<(usize, usize, usize, f64)>| {
            if let Some(c) = col.and_then(|c| slot[c]) {
                entries.push((row * comps + a, c * comps + b, 0, v));
            }
        };
        for (m, &k) in unknowns.iter().enumerate() {
            for a in 0..comps {
                for b in 0..comps {
                    let c = &blocks[a][b];
                    for i in 0..n {
                        let cii = c[(i, i)];
                        if cii != 0.0 {
                            let w = cii / (h[i] * h[i]);
                            push(m, a, Some(k), b, 2.0 * w, &mut entries);
                            push(m, a, lattice.neighbor(k, i, 1), b, -w, &mut entries);
                            push(m, a, lattice.neighbor(k, i, -1), b, -w, &mut entries);
                        }
                        for j in 0..n {
                            if j == i || c[(i, j)] == 0.0 {
                                continue;
                            }
                            let w = c[(i, j)] / (4.0 * h[i] * h[j]);
                            for (si, sj, sign) in [(1, 1, 1.0), (-1, -1, 1.0), (1, -1, -1.0), (-1, 1, -1.0)] {
                                let nb = lattice.neighbor(k, i, si).and_then(|p| lattice.neighbor(p, j, sj));
                                push(m, a, nb, b, -sign * w, &mut entries);
                            }
                        }
                    }
                }
            }
        }
        let size = unknowns.len() * comps;
        let bandwidth = entries.iter().map(|e| e.0.abs_diff(e.1)).max().unwrap_or(0);
        let mut matrix = BandedSym::zeros(size, bandwidth);
        // the stencil is symmetric, so only the lower half is accumulated
        for (r, c, _, v) in entries {
            if c <= r {
                matrix.add(r, c, v);
            }
        }
        let factor = BandedCholesky::factor(&matrix)?;
        Ok(DiscreteOperator { lattice: lattice.clone(), comps, unknowns, slot, matrix, factor })
    }

    pub fn condition(&self) -> f64 {
        self.factor.condition
    }

    pub fn unknowns(&self) -> &[usize] {
        &self.unknowns
    }

    /// Solves `L u = f` on the unknowns, zero elsewhere; returns the relative discrete residual.
    pub fn solve(&self, f: &GridFunction, tol: f64) -> Result<(GridFunction, f64)> {
        if f.components() != self.comps || f.lattice() != &self.lattice {
            return Err(Error::Dimension("right-hand side does not match the operator".into()));
        }
        let mut rhs = vec![0.0; self.unknowns.len() * self.comps];
        for (m, &k) in self.unknowns.iter().enumerate() {
            for a in 0..self.comps {
                rhs[m * self.comps + a] = -f.value(k)[a];
            }
        }
        let (x, rel) = self.factor.solve_refined(&self.matrix, &rhs, tol);
        if rel > tol {
            return Err(Error::NonConvergence(format!("discrete residual {rel:e} above {tol:e}")));
        }
        let mut u = GridFunction::zeros(self.lattice.clone(), self.comps);
        for k in 0..self.lattice.len() {
            if let Some(m) = self.slot[k] {
                u.value_mut(k).copy_from_slice(&x[m * self.comps..(m + 1) * self.comps]);
            }
        }
        Ok((u, rel))
    }
}

/// Coupled solve of `A_eps : D^2 u = f` with zero Dirichlet values.
pub fn assemble_and_solve_eps(a_eps: &Tensor4, f: &GridFunction, solver_tol: f64) -> Result<GridFunction> {
    let (big_n, n) = (a_eps.range_dim(), a_eps.domain_dim());
    let l = f.lattice();
    if f.components() != big_n || l.dim() != n {
        return Err(Error::Dimension(format!("tensor for R^{n} -> R^{big_n} but data on R^{} with {} components", l.dim(), f.components())));
    }
    let op = DiscreteOperator::assemble(l, big_n, &|a, b| DMatrix::from_fn(n, n, |i, j| a_eps.get(a, i, b, j)))?;
    Ok(op.solve(f, solver_tol)?.0)
}

/// Projections `(Sigma u, Pi D u, Xi D^2 u)`.
#[derive(Clone, Debug)]
pub struct FibreData {
    pub sigma_u: GridFunction,
    pub pi_du: GridFunction,
    pub xi_d2u: GridFunction,
}

impl FibreData {
    fn combine(&self, other: &FibreData, s: f64, t: f64) -> FibreData {
        let lin = |a: &GridFunction, b: &GridFunction| a.scale(s).add(&b.scale(t)).expect("same layout");
        FibreData {
            sigma_u: lin(&self.sigma_u, &other.sigma_u),
            pi_du: lin(&self.pi_du, &other.pi_du),
            xi_d2u: lin(&self.xi_d2u, &other.xi_d2u),
        }
    }

    /// Full grid function `Sigma u` with zero complement, the reassembled solution.
    pub fn solution(&self) -> &GridFunction {
        &self.sigma_u
    }
}

/// Weighted `L^2` norms of the three fibre components.
pub fn fibre_norms(fd: &FibreData) -> [f64; 3] {
    [fd.sigma_u.l2_norm(), fd.pi_du.l2_norm(), fd.xi_d2u.l2_norm()]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveReport {
    pub eps: Vec<f64>,
    /// Fibre-norm distance between consecutive eps levels.
    pub cauchy: Vec<f64>,
    /// `||A : Xi D^2 u - f|| / ||f||` on the unknown nodes.
    pub residual: f64,
    pub discrete_residual: f64,
    pub condition: f64,
    pub extrapolated: bool,
}

/// Solver for a fixed decomposition, lattice and eps sequence, with cached factorisations.
///
/// The `B` factors of the regularised decomposition are diagonal in a common orthonormal basis
/// `v_k` of R^N, so the coupled system splits into scalar problems with coefficient
/// `sum_gamma (v_k . B^gamma v_k) A^gamma`.
pub struct LinearFibreSolver {
    dec: Decomposition,
    ell: EllipticityData,
    lattice: Lattice,
    eps: Vec<f64>,
    basis: DMatrix<f64>,
    /// Per eps level, per basis vector: index into `ops`.
    op_index: Vec<Vec<usize>>,
    ops: Vec<DiscreteOperator>,
    pub solver_tol: f64,
}

impl LinearFibreSolver {
    pub fn new(dec: &Decomposition, lattice: &Lattice, eps: &[f64]) -> Result<Self> {
        if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) || eps.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::Precondition("eps sequence must be positive and strictly decreasing".into()));
        }
        if lattice.dim() != dec.domain_dim() {
            return Err(Error::Dimension("lattice dimension differs from the tensor".into()));
        }
        let ell = dec.ellipticity()?;
        let big_n = dec.range_dim();
        let n = dec.domain_dim();
        let basis = common_basis(dec);
        let mut ops: Vec<DiscreteOperator> = Vec::new();
        let mut keys: Vec<DMatrix<f64>> = Vec::new();
        let mut op_index = Vec::new();
        for &e in eps {
            let reg = dec.regularized_factors(e)?;
            let mut row = Vec::with_capacity(big_n);
            for k in 0..big_n {
                let v = basis.column(k);
                let mut c = DMatrix::zeros(n, n);
                for (b, a) in reg.b_factors().iter().zip(reg.a_factors()) {
                    let w = (v.transpose() * b * v)[(0, 0)];
                    for other in (0..big_n).filter(|&j| j != k) {
                        let off = (basis.column(other).transpose() * b * v)[(0, 0)];
                        if off.abs() > 1e-8 * (1.0 + b.abs().max()) {
                            return Err(Error::InvalidDecomposition("B factors are not simultaneously diagonal".into()));
                        }
                    }
                    c += a * w;
                }
                let pos = keys.iter().position(|m| (m - &c).abs().max() <= 1e-15 * (1.0 + c.abs().max()));
                let idx = match pos {
                    Some(p) => p,
                    None => {
                        ops.push(DiscreteOperator::assemble(lattice, 1, &|_, _| c.clone())?);
                        keys.push(c);
                        ops.len() - 1
                    }
                };
                row.push(idx);
            }
            op_index.push(row);
        }
        Ok(LinearFibreSolver { dec: dec.clone(), ell, lattice: lattice.clone(), eps: eps.to_vec(), basis, op_index, ops, solver_tol: 1e-10 })
    }

    pub fn ellipticity(&self) -> &EllipticityData {
        &self.ell
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.dec
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    /// Rejects data with a component outside `Sigma`.
    pub fn require_sigma_valued(&self, f: &GridFunction) -> Result<()> {
        let big_n = self.dec.range_dim();
        if f.components() != big_n || f.lattice() != &self.lattice {
            return Err(Error::Dimension(format!("right-hand side must have {big_n} components on the solver lattice")));
        }
        let scale = 1.0 + f.max_abs();
        let tolerance = TOL_LIN * scale;
        let off = (0..self.lattice.len())
            .map(|k| {
                let v = f.value(k);
                let p = self.ell.sigma.project(v);
                v.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            })
            .fold(0.0, f64::max);
        if off > tolerance {
            return Err(Error::NotSigmaValued { off_range: off, tolerance });
        }
        Ok(())
    }

    /// Regularised solution at eps level `level`.
    pub fn solve_eps(&self, level: usize, f: &GridFunction) -> Result<(GridFunction, f64)> {
        let big_n = self.dec.range_dim();
        let l = &self.lattice;
        let mut u = GridFunction::zeros(l.clone(), big_n);
        let mut worst: f64 = 0.0;
        for k in 0..big_n {
            let v = self.basis.column(k);
            let rhs = f.map(1, |_, x| vec![(0..big_n).map(|a| v[a] * x[a]).sum()]);
            if rhs.max_abs() == 0.0 {
                continue;
            }
            let (w, rel) = self.ops[self.op_index[level][k]].solve(&rhs, self.solver_tol)?;
            worst = worst.max(rel);
            for node in 0..l.len() {
                let wk = w.value(node)[0];
                if wk != 0.0 {
                    let out = u.value_mut(node);
                    for a in 0..big_n {
                        out[a] += v[a] * wk;
                    }
                }
            }
        }
        Ok((u, worst))
    }

    /// Projects `u`, its gradient and its hessian onto `Sigma`, `Pi` and `Xi`.
    pub fn fibre(&self, u: &GridFunction) -> FibreData {
        let sigma = &self.ell.sigma;
        let pi = &self.ell.pi;
        let xi = &self.ell.xi;
        let sigma_u = u.map(u.components(), |_, v| sigma.project(v));
        let g = u.gradient();
        let pi_du = g.map(g.components(), |_, v| pi.project(v));
        let h = u.hessian();
        let xi_d2u = h.map(h.components(), |_, v| xi.project(v));
        FibreData { sigma_u, pi_du, xi_d2u }
    }

    /// Solves at every eps level, checks the levels form a Cauchy sequence and extrapolates to zero.
    pub fn solve(&self, f: &GridFunction) -> Result<(FibreData, SolveReport)> {
        self.require_sigma_valued(f)?;
        let levels: Vec<(FibreData, f64)> = (0..self.eps.len())
            .into_par_iter()
            .map(|i| self.solve_eps(i, f).map(|(u, rel)| (self.fibre(&u), rel)))
            .collect::<Result<_>>()?;
        let mut cauchy = Vec::new();
        for w in levels.windows(2) {
            let d = w[1].0.combine(&w[0].0, 1.0, -1.0);
            cauchy.push(fibre_norms(&d).iter().sum());
        }
        let size: f64 = levels.last().map(|l| fibre_norms(&l.0).iter().sum()).unwrap_or(0.0);
        let floor = 1e-10 * (1.0 + size);
        for w in cauchy.windows(2) {
            if w[1] > floor && w[1] > 1.1 * w[0] {
                return Err(Error::NotCauchy(cauchy.clone()));
            }
        }
        let last = levels.len() - 1;
        let (fd, extrapolated) = if last >= 1 {
            let (e1, e0) = (self.eps[last], self.eps[last - 1]);
            // value at 0 of the line through (e0, X0) and (e1, X1)
            let t = e1 / (e0 - e1);
            (levels[last].0.combine(&levels[last - 1].0, 1.0 + t, -t), true)
        } else {
            (levels[0].0.clone(), false)
        };
        let discrete_residual = levels.iter().map(|l| l.1).fold(0.0, f64::max);
        let residual = self.relative_residual(&fd, f);
        let condition = self.ops.iter().map(|o| o.condition()).fold(0.0, f64::max);
        Ok((fd, SolveReport { eps: self.eps.clone(), cauchy, residual, discrete_residual, condition, extrapolated }))
    }

    /// `||A : Xi D^2 u - f|| / ||f||` over the unknown nodes.
    pub fn relative_residual(&self, fd: &FibreData, f: &GridFunction) -> f64 {
        let t = self.dec.reconstruct();
        let nodes = self.ops.first().map(|o| o.unknowns().to_vec()).unwrap_or_default();
        let r = GridFunction::from_values(
            self.lattice.clone(),
            f.components(),
            (0..self.lattice.len())
                .flat_map(|k| {
                    let a = t.apply_hessian_unchecked(fd.xi_d2u.value(k));
                    a.into_iter().zip(f.value(k)).map(|(p, q)| p - q).collect::<Vec<_>>()
                })
                .collect(),
        )
        .expect("layout");
        let fnorm = f.l2_norm_on(&nodes);
        let rn = r.l2_norm_on(&nodes);
        if fnorm > 0.0 {
            rn / fnorm
        } else {
            rn
        }
    }
}

/// Orthonormal basis of R^N in which every `B` factor is diagonal: positive eigenvectors of each
/// factor, completed by a basis of the common kernel.
fn common_basis(dec: &Decomposition) -> DMatrix<f64> {
    let big_n = dec.range_dim();
    let mut vecs: Vec<DVector<f64>> = Vec::new();
    for b in dec.b_factors() {
        let (vals, v) = sym_eigen(b);
        let top = vals.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..big_n {
            if vals[k] > crate::linalg::TOL_RANK_REL * top && top > 0.0 {
                vecs.push(v.column(k).into_owned());
            }
        }
    }
    let ortho = crate::linalg::orthonormalize(&vecs, 1e-10);
    let full = crate::linalg::complete_basis(&ortho, big_n);
    DMatrix::from_columns(&full)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HessianEstimate {
    /// `||Xi D^2 u||`.
    pub lhs: f64,
    /// `||A_eps : D^2 u|| / nu`.
    pub rhs: f64,
    pub nu: f64,
    pub eps: f64,
    pub pass: bool,
    /// `||D^2 u||` and `||Delta u||` when the tensor is the Laplacian.
    pub miranda_talenti: Option<(f64, f64)>,
}

/// Relative slack for the discrete hessian estimate.
pub const TOL_ESTIMATE: f64 = 0.02;

/// Compares `||Xi D^2 u||` with `||A_eps : D^2 u|| / nu` using central-difference hessians.
pub fn verify_hessian_estimate(dec: &Decomposition, u: &GridFunction, eps: f64) -> Result<HessianEstimate> {
    let ell = dec.ellipticity()?;
    let big_n = dec.range_dim();
    let n = dec.domain_dim();
    if u.components() != big_n || u.lattice().dim() != n {
        return Err(Error::Dimension("function does not match the tensor".into()));
    }
    let a_eps = if eps > 0.0 { dec.regularize(eps)? } else { dec.reconstruct() };
    let h = u.hessian();
    let xi = h.map(h.components(), |_, v| ell.xi.project(v));
    let au = h.map(big_n, |_, v| a_eps.apply_hessian_unchecked(v));
    let lhs = xi.l2_norm();
    let rhs = au.l2_norm() / ell.nu;
    let is_laplacian = {
        let lap = Tensor4::laplacian(big_n, n);
        (dec.reconstruct().matrix() - lap.matrix()).abs().max() < 1e-14
    };
    let miranda_talenti = if is_laplacian {
        let lapl = h.map(big_n, |_, v| (0..big_n).map(|a| (0..n).map(|i| v[(a * n + i) * n + i]).sum()).collect());
        Some((h.l2_norm(), lapl.l2_norm()))
    } else {
        None
    };
    let pass = lhs <= rhs * (1.0 + TOL_ESTIMATE) + 1e-12;
    Ok(HessianEstimate { lhs, rhs, nu: ell.nu, eps, pass, miranda_talenti })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoincareReport {
    /// `(||eta . u||, diam * ||D_a (eta . u)||, pass)` per pair.
    pub pairs: Vec<(f64, f64, bool)>,
    pub pass: bool,
}

/// Checks `||eta . u|| <= diam ||D_a (eta . u)||` for each `(eta, a)` pair.
pub fn poincare_check(u: &GridFunction, pairs: &[(Vec<f64>, Vec<f64>)], tol_disc: f64) -> Result<PoincareReport> {
    let l = u.lattice();
    let diam = l.diameter();
    let mut out = Vec::new();
    for (eta, a) in pairs {
        if eta.len() != u.components() || a.len() != l.dim() {
            return Err(Error::Dimension("direction pair does not match the function".into()));
        }
        let s = u.map(1, |_, v| vec![v.iter().zip(eta).map(|(p, q)| p * q).sum()]);
        let g = s.gradient();
        let d = g.map(1, |_, v| vec![v.iter().zip(a).map(|(p, q)| p * q).sum()]);
        let left = s.l2_norm();
        let right = diam * d.l2_norm();
        out.push((left, right, left <= right + tol_disc));
    }
    let pass = out.iter().all(|p| p.2);
    Ok(PoincareReport { pairs: out, pass })
}
