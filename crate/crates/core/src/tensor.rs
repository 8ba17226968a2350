//! Fourth-order tensors on R^{Nn}, decomposable tensors and the subspaces they induce.
//!
//! A tensor is stored as a symmetric `Nn x Nn` matrix with entry
//! `(alpha * n + i, beta * n + j)` holding `A_{alpha i beta j}`.

use crate::error::{Error, Result};
use crate::linalg::{
    self, coords_to_hessian, hessian_to_coords, intersect, orthonormalize, projector,
    range_basis_eigen, range_basis_svd, sym_eigen, sym_op_norm, sym_pairs, TOL_LIN, TOL_PSD,
    TOL_RANK_REL,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fourth-order tensor with the major symmetry `A_{alpha i beta j} = A_{beta j alpha i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Tensor4Doc", into = "Tensor4Doc")]
pub struct Tensor4 {
    range_dim: usize,
    domain_dim: usize,
    matrix: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct Tensor4Doc {
    #[serde(rename = "N")]
    range_dim: usize,
    n: usize,
    entries: Vec<Vec<Vec<Vec<f64>>>>,
}

impl TryFrom<Tensor4Doc> for Tensor4 {
    type Error = Error;
    fn try_from(doc: Tensor4Doc) -> Result<Self> {
        let (big_n, n) = (doc.range_dim, doc.n);
        let bad = || Error::Parse(format!("tensor entries must have shape [{big_n}][{n}][{big_n}][{n}]"));
        if doc.entries.len() != big_n {
            return Err(bad());
        }
        let mut m = DMatrix::zeros(big_n * n, big_n * n);
        for (a, blk) in doc.entries.iter().enumerate() {
            if blk.len() != n {
                return Err(bad());
            }
            for (i, row) in blk.iter().enumerate() {
                if row.len() != big_n {
                    return Err(bad());
                }
                for (b, col) in row.iter().enumerate() {
                    if col.len() != n {
                        return Err(bad());
                    }
                    for (j, v) in col.iter().enumerate() {
                        m[(a * n + i, b * n + j)] = *v;
                    }
                }
            }
        }
        Tensor4::new(big_n, n, m)
    }
}

impl From<Tensor4> for Tensor4Doc {
    fn from(t: Tensor4) -> Self {
        let (big_n, n) = (t.range_dim, t.domain_dim);
        let entries = (0..big_n)
            .map(|a| {
                (0..n)
                    .map(|i| {
                        (0..big_n)
                            .map(|b| (0..n).map(|j| t.get(a, i, b, j)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Tensor4Doc { range_dim: big_n, n, entries }
    }
}

impl Tensor4 {
    /// Wraps a symmetric `Nn x Nn` matrix.
    pub fn new(range_dim: usize, domain_dim: usize, matrix: DMatrix<f64>) -> Result<Self> {
        let d = range_dim * domain_dim;
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::Dimension(format!(
                "expected a {d}x{d} matrix, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let scale = 1.0f64.max(matrix.abs().max());
        if (&matrix - matrix.transpose()).abs().max() > TOL_LIN * scale {
            return Err(Error::Precondition("tensor lacks the major symmetry".into()));
        }
        Ok(Tensor4 { range_dim, domain_dim, matrix })
    }

    pub fn from_fn(
        range_dim: usize,
        domain_dim: usize,
        f: impl Fn(usize, usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let n = domain_dim;
        let m = DMatrix::from_fn(range_dim * n, range_dim * n, |r, c| f(r / n, r % n, c / n, c % n));
        Tensor4::new(range_dim, domain_dim, m)
    }

    /// `delta_{alpha beta} delta_{ij}`, the tensor of the Laplacian system.
    pub fn laplacian(range_dim: usize, domain_dim: usize) -> Self {
        let d = range_dim * domain_dim;
        Tensor4 { range_dim, domain_dim, matrix: DMatrix::identity(d, d) }
    }

    pub fn range_dim(&self) -> usize {
        self.range_dim
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, a: usize, i: usize, b: usize, j: usize) -> f64 {
        let n = self.domain_dim;
        self.matrix[(a * n + i, b * n + j)]
    }

    /// `(A : Q)_{alpha i} = sum A_{alpha i beta j} Q_{beta j}` for `Q` in R^{N x n}, row-major.
    pub fn apply_matrix(&self, q: &[f64]) -> Result<Vec<f64>> {
        let d = self.range_dim * self.domain_dim;
        if q.len() != d {
            return Err(Error::Dimension(format!("matrix argument has {} entries, expected {d}", q.len())));
        }
        Ok((&self.matrix * DVector::from_column_slice(q)).as_slice().to_vec())
    }

    /// `(A : X)_alpha = sum A_{alpha i beta j} X_{beta i j}` for `X` in R_s^{N n^2}.
    pub fn apply_hessian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (big_n, n) = (self.range_dim, self.domain_dim);
        if x.len() != big_n * n * n {
            return Err(Error::Dimension(format!(
                "hessian argument has {} entries, expected {}",
                x.len(),
                big_n * n * n
            )));
        }
        Ok(self.apply_hessian_unchecked(x))
    }

    pub(crate) fn apply_hessian_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let (big_n, n) = (self.range_dim, self.domain_dim);
        let mut out = vec![0.0; big_n];
        for (a, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for i in 0..n {
                let row = a * n + i;
                for b in 0..big_n {
                    for j in 0..n {
                        s += self.matrix[(row, b * n + j)] * x[(b * n + i) * n + j];
                    }
                }
            }
            *o = s;
        }
        out
    }

    /// `A : (eta x a) x (eta x a)`.
    pub fn rank_one(&self, eta: &[f64], a: &[f64]) -> f64 {
        let v = DVector::from_fn(self.range_dim * self.domain_dim, |k, _| {
            eta[k / self.domain_dim] * a[k % self.domain_dim]
        });
        v.dot(&(&self.matrix * &v))
    }

    /// Matrix of `X -> A : X` from orthonormal symmetric coordinates to R^N.
    pub fn hessian_map(&self) -> DMatrix<f64> {
        let (big_n, n) = (self.range_dim, self.domain_dim);
        let m = n * (n + 1) / 2;
        let dim = big_n * m;
        let mut out = DMatrix::zeros(big_n, dim);
        let mut e = vec![0.0; dim];
        for k in 0..dim {
            e[k] = 1.0;
            let full = coords_to_hessian(big_n, n, &e);
            let col = self.apply_hessian_unchecked(&full);
            for a in 0..big_n {
                out[(a, k)] = col[a];
            }
            e[k] = 0.0;
        }
        out
    }

    /// Sampled check of `A : eta x a x eta x a >= lower` over unit pairs; returns the smallest value seen.
    pub fn check_rank_one_positive(&self, lower: f64, samples: usize, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = f64::INFINITY;
        for _ in 0..samples {
            let eta = random_unit(&mut rng, self.range_dim);
            let a = random_unit(&mut rng, self.domain_dim);
            worst = worst.min(self.rank_one(eta.as_slice(), a.as_slice()));
        }
        let scale = 1.0f64.max(self.matrix.abs().max());
        if worst < lower - 1e-9 * scale {
            return Err(Error::NotRankOnePositive(format!(
                "sampled minimum {worst:e} below required {lower:e}"
            )));
        }
        Ok(worst)
    }
}

pub(crate) fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| gaussian(rng));
        let nv = v.norm();
        if nv > 1e-8 {
            return v / nv;
        }
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Ambient space of a subspace projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ambient {
    /// R^dim.
    Vector { dim: usize },
    /// R^{rows x cols}, row-major.
    Matrix { rows: usize, cols: usize },
    /// Symmetric n x n matrices in orthonormal coordinates.
    SymMatrix { n: usize },
    /// R_s^{N n^2} in orthonormal coordinates.
    SymHessian { range_dim: usize, domain_dim: usize },
}

impl Ambient {
    /// Dimension of the coordinate space.
    pub fn dim(&self) -> usize {
        match *self {
            Ambient::Vector { dim } => dim,
            Ambient::Matrix { rows, cols } => rows * cols,
            Ambient::SymMatrix { n } => n * (n + 1) / 2,
            Ambient::SymHessian { range_dim, domain_dim } => range_dim * domain_dim * (domain_dim + 1) / 2,
        }
    }

    /// Number of entries of an element stored in full.
    pub fn full_len(&self) -> usize {
        match *self {
            Ambient::Vector { dim } => dim,
            Ambient::Matrix { rows, cols } => rows * cols,
            Ambient::SymMatrix { n } => n * n,
            Ambient::SymHessian { range_dim, domain_dim } => range_dim * domain_dim * domain_dim,
        }
    }

    pub fn to_coords(&self, full: &[f64]) -> DVector<f64> {
        match *self {
            Ambient::SymMatrix { n } => DVector::from_vec(linalg::sym_to_coords(n, full)),
            Ambient::SymHessian { range_dim, domain_dim } => {
                DVector::from_vec(hessian_to_coords(range_dim, domain_dim, full))
            }
            _ => DVector::from_column_slice(full),
        }
    }

    pub fn from_coords(&self, c: &DVector<f64>) -> Vec<f64> {
        match *self {
            Ambient::SymMatrix { n } => linalg::coords_to_sym(n, c.as_slice()),
            Ambient::SymHessian { range_dim, domain_dim } => {
                coords_to_hessian(range_dim, domain_dim, c.as_slice())
            }
            _ => c.as_slice().to_vec(),
        }
    }
}

/// Orthogonal projector onto a subspace, with an orthonormal basis of that subspace.
#[derive(Clone, Debug)]
pub struct SubspaceProjector {
    ambient: Ambient,
    basis: Vec<DVector<f64>>,
    matrix: DMatrix<f64>,
}

impl SubspaceProjector {
    /// Builds the projector onto the span of `vectors` (coordinates of the ambient space).
    pub fn from_spanning(ambient: Ambient, vectors: &[DVector<f64>]) -> Self {
        let basis = orthonormalize(vectors, 1e-8);
        let matrix = projector(&basis, ambient.dim());
        SubspaceProjector { ambient, basis, matrix }
    }

    pub fn zero(ambient: Ambient) -> Self {
        SubspaceProjector { ambient, basis: Vec::new(), matrix: DMatrix::zeros(ambient.dim(), ambient.dim()) }
    }

    pub fn ambient(&self) -> Ambient {
        self.ambient
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn basis(&self) -> &[DVector<f64>] {
        &self.basis
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Projects a vector given in coordinates.
    pub fn project_coords(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.matrix * c
    }

    /// Projects an element stored in full and returns it in full.
    pub fn project(&self, full: &[f64]) -> Vec<f64> {
        let c = self.ambient.to_coords(full);
        self.ambient.from_coords(&(&self.matrix * c))
    }

    /// Norm of the projection of a full element.
    pub fn project_norm(&self, full: &[f64]) -> f64 {
        let c = self.ambient.to_coords(full);
        (&self.matrix * c).norm()
    }

    /// Frobenius distance between two projectors on the same ambient space.
    pub fn distance(&self, other: &SubspaceProjector) -> f64 {
        if self.ambient != other.ambient {
            return f64::INFINITY;
        }
        (&self.matrix - &other.matrix).norm()
    }

    /// Projector onto the orthogonal complement.
    pub fn complement(&self) -> SubspaceProjector {
        let d = self.ambient.dim();
        let mut all = self.basis.clone();
        all.extend((0..d).map(|k| DVector::from_fn(d, |i, _| if i == k { 1.0 } else { 0.0 })));
        let full = orthonormalize(&all, 1e-8);
        let basis = full[self.basis.len()..].to_vec();
        let matrix = projector(&basis, d);
        SubspaceProjector { ambient: self.ambient, basis, matrix }
    }

    pub fn contains(&self, full: &[f64], tol: f64) -> bool {
        let c = self.ambient.to_coords(full);
        let r = &c - &self.matrix * &c;
        r.norm() <= tol * 1.0f64.max(c.norm())
    }
}

/// Spectral data of a PSD matrix `A = O Lambda O^T` regularised by `eps`.
#[derive(Clone, Debug)]
pub struct SpectralData {
    /// Orthogonal eigenvector matrix, columns in ascending eigenvalue order.
    pub o: DMatrix<f64>,
    /// Eigenvalues, ascending.
    pub lambda: DVector<f64>,
    /// 0-based index of the smallest positive eigenvalue; equals `n` when `A = 0`.
    pub first_positive: usize,
    pub eps: f64,
    /// `(Lambda + eps I)^{1/2}`.
    pub theta: DMatrix<f64>,
    /// `O Theta`, so that `Gamma Gamma^T = A + eps I`.
    pub gamma: DMatrix<f64>,
}

impl SpectralData {
    /// Smallest positive eigenvalue, if `A != 0`.
    pub fn smallest_positive(&self) -> Option<f64> {
        (self.first_positive < self.lambda.len()).then(|| self.lambda[self.first_positive])
    }

    /// Zeroes the entries of a symmetric matrix (row-major) outside the positive block.
    pub fn block_projection(&self, x: &[f64]) -> Vec<f64> {
        let n = self.lambda.len();
        let mut out = vec![0.0; n * n];
        for i in self.first_positive..n {
            for j in self.first_positive..n {
                out[i * n + j] = x[i * n + j];
            }
        }
        out
    }

    /// `O H0(O^T X O) O^T`, the projection onto `span{a v b : a, b in R(A)}`.
    pub fn h_projection(&self, x: &[f64]) -> Vec<f64> {
        let n = self.lambda.len();
        let xm = DMatrix::from_row_slice(n, n, x);
        let rotated = self.o.transpose() * xm * &self.o;
        let blk = self.block_projection(rotated.transpose().as_slice());
        let back = &self.o * DMatrix::from_row_slice(n, n, &blk) * self.o.transpose();
        back.transpose().as_slice().to_vec()
    }
}

/// Spectral factorisation of a PSD matrix, with `Gamma = O (Lambda + eps I)^{1/2}`.
pub fn spectral_factor(a: &DMatrix<f64>, eps: f64) -> Result<SpectralData> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("spectral factor needs a square matrix".into()));
    }
    if eps < 0.0 {
        return Err(Error::Precondition("eps must be nonnegative".into()));
    }
    if !linalg::is_psd(a) {
        return Err(Error::NotPsd("matrix has a negative eigenvalue".into()));
    }
    let n = a.nrows();
    let (lambda, o) = sym_eigen(a);
    let top = lambda.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let thr = TOL_RANK_REL * top;
    let first_positive = (0..n).find(|&k| top > 0.0 && lambda[k] > thr).unwrap_or(n);
    let lambda = lambda.map(|v| if v.abs() <= thr { 0.0 } else { v.max(0.0) });
    let theta = DMatrix::from_diagonal(&lambda.map(|v| (v + eps).sqrt()));
    let gamma = &o * &theta;
    Ok(SpectralData { o, lambda, first_positive, eps, theta, gamma })
}

/// The subspace `span{a v b : a, b in R(A)}` of symmetric matrices.
///
/// Built from the eigenvector block and independently from a singular value basis of
/// the range; the two constructions must agree.
pub fn subspace_h(a: &DMatrix<f64>) -> Result<SubspaceProjector> {
    let n = a.nrows();
    let amb = Ambient::SymMatrix { n };
    let sd = spectral_factor(a, 0.0)?;
    let m = amb.dim();
    let mut images = Vec::with_capacity(m);
    for k in 0..m {
        let mut e = DVector::zeros(m);
        e[k] = 1.0;
        let full = amb.from_coords(&e);
        images.push(amb.to_coords(&sd.h_projection(&full)));
    }
    let spectral = DMatrix::from_columns(&images);

    let range = range_basis_svd(a);
    let mut spanning = Vec::new();
    for (p, q) in sym_pairs(range.len()) {
        let s = linalg::sym_product(&range[p], &range[q]);
        spanning.push(amb.to_coords(s.transpose().as_slice()));
    }
    let via_range = SubspaceProjector::from_spanning(amb, &spanning);
    let dist = (&spectral - via_range.matrix()).norm();
    if dist > TOL_LIN.max(1e-9 * (1.0 + via_range.dim() as f64).sqrt()) {
        return Err(Error::SubspaceDisagreement { what: "block projection vs range products".into(), distance: dist });
    }
    Ok(via_range)
}

/// Report of [`Decomposition::validate`].
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub b_psd: Vec<bool>,
    pub a_psd: Vec<bool>,
    pub ranges_orthogonal: bool,
    /// Largest `|U_gamma^T U_delta|` over distinct factor ranges.
    pub worst_overlap: f64,
    pub common_eigenvector: bool,
    /// A common vector of the lowest positive eigenspaces, when one exists.
    pub witness: Option<Vec<f64>>,
    pub valid: bool,
}

/// `A = sum_gamma B^gamma (x) A^gamma` with PSD factors, the `B^gamma` having
/// mutually orthogonal ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DecompositionDoc", into = "DecompositionDoc")]
pub struct Decomposition {
    range_dim: usize,
    domain_dim: usize,
    b: Vec<DMatrix<f64>>,
    a: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DecompositionDoc {
    #[serde(rename = "N")]
    range_dim: usize,
    n: usize,
    #[serde(rename = "B_factors")]
    b_factors: Vec<Vec<Vec<f64>>>,
    #[serde(rename = "A_factors")]
    a_factors: Vec<Vec<Vec<f64>>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Parse(format!("{what} must be {dim}x{dim}")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl TryFrom<DecompositionDoc> for Decomposition {
    type Error = Error;
    fn try_from(doc: DecompositionDoc) -> Result<Self> {
        let b = doc
            .b_factors
            .iter()
            .map(|m| matrix_from_rows(m, doc.range_dim, "B factor"))
            .collect::<Result<Vec<_>>>()?;
        let a = doc
            .a_factors
            .iter()
            .map(|m| matrix_from_rows(m, doc.n, "A factor"))
            .collect::<Result<Vec<_>>>()?;
        Decomposition::new(doc.range_dim, doc.n, b, a)
    }
}

impl From<Decomposition> for DecompositionDoc {
    fn from(d: Decomposition) -> Self {
        DecompositionDoc {
            range_dim: d.range_dim,
            n: d.domain_dim,
            b_factors: d.b.iter().map(matrix_to_rows).collect(),
            a_factors: d.a.iter().map(matrix_to_rows).collect(),
        }
    }
}

/// Subspaces attached to one factor pair.
#[derive(Clone, Debug)]
pub struct ComponentSubspaces {
    /// Range of `B^gamma` in R^N.
    pub sigma: SubspaceProjector,
    /// Range of `A^gamma` in R^n.
    pub t: SubspaceProjector,
    /// Smallest positive eigenvalue of `B^gamma`.
    pub b_min: Option<f64>,
    /// Smallest positive eigenvalue of `A^gamma`.
    pub a_min: Option<f64>,
}

impl ComponentSubspaces {
    fn active(&self) -> bool {
        self.sigma.dim() > 0 && self.t.dim() > 0
    }
}

/// Subspaces and ellipticity constant of a decomposable tensor.
#[derive(Clone, Debug)]
pub struct EllipticityData {
    /// Sum of the ranges of the active `B^gamma`, in R^N.
    pub sigma: SubspaceProjector,
    /// `sum Sigma^gamma (x) T^gamma`, in R^{Nn}.
    pub pi: SubspaceProjector,
    /// `sum Sigma^gamma (x) (T^gamma v T^gamma)`, in R_s^{N n^2}.
    pub xi: SubspaceProjector,
    /// Minimum of `A : eta x a x eta x a` over unit rank-one tensors in `pi`.
    pub nu: f64,
    /// Product bound evaluated on the normalised decomposition.
    pub nu_bound: f64,
    /// Smallest value seen by the sampling cross-check.
    pub nu_sampled: f64,
    pub components: Vec<ComponentSubspaces>,
}

impl EllipticityData {
    pub fn range_dim(&self) -> usize {
        self.sigma.ambient().dim()
    }
}

impl Decomposition {
    pub fn new(
        range_dim: usize,
        domain_dim: usize,
        b: Vec<DMatrix<f64>>,
        a: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if b.len() != a.len() {
            return Err(Error::Dimension(format!("{} B factors but {} A factors", b.len(), a.len())));
        }
        if b.is_empty() {
            return Err(Error::Dimension("decomposition needs at least one factor pair".into()));
        }
        for m in &b {
            if m.nrows() != range_dim || m.ncols() != range_dim {
                return Err(Error::Dimension(format!("B factor must be {range_dim}x{range_dim}")));
            }
        }
        for m in &a {
            if m.nrows() != domain_dim || m.ncols() != domain_dim {
                return Err(Error::Dimension(format!("A factor must be {domain_dim}x{domain_dim}")));
            }
        }
        Ok(Decomposition { range_dim, domain_dim, b, a })
    }

    /// Single factor `I_N (x) I_n`.
    pub fn laplacian(range_dim: usize, domain_dim: usize) -> Self {
        Decomposition {
            range_dim,
            domain_dim,
            b: vec![DMatrix::identity(range_dim, range_dim)],
            a: vec![DMatrix::identity(domain_dim, domain_dim)],
        }
    }

    pub fn range_dim(&self) -> usize {
        self.range_dim
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn b_factors(&self) -> &[DMatrix<f64>] {
        &self.b
    }

    pub fn a_factors(&self) -> &[DMatrix<f64>] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    /// `A_{alpha i beta j} = sum_gamma B^gamma_{alpha beta} A^gamma_{ij}`.
    pub fn reconstruct(&self) -> Tensor4 {
        let n = self.domain_dim;
        let d = self.range_dim * n;
        let mut m = DMatrix::zeros(d, d);
        for (bg, ag) in self.b.iter().zip(&self.a) {
            for a in 0..self.range_dim {
                for b in 0..self.range_dim {
                    let c = bg[(a, b)];
                    if c == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        for j in 0..n {
                            m[(a * n + i, b * n + j)] += c * ag[(i, j)];
                        }
                    }
                }
            }
        }
        let m = (&m + m.transpose()) * 0.5;
        Tensor4 { range_dim: self.range_dim, domain_dim: n, matrix: m }
    }

    pub fn sum_b(&self) -> DMatrix<f64> {
        self.b.iter().fold(DMatrix::zeros(self.range_dim, self.range_dim), |acc, m| acc + m)
    }

    /// Checks positivity of the factors, orthogonality of the `B` ranges and the
    /// existence of a common vector in the lowest positive eigenspaces of the `A` factors.
    pub fn validate(&self) -> ValidationReport {
        let b_psd: Vec<bool> = self.b.iter().map(linalg::is_psd).collect();
        let a_psd: Vec<bool> = self.a.iter().map(linalg::is_psd).collect();
        let ranges: Vec<Vec<DVector<f64>>> = self.b.iter().map(range_basis_eigen).collect();
        let mut worst: f64 = 0.0;
        for g in 0..ranges.len() {
            for d in (g + 1)..ranges.len() {
                for u in &ranges[g] {
                    for v in &ranges[d] {
                        worst = worst.max(u.dot(v).abs());
                    }
                }
            }
        }
        let ranges_orthogonal = worst <= 1e-8;

        let n = self.domain_dim;
        let mut common: Option<Vec<DVector<f64>>> = None;
        let mut any_nonzero = false;
        for ag in &self.a {
            let (vals, vecs) = sym_eigen(ag);
            let top = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if top <= 0.0 {
                continue;
            }
            let thr = TOL_RANK_REL * top;
            let Some(k0) = (0..n).find(|&k| vals[k] > thr) else { continue };
            any_nonzero = true;
            let low = vals[k0];
            let eig: Vec<DVector<f64>> = (k0..n)
                .filter(|&k| (vals[k] - low).abs() <= 1e-8 * top)
                .map(|k| vecs.column(k).into_owned())
                .collect();
            common = Some(match common {
                None => eig,
                Some(prev) => intersect(&prev, &eig, n),
            });
        }
        let (common_eigenvector, witness) = match common {
            None => (!any_nonzero, None),
            Some(basis) if !basis.is_empty() => {
                let mut w = basis[0].clone();
                let mut best = 0;
                for i in 0..n {
                    if w[i].abs() > w[best].abs() + 1e-12 {
                        best = i;
                    }
                }
                if w[best] < 0.0 {
                    w = -w;
                }
                (true, Some(w.as_slice().to_vec()))
            }
            Some(_) => (false, None),
        };
        let valid = b_psd.iter().all(|&x| x) && a_psd.iter().all(|&x| x) && ranges_orthogonal && common_eigenvector;
        ValidationReport { b_psd, a_psd, ranges_orthogonal, worst_overlap: worst, common_eigenvector, witness, valid }
    }

    fn require_valid(&self) -> Result<()> {
        let r = self.validate();
        if !r.valid {
            return Err(Error::InvalidDecomposition(format!(
                "B psd {:?}, A psd {:?}, ranges orthogonal {} (overlap {:e}), common eigenvector {}",
                r.b_psd, r.a_psd, r.ranges_orthogonal, r.worst_overlap, r.common_eigenvector
            )));
        }
        Ok(())
    }

    /// Rescales each pair so that the smallest positive eigenvalue of every nonzero `A^gamma` is 1.
    pub fn normalized(&self) -> Result<Decomposition> {
        let mut out = self.clone();
        let mut any = false;
        for g in 0..self.len() {
            if let Some(lam) = linalg::smallest_positive_eigenvalue(&self.a[g]) {
                any = true;
                out.b[g] = &self.b[g] * lam;
                out.a[g] = &self.a[g] / lam;
            }
        }
        if !any {
            return Err(Error::ZeroFactor("every A factor vanishes".into()));
        }
        Ok(out)
    }

    /// Factors of the regularised tensor: pair 0 is `(eps (I - sum B), eps I)`, the others are
    /// `(B^gamma, A^gamma + eps I)`.
    pub fn regularized_factors(&self, eps: f64) -> Result<Decomposition> {
        if !(eps >= 0.0) {
            return Err(Error::Precondition("eps must be nonnegative".into()));
        }
        self.require_valid()?;
        let sb = self.sum_b();
        let norm = sym_op_norm(&sb);
        if norm > 1.0 + TOL_LIN {
            return Err(Error::Precondition(format!(
                "operator norm of sum of B factors is {norm}; rescale the decomposition so it is at most 1"
            )));
        }
        let big_n = self.range_dim;
        let n = self.domain_dim;
        let mut b = vec![(DMatrix::identity(big_n, big_n) - sb) * eps];
        let mut a = vec![DMatrix::identity(n, n) * eps];
        for g in 0..self.len() {
            b.push(self.b[g].clone());
            a.push(&self.a[g] + DMatrix::identity(n, n) * eps);
        }
        Ok(Decomposition { range_dim: big_n, domain_dim: n, b, a })
    }

    /// The regularised tensor, rank-one positive with constant `eps^2` for `0 < eps <= 1`.
    pub fn regularize(&self, eps: f64) -> Result<Tensor4> {
        Ok(self.regularized_factors(eps)?.reconstruct())
    }

    fn component_subspaces(&self) -> Vec<ComponentSubspaces> {
        (0..self.len())
            .map(|g| {
                let sig = range_basis_eigen(&self.b[g]);
                let t = range_basis_eigen(&self.a[g]);
                ComponentSubspaces {
                    sigma: SubspaceProjector::from_spanning(Ambient::Vector { dim: self.range_dim }, &sig),
                    t: SubspaceProjector::from_spanning(Ambient::Vector { dim: self.domain_dim }, &t),
                    b_min: linalg::smallest_positive_eigenvalue(&self.b[g]),
                    a_min: linalg::smallest_positive_eigenvalue(&self.a[g]),
                }
            })
            .collect()
    }

    /// Subspaces `Sigma`, `Pi`, `Xi` and the ellipticity constant.
    ///
    /// `Pi` is cross-checked against the range of the reconstructed tensor, and the
    /// orthogonal complement of the kernel of `X -> A : X` is checked to lie in `Xi`.
    pub fn ellipticity(&self) -> Result<EllipticityData> {
        self.require_valid()?;
        let big_n = self.range_dim;
        let n = self.domain_dim;
        let comps = self.component_subspaces();

        let mut sig_vecs = Vec::new();
        let mut pi_vecs = Vec::new();
        let mut xi_vecs = Vec::new();
        let hess_amb = Ambient::SymHessian { range_dim: big_n, domain_dim: n };
        for c in comps.iter().filter(|c| c.active()) {
            for s in c.sigma.basis() {
                sig_vecs.push(s.clone());
                for t in c.t.basis() {
                    pi_vecs.push(DVector::from_fn(big_n * n, |k, _| s[k / n] * t[k % n]));
                }
                let tb = c.t.basis();
                for (p, q) in sym_pairs(tb.len()) {
                    let sp = linalg::sym_product(&tb[p], &tb[q]);
                    let mut full = vec![0.0; big_n * n * n];
                    for a in 0..big_n {
                        for i in 0..n {
                            for j in 0..n {
                                full[(a * n + i) * n + j] = s[a] * sp[(i, j)];
                            }
                        }
                    }
                    xi_vecs.push(hess_amb.to_coords(&full));
                }
            }
        }
        let sigma = SubspaceProjector::from_spanning(Ambient::Vector { dim: big_n }, &sig_vecs);
        let pi = SubspaceProjector::from_spanning(Ambient::Matrix { rows: big_n, cols: n }, &pi_vecs);
        let xi = SubspaceProjector::from_spanning(hess_amb, &xi_vecs);
        if pi.dim() == 0 {
            return Err(Error::ZeroFactor("the tensor vanishes, so Pi is trivial".into()));
        }

        let tensor = self.reconstruct();
        let brute = SubspaceProjector::from_spanning(
            Ambient::Matrix { rows: big_n, cols: n },
            &range_basis_svd(tensor.matrix()),
        );
        let dist = brute.distance(&pi);
        if dist > 1e-8 {
            return Err(Error::SubspaceDisagreement { what: "Pi vs range of tensor".into(), distance: dist });
        }
        let map = tensor.hessian_map();
        let adjoint_range = range_basis_svd(&map.transpose());
        for v in &adjoint_range {
            let r = v - xi.project_coords(v);
            if r.norm() > 1e-8 {
                return Err(Error::SubspaceDisagreement {
                    what: "kernel complement of A: not inside Xi".into(),
                    distance: r.norm(),
                });
            }
        }

        let (nu, nu_sampled) = minimise_rank_one(self, &comps)?;
        let nu_bound = self.normalized()?.product_bound();
        let tol = 1e-9 * 1.0f64.max(nu_bound.abs());
        if nu <= 0.0 {
            return Err(Error::Optimizer(format!("nonpositive ellipticity constant {nu:e}")));
        }
        if nu > nu_bound + tol {
            return Err(Error::Optimizer(format!("nu {nu} exceeds product bound {nu_bound}")));
        }
        Ok(EllipticityData { sigma, pi, xi, nu, nu_bound, nu_sampled, components: comps })
    }

    /// `(nu, nu_bound)`.
    pub fn ellipticity_constant(&self) -> Result<(f64, f64)> {
        let e = self.ellipticity()?;
        Ok((e.nu, e.nu_bound))
    }

    /// `(min_gamma min_{eta in Sigma^gamma} B^gamma:eta x eta) (min_delta min_{a in T^delta} A^delta:a x a)`
    /// over factor pairs with nonzero `A` and `B`.
    fn product_bound(&self) -> f64 {
        let mut bmin = f64::INFINITY;
        let mut amin = f64::INFINITY;
        for g in 0..self.len() {
            let (Some(b), Some(a)) = (
                linalg::smallest_positive_eigenvalue(&self.b[g]),
                linalg::smallest_positive_eigenvalue(&self.a[g]),
            ) else {
                continue;
            };
            bmin = bmin.min(b);
            amin = amin.min(a);
        }
        bmin * amin
    }
}

fn objective(dec: &Decomposition, eta: &DVector<f64>, a: &DVector<f64>) -> f64 {
    dec.b
        .iter()
        .zip(&dec.a)
        .map(|(b, am)| eta.dot(&(b * eta)) * a.dot(&(am * a)))
        .sum()
}

fn restricted_min_eigvec(m: &DMatrix<f64>, q: &DMatrix<f64>) -> DVector<f64> {
    let g = q.transpose() * m * q;
    let (_, vecs) = sym_eigen(&g);
    let v = q * vecs.column(0);
    let nv = v.norm();
    v / nv
}

/// Minimises `A : eta x a x eta x a` over unit `eta x a` in `Pi`.
///
/// Feasible pairs are `eta` in a sum of `Sigma^gamma` over a set `S` of factors and `a` in the
/// intersection of the corresponding `T^gamma`. Each family is searched by alternating exact
/// minimisation from eigenvector candidates and 64 random starts; a dense random sample then
/// checks that nothing lower was missed. Returns `(minimum, sampled minimum)`.
fn minimise_rank_one(dec: &Decomposition, comps: &[ComponentSubspaces]) -> Result<(f64, f64)> {
    let big_n = dec.range_dim;
    let n = dec.domain_dim;
    let active: Vec<usize> = (0..comps.len()).filter(|&g| comps[g].active()).collect();
    let k = active.len();
    let max_subset = if k > 10 { 2 } else { k };
    let mut families: Vec<(Vec<usize>, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
    for mask in 1u64..(1u64 << k.min(63)) {
        if mask.count_ones() as usize > max_subset {
            continue;
        }
        let set: Vec<usize> = (0..k).filter(|&b| mask & (1 << b) != 0).map(|b| active[b]).collect();
        let mut t = comps[set[0]].t.basis().to_vec();
        for &g in &set[1..] {
            t = intersect(&t, comps[g].t.basis(), n);
        }
        if t.is_empty() {
            continue;
        }
        let s: Vec<DVector<f64>> = set.iter().flat_map(|&g| comps[g].sigma.basis().to_vec()).collect();
        families.push((set, DMatrix::from_columns(&s), DMatrix::from_columns(&t)));
    }

    let mut best = f64::INFINITY;
    for &g in &active {
        let eta = restricted_min_eigvec(&dec.b[g], &DMatrix::from_columns(comps[g].sigma.basis()));
        let a = restricted_min_eigvec(&dec.a[g], &DMatrix::from_columns(comps[g].t.basis()));
        best = best.min(objective(dec, &eta, &a));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0041);
    for (_, qs, qt) in &families {
        for start in 0..64 {
            let mut a = qt * random_unit(&mut rng, qt.ncols());
            if start == 0 {
                a = qt.column(0).into_owned();
            }
            let mut eta = qs * random_unit(&mut rng, qs.ncols());
            let mut val = objective(dec, &eta, &a);
            for _ in 0..200 {
                let mb = dec.b.iter().zip(&dec.a).fold(DMatrix::zeros(big_n, big_n), |acc, (b, am)| {
                    acc + b * a.dot(&(am * &a))
                });
                eta = restricted_min_eigvec(&mb, qs);
                let ma = dec.b.iter().zip(&dec.a).fold(DMatrix::zeros(n, n), |acc, (b, am)| {
                    acc + am * eta.dot(&(b * &eta))
                });
                a = restricted_min_eigvec(&ma, qt);
                let next = objective(dec, &eta, &a);
                let done = (val - next).abs() <= 1e-15 * (1.0 + val.abs());
                val = next;
                if done {
                    break;
                }
            }
            best = best.min(val);
        }
    }

    let mut sampled = f64::INFINITY;
    if !families.is_empty() {
        for s in 0..100_000usize {
            let (_, qs, qt) = &families[s % families.len()];
            let eta = qs * random_unit(&mut rng, qs.ncols());
            let a = qt * random_unit(&mut rng, qt.ncols());
            sampled = sampled.min(objective(dec, &eta, &a));
        }
    }
    let tol = 1e-9 * 1.0f64.max(best.abs());
    if sampled < best - tol {
        return Err(Error::Optimizer(format!(
            "sampling found {sampled:e} below the optimiser minimum {best:e}"
        )));
    }
    Ok((best, sampled))
}

/// Relative PSD tolerance, re-exported for callers validating their own factors.
pub const PSD_TOLERANCE: f64 = TOL_PSD;

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn diag_example() -> Decomposition {
        Decomposition::new(
            2,
            2,
            vec![diag(&[1.0, 0.0]), diag(&[0.0, 1.0])],
            vec![diag(&[1.0, 0.0]), diag(&[1.0, 0.0])],
        )
        .unwrap()
    }

    #[test]
    fn reconstruct_diagonal_example() {
        let t = diag_example().reconstruct();
        assert_eq!(t.get(0, 0, 0, 0), 1.0);
        assert_eq!(t.get(1, 0, 1, 0), 1.0);
        let mut others = 0.0f64;
        for a in 0..2 {
            for i in 0..2 {
                for b in 0..2 {
                    for j in 0..2 {
                        if !((a, i, b, j) == (0, 0, 0, 0) || (a, i, b, j) == (1, 0, 1, 0)) {
                            others = others.max(t.get(a, i, b, j).abs());
                        }
                    }
                }
            }
        }
        assert_eq!(others, 0.0);
    }

    #[test]
    fn laplacian_decomposition_reconstructs_identity() {
        let t = Decomposition::laplacian(3, 2).reconstruct();
        assert_eq!(t, Tensor4::laplacian(3, 2));
    }

    #[test]
    fn mismatched_factor_counts_rejected() {
        let r = Decomposition::new(2, 2, vec![diag(&[1.0, 0.0])], vec![]);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn validate_diagonal_example_with_witness() {
        let r = diag_example().validate();
        assert!(r.valid);
        assert_eq!(r.witness.unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn validate_flags_overlapping_ranges() {
        let d = Decomposition::new(2, 2, vec![diag(&[1.0, 0.0]), diag(&[1.0, 1.0])], vec![diag(&[1.0, 1.0]); 2])
            .unwrap();
        let r = d.validate();
        assert!(!r.ranges_orthogonal);
        assert!(!r.valid);
    }

    #[test]
    fn validate_flags_missing_common_eigenvector() {
        let d = Decomposition::new(
            2,
            2,
            vec![diag(&[1.0, 0.0]), diag(&[0.0, 1.0])],
            vec![diag(&[1.0, 2.0]), diag(&[2.0, 1.0])],
        )
        .unwrap();
        let r = d.validate();
        assert!(!r.common_eigenvector);
        assert!(r.witness.is_none());
    }

    #[test]
    fn normalize_rescales_lowest_eigenvalue() {
        let d = Decomposition::new(1, 2, vec![diag(&[1.0])], vec![diag(&[0.0, 2.0])]).unwrap();
        let nd = d.normalized().unwrap();
        assert!((nd.b_factors()[0][(0, 0)] - 2.0).abs() < 1e-14);
        assert!((&nd.a_factors()[0] - diag(&[0.0, 1.0])).abs().max() < 1e-14);
        assert!((nd.reconstruct().matrix() - d.reconstruct().matrix()).abs().max() < 1e-14);
    }

    #[test]
    fn normalize_rejects_zero_tensor() {
        let d = Decomposition::new(1, 2, vec![diag(&[1.0])], vec![diag(&[0.0, 0.0])]).unwrap();
        assert!(matches!(d.normalized(), Err(Error::ZeroFactor(_))));
    }

    #[test]
    fn spectral_factor_diag() {
        let sd = spectral_factor(&diag(&[0.0, 1.0]), 0.0).unwrap();
        assert_eq!(sd.first_positive, 1);
        assert!((sd.o.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-15);
        assert!((sd.theta.clone() - diag(&[0.0, 1.0])).abs().max() < 1e-15);
        let sd = spectral_factor(&DMatrix::identity(2, 2), 0.25).unwrap();
        assert!((sd.theta - diag(&[1.25f64.sqrt(), 1.25f64.sqrt()])).abs().max() < 1e-15);
    }

    #[test]
    fn spectral_factor_rejects_indefinite() {
        assert!(matches!(spectral_factor(&diag(&[1.0, -1.0]), 0.0), Err(Error::NotPsd(_))));
    }

    #[test]
    fn h_of_rank_one_and_full_rank() {
        let h = subspace_h(&diag(&[1.0, 0.0])).unwrap();
        assert_eq!(h.dim(), 1);
        assert!(h.contains(&[1.0, 0.0, 0.0, 0.0], 1e-12));
        let h = subspace_h(&DMatrix::identity(3, 3)).unwrap();
        assert_eq!(h.dim(), 6);
    }

    #[test]
    fn subspaces_of_diagonal_example() {
        let e = diag_example().ellipticity().unwrap();
        assert_eq!(e.pi.dim(), 2);
        assert!(e.pi.contains(&[1.0, 0.0, 0.0, 0.0], 1e-12));
        assert!(e.pi.contains(&[0.0, 0.0, 1.0, 0.0], 1e-12));
        assert_eq!(e.xi.dim(), 2);
        assert_eq!(e.sigma.dim(), 2);
        assert!((e.nu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nu_of_laplacian_and_weighted_example() {
        let (nu, bound) = Decomposition::laplacian(3, 3).ellipticity_constant().unwrap();
        assert!((nu - 1.0).abs() < 1e-12 && (bound - 1.0).abs() < 1e-12);
        let d = Decomposition::new(
            2,
            2,
            vec![diag(&[2.0, 0.0]), diag(&[0.0, 3.0])],
            vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        )
        .unwrap();
        let (nu, _) = d.ellipticity_constant().unwrap();
        assert!((nu - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_factor_contributes_nothing() {
        let d = Decomposition::new(
            2,
            2,
            vec![diag(&[1.0, 0.0]), diag(&[0.0, 1.0])],
            vec![diag(&[1.0, 1.0]), diag(&[0.0, 0.0])],
        )
        .unwrap();
        let e = d.ellipticity().unwrap();
        assert_eq!(e.pi.dim(), 2);
        assert_eq!(e.xi.dim(), 3);
        assert_eq!(e.sigma.dim(), 1);
    }

    #[test]
    fn zero_tensor_has_no_ellipticity() {
        let d = Decomposition::new(1, 2, vec![diag(&[1.0])], vec![diag(&[0.0, 0.0])]).unwrap();
        assert!(matches!(d.ellipticity(), Err(Error::ZeroFactor(_))));
    }

    #[test]
    fn regularize_diagonal_example() {
        let d = diag_example();
        let r = d.regularized_factors(0.5).unwrap();
        assert!(r.b_factors()[0].abs().max() < 1e-15);
        assert!((r.a_factors()[1].clone() - diag(&[1.5, 0.5])).abs().max() < 1e-15);
        let t = d.regularize(0.1).unwrap();
        let worst = t.check_rank_one_positive(0.01, 10_000, 3).unwrap();
        assert!(worst >= 0.01 - 1e-12);
    }

    #[test]
    fn regularize_rejects_large_b() {
        let d = Decomposition::new(1, 1, vec![diag(&[2.0])], vec![diag(&[1.0])]).unwrap();
        assert!(matches!(d.regularize(0.1), Err(Error::Precondition(_))));
    }

    #[test]
    fn regularize_at_zero_is_the_tensor() {
        let d = diag_example();
        assert!((d.regularize(0.0).unwrap().matrix() - d.reconstruct().matrix()).abs().max() < 1e-15);
    }

    #[test]
    fn apply_identity_gives_trace() {
        let t = Tensor4::laplacian(1, 2);
        let x = vec![1.0, 0.3, 0.3, 2.0];
        assert_eq!(t.apply_hessian(&x).unwrap(), vec![3.0]);
        assert!(matches!(t.apply_hessian(&[1.0]), Err(Error::Dimension(_))));
        assert_eq!(t.apply_matrix(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn json_round_trip() {
        let d = diag_example();
        let s = serde_json::to_string(&d).unwrap();
        assert!(s.contains("\"N\":2"));
        let back: Decomposition = serde_json::from_str(&s).unwrap();
        assert_eq!(back, d);
        let t = d.reconstruct();
        let s = serde_json::to_string(&t).unwrap();
        let back: Tensor4 = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
    }
}
