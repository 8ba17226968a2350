//! Small dense linear algebra helpers shared by the tensor and solver code.

use nalgebra::{DMatrix, DVector};

/// Relative rank threshold, applied to the largest singular value.
pub const TOL_RANK_REL: f64 = 1e-9;
/// Absolute tolerance for linear identities and projector comparisons.
pub const TOL_LIN: f64 = 1e-10;
/// Tolerance for positive semidefiniteness.
pub const TOL_PSD: f64 = 1e-10;
/// Tolerance for zero residuals.
pub const TOL_ZERO: f64 = 1e-8;

/// Symmetric eigendecomposition, eigenvalues ascending.
///
/// Each eigenvector is sign-normalised so that its entry of largest modulus
/// is positive, which makes the output reproducible.
pub fn sym_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut vals = DVector::zeros(n);
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &j) in order.iter().enumerate() {
        vals[k] = eig.eigenvalues[j];
        let mut v = eig.eigenvectors.column(j).into_owned();
        let mut best = 0;
        for i in 0..n {
            if v[i].abs() > v[best].abs() + 1e-12 {
                best = i;
            }
        }
        if v[best] < 0.0 {
            v = -v;
        }
        vecs.set_column(k, &v);
    }
    (vals, vecs)
}

/// Largest absolute eigenvalue of a symmetric matrix.
pub fn sym_op_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen(m);
    vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

/// Smallest eigenvalue exceeding the rank threshold, if any.
pub fn smallest_positive_eigenvalue(m: &DMatrix<f64>) -> Option<f64> {
    let (vals, _) = sym_eigen(m);
    let top = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let thr = TOL_RANK_REL * top;
    vals.iter().copied().find(|&v| v > thr && v > 0.0)
}

/// True if `m` is symmetric and positive semidefinite within tolerance.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let scale = 1.0f64.max(m.abs().max());
    if (m - m.transpose()).abs().max() > TOL_PSD * scale {
        return false;
    }
    let (vals, _) = sym_eigen(m);
    vals.iter().all(|&v| v >= -TOL_PSD * scale)
}

/// Orthonormal basis of the column space, computed from a singular value decomposition.
pub fn range_basis_svd(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let svd = nalgebra::SVD::new(m.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    if smax <= 0.0 {
        return Vec::new();
    }
    let thr = TOL_RANK_REL * smax;
    let mut idx: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > thr)
        .collect();
    idx.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let cols: Vec<DVector<f64>> = idx.into_iter().map(|k| u.column(k).into_owned()).collect();
    // repeated zero singular values can leave O(1e-5) leakage in U; a couple
    // of subspace iteration steps with M M^T squeeze it out
    let mut basis = DMatrix::from_columns(&cols);
    for _ in 0..2 {
        let img = m * (m.transpose() * &basis);
        basis = img.qr().q();
    }
    basis.column_iter().map(|c| c.into_owned()).collect()
}

/// Orthonormal basis of the range of a symmetric matrix, from its eigenvectors.
///
/// Returned in ascending eigenvalue order.
pub fn range_basis_eigen(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    let (vals, vecs) = sym_eigen(m);
    let top = vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let thr = TOL_RANK_REL * top;
    (0..vals.len())
        .filter(|&k| top > 0.0 && vals[k] > thr)
        .map(|k| vecs.column(k).into_owned())
        .collect()
}

/// Modified Gram-Schmidt. Vectors whose residual falls below `tol` times
/// their original norm are dropped.
pub fn orthonormalize(vectors: &[DVector<f64>], tol: f64) -> Vec<DVector<f64>> {
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = q.dot(&w);
                w.axpy(-c, q, 1.0);
            }
        }
        let nw = w.norm();
        if nw > tol * norm0 {
            out.push(w / nw);
        }
    }
    out
}

/// Completes an orthonormal family to a basis of R^dim using canonical vectors in index order.
pub fn complete_basis(partial: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    let mut all: Vec<DVector<f64>> = partial.to_vec();
    for k in 0..dim {
        all.push(DVector::from_fn(dim, |i, _| if i == k { 1.0 } else { 0.0 }));
    }
    let mut basis = orthonormalize(&all, 1e-8);
    basis.truncate(dim);
    basis
}

/// Orthogonal projector onto the span of an orthonormal family.
pub fn projector(basis: &[DVector<f64>], dim: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(dim, dim);
    for v in basis {
        p += v * v.transpose();
    }
    p
}

/// Orthonormal basis of the intersection of two subspaces given by orthonormal bases.
pub fn intersect(u: &[DVector<f64>], v: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    if u.is_empty() || v.is_empty() {
        return Vec::new();
    }
    let pu = projector(u, dim);
    let vm = DMatrix::from_columns(v);
    let g = vm.transpose() * &pu * &vm;
    let (vals, vecs) = sym_eigen(&g);
    let mut out = Vec::new();
    for k in (0..vals.len()).rev() {
        if vals[k] > 1.0 - 1e-8 {
            out.push(&vm * vecs.column(k));
        }
    }
    orthonormalize(&out, 1e-8)
}

/// Index pairs (i, j) with i <= j in the order used by symmetric coordinates.
pub fn sym_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push((i, j));
        }
    }
    out
}

/// Orthonormal coordinates of a symmetric n x n matrix stored row-major:
/// diagonal entries as they are, off-diagonal pairs scaled by sqrt(2).
pub fn sym_to_coords(n: usize, full: &[f64]) -> Vec<f64> {
    sym_pairs(n)
        .into_iter()
        .map(|(i, j)| {
            if i == j {
                full[i * n + i]
            } else {
                0.5 * (full[i * n + j] + full[j * n + i]) * std::f64::consts::SQRT_2
            }
        })
        .collect()
}

/// Inverse of [`sym_to_coords`].
pub fn coords_to_sym(n: usize, coords: &[f64]) -> Vec<f64> {
    let mut full = vec![0.0; n * n];
    for (k, (i, j)) in sym_pairs(n).into_iter().enumerate() {
        if i == j {
            full[i * n + i] = coords[k];
        } else {
            let v = coords[k] / std::f64::consts::SQRT_2;
            full[i * n + j] = v;
            full[j * n + i] = v;
        }
    }
    full
}

/// Orthonormal coordinates of an element of R_s^{N n^2} stored as `N` consecutive n x n blocks.
pub fn hessian_to_coords(big_n: usize, n: usize, full: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(big_n * n * (n + 1) / 2);
    for a in 0..big_n {
        out.extend(sym_to_coords(n, &full[a * n * n..(a + 1) * n * n]));
    }
    out
}

/// Inverse of [`hessian_to_coords`].
pub fn coords_to_hessian(big_n: usize, n: usize, coords: &[f64]) -> Vec<f64> {
    let m = n * (n + 1) / 2;
    let mut out = Vec::with_capacity(big_n * n * n);
    for a in 0..big_n {
        out.extend(coords_to_sym(n, &coords[a * m..(a + 1) * m]));
    }
    out
}

/// Symmetric product a v b = (a b^T + b a^T) / 2, row-major.
pub fn sym_product(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    (a * b.transpose() + b * a.transpose()) * 0.5
}

/// Euclidean norm of a slice.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_coords_round_trip_and_isometry() {
        let full = vec![1.0, 2.0, 3.0, 2.0, 5.0, -1.0, 3.0, -1.0, 4.0];
        let c = sym_to_coords(3, &full);
        assert_eq!(c.len(), 6);
        let back = coords_to_sym(3, &c);
        for (x, y) in full.iter().zip(&back) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((norm(&c) - norm(&full)).abs() < 1e-12);
    }

    #[test]
    fn eigen_of_diagonal_is_identity() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0]));
        let (vals, vecs) = sym_eigen(&m);
        assert_eq!(vals.as_slice(), &[0.0, 1.0]);
        assert!((vecs - DMatrix::identity(2, 2)).abs().max() < 1e-15);
    }

    #[test]
    fn intersection_of_planes_is_a_line() {
        let e = |i: usize| DVector::from_fn(3, |k, _| if k == i { 1.0 } else { 0.0 });
        let u = vec![e(0), e(1)];
        let v = orthonormalize(&[e(1), e(0) + e(2)], 1e-12);
        let w = intersect(&u, &v, 3);
        assert_eq!(w.len(), 1);
        assert!((w[0][1].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn range_routes_agree() {
        let g = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 0.0, 3.0]);
        let a = &g * g.transpose();
        let p1 = projector(&range_basis_svd(&a), 3);
        let p2 = projector(&range_basis_eigen(&a), 3);
        assert!((p1 - p2).norm() < 1e-12);
    }
}
