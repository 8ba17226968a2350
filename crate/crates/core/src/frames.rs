//! Orthonormal frames adapted to a decomposition, step schedules and difference quotients.

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::linalg::{complete_basis, range_basis_eigen, sym_eigen};
use crate::tensor::Decomposition;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Orthonormal frame `{E^alpha}` of R^N together with an orthonormal frame
/// `{E^(alpha)i}` of R^n attached to each `E^alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    range: DMatrix<f64>,
    domain: Vec<DMatrix<f64>>,
}

impl Frame {
    pub fn new(range: DMatrix<f64>, domain: Vec<DMatrix<f64>>) -> Result<Self> {
        let big_n = range.nrows();
        if range.ncols() != big_n || domain.len() != big_n {
            return Err(Error::Dimension("range frame must be N x N with N domain frames".into()));
        }
        let n = domain.first().map(|m| m.nrows()).unwrap_or(0);
        let orth = |m: &DMatrix<f64>| (m.transpose() * m - DMatrix::identity(m.ncols(), m.ncols())).abs().max() < 1e-9;
        if !orth(&range) {
            return Err(Error::Precondition("range frame is not orthonormal".into()));
        }
        for m in &domain {
            if m.nrows() != n || m.ncols() != n || !orth(m) {
                return Err(Error::Precondition("domain frame is not an orthonormal n x n frame".into()));
            }
        }
        Ok(Frame { range, domain })
    }

    pub fn standard(range_dim: usize, domain_dim: usize) -> Self {
        Frame {
            range: DMatrix::identity(range_dim, range_dim),
            domain: vec![DMatrix::identity(domain_dim, domain_dim); range_dim],
        }
    }

    /// Frame in which each `E^alpha` lies in some `Sigma^gamma` and the trailing vectors of
    /// `E^(alpha)` span `T^gamma`; the remaining `E^alpha` span the complement of `Sigma`
    /// and carry the standard frame.
    pub fn from_decomposition(dec: &Decomposition) -> Result<Self> {
        let big_n = dec.range_dim();
        let n = dec.domain_dim();
        let mut range_vecs: Vec<DVector<f64>> = Vec::new();
        let mut domain = Vec::new();
        for (b, a) in dec.b_factors().iter().zip(dec.a_factors()) {
            let sig = range_basis_eigen(b);
            let (_, vecs) = sym_eigen(a);
            for s in sig {
                range_vecs.push(s);
                domain.push(vecs.clone());
            }
        }
        if range_vecs.len() > big_n {
            return Err(Error::InvalidDecomposition("ranges of the B factors overlap".into()));
        }
        let full = complete_basis(&range_vecs, big_n);
        while domain.len() < big_n {
            domain.push(DMatrix::identity(n, n));
        }
        Frame::new(DMatrix::from_columns(&full), domain)
    }

    pub fn range_dim(&self) -> usize {
        self.range.nrows()
    }

    pub fn domain_dim(&self) -> usize {
        self.domain.first().map(|m| m.nrows()).unwrap_or(0)
    }

    /// `E^alpha`.
    pub fn range_vector(&self, alpha: usize) -> DVector<f64> {
        self.range.column(alpha).into_owned()
    }

    /// `E^(alpha)i`.
    pub fn domain_vector(&self, alpha: usize, i: usize) -> DVector<f64> {
        self.domain[alpha].column(i).into_owned()
    }

    /// Coefficients `E^{alpha i_1 .. i_p} : T` over all index tuples of a tensor of order `p`
    /// stored as `N` blocks of `n^p` entries. The symmetric products are taken unnormalised.
    pub fn expand(&self, order: usize, t: &[f64]) -> Vec<f64> {
        let (big_n, n) = (self.range_dim(), self.domain_dim());
        let blk = n.pow(order as u32);
        let mut out = vec![0.0; big_n * blk];
        for a in 0..big_n {
            let mut v = vec![0.0; blk];
            for b in 0..big_n {
                let e = self.range[(b, a)];
                if e != 0.0 {
                    for (x, y) in v.iter_mut().zip(&t[b * blk..(b + 1) * blk]) {
                        *x += e * y;
                    }
                }
            }
            let qt = self.domain[a].transpose();
            for axis in 0..order {
                v = mode_product(&v, n, order, axis, &qt);
            }
            out[a * blk..(a + 1) * blk].copy_from_slice(&v);
        }
        out
    }

    /// Inverse of [`Frame::expand`]: `sum c_{alpha i..} E^{alpha i..}` over all tuples.
    pub fn reassemble(&self, order: usize, coeffs: &[f64]) -> Vec<f64> {
        let (big_n, n) = (self.range_dim(), self.domain_dim());
        let blk = n.pow(order as u32);
        let mut out = vec![0.0; big_n * blk];
        for a in 0..big_n {
            let mut v = coeffs[a * blk..(a + 1) * blk].to_vec();
            for axis in 0..order {
                v = mode_product(&v, n, order, axis, &self.domain[a]);
            }
            for b in 0..big_n {
                let e = self.range[(b, a)];
                if e != 0.0 {
                    for (x, y) in out[b * blk..(b + 1) * blk].iter_mut().zip(&v) {
                        *x += e * y;
                    }
                }
            }
        }
        out
    }

    /// Orthonormal basis of R_s^{N n^p} induced by the frame: normalised symmetric products over
    /// nondecreasing index tuples. Returns `(alpha, tuple, tensor)` triples.
    pub fn induced_basis(&self, order: usize) -> Vec<(usize, Vec<usize>, Vec<f64>)> {
        let (big_n, n) = (self.range_dim(), self.domain_dim());
        let blk = n.pow(order as u32);
        let mut out = Vec::new();
        for a in 0..big_n {
            for tuple in nondecreasing_tuples(n, order) {
                let mut sym = vec![0.0; blk];
                let perms = permutations(order);
                for p in &perms {
                    let mut prod = vec![1.0];
                    for &k in p {
                        let v = self.domain[a].column(tuple[k]);
                        prod = outer(&prod, v.as_slice());
                    }
                    for (s, x) in sym.iter_mut().zip(&prod) {
                        *s += x / perms.len() as f64;
                    }
                }
                let nrm = sym.iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut full = vec![0.0; big_n * blk];
                for b in 0..big_n {
                    for (j, s) in sym.iter().enumerate() {
                        full[b * blk + j] = self.range[(b, a)] * s / nrm;
                    }
                }
                out.push((a, tuple, full));
            }
        }
        out
    }
}

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for x in a {
        for y in b {
            out.push(x * y);
        }
    }
    out
}

pub(crate) fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

fn nondecreasing_tuples(n: usize, order: usize) -> Vec<Vec<usize>> {
    if order == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for t in nondecreasing_tuples(n, order - 1) {
        let start = t.last().copied().unwrap_or(0);
        for i in start..n {
            let mut s = t.clone();
            s.push(i);
            out.push(s);
        }
    }
    out
}

/// Multiplies an order-`order` array of side `n` along `axis` by `m` (output index first).
fn mode_product(v: &[f64], n: usize, order: usize, axis: usize, m: &DMatrix<f64>) -> Vec<f64> {
    let inner = n.pow((order - axis - 1) as u32);
    let outer_len = n.pow(axis as u32);
    let mut out = vec![0.0; v.len()];
    for o in 0..outer_len {
        for r in 0..n {
            for c in 0..n {
                let w = m[(r, c)];
                if w == 0.0 {
                    continue;
                }
                let src = (o * n + c) * inner;
                let dst = (o * n + r) * inner;
                for k in 0..inner {
                    out[dst + k] += w * v[src + k];
                }
            }
        }
    }
    out
}

/// Symmetrises an order-`order` tensor stored as `blocks` blocks of `n^order` entries
/// over permutations of its domain indices.
pub fn symmetrize(blocks: usize, n: usize, order: usize, t: &[f64]) -> Vec<f64> {
    if order < 2 {
        return t.to_vec();
    }
    let blk = n.pow(order as u32);
    let perms = permutations(order);
    let mut out = vec![0.0; t.len()];
    let mut idx = vec![0usize; order];
    for j in 0..blk {
        let mut r = j;
        for a in (0..order).rev() {
            idx[a] = r % n;
            r /= n;
        }
        for p in &perms {
            let mut k = 0;
            for &q in p {
                k = k * n + idx[q];
            }
            for b in 0..blocks {
                out[b * blk + j] += t[b * blk + k] / perms.len() as f64;
            }
        }
    }
    out
}

/// Step sizes for difference quotients of several orders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HSchedule {
    /// `(h_1, .., h_p)`: the order-`q` quotient uses the first `q` steps.
    Steps(Vec<f64>),
    /// Lower trigonal matrix: row `q` holds the `q` steps of the order-`q` quotient.
    Trigonal(Vec<Vec<f64>>),
}

impl HSchedule {
    /// Trigonal schedule with every step equal to `h`.
    pub fn uniform(h: f64, order: usize) -> Self {
        HSchedule::Trigonal((1..=order).map(|q| vec![h; q]).collect())
    }

    /// Trigonal schedule whose order-`q` row is `(h, h * ratio, .., h * ratio^{q-1})`.
    pub fn separated(h: f64, ratio: f64, order: usize) -> Self {
        HSchedule::Trigonal((1..=order).map(|q| (0..q).map(|k| h * ratio.powi(k as i32)).collect()).collect())
    }

    pub fn order(&self) -> usize {
        match self {
            HSchedule::Steps(v) => v.len(),
            HSchedule::Trigonal(rows) => rows.len(),
        }
    }

    /// Steps used by the order-`q` quotient.
    pub fn row(&self, q: usize) -> Vec<f64> {
        match self {
            HSchedule::Steps(v) => v[..q].to_vec(),
            HSchedule::Trigonal(rows) => rows[q - 1].clone(),
        }
    }

    /// Largest step over all rows.
    pub fn max_step(&self) -> f64 {
        (1..=self.order()).flat_map(|q| self.row(q)).fold(0.0, |m, h| m.max(h.abs()))
    }

    /// Largest total displacement of an order-`q` stencil, over `q`.
    pub fn reach(&self) -> f64 {
        (1..=self.order()).map(|q| self.row(q).iter().map(|h| h.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub fn validate(&self, spacing: f64) -> Result<()> {
        if self.order() == 0 {
            return Err(Error::Schedule("empty schedule".into()));
        }
        if let HSchedule::Trigonal(rows) = self {
            for (q, r) in rows.iter().enumerate() {
                if r.len() != q + 1 {
                    return Err(Error::Schedule(format!("row {} of a trigonal schedule must have {} entries", q + 1, q + 1)));
                }
            }
        }
        for q in 1..=self.order() {
            for h in self.row(q) {
                if !h.is_finite() || h == 0.0 {
                    return Err(Error::Schedule(format!("step {h} is zero or not finite")));
                }
                if h.abs() < spacing * (1.0 - 1e-9) {
                    return Err(Error::Schedule(format!("step {h} is below the lattice spacing {spacing}")));
                }
            }
        }
        Ok(())
    }
}

/// Schedules whose quotients are aggregated into one Young measure; every step shrinks
/// strictly from one member to the next.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window(pub Vec<HSchedule>);

impl Window {
    pub fn validate(&self, spacing: f64) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Schedule("empty window".into()));
        }
        let order = self.0[0].order();
        for s in &self.0 {
            s.validate(spacing)?;
            if s.order() != order {
                return Err(Error::Schedule("window members have different orders".into()));
            }
        }
        for pair in self.0.windows(2) {
            for q in 1..=order {
                for (a, b) in pair[0].row(q).iter().zip(pair[1].row(q)) {
                    if !(b.abs() < a.abs()) {
                        return Err(Error::Schedule(format!("steps must decrease strictly: {a} then {b}")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.0.first().map(|s| s.order()).unwrap_or(0)
    }

    pub fn finest_step(&self) -> f64 {
        self.0.last().map(|s| s.max_step()).unwrap_or(0.0)
    }

    pub fn coarsest_step(&self) -> f64 {
        self.0.first().map(|s| s.max_step()).unwrap_or(0.0)
    }

    pub fn reach(&self) -> f64 {
        self.0.iter().map(|s| s.reach()).fold(0.0, f64::max)
    }

    /// `width` uniform schedules `h0 * ratio^m`.
    pub fn geometric(h0: f64, ratio: f64, width: usize, order: usize) -> Self {
        Window((0..width).map(|m| HSchedule::uniform(h0 * ratio.powi(m as i32), order)).collect())
    }
}

/// Order-`q` difference quotients in frame coefficients, with steps `steps` (length `q`).
///
/// Component `alpha * n^q + (i_1 .. i_q)` at node `x` holds
/// `D_{E^(alpha)i_q}^{h_q} .. D_{E^(alpha)i_1}^{h_1} (E^alpha . u)(x)`, evaluated by
/// multilinear interpolation of the zero extension of `u`. Nodes outside the mask get zero.
pub fn difference_quotient(u: &GridFunction, frame: &Frame, steps: &[f64]) -> Result<GridFunction> {
    let l = u.lattice();
    let (big_n, n) = (frame.range_dim(), frame.domain_dim());
    if u.components() != big_n || l.dim() != n {
        return Err(Error::Dimension(format!(
            "frame is for R^{n} -> R^{big_n}, function is R^{} -> R^{}",
            l.dim(),
            u.components()
        )));
    }
    let q = steps.len();
    HSchedule::Steps(steps.to_vec()).validate(l.min_spacing())?;
    let blk = n.pow(q as u32);
    let comps = big_n * blk;
    let denom: f64 = steps.iter().product();
    let mask = l.mask_flags();
    let cols: Vec<Vec<DVector<f64>>> =
        (0..big_n).map(|a| (0..n).map(|i| frame.domain_vector(a, i)).collect()).collect();
    let evecs: Vec<DVector<f64>> = (0..big_n).map(|a| frame.range_vector(a)).collect();

    let values: Vec<f64> = (0..l.len())
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut out = vec![0.0; comps];
            if mask[k] {
                let x = l.position(k);
                let mut buf = vec![0.0; big_n];
                let mut y = vec![0.0; n];
                let mut tuple = vec![0usize; q];
                for a in 0..big_n {
                    for t in 0..blk {
                        let mut r = t;
                        for s in (0..q).rev() {
                            tuple[s] = r % n;
                            r /= n;
                        }
                        let mut acc = 0.0;
                        for subset in 0..(1usize << q) {
                            y.copy_from_slice(&x);
                            for s in 0..q {
                                if (subset >> s) & 1 == 1 {
                                    let dir = &cols[a][tuple[s]];
                                    for c in 0..n {
                                        y[c] += steps[s] * dir[c];
                                    }
                                }
                            }
                            u.sample_into(&y, &mut buf);
                            let v: f64 = (0..big_n).map(|b| evecs[a][b] * buf[b]).sum();
                            let sign = if (q - subset.count_ones() as usize) % 2 == 0 { 1.0 } else { -1.0 };
                            acc += sign * v;
                        }
                        out[a * blk + t] = acc / denom;
                    }
                }
            }
            out.into_iter()
        })
        .collect();
    GridFunction::from_values(l.clone(), comps, values)
}

/// First-order quotient `D^{1,h} u` in frame coefficients.
pub fn difference_quotient_1(u: &GridFunction, frame: &Frame, h: f64) -> Result<GridFunction> {
    difference_quotient(u, frame, &[h])
}

/// Quotients of orders `1..=p` for a schedule of order `p`, in frame coefficients.
pub fn jet_difference_quotients(u: &GridFunction, frame: &Frame, schedule: &HSchedule) -> Result<Vec<GridFunction>> {
    schedule.validate(u.lattice().min_spacing())?;
    (1..=schedule.order()).map(|q| difference_quotient(u, frame, &schedule.row(q))).collect()
}

/// Converts an order-`q` quotient field from frame coefficients to standard coordinates and
/// symmetrises it in the domain indices.
pub fn to_standard(frame: &Frame, order: usize, g: &GridFunction) -> GridFunction {
    let big_n = frame.range_dim();
    let n = frame.domain_dim();
    g.map(g.components(), |_, v| symmetrize(big_n, n, order, &frame.reassemble(order, v)))
}

/// Quotients of orders `1..=p` in standard coordinates.
pub fn standard_jet(u: &GridFunction, frame: &Frame, schedule: &HSchedule) -> Result<Vec<GridFunction>> {
    Ok(jet_difference_quotients(u, frame, schedule)?
        .iter()
        .enumerate()
        .map(|(k, g)| to_standard(frame, k + 1, g))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;
    use crate::linalg::TOL_LIN;

    fn rotation(t: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[t.cos(), -t.sin(), t.sin(), t.cos()])
    }

    #[test]
    fn frame_from_diagonal_decomposition() {
        let d = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let dec = Decomposition::new(2, 2, vec![d(&[1.0, 0.0]), d(&[0.0, 1.0])], vec![d(&[1.0, 0.0]), d(&[1.0, 0.0])])
            .unwrap();
        let f = Frame::from_decomposition(&dec).unwrap();
        assert!((f.range_vector(0) - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-15);
        assert!((f.range_vector(1) - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-15);
        for a in 0..2 {
            // the last vector spans the range of A^gamma
            assert!((f.domain_vector(a, 1) - DVector::from_vec(vec![1.0, 0.0])).norm() < 1e-15);
            assert!((f.domain_vector(a, 0) - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-15);
        }
    }

    #[test]
    fn induced_basis_is_orthonormal() {
        let f = Frame::new(rotation(0.4), vec![rotation(1.1), rotation(-0.3)]).unwrap();
        for order in 1..=3 {
            let b = f.induced_basis(order);
            for (i, x) in b.iter().enumerate() {
                for (j, y) in b.iter().enumerate() {
                    let ip: f64 = x.2.iter().zip(&y.2).map(|(p, q)| p * q).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((ip - expect).abs() < 1e-12, "order {order} ({i},{j}) -> {ip}");
                }
            }
        }
    }

    #[test]
    fn expansion_reassembles() {
        let f = Frame::new(rotation(0.4), vec![rotation(1.1), rotation(-0.3)]).unwrap();
        let t = symmetrize(2, 2, 2, &[1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.7, 2.0]);
        let back = f.reassemble(2, &f.expand(2, &t));
        for (a, b) in t.iter().zip(&back) {
            assert!((a - b).abs() < TOL_LIN);
        }
    }

    #[test]
    fn linear_map_has_exact_first_quotient() {
        let g = GridFunction::from_fn(Lattice::unit_square(16), 2, |x| vec![x[0] + 2.0 * x[1], -x[0]]);
        let q = difference_quotient_1(&g, &Frame::standard(2, 2), 1.0 / 16.0).unwrap();
        let v = q.value(g.lattice().index(&[3, 5]));
        let expect = [1.0, 2.0, -1.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    #[test]
    fn quadratic_has_exact_second_quotient() {
        let g = GridFunction::from_fn(Lattice::unit_square(32), 1, |x| vec![x[0] * x[0] + x[0] * x[1]]);
        let q = difference_quotient(&g, &Frame::standard(1, 2), &[2.0 / 32.0, 1.0 / 32.0]).unwrap();
        let v = q.value(g.lattice().index(&[8, 8]));
        let expect = [2.0, 1.0, 1.0, 0.0];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9, "{v:?}");
        }
    }

    #[test]
    fn step_below_spacing_rejected() {
        let g = GridFunction::zeros(Lattice::unit_square(8), 1);
        assert!(matches!(difference_quotient_1(&g, &Frame::standard(1, 2), 0.01), Err(Error::Schedule(_))));
    }

    #[test]
    fn window_must_refine() {
        let w = Window(vec![HSchedule::uniform(0.1, 1), HSchedule::uniform(0.1, 1)]);
        assert!(w.validate(0.01).is_err());
        assert!(Window::geometric(0.2, 0.5, 3, 2).validate(0.01).is_ok());
    }
}
