//! Atomic Young measures over the one-point compactification and fields of them on a lattice.

use crate::error::{Error, Result};
use crate::frames::{difference_quotient, symmetrize, Frame, Window};
use crate::grid::{read_lattice_header, write_lattice_header, GridFunction, Lattice};
use crate::linalg::norm;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

/// Point of the compactified space.
#[derive(Clone, Debug, PartialEq)]
pub enum CompactPoint {
    Finite(Vec<f64>),
    Infinity,
}

impl CompactPoint {
    /// Classifies a finite vector, sending it to infinity beyond `r_inf`.
    pub fn clipped(v: Vec<f64>, r_inf: f64) -> Self {
        if v.iter().all(|x| x.is_finite()) && norm(&v) <= r_inf {
            CompactPoint::Finite(v)
        } else {
            CompactPoint::Infinity
        }
    }

    pub fn finite(&self) -> Option<&[f64]> {
        match self {
            CompactPoint::Finite(v) => Some(v),
            CompactPoint::Infinity => None,
        }
    }
}

/// Chordal distance on the compactified space, via stereographic projection at scale `scale`.
pub fn chordal_distance(a: &CompactPoint, b: &CompactPoint, scale: f64) -> f64 {
    let lift = |p: &CompactPoint| -> Vec<f64> {
        match p {
            CompactPoint::Infinity => vec![1.0],
            CompactPoint::Finite(v) => {
                let s2: f64 = v.iter().map(|x| (x / scale).powi(2)).sum();
                let mut out: Vec<f64> = v.iter().map(|x| 2.0 * x / scale / (1.0 + s2)).collect();
                out.push((s2 - 1.0) / (s2 + 1.0));
                out
            }
        }
    };
    let (la, lb) = (lift(a), lift(b));
    let d = la.len().max(lb.len());
    // the point at infinity lifts to the north pole (0, .., 0, 1)
    let get = |v: &Vec<f64>, i: usize| -> f64 {
        if v.len() == 1 && d > 1 {
            if i + 1 == d {
                1.0
            } else {
                0.0
            }
        } else {
            v[i]
        }
    };
    (0..d).map(|i| (get(&la, i) - get(&lb, i)).powi(2)).sum::<f64>().sqrt()
}

/// Finite convex combination of Dirac masses.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AtomicMeasure {
    pub atoms: Vec<(CompactPoint, f64)>,
}

impl AtomicMeasure {
    pub fn dirac(p: CompactPoint) -> Self {
        AtomicMeasure { atoms: vec![(p, 1.0)] }
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|(_, w)| w).sum()
    }

    pub fn infinity_mass(&self) -> f64 {
        self.atoms.iter().filter(|(p, _)| matches!(p, CompactPoint::Infinity)).map(|(_, w)| w).sum()
    }

    pub fn finite_atoms(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.atoms.iter().filter_map(|(p, w)| p.finite().map(|v| (v, *w)))
    }

    /// Finite atoms of positive weight; weights are not rescaled.
    pub fn reduced_support(&self) -> Vec<(Vec<f64>, f64)> {
        self.finite_atoms().filter(|(_, w)| *w > 0.0).map(|(v, w)| (v.to_vec(), w)).collect()
    }

    /// `sum w X` over finite atoms, unnormalised.
    pub fn barycenter(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; dim];
        for (v, w) in self.finite_atoms() {
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
        out
    }

    /// Shifts finite atoms by `a`; the atom at infinity stays put.
    pub fn translate(&self, a: &[f64], r_inf: f64) -> AtomicMeasure {
        AtomicMeasure {
            atoms: self
                .atoms
                .iter()
                .map(|(p, w)| match p {
                    CompactPoint::Finite(v) => {
                        (CompactPoint::clipped(v.iter().zip(a).map(|(x, y)| x + y).collect(), r_inf), *w)
                    }
                    CompactPoint::Infinity => (CompactPoint::Infinity, *w),
                })
                .collect(),
        }
    }

    /// Mass of finite atoms within `radius` of `center`.
    pub fn mass_within(&self, center: &[f64], radius: f64) -> f64 {
        self.finite_atoms()
            .filter(|(v, _)| norm(&v.iter().zip(center).map(|(a, b)| a - b).collect::<Vec<_>>()) <= radius)
            .map(|(_, w)| w)
            .sum()
    }
}

/// Field of atomic measures over the nodes of a lattice, valued in R^dim compactified.
#[derive(Clone, Debug, PartialEq)]
pub struct YoungMeasureField {
    lattice: Lattice,
    dim: usize,
    space: String,
    r_inf: f64,
    cells: Vec<AtomicMeasure>,
}

impl YoungMeasureField {
    pub fn new(lattice: Lattice, dim: usize, space: impl Into<String>, r_inf: f64, cells: Vec<AtomicMeasure>) -> Result<Self> {
        if cells.len() != lattice.len() {
            return Err(Error::Dimension(format!("{} cells for {} nodes", cells.len(), lattice.len())));
        }
        for c in &cells {
            for (p, w) in &c.atoms {
                if !(*w >= 0.0) {
                    return Err(Error::Precondition("atom weights must be nonnegative".into()));
                }
                if let CompactPoint::Finite(v) = p {
                    if v.len() != dim {
                        return Err(Error::Dimension(format!("atom of dimension {} in a field of dimension {dim}", v.len())));
                    }
                }
            }
        }
        Ok(YoungMeasureField { lattice, dim, space: space.into(), r_inf, cells })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Tag of the target space, such as `"D1"` or `"D2"`.
    pub fn space(&self) -> &str {
        &self.space
    }

    pub fn r_inf(&self) -> f64 {
        self.r_inf
    }

    pub fn cell(&self, k: usize) -> &AtomicMeasure {
        &self.cells[k]
    }

    pub fn cells(&self) -> &[AtomicMeasure] {
        &self.cells
    }

    /// Largest deviation of a cell mass from 1 over masked nodes.
    pub fn mass_defect(&self) -> f64 {
        let mask = self.lattice.mask_flags();
        self.cells
            .iter()
            .zip(mask)
            .filter(|(_, m)| *m)
            .map(|(c, _)| (c.total_mass() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn reduced_support(&self, k: usize) -> Vec<(Vec<f64>, f64)> {
        self.cells[k].reduced_support()
    }

    /// Nodewise `sum w X` over finite atoms.
    pub fn barycenter_off_infinity(&self) -> GridFunction {
        let values: Vec<f64> = self.cells.iter().flat_map(|c| c.barycenter(self.dim)).collect();
        GridFunction::from_values(self.lattice.clone(), self.dim, values).expect("consistent sizes")
    }

    /// Shifts every cell by the value of `a` at that node.
    pub fn translate(&self, a: &GridFunction) -> Result<YoungMeasureField> {
        if a.components() != self.dim || a.lattice() != &self.lattice {
            return Err(Error::Dimension("translation field does not match the measure field".into()));
        }
        let cells = self.cells.iter().enumerate().map(|(k, c)| c.translate(a.value(k), self.r_inf)).collect();
        Ok(YoungMeasureField { cells, ..self.clone() })
    }

    /// Masked nodes whose measure puts at least `mass_threshold` within `radius` of `reference`.
    pub fn concentration(&self, reference: &GridFunction, radius: f64, mass_threshold: f64) -> Concentration {
        let mask = self.lattice.mask_flags();
        let per_cell: Vec<Option<bool>> = (0..self.lattice.len())
            .map(|k| mask[k].then(|| self.cells[k].mass_within(reference.value(k), radius) >= mass_threshold))
            .collect();
        let total = per_cell.iter().flatten().count();
        let hits = per_cell.iter().flatten().filter(|b| **b).count();
        Concentration { per_cell, fraction: if total == 0 { 1.0 } else { hits as f64 / total as f64 } }
    }

    /// Same as [`YoungMeasureField::concentration`] restricted to `nodes`.
    pub fn concentration_on(&self, nodes: &[usize], reference: &GridFunction, radius: f64, mass_threshold: f64) -> f64 {
        if nodes.is_empty() {
            return 1.0;
        }
        let hits = nodes
            .iter()
            .filter(|&&k| self.cells[k].mass_within(reference.value(k), radius) >= mass_threshold)
            .count();
        hits as f64 / nodes.len() as f64
    }

    /// Writes the grid header followed, per node, by the atom count (u64) and
    /// `(flag, payload, weight)` records as little-endian 64-bit floats. Flag 1 marks infinity.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_lattice_header(w, &self.lattice, self.dim, Some(format!("{};r_inf={:e}", self.space, self.r_inf)))?;
        for c in &self.cells {
            w.write_all(&(c.atoms.len() as u64).to_le_bytes())?;
            for (p, wt) in &c.atoms {
                match p {
                    CompactPoint::Finite(v) => {
                        w.write_all(&0f64.to_le_bytes())?;
                        for x in v {
                            w.write_all(&x.to_le_bytes())?;
                        }
                    }
                    CompactPoint::Infinity => {
                        w.write_all(&1f64.to_le_bytes())?;
                        for _ in 0..self.dim {
                            w.write_all(&0f64.to_le_bytes())?;
                        }
                    }
                }
                w.write_all(&wt.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (lattice, dim, space) = read_lattice_header(r)?;
        let tag = space.unwrap_or_default();
        let (space, r_inf) = match tag.split_once(";r_inf=") {
            Some((s, v)) => (s.to_string(), v.parse::<f64>().map_err(|e| Error::Parse(format!("bad r_inf: {e}")))?),
            None => (tag, f64::INFINITY),
        };
        let mut f8 = [0u8; 8];
        let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
            r.read_exact(&mut f8).map_err(|e| Error::Parse(format!("measure payload truncated: {e}")))?;
            Ok(f8)
        };
        let mut cells = Vec::with_capacity(lattice.len());
        for _ in 0..lattice.len() {
            let count = u64::from_le_bytes(next(r)?) as usize;
            if count > 1 << 24 {
                return Err(Error::Parse("implausible atom count".into()));
            }
            let mut atoms = Vec::with_capacity(count);
            for _ in 0..count {
                let flag = f64::from_le_bytes(next(r)?);
                let mut v = Vec::with_capacity(dim);
                for _ in 0..dim {
                    v.push(f64::from_le_bytes(next(r)?));
                }
                let wt = f64::from_le_bytes(next(r)?);
                let p = if flag == 0.0 {
                    CompactPoint::Finite(v)
                } else if flag == 1.0 {
                    CompactPoint::Infinity
                } else {
                    return Err(Error::Parse(format!("bad atom flag {flag}")));
                };
                atoms.push((p, wt));
            }
            cells.push(AtomicMeasure { atoms });
        }
        YoungMeasureField::new(lattice, dim, space, r_inf, cells).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        YoungMeasureField::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Outcome of a concentration test.
#[derive(Clone, Debug)]
pub struct Concentration {
    /// `None` outside the mask.
    pub per_cell: Vec<Option<bool>>,
    pub fraction: f64,
}

/// Product of per-order measure fields, the jet measure on a product of compactified spaces.
#[derive(Clone, Debug)]
pub struct JetMeasureField {
    pub factors: Vec<YoungMeasureField>,
}

impl JetMeasureField {
    pub fn lattice(&self) -> &Lattice {
        self.factors[0].lattice()
    }

    /// Product atoms at node `k`: one compact point per factor and the product weight.
    pub fn product_atoms(&self, k: usize) -> Vec<(Vec<&CompactPoint>, f64)> {
        let mut out: Vec<(Vec<&CompactPoint>, f64)> = vec![(Vec::new(), 1.0)];
        for f in &self.factors {
            let mut next = Vec::with_capacity(out.len() * f.cell(k).atoms.len());
            for (pts, w) in &out {
                for (p, wp) in &f.cell(k).atoms {
                    let mut q = pts.clone();
                    q.push(p);
                    next.push((q, w * wp));
                }
            }
            out = next;
        }
        out
    }

    /// Finite product atoms at node `k`, concatenated into single jet vectors.
    pub fn finite_jets(&self, k: usize) -> Vec<(Vec<f64>, f64)> {
        self.product_atoms(k)
            .into_iter()
            .filter_map(|(pts, w)| {
                let mut v = Vec::new();
                for p in pts {
                    v.extend_from_slice(p.finite()?);
                }
                Some((v, w))
            })
            .collect()
    }

    /// Mass of product atoms with some factor at infinity.
    pub fn infinity_mass(&self, k: usize) -> f64 {
        self.product_atoms(k).iter().filter(|(p, _)| p.iter().any(|q| q.finite().is_none())).map(|(_, w)| w).sum()
    }
}

/// Dirac field `x -> delta_{v(x)}`.
pub fn dirac_field(v: &GridFunction, r_inf: f64) -> YoungMeasureField {
    let l = v.lattice().clone();
    let cells = (0..l.len()).map(|k| AtomicMeasure::dirac(CompactPoint::clipped(v.value(k).to_vec(), r_inf))).collect();
    YoungMeasureField { lattice: l, dim: v.components(), space: "dirac".into(), r_inf, cells }
}

/// Default cut-off: `1e6` times the largest first-order quotient at the coarsest step.
pub fn default_r_inf(u: &GridFunction, frame: &Frame, window: &Window) -> Result<f64> {
    let h = window.0.first().ok_or_else(|| Error::Schedule("empty window".into()))?.row(1)[0];
    let q = difference_quotient(u, frame, &[h])?;
    let n = q.components();
    let m = (0..q.lattice().len()).map(|k| norm(&q.value(k)[..n])).fold(0.0, f64::max);
    Ok(if m > 0.0 { 1e6 * m } else { 1e6 })
}

/// Diffuse derivative of order `q`: at each node, equal-weight atoms at the order-`q` quotients
/// of the window members, in standard coordinates. Quotients beyond `r_inf` go to infinity.
pub fn diffuse_field(u: &GridFunction, frame: &Frame, window: &Window, q: usize, r_inf: f64) -> Result<YoungMeasureField> {
    let l = u.lattice();
    window.validate(l.min_spacing())?;
    if q == 0 || q > window.order() {
        return Err(Error::Schedule(format!("order {q} not covered by a window of order {}", window.order())));
    }
    let (big_n, n) = (frame.range_dim(), frame.domain_dim());
    let dim = big_n * n.pow(q as u32);
    let fields: Vec<GridFunction> =
        window.0.iter().map(|s| difference_quotient(u, frame, &s.row(q))).collect::<Result<_>>()?;
    let w = 1.0 / fields.len() as f64;
    let mask = l.mask_flags();
    let cells = (0..l.len())
        .map(|k| {
            if !mask[k] {
                return AtomicMeasure::dirac(CompactPoint::Finite(vec![0.0; dim]));
            }
            AtomicMeasure {
                atoms: fields
                    .iter()
                    .map(|g| {
                        let v = symmetrize(big_n, n, q, &frame.reassemble(q, g.value(k)));
                        (CompactPoint::clipped(v, r_inf), w)
                    })
                    .collect(),
            }
        })
        .collect();
    YoungMeasureField::new(l.clone(), dim, format!("D{q}"), r_inf, cells)
}

/// Jet measure: product of the diffuse fields of orders `1..=p`, each with its own cut-off.
pub fn diffuse_jet(u: &GridFunction, frame: &Frame, window: &Window, r_inf: &[f64]) -> Result<JetMeasureField> {
    let p = window.order();
    if r_inf.len() != p {
        return Err(Error::Dimension(format!("{} cut-offs for a window of order {p}", r_inf.len())));
    }
    let factors = (1..=p).map(|q| diffuse_field(u, frame, window, q, r_inf[q - 1])).collect::<Result<_>>()?;
    Ok(JetMeasureField { factors })
}

/// Scalar test function on the compactified space.
#[derive(Clone)]
pub struct TestFunction {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    at_infinity: f64,
    support_radius: Option<f64>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TestFunction")
            .field("at_infinity", &self.at_infinity)
            .field("support_radius", &self.support_radius)
            .finish()
    }
}

impl TestFunction {
    /// `at_infinity` is the continuous extension; `support_radius` bounds the support when it is compact.
    pub fn new(
        f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        at_infinity: f64,
        support_radius: Option<f64>,
    ) -> Result<Self> {
        if support_radius.is_some() && at_infinity != 0.0 {
            return Err(Error::TestFunction("a compactly supported function vanishes at infinity".into()));
        }
        if !at_infinity.is_finite() {
            return Err(Error::TestFunction("value at infinity must be finite".into()));
        }
        Ok(TestFunction { f: Arc::new(f), at_infinity, support_radius })
    }

    /// Unit-height radial bump `(1 - |X - c|^2 / r^2)_+^2`.
    pub fn bump(center: Vec<f64>, radius: f64) -> Self {
        let c2 = center.clone();
        let reach = norm(&center) + radius;
        TestFunction {
            f: Arc::new(move |x: &[f64]| {
                let d2: f64 = x.iter().zip(&c2).map(|(a, b)| (a - b) * (a - b)).sum();
                let t = 1.0 - d2 / (radius * radius);
                if t > 0.0 {
                    t * t
                } else {
                    0.0
                }
            }),
            at_infinity: 0.0,
            support_radius: Some(reach),
        }
    }

    pub fn constant(c: f64) -> Self {
        TestFunction { f: Arc::new(move |_| c), at_infinity: c, support_radius: None }
    }

    pub fn is_compact(&self) -> bool {
        self.support_radius.is_some()
    }

    pub fn eval(&self, p: &CompactPoint) -> f64 {
        match p {
            CompactPoint::Finite(v) => (self.f)(v),
            CompactPoint::Infinity => self.at_infinity,
        }
    }

    pub fn eval_finite(&self, v: &[f64]) -> f64 {
        (self.f)(v)
    }
}

/// Vector weight `(x, X) -> R^M` paired against a measure.
#[derive(Clone)]
pub struct Weight {
    f: Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>,
    dim: usize,
    /// Limit at infinity for bounded weights; `None` marks a weight that may be unbounded.
    at_infinity: Option<Vec<f64>>,
}

impl Weight {
    pub fn new(
        dim: usize,
        f: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
        at_infinity: Option<Vec<f64>>,
    ) -> Self {
        Weight { f: Arc::new(f), dim, at_infinity }
    }

    pub fn one() -> Self {
        Weight::new(1, |_, _| vec![1.0], Some(vec![1.0]))
    }
}

/// `x -> integral of Phi(X) weight(x, X) d(mu_x)(X)`.
pub fn pair(field: &YoungMeasureField, phi: &TestFunction, weight: &Weight) -> Result<GridFunction> {
    if !phi.is_compact() && weight.at_infinity.is_none() {
        return Err(Error::TestFunction("a non-compactly supported test function needs a bounded weight".into()));
    }
    let l = field.lattice();
    let m = weight.dim;
    let mut out = GridFunction::zeros(l.clone(), m);
    for k in 0..l.len() {
        let x = l.position(k);
        let mut acc = vec![0.0; m];
        for (p, w) in &field.cell(k).atoms {
            match p {
                CompactPoint::Finite(v) => {
                    let s = phi.eval_finite(v);
                    if s != 0.0 {
                        for (a, b) in acc.iter_mut().zip((weight.f)(&x, v)) {
                            *a += w * s * b;
                        }
                    }
                }
                CompactPoint::Infinity => {
                    if phi.at_infinity != 0.0 {
                        let lim = weight.at_infinity.as_ref().expect("checked above");
                        for (a, b) in acc.iter_mut().zip(lim) {
                            *a += w * phi.at_infinity * b;
                        }
                    }
                }
            }
        }
        out.value_mut(k).copy_from_slice(&acc);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::HSchedule;

    #[test]
    fn dirac_of_smooth_function() {
        let g = GridFunction::from_fn(Lattice::unit_square(4), 1, |x| vec![x[0]]);
        let f = dirac_field(&g, 1e6);
        assert_eq!(f.cell(7).atoms.len(), 1);
        assert_eq!(f.mass_defect(), 0.0);
    }

    #[test]
    fn reduced_support_keeps_weights() {
        let m = AtomicMeasure {
            atoms: vec![(CompactPoint::Finite(vec![1.0]), 0.25), (CompactPoint::Infinity, 0.75)],
        };
        assert_eq!(m.reduced_support(), vec![(vec![1.0], 0.25)]);
        assert_eq!(m.barycenter(1), vec![0.25]);
        assert_eq!(m.infinity_mass(), 0.75);
        let t = m.translate(&[2.0], 10.0);
        assert_eq!(t.atoms[0].0, CompactPoint::Finite(vec![3.0]));
        assert_eq!(t.atoms[1].0, CompactPoint::Infinity);
    }

    #[test]
    fn pairing_conventions() {
        let l = Lattice::interval(2, 0.0, 1.0);
        let cell = AtomicMeasure { atoms: vec![(CompactPoint::Finite(vec![0.0]), 0.5), (CompactPoint::Infinity, 0.5)] };
        let f = YoungMeasureField::new(l, 1, "D1", 10.0, vec![cell; 3]).unwrap();
        let p = pair(&f, &TestFunction::bump(vec![0.0], 1.0), &Weight::one()).unwrap();
        assert_eq!(p.value(1), &[0.5]);
        let p = pair(&f, &TestFunction::constant(1.0), &Weight::one()).unwrap();
        assert_eq!(p.value(1), &[1.0]);
        let unbounded = Weight::new(1, |_, v| vec![v[0]], None);
        assert!(pair(&f, &TestFunction::constant(1.0), &unbounded).is_err());
        assert!(TestFunction::new(|_| 0.0, 1.0, Some(2.0)).is_err());
    }

    #[test]
    fn chordal_metric_is_bounded_and_separates_infinity() {
        let a = CompactPoint::Finite(vec![0.0, 0.0]);
        let b = CompactPoint::Finite(vec![1e9, 0.0]);
        let d0 = chordal_distance(&a, &CompactPoint::Infinity, 1.0);
        assert!((d0 - 2.0).abs() < 1e-12);
        assert!(chordal_distance(&b, &CompactPoint::Infinity, 1.0) < 1e-8);
    }

    #[test]
    fn diffuse_field_has_unit_mass_and_round_trips() {
        let g = GridFunction::from_fn(Lattice::unit_square(16), 1, |x| vec![x[0] * x[1]]);
        let w = Window::geometric(4.0 / 16.0, 0.5, 3, 1);
        let f = diffuse_field(&g, &Frame::standard(1, 2), &w, 1, 1e3).unwrap();
        assert!(f.mass_defect() < 1e-15);
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let back = YoungMeasureField::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn infinity_atoms_from_large_quotients() {
        let g = GridFunction::from_fn(Lattice::interval(64, 0.0, 1.0), 1, |x| vec![if x[0] < 0.5 { 0.0 } else { 1.0 }]);
        let w = Window(vec![HSchedule::uniform(2.0 / 64.0, 1), HSchedule::uniform(1.0 / 64.0, 1)]);
        let f = diffuse_field(&g, &Frame::standard(1, 1), &w, 1, 20.0).unwrap();
        let k = g.lattice().index(&[31]);
        assert_eq!(f.cell(k).infinity_mass(), 1.0);
        assert_eq!(f.cell(3).infinity_mass(), 0.0);
    }
}
