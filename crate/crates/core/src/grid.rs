//! Rectangular lattices, masks and vector-valued grid functions.
//!
//! Values are stored row-major over the lattice (last axis fastest) with the
//! components innermost. Grid functions vanish outside their mask, which is how
//! they are extended to all of R^n.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Region of the lattice on which a grid function lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mask {
    /// Every lattice node.
    Rect,
    /// Nodes strictly inside a ball.
    Disc { center: Vec<f64>, radius: f64 },
}

/// Uniform lattice `origin + k * spacing`, `0 <= k < dims`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub dims: Vec<usize>,
    pub spacing: Vec<f64>,
    pub origin: Vec<f64>,
    pub mask: Mask,
}

impl Lattice {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>, mask: Mask) -> Result<Self> {
        if dims.is_empty() || dims.len() != spacing.len() || dims.len() != origin.len() {
            return Err(Error::Dimension("dims, spacing and origin must have equal nonzero length".into()));
        }
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::Dimension("every lattice axis needs at least two nodes".into()));
        }
        if spacing.iter().any(|&h| !(h > 0.0) || !h.is_finite()) {
            return Err(Error::Dimension("spacing must be positive and finite".into()));
        }
        if let Mask::Disc { center, radius } = &mask {
            if center.len() != dims.len() || !(*radius > 0.0) {
                return Err(Error::Dimension("disc mask needs a centre of matching dimension and positive radius".into()));
            }
        }
        Ok(Lattice { dims, spacing, origin, mask })
    }

    /// `[lo, hi]^dim` with `cells` cells per axis.
    pub fn cube(dim: usize, cells: usize, lo: f64, hi: f64) -> Self {
        let h = (hi - lo) / cells as f64;
        Lattice { dims: vec![cells + 1; dim], spacing: vec![h; dim], origin: vec![lo; dim], mask: Mask::Rect }
    }

    /// `[0, 1]^2` with `cells` cells per axis.
    pub fn unit_square(cells: usize) -> Self {
        Lattice::cube(2, cells, 0.0, 1.0)
    }

    /// `[a, b]` with `cells` cells.
    pub fn interval(cells: usize, a: f64, b: f64) -> Self {
        Lattice::cube(1, cells, a, b)
    }

    /// Unit disc in the plane, on `[-1, 1]^2` with `cells` cells per axis.
    pub fn disc(cells: usize) -> Self {
        let mut l = Lattice::cube(2, cells, -1.0, 1.0);
        l.mask = Mask::Disc { center: vec![0.0, 0.0], radius: 1.0 };
        l
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest spacing over the axes.
    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(0.0, f64::max)
    }

    pub fn index(&self, idx: &[usize]) -> usize {
        let mut k = 0;
        for (a, &i) in idx.iter().enumerate() {
            k = k * self.dims[a] + i;
        }
        k
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for a in (0..self.dims.len()).rev() {
            idx[a] = k % self.dims[a];
            k /= self.dims[a];
        }
        idx
    }

    pub fn position(&self, k: usize) -> Vec<f64> {
        self.multi_index(k)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.origin[a] + i as f64 * self.spacing[a])
            .collect()
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        match &self.mask {
            Mask::Rect => x.iter().enumerate().all(|(a, &v)| {
                let lo = self.origin[a];
                let hi = lo + (self.dims[a] - 1) as f64 * self.spacing[a];
                v >= lo - 1e-12 * self.spacing[a] && v <= hi + 1e-12 * self.spacing[a]
            }),
            Mask::Disc { center, radius } => {
                let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                r2.sqrt() < radius * (1.0 - 1e-12)
            }
        }
    }

    pub fn in_mask(&self, k: usize) -> bool {
        match self.mask {
            Mask::Rect => true,
            Mask::Disc { .. } => self.contains_point(&self.position(k)),
        }
    }

    pub fn mask_flags(&self) -> Vec<bool> {
        (0..self.len()).map(|k| self.in_mask(k)).collect()
    }

    /// True for masked nodes off the outer lattice edge; these carry the unknowns of Dirichlet problems.
    pub fn is_unknown(&self, k: usize) -> bool {
        if !self.in_mask(k) {
            return false;
        }
        self.multi_index(k).iter().enumerate().all(|(a, &i)| i > 0 && i + 1 < self.dims[a])
    }

    /// Neighbour `k + offset e_axis`, if it is a lattice node.
    pub fn neighbor(&self, k: usize, axis: usize, offset: isize) -> Option<usize> {
        let idx = self.multi_index(k);
        let i = idx[axis] as isize + offset;
        if i < 0 || i >= self.dims[axis] as isize {
            return None;
        }
        let stride: usize = self.dims[axis + 1..].iter().product();
        Some((k as isize + offset * stride as isize) as usize)
    }

    /// Masked nodes whose box of half-widths `reach` (in nodes per axis) lies inside the mask.
    pub fn interior_nodes(&self, reach: &[usize]) -> Vec<usize> {
        let flags = self.mask_flags();
        (0..self.len())
            .filter(|&k| {
                if !flags[k] {
                    return false;
                }
                let idx = self.multi_index(k);
                if idx.iter().enumerate().any(|(a, &i)| i < reach[a] || i + reach[a] >= self.dims[a]) {
                    return false;
                }
                let mut ok = true;
                for_each_offset(reach, |off| {
                    if !ok {
                        return;
                    }
                    let j: Vec<usize> =
                        idx.iter().zip(off).map(|(&i, &o)| (i as isize + o) as usize).collect();
                    if !flags[self.index(&j)] {
                        ok = false;
                    }
                });
                ok
            })
            .collect()
    }

    /// Masked nodes with a lattice neighbour outside the mask.
    pub fn boundary_ring(&self) -> Vec<usize> {
        let flags = self.mask_flags();
        (0..self.len())
            .filter(|&k| {
                flags[k]
                    && (0..self.dim()).any(|a| {
                        [-1isize, 1].iter().any(|&o| match self.neighbor(k, a, o) {
                            Some(j) => !flags[j],
                            None => true,
                        })
                    })
            })
            .collect()
    }

    /// Quadrature weights: trapezoidal on rectangles, cell volume on masked nodes otherwise.
    pub fn weights(&self) -> Vec<f64> {
        let vol: f64 = self.spacing.iter().product();
        match self.mask {
            Mask::Rect => (0..self.len())
                .map(|k| {
                    let idx = self.multi_index(k);
                    idx.iter()
                        .enumerate()
                        .fold(vol, |w, (a, &i)| if i == 0 || i + 1 == self.dims[a] { w * 0.5 } else { w })
                })
                .collect(),
            Mask::Disc { .. } => self.mask_flags().into_iter().map(|f| if f { vol } else { 0.0 }).collect(),
        }
    }

    /// Diameter of the masked region.
    pub fn diameter(&self) -> f64 {
        match &self.mask {
            Mask::Rect => self
                .dims
                .iter()
                .zip(&self.spacing)
                .map(|(&d, &h)| ((d - 1) as f64 * h).powi(2))
                .sum::<f64>()
                .sqrt(),
            Mask::Disc { radius, .. } => 2.0 * radius,
        }
    }
}

fn for_each_offset(reach: &[usize], mut f: impl FnMut(&[isize])) {
    let dim = reach.len();
    let mut off: Vec<isize> = reach.iter().map(|&r| -(r as isize)).collect();
    loop {
        f(&off);
        let mut a = dim;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if off[a] < reach[a] as isize {
                off[a] += 1;
                break;
            }
            off[a] = -(reach[a] as isize);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
    components: usize,
    mask: Mask,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    space: Option<String>,
}

/// Vector-valued function on the nodes of a lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    lattice: Lattice,
    components: usize,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(lattice: Lattice, components: usize) -> Self {
        let values = vec![0.0; lattice.len() * components];
        GridFunction { lattice, components, values }
    }

    /// Samples `f` at masked nodes; other nodes are zero.
    pub fn from_fn(lattice: Lattice, components: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> Self {
        let mut g = GridFunction::zeros(lattice, components);
        for k in 0..g.lattice.len() {
            if g.lattice.in_mask(k) {
                let v = f(&g.lattice.position(k));
                assert_eq!(v.len(), components, "component count of sampled function");
                g.values[k * components..(k + 1) * components].copy_from_slice(&v);
            }
        }
        g
    }

    pub fn from_values(lattice: Lattice, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() * components {
            return Err(Error::Dimension(format!(
                "{} values for {} nodes x {} components",
                values.len(),
                lattice.len(),
                components
            )));
        }
        Ok(GridFunction { lattice, components, values })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn components(&self) -> usize {
        self.components
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.components..(k + 1) * self.components]
    }

    pub fn value_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.values[k * self.components..(k + 1) * self.components]
    }

    /// Applies `f` nodewise to produce a new function with `components` components.
    pub fn map(&self, components: usize, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> GridFunction {
        let mut out = GridFunction::zeros(self.lattice.clone(), components);
        for k in 0..self.lattice.len() {
            let v = f(k, self.value(k));
            out.values[k * components..(k + 1) * components].copy_from_slice(&v);
        }
        out
    }

    /// Multilinear interpolation of the zero extension.
    pub fn sample(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.components];
        self.sample_into(x, &mut out);
        out
    }

    pub fn sample_into(&self, x: &[f64], out: &mut [f64]) {
        let dim = self.lattice.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut base = vec![0isize; dim];
        let mut frac = vec![0.0; dim];
        for a in 0..dim {
            let t = (x[a] - self.lattice.origin[a]) / self.lattice.spacing[a];
            let r = t.round();
            let t = if (t - r).abs() < 1e-9 { r } else { t };
            let f = t.floor();
            base[a] = f as isize;
            frac[a] = t - f;
        }
        let d = self.components;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut k: isize = 0;
            let mut inside = true;
            for a in 0..dim {
                let bit = (corner >> a) & 1;
                let wa = if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                if wa == 0.0 {
                    w = 0.0;
                    break;
                }
                w *= wa;
                let i = base[a] + bit as isize;
                if i < 0 || i >= self.lattice.dims[a] as isize {
                    inside = false;
                    break;
                }
                k = k * self.lattice.dims[a] as isize + i;
            }
            if w == 0.0 || !inside {
                continue;
            }
            let k = k as usize;
            for c in 0..d {
                out[c] += w * self.values[k * d + c];
            }
        }
    }

    /// Single component as a scalar function.
    pub fn component(&self, c: usize) -> GridFunction {
        self.map(1, |_, v| vec![v[c]])
    }

    /// Weighted discrete L2 norm over the whole lattice.
    pub fn l2_norm(&self) -> f64 {
        let w = self.lattice.weights();
        (0..self.lattice.len())
            .map(|k| w[k] * self.value(k).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Weighted discrete L2 norm over a subset of nodes, each weighted by the cell volume.
    pub fn l2_norm_on(&self, nodes: &[usize]) -> f64 {
        let vol: f64 = self.lattice.spacing.iter().product();
        nodes
            .iter()
            .map(|&k| vol * self.value(k).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        if self.lattice != other.lattice || self.components != other.components {
            return Err(Error::Dimension("grid functions live on different lattices".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(GridFunction { lattice: self.lattice.clone(), components: self.components, values })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        let neg = other.scale(-1.0);
        self.sub(&neg)
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        GridFunction {
            lattice: self.lattice.clone(),
            components: self.components,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// First derivative along `axis`: central in the interior, second-order one-sided at the
    /// lattice edges. Neighbours outside the mask contribute their zero value.
    pub fn partial(&self, axis: usize) -> GridFunction {
        let h = self.lattice.spacing[axis];
        let d = self.components;
        let l = &self.lattice;
        let mut out = GridFunction::zeros(l.clone(), d);
        for k in 0..l.len() {
            let v = |o: isize| l.neighbor(k, axis, o).map(|j| &self.values[j * d..(j + 1) * d]);
            let res: Vec<f64> = match (v(-1), v(1)) {
                (Some(m), Some(p)) => (0..d).map(|c| (p[c] - m[c]) / (2.0 * h)).collect(),
                (None, Some(p)) => match v(2) {
                    Some(p2) => (0..d).map(|c| (-3.0 * self.values[k * d + c] + 4.0 * p[c] - p2[c]) / (2.0 * h)).collect(),
                    None => (0..d).map(|c| (p[c] - self.values[k * d + c]) / h).collect(),
                },
                (Some(m), None) => match v(-2) {
                    Some(m2) => (0..d).map(|c| (3.0 * self.values[k * d + c] - 4.0 * m[c] + m2[c]) / (2.0 * h)).collect(),
                    None => (0..d).map(|c| (self.values[k * d + c] - m[c]) / h).collect(),
                },
                (None, None) => vec![0.0; d],
            };
            out.values[k * d..(k + 1) * d].copy_from_slice(&res);
        }
        out
    }

    /// Second derivative along `axis`: three-point central in the interior, four-point one-sided
    /// at the lattice edges.
    pub fn second_partial(&self, axis: usize) -> GridFunction {
        let h2 = self.lattice.spacing[axis].powi(2);
        let d = self.components;
        let l = &self.lattice;
        let mut out = GridFunction::zeros(l.clone(), d);
        for k in 0..l.len() {
            let at = |o: isize| l.neighbor(k, axis, o).map(|j| &self.values[j * d..(j + 1) * d]);
            let u0 = &self.values[k * d..(k + 1) * d];
            let res: Vec<f64> = match (at(-1), at(1)) {
                (Some(m), Some(p)) => (0..d).map(|c| (p[c] - 2.0 * u0[c] + m[c]) / h2).collect(),
                (None, Some(p)) => match (at(2), at(3)) {
                    (Some(p2), Some(p3)) => {
                        (0..d).map(|c| (2.0 * u0[c] - 5.0 * p[c] + 4.0 * p2[c] - p3[c]) / h2).collect()
                    }
                    (Some(p2), None) => (0..d).map(|c| (u0[c] - 2.0 * p[c] + p2[c]) / h2).collect(),
                    _ => vec![0.0; d],
                },
                (Some(m), None) => match (at(-2), at(-3)) {
                    (Some(m2), Some(m3)) => {
                        (0..d).map(|c| (2.0 * u0[c] - 5.0 * m[c] + 4.0 * m2[c] - m3[c]) / h2).collect()
                    }
                    (Some(m2), None) => (0..d).map(|c| (u0[c] - 2.0 * m[c] + m2[c]) / h2).collect(),
                    _ => vec![0.0; d],
                },
                (None, None) => vec![0.0; d],
            };
            out.values[k * d..(k + 1) * d].copy_from_slice(&res);
        }
        out
    }

    /// Discrete gradient with components `(c, i)` at index `c * n + i`.
    pub fn gradient(&self) -> GridFunction {
        let n = self.lattice.dim();
        let d = self.components;
        let parts: Vec<GridFunction> = (0..n).map(|a| self.partial(a)).collect();
        let mut out = GridFunction::zeros(self.lattice.clone(), d * n);
        for k in 0..self.lattice.len() {
            for c in 0..d {
                for i in 0..n {
                    out.values[k * d * n + c * n + i] = parts[i].values[k * d + c];
                }
            }
        }
        out
    }

    /// Discrete hessian with components `(c, i, j)` at index `(c * n + i) * n + j`.
    pub fn hessian(&self) -> GridFunction {
        let n = self.lattice.dim();
        let d = self.components;
        let firsts: Vec<GridFunction> = (0..n).map(|a| self.partial(a)).collect();
        let mut out = GridFunction::zeros(self.lattice.clone(), d * n * n);
        for i in 0..n {
            let pure = self.second_partial(i);
            for k in 0..self.lattice.len() {
                for c in 0..d {
                    out.values[k * d * n * n + (c * n + i) * n + i] = pure.values[k * d + c];
                }
            }
            for j in (i + 1)..n {
                let a = firsts[i].partial(j);
                let b = firsts[j].partial(i);
                for k in 0..self.lattice.len() {
                    for c in 0..d {
                        let v = 0.5 * (a.values[k * d + c] + b.values[k * d + c]);
                        out.values[k * d * n * n + (c * n + i) * n + j] = v;
                        out.values[k * d * n * n + (c * n + j) * n + i] = v;
                    }
                }
            }
        }
        out
    }

    fn header(&self, space: Option<String>) -> GridHeader {
        GridHeader {
            dims: self.lattice.dims.clone(),
            spacing: self.lattice.spacing.clone(),
            origin: self.lattice.origin.clone(),
            components: self.components,
            mask: self.lattice.mask.clone(),
            byte_order: "little".into(),
            space,
        }
    }

    /// Writes one header line followed by little-endian 64-bit floats.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, &self.header(None))?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (header, lattice) = read_header(r)?;
        let mut values = vec![0.0; lattice.len() * header.components];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf).map_err(|e| Error::Parse(format!("grid payload truncated: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Parse(format!("{} trailing bytes after grid payload", rest.len())));
        }
        GridFunction::from_values(lattice, header.components, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        GridFunction::read_from(&mut f)
    }
}

pub(crate) fn write_lattice_header(
    w: &mut impl Write,
    lattice: &Lattice,
    components: usize,
    space: Option<String>,
) -> Result<()> {
    let h = GridHeader {
        dims: lattice.dims.clone(),
        spacing: lattice.spacing.clone(),
        origin: lattice.origin.clone(),
        components,
        mask: lattice.mask.clone(),
        byte_order: "little".into(),
        space,
    };
    write_header(w, &h)
}

fn write_header(w: &mut impl Write, h: &GridHeader) -> Result<()> {
    let line = serde_json::to_string(h)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(GridHeader, Lattice)> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => return Err(Error::Parse("missing header line".into())),
            _ if byte[0] == b'\n' => break,
            _ => line.push(byte[0]),
        }
        if line.len() > 1 << 20 {
            return Err(Error::Parse("header line too long".into()));
        }
    }
    let header: GridHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Parse(format!("bad grid header: {e}")))?;
    if header.byte_order != "little" {
        return Err(Error::Parse(format!("unsupported byte order {}", header.byte_order)));
    }
    let lattice = Lattice::new(header.dims.clone(), header.spacing.clone(), header.origin.clone(), header.mask.clone())
        .map_err(|e| Error::Parse(e.to_string()))?;
    Ok((header, lattice))
}

pub(crate) fn read_lattice_header(r: &mut impl Read) -> Result<(Lattice, usize, Option<String>)> {
    let (h, l) = read_header(r)?;
    Ok((l, h.components, h.space))
}
