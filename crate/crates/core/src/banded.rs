//! Symmetric banded matrices and their Cholesky factorisation.

use crate::error::{Error, Result};

/// Lower band of a symmetric matrix: row `i` stores columns `i - bandwidth ..= i`.
#[derive(Clone, Debug)]
pub struct BandedSym {
    size: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(size: usize, bandwidth: usize) -> Self {
        BandedSym { size, bandwidth, data: vec![0.0; size * (bandwidth + 1)] }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bandwidth(&self) -> usize {
        self.bandwidth
    }

    fn slot(&self, i: usize, j: usize) -> usize {
        i * (self.bandwidth + 1) + (j + self.bandwidth - i)
    }

    /// Adds `v` at `(i, j)`; entries above the diagonal are folded onto their mirror.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        assert!(i - j <= self.bandwidth, "entry outside the band");
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bandwidth {
            return 0.0;
        }
        self.data[self.slot(i, j)]
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.size];
        for i in 0..self.size {
            let lo = i.saturating_sub(self.bandwidth);
            for j in lo..i {
                let a = self.data[self.slot(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.data[self.slot(i, i)] * x[i];
        }
        y
    }
}

/// `A = L L^T` with `L` stored in the same banded layout.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    factor: BandedSym,
    /// Squared ratio of the extreme pivots, a cheap condition estimate.
    pub condition: f64,
}

impl BandedCholesky {
    pub fn factor(a: &BandedSym) -> Result<Self> {
        let mut l = a.clone();
        let bw = l.bandwidth;
        let max_diag = (0..a.size).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
        let (mut pmin, mut pmax) = (f64::INFINITY, 0.0f64);
        for j in 0..l.size {
            let lo = j.saturating_sub(bw);
            let mut d = l.data[l.slot(j, j)];
            for k in lo..j {
                let v = l.data[l.slot(j, k)];
                d -= v * v;
            }
            if !(d > 1e-14 * max_diag) {
                return Err(Error::Singular { condition: f64::INFINITY });
            }
            let d = d.sqrt();
            pmin = pmin.min(d);
            pmax = pmax.max(d);
            let s = l.slot(j, j);
            l.data[s] = d;
            let hi = (j + bw + 1).min(l.size);
            for i in (j + 1)..hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut v = l.data[l.slot(i, j)];
                for k in lo_i..j {
                    v -= l.data[l.slot(i, k)] * l.data[l.slot(j, k)];
                }
                let s = l.slot(i, j);
                l.data[s] = v / d;
            }
        }
        let condition = if l.size == 0 { 1.0 } else { (pmax / pmin).powi(2) };
        Ok(BandedCholesky { factor: l, condition })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let bw = l.bandwidth;
        let mut y = b.to_vec();
        for i in 0..l.size {
            let lo = i.saturating_sub(bw);
            let mut v = y[i];
            for k in lo..i {
                v -= l.data[l.slot(i, k)] * y[k];
            }
            y[i] = v / l.data[l.slot(i, i)];
        }
        for i in (0..l.size).rev() {
            let hi = (i + bw + 1).min(l.size);
            let mut v = y[i];
            for k in (i + 1)..hi {
                v -= l.data[l.slot(k, i)] * y[k];
            }
            y[i] = v / l.data[l.slot(i, i)];
        }
        y
    }

    /// Solves with iterative refinement against `a` until the relative residual is below `tol`.
    pub fn solve_refined(&self, a: &BandedSym, b: &[f64], tol: f64) -> (Vec<f64>, f64) {
        let bn = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut x = self.solve(b);
        let mut rel = 0.0;
        for _ in 0..4 {
            let ax = a.mul(&x);
            let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            rel = if bn > 0.0 { rn / bn } else { rn };
            if rel <= tol {
                break;
            }
            let dx = self.solve(&r);
            x.iter_mut().zip(&dx).for_each(|(p, q)| *p += q);
        }
        (x, rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tridiagonal_solve() {
        let n = 50;
        let mut a = BandedSym::zeros(n, 1);
        for i in 0..n {
            a.add(i, i, 2.0);
            if i > 0 {
                a.add(i, i - 1, -1.0);
            }
        }
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let b = a.mul(&x);
        let c = BandedCholesky::factor(&a).unwrap();
        let (y, rel) = c.solve_refined(&a, &b, 1e-12);
        assert!(rel <= 1e-12);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_is_singular() {
        let mut a = BandedSym::zeros(2, 1);
        a.add(0, 0, 1.0);
        a.add(1, 1, 1.0);
        a.add(1, 0, 2.0);
        assert!(matches!(BandedCholesky::factor(&a), Err(Error::Singular { .. })));
    }
}
