//! Explicit solutions and counterexamples used as oracles.

use crate::error::{Error, Result};
use crate::grid::{GridFunction, Lattice};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, x);
                for k in 2..=order {
                    let q2 = ((2 * k - 1) as f64 * x * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = order as f64 * (x * q1 - q0) / (x * x - 1.0);
                weights[i] = 2.0 / ((1.0 - x * x) * dq * dq);
                break;
            }
        }
        nodes[i] = x;
    }
    (nodes, weights)
}

/// Composite Gauss-Legendre integral of `g` over `[a, b]`.
fn integrate(g: &dyn Fn(f64) -> f64, a: f64, b: f64, panels: usize, rule: &(Vec<f64>, Vec<f64>)) -> f64 {
    if b <= a {
        return 0.0;
    }
    let w = (b - a) / panels as f64;
    let mut s = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * w;
        for (x, wt) in rule.0.iter().zip(&rule.1) {
            s += wt * g(lo + 0.5 * w * (x + 1.0));
        }
    }
    0.5 * w * s
}

/// The solution of `D_22 u = f` on the unit disc vanishing on the boundary, chord by chord:
/// `w(x1, x2) = int_{-c}^{x2} (x2 - s) f(x1, s) ds` with `c = sqrt(1 - x1^2)`, and
/// `u = w - v` where `v` is the affine-in-`x2` interpolant of `w` at the chord endpoints.
pub fn disc_explicit_solution(f: &(dyn Fn(&[f64]) -> f64 + Sync), cells: usize) -> Result<GridFunction> {
    if cells < 4 {
        return Err(Error::Precondition(format!("{cells} cells cannot resolve the disc chords")));
    }
    let l = Lattice::disc(cells);
    Ok(disc_explicit_on(f, &l))
}

/// Same as [`disc_explicit_solution`] on a given disc lattice.
pub fn disc_explicit_on(f: &(dyn Fn(&[f64]) -> f64 + Sync), l: &Lattice) -> GridFunction {
    let rule = gauss_legendre(8);
    let flags = l.mask_flags();
    let vals: Vec<f64> = (0..l.len())
        .map(|k| {
            if !flags[k] {
                return 0.0;
            }
            let x = l.position(k);
            let c = (1.0 - x[0] * x[0]).max(0.0).sqrt();
            if c == 0.0 {
                return 0.0;
            }
            let w_at = |t: f64| integrate(&|s: f64| (t - s) * f(&[x[0], s]), -c, t, 8, &rule);
            let top = w_at(c);
            let v = x[1] / (2.0 * c) * top + 0.5 * top;
            w_at(x[1]) - v
        })
        .collect();
    GridFunction::from_values(l.clone(), 1, vals).expect("layout")
}

/// Rationals of `[0, 1]` in Stern-Brocot order: `0, 1`, then the mediants level by level, left to right.
pub fn stern_brocot(count: usize) -> Vec<(u64, u64)> {
    let mut out = vec![(0, 1), (1, 1)];
    let mut row = vec![(0u64, 1u64), (1, 1)];
    while out.len() < count {
        let mut next = Vec::with_capacity(2 * row.len());
        for w in row.windows(2) {
            next.push(w[0]);
            let m = (w[0].0 + w[1].0, w[0].1 + w[1].1);
            next.push(m);
            out.push(m);
        }
        next.push(*row.last().unwrap());
        row = next;
    }
    out.truncate(count);
    out
}

/// Removed open intervals `(r_j - 3^-j, r_j + 3^-j)`, `j = 1..=depth`.
pub fn fat_cantor_gaps(depth: usize) -> Vec<(f64, f64)> {
    stern_brocot(depth)
        .into_iter()
        .enumerate()
        .map(|(j, (p, q))| {
            let r = p as f64 / q as f64;
            let d = 3f64.powi(-(j as i32 + 1));
            (r - d, r + d)
        })
        .collect()
}

/// Lebesgue measure of the truncated set, from the union of its gaps clipped to `[0, 1]`.
pub fn fat_cantor_measure(depth: usize) -> f64 {
    let mut gaps: Vec<(f64, f64)> = fat_cantor_gaps(depth).into_iter().map(|(a, b)| (a.max(0.0), b.min(1.0))).collect();
    gaps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut removed = 0.0;
    let mut cur: Option<(f64, f64)> = None;
    for (a, b) in gaps {
        cur = match cur {
            Some((s, e)) if a <= e => Some((s, e.max(b))),
            Some((s, e)) => {
                removed += e - s;
                Some((a, b))
            }
            None => Some((a, b)),
        };
    }
    if let Some((s, e)) = cur {
        removed += e - s;
    }
    1.0 - removed
}

/// Indicator of the truncated fat Cantor set on `cells` cells of `[0, 1]`.
pub fn fat_cantor_indicator(depth: usize, cells: usize) -> Result<GridFunction> {
    if depth == 0 {
        return Err(Error::Precondition("depth must be at least 1".into()));
    }
    let gaps = fat_cantor_gaps(depth);
    let l = Lattice::interval(cells, 0.0, 1.0);
    Ok(GridFunction::from_fn(l, 1, |x| vec![if gaps.iter().any(|(a, b)| x[0] > *a && x[0] < *b) { 0.0 } else { 1.0 }]))
}

/// Triangle wave with period `1 / k`, slopes `+-1` and peak `1 / (2k)`.
pub fn saw(k: usize, t: f64) -> f64 {
    let kf = k as f64;
    (t - (t * kf).round() / kf).abs()
}

/// `u(x) = M (saw_k(x1), saw_k(x2))` on `[0, 1]^2`; off the fold lines `Du = diag(+-M, +-M)`.
pub fn sawtooth_map(m: f64, k: usize, cells: usize) -> Result<GridFunction> {
    if k == 0 || !(m > 0.0) {
        return Err(Error::Precondition("sawtooth needs k >= 1 and M > 0".into()));
    }
    Ok(GridFunction::from_fn(Lattice::unit_square(cells), 2, |x| vec![m * saw(k, x[0]), m * saw(k, x[1])]))
}

/// Whether the open segment `[t, t + reach]` meets a fold of `saw_k`.
pub fn crosses_fold(k: usize, t: f64, reach: f64) -> bool {
    let p = 2.0 * k as f64;
    let a = (t * p + 1e-9).floor();
    let b = ((t + reach) * p - 1e-9).floor();
    b > a
}

/// `sin(mu x) / mu` on `cells` cells of `[0, length]`.
pub fn oscillation_example(mu: f64, length: f64, cells: usize) -> Result<GridFunction> {
    if !(mu >= 2.0 * std::f64::consts::PI / length) {
        return Err(Error::Precondition(format!("mu = {mu} must be at least 2 pi / length")));
    }
    Ok(GridFunction::from_fn(Lattice::interval(cells, 0.0, length), 1, |x| vec![(mu * x[0]).sin() / mu]))
}

/// `u(x) = sin(x1) x2 eta` on `[0, 1]^2` and its gradient.
pub fn smooth_example(eta: &[f64], cells: usize) -> (GridFunction, GridFunction) {
    let l = Lattice::unit_square(cells);
    let e = eta.to_vec();
    let u = GridFunction::from_fn(l.clone(), e.len(), |x| e.iter().map(|v| v * x[0].sin() * x[1]).collect());
    let e2 = eta.to_vec();
    let du = GridFunction::from_fn(l, 2 * e2.len(), |x| e2.iter().flat_map(|v| [v * x[0].cos() * x[1], v * x[0].sin()]).collect());
    (u, du)
}

/// A check expected to pass or fail on a case.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ExpectedCheck {
    pub check: String,
    pub pass: bool,
    pub note: String,
}

/// A named case with its grids and the checks it is meant to exercise.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReferenceCase {
    pub name: String,
    pub parameters: serde_json::Value,
    pub expected: Vec<ExpectedCheck>,
    #[serde(skip)]
    pub fields: Vec<(String, GridFunction)>,
}

fn expect(check: &str, pass: bool, note: &str) -> ExpectedCheck {
    ExpectedCheck { check: check.into(), pass, note: note.into() }
}

impl ReferenceCase {
    pub fn disc(rhs: &str, cells: usize) -> Result<Self> {
        let f: Box<dyn Fn(&[f64]) -> f64 + Sync> = match rhs {
            "one" => Box::new(|_| 1.0),
            "x2" => Box::new(|x| x[1]),
            "zero" => Box::new(|_| 0.0),
            other => return Err(Error::Parse(format!("unknown disc right-hand side {other}; use one, x2 or zero"))),
        };
        let u = disc_explicit_solution(&*f, cells)?;
        let fg = GridFunction::from_fn(u.lattice().clone(), 1, |x| vec![f(x)]);
        Ok(ReferenceCase {
            name: "disc".into(),
            parameters: serde_json::json!({"rhs": rhs, "cells": cells}),
            expected: vec![expect("solve-linear", true, "matches the degenerate solve within 5% relative L2")],
            fields: vec![("u".into(), u), ("f".into(), fg)],
        })
    }

    pub fn fat_cantor(depth: usize, cells: usize) -> Result<Self> {
        let u = fat_cantor_indicator(depth, cells)?;
        Ok(ReferenceCase {
            name: "fat-cantor".into(),
            parameters: serde_json::json!({"depth": depth, "cells": cells, "measure": fat_cantor_measure(depth)}),
            expected: vec![
                expect("diffuse", true, "the diffuse gradient of u + (-u) is the Dirac mass at 0"),
                expect("infinity-mass", false, "cells of K away from the gaps see zero quotients, not mass at infinity"),
            ],
            fields: vec![("u".into(), u)],
        })
    }

    pub fn sawtooth(m: f64, k: usize, cells: usize) -> Result<Self> {
        let u = sawtooth_map(m, k, cells)?;
        Ok(ReferenceCase {
            name: "sawtooth".into(),
            parameters: serde_json::json!({"M": m, "k": k, "cells": cells}),
            expected: vec![
                expect("check:infinity-laplace", true, "pairing residual decreases under refinement; pass r_inf of about 8 M for both orders so genuine slopes are not cut off"),
                expect("check:eikonal", true, "|Du|^2 = 2 M^2 off the folds; fold cells add a mean residual of order k M^2 h, so use c_disc of about 12 k M^2"),
            ],
            fields: vec![("u".into(), u)],
        })
    }

    pub fn oscillation(mu: f64, cells: usize) -> Result<Self> {
        let u = oscillation_example(mu, 1.0, cells)?;
        Ok(ReferenceCase {
            name: "oscillation".into(),
            parameters: serde_json::json!({"mu": mu, "cells": cells}),
            expected: vec![expect("diffuse", true, "first quotients lie in [-1, 1]")],
            fields: vec![("u".into(), u)],
        })
    }

    pub fn smooth(cells: usize) -> Self {
        let (u, du) = smooth_example(&[1.0], cells);
        ReferenceCase {
            name: "smooth".into(),
            parameters: serde_json::json!({"cells": cells}),
            expected: vec![expect("diffuse", true, "diffuse gradient concentrates at Du")],
            fields: vec![("u".into(), u), ("du".into(), du)],
        }
    }

    /// Writes `<name>.<field>.grid` files and `<name>.json` into `dir`.
    pub fn export(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        for (field, g) in &self.fields {
            let p = dir.join(format!("{}.{field}.grid", self.name));
            g.save(&p)?;
            out.push(p);
        }
        let p = dir.join(format!("{}.json", self.name));
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n")?;
        out.push(p);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_is_exact_for_polynomials() {
        let rule = gauss_legendre(8);
        let v = integrate(&|x| x.powi(7) + x * x, -1.0, 2.0, 3, &rule);
        assert!((v - (255.0 / 8.0 + 3.0)).abs() < 1e-12);
    }

    #[test]
    fn disc_closed_forms() {
        let u = disc_explicit_solution(&|_| 1.0, 32).unwrap();
        let l = u.lattice().clone();
        for k in 0..l.len() {
            if l.in_mask(k) {
                let x = l.position(k);
                assert!((u.value(k)[0] - 0.5 * (x[1] * x[1] - (1.0 - x[0] * x[0]))).abs() < 1e-12);
            }
        }
        let u = disc_explicit_solution(&|x| x[1], 32).unwrap();
        for k in 0..l.len() {
            if l.in_mask(k) {
                let x = l.position(k);
                assert!((u.value(k)[0] - (x[1].powi(3) - x[1] * (1.0 - x[0] * x[0])) / 6.0).abs() < 1e-12);
            }
        }
        assert_eq!(disc_explicit_solution(&|_| 0.0, 16).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn stern_brocot_order() {
        assert_eq!(stern_brocot(7), vec![(0, 1), (1, 1), (1, 2), (1, 3), (2, 3), (1, 4), (2, 5)]);
    }

    #[test]
    fn fat_cantor_depth_one_and_measure() {
        let u = fat_cantor_indicator(1, 90).unwrap();
        // only the gap (-1/3, 1/3) around r_1 = 0
        for k in 0..u.lattice().len() {
            let x = u.lattice().position(k)[0];
            assert_eq!(u.value(k)[0], if x < 1.0 / 3.0 - 1e-12 { 0.0 } else { 1.0 }, "x = {x}");
        }
        let m = fat_cantor_measure(8);
        assert!(m > 0.0 && m < 1.0, "{m}");
        assert!(m >= 1.0 - (1..=8).map(|j| 2.0 * 3f64.powi(-j)).sum::<f64>());
    }

    #[test]
    fn sawtooth_gradient_off_folds() {
        let (m, k, cells) = (2.0, 4, 64);
        let u = sawtooth_map(m, k, cells).unwrap();
        let h = 1.0 / cells as f64;
        let l = u.lattice().clone();
        let mut checked = 0;
        for node in 0..l.len() {
            let x = l.position(node);
            if x[0] + h > 1.0 || x[1] + h > 1.0 || crosses_fold(k, x[0], h) || crosses_fold(k, x[1], h) {
                continue;
            }
            let right = l.neighbor(node, 0, 1).unwrap();
            let up = l.neighbor(node, 1, 1).unwrap();
            let d = [
                (u.value(right)[0] - u.value(node)[0]) / h,
                (u.value(up)[0] - u.value(node)[0]) / h,
                (u.value(right)[1] - u.value(node)[1]) / h,
                (u.value(up)[1] - u.value(node)[1]) / h,
            ];
            let sq: f64 = d.iter().map(|v| v * v).sum();
            let det = d[0] * d[3] - d[1] * d[2];
            assert!((sq - 2.0 * m * m).abs() < 1e-9 && (det.abs() - m * m).abs() < 1e-9);
            checked += 1;
        }
        assert!(checked > l.len() / 2);
    }

    #[test]
    fn oscillation_is_small() {
        let u = oscillation_example(200.0, 1.0, 100).unwrap();
        assert!(u.max_abs() <= 1.0 / 200.0 + 1e-15);
        assert!(oscillation_example(1.0, 1.0, 10).is_err());
    }
}
