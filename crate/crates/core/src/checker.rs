//! Verification of D-solutions through several equivalent residual characterizations.
//!
//! A check runs a sequence of windows from coarse to fine. For every window and every interior
//! cell it builds the product diffuse jet and evaluates the residual `F(x, u, J) - f(x)` in five
//! ways: pairing against compactly supported test functions, supremum over the reduced support,
//! integral against the jet measure, residual of cut-off quotients, and distance of cut-off
//! quotients to the zero set.

use crate::error::{Error, Result};
use crate::frames::{standard_jet, Frame, HSchedule, Window};
use crate::grid::GridFunction;
use crate::linalg::norm;
use crate::system::CoefficientSystem;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const PAIRING: &str = "pairing";
pub const SUPPORT: &str = "support";
pub const INTEGRAL: &str = "integral";
pub const CUTOFF: &str = "cutoff";
pub const DISTANCE: &str = "distance";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckConfig {
    /// Radii for the pairing cut-off, the cut-off quotients and the distance form.
    pub r_list: Vec<f64>,
    /// Per-order compactification radius; defaults to `1e6` times the coarsest quotient size.
    pub r_inf: Option<Vec<f64>>,
    /// Discretisation constant in the pass tolerance `max(c_disc h_finest, 1e-6 scale)`.
    pub c_disc: f64,
    /// Relative slack allowed when testing that residuals do not grow under refinement.
    pub trend_slack: f64,
    /// Keep per-cell residual fields of the finest window.
    pub keep_fields: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig { r_list: vec![10.0], r_inf: None, c_disc: 10.0, trend_slack: 0.1, keep_fields: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WindowSummary {
    pub width: usize,
    pub coarsest_step: f64,
    pub finest_step: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Characterization {
    pub name: String,
    pub radius: Option<f64>,
    /// Cell-averaged residual per window, coarse to fine.
    pub mean: Vec<f64>,
    /// Largest cell residual per window.
    pub max: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    /// Residuals never grow by more than the trend slack from one window to the next.
    pub non_increasing: bool,
    #[serde(skip)]
    pub field: Option<GridFunction>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckReport {
    pub system: String,
    pub windows: Vec<WindowSummary>,
    pub r_list: Vec<f64>,
    pub r_inf: Vec<f64>,
    pub interior_cells: usize,
    pub scale: f64,
    pub tolerance: f64,
    pub lipschitz: f64,
    pub characterizations: Vec<Characterization>,
    pub skipped: Vec<String>,
    /// All characterizations pass.
    pub verdict: bool,
    /// All characterizations reach the same verdict.
    pub agreement: bool,
}

impl CheckReport {
    pub fn get(&self, name: &str) -> Vec<&Characterization> {
        self.characterizations.iter().filter(|c| c.name == name).collect()
    }

    /// Verdict of one characterization family (all radii must pass).
    pub fn verdict_of(&self, name: &str) -> Option<bool> {
        let c = self.get(name);
        if c.is_empty() {
            None
        } else {
            Some(c.iter().all(|c| c.pass))
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Applies the cut-off of a jet field at radius `radius`: values within the ball are kept,
/// the others are replaced by an oracle zero of `F(x, u(x), .) - f(x)` inside the ball.
pub fn cutoff(
    jet: &GridFunction,
    system: &CoefficientSystem,
    u: &GridFunction,
    f: Option<&GridFunction>,
    radius: f64,
) -> Result<GridFunction> {
    let l = jet.lattice();
    let m = system.out_dim();
    let mut out = jet.clone();
    for k in 0..l.len() {
        let v = jet.value(k);
        if norm(v) <= radius {
            continue;
        }
        let target = f.map(|g| g.value(k).to_vec()).unwrap_or_else(|| vec![0.0; m]);
        let zero = if system.is_affine() && target.iter().all(|t| *t == 0.0) && system.evaluate(&l.position(k), u.value(k), &vec![0.0; v.len()]).iter().all(|r| *r == 0.0) {
            vec![0.0; v.len()]
        } else {
            let oracle = system.oracle().ok_or_else(|| Error::Oracle(format!("system {} has no zero-set oracle", system.name())))?;
            oracle
                .nearest(&l.position(k), u.value(k), &target, v, radius)
                .ok_or_else(|| Error::Oracle(format!("no zero inside the ball of radius {radius} at node {k}")))?
        };
        out.value_mut(k).copy_from_slice(&zero);
    }
    Ok(out)
}

struct CellResult {
    pairing: Vec<f64>,
    support: f64,
    integral: f64,
    cutoff: Vec<Option<f64>>,
    distance: Vec<Option<f64>>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn bump(center: &[f64], radius: f64, v: &[f64]) -> f64 {
    let s = 1.0 - dist(center, v).powi(2) / (radius * radius);
    if s > 0.0 {
        s * s
    } else {
        0.0
    }
}

/// Largest pairing of the residual against bumps at the origin and at atom clusters, each
/// multiplied by a cut-off equal to one on the ball of radius `radius` and zero outside twice it.
fn pairing_residual(atoms: &[(Vec<f64>, f64, Vec<f64>)], radius: f64) -> f64 {
    let cut = |v: &[f64]| (2.0 - norm(v) / radius).clamp(0.0, 1.0);
    let mut centers: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    let join = 0.01 * radius;
    for (i, (j, _, _)) in atoms.iter().enumerate() {
        if norm(j) > 2.0 * radius {
            continue;
        }
        match centers.iter_mut().find(|(c, _)| dist(c, j) <= join) {
            Some((_, members)) => members.push(i),
            None => centers.push((j.clone(), vec![i])),
        }
    }
    let len = atoms.first().map(|a| a.0.len()).unwrap_or(0);
    let mut witnesses: Vec<(Vec<f64>, f64)> = [0.25, 0.5, 1.0].iter().map(|s| (vec![0.0; len], s * radius)).collect();
    for (_, members) in &centers {
        let mut centroid = vec![0.0; len];
        for &i in members {
            centroid.iter_mut().zip(&atoms[i].0).for_each(|(a, b)| *a += b / members.len() as f64);
        }
        let spread = members.iter().map(|&i| dist(&centroid, &atoms[i].0)).fold(0.0, f64::max).max(join);
        for s in [1.0, 2.0, 4.0] {
            witnesses.push((centroid.clone(), s * spread));
        }
    }
    let m = atoms.first().map(|a| a.2.len()).unwrap_or(0);
    let mut best: f64 = 0.0;
    for (c, r) in &witnesses {
        let mut acc = vec![0.0; m];
        for (j, w, res) in atoms {
            let phi = bump(c, *r, j) * cut(j);
            if phi != 0.0 {
                acc.iter_mut().zip(res).for_each(|(a, b)| *a += w * phi * b);
            }
        }
        best = best.max(norm(&acc));
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

fn concat(jets: &[GridFunction], k: usize) -> Vec<f64> {
    jets.iter().flat_map(|g| g.value(k).iter().copied()).collect()
}

/// Runs every characterization over the windows, coarse to fine.
pub fn check_dsolution(
    u: &GridFunction,
    system: &CoefficientSystem,
    frame: &Frame,
    windows: &[Window],
    config: &CheckConfig,
    f: Option<&GridFunction>,
) -> Result<CheckReport> {
    let l = u.lattice();
    let lay = system.layout();
    let p = system.order();
    let m = system.out_dim();
    if u.components() != lay.range_dim || l.dim() != lay.domain_dim {
        return Err(Error::Dimension(format!(
            "system {} acts on maps R^{} -> R^{}, got R^{} -> R^{}",
            system.name(),
            lay.domain_dim,
            lay.range_dim,
            l.dim(),
            u.components()
        )));
    }
    if frame.range_dim() != lay.range_dim || frame.domain_dim() != lay.domain_dim {
        return Err(Error::Dimension("frame does not match the system".into()));
    }
    if let Some(g) = f {
        if g.components() != m || g.lattice() != l {
            return Err(Error::Dimension(format!("right-hand side must have {m} components on the same lattice")));
        }
    }
    if windows.is_empty() {
        return Err(Error::Schedule("no windows".into()));
    }
    for w in windows {
        w.validate(l.min_spacing())?;
        if w.order() != p {
            return Err(Error::Schedule(format!("window of order {} for a system of order {p}", w.order())));
        }
    }
    if config.r_list.is_empty() || config.r_list.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Precondition("radii must be positive".into()));
    }
    let r_inf = match &config.r_inf {
        Some(v) if v.len() == p => v.clone(),
        Some(v) => return Err(Error::Dimension(format!("{} compactification radii for order {p}", v.len()))),
        None => {
            let coarse = &windows[0];
            let mut out = Vec::with_capacity(p);
            for q in 1..=p {
                let g = crate::frames::difference_quotient(u, frame, &coarse.0[0].row(q))?;
                let mx = (0..l.len()).map(|k| norm(g.value(k))).fold(0.0, f64::max);
                out.push(if mx > 0.0 { 1e6 * mx } else { 1e6 });
            }
            out
        }
    };

    let reach = windows.iter().map(|w| w.reach()).fold(0.0, f64::max);
    let reach_nodes: Vec<usize> = (0..l.dim()).map(|a| (reach / l.spacing[a]).ceil() as usize + 1).collect();
    let interior = l.interior_nodes(&reach_nodes);
    if interior.is_empty() {
        return Err(Error::Precondition("no interior cells for the stencil reach".into()));
    }
    let target = |k: usize| f.map(|g| g.value(k).to_vec()).unwrap_or_else(|| vec![0.0; m]);
    let jet_len = lay.len();

    let scale = {
        let fs = median(interior.iter().map(|&k| norm(&target(k))).collect());
        let f0 = median(
            interior.iter().map(|&k| norm(&system.evaluate(&l.position(k), u.value(k), &vec![0.0; jet_len]))).collect(),
        );
        if fs + f0 > 0.0 {
            fs + f0
        } else {
            1.0
        }
    };
    let h_finest = windows.last().map(|w| w.finest_step()).unwrap_or(0.0);
    let tol = (config.c_disc * h_finest).max(1e-6 * scale);

    let has_oracle = system.oracle().is_some();
    let mut skipped = Vec::new();
    if !has_oracle {
        skipped.push(format!("{CUTOFF}: system has no zero-set oracle"));
        skipped.push(format!("{DISTANCE}: system has no zero-set oracle"));
    }
    let nr = config.r_list.len();

    let mut per_window: Vec<Vec<CellResult>> = Vec::with_capacity(windows.len());
    let mut finest_jets: Vec<Vec<GridFunction>> = Vec::new();
    for w in windows {
        let jets: Vec<Vec<GridFunction>> = w.0.iter().map(|s| standard_jet(u, frame, s)).collect::<Result<_>>()?;
        let width = jets.len();
        let results: Vec<CellResult> = interior
            .par_iter()
            .map(|&k| {
                let x = l.position(k);
                let uk = u.value(k);
                let tk = target(k);
                let residual = |j: &[f64]| -> Vec<f64> {
                    system.evaluate(&x, uk, j).iter().zip(&tk).map(|(a, b)| a - b).collect()
                };
                // per order, per schedule: value or None at infinity
                let factors: Vec<Vec<Option<&[f64]>>> = (0..p)
                    .map(|q| {
                        jets.iter()
                            .map(|js| {
                                let v = js[q].value(k);
                                if norm(v) > r_inf[q] {
                                    None
                                } else {
                                    Some(v)
                                }
                            })
                            .collect()
                    })
                    .collect();
                let mut atoms: Vec<(Vec<f64>, f64, Vec<f64>)> = Vec::new();
                let total = width.pow(p as u32);
                let weight = 1.0 / total as f64;
                'combo: for c in 0..total {
                    let mut j = Vec::with_capacity(jet_len);
                    let mut r = c;
                    for fq in factors.iter() {
                        match fq[r % width] {
                            Some(v) => j.extend_from_slice(v),
                            None => continue 'combo,
                        }
                        r /= width;
                    }
                    let res = residual(&j);
                    atoms.push((j, weight, res));
                }
                let support = atoms.iter().map(|a| norm(&a.2)).fold(0.0, f64::max);
                let integral = atoms.iter().map(|a| a.1 * norm(&a.2)).sum();
                let pairing = config.r_list.iter().map(|&rad| pairing_residual(&atoms, rad)).collect();
                let mut cut = vec![None; nr];
                let mut distance = vec![None; nr];
                if has_oracle {
                    let oracle = system.oracle().unwrap();
                    for (ri, &rad) in config.r_list.iter().enumerate() {
                        let mut cs = 0.0;
                        let mut ds = 0.0;
                        let mut ok = true;
                        for js in &jets {
                            let j = concat(js, k);
                            let within = norm(&j) <= rad;
                            let cut_j = if within {
                                Some(j.clone())
                            } else {
                                oracle.nearest(&x, uk, &tk, &j, rad)
                            };
                            let Some(cj) = cut_j else {
                                ok = false;
                                break;
                            };
                            cs += norm(&residual(&cj));
                            match oracle.nearest(&x, uk, &tk, &cj, rad) {
                                Some(z) => ds += dist(&cj, &z),
                                None => {
                                    ok = false;
                                    break;
                                }
                            }
                        }
                        if ok {
                            cut[ri] = Some(cs / width as f64);
                            distance[ri] = Some(ds / width as f64);
                        }
                    }
                }
                CellResult { pairing, support, integral, cutoff: cut, distance }
            })
            .collect();
        per_window.push(results);
        finest_jets = jets;
    }

    // Lipschitz constant of the system in the jet near the finest quotients, for the distance tolerance.
    let lipschitz = {
        let step = (interior.len() / 64).max(1);
        let samples: Vec<f64> = interior
            .iter()
            .step_by(step)
            .map(|&k| {
                let j = finest_jets.last().map(|js| concat(js, k)).unwrap_or_else(|| vec![0.0; jet_len]);
                let jac = system.jet_jacobian(&l.position(k), u.value(k), &j);
                nalgebra::SVD::new(jac, false, false).singular_values.max()
            })
            .collect();
        let lip = median(samples);
        if lip > 0.0 && lip.is_finite() {
            lip
        } else {
            1.0
        }
    };

    let mut chars = Vec::new();
    let push = |chars: &mut Vec<Characterization>, name: &str, radius: Option<f64>, tolerance: f64, get: &dyn Fn(&CellResult) -> Option<f64>| -> bool {
        let mut mean = Vec::new();
        let mut max = Vec::new();
        for res in &per_window {
            let vals: Vec<Option<f64>> = res.iter().map(get).collect();
            if vals.iter().any(|v| v.is_none()) {
                return false;
            }
            let vals: Vec<f64> = vals.into_iter().flatten().collect();
            mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
            max.push(vals.iter().copied().fold(0.0, f64::max));
        }
        // growth far below the pass tolerance is round-off, not a trend
        let floor = (1e-6 * tolerance).max(1e-12 * scale);
        let non_increasing = mean.windows(2).all(|w| w[1] <= (1.0 + config.trend_slack) * w[0] + floor);
        let pass = *mean.last().unwrap() <= tolerance;
        let field = if config.keep_fields {
            let mut g = GridFunction::zeros(l.clone(), 1);
            for (i, &k) in interior.iter().enumerate() {
                g.value_mut(k)[0] = get(&per_window.last().unwrap()[i]).unwrap_or(0.0);
            }
            Some(g)
        } else {
            None
        };
        chars.push(Characterization { name: name.into(), radius, mean, max, tolerance, pass, non_increasing, field });
        true
    };
    for (ri, &rad) in config.r_list.iter().enumerate() {
        push(&mut chars, PAIRING, Some(rad), tol, &|c| Some(c.pairing[ri]));
    }
    push(&mut chars, SUPPORT, None, tol, &|c| Some(c.support));
    push(&mut chars, INTEGRAL, None, tol, &|c| Some(c.integral));
    if has_oracle {
        for (ri, &rad) in config.r_list.iter().enumerate() {
            if !push(&mut chars, CUTOFF, Some(rad), tol, &|c| c.cutoff[ri]) {
                skipped.push(format!("{CUTOFF}[R={rad}]: no zero of the system inside the ball"));
            }
            if !push(&mut chars, DISTANCE, Some(rad), tol / lipschitz, &|c| c.distance[ri]) {
                skipped.push(format!("{DISTANCE}[R={rad}]: no zero of the system inside the ball"));
            }
        }
    }
    let verdict = chars.iter().all(|c| c.pass);
    let agreement = chars.iter().all(|c| c.pass == verdict);
    Ok(CheckReport {
        system: system.name().into(),
        windows: windows
            .iter()
            .map(|w| WindowSummary { width: w.0.len(), coarsest_step: w.coarsest_step(), finest_step: w.finest_step() })
            .collect(),
        r_list: config.r_list.clone(),
        r_inf,
        interior_cells: interior.len(),
        scale,
        tolerance: tol,
        lipschitz,
        characterizations: chars,
        skipped,
        verdict,
        agreement,
    })
}

/// Families of refining windows probing different ways of sending the steps to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    /// Steps `2^k` lattice spacings.
    Dyadic,
    /// Steps `3^k` lattice spacings.
    Geometric,
    /// Random off-lattice steps, sorted to decrease.
    Randomized,
}

/// `count` windows of `width` schedules each, coarse to fine; the finest step is the lattice spacing.
pub fn schedule_family(family: ScheduleFamily, spacing: f64, order: usize, width: usize, count: usize, seed: u64) -> Vec<Window> {
    let base = match family {
        ScheduleFamily::Dyadic => 2.0f64,
        ScheduleFamily::Geometric => 3.0,
        ScheduleFamily::Randomized => 2.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|c| {
            let top = (count - 1 - c) + (width - 1);
            let steps: Vec<f64> = (0..width).map(|m| spacing * base.powi((top - m) as i32)).collect();
            Window(
                steps
                    .iter()
                    .enumerate()
                    .map(|(m, &h)| match family {
                        ScheduleFamily::Randomized => {
                            // jitter inside (h, 2h) except the very finest step
                            let jitter = if c + 1 == count && m + 1 == width { 1.0 } else { 1.0 + 0.9 * rng.gen::<f64>() };
                            let hh = (h * jitter).min(if m == 0 { f64::INFINITY } else { steps[m - 1] * 0.999 });
                            HSchedule::uniform(hh, order)
                        }
                        _ => HSchedule::uniform(h, order),
                    })
                    .collect(),
            )
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatteryReport {
    pub reports: Vec<(ScheduleFamily, CheckReport)>,
    /// Family whose finest pairing residual is largest relative to its tolerance.
    pub worst: ScheduleFamily,
    pub verdict: bool,
}

/// Checks against the dyadic, geometric and randomized families and reports the worst case.
pub fn check_battery(
    u: &GridFunction,
    system: &CoefficientSystem,
    frame: &Frame,
    config: &CheckConfig,
    f: Option<&GridFunction>,
    width: usize,
    count: usize,
    seed: u64,
) -> Result<BatteryReport> {
    let spacing = u.lattice().max_spacing();
    let mut reports = Vec::new();
    for fam in [ScheduleFamily::Dyadic, ScheduleFamily::Geometric, ScheduleFamily::Randomized] {
        let w = schedule_family(fam, spacing, system.order(), width, count, seed);
        reports.push((fam, check_dsolution(u, system, frame, &w, config, f)?));
    }
    let badness = |r: &CheckReport| {
        r.characterizations.iter().map(|c| c.mean.last().copied().unwrap_or(0.0) / c.tolerance).fold(0.0, f64::max)
    };
    let worst = reports
        .iter()
        .max_by(|a, b| badness(&a.1).partial_cmp(&badness(&b.1)).unwrap_or(std::cmp::Ordering::Equal))
        .map(|r| r.0)
        .unwrap_or(ScheduleFamily::Dyadic);
    let verdict = reports.iter().all(|r| r.1.verdict);
    Ok(BatteryReport { reports, worst, verdict })
}

/// Strong residual `max |F(x, u, D u, D^2 u) - f|` on cells at least `margin` nodes from the
/// mask boundary, using central differences.
pub fn strong_residual(u: &GridFunction, system: &CoefficientSystem, f: Option<&GridFunction>, margin: usize) -> Result<f64> {
    let l = u.lattice();
    if system.order() > 2 {
        return Err(Error::Precondition("strong residual is available up to order two".into()));
    }
    let grad = u.gradient();
    let hess = u.hessian();
    let interior = l.interior_nodes(&vec![margin; l.dim()]);
    let m = system.out_dim();
    Ok(interior
        .iter()
        .map(|&k| {
            let mut j = grad.value(k).to_vec();
            if system.order() == 2 {
                j.extend_from_slice(hess.value(k));
            }
            let r = system.evaluate(&l.position(k), u.value(k), &j);
            let t = f.map(|g| g.value(k).to_vec()).unwrap_or_else(|| vec![0.0; m]);
            norm(&r.iter().zip(&t).map(|(a, b)| a - b).collect::<Vec<_>>())
        })
        .fold(0.0, f64::max))
}
