//! Fully nonlinear systems `F(x, D^2 u) = f` that are degenerate elliptic relative to a
//! decomposable tensor, and their solution by a contraction on the right-hand side of the
//! linear fibre solver.

use crate::error::{Error, Result};
use crate::grid::GridFunction;
use crate::linalg::norm;
use crate::solver::{FibreData, LinearFibreSolver, SolveReport};
use crate::system::{hessian_system, CoefficientSystem};
use crate::tensor::{Decomposition, EllipticityData, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

type PointFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type MapFn = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// A Lipschitz map from hessians (read through `Xi`) to R^N, with its constant.
#[derive(Clone)]
pub struct Perturbation {
    pub map: Arc<MapFn>,
    pub lipschitz: f64,
}

impl Perturbation {
    pub fn zero(big_n: usize) -> Self {
        Perturbation { map: Arc::new(move |_| vec![0.0; big_n]), lipschitz: 0.0 }
    }

    /// `amplitude * sin(clamp(tr_alpha X / sqrt(n), -pi/2, pi/2))` per component. Each scaled
    /// trace has norm one on its own block and the blocks are disjoint, so the Lipschitz
    /// constant is exactly `amplitude`.
    pub fn clamped_sine(big_n: usize, n: usize, amplitude: f64) -> Self {
        let half = std::f64::consts::FRAC_PI_2;
        let scale = 1.0 / (n as f64).sqrt();
        Perturbation {
            map: Arc::new(move |x: &[f64]| {
                (0..big_n)
                    .map(|a| {
                        let t: f64 = (0..n).map(|i| x[(a * n + i) * n + i]).sum::<f64>() * scale;
                        amplitude * t.clamp(-half, half).sin()
                    })
                    .collect()
            }),
            lipschitz: amplitude.abs(),
        }
    }
}

/// Constants witnessing `|A:Z - A(x)(F(x, X + Z) - F(x, X))| <= B nu |Xi Z| + C |A:Z|`.
#[derive(Clone)]
pub struct EllipticityCertificate {
    pub dec: Decomposition,
    pub nu: f64,
    pub b: f64,
    pub c: f64,
    pub a_of_x: Arc<PointFn>,
}

impl std::fmt::Debug for EllipticityCertificate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EllipticityCertificate").field("nu", &self.nu).field("b", &self.b).field("c", &self.c).finish()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub nu: f64,
    pub b: f64,
    pub c: f64,
    pub kappa: f64,
    pub a_min: f64,
    pub a_max: f64,
}

impl EllipticityCertificate {
    pub fn kappa(&self) -> f64 {
        self.b + self.c
    }

    /// Checks `B + C < 1` and `0 < A(x) < inf` on the masked nodes of a lattice.
    pub fn validate_on(&self, lattice: &crate::grid::Lattice) -> Result<CertificateSummary> {
        if !(self.b >= 0.0 && self.c >= 0.0 && self.kappa() < 1.0) {
            return Err(Error::Certificate(format!("B + C = {} must be below 1", self.kappa())));
        }
        let vals: Vec<f64> = (0..lattice.len()).filter(|&k| lattice.in_mask(k)).map(|k| (self.a_of_x)(&lattice.position(k))).collect();
        let a_min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let a_max = vals.iter().copied().fold(0.0, f64::max);
        if !(a_min > 0.0 && a_max.is_finite()) {
            return Err(Error::Certificate(format!("A(x) ranges over [{a_min}, {a_max}]")));
        }
        Ok(CertificateSummary { nu: self.nu, b: self.b, c: self.c, kappa: self.kappa(), a_min, a_max })
    }

    /// `A(x)` sampled on a lattice.
    pub fn a_field(&self, lattice: &crate::grid::Lattice) -> GridFunction {
        GridFunction::from_fn(lattice.clone(), 1, |x| vec![(self.a_of_x)(x)])
    }
}

/// `F(x, X) = A(x)^{-1} [(1 + gamma) A : X + Sigma g(Xi X)]` with certificate `B = L / nu`, `C = |gamma|`.
pub fn make_nonlinearity(
    dec: &Decomposition,
    a_of_x: Arc<PointFn>,
    gamma: f64,
    g: &Perturbation,
) -> Result<(CoefficientSystem, EllipticityCertificate)> {
    let ell = dec.ellipticity()?;
    let nu = ell.nu;
    if !(nu * gamma.abs() + g.lipschitz < nu) {
        return Err(Error::Precondition(format!("nu |gamma| + L = {} must be below nu = {nu}", nu * gamma.abs() + g.lipschitz)));
    }
    let sys = nonlinearity_unchecked(dec, &ell, a_of_x.clone(), gamma, g);
    let cert = EllipticityCertificate { dec: dec.clone(), nu, b: g.lipschitz / nu, c: gamma.abs(), a_of_x };
    Ok((sys, cert))
}

/// The same formula without the parameter constraint, for probing violations.
pub fn nonlinearity_unchecked(
    dec: &Decomposition,
    ell: &EllipticityData,
    a_of_x: Arc<PointFn>,
    gamma: f64,
    g: &Perturbation,
) -> CoefficientSystem {
    let tensor = dec.reconstruct();
    let (big_n, n) = (dec.range_dim(), dec.domain_dim());
    let xi = ell.xi.clone();
    let sigma = ell.sigma.clone();
    let map = g.map.clone();
    hessian_system("nonlinear", n, big_n, big_n, move |x, h| {
        let ax = a_of_x(x);
        let lin = tensor.apply_hessian_unchecked(h);
        let pert = sigma.project(&map(&xi.project(h)));
        lin.iter().zip(&pert).map(|(l, p)| ((1.0 + gamma) * l + p) / ax).collect()
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EllipticityMargin {
    pub samples: usize,
    /// Smallest `rhs + tol - lhs` seen; negative means a violation.
    pub worst_margin: f64,
    pub violations: usize,
    /// Largest distance of a value of `F` from `Sigma`.
    pub sigma_defect: f64,
    pub pass: bool,
}

/// Samples points, hessians `X` and increments `Z`, some of them small to probe the local
/// Lipschitz behaviour, and tests the degenerate ellipticity inequality.
pub fn check_degenerate_ellipticity(
    system: &CoefficientSystem,
    cert: &EllipticityCertificate,
    points: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<EllipticityMargin> {
    let ell = cert.dec.ellipticity()?;
    let tensor: Tensor4 = cert.dec.reconstruct();
    let (big_n, n) = (cert.dec.range_dim(), cert.dec.domain_dim());
    if points.is_empty() {
        return Err(Error::Precondition("no sample points".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = big_n * n * n;
    let sym = |v: Vec<f64>| crate::frames::symmetrize(big_n, n, 2, &v);
    let u0 = vec![0.0; big_n];
    let jet = |h: &[f64]| {
        let mut j = vec![0.0; big_n * n];
        j.extend_from_slice(h);
        j
    };
    let mut worst = f64::INFINITY;
    let mut violations = 0;
    let mut sigma_defect: f64 = 0.0;
    for s in 0..samples {
        let x = &points[s % points.len()];
        let xs: Vec<f64> = sym((0..len).map(|_| 3.0 * crate::tensor::gaussian(&mut rng)).collect());
        let mag = 10f64.powf(rng.gen_range(-4.0..1.0));
        let zs: Vec<f64> = sym((0..len).map(|_| mag * crate::tensor::gaussian(&mut rng)).collect());
        let xz: Vec<f64> = xs.iter().zip(&zs).map(|(a, b)| a + b).collect();
        let fx = system.evaluate(x, &u0, &jet(&xs));
        let fxz = system.evaluate(x, &u0, &jet(&xz));
        let ax = (cert.a_of_x)(x);
        let az = tensor.apply_hessian_unchecked(&zs);
        let diff: Vec<f64> = az.iter().zip(fxz.iter().zip(&fx)).map(|(a, (p, q))| a - ax * (p - q)).collect();
        let lhs = norm(&diff);
        let rhs = cert.b * cert.nu * norm(&ell.xi.project(&zs)) + cert.c * norm(&az);
        let tol = 1e-10 * (1.0 + norm(&az) + ax * norm(&fxz));
        let margin = rhs + tol - lhs;
        worst = worst.min(margin);
        if margin < 0.0 {
            violations += 1;
        }
        let p = ell.sigma.project(&fx);
        sigma_defect = sigma_defect.max(norm(&p.iter().zip(&fx).map(|(a, b)| a - b).collect::<Vec<_>>()));
    }
    let pass = violations == 0 && sigma_defect <= 1e-8 * (1.0 + worst.abs());
    Ok(EllipticityMargin { samples, worst_margin: worst, violations, sigma_defect, pass })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampanatoConfig {
    pub max_iter: usize,
    /// Stop when `||b_{k+1} - b_k|| <= tol ||f||`.
    pub tol: f64,
    /// Required `||F(., G^2 u) - f|| / ||f||` at the end.
    pub tol_final: f64,
}

impl Default for CampanatoConfig {
    fn default() -> Self {
        CampanatoConfig { max_iter: 60, tol: 1e-8, tol_final: 1e-5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CampanatoLog {
    pub kappa: f64,
    /// `||b_{k+1} - b_k||` per iteration.
    pub steps: Vec<f64>,
    /// Ratio of consecutive steps.
    pub ratios: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub last_linear: Option<SolveReport>,
}

/// Iterates `b <- b - A(x) (F(x, G^2 u(b)) - f)`, where `u(b)` is the linear fibre solution of
/// `A : G^2 u = b`. The map is a contraction with factor `B + C`.
pub fn campanato_solve(
    system: &CoefficientSystem,
    cert: &EllipticityCertificate,
    solver: &LinearFibreSolver,
    f: &GridFunction,
    config: &CampanatoConfig,
) -> Result<(FibreData, CampanatoLog)> {
    let l = solver.lattice();
    cert.validate_on(l)?;
    solver.require_sigma_valued(f)?;
    let big_n = f.components();
    let a = cert.a_field(l);
    let unknown: Vec<bool> = (0..l.len()).map(|k| l.is_unknown(k)).collect();
    let nodes: Vec<usize> = (0..l.len()).filter(|&k| unknown[k]).collect();
    let af = f.map(big_n, |k, v| if unknown[k] { v.iter().map(|x| x * a.value(k)[0]).collect() } else { vec![0.0; big_n] });
    let fnorm = f.l2_norm_on(&nodes).max(f64::MIN_POSITIVE);
    let eval = |fd: &FibreData| -> GridFunction {
        GridFunction::from_values(
            l.clone(),
            big_n,
            (0..l.len())
                .flat_map(|k| {
                    if !unknown[k] {
                        return vec![0.0; big_n];
                    }
                    let mut jet = fd.pi_du.value(k).to_vec();
                    jet.extend_from_slice(fd.xi_d2u.value(k));
                    system.evaluate(&l.position(k), fd.sigma_u.value(k), &jet)
                })
                .collect(),
        )
        .expect("layout")
    };
    let mut log = CampanatoLog { kappa: cert.kappa(), steps: Vec::new(), ratios: Vec::new(), iterations: 0, residual: f64::NAN, last_linear: None };
    let mut b = af.clone();
    let mut growth = 0;
    for it in 0..config.max_iter {
        let (fd, rep) = solver.solve(&b)?;
        log.last_linear = Some(rep);
        let fu = eval(&fd);
        let update = fu.map(big_n, |k, v| v.iter().zip(f.value(k)).map(|(p, q)| a.value(k)[0] * (p - q) * if unknown[k] { 1.0 } else { 0.0 }).collect());
        let step = update.l2_norm_on(&nodes);
        log.iterations = it + 1;
        if let Some(&prev) = log.steps.last() {
            let ratio = if prev > 0.0 { step / prev } else { 0.0 };
            log.ratios.push(ratio);
            growth = if ratio >= 1.0 && step > config.tol * fnorm { growth + 1 } else { 0 };
        }
        log.steps.push(step);
        if step <= config.tol * fnorm {
            let r = fu.sub(f).expect("layout");
            log.residual = r.l2_norm_on(&nodes) / fnorm;
            if log.residual > config.tol_final {
                return Err(Error::NonConvergence(format!("final residual {:e} above {:e}", log.residual, config.tol_final)));
            }
            return Ok((fd, log));
        }
        if growth >= 3 {
            return Err(Error::Certificate(format!("step ratios {:?} stayed at or above 1", &log.ratios[log.ratios.len() - 3..])));
        }
        b = b.sub(&update).expect("layout");
    }
    Err(Error::NonConvergence(format!("no convergence in {} iterations; steps {:?}", config.max_iter, log.steps)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Lattice;
    use crate::solver::DEFAULT_EPS;

    fn points() -> Vec<Vec<f64>> {
        (0..10).map(|k| vec![k as f64 / 9.0, 1.0 - k as f64 / 9.0]).collect()
    }

    fn varying_a() -> Arc<PointFn> {
        Arc::new(|x: &[f64]| 1.0 + 0.5 * x[0])
    }

    #[test]
    fn linear_case_holds_with_zero_constants() {
        let dec = Decomposition::laplacian(1, 2);
        let (sys, cert) = make_nonlinearity(&dec, varying_a(), 0.0, &Perturbation::zero(1)).unwrap();
        assert_eq!(cert.kappa(), 0.0);
        let m = check_degenerate_ellipticity(&sys, &cert, &points(), 500, 1).unwrap();
        assert!(m.pass, "{m:?}");
    }

    #[test]
    fn factory_certificate_and_violation() {
        let dec = Decomposition::laplacian(2, 2);
        let nu = dec.ellipticity().unwrap().nu;
        let (sys, cert) = make_nonlinearity(&dec, varying_a(), 0.2, &Perturbation::clamped_sine(2, 2, 0.3 * nu)).unwrap();
        assert!((cert.kappa() - 0.5).abs() < 1e-12);
        assert!(check_degenerate_ellipticity(&sys, &cert, &points(), 2000, 2).unwrap().pass);
        let ell = dec.ellipticity().unwrap();
        let strong = nonlinearity_unchecked(&dec, &ell, varying_a(), 0.2, &Perturbation::clamped_sine(2, 2, 2.0 * nu));
        let m = check_degenerate_ellipticity(&strong, &cert, &points(), 2000, 2).unwrap();
        assert!(m.violations > 0);
        assert!(make_nonlinearity(&dec, varying_a(), 0.2, &Perturbation::clamped_sine(2, 2, 2.0 * nu)).is_err());
    }

    #[test]
    fn constant_along_xi_complement() {
        // Xi is spanned by e2 x e2 directions only
        let dec = Decomposition::new(1, 2, vec![nalgebra::DMatrix::identity(1, 1)], vec![nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.0, 1.0]))]).unwrap();
        let nu = dec.ellipticity().unwrap().nu;
        let (sys, _) = make_nonlinearity(&dec, varying_a(), 0.1, &Perturbation::clamped_sine(1, 2, 0.2 * nu)).unwrap();
        let x = [0.3, 0.4];
        let base = [0.0, 0.0, 1.0, 0.2, 0.2, -0.7];
        let shifted = [0.0, 0.0, 5.0, -0.8, -0.8, -0.7];
        assert_eq!(sys.evaluate(&x, &[0.0], &base), sys.evaluate(&x, &[0.0], &shifted));
    }

    #[test]
    fn linear_converges_in_one_step_and_nonlinear_contracts() {
        let l = Lattice::unit_square(16);
        let dec = Decomposition::laplacian(1, 2);
        let solver = LinearFibreSolver::new(&dec, &l, &DEFAULT_EPS).unwrap();
        let f = GridFunction::from_fn(l.clone(), 1, |x| vec![1.0 + x[0] * x[1]]);
        let (sys, cert) = make_nonlinearity(&dec, varying_a(), 0.0, &Perturbation::zero(1)).unwrap();
        let cfg = CampanatoConfig { tol: 1e-6, ..Default::default() };
        let (_, log) = campanato_solve(&sys, &cert, &solver, &f, &cfg).unwrap();
        assert!(log.iterations <= 2, "{:?}", log.steps);

        let nu = dec.ellipticity().unwrap().nu;
        let (sys, cert) = make_nonlinearity(&dec, varying_a(), 0.2, &Perturbation::clamped_sine(1, 2, 0.3 * nu)).unwrap();
        let (_, log) = campanato_solve(&sys, &cert, &solver, &f, &CampanatoConfig::default()).unwrap();
        assert!(log.ratios.iter().all(|r| *r <= 0.6), "{:?}", log.ratios);
    }

    #[test]
    fn zero_data_is_a_fixed_point() {
        let l = Lattice::unit_square(8);
        let dec = Decomposition::laplacian(1, 2);
        let solver = LinearFibreSolver::new(&dec, &l, &DEFAULT_EPS).unwrap();
        let (sys, cert) = make_nonlinearity(&dec, varying_a(), 0.2, &Perturbation::clamped_sine(1, 2, 0.1)).unwrap();
        let f = GridFunction::zeros(l, 1);
        let (fd, log) = campanato_solve(&sys, &cert, &solver, &f, &CampanatoConfig::default()).unwrap();
        assert_eq!(log.iterations, 1);
        assert_eq!(fd.sigma_u.max_abs(), 0.0);
    }
}
