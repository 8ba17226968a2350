//! Subcommand parameters and their execution.

use crate::error::CliError;
use crate::output::{num, opt, Run};
use clap::Args;
use dsol::campanato::{campanato_solve, check_degenerate_ellipticity, make_nonlinearity, CampanatoConfig, CampanatoLog, Perturbation};
use dsol::checker::{check_battery, check_dsolution, schedule_family, CheckConfig, CheckReport, ScheduleFamily};
use dsol::frames::{Frame, Window};
use dsol::grid::{GridFunction, Lattice};
use dsol::reference::ReferenceCase;
use dsol::solver::{fibre_norms, verify_hessian_estimate, FibreData, LinearFibreSolver, DEFAULT_EPS};
use dsol::system::{eikonal_system, infinity_laplace_system, linear_system, CoefficientSystem};
use dsol::tensor::{Decomposition, Tensor4};
use dsol::young::{default_r_inf, diffuse_field};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

fn need<T>(v: Option<T>, what: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Parse(format!("missing required parameter `{what}`")))
}

fn load_grid(path: &Path) -> Result<GridFunction, CliError> {
    GridFunction::load(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse(format!("{}: {e}", path.display())))
}

fn save_fibres(run: &mut Run, fd: &FibreData) -> Result<(), CliError> {
    fd.sigma_u.save(run.path("sigma_u.grid"))?;
    fd.pi_du.save(run.path("pi_du.grid"))?;
    fd.xi_d2u.save(run.path("xi_d2u.grid"))?;
    Ok(())
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeTensor {
    /// Decomposition document (JSON with N, n, B_factors, A_factors).
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Regularisation parameters for the rank-one positivity check.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Random unit pairs sampled per rank-one check.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Serialize)]
struct AnalyzeTensorConfig {
    decomposition: PathBuf,
    eps: Vec<f64>,
    samples: usize,
}

pub fn analyze_tensor(p: AnalyzeTensor, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let cfg = AnalyzeTensorConfig {
        decomposition: need(p.decomposition, "decomposition")?,
        eps: p.eps.unwrap_or_else(|| vec![0.1, 1.0]),
        samples: p.samples.unwrap_or(10_000),
    };
    let dec: Decomposition = load_json(&cfg.decomposition)?;
    let mut run = Run::new(out, "analyze-tensor", seed, &cfg)?;
    let validation = dec.validate();
    run.check("decomposition valid", validation.valid, format!("{validation:?}"));
    run.result("validation", &validation)?;
    if validation.valid {
        match dec.ellipticity() {
            Ok(ell) => {
                run.check("nu positive", ell.nu > 0.0, format!("nu {}", ell.nu));
                run.check("nu below product bound", ell.nu <= ell.nu_bound * (1.0 + 1e-8) + 1e-10, format!("nu {} bound {}", ell.nu, ell.nu_bound));
                run.result("nu", ell.nu)?;
                run.result("nu_bound", ell.nu_bound)?;
                run.result("nu_sampled", ell.nu_sampled)?;
                run.result(
                    "dimensions",
                    serde_json::json!({"sigma": ell.sigma.dim(), "pi": ell.pi.dim(), "xi": ell.xi.dim()}),
                )?;
                let comps: Vec<_> = ell
                    .components
                    .iter()
                    .map(|c| serde_json::json!({"sigma": c.sigma.dim(), "t": c.t.dim(), "b_min": c.b_min, "a_min": c.a_min}))
                    .collect();
                run.result("components", comps)?;
            }
            Err(e) => run.check("ellipticity", false, e.to_string()),
        }
        let mut rows = Vec::new();
        for (k, &eps) in cfg.eps.iter().enumerate() {
            let outcome = dec.regularize(eps).and_then(|t| {
                let lowest = t.check_rank_one_positive(0.0, cfg.samples, seed.wrapping_add(k as u64))?;
                Ok(lowest)
            });
            match outcome {
                Ok(lowest) => {
                    let ok = lowest >= eps * eps - 1e-9 * (1.0 + t_scale(&dec, eps));
                    run.check(&format!("rank-one positivity at eps {eps}"), ok, format!("sampled minimum {lowest}, required {}", eps * eps));
                    rows.push(vec![num(eps), num(lowest), num(eps * eps), ok.to_string()]);
                }
                Err(e) => {
                    run.check(&format!("rank-one positivity at eps {eps}"), false, e.to_string());
                    rows.push(vec![num(eps), String::new(), num(eps * eps), "false".into()]);
                }
            }
        }
        run.csv("rank_one.csv", &["eps", "sampled_min", "required", "pass"], &rows)?;
    }
    run.finish()
}

fn t_scale(dec: &Decomposition, eps: f64) -> f64 {
    dec.regularize(eps).map(|t| t.matrix().abs().max()).unwrap_or(1.0)
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct Diffuse {
    /// Grid function file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Derivative order.
    #[arg(long)]
    pub order: Option<usize>,
    /// Number of schedules in the window.
    #[arg(long)]
    pub width: Option<usize>,
    /// Ratio between consecutive steps.
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Coarsest step; defaults so that the finest step is one lattice spacing.
    #[arg(long)]
    pub h0: Option<f64>,
    /// Infinity cut-off; defaults to 1e6 times the largest coarse quotient.
    #[arg(long)]
    pub r_inf: Option<f64>,
}

#[derive(Serialize)]
struct DiffuseConfig {
    input: PathBuf,
    order: usize,
    width: usize,
    ratio: f64,
    h0: f64,
    r_inf: f64,
    window: Window,
}

pub fn diffuse(p: Diffuse, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let input = need(p.input, "input")?;
    let u = load_grid(&input)?;
    let order = p.order.unwrap_or(1);
    let width = p.width.unwrap_or(4);
    let ratio = p.ratio.unwrap_or(0.5);
    if !(ratio > 0.0 && ratio < 1.0) || width == 0 || order == 0 {
        return Err(CliError::Parse("need 0 < ratio < 1, width >= 1 and order >= 1".into()));
    }
    let spacing = u.lattice().max_spacing();
    let h0 = p.h0.unwrap_or(spacing / ratio.powi(width as i32 - 1));
    let window = Window::geometric(h0, ratio, width, order);
    let frame = Frame::standard(u.components(), u.lattice().dim());
    let r_inf = match p.r_inf {
        Some(r) => r,
        None => default_r_inf(&u, &frame, &window)?,
    };
    let cfg = DiffuseConfig { input, order, width, ratio, h0, r_inf, window: window.clone() };
    let mut run = Run::new(out, "diffuse", seed, &cfg)?;
    run.grid(u.lattice());
    let field = diffuse_field(&u, &frame, &window, order, r_inf)?;
    field.save(run.path("field.ymf"))?;
    let l = field.lattice();
    let dim = field.dim();
    let mut header: Vec<String> = vec!["node".into()];
    header.extend((0..l.dim()).map(|i| format!("x{}", i + 1)));
    header.extend(["atoms".into(), "infinity_mass".into()]);
    header.extend((0..dim).map(|c| format!("barycenter{}", c + 1)));
    let mut rows = Vec::new();
    let mut inf_total = 0.0;
    let mut inf_max: f64 = 0.0;
    let mut cells = 0usize;
    for k in (0..l.len()).filter(|&k| l.in_mask(k)) {
        let m = field.cell(k);
        let mut row = vec![k.to_string()];
        row.extend(l.position(k).into_iter().map(num));
        row.push(m.atoms.len().to_string());
        row.push(num(m.infinity_mass()));
        row.extend(m.barycenter(dim).into_iter().map(num));
        rows.push(row);
        inf_total += m.infinity_mass();
        inf_max = inf_max.max(m.infinity_mass());
        cells += 1;
    }
    let header_ref: Vec<&str> = header.iter().map(String::as_str).collect();
    run.csv("cells.csv", &header_ref, &rows)?;
    let defect = field.mass_defect();
    run.check("mass conservation", defect <= 1e-12, format!("largest mass defect {defect:e}"));
    run.result("mass_defect", defect)?;
    run.result("mean_infinity_mass", if cells > 0 { inf_total / cells as f64 } else { 0.0 })?;
    run.result("max_infinity_mass", inf_max)?;
    run.finish()
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct Check {
    /// Grid function file.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// linear, eikonal or infinity-laplace.
    #[arg(long)]
    pub system: Option<String>,
    /// Decomposition document, for the linear system.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Tensor document, for the linear system.
    #[arg(long)]
    pub tensor: Option<PathBuf>,
    /// Speed `c` of the eikonal system `|Du|^2 = c^2`.
    #[arg(long)]
    pub speed: Option<f64>,
    /// Right-hand side grid; zero when absent.
    #[arg(long)]
    pub rhs: Option<PathBuf>,
    /// Cut-off radii `R`.
    #[arg(long, value_delimiter = ',')]
    pub r_list: Option<Vec<f64>>,
    /// Infinity cut-offs per derivative order.
    #[arg(long, value_delimiter = ',')]
    pub r_inf: Option<Vec<f64>>,
    /// dyadic, geometric, randomized or battery.
    #[arg(long)]
    pub family: Option<String>,
    /// Schedules per window.
    #[arg(long)]
    pub width: Option<usize>,
    /// Number of refining windows.
    #[arg(long)]
    pub count: Option<usize>,
    /// Discretisation constant in the pass tolerance.
    #[arg(long)]
    pub c_disc: Option<f64>,
    /// Allowed relative growth between windows.
    #[arg(long)]
    pub trend_slack: Option<f64>,
    /// Rank tolerance of the infinity-Laplace projection.
    #[arg(long)]
    pub rank_tol: Option<f64>,
    /// standard, or decomposition for the frame induced by the decomposition.
    #[arg(long)]
    pub frame: Option<String>,
}

#[derive(Serialize)]
struct CheckRunConfig {
    input: PathBuf,
    system: String,
    decomposition: Option<PathBuf>,
    tensor: Option<PathBuf>,
    speed: Option<f64>,
    rhs: Option<PathBuf>,
    family: String,
    width: usize,
    count: usize,
    frame: String,
    rank_tol: f64,
    check: CheckConfig,
    schedules: Vec<(String, Vec<Window>)>,
}

fn build_system(p: &Check, u: &GridFunction, rank_tol: f64) -> Result<(CoefficientSystem, Option<Decomposition>), CliError> {
    let (big_n, n) = (u.components(), u.lattice().dim());
    let system = p.system.clone().unwrap_or_else(|| "linear".into());
    let dec: Option<Decomposition> = p.decomposition.as_deref().map(load_json).transpose()?;
    Ok(match system.as_str() {
        "linear" => {
            let tensor: Tensor4 = match (&dec, &p.tensor) {
                (Some(d), None) => d.reconstruct(),
                (None, Some(t)) => load_json(t)?,
                _ => return Err(CliError::Parse("the linear system needs exactly one of `decomposition` or `tensor`".into())),
            };
            if tensor.range_dim() != big_n || tensor.domain_dim() != n {
                return Err(CliError::Parse("tensor dimensions do not match the grid function".into()));
            }
            (linear_system(&tensor), dec)
        }
        "eikonal" => (eikonal_system(n, big_n, need(p.speed, "speed")?), dec),
        "infinity-laplace" => (infinity_laplace_system(n, big_n, rank_tol), dec),
        other => return Err(CliError::Parse(format!("unknown system `{other}`; use linear, eikonal or infinity-laplace"))),
    })
}

fn family(name: &str) -> Result<ScheduleFamily, CliError> {
    Ok(match name {
        "dyadic" => ScheduleFamily::Dyadic,
        "geometric" => ScheduleFamily::Geometric,
        "randomized" => ScheduleFamily::Randomized,
        other => return Err(CliError::Parse(format!("unknown schedule family `{other}`"))),
    })
}

fn residual_rows(family: &str, r: &CheckReport, rows: &mut Vec<Vec<String>>) {
    for c in &r.characterizations {
        for (w, (mean, max)) in c.mean.iter().zip(&c.max).enumerate() {
            rows.push(vec![
                family.to_string(),
                c.name.clone(),
                opt(c.radius),
                w.to_string(),
                num(r.windows[w].coarsest_step),
                num(r.windows[w].finest_step),
                num(*mean),
                num(*max),
                num(c.tolerance),
                c.pass.to_string(),
            ]);
        }
    }
}

pub fn check(p: Check, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let input = need(p.input.clone(), "input")?;
    let u = load_grid(&input)?;
    let rank_tol = p.rank_tol.unwrap_or(1e-9);
    let (system, dec) = build_system(&p, &u, rank_tol)?;
    let f = p.rhs.as_deref().map(load_grid).transpose()?;
    let frame_name = p.frame.clone().unwrap_or_else(|| "standard".into());
    let frame = match (frame_name.as_str(), &dec) {
        ("standard", _) => Frame::standard(u.components(), u.lattice().dim()),
        ("decomposition", Some(d)) => Frame::from_decomposition(d)?,
        _ => return Err(CliError::Parse("frame must be `standard`, or `decomposition` together with a decomposition".into())),
    };
    let defaults = CheckConfig::default();
    let config = CheckConfig {
        r_list: p.r_list.clone().unwrap_or(defaults.r_list),
        r_inf: p.r_inf.clone(),
        c_disc: p.c_disc.unwrap_or(defaults.c_disc),
        trend_slack: p.trend_slack.unwrap_or(defaults.trend_slack),
        keep_fields: false,
    };
    let fam = p.family.clone().unwrap_or_else(|| "dyadic".into());
    let width = p.width.unwrap_or(2);
    let count = p.count.unwrap_or(3);
    let spacing = u.lattice().max_spacing();
    let families: Vec<(String, ScheduleFamily)> = if fam == "battery" {
        ["dyadic", "geometric", "randomized"].iter().map(|s| (s.to_string(), family(s).unwrap())).collect()
    } else {
        vec![(fam.clone(), family(&fam)?)]
    };
    let schedules = families
        .iter()
        .map(|(name, f)| (name.clone(), schedule_family(*f, spacing, system.order(), width, count, seed)))
        .collect();
    let cfg = CheckRunConfig {
        input,
        system: system.name().to_string(),
        decomposition: p.decomposition.clone(),
        tensor: p.tensor.clone(),
        speed: p.speed,
        rhs: p.rhs.clone(),
        family: fam.clone(),
        width,
        count,
        frame: frame_name,
        rank_tol,
        check: config.clone(),
        schedules,
    };
    let mut run = Run::new(out, "check", seed, &cfg)?;
    run.grid(u.lattice());
    let mut rows = Vec::new();
    let header = ["family", "characterization", "radius", "window", "coarsest_step", "finest_step", "mean", "max", "tolerance", "pass"];
    if fam == "battery" {
        let b = check_battery(&u, &system, &frame, &config, f.as_ref(), width, count, seed)?;
        for (f, r) in &b.reports {
            let name = serde_json::to_value(f).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            residual_rows(&name, r, &mut rows);
            run.check(&format!("{name} verdict"), r.verdict, verdict_detail(r));
        }
        run.result("battery", &b)?;
    } else {
        let windows = &cfg.schedules[0].1;
        let r = check_dsolution(&u, &system, &frame, windows, &config, f.as_ref())?;
        residual_rows(&fam, &r, &mut rows);
        run.check("verdict", r.verdict, verdict_detail(&r));
        run.check(
            "non-increasing residuals",
            r.characterizations.iter().all(|c| c.non_increasing),
            "cell-mean residuals shrink (within the slack) from window to window",
        );
        run.result("report", &r)?;
    }
    run.csv("residuals.csv", &header, &rows)?;
    run.finish()
}

fn verdict_detail(r: &CheckReport) -> String {
    let failing: Vec<String> = r
        .characterizations
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}{} mean {:e} > {:e}", c.name, c.radius.map(|x| format!("(R={x})")).unwrap_or_default(), c.mean.last().copied().unwrap_or(f64::NAN), c.tolerance))
        .collect();
    if failing.is_empty() {
        format!("all {} characterizations within tolerance; agreement {}", r.characterizations.len(), r.agreement)
    } else {
        failing.join("; ")
    }
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct SolveLinear {
    /// Decomposition document.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Right-hand side grid; its lattice is the computational domain.
    #[arg(long)]
    pub rhs: Option<PathBuf>,
    /// Decreasing regularisation parameters.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    /// Largest accepted relative residual of the extrapolated fibre data.
    #[arg(long)]
    pub residual_tol: Option<f64>,
}

#[derive(Serialize)]
struct SolveLinearConfig {
    decomposition: PathBuf,
    rhs: PathBuf,
    eps: Vec<f64>,
    residual_tol: f64,
    solver_tol: f64,
}

pub fn solve_linear(p: SolveLinear, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let decomposition = need(p.decomposition, "decomposition")?;
    let rhs = need(p.rhs, "rhs")?;
    let dec: Decomposition = load_json(&decomposition)?;
    let f = load_grid(&rhs)?;
    let solver = LinearFibreSolver::new(&dec, f.lattice(), &p.eps.clone().unwrap_or_else(|| DEFAULT_EPS.to_vec()))?;
    let cfg = SolveLinearConfig {
        decomposition,
        rhs,
        eps: solver.eps().to_vec(),
        residual_tol: p.residual_tol.unwrap_or(1e-3),
        solver_tol: solver.solver_tol,
    };
    let mut run = Run::new(out, "solve-linear", seed, &cfg)?;
    run.grid(f.lattice());
    run.result("nu", solver.ellipticity().nu)?;
    match solver.solve(&f) {
        Ok((fd, report)) => {
            save_fibres(&mut run, &fd)?;
            let rows: Vec<Vec<String>> = report
                .eps
                .iter()
                .enumerate()
                .map(|(k, e)| vec![k.to_string(), num(*e), if k == 0 { String::new() } else { num(report.cauchy[k - 1]) }])
                .collect();
            run.csv("eps.csv", &["level", "eps", "cauchy"], &rows)?;
            run.check("residual", report.residual <= cfg.residual_tol, format!("relative residual {:e}, tolerance {:e}", report.residual, cfg.residual_tol));
            run.result("fibre_norms", fibre_norms(&fd))?;
            run.result("solve", &report)?;
        }
        Err(e @ dsol::Error::NotSigmaValued { .. }) => {
            run.check("compatibility", false, format!("{e}; project f onto Sigma before solving"));
        }
        Err(e) => return Err(e.into()),
    }
    run.finish()
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct SolveNonlinear {
    /// Decomposition document of the linear part.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Right-hand side grid.
    #[arg(long)]
    pub rhs: Option<PathBuf>,
    /// Coefficient `A(x) = c_0 + c_1 x_1 + ... + c_n x_n`.
    #[arg(long, value_delimiter = ',')]
    pub coefficient: Option<Vec<f64>>,
    /// Weight of the monotone part; needs `nu |gamma| + L < nu`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Lipschitz constant `L` of the perturbation, as a fraction of `nu`.
    #[arg(long)]
    pub lipschitz_fraction: Option<f64>,
    /// Regularisation levels of each linear solve.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Stop when successive iterates differ by less than this.
    #[arg(long)]
    pub tol: Option<f64>,
    /// Bound on the final equation residual.
    #[arg(long)]
    pub tol_final: Option<f64>,
    /// Samples for the degenerate ellipticity check.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Serialize)]
struct SolveNonlinearConfig {
    decomposition: PathBuf,
    rhs: PathBuf,
    coefficient: Vec<f64>,
    gamma: f64,
    lipschitz_fraction: f64,
    eps: Vec<f64>,
    campanato: CampanatoConfig,
    samples: usize,
}

pub fn solve_nonlinear(p: SolveNonlinear, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let decomposition = need(p.decomposition, "decomposition")?;
    let rhs = need(p.rhs, "rhs")?;
    let dec: Decomposition = load_json(&decomposition)?;
    let f = load_grid(&rhs)?;
    let defaults = CampanatoConfig::default();
    let cfg = SolveNonlinearConfig {
        decomposition,
        rhs,
        coefficient: p.coefficient.unwrap_or_else(|| vec![1.0]),
        gamma: p.gamma.unwrap_or(0.2),
        lipschitz_fraction: p.lipschitz_fraction.unwrap_or(0.3),
        eps: p.eps.unwrap_or_else(|| DEFAULT_EPS.to_vec()),
        campanato: CampanatoConfig {
            max_iter: p.max_iter.unwrap_or(defaults.max_iter),
            tol: p.tol.unwrap_or(defaults.tol),
            tol_final: p.tol_final.unwrap_or(defaults.tol_final),
        },
        samples: p.samples.unwrap_or(200),
    };
    if cfg.coefficient.is_empty() || cfg.coefficient.len() > f.lattice().dim() + 1 {
        return Err(CliError::Parse("coefficient needs a constant and at most one slope per axis".into()));
    }
    let mut run = Run::new(out, "solve-nonlinear", seed, &cfg)?;
    run.grid(f.lattice());
    let coef = cfg.coefficient.clone();
    let a_of_x = Arc::new(move |x: &[f64]| coef[0] + coef[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>());
    let nu = dec.ellipticity()?.nu;
    let g = Perturbation::clamped_sine(dec.range_dim(), dec.domain_dim(), cfg.lipschitz_fraction * nu);
    let (system, cert) = match make_nonlinearity(&dec, a_of_x, cfg.gamma, &g) {
        Ok(v) => v,
        Err(e) => {
            run.check("certificate", false, e.to_string());
            return run.finish();
        }
    };
    match cert.validate_on(f.lattice()) {
        Ok(summary) => {
            run.check("certificate", true, format!("B + C = {}", summary.kappa));
            run.result("certificate", summary)?;
        }
        Err(e) => {
            run.check("certificate", false, e.to_string());
            return run.finish();
        }
    }
    let l = f.lattice();
    let points: Vec<Vec<f64>> = (0..l.len()).filter(|&k| l.in_mask(k)).step_by((l.len() / 16).max(1)).map(|k| l.position(k)).collect();
    let margin = check_degenerate_ellipticity(&system, &cert, &points, cfg.samples, seed)?;
    run.check("degenerate ellipticity", margin.pass, format!("worst margin {:e}, {} violations", margin.worst_margin, margin.violations));
    run.result("ellipticity_margin", &margin)?;
    let solver = LinearFibreSolver::new(&dec, l, &cfg.eps)?;
    match campanato_solve(&system, &cert, &solver, &f, &cfg.campanato) {
        Ok((fd, log)) => {
            save_fibres(&mut run, &fd)?;
            let rows = iteration_rows(&log);
            run.csv("iterations.csv", &["iteration", "step", "ratio"], &rows)?;
            let worst = log.ratios.iter().copied().fold(0.0, f64::max);
            run.check("contraction", worst <= log.kappa + 0.1, format!("worst ratio {worst}, kappa {}", log.kappa));
            run.check("final residual", log.residual <= cfg.campanato.tol_final, format!("relative residual {:e}", log.residual));
            run.result("iterations", &log)?;
        }
        Err(e) => {
            run.csv("iterations.csv", &["iteration", "step", "ratio"], &[])?;
            run.check("convergence", false, e.to_string());
        }
    }
    run.finish()
}

/// One row per iteration; the first has no ratio.
fn iteration_rows(log: &CampanatoLog) -> Vec<Vec<String>> {
    log.steps
        .iter()
        .enumerate()
        .map(|(k, s)| vec![(k + 1).to_string(), num(*s), if k == 0 { String::new() } else { opt(log.ratios.get(k - 1).copied()) }])
        .collect()
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    /// disc, fat-cantor, sawtooth, oscillation or smooth.
    #[arg(long)]
    pub case: Option<String>,
    /// Cells per axis.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Disc right-hand side: one, x2 or zero.
    #[arg(long)]
    pub rhs_kind: Option<String>,
    /// Fat Cantor truncation depth.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Sawtooth amplitude `M`.
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Sawtooth frequency `k`.
    #[arg(long)]
    pub teeth: Option<usize>,
    /// Oscillation frequency `mu`.
    #[arg(long)]
    pub mu: Option<f64>,
}

pub fn reference(p: Reference, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let case = need(p.case.clone(), "case")?;
    let (case_obj, cfg) = match case.as_str() {
        "disc" => {
            let (kind, cells) = (p.rhs_kind.unwrap_or_else(|| "one".into()), p.cells.unwrap_or(128));
            (ReferenceCase::disc(&kind, cells), serde_json::json!({"case": case, "rhs_kind": kind, "cells": cells}))
        }
        "fat-cantor" => {
            let (depth, cells) = (p.depth.unwrap_or(8), p.cells.unwrap_or(1 << 12));
            (ReferenceCase::fat_cantor(depth, cells), serde_json::json!({"case": case, "depth": depth, "cells": cells}))
        }
        "sawtooth" => {
            let (m, k, cells) = (p.amplitude.unwrap_or(1.0), p.teeth.unwrap_or(4), p.cells.unwrap_or(250));
            (ReferenceCase::sawtooth(m, k, cells), serde_json::json!({"case": case, "amplitude": m, "teeth": k, "cells": cells}))
        }
        "oscillation" => {
            let (mu, cells) = (p.mu.unwrap_or(200.0), p.cells.unwrap_or(4096));
            (ReferenceCase::oscillation(mu, cells), serde_json::json!({"case": case, "mu": mu, "cells": cells}))
        }
        "smooth" => {
            let cells = p.cells.unwrap_or(64);
            (Ok(ReferenceCase::smooth(cells)), serde_json::json!({"case": case, "cells": cells}))
        }
        other => return Err(CliError::Parse(format!("unknown reference case `{other}`"))),
    };
    let case_obj = case_obj.map_err(|e| CliError::Parse(e.to_string()))?;
    let mut run = Run::new(out, "reference", seed, &cfg)?;
    for path in case_obj.export(&run.out.clone())? {
        if let Some(name) = path.file_name() {
            run.path(&name.to_string_lossy());
        }
    }
    if let Some((_, g)) = case_obj.fields.first() {
        run.grid(g.lattice());
    }
    run.result("case", &case_obj)?;
    run.finish()
}

// ---------------------------------------------------------------------------------------------

#[derive(Args, Serialize, Deserialize, Clone, Debug, Default)]
#[serde(deny_unknown_fields)]
pub struct VerifyEstimate {
    /// Decomposition document.
    #[arg(long)]
    pub decomposition: Option<PathBuf>,
    /// Grid function to test; a seeded battery of boundary-vanishing trigonometric
    /// polynomials on the unit square when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Battery size.
    #[arg(long)]
    pub count: Option<usize>,
    /// Cells per axis for the battery.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Regularisation parameters at which the regularised estimate is also tested.
    #[arg(long, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct VerifyEstimateConfig {
    decomposition: PathBuf,
    input: Option<PathBuf>,
    count: usize,
    cells: usize,
    eps: Vec<f64>,
}

fn trig_battery(seed: u64, count: usize, cells: usize, comps: usize) -> Vec<GridFunction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let modes: Vec<(usize, f64, f64, f64)> = (0..6)
                .map(|_| (rng.gen_range(0..comps), rng.gen_range(1..4) as f64, rng.gen_range(1..4) as f64, rng.gen_range(-1.0..1.0)))
                .collect();
            GridFunction::from_fn(Lattice::unit_square(cells), comps, move |x| {
                let mut v = vec![0.0; comps];
                for &(c, k, l, a) in &modes {
                    v[c] += a * (k * PI * x[0]).sin() * (l * PI * x[1]).sin();
                }
                v
            })
        })
        .collect()
}

pub fn verify_estimate(p: VerifyEstimate, out: PathBuf, seed: u64) -> Result<(), CliError> {
    let cfg = VerifyEstimateConfig {
        decomposition: need(p.decomposition, "decomposition")?,
        input: p.input,
        count: p.count.unwrap_or(20),
        cells: p.cells.unwrap_or(64),
        eps: p.eps.unwrap_or_else(|| vec![0.0, 0.1, 1.0]),
    };
    let dec: Decomposition = load_json(&cfg.decomposition)?;
    let samples = match &cfg.input {
        Some(path) => vec![load_grid(path)?],
        None => {
            if dec.domain_dim() != 2 {
                return Err(CliError::Parse("the built-in battery lives on the unit square; pass `input` for other dimensions".into()));
            }
            trig_battery(seed, cfg.count, cfg.cells, dec.range_dim())
        }
    };
    let mut run = Run::new(out, "verify-estimate", seed, &cfg)?;
    if let Some(u) = samples.first() {
        run.grid(u.lattice());
    }
    let mut rows = Vec::new();
    let (mut passed, mut total, mut worst) = (0usize, 0usize, 0.0f64);
    for (s, u) in samples.iter().enumerate() {
        for &eps in &cfg.eps {
            let e = verify_hessian_estimate(&dec, u, eps)?;
            let ratio = if e.rhs > 0.0 { e.lhs / e.rhs } else if e.lhs > 0.0 { f64::INFINITY } else { 0.0 };
            worst = worst.max(ratio);
            total += 1;
            passed += e.pass as usize;
            rows.push(vec![s.to_string(), num(eps), num(e.lhs), num(e.rhs), num(ratio), e.pass.to_string()]);
        }
    }
    run.csv("estimates.csv", &["sample", "eps", "lhs", "rhs", "ratio", "pass"], &rows)?;
    run.check("hessian estimate", passed == total, format!("{passed}/{total} pass, worst lhs/rhs {worst}"));
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_step_log_gives_ten_rows_with_ratios() {
        let steps: Vec<f64> = (0..10).map(|k| 0.5f64.powi(k)).collect();
        let ratios: Vec<f64> = steps.windows(2).map(|w| w[1] / w[0]).collect();
        let log = CampanatoLog { kappa: 0.5, steps, ratios, iterations: 10, residual: 1e-9, last_linear: None };
        let rows = iteration_rows(&log);
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[0][2], "");
        assert!(rows[1..].iter().all(|r| r[2] == "0.5"));
    }
}
