use dsol::grid::{GridFunction, Lattice};
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const DIAG: &str = r#"{"N":2,"n":2,"B_factors":[[[1,0],[0,0]],[[0,0],[0,1]]],"A_factors":[[[1,0],[0,0]],[[1,0],[0,0]]]}"#;
const DEGENERATE: &str = r#"{"N":2,"n":2,"B_factors":[[[1,0],[0,0]]],"A_factors":[[[0,0],[0,1]]]}"#;
const TWO_PAIRS: &str = r#"{"N":2,"n":2,"B_factors":[[[1,0],[0,0]],[[0,0],[0,1]]],"A_factors":[[[1,0],[0,1]],[[0,0],[0,1]]]}"#;

fn dsol(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsol")).current_dir(dir).args(args).output().expect("binary runs")
}

fn report(dir: &Path, out: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join(out).join("report.json")).unwrap()).unwrap()
}

fn write_grid(dir: &Path, name: &str, f: impl Fn(&[f64]) -> Vec<f64>) {
    GridFunction::from_fn(Lattice::unit_square(24), 2, f).save(dir.join(name)).unwrap();
}

#[test]
fn analyze_tensor_reports_diag_example() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("diag.json"), DIAG).unwrap();
    let o = dsol(dir.path(), &["analyze-tensor", "--decomposition", "diag.json", "--out", "a"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path(), "a");
    assert!((r["results"]["nu"].as_f64().unwrap() - 1.0).abs() < 1e-8);
    assert_eq!(r["results"]["dimensions"]["pi"], 2);
    assert_eq!(r["results"]["dimensions"]["xi"], 2);
    assert_eq!(r["seed"], 0);
    assert_eq!(r["pass"], true);
}

#[test]
fn sawtooth_reference_passes_the_infinity_laplace_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsol(dir.path(), &["reference", "--case", "sawtooth", "--amplitude", "2", "--cells", "250", "--out", "ref"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("ref/sawtooth.json").exists());
    let o = dsol(
        dir.path(),
        &["check", "--input", "ref/sawtooth.u.grid", "--system", "infinity-laplace", "--r-list", "8", "--r-inf", "16,16", "--out", "chk"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(dir.path().join("chk/residuals.csv")).unwrap();
    let pairing: Vec<f64> = table
        .lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("pairing"))
        .map(|l| l.split(',').nth(6).unwrap().parse().unwrap())
        .collect();
    assert_eq!(pairing.len(), 3);
    assert!(pairing[1] < pairing[0] && pairing[2] < pairing[1], "{pairing:?}");
    // the cut-offs, tolerances and schedules in force are echoed
    let r = report(dir.path(), "chk");
    assert_eq!(r["config"]["check"]["r_inf"], serde_json::json!([16.0, 16.0]));
    assert_eq!(r["config"]["schedules"][0][1].as_array().unwrap().len(), 3);
    assert!(r["results"]["report"]["tolerance"].as_f64().unwrap() > 0.0);
    assert!(r["grid"]["nodes"].as_u64().unwrap() > 0);
}

#[test]
fn solve_linear_rejects_rhs_off_sigma() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dec.json"), DEGENERATE).unwrap();
    write_grid(dir.path(), "f.grid", |_| vec![1.0, 1.0]);
    let o = dsol(dir.path(), &["solve-linear", "--decomposition", "dec.json", "--rhs", "f.grid", "--out", "s"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("compatibility") && err.contains("Sigma"), "{err}");
    assert_eq!(report(dir.path(), "s")["pass"], false);
}

#[test]
fn solve_linear_writes_fibres_and_eps_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dec.json"), DEGENERATE).unwrap();
    write_grid(dir.path(), "f.grid", |x| vec![1.0 + x[0] * x[1], 0.0]);
    let o = dsol(dir.path(), &["solve-linear", "--decomposition", "dec.json", "--rhs", "f.grid", "--out", "s"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sigma_u.grid", "pi_du.grid", "xi_d2u.grid"] {
        assert!(GridFunction::load(dir.path().join("s").join(f)).is_ok());
    }
    let eps = std::fs::read_to_string(dir.path().join("s/eps.csv")).unwrap();
    assert_eq!(eps.lines().count(), 5);
}

#[test]
fn solve_nonlinear_logs_contracting_iterations() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dec.json"), TWO_PAIRS).unwrap();
    write_grid(dir.path(), "f.grid", |x| vec![1.0 + x[0] * x[1], (3.0 * x[0]).cos()]);
    let o = dsol(dir.path(), &["solve-nonlinear", "--decomposition", "dec.json", "--rhs", "f.grid", "--coefficient", "1,0.5", "--out", "n"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(dir.path().join("n/iterations.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("iteration,step,ratio"));
    let ratios: Vec<f64> = lines.skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert!(!ratios.is_empty() && ratios.iter().all(|&r| r < 0.6));
}

#[test]
fn uncertified_nonlinearity_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dec.json"), TWO_PAIRS).unwrap();
    write_grid(dir.path(), "f.grid", |_| vec![1.0, 1.0]);
    let o = dsol(dir.path(), &["solve-nonlinear", "--decomposition", "dec.json", "--rhs", "f.grid", "--gamma", "0.7", "--lipschitz-fraction", "0.5", "--out", "n"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("dec.json"), TWO_PAIRS).unwrap();
    let run = |out: &str| {
        let o = dsol(dir.path(), &["verify-estimate", "--decomposition", "dec.json", "--count", "3", "--cells", "24", "--seed", "9", "--out", out]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a");
    run("b");
    for f in ["report.json", "estimates.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    assert_eq!(report(dir.path(), "a")["seed"], 9);

    let check = |out: &str| {
        let o = dsol(dir.path(), &["reference", "--case", "smooth", "--cells", "32", "--out", "sm"]);
        assert_eq!(o.status.code(), Some(0));
        dsol(dir.path(), &["check", "--input", "sm/smooth.u.grid", "--system", "eikonal", "--speed", "1", "--family", "randomized", "--seed", "4", "--out", out]);
    };
    check("c");
    check("d");
    for f in ["report.json", "residuals.csv"] {
        assert_eq!(std::fs::read(dir.path().join("c").join(f)).unwrap(), std::fs::read(dir.path().join("d").join(f)).unwrap());
    }
}

#[test]
fn manifest_fields_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("m")).unwrap();
    std::fs::write(dir.path().join("m/diag.json"), DIAG).unwrap();
    std::fs::write(
        dir.path().join("m/run.toml"),
        "command = \"analyze-tensor\"\nseed = 5\nout = \"result\"\n[analyze-tensor]\ndecomposition = \"diag.json\"\neps = [0.5]\nsamples = 100\n",
    )
    .unwrap();
    let o = dsol(dir.path(), &["--manifest", "m/run.toml", "--samples", "50"]);
    assert_eq!(o.status.code(), Some(2), "flags need the subcommand");
    let o = dsol(dir.path(), &["--manifest", "m/run.toml", "analyze-tensor", "--samples", "50"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(dir.path(), "m/result");
    assert_eq!(r["seed"], 5);
    assert_eq!(r["config"]["samples"], 50);
    assert_eq!(r["config"]["eps"], serde_json::json!([0.5]));
    let o = dsol(dir.path(), &["--manifest", "m/run.toml", "--out", "plain"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(report(dir.path(), "plain")["config"]["samples"], 100);
}

#[test]
fn bad_inputs_exit_with_parse_status() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[check]\nnot_a_field = 1\n").unwrap();
    assert_eq!(dsol(dir.path(), &["--manifest", "bad.toml", "check"]).status.code(), Some(2));
    assert_eq!(dsol(dir.path(), &["check", "--input", "missing.grid", "--system", "eikonal", "--speed", "1"]).status.code(), Some(2));
    assert_eq!(dsol(dir.path(), &["analyze-tensor", "--bogus"]).status.code(), Some(2));
    assert_eq!(dsol(dir.path(), &[]).status.code(), Some(2));
    std::fs::write(dir.path().join("dec.json"), r#"{"N":2,"n":2,"B_factors":[[[1,0],[0,0]]],"A_factors":[]}"#).unwrap();
    assert_eq!(dsol(dir.path(), &["analyze-tensor", "--decomposition", "dec.json"]).status.code(), Some(2));
}

#[test]
fn invalid_decomposition_fails_analysis() {
    let dir = tempfile::tempdir().unwrap();
    // overlapping B ranges
    std::fs::write(dir.path().join("dec.json"), r#"{"N":2,"n":2,"B_factors":[[[1,0],[0,0]],[[1,0],[0,0]]],"A_factors":[[[1,0],[0,1]],[[1,0],[0,1]]]}"#).unwrap();
    let o = dsol(dir.path(), &["analyze-tensor", "--decomposition", "dec.json", "--out", "a"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(report(dir.path(), "a")["results"]["validation"]["ranges_orthogonal"], false);
}

#[test]
fn diffuse_writes_a_field_and_cell_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = dsol(dir.path(), &["reference", "--case", "oscillation", "--mu", "200", "--cells", "2048", "--out", "ref"]);
    assert_eq!(o.status.code(), Some(0));
    let o = dsol(dir.path(), &["diffuse", "--input", "ref/oscillation.u.grid", "--width", "32", "--ratio", "0.9", "--out", "d"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let field = dsol::young::YoungMeasureField::load(dir.path().join("d/field.ymf")).unwrap();
    let table = std::fs::read_to_string(dir.path().join("d/cells.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("node,x1,atoms,infinity_mass,barycenter1"));
    assert_eq!(table.lines().count(), 1 + field.lattice().len());
    // away from the zero extension, quotients of mu^-1 sin(mu x) stay in [-1, 1] up to interpolation error
    let l = field.lattice();
    let inside = (0..l.len()).filter(|&k| l.position(k)[0] < 0.9);
    let worst = inside.flat_map(|k| field.cell(k).finite_atoms().map(|(v, _)| v[0].abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
    assert!(worst <= 1.0 + 1e-2, "largest quotient {worst}");
    assert!(worst >= 0.9);
}
