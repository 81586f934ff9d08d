use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qseig::state_io::read_state;

const HEADER: &str = "step,energy,orth_error,grad_norm_l2,grad_norm_a,err_u,lambda_min_gram,green_solves";

fn qseig(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qseig"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL: &str = "\
problem.potential = harmonic
problem.lower = -5.5
problem.upper = 5.5
problem.points = 19
n_eig = 3
scheme.tau = 0.5
scheme.eps = 1e-7
";

fn report_errors(text: &str) -> Vec<f64> {
    text.lines()
        .skip_while(|l| !l.starts_with("index,"))
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn missing_config_exits_1_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.conf");
    let out = qseig(&["solve", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_key_and_bad_usage_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.conf", "problem.potental = harmonic\n");
    assert_eq!(qseig(&["solve", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(qseig(&["frobnicate"]).status.code(), Some(1));
    let cfg = write_config(dir.path(), "d.conf", SMALL);
    assert_eq!(qseig(&["solve", "--config", &cfg, "--tau", "0.1,0.2"]).status.code(), Some(1));
}

#[test]
fn one_step_budget_exits_2_with_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}scheme.max_steps = 1\nscheme.init = raw\noutputs.history_csv = h.csv\nreference.kind = none\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    let out = qseig(&["solve", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, vec![HEADER, lines[1]]);
    assert!(lines[1].starts_with("1,"));
    // the only iterate is the final one
    assert_eq!(lines[1].split(',').nth(5).unwrap().parse::<f64>().unwrap(), 0.0);
}

#[test]
fn solve_converges_and_reports_small_errors() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}outputs.history_csv = h.csv\noutputs.report = r.txt\noutputs.state = u.bin\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    let out = qseig(&["solve", "--config", &cfg, "--serial"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("r.txt")).unwrap();
    assert!(report.contains("terminated_by = ToleranceMet"));
    let errs = report_errors(&report);
    assert_eq!(errs.len(), 3);
    assert!(errs.iter().all(|&e| e <= 1e-8), "{errs:?}");
    let csv = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let steps: usize = report.lines().find_map(|l| l.strip_prefix("steps = ")).unwrap().parse().unwrap();
    assert_eq!(rows.len(), steps);
    let last_err: f64 = rows[rows.len() - 1].split(',').nth(5).unwrap().parse().unwrap();
    assert_eq!(last_err, 0.0);
    let u = read_state(&dir.path().join("u.bin")).unwrap();
    assert_eq!((u.rows(), u.cols()), (361, 3));
    assert!(String::from_utf8_lossy(&out.stdout).contains("bounds.tau_quasi_stiefel"));
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}scheme.max_steps = 3\noutputs.history_csv = h.csv\nreference.kind = none\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    let read = || fs::read_to_string(dir.path().join("h.csv")).unwrap();
    qseig(&["solve", "--config", &cfg]);
    let a = read();
    qseig(&["solve", "--config", &cfg, "--seed", "43"]);
    let b = read();
    qseig(&["solve", "--config", &cfg, "--seed", "42"]);
    assert_ne!(a, b);
    assert_eq!(a, read());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}scheme.max_steps = 5\noutputs.history_csv = h.csv\nreference.kind = none\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    let run = |threads: &str| {
        let out = Command::new(env!("CARGO_BIN_EXE_qseig"))
            .args(["solve", "--config", &cfg])
            .env("QSEIG_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(2));
        fs::read_to_string(dir.path().join("h.csv")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}

#[test]
fn tau_sweep_usage_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}outputs.sweep_csv = sweep.csv\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    assert_eq!(qseig(&["tau-sweep", "--config", &cfg, "--tau", "0.5"]).status.code(), Some(1));
    assert!(!dir.path().join("sweep.csv").exists());

    let out = qseig(&["tau-sweep", "--config", &cfg, "--tau", "0.5,0.5", "--serial"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 2);
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 3);
        assert_eq!(cells[1], cells[2]);
    }
}

#[test]
fn tau_sweep_propagates_sub_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}scheme.max_steps = 4\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    let out = qseig(&["tau-sweep", "--config", &cfg, "--tau", "0.3,0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reference_writes_listing_and_state() {
    let dir = tempfile::tempdir().unwrap();
    let listing = |tol: &str| {
        let body = format!("{SMALL}n_eig = 6\nreference.tol = {tol}\noutputs.report = ref_{tol}.txt\noutputs.state = ref_{tol}.bin\n")
            .replace("n_eig = 3\n", "");
        let cfg = write_config(dir.path(), &format!("c{tol}.conf"), &body);
        let out = qseig(&["reference", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let text = fs::read_to_string(dir.path().join(format!("ref_{tol}.txt"))).unwrap();
        let rows: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .map(|l| {
                let c: Vec<&str> = l.split(',').collect();
                (c[1].parse().unwrap(), c[2].parse().unwrap())
            })
            .collect();
        rows
    };
    let fine = listing("1e-10");
    let coarse = listing("1e-6");
    assert_eq!(fine.len(), 6);
    // analytic pattern 1, 2, 2, 3, 3, 3 up to discretization error
    for (k, want) in [1.0, 2.0, 2.0, 3.0, 3.0, 3.0].iter().enumerate() {
        assert!((fine[k].0 - want).abs() < 0.15, "{fine:?}");
    }
    assert!(fine.iter().all(|r| r.1 < 1e-10));
    assert!(coarse.iter().all(|r| r.1 < 1e-6));
    assert!(coarse.iter().map(|r| r.1).fold(0.0, f64::max) > fine.iter().map(|r| r.1).fold(0.0, f64::max));

    let a = fs::read(dir.path().join("ref_1e-10.bin")).unwrap();
    let u = read_state(&dir.path().join("ref_1e-10.bin")).unwrap();
    assert_eq!(qseig::state_io::encode(&u), a);
    assert_eq!((u.rows(), u.cols()), (361, 6));

    // a solve can use the file as its reference
    let body = format!("{SMALL}reference.kind = file\nreference.path = ref_1e-10.bin\noutputs.report = r.txt\n");
    let cfg = write_config(dir.path(), "solve.conf", &body);
    assert_eq!(qseig(&["solve", "--config", &cfg]).status.code(), Some(0));
    let errs = report_errors(&fs::read_to_string(dir.path().join("r.txt")).unwrap());
    assert!(errs.iter().all(|&e| e <= 1e-8), "{errs:?}");
}

#[test]
fn reference_without_convergence_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}reference.max_iter = 2\n");
    let cfg = write_config(dir.path(), "c.conf", &body);
    assert_eq!(qseig(&["reference", "--config", &cfg]).status.code(), Some(5));
}

#[test]
fn verify_tiny_dense_problem_includes_closed_form_check() {
    let dir = tempfile::tempdir().unwrap();
    let body = "problem.dim = 1\nproblem.lower = 0\nproblem.upper = 1\nproblem.points = 20\n\
                problem.potential = zero\nproblem.c_lap = 1\nn_eig = 2\n";
    let cfg = write_config(dir.path(), "c.conf", body);
    let out = qseig(&["verify", "--config", &cfg]);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 4);
    let text = String::from_utf8_lossy(&out.stdout);
    let line = text.lines().find(|l| l.contains("closed form matches RK4")).expect("check listed");
    assert!(line.starts_with("pass"), "{line}");
    assert!(line.contains("on a 20 grid"));
    let green = text.lines().find(|l| l.contains("green duality")).unwrap();
    assert!(green.starts_with("pass"));
}

#[test]
fn verify_coulomb_without_shift_reports_definiteness() {
    let dir = tempfile::tempdir().unwrap();
    let body = "problem.dim = 3\nproblem.lower = -10\nproblem.upper = 10\nproblem.points = 9\n\
                problem.potential = soft_coulomb\nproblem.sigma = 0\nn_eig = 2\nsolver.method = direct\n";
    let cfg = write_config(dir.path(), "c.conf", body);
    let out = qseig(&["verify", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("not positive definite") && err.contains("sigma"), "{err}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = qseig::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.n_eig >= 1);
        count += 1;
    }
    assert_eq!(count, 3);
}
