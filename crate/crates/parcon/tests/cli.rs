//! End-to-end checks of the command-line interface: every exit code, and
//! bit-identical outputs for identical configuration and seed.

use std::path::Path;
use std::process::{Command, Output};

fn parcon(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parcon"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_problem(dir: &Path, n_x: usize, n_t: usize) -> std::path::PathBuf {
    let spec = parcon::model::reference_instance(n_x, n_t);
    let path = dir.join("instance.prob");
    std::fs::write(&path, parcon::model::render_problem_file(&spec)).unwrap();
    path
}

#[test]
fn solve_then_check_pipeline_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let prob = write_problem(tmp.path(), 31, 150);
    let solve = parcon(&[ "solve", prob.to_str().unwrap(), "-o", "run"], tmp.path());
    assert_eq!(solve.status.code(), Some(0), "{}", String::from_utf8_lossy(&solve.stderr));
    for file in ["control.csv", "state.csv", "costate.csv", "mu.csv", "log.json", "spec.prob"] {
        assert!(tmp.path().join("run").join(file).exists(), "missing {file}");
    }
    let foc = parcon(&["check-foc", "run"], tmp.path());
    assert_eq!(foc.status.code(), Some(0), "{}", String::from_utf8_lossy(&foc.stdout));
    assert!(tmp.path().join("run/foc_report.json").exists());
    let soc = parcon(&["check-soc", "run", "--count", "8"], tmp.path());
    assert_eq!(soc.status.code(), Some(0), "{}", String::from_utf8_lossy(&soc.stdout));
    assert!(tmp.path().join("run/soc_report.json").exists());
    assert!(tmp.path().join("run/min_v.csv").exists());
    let plot = parcon(&["plot", "run"], tmp.path());
    assert_eq!(plot.status.code(), Some(0));
    assert!(tmp.path().join("run/figure1.gp").exists());
}

#[test]
fn missing_problem_file_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = parcon(&["solve", "no_such_file.prob", "-o", "run"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no such problem file"));
}

#[test]
fn empty_run_directory_is_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::create_dir(tmp.path().join("empty")).unwrap();
    let out = parcon(&["check-foc", "empty"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn truncated_solve_exits_nonconverged_with_partial_results() {
    let tmp = tempfile::tempdir().unwrap();
    let prob = write_problem(tmp.path(), 31, 150);
    let out = parcon(
        &["solve", prob.to_str().unwrap(), "-o", "run", "--outer-iters", "1", "--inner-iters", "3"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(tmp.path().join("run/control.csv").exists());
    assert!(tmp.path().join("run/log.json").exists());
}

#[test]
fn failed_conditions_exit_three() {
    // A run cut off after one outer iteration is feasible-ish but far from
    // stationary; the first-order report must flag it.
    let tmp = tempfile::tempdir().unwrap();
    let prob = write_problem(tmp.path(), 31, 150);
    let solve = parcon(
        &["solve", prob.to_str().unwrap(), "-o", "run", "--outer-iters", "1", "--inner-iters", "2"],
        tmp.path(),
    );
    assert_eq!(solve.status.code(), Some(2));
    let foc = parcon(&["check-foc", "run"], tmp.path());
    assert_eq!(foc.status.code(), Some(3), "{}", String::from_utf8_lossy(&foc.stdout));
    let listing = String::from_utf8_lossy(&foc.stdout);
    assert!(listing.contains("FAIL"), "failures should be listed:\n{listing}");
}

#[test]
fn identical_config_and_seed_reproduce_bit_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let prob = write_problem(tmp.path(), 21, 80);
    for run in ["a", "b"] {
        let out = parcon(
            &["solve", prob.to_str().unwrap(), "-o", run, "--seed", "7"],
            tmp.path(),
        );
        assert_eq!(out.status.code(), Some(0));
        let soc = parcon(&["check-soc", run, "--count", "6", "--seed", "7"], tmp.path());
        assert_eq!(soc.status.code(), Some(0));
    }
    for file in ["control.csv", "state.csv", "costate.csv", "mu.csv", "log.json", "soc_report.json"]
    {
        let a = std::fs::read(tmp.path().join("a").join(file)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn coarse_example_b_reports_warnings_but_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = parcon(&["example-b", "-o", "exb", "--nx", "21", "--nt", "37"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("WARN"), "coarse grid should warn:\n{text}");
    assert!(tmp.path().join("exb/comparison.csv").exists());
}

#[test]
fn example_b_plot_emits_self_contained_script() {
    let tmp = tempfile::tempdir().unwrap();
    let out = parcon(
        &["example-b", "-o", "exb", "--nx", "21", "--nt", "60", "--plot"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let script = std::fs::read_to_string(tmp.path().join("exb/figure1.gp")).unwrap();
    for referenced in ["control.csv", "y1.csv", "analytic.csv"] {
        assert!(script.contains(referenced));
        assert!(tmp.path().join("exb").join(referenced).exists(), "missing {referenced}");
    }
}

#[test]
fn thread_cap_environment_variable_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let prob = write_problem(tmp.path(), 21, 80);
    let solve = parcon(&["solve", prob.to_str().unwrap(), "-o", "run"], tmp.path());
    assert_eq!(solve.status.code(), Some(0));
    let out = Command::new(env!("CARGO_BIN_EXE_parcon"))
        .args(["check-soc", "run", "--count", "6"])
        .env("PARCON_THREADS", "1")
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    // Same result as the unrestricted run.
    let restricted = std::fs::read(tmp.path().join("run/soc_report.json")).unwrap();
    let rerun = parcon(&["check-soc", "run", "--count", "6"], tmp.path());
    assert_eq!(rerun.status.code(), Some(0));
    let unrestricted = std::fs::read(tmp.path().join("run/soc_report.json")).unwrap();
    assert_eq!(restricted, unrestricted);
}
