use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use hetsvrg::harness::{
    emit_plotdata, problem_fingerprint, run_experiment, trace_file_name, Algorithm, CellStatus, ComparisonReport,
    ExperimentSpec,
};
use hetsvrg::optim::RunTrace;
use hetsvrg::problem::{generate_dataset, Task};
use hetsvrg::Error;

fn small_spec() -> ExperimentSpec {
    ExperimentSpec {
        algorithms: vec![Algorithm::Sgd, Algorithm::SvrgUniform, Algorithm::AsdSvrg],
        eta_grid: vec![0.01, 0.05],
        seeds: vec![1, 2],
        epochs: 3,
        inner_iters: 20,
        ..ExperimentSpec::linear()
    }
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            out.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path()).unwrap());
        }
    }
    out
}

#[test]
fn diverging_cell_leaves_other_cells_untouched() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&ExperimentSpec {
        output_dir: Some(a.path().into()),
        ..small_spec()
    })
    .unwrap();
    let report = run_experiment(&ExperimentSpec {
        eta_grid: vec![0.01, 0.05, 50.0],
        output_dir: Some(b.path().into()),
        ..small_spec()
    })
    .unwrap();
    let diverged: Vec<_> = report.cells.iter().filter(|c| c.diverged()).collect();
    assert_eq!(diverged.len(), 6);
    assert!(diverged.iter().all(|c| c.eta == 50.0));

    let with = dir_contents(b.path());
    for (name, bytes) in dir_contents(a.path()) {
        if name.starts_with("trace_") {
            assert_eq!(with.get(&name), Some(&bytes), "{name}");
        }
    }
    let report_csv = String::from_utf8(with["report.csv"].clone()).unwrap();
    assert_eq!(report_csv.matches("diverged@").count(), 6);
}

#[test]
fn sweeps_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, jobs) in [(&a, 1), (&b, 4)] {
        let spec = ExperimentSpec {
            output_dir: Some(dir.path().into()),
            jobs,
            ..small_spec()
        };
        let report = run_experiment(&spec).unwrap();
        emit_plotdata(&report, dir.path(), &dir.path().join("plots")).unwrap();
    }
    assert_eq!(dir_contents(a.path()), dir_contents(b.path()));
    assert_eq!(dir_contents(&a.path().join("plots")), dir_contents(&b.path().join("plots")));
}

#[test]
fn algorithms_share_each_seeds_problem() {
    let spec = small_spec();
    let report = run_experiment(&spec).unwrap();
    for &seed in &spec.seeds {
        let expected = problem_fingerprint(&spec.problem(seed).unwrap());
        assert_eq!(report.problem_fingerprints[&seed], expected);
    }
    assert_ne!(report.problem_fingerprints[&1], report.problem_fingerprints[&2]);
    // every algorithm starts from the same point, so the initial loss agrees
    for &seed in &spec.seeds {
        let initial: Vec<f64> = report
            .traces
            .iter()
            .filter(|(name, _)| name.ends_with(&format!("_seed{seed}.csv")))
            .map(|(_, t)| t.initial_loss())
            .collect();
        assert!(initial.windows(2).all(|w| w[0].to_bits() == w[1].to_bits()));
        assert_eq!(initial.len(), 6);
    }
}

#[test]
fn plotdata_shape_and_schema() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        algorithms: vec![Algorithm::SvrgUniform],
        eta_grid: vec![0.02],
        seeds: vec![4],
        epochs: 2,
        inner_iters: 3,
        output_dir: Some(dir.path().into()),
        ..ExperimentSpec::linear()
    };
    let report = run_experiment(&spec).unwrap();
    let files = emit_plotdata(&report, dir.path(), &dir.path().join("plots")).unwrap();
    assert_eq!(files.len(), 2);
    for f in &files {
        let text = std::fs::read_to_string(f).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(RunTrace::CSV_HEADER));
        assert_eq!(lines.count(), 6);
    }
    let trace = std::fs::read_to_string(dir.path().join(trace_file_name(Algorithm::SvrgUniform, 0.02, 4))).unwrap();
    assert_eq!(trace.lines().next(), Some(RunTrace::CSV_HEADER));
    assert_eq!(std::fs::read_to_string(&files[0]).unwrap(), trace);
}

#[test]
fn empty_report_gives_header_only_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = ComparisonReport {
        algorithms: vec![Algorithm::Sgd, Algorithm::AsdSvrg],
        ..ComparisonReport::default()
    };
    let files = emit_plotdata(&report, dir.path(), dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    for f in files {
        assert_eq!(std::fs::read_to_string(f).unwrap(), format!("{}\n", RunTrace::CSV_HEADER));
    }
}

#[test]
fn all_diverged_algorithm_has_no_best_row() {
    let report = run_experiment(&ExperimentSpec {
        algorithms: vec![Algorithm::SvrgUniform, Algorithm::AsdSvrg],
        eta_grid: vec![100.0],
        seeds: vec![1],
        epochs: 2,
        inner_iters: 10,
        ..ExperimentSpec::linear()
    })
    .unwrap();
    assert!(report.cells.iter().all(|c| matches!(c.status, CellStatus::Diverged { .. })));
    assert!(report.best.is_empty());
    assert!(matches!(
        hetsvrg::harness::grid_best(&report, Algorithm::AsdSvrg),
        Err(Error::AllDiverged(_))
    ));
}

#[test]
fn custom_csv_runs_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.csv");
    generate_dataset(Task::LogisticRegression, 4, 80, 3, 1.5, 2).unwrap().save_csv(&good).unwrap();
    let spec = ExperimentSpec {
        algorithms: vec![Algorithm::AsdSvrg],
        eta_grid: vec![0.1],
        seeds: vec![1, 2],
        epochs: 2,
        inner_iters: 5,
        ..ExperimentSpec::custom_csv(&good, Task::LogisticRegression)
    };
    let report = run_experiment(&spec).unwrap();
    assert_eq!(report.problem_fingerprints[&1], report.problem_fingerprints[&2]);
    assert!(report.cells.iter().all(|c| c.final_accuracy >= 0.0 && c.final_accuracy <= 1.0));

    let bad = dir.path().join("bad.csv");
    let text = std::fs::read_to_string(&good).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[3].split(',').collect();
    fields[3] = "oops";
    lines[3] = fields.join(",");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    match run_experiment(&ExperimentSpec::custom_csv(&bad, Task::LogisticRegression)) {
        Err(Error::Input { row, column, .. }) => assert_eq!((row, column.as_str()), (3, "f_1")),
        other => panic!("expected an input error, got {other:?}"),
    }
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hetsvrg"))
}

#[test]
fn cli_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli()
        .args(["run", "--preset", "linear", "--algos", "sgd,svrg,asd", "--etas", "0.01,0.05"])
        .args(["--epochs", "2", "--inner", "10", "--R", "2", "--seeds", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("algorithm,eta,"));
    assert_eq!(stdout.lines().count(), 4);
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("plots/best_asd_svrg.csv").exists());
}

#[test]
fn cli_reads_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(&cfg, "preset = logistic\nalgos = asd\nseeds = 3\nepochs = 1\ninner = 5\n").unwrap();
    let out = cli().args(["run", "--config"]).arg(&cfg).arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // the logistic preset's ASD grid has five points
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 6);
}

#[test]
fn cli_rates_and_protocol_test() {
    let out = cli()
        .args(["rates", "--kind", "asd_main", "--lambda", "1", "--eta", "0.05", "--T", "100"])
        .args(["--R", "4", "--tau", "0.1", "--lbar", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rho: f64 = text.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((rho - 0.2517).abs() < 1e-3);

    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("ledger.csv");
    let out = cli()
        .args(["protocol-test", "--M", "12", "--R", "3", "--draws", "2000", "--ledger-out"])
        .arg(&ledger)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 13);
    assert_eq!(std::fs::read_to_string(ledger).unwrap().lines().nth(1), Some("pc,28,0,0,3"));
}

#[test]
fn cli_failures_exit_nonzero_with_a_diagnostic() {
    for args in [
        vec!["run", "--algos", ""],
        vec!["run", "--algos", "adam"],
        vec!["rates", "--lambda", "0", "--eta", "0.1", "--T", "10", "--lbar", "1"],
        vec!["protocol-test", "--M", "4", "--R", "2", "--weights", "0,0,0,0"],
        vec!["run", "--preset", "csv", "--data", "/nonexistent/data.csv"],
    ] {
        let out = cli().args(&args).output().unwrap();
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.starts_with("error: "), "{args:?}: {err}");
    }
}
