use std::path::Path;
use std::process::{Command, Output};

fn prgp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prgp")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn write_ngsim(path: &Path, with_preceding: bool) {
    let mut s = String::from("Vehicle_ID,Frame_ID,Global_Time,Local_X,Local_Y,v_Vel,v_Acc,");
    s.push_str(if with_preceding { "Preceding," } else { "" });
    s.push_str("Space_Headway,Time_Headway\n");
    for frame in 0..6 {
        let t = 1_118_846_980_200u64 + 100 * frame;
        for (id, y0, prec) in [(1, 100.0, 0), (2, 60.0, 1)] {
            let y = y0 + 3.0 * frame as f64;
            let gap = if prec == 0 { 0.0 } else { 40.0 };
            let p = if with_preceding { format!("{prec},") } else { String::new() };
            s.push_str(&format!("{id},{},{t},6.0,{y},30.0,0.0,{p}{gap},{}\n", 100 + frame, gap / 30.0));
        }
    }
    std::fs::write(path, s).unwrap();
}

const SMALL: &str = r#"{"seed": 2, "out_dir": "out",
  "data": {"source": "synth", "n_vehicles": 5, "horizon_s": 10.0},
  "train": {"iterations": 40},
  "calibration": {"models": ["Pipes", "Vel-DEF"], "starts": 2}}"#;

#[test]
fn ingest_ngsim_slice() {
    let dir = tempfile::tempdir().unwrap();
    write_ngsim(&dir.path().join("slice.csv"), true);
    std::fs::write(dir.path().join("cfg.json"), r#"{"data": {"source": "ngsim", "path": "slice.csv"}}"#).unwrap();
    let o = prgp(&["ingest", "--config", "cfg.json", "--out", "out"], dir.path());
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("records: 12") && stdout.contains("vehicles: 2"), "{stdout}");
    let canon = std::fs::read_to_string(dir.path().join("out/canonical.csv")).unwrap();
    assert_eq!(canon.lines().count(), 13);
    assert!(canon.lines().nth(7).unwrap().starts_with("2,0,"));
    assert!(canon.lines().nth(7).unwrap().contains(",1,30,"));
    assert!(dir.path().join("out/ingest_summary.json").is_file());
}

#[test]
fn missing_column_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    write_ngsim(&dir.path().join("slice.csv"), false);
    std::fs::write(dir.path().join("cfg.json"), r#"{"data": {"source": "ngsim", "path": "slice.csv"}}"#).unwrap();
    let o = prgp(&["ingest", "--config", "cfg.json", "--out", "out"], dir.path());
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error[schema]") && err.contains("Preceding"), "{err}");
}

#[test]
fn synth_exports_observations_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&prgp(&["synth", "--config", "cfg.json"], dir.path()));
    let obs = std::fs::read_to_string(dir.path().join("out/canonical.csv")).unwrap();
    let truth = std::fs::read_to_string(dir.path().join("out/truth.csv")).unwrap();
    assert_eq!(obs.lines().count(), truth.lines().count());
    assert_ne!(obs, truth);

    // the same file can be read back as a canonical source
    std::fs::write(
        dir.path().join("canon.json"),
        r#"{"data": {"source": "canonical", "path": "out/canonical.csv", "truth_path": "out/truth.csv"}}"#,
    )
    .unwrap();
    ok(&prgp(&["ingest", "--config", "canon.json", "--out", "again"], dir.path()));
    assert_eq!(std::fs::read_to_string(dir.path().join("again/canonical.csv")).unwrap(), obs);
}

#[test]
fn calibrate_two_models() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&prgp(&["calibrate", "--config", "cfg.json"], dir.path()));
    let params = std::fs::read_to_string(dir.path().join("out/calibration_params.csv")).unwrap();
    let perf = std::fs::read_to_string(dir.path().join("out/calibration_performance.csv")).unwrap();
    assert_eq!(params.lines().count(), 3);
    assert_eq!(perf.lines().count(), 3);
    assert!(params.lines().nth(2).unwrap().starts_with("Vel-DEF,0,,,,,"));
    let veldef: Vec<&str> = perf.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(veldef[1], "velocity");
    assert!(veldef[5].parse::<f64>().is_ok());
}

#[test]
fn train_names_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&prgp(&["train", "--config", "cfg.json", "--gamma", "0", "--out", "gp"], dir.path()));
    let mut names: Vec<String> = std::fs::read_dir(dir.path().join("gp"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["GP.model.json", "GP_trace.csv"]);

    ok(&prgp(&["train", "--config", "cfg.json", "--equations", "Pipes", "--out", "a"], dir.path()));
    ok(&prgp(&["train", "--config", "cfg.json", "--equations", "Pipes", "--out", "b"], dir.path()));
    for f in ["GP_trace.csv", "PRGP-Pipes_trace.csv", "PRGP-Pipes.model.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let trace = std::fs::read_to_string(dir.path().join("a/PRGP-Pipes_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,negative_elbo,data_term,reg_term_Pipes");
    assert_eq!(trace.lines().count(), 41);
}

#[test]
fn evaluate_oracle_and_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
    ok(&prgp(&["train", "--config", "cfg.json", "--gamma", "0"], dir.path()));
    std::fs::write(
        dir.path().join("eval.json"),
        r#"{"seed": 2, "out_dir": "out",
            "data": {"source": "synth", "n_vehicles": 5, "horizon_s": 10.0},
            "evaluation": {"models": ["out/GP.model.json", "out/GP.model.json"], "oracle": true, "plots": false}}"#,
    )
    .unwrap();
    ok(&prgp(&["evaluate", "--config", "eval.json"], dir.path()));
    let report = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 21);
    assert_eq!(rows[..7], rows[7..14]);
    for r in &rows[14..] {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells[0], "Oracle");
        assert_eq!(cells[3], "0");
    }

    ok(&prgp(&["report", "--config", "eval.json"], dir.path()));
    assert!(dir.path().join("out/plots/run_Oracle_velocity.svg").is_file());
    assert!(dir.path().join("out/plots/run_GP_elbo.svg").is_file());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 3}"#).unwrap();
    let o = prgp(&["train", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("prgp: error[config]"));

    let o = prgp(&["report", "--out", "nothing-here"], dir.path());
    assert_eq!(o.status.code(), Some(2));

    let o = prgp(&["train", "--test-fraction", "1.5"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
