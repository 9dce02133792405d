use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lab_cli::ExperimentConfig;
use sha2::{Digest, Sha256};

fn lab() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lab"));
    c.env_remove("LAB_JOBS");
    c
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn run_in(dir: &Path, json: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir, "config.json", json);
    lab().arg("run").arg(&cfg).arg("--out").arg(dir.join(out)).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn minimal_solve_writes_solution_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        r#"{"schema_version":1,"command":"solve","dim":1,"coefficient_kind":"constant","xd_cells":16,"time_count":8}"#,
        "out",
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let csv = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    assert!(csv.starts_with("t,xprime,xd,u\n"));
    assert_eq!(csv.lines().count(), 1 + 9 * 17);
    let bin = std::fs::read(out.join("solution.bin")).unwrap();
    assert_eq!(bin.len(), 9 * 17 * 8);
    let sidecar: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("solution.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([9, 1, 17]));
    assert!(std::fs::read_to_string(out.join("stiffness.mtx")).unwrap().starts_with("%%MatrixMarket matrix coordinate real general"));
    let mesh: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("mesh.json")).unwrap()).unwrap();
    assert_eq!(mesh["xd_nodes"].as_array().unwrap().len(), 17);

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("MANIFEST.json")).unwrap()).unwrap();
    let arts = manifest["artifacts"].as_array().unwrap();
    assert!(arts.len() >= 8);
    for a in arts {
        let bytes = std::fs::read(out.join(a["path"].as_str().unwrap())).unwrap();
        assert_eq!(a["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(a["bytes"].as_u64().unwrap() as usize, bytes.len());
    }
    assert!(manifest["created_unix"].as_u64().is_some());
    let leftovers: Vec<_> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn bundle_config_echo_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        r#"{"schema_version":1,"command":"duality","xd_cells":8,"time_count":5,"lambdas":[1,5],"samples":2}"#,
        "out",
        &["--seed", "11"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bundle: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("out/bundle.json")).unwrap()).unwrap();
    let echo = serde_json::to_string(&bundle["config"]).unwrap();
    let parsed = ExperimentConfig::from_json(&echo).unwrap();
    assert_eq!(parsed.seed, 11);
    assert_eq!(serde_json::to_value(&parsed).unwrap(), bundle["config"]);
    assert_eq!(bundle["reports"].as_array().unwrap().len(), 4);
    assert!(!echo.contains("created"));
}

#[test]
fn sweep_grid_gives_three_rows_and_log_x_script() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        r#"{"schema_version":1,"command":"sweep","xd_cells":16,"time_count":10,"lambdas":[1,10,100]}"#,
        "out",
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("out/report.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "check_id,lambda,p,mesh_M,dt,seed,rho0,gamma_measured,lhs,rhs,ratio,pass");
    assert_eq!(csv.lines().count(), 4);
    let gp = std::fs::read_to_string(tmp.path().join("out/report.gp")).unwrap();
    assert!(gp.contains("set logscale x\n") && gp.contains("'report.csv'"));
}

#[test]
fn misspelt_key_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"schema_version":1,"command":"solve","lamda":10}"#, "out", &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lamda"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    for json in [
        r#"{"command":"solve"}"#,
        r#"{"schema_version":9,"command":"solve"}"#,
        r#"{"schema_version":1,"command":"fly"}"#,
        r#"{"schema_version":1,"command":"solve","xd_cells":0}"#,
        r#"{"schema_version":1,"command":"solve","nu":1.5}"#,
        r#"{"schema_version":1,"command":"mms","mms_cells":[8,16]}"#,
        r#"{"schema_version":1,"command":"trace","p":1.5}"#,
        r#"{"schema_version":1,"command":"caccioppoli"}"#,
        "not json",
    ] {
        let o = run_in(tmp.path(), json, "out", &[]);
        assert_eq!(o.status.code(), Some(2), "{json}: {}", stderr(&o));
    }
    let o = lab().arg("run").arg(tmp.path().join("missing.json")).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn solver_failure_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        r#"{"schema_version":1,"command":"solve","dim":2,"xprime_count":4,"xd_cells":8,"time_count":2,"linear_tol":1e-300}"#,
        "out",
        &[],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("did not converge"));
}

#[test]
fn assertion_failure_echoes_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(
        tmp.path(),
        r#"{"schema_version":1,"command":"mms","mms_cells":[8,16,32],"min_rate0":5}"#,
        "out",
        &[],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("fitted rates") && err.contains("\n  16,"), "{err}");
    assert!(tmp.path().join("out/errors.csv").exists());
}

#[test]
fn mms_writes_error_table_and_log_log_script() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), r#"{"schema_version":1,"command":"mms","mms_cells":[16,32,64]}"#, "out", &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("out/errors.csv")).unwrap();
    assert!(csv.starts_with("M,dt,e0,e1,rate0,rate1\n"));
    assert_eq!(csv.lines().count(), 4);
    let gp = std::fs::read_to_string(tmp.path().join("out/errors.gp")).unwrap();
    assert!(gp.contains("set logscale xy") && gp.contains("slope 1") && gp.contains("slope 2"));
    assert!(gp.contains("'errors.csv'"));
}

#[test]
fn reruns_are_byte_identical_across_job_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let json = r#"{"schema_version":1,"command":"sweep","xd_cells":16,"time_count":10,"lambdas":[1,10],"p_grid":[2,4],"coefficient_kinds":["constant","xd_only"],"refine":true}"#;
    let a = run_in(tmp.path(), json, "a", &["--jobs", "1"]);
    let cfg = write_config(tmp.path(), "config.json", json);
    let b = lab().arg("run").arg(&cfg).arg("--out").arg(tmp.path().join("b")).env("LAB_JOBS", "3").output().unwrap();
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    let (x, y) = (csv_files(&tmp.path().join("a")), csv_files(&tmp.path().join("b")));
    assert_eq!(x.len(), 2);
    assert_eq!(x, y);
    let bundle = |d: &str| std::fs::read(tmp.path().join(d).join("bundle.json")).unwrap();
    let (ba, bb) = (String::from_utf8(bundle("a")).unwrap(), String::from_utf8(bundle("b")).unwrap());
    assert_eq!(ba.replace("/a\"", ""), bb.replace("/b\"", ""));
}

#[test]
fn every_command_runs() {
    let local = r#""xd_cells":32,"grading_exponent":1,"time_count":16,"sources":"local","coefficient_kind":"xd_only","lambdas":[0,1]"#;
    let cases = [
        ("solve", r#""xd_cells":8,"time_count":4,"lambdas":[1,100]"#.to_string(), "report.csv"),
        ("mms", r#""mms_cells":[8,16,32]"#.into(), "errors.csv"),
        ("sweep", r#""xd_cells":8,"time_count":5"#.into(), "report.csv"),
        ("caccioppoli", local.into(), "report.csv"),
        ("wlemma", local.into(), "report.csv"),
        ("lipschitz", format!(r#"{local},"refine":true"#), "report_refined.csv"),
        ("duality", r#""dim":2,"xprime_count":4,"xd_cells":6,"time_count":4"#.into(), "report.csv"),
        ("corollary2", r#""xd_cells":16,"time_count":16,"p_grid":[2,4]"#.into(), "report.csv"),
        ("trace", r#""xd_cells":64,"time_count":8,"p_grid":[2,4],"samples":2"#.into(), "norms.csv"),
        ("hardy", r#""xd_cells":16,"time_count":1,"p_grid":[1.5,3],"samples":3"#.into(), "norms.csv"),
        (
            "oscillation",
            r#""xd_cells":8,"time_count":8,"coefficient_kinds":["constant","xd_only","oscillatory"]"#.into(),
            "oscillation_xd_only.csv",
        ),
    ];
    let tmp = tempfile::tempdir().unwrap();
    for (cmd, extra, artifact) in cases {
        let json = format!(r#"{{"schema_version":1,"command":"{cmd}",{extra}}}"#);
        let o = run_in(tmp.path(), &json, cmd, &[]);
        assert_eq!(o.status.code(), Some(0), "{cmd}: {}", stderr(&o));
        let dir = tmp.path().join(cmd);
        assert!(dir.join(artifact).exists(), "{cmd}: missing {artifact}");
        assert!(dir.join("MANIFEST.json").exists() && dir.join("bundle.json").exists());
    }
    let hardy = std::fs::read_to_string(tmp.path().join("hardy/norms.csv")).unwrap();
    assert!(hardy.starts_with("field_id,p,alpha,order,region,value\n"));
    assert_eq!(hardy.lines().count(), 1 + 2 * 3 * 2 * 2);
    let osc = std::fs::read_to_string(tmp.path().join("oscillation/oscillation_constant.csv")).unwrap();
    assert!(osc.starts_with("center_t,center_xprime,center_xd,rho,value\n"));
    assert!(osc.lines().skip(1).all(|l| l.ends_with(",0")));
}
