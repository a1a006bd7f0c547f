//! End-to-end runs of the `sobolev-forge` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sobolev_forge::audit_class;
use sobolev_forge::io::resnet_from_json;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sobolev-forge"))
        .args(args)
        .env_remove("SOBOLEV_FORGE_THREADS")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const RATE: &str = r#"{"kind":"euclidean-rate","target":"sinprod","alpha":2,"dim":2,"orders":[0],"n":[2,4,8]}"#;

#[test]
fn rate_study_writes_one_row_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rate.json", RATE);
    let out = dir.path().join("out");
    let o = forge(&["rate-study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("rate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 3, "{csv}");
    let ns: Vec<&str> = rows.iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(ns, ["2", "4", "8"]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let slope = summary["slopes"][0]["slope"].as_f64().unwrap();
    assert!((-2.6..=-1.4).contains(&slope), "slope {slope}");
    assert_eq!(summary["passed"], true);
    assert!(fs::read_to_string(out.join("rate.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn studies_are_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "rate.json", RATE);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = forge(&[
            "rate-study",
            "--config",
            &cfg,
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        csvs.push(fs::read(out.join("rate.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn missing_field_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"kind":"euclidean-rate","target":"sinprod","dim":2,"n":[2,4,8]}"#,
    );
    let o = forge(&["rate-study", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        r#"{"kind":"euclidean-rate","target":"sinprod","alpha":2,"dim":2,"n":[2,4],"colour":"red"}"#,
    );
    let o = forge(&["rate-study", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"), "{}", stderr(&o));
}

#[test]
fn unknown_target_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = forge(&[
        "build",
        "--target",
        "nope",
        "--dim",
        "2",
        "--alpha",
        "2",
        "--mt",
        "2",
        "--jt",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn audit_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = forge(&[
        "build", "--target", "sinprod", "--dim", "2", "--alpha", "2", "--mt", "3", "--jt", "3", "--out", out,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let net_path = dir.path().join("network.json");
    let model = resnet_from_json(&fs::read_to_string(&net_path).unwrap()).unwrap();
    let want = serde_json::to_value(audit_class(&model)).unwrap();

    let o = forge(&["audit", "--net", net_path.to_str().unwrap(), "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(got, want);

    let cfg = write_config(
        dir.path(),
        "audit.json",
        &format!(
            r#"{{"kind":"audit","network":{}}}"#,
            serde_json::to_string(&net_path).unwrap()
        ),
    );
    let o = forge(&["audit", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let got: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(got, want);
    let saved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("audit.json")).unwrap()).unwrap();
    assert_eq!(saved, want);

    let o = forge(&[
        "eval",
        "--net",
        net_path.to_str().unwrap(),
        "--point",
        "0.3,0.6",
        "--point",
        "0.5,0.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let values: Vec<f64> = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        values,
        vec![model.forward(&[0.3, 0.6]).unwrap(), model.forward(&[0.5, 0.5]).unwrap()]
    );
}

fn psi(t: f64) -> f64 {
    let a = t.abs();
    if a <= 1.0 {
        1.0
    } else if a <= 2.0 {
        2.0 - a
    } else {
        0.0
    }
}

#[test]
fn saved_psi_matches_its_definition() {
    let dir = tempfile::tempdir().unwrap();
    let o = forge(&[
        "net-io",
        "save-psi",
        "--m",
        "1",
        "--n",
        "4",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let model = resnet_from_json(&fs::read_to_string(dir.path().join("psi.json")).unwrap()).unwrap();
    for i in 0..1001 {
        let x = -0.5 + 2.0 * (i as f64 + 0.37) / 1001.0;
        let got = model.forward(&[x, 0.0]).unwrap();
        assert!((got - psi(12.0 * (x - 0.25))).abs() <= 1e-12, "x={x}: {got}");
    }
}

#[test]
fn net_io_roundtrip_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let o = forge(&[
        "net-io",
        "save-psi",
        "--m",
        "0",
        "--n",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = dir.path().join("psi.json");
    let o = forge(&["net-io", "check", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("bit-exact"));

    let text = fs::read_to_string(&path).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["version"] = serde_json::json!(99);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, serde_json::to_string(&doc).unwrap()).unwrap();
    let o = forge(&["net-io", "check", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version"), "{}", stderr(&o));
}

#[test]
fn failed_check_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "strict.json",
        r#"{"kind":"euclidean-rate","target":"sinprod","alpha":2,"dim":2,"orders":[0],"n":[2,4],
            "checks":[{"order":0,"min":-10.0,"max":-9.0}]}"#,
    );
    let o = forge(&["rate-study", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("FAIL"), "{}", stderr(&o));
}
