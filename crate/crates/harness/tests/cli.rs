mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use common::small_config;

fn vmra(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_vmra")).args(args).output().unwrap();
    assert!(out.status.success(), "vmra {args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn vmra_fails(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_vmra")).args(args).output().unwrap();
    assert!(!out.status.success(), "vmra {args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn csv_rows(p: &Path) -> (Vec<String>, usize) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    (header, r.records().count())
}

#[test]
fn full_command_line_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut cfg = small_config(40);
    cfg.train.epochs = 2;
    let cfg_path = root.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let (data, ckpt) = (root.join("data"), root.join("ckpt"));

    vmra(&["gen-data", "--config", s(&cfg_path), "--out", s(&data)]);
    let (header, n) = csv_rows(&data.join("manifest.csv"));
    assert_eq!(
        header,
        [
            "subject_id",
            "timestep",
            "view",
            "image_path",
            "age_years",
            "delta_t_years",
            "present",
            "event_year",
            "followup_years",
            "dense_area"
        ]
    );
    assert_eq!(n, 40 * 5 * 4);

    vmra(&["train", "--config", s(&cfg_path), "--data", s(&data), "--out", s(&ckpt)]);
    for f in ["manifest.json", "meta.json", "train_log.csv"] {
        assert!(ckpt.join(f).exists(), "{f}");
    }
    assert_eq!(csv_rows(&ckpt.join("train_log.csv")).1, 2);

    let report = root.join("report.csv");
    vmra(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "test", "--report", s(&report)]);
    let (header, n) = csv_rows(&report);
    assert_eq!(n, 40);
    assert!(header.contains(&"metric".to_string()));
    let (header, n) = csv_rows(&root.join("report.predictions.csv"));
    assert_eq!(n, 6);
    assert_eq!(header[0], "subject_id");
    assert_eq!(header[1..=5], ["P_1", "P_2", "P_3", "P_4", "P_5"]);
    assert!(header.ends_with(&["r_AA".into(), "label_event_year".into(), "followup_years".into()]));

    let asym = root.join("asym.csv");
    vmra(&["asym-inspect", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&asym)]);
    let (header, n) = csv_rows(&asym);
    assert_eq!(header, ["subject_id", "t", "view_pair", "D_max", "p_h", "p_w", "persistent", "r_AA"]);
    assert!(n >= 40 * 2);

    let bench = root.join("bench.csv");
    vmra(&["scan-bench", "--lmax", "128", "--channels", "4", "--state-dim", "4", "--repeats", "1", "--csv", s(&bench)]);
    let (header, n) = csv_rows(&bench);
    assert_eq!(n, 2);
    assert!(header.contains(&"speedup".to_string()));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let bad = root.join("bad.json");
    fs::write(&bad, r#"{"data": {"positive_fraction": 2.0}}"#).unwrap();
    let err = vmra_fails(&["gen-data", "--config", s(&bad), "--out", s(&root.join("d"))]);
    assert!(err.contains("positive_fraction"), "{err}");

    let err = vmra_fails(&["eval", "--ckpt", s(&root.join("missing")), "--data", s(root), "--report", s(&root.join("r.csv"))]);
    assert!(err.contains("checkpoint"), "{err}");
}
