use std::process::{Command, Output};

fn mixps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixps")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_report_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let data = dir.path().join("data.bin");
    let o = mixps(&[
        "run",
        "--nodes",
        "2",
        "--epochs",
        "2",
        "--technique",
        "topk=10",
        "--out",
        out.to_str().unwrap(),
        "--dataset-out",
        data.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("final rmse"));
    for f in ["report.json", "epochs.csv", "histogram.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["num_replicated"], 10);
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(&std::fs::read(&data).unwrap()[..8], b"MIXPSDS1");
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        "epochs = 1\nseed = 3\n[workload]\nkind = \"embed\"\n[workload.data]\nentities = 300\npairs = 2000\n[cluster]\nnum_nodes = 3\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = mixps(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--conformity",
        "L2",
        "--nodes",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["workload"], "embed");
    assert_eq!(report["spec"]["cluster"]["num_nodes"], 2);
    assert_eq!(report["spec"]["seed"], 3);
    assert_eq!(report["num_keys"], 300);
    assert!(report["sampled_chi_square"]["passed"].as_bool().unwrap());
}

#[test]
fn sweep_prints_one_row_per_bound() {
    let o = mixps(&["sweep", "--nodes", "2", "--technique", "topk=5", "--bounds", "1,50,off"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    for label in ["1ms", "50ms", "off"] {
        assert!(text.lines().any(|l| l.trim_start().starts_with(label)), "{label} missing:\n{text}");
    }
}

#[test]
fn conformity_battery_exit_codes() {
    let ok = mixps(&["verify-conformity", "--scheme", "pooled-reuse", "--draws", "50000", "--seed", "4"]);
    assert!(ok.status.success(), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("exact_use_count"));

    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("b.json");
    let o = mixps(&[
        "verify-conformity",
        "--scheme",
        "independent",
        "--draws",
        "20000",
        "--keys",
        "10",
        "--zipf",
        "0",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert!(v["results"].as_array().unwrap().iter().any(|r| r["name"] == "chi_square"));
}

#[test]
fn battery_failure_gives_nonzero_exit() {
    // At alpha = 0.999 a conforming sampler is rejected 99.9% of the time.
    let o = mixps(&["verify-conformity", "--scheme", "independent", "--draws", "20000", "--alpha", "0.999"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("[FAIL] chi_square"));
}

#[test]
fn bad_arguments_are_rejected() {
    assert_eq!(mixps(&["run", "--technique", "bogus"]).status.code(), Some(2));
    assert_eq!(mixps(&["run", "--conformity", "L7"]).status.code(), Some(2));
    assert_eq!(mixps(&["verify-conformity", "--scheme", "nope"]).status.code(), Some(2));
}
