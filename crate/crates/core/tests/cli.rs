use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_engine-health"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn prepare(dir: &Path) {
    for args in [
        &["--seed", "1", "generate", "--out", "data.csv"][..],
        &["--seed", "1", "split", "--input", "data.csv", "--train", "2000", "--train-out", "train.csv", "--test-out", "test.csv"],
    ] {
        let o = cli(dir, args);
        assert!(o.status.success(), "{}", stderr(&o));
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["train", "--input", "x", "--out", "y", "--som", "7by7"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(cli(dir.path(), &["detect", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_bundle_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let o = cli(
        dir.path(),
        &["detect", "--input", "test.csv", "--bundle", "no/such/bundle.json", "--out", "v.csv"],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no/such/bundle.json"), "{}", stderr(&o));
}

#[test]
fn train_writes_bundle_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    let o = cli(
        dir.path(),
        &["train", "--input", "train.csv", "--out", "b.json", "--k", "5", "--som", "7x7", "--seed", "1"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("global interval"));
    let bundle: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(bundle["config"]["k"], 5);
    assert_eq!(bundle["som"]["rows"], 7);
    assert_eq!(bundle["som"]["prototypes"].as_array().unwrap().len(), 49);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    prepare(dir.path());
    std::fs::write(
        dir.path().join("cfg.toml"),
        "seed = 3\n\n[train]\nk = 3\nsom_rows = 4\nsom_cols = 4\n",
    )
    .unwrap();
    let o = cli(dir.path(), &["--config", "cfg.toml", "train", "--input", "train.csv", "--out", "b.json", "--k", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let bundle: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("b.json")).unwrap()).unwrap();
    assert_eq!(bundle["config"]["k"], 4);
    assert_eq!(bundle["config"]["som_rows"], 4);
    assert_eq!(bundle["config"]["seed"], 3);

    std::fs::write(dir.path().join("bad.toml"), "[train]\nkay = 3\n").unwrap();
    let o = cli(dir.path(), &["--config", "bad.toml", "train", "--input", "train.csv", "--out", "b.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn full_chain_with_maps_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    for args in [
        &["train", "--input", "train.csv", "--out", "b.json", "--som", "5x5"][..],
        &["--seed", "4", "inject", "--input", "test.csv", "--signature", "Defect 2", "--bundle", "b.json", "--window", "25", "--out", "bad.csv", "--record", "rec.json"],
        &["detect", "--input", "bad.csv", "--bundle", "b.json", "--out", "g.csv", "--plot", "plot.svg", "--record", "rec.json"],
        &["--mode", "local", "detect", "--input", "bad.csv", "--bundle", "b.json", "--out", "l.csv"],
        &["eval", "--case", "rec.json,g.csv,l.csv", "--out", "report.csv", "--text", "report.txt"],
        &["--mode", "local", "export-maps", "--bundle", "b.json", "--out-dir", "maps", "--input", "bad.csv"],
    ] {
        let o = cli(d, args);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    }
    let header = std::fs::read_to_string(d.join("g.csv")).unwrap();
    assert!(header.starts_with("engine,timestamp,distance,bmu,threshold,healthy,rule"));
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("Defect 2,"));
    assert!(std::fs::read_to_string(d.join("plot.svg")).unwrap().contains("<svg"));
    let maps = std::fs::read_dir(d.join("maps")).unwrap().count();
    assert_eq!(maps, 12);
    assert!(std::fs::read_to_string(d.join("maps/FF.pgm")).unwrap().starts_with("P2\n200 200\n255\n"));
}

#[test]
fn signature_from_file_and_unknown_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    prepare(d);
    std::fs::write(d.join("sig.json"), r#"{"name":"custom","offsets":{"FF":0.8}}"#).unwrap();
    let o = cli(d, &["inject", "--input", "test.csv", "--signature", "sig.json", "--window", "10", "--out", "x.csv", "--record", "r.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = cli(d, &["inject", "--input", "test.csv", "--signature", "Defect 99", "--out", "x.csv", "--record", "r.json"]);
    assert_eq!(o.status.code(), Some(2));
}
