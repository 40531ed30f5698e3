use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 5,
  "dataset": {
    "height": 24, "width": 24,
    "train": {"maps": 6, "templates": 2},
    "val": {"maps": 2, "templates": 1},
    "test": {"maps": 2, "templates": 1}
  },
  "model": {
    "arch": {"conv_channels": [4, 4], "hidden": [8]},
    "train": {"members": 2, "epochs": 1, "batch_maps": 3, "window": 12, "val_window": 12}
  },
  "mission": {"start": [3, 3], "goal": [20, 20]},
  "eval": {"maps": 1},
  "sweep": {"lambdas": [0.0, 2.0]}
}"#;

fn slipnav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slipnav"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.json"), TINY).unwrap();
    d
}

#[test]
fn help_and_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(slipnav(d.path(), &["--help"]).status.code(), Some(0));
    let o = slipnav(d.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    let o = slipnav(d.path(), &["mission", "--split", "mars"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mars"));
}

#[test]
fn config_errors_name_the_field() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.json"), r#"{"model": {"train": {"epochz": 2}}}"#).unwrap();
    let o = slipnav(d.path(), &["--config", "bad.json", "dataset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochz"), "{}", stderr(&o));
    let o = slipnav(d.path(), &["--config", "absent.json", "dataset"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn missing_upstream_artifacts_are_named() {
    let d = tiny_dir();
    let o = slipnav(d.path(), &["--config", "tiny.json", "--out", "run", "mission", "--split", "ua"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest.json") && stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn config_command_prints_resolved_json() {
    let d = tiny_dir();
    let o = slipnav(d.path(), &["--config", "tiny.json", "--seed", "11", "config"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("\"seed\": 11"));
    assert!(text.contains("\"lambdas\""));
}

#[test]
fn corrupt_dataset_is_a_runtime_failure() {
    let d = tiny_dir();
    let base = ["--config", "tiny.json", "--out", "run", "--threads", "1"];
    assert_eq!(slipnav(d.path(), &[&base[..], &["dataset"]].concat()).status.code(), Some(0));
    let maps = d.path().join("run/dataset/maps");
    let victim = fs::read_dir(&maps).unwrap().map(|e| e.unwrap().path()).find(|p| p.to_string_lossy().ends_with("slip.bin")).unwrap();
    fs::write(&victim, [0u8; 3]).unwrap();
    let o = slipnav(d.path(), &[&base[..], &["train"]].concat());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn full_command_sequence() {
    let d = tiny_dir();
    let base = ["--config", "tiny.json", "--out", "run"];
    let ok = |args: &[&str]| {
        let o = slipnav(d.path(), &[&base[..], args].concat());
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        String::from_utf8(o.stdout).unwrap()
    };
    ok(&["dataset"]);
    ok(&["train"]);
    ok(&["predict", "--split", "uga"]);
    let m = ok(&["mission", "--split", "ua", "--lambda", "1", "--adapt", "on"]);
    assert!(m.contains("sol "));
    let s = ok(&["sweep", "--split", "ug"]);
    assert_eq!(s.lines().count(), 2);
    let e = ok(&["eval"]);
    assert_eq!(e.lines().count(), 3);
    ok(&["render", "--split", "uga", "--maps", "1"]);

    let run = d.path().join("run");
    for sub in ["dataset", "model", "predict/uga", "mission/ua-lambda1-da", "sweep/ug", "eval", "render/uga"] {
        assert!(run.join(sub).join("run.json").is_file(), "{sub}");
    }
    let metrics = fs::read_to_string(run.join("mission/ua-lambda1-da/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\nsol,"));
    let sweep = fs::read_to_string(run.join("sweep/ug/sweep.csv")).unwrap();
    assert!(sweep.starts_with("lambda,metric,value\n"));

    let panel = run.join("render/uga/uga-0000");
    let legend = fs::read_to_string(panel.join("sd_total.txt")).unwrap();
    assert!(legend.contains("min ") && legend.contains("max "));
    let first = fs::read(panel.join("sd_total.ppm")).unwrap();
    assert!(first.starts_with(b"P6\n96 96\n255\n"));
    assert!(panel.join("path_plan.ppm").is_file() && panel.join("height.pgm").is_file());
    ok(&["render", "--split", "uga", "--maps", "1"]);
    assert_eq!(fs::read(panel.join("sd_total.ppm")).unwrap(), first);
}
