use std::path::Path;
use std::process::{Command, Output};

use rough_burgers::experiment::{read_csv, write_csv};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rough-burgers")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn validate_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS Chen relation"));
    assert!(!text.contains("FAIL"));
    assert!(dir.path().join("report.csv").exists());
    assert!(dir.path().join("checks.csv").exists());
}

#[test]
fn simulate_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    // Same relative output directory, so the echoed configurations agree.
    for d in [&a, &b] {
        let o = Command::new(env!("CARGO_BIN_EXE_rough-burgers"))
            .args(["simulate", "--m", "64", "--dt", "0.001", "--ensemble", "2", "--seed", "5", "--out", "run"])
            .current_dir(d.path())
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stdout(&o));
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert!(fa.iter().any(|(name, _)| name.ends_with("noise.bin")));
    assert!(fa.iter().any(|(name, _)| name == "run/experiment.toml"));
    assert_eq!(fa, fb);
}

#[test]
fn report_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["rates", "rough_integral_order", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    let bytes = std::fs::read(dir.path().join("report.csv")).unwrap();
    let rows = read_csv(&bytes[..]).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r.param("config_hash").is_some()));
    let mut again = Vec::new();
    write_csv(&rows, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn json_format() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["rates", "kernel_bounds", "--format", "json", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report = rough_burgers::experiment::read_json(text.as_bytes()).unwrap();
    assert!(report.passed());
}

#[test]
fn bad_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "ensemble = 0\n").unwrap();
    let cases: [Vec<&str>; 4] = [
        vec!["simulate", "--config", cfg.to_str().unwrap(), "--out", out],
        vec!["rates", "speed", "--out", out],
        vec!["convergence", "--eps", "0.5", "--out", out],
        vec!["validate", "--format", "xml", "--out", out],
    ];
    for args in cases {
        let o = run(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    }
}
