use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use latopt::compiler::{constant_grid_2d, Frame};
use nalgebra::Vector2;

fn latopt(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latopt"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, mode: &str) {
    let text = format!(
        r#"mode = "{mode}"
output_dir = "out"

[domain]
nx = 20
ny = 10

[optimizer]
max_iters = 8

[homogenization]
resolution = 20
samples = 5
table = "table.txt"

[validate]
resolution = [160, 80]
"#
    );
    fs::write(dir.join("run.toml"), text).unwrap();
}

#[test]
fn run_with_preset_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "full");
    let out = latopt(&["--serial", "run", "run.toml", "--preset", "e", "--out", "e"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("compliance"), "{stdout}");
    for name in ["fields.csv", "history.csv", "lattice.json", "lattice.svg", "report.json"] {
        assert!(tmp.path().join("e").join(name).is_file(), "{name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["preset"], "e");
    assert!(tmp.path().join("table.txt").is_file());
}

#[test]
fn compile_then_validate() {
    let tmp = tempfile::tempdir().unwrap();
    let g = constant_grid_2d(21, 11, 1.0, Frame::<2>::identity(), Vector2::new(1.0, 1.0), 1.0);
    fs::write(tmp.path().join("grid.txt"), g.to_text()).unwrap();
    let out = latopt(&["compile", "grid.txt", "--h", "1", "--seed", "3", "--out", "lat"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("231 vertices"));
    for name in ["lattice.json", "lattice.obj", "lattice.svg"] {
        assert!(tmp.path().join("lat").join(name).is_file(), "{name}");
    }

    write_config(tmp.path(), "validate");
    let out = latopt(&["validate", "lat/lattice.json", "run.toml", "--j-homog", "100"], tmp.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"j_full\""), "{stdout}");
    // the homogenized value is made up, so only the exit code contract is checked
    let record: serde_json::Value = serde_json::from_str(stdout.split("\nstrut width").next().unwrap()).unwrap();
    let passed = record["passed"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 2 }));
}

#[test]
fn bad_input_fails_with_context() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "mode = \"optimize\"\noutput_dir = \"o\"\nbogus = 1\n").unwrap();
    let out = latopt(&["run", "bad.toml"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));

    let out = latopt(&["compile", "missing.txt", "--h", "1"], tmp.path());
    assert!(!out.status.success());
    let out = latopt(&["run", "x.toml", "--preset", "z"], tmp.path());
    assert!(!out.status.success());
}
