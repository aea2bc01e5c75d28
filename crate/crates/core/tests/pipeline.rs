mod common;

use std::fs;
use std::path::Path;

use latopt::compiler::{EdgeKind, LatticeGraph};
use latopt::pipeline::{run_pipeline, Mode, RunConfig};

fn small_config(mode: Mode, dir: &Path) -> RunConfig {
    let mut c = RunConfig::new(mode, dir);
    c.domain.nx = 24;
    c.domain.ny = 12;
    c.optimizer.max_iters = 12;
    c.homogenization = common::coarse_lookup_config("pipeline");
    c.validate.resolution = [192, 96];
    c
}

#[test]
fn full_run_is_reproducible_and_counts_match_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["one", "two"]
        .iter()
        .map(|name| {
            let dir = root.path().join(name);
            let out = run_pipeline(&small_config(Mode::Full, &dir)).unwrap();
            (dir, out)
        })
        .collect();
    let (dir, out) = &runs[0];
    let r = &out.report;
    for name in ["fields.csv", "fields.pgm", "history.csv", "lattice.json", "lattice.obj", "lattice.svg", "report.json"] {
        assert!(r.artifacts.iter().any(|a| a == name), "{name} missing from report");
        assert!(dir.join(name).is_file(), "{name} missing on disk");
    }
    for name in ["report.json", "lattice.json", "fields.csv", "history.csv", "lattice.obj"] {
        assert_eq!(
            fs::read(dir.join(name)).unwrap(),
            fs::read(runs[1].0.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }

    let path = dir.join("lattice.json");
    let lat = LatticeGraph::<2>::from_json(&fs::read_to_string(&path).unwrap(), &path).unwrap();
    assert_eq!(Some(lat.n_vertices()), r.lattice_vertices);
    assert_eq!(Some(lat.n_edges()), r.lattice_struts);
    let obj = fs::read_to_string(dir.join("lattice.obj")).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), lat.n_vertices());
    assert_eq!(obj.lines().filter(|l| l.starts_with("l ")).count(), lat.n_edges());
    let history = fs::read_to_string(dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count() - 1, r.iterations);
    let fields = fs::read_to_string(dir.join("fields.csv")).unwrap();
    assert_eq!(fields.lines().count() - 1, 24 * 12);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["lattice_struts"].as_u64(), Some(lat.n_edges() as u64));
    let timings: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("timings.json")).unwrap()).unwrap();
    for (_, v) in timings.as_object().unwrap() {
        assert!(v.as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn constant_field_compiles_to_a_regular_grid() {
    let root = tempfile::tempdir().unwrap();
    let csv = root.path().join("constant.csv");
    let mut text = String::from("ix,iy,phi,alpha_x,alpha_y,theta\n");
    for iy in 0..12 {
        for ix in 0..24 {
            text.push_str(&format!("{ix},{iy},1,1,1,0\n"));
        }
    }
    fs::write(&csv, text).unwrap();
    let mut config = small_config(Mode::Compile, &root.path().join("out"));
    config.compile.fields = Some(csv);
    let out = run_pipeline(&config).unwrap();
    let lat = out.lattice.unwrap();
    assert!(lat.kinds.iter().all(|&k| k == EdgeKind::Axis));
    for l in lat.edge_lengths() {
        assert!((l - 1.0).abs() <= 1e-6, "edge length {l}");
    }
    let interior_degree4 = (0..lat.n_vertices())
        .filter(|&v| lat.interior[v])
        .all(|v| lat.edges.iter().filter(|&&(a, b)| a == v || b == v).count() == 4);
    assert!(interior_degree4);
    assert!(fs::read_to_string(root.path().join("out/lattice.svg")).unwrap().contains("<svg"));
}

#[test]
fn validate_mode_writes_a_comparison_record() {
    let root = tempfile::tempdir().unwrap();
    let out = run_pipeline(&small_config(Mode::Validate, root.path())).unwrap();
    let v = out.report.validation.unwrap();
    assert_eq!(v.resolution, [192, 96]);
    assert_eq!(Some(v.j_homogenized), out.report.compliance);
    if let (Some(jf), Some(d)) = (v.j_full, v.relative_difference) {
        assert!(jf > 0.0);
        assert!((d - (jf - v.j_homogenized).abs() / v.j_homogenized).abs() < 1e-12);
        assert_eq!(v.passed, d <= v.tolerance);
    } else {
        assert!(!v.passed);
    }
}

#[test]
fn stage_failure_leaves_a_failure_record() {
    let root = tempfile::tempdir().unwrap();
    let csv = root.path().join("broken.csv");
    fs::write(&csv, "ix,iy,phi,alpha_x,alpha_y,theta\n0,0,not-a-number,1,1,0\n").unwrap();
    let mut config = small_config(Mode::Compile, &root.path().join("out"));
    config.compile.fields = Some(csv);
    assert!(run_pipeline(&config).is_err());
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.path().join("out/failure.json")).unwrap()).unwrap();
    assert_eq!(record["stage"], "read-fields");
}

#[test]
fn shipped_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/cantilever.toml");
    let config = RunConfig::load(&path).unwrap();
    config.validate().unwrap();
    assert_eq!(config.mode, Mode::Validate);
    assert!(config.homogenization.table.as_ref().unwrap().is_absolute());
}
