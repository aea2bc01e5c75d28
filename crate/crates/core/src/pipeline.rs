//! Run configuration, orchestration of optimize / compile / validate, artifact
//! export, and full-resolution validation of compiled 2D lattices.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use log::{info, warn};
use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::compiler::{default_iterations, extract_lattice, optimize_parameterization, LatticeGraph};
use crate::error::{Error, Result};
use crate::fea::{element_stiffness, BoundaryConditions, FeModel, QuadElement};
use crate::fields::{
    build_compilation_graph, read_fields_csv, threshold_shape, write_fields_csv, write_phi_pgm, DesignFields, GridDomain,
    UnitCellSpec,
};
use crate::homogenization::{build_lookup, homogenize_cell, CellDiscretization, ElasticityLookup, DEFAULT_RESOLUTION, DEFAULT_SAMPLES};
use crate::optimizer::{write_history_csv, HistoryRow, Optimizer, OptimizerConfig, Preset, StopReason};
use crate::voigt::plane_stress;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Optimize,
    Compile,
    Full,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub nx: usize,
    pub ny: usize,
    pub element_size: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self {
            nx: 80,
            ny: 40,
            element_size: 1.0,
        }
    }
}

/// Either the built-in cantilever or a `fix` / `load` record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConfig {
    pub file: Option<PathBuf>,
    /// Multiplies every load.
    pub load_scale: f64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            file: None,
            load_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizationConfig {
    pub resolution: usize,
    pub samples: usize,
    /// Cache file: read when present, written after a fresh build.
    pub table: Option<PathBuf>,
}

impl Default for HomogenizationConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            samples: DEFAULT_SAMPLES,
            table: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompileConfig {
    pub tau: f64,
    pub refine: u32,
    /// Physical length of an unscaled cell side.
    pub h: f64,
    pub seed: u64,
    pub iterations: Option<usize>,
    /// Field CSV consumed by `mode = "compile"`.
    pub fields: Option<PathBuf>,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            refine: 1,
            h: 1.0,
            seed: 1,
            iterations: None,
            fields: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    pub resolution: [usize; 2],
    pub tolerance: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            resolution: [1024, 512],
            tolerance: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub domain: DomainConfig,
    #[serde(default = "UnitCellSpec::planar_default")]
    pub cell: UnitCellSpec,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub homogenization: HomogenizationConfig,
    #[serde(default)]
    pub compile: CompileConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
}

impl RunConfig {
    pub fn new(mode: Mode, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            output_dir: output_dir.into(),
            preset: None,
            domain: DomainConfig::default(),
            cell: UnitCellSpec::planar_default(),
            boundary: BoundaryConfig::default(),
            optimizer: OptimizerConfig::default(),
            homogenization: HomogenizationConfig::default(),
            compile: CompileConfig::default(),
            validate: ValidateConfig::default(),
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1)).unwrap_or(0);
            Error::parse(origin, line, e.message().to_string())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_toml(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut config.output_dir);
        config.boundary.file.as_mut().map(fix);
        config.homogenization.table.as_mut().map(fix);
        config.compile.fields.as_mut().map(fix);
        Ok(config)
    }

    /// Optimizer settings with the preset's design options applied.
    pub fn effective_optimizer(&self) -> OptimizerConfig {
        let mut c = self.optimizer.clone();
        if let Some(p) = self.preset {
            p.apply(&mut c);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.domain.nx == 0 || self.domain.ny == 0 || !(self.domain.element_size > 0.0) {
            return Err(Error::Config("domain needs positive nx, ny and element_size".into()));
        }
        self.cell.validate()?;
        self.effective_optimizer().validate()?;
        if !(self.boundary.load_scale.is_finite() && self.boundary.load_scale != 0.0) {
            return Err(Error::Config("load_scale must be finite and non-zero".into()));
        }
        if self.homogenization.resolution < 16 || self.homogenization.samples < 2 {
            return Err(Error::Config("homogenization needs resolution >= 16 and samples >= 2".into()));
        }
        if !(self.compile.tau > 0.0 && self.compile.tau < 1.0) || !(self.compile.h > 0.0) || self.compile.refine > 2 {
            return Err(Error::Config("compile needs tau in (0, 1), h > 0 and refine <= 2".into()));
        }
        if self.validate.resolution.contains(&0) || !(self.validate.tolerance > 0.0) {
            return Err(Error::Config("validation resolution and tolerance must be positive".into()));
        }
        if let Some(f) = &self.boundary.file {
            if !f.is_file() {
                return Err(Error::Config(format!("boundary file {} does not exist", f.display())));
            }
        }
        if self.mode == Mode::Compile {
            match &self.compile.fields {
                Some(f) if f.is_file() => {}
                Some(f) => return Err(Error::Config(format!("field file {} does not exist", f.display()))),
                None => return Err(Error::Config("mode = \"compile\" needs compile.fields".into())),
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridDomain> {
        GridDomain::new(self.domain.nx, self.domain.ny, self.domain.element_size)
    }

    pub fn boundary_conditions(&self, domain: &GridDomain) -> Result<BoundaryConditions> {
        let mut bc = match &self.boundary.file {
            Some(path) => BoundaryConditions::read(path, domain)?,
            None => BoundaryConditions::cantilever(domain),
        };
        if self.boundary.load_scale != 1.0 {
            let nodes: Vec<(usize, f64, f64)> = (0..domain.n_nodes())
                .filter_map(|n| {
                    let (fx, fy) = (bc.force()[2 * n], bc.force()[2 * n + 1]);
                    (fx != 0.0 || fy != 0.0).then_some((n, fx, fy))
                })
                .collect();
            let s = self.boundary.load_scale;
            for (n, fx, fy) in nodes {
                bc.load(n, fx * (s - 1.0), fy * (s - 1.0));
            }
        }
        Ok(bc)
    }
}

/// Reads the cached table if configured and present, otherwise builds it.
pub fn load_or_build_lookup(spec: &UnitCellSpec, config: &HomogenizationConfig) -> Result<ElasticityLookup> {
    if let Some(path) = &config.table {
        if path.is_file() {
            let table = ElasticityLookup::read(path)?;
            let (lo, hi) = table.bounds();
            let samples_ok = table.dim() == 2 && (0..2).all(|a| table.samples()[a] == config.samples);
            let bounds_ok = lo[..] == spec.alpha_lo[..] && hi[..] == spec.alpha_hi[..];
            // one recomputed corner cell catches a changed material, wall or resolution
            let cell_ok = samples_ok && bounds_ok && {
                let fresh = homogenize_cell(spec.alpha_lo, spec, &CellDiscretization::new(config.resolution)?)?;
                let cached = table.sample(0);
                (fresh.matrix() - cached.matrix()).amax() <= 1e-9 * fresh.matrix().amax()
            };
            if cell_ok {
                info!("using cached elasticity table {}", path.display());
                return Ok(table);
            }
            warn!("cached table {} does not match the cell settings; rebuilding", path.display());
        }
    }
    let t0 = Instant::now();
    let table = build_lookup(spec, config.samples, &CellDiscretization::new(config.resolution)?)?;
    info!("built elasticity table in {:.1} s", t0.elapsed().as_secs_f64());
    if let Some(path) = &config.table {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write then rename so concurrent readers never see a partial table
        static SERIAL: AtomicUsize = AtomicUsize::new(0);
        let tmp = path.with_extension(format!(
            "{}-{}.partial",
            std::process::id(),
            SERIAL.fetch_add(1, Ordering::Relaxed)
        ));
        table.write(&tmp)?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(table)
}

/// Wall time per stage in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub homogenization: f64,
    pub fea: f64,
    pub optimization: f64,
    pub preprocessing: f64,
    pub parameterization: f64,
    pub extraction: f64,
    pub validation: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub resolution: [usize; 2],
    pub j_homogenized: f64,
    /// `None` when the rasterized lattice does not carry the load.
    pub j_full: Option<f64>,
    pub relative_difference: Option<f64>,
    pub solid_fraction: f64,
    pub load_bearing_fraction: f64,
    pub connector_struts: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub message: Option<String>,
}

/// Deterministic run summary; wall times are kept apart in [`Timings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub preset: Option<Preset>,
    pub optimizer: Option<OptimizerConfig>,
    pub compliance: Option<f64>,
    pub volume: Option<f64>,
    pub uniform_compliance: Option<f64>,
    pub iterations: usize,
    pub stop: Option<StopReason>,
    pub clamped_lookups: usize,
    pub lattice_vertices: Option<usize>,
    pub lattice_struts: Option<usize>,
    pub validation: Option<ValidationRecord>,
    pub artifacts: Vec<String>,
    #[serde(skip)]
    pub timings: Timings,
}

/// Everything a run produced, for callers that want more than the report.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub fields: Option<DesignFields>,
    pub history: Vec<HistoryRow>,
    pub lattice: Option<LatticeGraph<2>>,
}

/// Runs the stages selected by `config.mode` and writes the artifacts. On a
/// stage failure, the artifacts written so far stay on disk next to a
/// `failure.json` record.
pub fn run_pipeline(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    match run_stages(config) {
        Ok(out) => Ok(out),
        Err((stage, err)) => {
            let record = serde_json::json!({ "stage": stage, "error": err.to_string() });
            let path = dir.join("failure.json");
            let _ = fs::write(&path, serde_json::to_string_pretty(&record).unwrap_or_default());
            Err(err)
        }
    }
}

type Staged<T> = std::result::Result<T, (&'static str, Error)>;

fn stage<T>(name: &'static str, r: Result<T>) -> Staged<T> {
    r.map_err(|e| (name, e))
}

fn run_stages(config: &RunConfig) -> Staged<RunOutput> {
    let t_total = Instant::now();
    let dir = &config.output_dir;
    let mut timings = Timings::default();
    let mut artifacts = Vec::new();
    let spec = config.cell;
    let domain = stage("setup", config.grid())?;
    let bc = stage("setup", config.boundary_conditions(&domain))?;
    let opt_config = config.effective_optimizer();

    let t0 = Instant::now();
    let lookup = stage("homogenization", load_or_build_lookup(&spec, &config.homogenization))?;
    timings.homogenization = t0.elapsed().as_secs_f64();

    let model = stage("setup", FeModel::new(domain.clone(), bc.clone()))?;
    let optimizer = stage("setup", Optimizer::new(&model, &lookup, spec, opt_config.clone()))?;

    let mut report = RunReport {
        mode: config.mode,
        preset: config.preset,
        optimizer: None,
        compliance: None,
        volume: None,
        uniform_compliance: None,
        iterations: 0,
        stop: None,
        clamped_lookups: 0,
        lattice_vertices: None,
        lattice_struts: None,
        validation: None,
        artifacts: Vec::new(),
        timings: Timings::default(),
    };
    let mut history = Vec::new();

    let fields = if config.mode == Mode::Compile {
        let path = config.compile.fields.as_ref().expect("checked by validate");
        let fields = stage("read-fields", read_fields_csv(path, &domain, &spec))?;
        let t0 = Instant::now();
        let j = stage("fea", optimizer.analyze(&fields))?.compliance;
        timings.fea = t0.elapsed().as_secs_f64();
        report.compliance = Some(j);
        report.volume = Some(stage("fea", optimizer.volume(&fields))?);
        fields
    } else {
        let t0 = Instant::now();
        let init = stage("optimize", optimizer.initial_fields())?;
        report.uniform_compliance = Some(stage("optimize", optimizer.analyze(&init))?.compliance);
        let outcome = stage("optimize", optimizer.run(init))?;
        timings.optimization = t0.elapsed().as_secs_f64();
        timings.fea = outcome.fea_seconds;
        info!(
            "optimization stopped ({:?}) after {} iterations: J = {:.4}, V = {:.4}",
            outcome.stop,
            outcome.history.len(),
            outcome.compliance,
            outcome.volume
        );
        report.optimizer = Some(opt_config.clone());
        report.compliance = Some(outcome.compliance);
        report.volume = Some(outcome.volume);
        report.iterations = outcome.history.len();
        report.stop = Some(outcome.stop.clone());
        stage("export", write_history_csv(&dir.join("history.csv"), &outcome.history))?;
        artifacts.push("history.csv".to_string());
        history = outcome.history;
        if let StopReason::Failed(reason) = &outcome.stop {
            stage("export", write_field_artifacts(dir, &outcome.fields, &domain, &mut artifacts))?;
            return Err(("optimize", Error::Optimizer {
                iteration: report.iterations,
                reason: reason.clone(),
            }));
        }
        outcome.fields
    };
    report.clamped_lookups = lookup.clamp_count();
    stage("export", write_field_artifacts(dir, &fields, &domain, &mut artifacts))?;

    let mut lattice = None;
    if config.mode != Mode::Optimize {
        let t0 = Instant::now();
        let mask = stage("threshold", threshold_shape(&fields, &domain, config.compile.tau))?;
        let mut graph = stage(
            "graph",
            build_compilation_graph(&fields, &domain, &mask, config.compile.refine, config.compile.h),
        )?;
        timings.preprocessing = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let iters = config.compile.iterations.unwrap_or(default_iterations(2));
        stage("parameterization", optimize_parameterization(&mut graph, iters, config.compile.seed))?;
        timings.parameterization = t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let lat = stage("extraction", extract_lattice(&graph))?;
        timings.extraction = t0.elapsed().as_secs_f64();
        report.lattice_vertices = Some(lat.n_vertices());
        report.lattice_struts = Some(lat.n_edges());
        stage("export", write_lattice_artifacts(dir, &lat, 2.0 * strut_half_width(&spec, config.compile.h), &mut artifacts))?;

        if config.mode == Mode::Validate {
            let t0 = Instant::now();
            let j_homog = report.compliance.unwrap_or(f64::NAN);
            let record = stage(
                "validation",
                rasterize_and_validate(
                    &lat,
                    &spec,
                    &domain,
                    &bc,
                    j_homog,
                    config.validate.resolution,
                    config.compile.h,
                    config.validate.tolerance,
                ),
            )?;
            timings.validation = t0.elapsed().as_secs_f64();
            report.validation = Some(record);
        }
        lattice = Some(lat);
    }

    timings.total = t_total.elapsed().as_secs_f64();
    artifacts.push("report.json".to_string());
    artifacts.sort();
    report.artifacts = artifacts;
    report.timings = timings;
    stage("export", write_report(dir, &report))?;
    Ok(RunOutput {
        report,
        fields: Some(fields),
        history,
        lattice,
    })
}

fn write_field_artifacts(dir: &Path, fields: &DesignFields, domain: &GridDomain, artifacts: &mut Vec<String>) -> Result<()> {
    write_fields_csv(&dir.join("fields.csv"), fields, domain)?;
    write_phi_pgm(&dir.join("fields.pgm"), fields, domain)?;
    artifacts.extend(["fields.csv".to_string(), "fields.pgm".to_string()]);
    Ok(())
}

fn write_lattice_artifacts(dir: &Path, lattice: &LatticeGraph<2>, thickness: f64, artifacts: &mut Vec<String>) -> Result<()> {
    let files = [
        ("lattice.json", lattice.to_json()),
        ("lattice.obj", lattice.to_obj()),
        ("lattice.svg", lattice.to_svg(thickness)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        artifacts.push(name.to_string());
    }
    Ok(())
}

/// `report.json` (deterministic) and `timings.json` (wall clock).
pub fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    let path = dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    let path = dir.join("timings.json");
    let text = serde_json::to_string_pretty(&report.timings).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes whichever artifacts are available into `dir`; returns the file
/// names in sorted order.
pub fn export_all(
    dir: &Path,
    domain: &GridDomain,
    fields: Option<&DesignFields>,
    history: &[HistoryRow],
    lattice: Option<&LatticeGraph<2>>,
    strut_thickness: f64,
    report: &mut RunReport,
) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut artifacts = Vec::new();
    if let Some(f) = fields {
        write_field_artifacts(dir, f, domain, &mut artifacts)?;
    }
    if !history.is_empty() {
        write_history_csv(&dir.join("history.csv"), history)?;
        artifacts.push("history.csv".to_string());
    }
    match lattice {
        Some(l) if !l.is_empty() => write_lattice_artifacts(dir, l, strut_thickness, &mut artifacts)?,
        _ => info!("no lattice to export"),
    }
    artifacts.push("report.json".to_string());
    artifacts.sort();
    report.artifacts = artifacts.clone();
    write_report(dir, report)?;
    Ok(artifacts)
}

/// Half the width of a rasterized strut. Neighbouring hollow cells share
/// their walls, so a strut is two cell walls thick.
pub fn strut_half_width(spec: &UnitCellSpec, h: f64) -> f64 {
    spec.t / spec.l * h
}

fn segment_distance(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let s = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (p - (a + ab * s)).norm()
}

/// Elements of an `nx x ny` grid whose centre lies within `half_width` of a
/// segment.
pub fn rasterize_segments(
    segments: &[(Vector2<f64>, Vector2<f64>)],
    nx: usize,
    ny: usize,
    element_size: f64,
    half_width: f64,
) -> Vec<bool> {
    let mut solid = vec![false; nx * ny];
    let cell = |x: f64, n: usize| ((x / element_size - 0.5).max(0.0) as usize).min(n.saturating_sub(1));
    for &(a, b) in segments {
        let (lo, hi) = (a.inf(&b), a.sup(&b));
        let (x0, x1) = (cell(lo.x - half_width, nx), cell(hi.x + half_width + element_size, nx));
        let (y0, y1) = (cell(lo.y - half_width, ny), cell(hi.y + half_width + element_size, ny));
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let c = Vector2::new((ix as f64 + 0.5) * element_size, (iy as f64 + 0.5) * element_size);
                if segment_distance(c, a, b) <= half_width {
                    solid[iy * nx + ix] = true;
                }
            }
        }
    }
    solid
}

/// Struts tying the lattice to the supports and the load points: every
/// lattice vertex closer to a fixed node than `reach` times its mean strut
/// length gets a strut to that node, and every load point gets one to each
/// of its two nearest lattice vertices inside the domain.
pub fn connector_struts(
    lattice: &LatticeGraph<2>,
    domain: &GridDomain,
    bc: &BoundaryConditions,
    reach: f64,
) -> Vec<(Vector2<f64>, Vector2<f64>)> {
    let node_pos = |n: usize| {
        let (ix, iy) = domain.node_coords(n);
        Vector2::new(ix as f64, iy as f64) * domain.element_size()
    };
    let nodes = 0..domain.n_nodes();
    let fixed: Vec<Vector2<f64>> = nodes
        .clone()
        .filter(|&n| bc.is_fixed(2 * n) || bc.is_fixed(2 * n + 1))
        .map(node_pos)
        .collect();
    let loaded: Vec<Vector2<f64>> = nodes
        .filter(|&n| bc.force()[2 * n] != 0.0 || bc.force()[2 * n + 1] != 0.0)
        .map(node_pos)
        .collect();
    let mut sum = vec![0.0; lattice.n_vertices()];
    let mut count = vec![0usize; lattice.n_vertices()];
    for (&(a, b), len) in lattice.edges.iter().zip(lattice.edge_lengths()) {
        for v in [a, b] {
            sum[v] += len;
            count[v] += 1;
        }
    }
    let mut out = Vec::new();
    if lattice.is_empty() {
        return out;
    }
    for (v, &p) in lattice.vertices.iter().enumerate() {
        if count[v] == 0 {
            continue;
        }
        let spacing = sum[v] / count[v] as f64;
        let nearest = fixed
            .iter()
            .min_by(|a, b| (**a - p).norm().total_cmp(&(**b - p).norm()));
        if let Some(&q) = nearest {
            if (q - p).norm() <= reach * spacing {
                out.push((p, q));
            }
        }
    }
    let extent = Vector2::new(domain.nx() as f64, domain.ny() as f64) * domain.element_size();
    let inside = |p: &Vector2<f64>| p.x >= 0.0 && p.y >= 0.0 && p.x <= extent.x && p.y <= extent.y;
    for &q in &loaded {
        let mut candidates: Vec<(f64, usize)> = (0..lattice.n_vertices())
            .filter(|&v| count[v] > 0 && inside(&lattice.vertices[v]))
            .map(|v| ((lattice.vertices[v] - q).norm(), v))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, v) in candidates.iter().take(2) {
            out.push((q, lattice.vertices[v]));
        }
    }
    out
}

/// Transfers coarse-grid supports and loads to a finer grid covering the same
/// rectangle. A fine node is fixed where it lies on a coarse node or on a
/// grid line between two coarse nodes fixed in the same direction; loads go
/// to the nearest fine node.
pub fn transfer_boundary_conditions(
    coarse: &GridDomain,
    bc: &BoundaryConditions,
    fine: &GridDomain,
) -> BoundaryConditions {
    let mut out = BoundaryConditions::new(fine);
    let (cs, fs_) = (coarse.element_size(), fine.element_size());
    let fixed_at = |ix: usize, iy: usize, d: usize| bc.is_fixed(2 * coarse.node_index(ix, iy) + d);
    let tol = 1e-9 * cs;
    for n in 0..fine.n_nodes() {
        let (fx, fy) = fine.node_coords(n);
        let (x, y) = (fx as f64 * fs_ / cs, fy as f64 * fs_ / cs);
        let (gx, gy) = (x.round(), y.round());
        let on_x = (x - gx).abs() * cs <= tol;
        let on_y = (y - gy).abs() * cs <= tol;
        let mut dirs = [false; 2];
        for (d, dir) in dirs.iter_mut().enumerate() {
            *dir = if on_x && on_y {
                let (ix, iy) = (gx as usize, gy as usize);
                ix <= coarse.nx() && iy <= coarse.ny() && fixed_at(ix, iy, d)
            } else if on_x {
                let ix = gx as usize;
                let iy = y.floor() as usize;
                ix <= coarse.nx() && iy < coarse.ny() && fixed_at(ix, iy, d) && fixed_at(ix, iy + 1, d)
            } else if on_y {
                let iy = gy as usize;
                let ix = x.floor() as usize;
                iy <= coarse.ny() && ix < coarse.nx() && fixed_at(ix, iy, d) && fixed_at(ix + 1, iy, d)
            } else {
                false
            };
        }
        if dirs[0] || dirs[1] {
            out.fix(n, dirs[0], dirs[1]);
        }
    }
    for n in 0..coarse.n_nodes() {
        let (fxv, fyv) = (bc.force()[2 * n], bc.force()[2 * n + 1]);
        if fxv == 0.0 && fyv == 0.0 {
            continue;
        }
        let (ix, iy) = coarse.node_coords(n);
        let jx = ((ix as f64 * cs / fs_).round() as usize).min(fine.nx());
        let jy = ((iy as f64 * cs / fs_).round() as usize).min(fine.ny());
        out.load(fine.node_index(jx, jy), fxv, fyv);
    }
    out
}

/// Keeps the edge-connected solid components that touch at least two fixed
/// nodes; anything else would float or hinge.
pub fn load_bearing_mask(solid: &[bool], domain: &GridDomain, bc: &BoundaryConditions) -> Vec<bool> {
    let (nx, ny) = (domain.nx(), domain.ny());
    let mut label = vec![usize::MAX; nx * ny];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for start in 0..nx * ny {
        if !solid[start] || label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        label[start] = id;
        let mut i = 0;
        while i < members.len() {
            let e = members[i];
            i += 1;
            let (ix, iy) = (e % nx, e / nx);
            let mut push = |q: usize| {
                if solid[q] && label[q] == usize::MAX {
                    label[q] = id;
                    members.push(q);
                }
            };
            if ix > 0 {
                push(e - 1);
            }
            if ix + 1 < nx {
                push(e + 1);
            }
            if iy > 0 {
                push(e - nx);
            }
            if iy + 1 < ny {
                push(e + nx);
            }
        }
        components.push(members);
    }
    let mut keep = vec![false; nx * ny];
    for members in &components {
        let mut fixed_nodes: Vec<usize> = members
            .iter()
            .flat_map(|&e| domain.element_nodes(e))
            .filter(|&n| bc.is_fixed(2 * n) || bc.is_fixed(2 * n + 1))
            .collect();
        fixed_nodes.sort_unstable();
        fixed_nodes.dedup();
        if fixed_nodes.len() >= 2 {
            for &e in members {
                keep[e] = true;
            }
        }
    }
    keep
}

/// Compliance of a solid/void element mask under the transferred boundary
/// conditions, `None` when no load-bearing component carries the load.
pub fn full_resolution_compliance(
    solid: &[bool],
    fine: &GridDomain,
    bc: &BoundaryConditions,
    spec: &UnitCellSpec,
) -> Result<(Option<f64>, f64)> {
    let keep = load_bearing_mask(solid, fine, bc);
    let kept = keep.iter().filter(|&&k| k).count();
    let fraction = kept as f64 / keep.len() as f64;
    if kept == 0 {
        return Ok((None, 0.0));
    }
    let mut touched = vec![false; 2 * fine.n_nodes()];
    for e in (0..keep.len()).filter(|&e| keep[e]) {
        for d in fine.element_dofs(e) {
            touched[d] = true;
        }
    }
    if bc.loaded_dofs().any(|d| !touched[d]) {
        return Ok((None, fraction));
    }
    let domain = GridDomain::with_mask(fine.nx(), fine.ny(), fine.element_size(), keep)?;
    let model = FeModel::new(domain, bc.clone())?;
    let ke = element_stiffness(&plane_stress(spec.base_e, spec.base_nu), &QuadElement::new(fine.element_size()));
    let state = model.assemble_and_solve(|_| Some(ke))?;
    Ok((Some(state.compliance(bc)), fraction))
}

/// Rasterizes a compiled 2D lattice (plus connector struts) onto a fine grid
/// over the design domain and compares its compliance with the homogenized
/// prediction.
#[allow(clippy::too_many_arguments)]
pub fn rasterize_and_validate(
    lattice: &LatticeGraph<2>,
    spec: &UnitCellSpec,
    domain: &GridDomain,
    bc: &BoundaryConditions,
    j_homogenized: f64,
    resolution: [usize; 2],
    h: f64,
    tolerance: f64,
) -> Result<ValidationRecord> {
    if lattice.is_empty() {
        return Err(Error::EmptyShape);
    }
    let width = domain.nx() as f64 * domain.element_size();
    let height = domain.ny() as f64 * domain.element_size();
    let fine_size = width / resolution[0] as f64;
    if ((height / fine_size) - resolution[1] as f64).abs() > 1e-9 * resolution[1] as f64 {
        return Err(Error::invalid("validation resolution must keep the domain aspect ratio"));
    }
    let fine = GridDomain::new(resolution[0], resolution[1], fine_size)?;
    let fine_bc = transfer_boundary_conditions(domain, bc, &fine);
    let mut segments: Vec<(Vector2<f64>, Vector2<f64>)> = lattice
        .edges
        .iter()
        .map(|&(a, b)| (lattice.vertices[a], lattice.vertices[b]))
        .collect();
    let connectors = connector_struts(lattice, domain, bc, 0.75);
    let n_connectors = connectors.len();
    segments.extend(connectors);
    let solid = rasterize_segments(&segments, fine.nx(), fine.ny(), fine_size, strut_half_width(spec, h));
    let solid_fraction = solid.iter().filter(|&&s| s).count() as f64 / solid.len() as f64;
    let (j_full, load_bearing_fraction) = full_resolution_compliance(&solid, &fine, &fine_bc, spec)?;
    let relative_difference = j_full.map(|j| (j - j_homogenized).abs() / j_homogenized);
    let passed = relative_difference.is_some_and(|d| d <= tolerance);
    let message = match (j_full, relative_difference) {
        (None, _) => Some("rasterized lattice does not connect the load to the supports".to_string()),
        (Some(_), Some(d)) if d > tolerance => Some(format!("difference {:.2}% exceeds {:.2}%", 100.0 * d, 100.0 * tolerance)),
        _ => None,
    };
    Ok(ValidationRecord {
        resolution,
        j_homogenized,
        j_full,
        relative_difference,
        solid_fraction,
        load_bearing_fraction,
        connector_struts: n_connectors,
        tolerance,
        passed,
        message,
    })
}

/// Rebuilds the design fields a report's compliance refers to and evaluates
/// them; used by the stand-alone validation command.
pub fn homogenized_compliance(config: &RunConfig, fields_csv: &Path) -> Result<f64> {
    let domain = config.grid()?;
    let bc = config.boundary_conditions(&domain)?;
    let lookup = load_or_build_lookup(&config.cell, &config.homogenization)?;
    let fields = read_fields_csv(fields_csv, &domain, &config.cell)?;
    let model = FeModel::new(domain, bc)?;
    let opt = Optimizer::new(&model, &lookup, config.cell, config.effective_optimizer())?;
    Ok(opt.analyze(&fields)?.compliance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::{compile, constant_grid_2d};
    use approx::assert_relative_eq;
    use nalgebra::Matrix2;

    #[test]
    fn config_round_trips_through_toml() {
        let mut c = RunConfig::new(Mode::Full, "out");
        c.preset = Some(Preset::E);
        c.compile.seed = 7;
        c.homogenization.table = Some(PathBuf::from("cache/d.txt"));
        c.optimizer.alpha_init = Some([2.0, 3.0]);
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text, Path::new("c.toml")).unwrap(), c);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml("mode = \"optimize\"\noutput_dir = \"o\"\n", Path::new("c")).unwrap();
        assert_eq!(c.domain, DomainConfig::default());
        assert_eq!(c.cell, UnitCellSpec::planar_default());
        assert_eq!(c.optimizer, OptimizerConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let err = RunConfig::from_toml("mode = \"optimize\"\noutput_dir = \"o\"\nbogus = 1\n", Path::new("c"));
        assert!(err.is_err());
        let mut c = RunConfig::new(Mode::Compile, "o");
        assert!(c.validate().is_err());
        c.compile.fields = Some(PathBuf::from("/nonexistent/fields.csv"));
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(Mode::Full, "o");
        c.optimizer.vbar = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn load_scale_multiplies_forces() {
        let mut c = RunConfig::new(Mode::Optimize, "o");
        c.domain = DomainConfig { nx: 4, ny: 2, element_size: 1.0 };
        c.boundary.load_scale = 2.5;
        let d = c.grid().unwrap();
        let bc = c.boundary_conditions(&d).unwrap();
        assert_eq!(bc.force()[2 * d.node_index(4, 1) + 1], -2.5);
    }

    #[test]
    fn segment_rasterization_examples() {
        let seg = [(Vector2::new(0.0, 2.0), Vector2::new(8.0, 2.0))];
        let s = rasterize_segments(&seg, 8, 4, 1.0, 0.6);
        // centres at y = 1.5 and 2.5 are within 0.5
        let rows: Vec<usize> = (0..4).map(|iy| (0..8).filter(|&ix| s[iy * 8 + ix]).count()).collect();
        assert_eq!(rows, vec![0, 8, 8, 0]);
        let s = rasterize_segments(&seg, 8, 4, 1.0, 0.4);
        assert!(s.iter().all(|&v| !v));
    }

    #[test]
    fn boundary_transfer_keeps_edges_and_loads() {
        let coarse = GridDomain::new(4, 2, 1.0).unwrap();
        let bc = BoundaryConditions::cantilever(&coarse);
        let fine = GridDomain::new(16, 8, 0.25).unwrap();
        let f = transfer_boundary_conditions(&coarse, &bc, &fine);
        for iy in 0..=8 {
            assert!(f.is_fixed(2 * fine.node_index(0, iy)) && f.is_fixed(2 * fine.node_index(0, iy) + 1));
            assert!(!f.is_fixed(2 * fine.node_index(1, iy)));
        }
        assert_eq!(f.force()[2 * fine.node_index(16, 4) + 1], -1.0);
        assert_eq!(f.force().iter().filter(|&&v| v != 0.0).count(), 1);
        let odd = GridDomain::new(10, 5, 0.4).unwrap();
        let f = transfer_boundary_conditions(&coarse, &bc, &odd);
        assert_eq!(f.fixed_dofs().count(), 12);
        assert_eq!(f.force()[2 * odd.node_index(10, 3) + 1], -1.0);
    }

    #[test]
    fn floating_islands_are_dropped() {
        let domain = GridDomain::new(6, 3, 1.0).unwrap();
        let bc = BoundaryConditions::cantilever(&domain);
        let mut solid = vec![false; 18];
        for ix in 0..3 {
            solid[domain.element_index(ix, 1)] = true;
        }
        solid[domain.element_index(5, 2)] = true;
        let keep = load_bearing_mask(&solid, &domain, &bc);
        assert_eq!(keep.iter().filter(|&&k| k).count(), 3);
        assert!(!keep[domain.element_index(5, 2)]);
    }

    fn solid_cell() -> UnitCellSpec {
        UnitCellSpec {
            t: 0.5,
            ..UnitCellSpec::planar_default()
        }
    }

    #[test]
    fn fully_solid_lattice_matches_solid_analysis() {
        let coarse = GridDomain::new(8, 4, 1.0).unwrap();
        let bc = BoundaryConditions::cantilever(&coarse);
        let mut g = constant_grid_2d(4, 2, 2.0, Matrix2::identity(), Vector2::new(1.0, 1.0), 2.0);
        let lat = compile(&mut g, 10, 1).unwrap();
        let spec = solid_cell();
        // struts of half width 10 cover everything
        let rec = rasterize_and_validate(&lat, &spec, &coarse, &bc, 1.0, [32, 16], 20.0, 0.1).unwrap();
        assert_relative_eq!(rec.solid_fraction, 1.0);
        let fine = GridDomain::new(32, 16, 0.25).unwrap();
        let fbc = transfer_boundary_conditions(&coarse, &bc, &fine);
        let model = FeModel::new(fine.clone(), fbc.clone()).unwrap();
        let ke = element_stiffness(&plane_stress(1.0, 0.3), &QuadElement::new(0.25));
        let j = model.assemble_and_solve(|_| Some(ke)).unwrap().compliance(&fbc);
        assert_relative_eq!(rec.j_full.unwrap(), j, max_relative = 1e-6);
    }

    #[test]
    fn empty_lattice_is_an_error() {
        let coarse = GridDomain::new(8, 4, 1.0).unwrap();
        let bc = BoundaryConditions::cantilever(&coarse);
        let mut g = crate::compiler::FrameGraph::<2>::new(1.0);
        let lat = compile(&mut g, 10, 1).unwrap();
        let r = rasterize_and_validate(&lat, &solid_cell(), &coarse, &bc, 1.0, [32, 16], 1.0, 0.1);
        assert!(matches!(r, Err(Error::EmptyShape)));
    }

    #[test]
    fn disconnected_lattice_fails_validation() {
        let coarse = GridDomain::new(8, 4, 1.0).unwrap();
        let bc = BoundaryConditions::cantilever(&coarse);
        // a small patch in the middle, far from supports and load
        let mut g = constant_grid_2d(2, 2, 1.0, Matrix2::identity(), Vector2::new(1.0, 1.0), 1.0);
        let mut lat = compile(&mut g, 10, 1).unwrap();
        lat.vertices.iter_mut().for_each(|v| *v += Vector2::new(3.5, 1.5));
        let spec = UnitCellSpec::planar_default();
        let rec = rasterize_and_validate(&lat, &spec, &coarse, &bc, 1.0, [32, 16], 1.0, 0.1).unwrap();
        assert!(!rec.passed && rec.j_full.is_none() && rec.message.is_some());
    }
}
