use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use latopt::compiler::{compile, default_iterations, FrameGraph, LatticeGraph};
use latopt::fea::BoundaryConditions;
use latopt::optimizer::Preset;
use latopt::pipeline::{rasterize_and_validate, run_pipeline, strut_half_width, RunConfig};

#[derive(Parser)]
#[command(name = "latopt", version, about = "Lattice topology optimization and lattice compilation")]
struct Cli {
    #[command(flatten)]
    threads: ThreadArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ThreadArgs {
    /// Single worker thread; results are bit-identical across runs.
    #[arg(long, global = true)]
    serial: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline described by a TOML config.
    Run {
        config: PathBuf,
        /// Design option preset a..f, overriding the config.
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        /// Output directory, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compile a frame graph into a lattice.
    Compile {
        framegraph: PathBuf,
        /// Target edge length.
        #[arg(long)]
        h: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Gauss-Seidel sweeps per hierarchy level.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long, default_value = "lattice-out")]
        out: PathBuf,
    },
    /// Rasterize a compiled 2D lattice and compare against a homogenized
    /// compliance.
    Validate {
        lattice: PathBuf,
        config: PathBuf,
        /// Homogenized compliance; defaults to the value in the run report
        /// found in the config's output directory.
        #[arg(long)]
        j_homog: Option<f64>,
    },
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    Preset::parse(s).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = if cli.threads.serial { Some(1) } else { cli.threads.threads };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Run { config, preset, out } => run(&config, preset, out),
        Command::Compile {
            framegraph,
            h,
            seed,
            iterations,
            out,
        } => compile_graph(&framegraph, h, seed, iterations, &out),
        Command::Validate { lattice, config, j_homog } => validate(&lattice, &config, j_homog),
    }
}

fn run(path: &Path, preset: Option<Preset>, out: Option<PathBuf>) -> Result<()> {
    let mut config = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if preset.is_some() {
        config.preset = preset;
    }
    if let Some(o) = out {
        config.output_dir = o;
    }
    let output = run_pipeline(&config)?;
    let r = &output.report;
    if let (Some(j), Some(v)) = (r.compliance, r.volume) {
        println!("compliance {j:.4}  volume {v:.4}");
    }
    if let Some(j) = r.uniform_compliance {
        println!("uniform start {j:.4}");
    }
    if let (Some(nv), Some(ns)) = (r.lattice_vertices, r.lattice_struts) {
        println!("lattice: {nv} vertices, {ns} struts");
    }
    if let Some(v) = &r.validation {
        match (v.j_full, v.relative_difference) {
            (Some(j), Some(d)) => println!(
                "full resolution {}x{}: {j:.4} ({:.2}% from homogenized) {}",
                v.resolution[0],
                v.resolution[1],
                100.0 * d,
                if v.passed { "PASS" } else { "FAIL" }
            ),
            _ => println!("validation FAIL: {}", v.message.as_deref().unwrap_or("no load path")),
        }
    }
    println!("artifacts in {}", config.output_dir.display());
    Ok(())
}

fn compile_graph(path: &Path, h: f64, seed: u64, iterations: Option<usize>, out: &Path) -> Result<()> {
    if !(h > 0.0) {
        bail!("--h must be positive");
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let k = text
        .lines()
        .find_map(|l| l.strip_prefix("k "))
        .and_then(|v| v.trim().parse::<usize>().ok())
        .context("frame graph has no `k` line")?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let iters = iterations.unwrap_or(default_iterations(k));
    let summary = match k {
        2 => {
            let mut g = FrameGraph::<2>::parse(&text, path)?.with_h(h)?;
            let lat = compile(&mut g, iters, seed)?;
            fs::write(out.join("lattice.svg"), lat.to_svg(0.1 * h))?;
            write_common(&lat, out)?
        }
        3 => {
            let mut g = FrameGraph::<3>::parse(&text, path)?.with_h(h)?;
            let lat = compile(&mut g, iters, seed)?;
            write_common(&lat, out)?
        }
        _ => bail!("unsupported dimension {k}"),
    };
    println!("{summary}");
    Ok(())
}

fn write_common<const K: usize>(lat: &LatticeGraph<K>, out: &Path) -> Result<String> {
    fs::write(out.join("lattice.json"), lat.to_json())?;
    fs::write(out.join("lattice.obj"), lat.to_obj())?;
    Ok(format!(
        "lattice: {} vertices, {} struts ({} relabeled diagonals) in {}",
        lat.n_vertices(),
        lat.n_edges(),
        lat.stats.relabeled_diagonals,
        out.display()
    ))
}

fn validate(lattice_path: &Path, config_path: &Path, j_homog: Option<f64>) -> Result<()> {
    let config = RunConfig::load(config_path).with_context(|| format!("loading {}", config_path.display()))?;
    let text = fs::read_to_string(lattice_path).with_context(|| format!("reading {}", lattice_path.display()))?;
    let lattice = LatticeGraph::<2>::from_json(&text, lattice_path)?;
    let j_homog = match j_homog {
        Some(j) => j,
        None => {
            let report = config.output_dir.join("report.json");
            let text = fs::read_to_string(&report)
                .with_context(|| format!("no --j-homog given and {} is unreadable", report.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            value["compliance"]
                .as_f64()
                .with_context(|| format!("{} has no compliance", report.display()))?
        }
    };
    let domain = config.grid()?;
    let bc: BoundaryConditions = config.boundary_conditions(&domain)?;
    let rec = rasterize_and_validate(
        &lattice,
        &config.cell,
        &domain,
        &bc,
        j_homog,
        config.validate.resolution,
        config.compile.h,
        config.validate.tolerance,
    )?;
    println!("{}", serde_json::to_string_pretty(&rec)?);
    println!(
        "strut width {:.4}; {}",
        2.0 * strut_half_width(&config.cell, config.compile.h),
        if rec.passed { "PASS" } else { "FAIL" }
    );
    if !rec.passed {
        std::process::exit(2);
    }
    Ok(())
}
