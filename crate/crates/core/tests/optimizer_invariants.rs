mod common;

use latopt::fea::{BoundaryConditions, FeModel};
use latopt::fields::{GridDomain, UnitCellSpec};
use latopt::optimizer::{OptimizationOutcome, Optimizer, OptimizerConfig, Preset};

fn cantilever(nx: usize, ny: usize) -> FeModel {
    let domain = GridDomain::new(nx, ny, 1.0).unwrap();
    let bc = BoundaryConditions::cantilever(&domain);
    FeModel::new(domain, bc).unwrap()
}

fn run(model: &FeModel, preset: Preset) -> OptimizationOutcome {
    let mut config = OptimizerConfig::default();
    preset.apply(&mut config);
    let opt = Optimizer::new(model, common::coarse_lookup(), UnitCellSpec::planar_default(), config).unwrap();
    opt.run(opt.initial_fields().unwrap()).unwrap()
}

#[test]
fn presets_satisfy_the_loop_invariants() {
    let model = cantilever(40, 20);
    let vbar = OptimizerConfig::default().vbar;
    let mut finals = Vec::new();
    for preset in Preset::ALL {
        let out = run(&model, preset);
        let n = out.fields.len() as f64;
        // volume feasibility at termination
        assert!(out.volume * n <= vbar * n + 1e-6 * n, "{preset:?}: V = {}", out.volume);
        assert!(out.compliance > 0.0);

        // monotone trend over 10-iteration windows after iteration 5, with
        // slack for the continuation step at each beta doubling
        let h = &out.history;
        for w in h.windows(11).filter(|w| w[0].iter >= 5) {
            let bump = if w.iter().any(|r| r.beta != w[0].beta) { 1.10 } else { 1.0 + 1e-9 };
            assert!(w[10].j <= w[0].j * bump, "{preset:?}: J rose from {} to {} at {}", w[0].j, w[10].j, w[0].iter);
        }

        if preset.options().optimize_phi {
            let binary = out.fields.phi_bar.iter().filter(|&&p| !(0.05..=0.95).contains(&p)).count();
            assert!(binary as f64 >= 0.9 * n, "{preset:?}: only {binary} of {n} near-binary");
        }
        finals.push((preset, out.compliance));
    }
    let j = |p: Preset| finals.iter().find(|(q, _)| *q == p).unwrap().1;
    assert!(j(Preset::A) > j(Preset::B) && j(Preset::B) > j(Preset::C), "{finals:?}");
    assert!(j(Preset::D) > j(Preset::E) && j(Preset::E) > j(Preset::F), "{finals:?}");
}

#[test]
fn serial_runs_are_bit_identical() {
    let model = cantilever(16, 8);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let a = pool.install(|| run(&model, Preset::F));
    let b = pool.install(|| run(&model, Preset::F));
    assert_eq!(a.history, b.history);
    assert_eq!(a.fields, b.fields);
}
