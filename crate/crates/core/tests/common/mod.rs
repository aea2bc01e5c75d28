#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use latopt::fields::UnitCellSpec;
use latopt::homogenization::ElasticityLookup;
use latopt::pipeline::{load_or_build_lookup, HomogenizationConfig};
use nalgebra::{Matrix3, SMatrix};

/// Young's modulus that puts the cantilever compliances on the reference
/// scale (fitted once on preset f).
pub const CALIBRATED_E: f64 = 0.56;

pub fn calibrated_cell() -> UnitCellSpec {
    UnitCellSpec {
        base_e: CALIBRATED_E,
        ..UnitCellSpec::planar_default()
    }
}

pub fn scratch_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Full-resolution table for the calibrated cell, cached on disk between runs.
pub fn calibrated_lookup() -> &'static ElasticityLookup {
    static TABLE: OnceLock<ElasticityLookup> = OnceLock::new();
    TABLE.get_or_init(|| {
        let config = HomogenizationConfig {
            table: Some(scratch_dir("tables").join("calibrated-80-13.txt")),
            ..HomogenizationConfig::default()
        };
        load_or_build_lookup(&calibrated_cell(), &config).unwrap()
    })
}

/// Closed-form stiffness of a unit square bilinear element in plane stress,
/// nodes counter-clockwise from the lower left.
fn square_element_stiffness(e: f64, nu: f64) -> SMatrix<f64, 8, 8> {
    let k = [
        0.5 - nu / 6.0,
        0.125 + nu / 8.0,
        -0.25 - nu / 12.0,
        -0.125 + 3.0 * nu / 8.0,
        -0.25 + nu / 12.0,
        -0.125 - nu / 8.0,
        nu / 6.0,
        0.125 - 3.0 * nu / 8.0,
    ];
    let idx = [
        [0, 1, 2, 3, 4, 5, 6, 7],
        [1, 0, 7, 6, 5, 4, 3, 2],
        [2, 7, 0, 5, 6, 3, 4, 1],
        [3, 6, 5, 0, 7, 2, 1, 4],
        [4, 5, 6, 7, 0, 1, 2, 3],
        [5, 4, 3, 2, 1, 0, 7, 6],
        [6, 3, 4, 1, 2, 7, 0, 5],
        [7, 2, 1, 4, 3, 6, 5, 0],
    ];
    SMatrix::from_fn(|i, j| e / (1.0 - nu * nu) * k[idx[i][j]])
}

/// Effective plane tensor of an `n x n` periodic pixel cell by direct energy
/// minimization over the total displacement `u = eps x + w`, `w` periodic.
/// `solid(ix, iy)` selects solid pixels; void pixels get `1e-9` of the
/// stiffness.
pub fn brute_force_homogenize(n: usize, e: f64, nu: f64, solid: impl Fn(usize, usize) -> bool) -> Matrix3<f64> {
    let ke = square_element_stiffness(e, nu);
    let node = |ix: usize, iy: usize| (iy % n) * n + ix % n;
    // unknowns: w at every node except node 0
    let unknown = |nd: usize, c: usize| if nd == 0 { None } else { Some(2 * (nd - 1) + c) };
    let m = 2 * (n * n - 1);
    let corners = |ix: usize, iy: usize| [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
    let scale = |ix: usize, iy: usize| if solid(ix, iy) { 1.0 } else { 1e-9 };

    let strains = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let affine = |eps: &[f64; 3], x: f64, y: f64| [eps[0] * x + 0.5 * eps[2] * y, 0.5 * eps[2] * x + eps[1] * y];

    let mut triplets = Vec::new();
    let mut rhs = Mat::<f64>::zeros(m, 3);
    for iy in 0..n {
        for ix in 0..n {
            let s = scale(ix, iy);
            let cs = corners(ix, iy);
            let mut dofs = [None; 8];
            for (a, &(x, y)) in cs.iter().enumerate() {
                dofs[2 * a] = unknown(node(x, y), 0);
                dofs[2 * a + 1] = unknown(node(x, y), 1);
            }
            for a in 0..8 {
                let Some(r) = dofs[a] else { continue };
                for b in 0..8 {
                    if let Some(c) = dofs[b] {
                        triplets.push(Triplet::new(r, c, s * ke[(a, b)]));
                    }
                }
            }
            for (col, eps) in strains.iter().enumerate() {
                let mut u0 = [0.0; 8];
                for (a, &(x, y)) in cs.iter().enumerate() {
                    let u = affine(eps, x as f64, y as f64);
                    u0[2 * a] = u[0];
                    u0[2 * a + 1] = u[1];
                }
                for a in 0..8 {
                    if let Some(r) = dofs[a] {
                        let f: f64 = (0..8).map(|b| ke[(a, b)] * u0[b]).sum();
                        rhs[(r, col)] -= s * f;
                    }
                }
            }
        }
    }
    let k = SparseColMat::<usize, f64>::try_new_from_triplets(m, m, &triplets).unwrap();
    let w = k.sp_lu().unwrap().solve(&rhs);

    let mut dh = Matrix3::zeros();
    for iy in 0..n {
        for ix in 0..n {
            let s = scale(ix, iy);
            let cs = corners(ix, iy);
            let total = |col: usize| -> SMatrix<f64, 8, 1> {
                SMatrix::from_fn(|i, _| {
                    let (x, y) = cs[i / 2];
                    let u = affine(&strains[col], x as f64, y as f64)[i % 2];
                    u + unknown(node(x, y), i % 2).map_or(0.0, |r| w[(r, col)])
                })
            };
            let u = [total(0), total(1), total(2)];
            for i in 0..3 {
                for j in 0..3 {
                    dh[(i, j)] += s * (u[i].transpose() * ke * u[j])[(0, 0)];
                }
            }
        }
    }
    dh / (n * n) as f64
}

/// Cheap table for small integration runs.
pub fn coarse_lookup_config(name: &str) -> HomogenizationConfig {
    HomogenizationConfig {
        resolution: 20,
        samples: 5,
        table: Some(scratch_dir("tables").join(format!("coarse-{name}.txt"))),
    }
}

pub fn coarse_lookup() -> &'static ElasticityLookup {
    static TABLE: OnceLock<ElasticityLookup> = OnceLock::new();
    TABLE.get_or_init(|| load_or_build_lookup(&UnitCellSpec::planar_default(), &coarse_lookup_config("shared")).unwrap())
}
