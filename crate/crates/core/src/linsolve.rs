//! Sparse symmetric storage and the two linear solver backends.
//!
//! The direct backend is a sparse Cholesky factorization (faer, fill-reducing
//! ordering included). The iterative backend is a Jacobi-preconditioned
//! conjugate gradient written here.

use faer::prelude::*;
use faer::sparse::{SparseColMat, SymbolicSparseColMat};
use faer::{Mat, Side};

use crate::error::{Error, Result};

/// Relative residual every backend must reach.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Symmetric matrix in CSR form, both triangles stored.
#[derive(Debug, Clone)]
pub struct SparseSymmetric {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSymmetric {
    /// Duplicate entries are summed.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len() / 2);
        let mut values: Vec<f64> = Vec::with_capacity(entries.len() / 2);
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Zero matrix with the coupling pattern of the given element dof lists.
    /// Dofs equal to `usize::MAX` are eliminated and skipped.
    pub fn from_element_pattern<'a>(n: usize, elements: impl Iterator<Item = &'a [usize]>) -> Self {
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
        for dofs in elements {
            for &a in dofs.iter().filter(|&&a| a != usize::MAX) {
                rows[a].extend(dofs.iter().copied().filter(|&b| b != usize::MAX));
            }
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(&r);
            row_ptr.push(col_idx.len());
        }
        let values = vec![0.0; col_idx.len()];
        Self {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Adds `ke[a][b]` at `(dofs[a], dofs[b])`; the entries must be in the
    /// pattern. Eliminated dofs (`usize::MAX`) are skipped.
    pub fn scatter(&mut self, dofs: &[usize], ke: impl Fn(usize, usize) -> f64) {
        for (a, &r) in dofs.iter().enumerate() {
            if r == usize::MAX {
                continue;
            }
            let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for (b, &c) in dofs.iter().enumerate() {
                if c == usize::MAX {
                    continue;
                }
                let pos = lo + self.col_idx[lo..hi]
                    .binary_search(&c)
                    .expect("entry outside the assembled pattern");
                self.values[pos] += ke(a, b);
            }
        }
    }

    pub fn clear_values(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[lo..hi].binary_search(&j).map_or(0.0, |p| self.values[lo + p])
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            y[i] = self.row(i).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Largest absolute asymmetry `|K_ij - K_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn relative_residual(&self, x: &[f64], b: &[f64]) -> f64 {
        let mut kx = vec![0.0; self.n];
        self.mul_vec(x, &mut kx);
        let r: f64 = kx.iter().zip(b).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb == 0.0 {
            r
        } else {
            r / nb
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SolverBackend {
    #[default]
    Direct,
    ConjugateGradient { tol: f64, max_iter: usize },
}

impl SolverBackend {
    pub fn cg() -> Self {
        SolverBackend::ConjugateGradient {
            tol: 1e-10,
            max_iter: 200_000,
        }
    }
}

pub fn solve(k: &SparseSymmetric, b: &[f64], backend: SolverBackend) -> Result<Vec<f64>> {
    let mut x = solve_many(k, &[b.to_vec()], backend)?;
    Ok(x.pop().unwrap_or_default())
}

/// Solves for several right-hand sides, factorizing once on the direct path.
pub fn solve_many(k: &SparseSymmetric, rhs: &[Vec<f64>], backend: SolverBackend) -> Result<Vec<Vec<f64>>> {
    let n = k.dim();
    if let Some(b) = rhs.iter().find(|b| b.len() != n) {
        return Err(Error::Solve(format!("rhs has {} entries, matrix is {n}", b.len())));
    }
    let nonzero: Vec<usize> = (0..rhs.len()).filter(|&c| rhs[c].iter().any(|&v| v != 0.0)).collect();
    let mut out = vec![vec![0.0; n]; rhs.len()];
    if nonzero.is_empty() {
        return Ok(out);
    }
    let solved = match backend {
        SolverBackend::Direct => solve_cholesky(k, &nonzero.iter().map(|&c| &rhs[c][..]).collect::<Vec<_>>())?,
        SolverBackend::ConjugateGradient { tol, max_iter } => nonzero
            .iter()
            .map(|&c| solve_pcg(k, &rhs[c], tol, max_iter))
            .collect::<Result<Vec<_>>>()?,
    };
    for (&c, x) in nonzero.iter().zip(solved) {
        let res = k.relative_residual(&x, &rhs[c]);
        if !(res <= RESIDUAL_TOL) {
            return Err(Error::Solve(format!(
                "relative residual {res:.3e} exceeds {RESIDUAL_TOL:.0e} (n = {}, nnz = {})",
                k.dim(),
                k.nnz()
            )));
        }
        out[c] = x;
    }
    Ok(out)
}

fn solve_cholesky(k: &SparseSymmetric, rhs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    // column j of the lower triangle is row j of the upper one
    let n = k.dim();
    let mut col_ptr = Vec::with_capacity(n + 1);
    let mut row_idx = Vec::with_capacity(k.nnz() / 2 + n);
    let mut values = Vec::with_capacity(k.nnz() / 2 + n);
    col_ptr.push(0usize);
    for j in 0..n {
        for (i, v) in k.row(j) {
            if i >= j {
                row_idx.push(i);
                values.push(v);
            }
        }
        col_ptr.push(row_idx.len());
    }
    let symbolic = SymbolicSparseColMat::new_checked(n, n, col_ptr, None, row_idx);
    let mat = SparseColMat::<usize, f64>::new(symbolic, values);
    let llt = mat
        .sp_cholesky(Side::Lower)
        .map_err(|e| Error::Solve(format!("Cholesky factorization failed, matrix not positive definite: {e:?}")))?;
    let b = Mat::<f64>::from_fn(n, rhs.len(), |i, c| rhs[c][i]);
    let x = llt.solve(&b);
    Ok((0..rhs.len()).map(|c| (0..n).map(|i| x[(i, c)]).collect()).collect())
}

fn solve_pcg(k: &SparseSymmetric, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = k.dim();
    let inv_diag: Vec<f64> = k
        .diagonal()
        .into_iter()
        .map(|d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let nb = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut kp = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for _ in 0..max_iter {
        k.mul_vec(&p, &mut kp);
        let pkp = dot(&p, &kp);
        if !(pkp > 0.0) {
            return Err(Error::Solve("conjugate gradient met a non-positive curvature".into()));
        }
        let step = rz / pkp;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * kp[i];
        }
        if dot(&r, &r).sqrt() <= tol * nb {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solve(format!("conjugate gradient did not converge in {max_iter} iterations")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn laplacian(n: usize) -> SparseSymmetric {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.5));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseSymmetric::from_triplets(n, t)
    }

    #[test]
    fn duplicates_are_summed() {
        let k = SparseSymmetric::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 4.0), (0, 1, 0.5), (1, 0, 0.5)]);
        assert_eq!(k.get(0, 0), 3.0);
        assert_eq!(k.nnz(), 4);
        assert_eq!(k.max_asymmetry(), 0.0);
    }

    #[test]
    fn backends_agree() {
        let k = laplacian(200);
        let b: Vec<f64> = (0..200).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let x1 = solve(&k, &b, SolverBackend::Direct).unwrap();
        let x2 = solve(&k, &b, SolverBackend::cg()).unwrap();
        for (a, c) in x1.iter().zip(&x2) {
            assert_relative_eq!(a, c, epsilon = 1e-8);
        }
    }

    #[test]
    fn element_pattern_matches_triplets() {
        let elems: [[usize; 3]; 2] = [[0, 1, usize::MAX], [1, 2, 3]];
        let mut k = SparseSymmetric::from_element_pattern(4, elems.iter().map(|e| &e[..]));
        let mut t = Vec::new();
        for e in &elems {
            k.scatter(e, |a, b| 1.0 + (a + b) as f64 + if a == b { 5.0 } else { 0.0 });
            for (a, &r) in e.iter().enumerate() {
                for (b, &c) in e.iter().enumerate() {
                    if r != usize::MAX && c != usize::MAX {
                        t.push((r, c, 1.0 + (a + b) as f64 + if a == b { 5.0 } else { 0.0 }));
                    }
                }
            }
        }
        let reference = SparseSymmetric::from_triplets(4, t);
        assert_eq!(k.nnz(), reference.nnz());
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(k.get(i, j), reference.get(i, j));
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let k = laplacian(5);
        assert_eq!(solve(&k, &[0.0; 5], SolverBackend::Direct).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let k = SparseSymmetric::from_triplets(2, vec![(0, 0, 1.0), (1, 1, -1.0)]);
        assert!(solve(&k, &[1.0, 1.0], SolverBackend::Direct).is_err());
    }
}
