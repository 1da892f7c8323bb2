//! Compressed-row symmetric matrices and preconditioned conjugate gradients.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};

/// Square sparse matrix in compressed row layout, intended to be symmetric
/// positive definite (stiffness and mass operators).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSpdMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSpdMatrix {
    /// Builds the matrix from `(row, col, value)` triplets; duplicates are summed.
    ///
    /// Entries within a row end up sorted by column, so the summation order of
    /// [`matvec`] is fixed by the sparsity pattern alone.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(usage(format!("triplet ({i}, {j}) outside {n}x{n} matrix")));
            }
            rows[i].push((j, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            for (j, v) in row {
                if col_idx.len() > *row_ptr.last().unwrap() && *col_idx.last().unwrap() == j {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(SparseSpdMatrix { n, row_ptr, col_idx, values })
    }

    pub fn identity(n: usize) -> Self {
        SparseSpdMatrix { n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Reuses this matrix's sparsity pattern with a new set of values.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        SparseSpdMatrix { n: self.n, row_ptr: self.row_ptr.clone(), col_idx: self.col_idx.clone(), values }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Position of entry `(i, j)` in the value array, if it is stored.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].binary_search(&j).ok().map(|k| range.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    /// Checks numerical symmetry (relative to the largest entry) and a
    /// strictly positive diagonal.
    pub fn validate_spd_structure(&self, rel_tol: f64) -> Result<()> {
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if (v - self.get(j, i)).abs() > rel_tol * scale {
                    return Err(usage(format!("matrix not symmetric at ({i}, {j})")));
                }
            }
            if !(self.get(i, i) > 0.0) {
                return Err(usage(format!("non-positive diagonal at row {i}")));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }
}

/// Sparse product `A x`, summed in column order within each row.
pub fn matvec(a: &SparseSpdMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.n {
        return Err(usage(format!("matvec: vector length {} for {}x{} matrix", x.len(), a.n, a.n)));
    }
    let mut y = vec![0.0; a.n];
    a.matvec_into(x, &mut y);
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioner {
    None,
    Jacobi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgConfig {
    pub rel_tol: f64,
    /// Iteration cap; `None` means `10 * n`.
    pub max_iter: Option<usize>,
    pub preconditioner: Preconditioner,
}

impl Default for CgConfig {
    fn default() -> Self {
        CgConfig { rel_tol: 1e-10, max_iter: None, preconditioner: Preconditioner::Jacobi }
    }
}

impl CgConfig {
    fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(usage(format!("cg rel_tol {} outside (0, 1)", self.rel_tol)));
        }
        if self.max_iter == Some(0) {
            return Err(usage("cg max_iter must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Final true relative residual `||A x - b|| / ||b||` (0 when `b = 0`).
    pub residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients from a zero initial guess.
///
/// Stops once the true residual satisfies `||A x - b||_2 <= rel_tol ||b||_2`.
/// The recursive residual is used for the cheap per-iteration test and the
/// true residual is recomputed before accepting; on disagreement the
/// iteration restarts from the current iterate.
pub fn cg_solve(a: &SparseSpdMatrix, b: &[f64], cfg: &CgConfig) -> Result<CgSolution> {
    cfg.validate()?;
    let n = a.n;
    if b.len() != n {
        return Err(usage(format!("cg_solve: rhs length {} for dimension {n}", b.len())));
    }
    if let Some(i) = b.iter().position(|v| !v.is_finite()) {
        return Err(usage(format!("cg_solve: non-finite rhs entry {i}")));
    }
    let max_iter = cfg.max_iter.unwrap_or(10 * n.max(1));
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(CgSolution { x, iterations: 0, residual: 0.0 });
    }
    let tol = cfg.rel_tol * bnorm;
    let inv_diag: Vec<f64> = match cfg.preconditioner {
        Preconditioner::Jacobi => a.diagonal().iter().map(|d| 1.0 / d).collect(),
        Preconditioner::None => vec![1.0; n],
    };

    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;

    loop {
        if iterations >= max_iter {
            a.matvec_into(&x, &mut q);
            let res = q.iter().zip(b).map(|(ax, bi)| (bi - ax) * (bi - ax)).sum::<f64>().sqrt();
            return Err(Error::NonConvergence { iterations, residual: res / bnorm });
        }
        a.matvec_into(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::NonConvergence { iterations, residual: dot(&r, &r).sqrt() / bnorm });
        }
        let step = rz / pq;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * q[i];
        }
        iterations += 1;

        if dot(&r, &r).sqrt() <= tol {
            a.matvec_into(&x, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
            }
            let true_res = dot(&r, &r).sqrt();
            if true_res <= tol {
                return Ok(CgSolution { x, iterations, residual: true_res / bnorm });
            }
            // restart from the current iterate with the true residual
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
            continue;
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tridiag(n: usize) -> SparseSpdMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        SparseSpdMatrix::from_triplets(n, &t).unwrap()
    }

    fn random_spd(n: usize, seed: u64) -> (SparseSpdMatrix, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let dense = &b * b.transpose() + DMatrix::identity(n, n) * (n as f64);
        let mut t = Vec::new();
        for i in 0..n {
            for j in 0..n {
                t.push((i, j, dense[(i, j)]));
            }
        }
        (SparseSpdMatrix::from_triplets(n, &t).unwrap(), dense)
    }

    #[test]
    fn identity_solves_in_one_iteration() {
        let a = SparseSpdMatrix::identity(7);
        let b: Vec<f64> = (0..7).map(|i| i as f64 - 3.5).collect();
        for pc in [Preconditioner::None, Preconditioner::Jacobi] {
            let cfg = CgConfig { preconditioner: pc, ..Default::default() };
            let sol = cg_solve(&a, &b, &cfg).unwrap();
            assert!(sol.iterations <= 1);
            assert_eq!(sol.x, b);
        }
    }

    #[test]
    fn tridiagonal_matches_dense_solve() {
        let a = tridiag(5);
        let b = vec![1.0; 5];
        // dense oracle
        let dense = DMatrix::from_fn(5, 5, |i, j| a.get(i, j));
        let expect = dense.lu().solve(&DVector::from_vec(b.clone())).unwrap();
        let sol = cg_solve(&a, &b, &CgConfig::default()).unwrap();
        let frozen = [2.5, 4.0, 4.5, 4.0, 2.5];
        for i in 0..5 {
            assert!((sol.x[i] - expect[i]).abs() < 1e-9);
            assert!((sol.x[i] - frozen[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let sol = cg_solve(&tridiag(4), &[0.0; 4], &CgConfig::default()).unwrap();
        assert_eq!(sol.x, vec![0.0; 4]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn non_convergence_reports_residual() {
        let a = tridiag(50);
        let b = vec![1.0; 50];
        let cfg = CgConfig { max_iter: Some(2), ..Default::default() };
        match cg_solve(&a, &b, &cfg) {
            Err(Error::NonConvergence { iterations, residual }) => {
                assert_eq!(iterations, 2);
                assert!(residual > 1e-10);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn bad_config_and_lengths_rejected() {
        let a = tridiag(3);
        assert!(cg_solve(&a, &[1.0; 2], &CgConfig::default()).is_err());
        let cfg = CgConfig { rel_tol: 0.0, ..Default::default() };
        assert!(cg_solve(&a, &[1.0; 3], &cfg).is_err());
        assert!(matvec(&a, &[1.0; 4]).is_err());
    }

    #[test]
    fn matvec_matches_dense_and_is_symmetric() {
        let (a, dense) = random_spd(20, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = matvec(&a, &x).unwrap();
        let oracle = &dense * DVector::from_vec(x.clone());
        for i in 0..20 {
            assert!((ax[i] - oracle[i]).abs() <= 1e-13 * oracle.amax());
        }
        let ay = matvec(&a, &y).unwrap();
        let (l, r) = (dot(&ax, &y), dot(&x, &ay));
        assert!((l - r).abs() <= 1e-12 * l.abs().max(1.0));
        assert_eq!(matvec(&a, &[0.0; 20]).unwrap(), vec![0.0; 20]);
        assert_eq!(matvec(&SparseSpdMatrix::identity(20), &x).unwrap(), x);
        a.validate_spd_structure(1e-12).unwrap();
    }

    #[test]
    fn preconditioners_agree_and_energy_decreases() {
        let (a, _) = random_spd(30, 5);
        let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let cfg_j = CgConfig::default();
        let cfg_n = CgConfig { preconditioner: Preconditioner::None, ..Default::default() };
        let xj = cg_solve(&a, &b, &cfg_j).unwrap();
        let xn = cg_solve(&a, &b, &cfg_n).unwrap();
        let xnorm = dot(&xj.x, &xj.x).sqrt();
        let diff: f64 = xj.x.iter().zip(&xn.x).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 10.0 * cfg_j.rel_tol * xnorm);
        assert!(xj.residual <= 1e-10);
        let ax = matvec(&a, &xj.x).unwrap();
        let energy = 0.5 * dot(&xj.x, &ax) - dot(&b, &xj.x);
        assert!(energy <= 0.0);
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let a = SparseSpdMatrix::from_triplets(2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0)]).unwrap();
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.nnz(), 2);
    }
}
