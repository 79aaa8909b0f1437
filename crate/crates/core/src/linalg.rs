//! Small dense and sparse linear algebra used by the graph correction.
//!
//! Two independent routes solve the same least-squares problems: conjugate
//! gradient on the normal equations for production use, and a dense LU
//! factorization kept for small instances and oracle checks.

use crate::{Error, Result};

/// Solves a dense n x n system in place via LU with partial pivoting.
///
/// `a` is row-major and is consumed. Fails on an effectively singular matrix.
pub fn solve_dense(mut a: Vec<f64>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n * n {
        return Err(Error::config(format!(
            "dense solve shape mismatch: {} coefficients for {} unknowns",
            a.len(),
            n
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut pivot_row = k;
        let mut pivot_mag = a[perm[k] * n + k].abs();
        for r in k + 1..n {
            let mag = a[perm[r] * n + k].abs();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = r;
            }
        }
        if pivot_mag < 1e-300 {
            return Err(Error::numerical(format!(
                "singular dense system (pivot {pivot_mag:.3e} in column {k})"
            )));
        }
        perm.swap(k, pivot_row);
        let pk = perm[k];
        for r in k + 1..n {
            let pr = perm[r];
            let factor = a[pr * n + k] / a[pk * n + k];
            a[pr * n + k] = factor;
            for c in k + 1..n {
                a[pr * n + c] -= factor * a[pk * n + c];
            }
            b[pr] -= factor * b[pk];
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let pk = perm[k];
        let mut s = b[pk];
        for c in k + 1..n {
            s -= a[pk * n + c] * x[c];
        }
        x[k] = s / a[pk * n + k];
    }
    Ok(x)
}

/// Sparse matrix stored by rows; each row lists (column, value) pairs.
#[derive(Debug, Clone)]
pub struct SparseRows {
    cols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(cols: usize) -> Self {
        SparseRows { cols, rows: Vec::new() }
    }

    pub fn push_row(&mut self, entries: Vec<(usize, f64)>) {
        debug_assert!(entries.iter().all(|&(c, _)| c < self.cols));
        self.rows.push(entries);
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(c, v)| v * x[c]).sum())
            .collect()
    }

    /// y = A^T x.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows.len());
        let mut y = vec![0.0; self.cols];
        for (r, row) in self.rows.iter().enumerate() {
            let xr = x[r];
            for &(c, v) in row {
                y[c] += v * xr;
            }
        }
        y
    }
}

/// Result of a conjugate-gradient least-squares solve.
#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: Vec<f64>,
    /// Norm of A^T (b - A x) at return; the objective gradient is twice this.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes ||A x - b|| by conjugate gradient on the normal equations (CGNR).
///
/// Stops when the normal-equation residual norm drops to `tol` or after
/// `max_iter` iterations, whichever comes first.
pub fn least_squares_cg(a: &SparseRows, b: &[f64], tol: f64, max_iter: usize) -> CgSolution {
    let n = a.n_cols();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut g = a.matvec_transpose(&r);
    let mut gamma: f64 = g.iter().map(|v| v * v).sum();
    if gamma.sqrt() <= tol {
        return CgSolution { x, grad_norm: gamma.sqrt(), iterations: 0, converged: true };
    }
    let mut p = g.clone();
    for iter in 1..=max_iter {
        let q = a.matvec(&p);
        let qq: f64 = q.iter().map(|v| v * v).sum();
        if qq == 0.0 {
            // Search direction in the null space; the gradient cannot decrease
            // along it, so report the current state.
            return CgSolution {
                x,
                grad_norm: gamma.sqrt(),
                iterations: iter,
                converged: gamma.sqrt() <= tol,
            };
        }
        let alpha = gamma / qq;
        for (xi, pi) in x.iter_mut().zip(&p) {
            *xi += alpha * pi;
        }
        for (ri, qi) in r.iter_mut().zip(&q) {
            *ri -= alpha * qi;
        }
        g = a.matvec_transpose(&r);
        let gamma_next: f64 = g.iter().map(|v| v * v).sum();
        if gamma_next.sqrt() <= tol {
            return CgSolution { x, grad_norm: gamma_next.sqrt(), iterations: iter, converged: true };
        }
        let beta = gamma_next / gamma;
        gamma = gamma_next;
        for (pi, gi) in p.iter_mut().zip(&g) {
            *pi = gi + beta * *pi;
        }
    }
    CgSolution { x, grad_norm: gamma.sqrt(), iterations: max_iter, converged: false }
}

/// Dense route for the same problem: forms A^T A explicitly and solves by LU.
pub fn least_squares_dense(a: &SparseRows, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n_cols();
    let mut ata = vec![0.0; n * n];
    let mut atb = vec![0.0; n];
    for (r, row) in a.rows().iter().enumerate() {
        for &(ci, vi) in row {
            atb[ci] += vi * b[r];
            for &(cj, vj) in row {
                ata[ci * n + cj] += vi * vj;
            }
        }
    }
    solve_dense(ata, atb)
}
