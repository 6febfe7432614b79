//! Sparse matrix storage for assembly, low-rank corrections for the
//! nonlocal base-traction linearization, and direct solves.
//!
//! Assembly scatters into a CSR matrix with a fixed symbolic pattern;
//! factorization goes through faer's sparse LU. Matrices of the form
//! `A + sum_i u_i v_i^T` are solved with the Woodbury identity so the
//! rank-3 base-direction coupling never densifies the sparse factor.

use faer::prelude::*;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Symbolic CSR pattern; column indices sorted within each row.
#[derive(Debug, Clone)]
pub struct SparsityPattern {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl SparsityPattern {
    /// Build from per-row column lists (deduplicated and sorted here).
    pub fn from_rows(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let nrows = rows.len();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for cols in rows.iter_mut() {
            cols.sort_unstable();
            cols.dedup();
            col_idx.extend_from_slice(cols);
            row_ptr.push(col_idx.len());
        }
        SparsityPattern { nrows, ncols, row_ptr, col_idx }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }
}

/// CSR matrix over a shared pattern.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pub pattern: std::sync::Arc<SparsityPattern>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: std::sync::Arc<SparsityPattern>) -> Self {
        let nnz = pattern.nnz();
        CsrMatrix { pattern, values: vec![0.0; nnz] }
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn set_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Accumulate into entry (i, j); the entry must exist in the pattern.
    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        let lo = self.pattern.row_ptr[i];
        let hi = self.pattern.row_ptr[i + 1];
        let cols = &self.pattern.col_idx[lo..hi];
        match cols.binary_search(&j) {
            Ok(k) => self.values[lo + k] += v,
            Err(_) => panic!("entry ({i},{j}) not in sparsity pattern"),
        }
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = &*self.pattern;
        let mut y = DVector::zeros(p.nrows);
        for i in 0..p.nrows {
            let mut acc = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                acc += self.values[k] * x[p.col_idx[k]];
            }
            y[i] = acc;
        }
        y
    }

    /// Frobenius-norm distance to the transpose, relative to own norm.
    pub fn asymmetry(&self) -> f64 {
        let p = &*self.pattern;
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..p.nrows {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                let j = p.col_idx[k];
                let v = self.values[k];
                den += v * v;
                let lo = p.row_ptr[j];
                let hi = p.row_ptr[j + 1];
                let vt = match p.col_idx[lo..hi].binary_search(&i) {
                    Ok(kk) => self.values[lo + kk],
                    Err(_) => 0.0,
                };
                num += (v - vt) * (v - vt);
            }
        }
        (num / den.max(1e-300)).sqrt()
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>> {
        let p = &*self.pattern;
        let mut trip = Vec::with_capacity(p.nnz());
        for i in 0..p.nrows {
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                trip.push(Triplet::new(i, p.col_idx[k], self.values[k]));
            }
        }
        SparseColMat::try_new_from_triplets(p.nrows, p.ncols, &trip)
            .map_err(|e| Error::Singular(format!("sparse build failed: {e:?}")))
    }
}

/// Sum of rank-1 terms `cols[i] * rows[i]^T`.
#[derive(Debug, Clone, Default)]
pub struct LowRankUpdate {
    pub cols: Vec<DVector<f64>>,
    pub rows: Vec<DVector<f64>>,
}

impl LowRankUpdate {
    pub fn rank(&self) -> usize {
        self.cols.len()
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = x.len();
        let mut y = DVector::zeros(n);
        for (u, v) in self.cols.iter().zip(&self.rows) {
            let s = v.dot(x);
            y.axpy(s, u, 1.0);
        }
        y
    }
}

/// Sparse matrix plus optional low-rank correction.
#[derive(Debug, Clone)]
pub struct SystemMatrix {
    pub sparse: CsrMatrix,
    pub low_rank: LowRankUpdate,
}

impl SystemMatrix {
    pub fn nrows(&self) -> usize {
        self.sparse.nrows()
    }

    pub fn matvec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.sparse.matvec(x);
        if self.low_rank.rank() > 0 {
            y += self.low_rank.matvec(x);
        }
        y
    }

    /// Dense matrix-matrix product (used for Galerkin projection V^T A V).
    pub fn mul_dense(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows(), v.ncols());
        for j in 0..v.ncols() {
            let col = self.matvec(&DVector::from(v.column(j).clone_owned()));
            out.set_column(j, &col);
        }
        out
    }

    pub fn factorize(&self) -> Result<SystemSolver> {
        let lu = self
            .sparse
            .to_faer()?
            .sp_lu()
            .map_err(|e| Error::Singular(format!("sparse LU failed: {e:?}")))?;
        let n = self.nrows();
        let r = self.low_rank.rank();
        let mut ainv_u = Vec::with_capacity(r);
        for u in &self.low_rank.cols {
            ainv_u.push(solve_with(&lu, u, n));
        }
        // capacitance C = I + V^T A^{-1} U
        let mut cap: DMatrix<f64> = DMatrix::identity(r, r);
        for (i, vrow) in self.low_rank.rows.iter().enumerate() {
            for (j, au) in ainv_u.iter().enumerate() {
                cap[(i, j)] += vrow.dot(au);
            }
        }
        let cap_lu = if r > 0 {
            let lu_c = cap.clone().lu();
            if lu_c.determinant().abs() < 1e-300 {
                return Err(Error::Singular("Woodbury capacitance singular".into()));
            }
            Some(lu_c)
        } else {
            None
        };
        Ok(SystemSolver { lu, n, rows: self.low_rank.rows.clone(), ainv_u, cap_lu })
    }
}

type FaerLu = faer::sparse::linalg::solvers::Lu<usize, f64>;

fn solve_with(lu: &FaerLu, b: &DVector<f64>, n: usize) -> DVector<f64> {
    let rhs = Mat::from_fn(n, 1, |i, _| b[i]);
    let x = lu.solve(&rhs);
    DVector::from_fn(n, |i, _| x[(i, 0)])
}

/// Factorized `A + U V^T`; solves via Sherman-Morrison-Woodbury.
pub struct SystemSolver {
    lu: FaerLu,
    n: usize,
    rows: Vec<DVector<f64>>,
    ainv_u: Vec<DVector<f64>>,
    cap_lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl SystemSolver {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = solve_with(&self.lu, b, self.n);
        match &self.cap_lu {
            None => y,
            Some(cap) => {
                let r = self.rows.len();
                let vty = DVector::from_fn(r, |i, _| self.rows[i].dot(&y));
                let w = cap.solve(&vty).expect("capacitance solve");
                let mut x = y;
                for i in 0..r {
                    x.axpy(-w[i], &self.ainv_u[i], 1.0);
                }
                x
            }
        }
    }
}

/// Dense solve of a small system with partial pivoting.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular("dense LU solve failed".into()))
}

pub fn to_faer_mat(a: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn from_faer_mat(a: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// Thin SVD; returns (U, sigma, V^T-free) — only left vectors and values,
/// which is all POD needs.
pub fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = to_faer_mat(a);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::Singular(format!("SVD failed: {e:?}")))?;
    let u = from_faer_mat(&svd.U().to_owned());
    let s = svd.S();
    let k = u.ncols();
    let sig = DVector::from_fn(k, |i, _| s[i]);
    Ok((u, sig))
}

/// Thin QR orthonormal factor.
pub fn thin_qr_q(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = to_faer_mat(a);
    let qr = m.qr();
    let q = qr.compute_thin_Q();
    from_faer_mat(&q)
}
