//! Thin dense helpers over `faer` used throughout the crate.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

pub type Matrix = Mat<f64>;

pub fn zeros(r: usize, c: usize) -> Matrix {
    Mat::zeros(r, c)
}

pub fn eye(n: usize) -> Matrix {
    Mat::identity(n, n)
}

pub fn scaled_eye(n: usize, s: f64) -> Matrix {
    Mat::from_fn(n, n, |i, j| if i == j { s } else { 0.0 })
}

pub fn diag(d: &[f64]) -> Matrix {
    Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 })
}

/// Row-major construction.
pub fn from_rows(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

pub fn to_rows(a: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn col_vec(v: &[f64]) -> Matrix {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn t(a: &Matrix) -> Matrix {
    a.transpose().to_owned()
}

pub fn scale(a: &Matrix, s: f64) -> Matrix {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| s * a[(i, j)])
}

pub fn sym(a: &Matrix) -> Matrix {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]))
}

pub fn matvec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.ncols(), x.len());
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

pub fn vnorm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn is_finite(a: &Matrix) -> bool {
    (0..a.nrows()).all(|i| (0..a.ncols()).all(|j| a[(i, j)].is_finite()))
}

pub fn frob(a: &Matrix) -> f64 {
    a.norm_l2()
}

/// Assemble a block matrix from a grid. `None` entries are zero blocks whose
/// size is inferred from the rest of the row and column.
pub fn block(grid: &[Vec<Option<&Matrix>>]) -> Matrix {
    let nr = grid.len();
    let nc = grid[0].len();
    let mut rh = vec![usize::MAX; nr];
    let mut cw = vec![usize::MAX; nc];
    for (i, row) in grid.iter().enumerate() {
        assert_eq!(row.len(), nc, "ragged block grid");
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                if rh[i] == usize::MAX {
                    rh[i] = b.nrows();
                }
                if cw[j] == usize::MAX {
                    cw[j] = b.ncols();
                }
                assert_eq!(rh[i], b.nrows(), "block row height mismatch at ({i},{j})");
                assert_eq!(cw[j], b.ncols(), "block col width mismatch at ({i},{j})");
            }
        }
    }
    assert!(rh.iter().all(|&h| h != usize::MAX) && cw.iter().all(|&w| w != usize::MAX));
    let r: usize = rh.iter().sum();
    let c: usize = cw.iter().sum();
    let mut out = zeros(r, c);
    let mut r0 = 0;
    for (i, row) in grid.iter().enumerate() {
        let mut c0 = 0;
        for (j, b) in row.iter().enumerate() {
            if let Some(b) = b {
                out.as_mut()
                    .submatrix_mut(r0, c0, rh[i], cw[j])
                    .copy_from(b);
            }
            c0 += cw[j];
        }
        r0 += rh[i];
    }
    out
}

pub fn hcat(a: &Matrix, b: &Matrix) -> Matrix {
    block(&[vec![Some(a), Some(b)]])
}

pub fn vcat(a: &Matrix, b: &Matrix) -> Matrix {
    block(&[vec![Some(a)], vec![Some(b)]])
}

pub fn sub(a: &Matrix, r0: usize, c0: usize, nr: usize, nc: usize) -> Matrix {
    a.as_ref().submatrix(r0, c0, nr, nc).to_owned()
}

pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return Ok(Vec::new());
    }
    a.singular_values()
        .map_err(|e| Error::Numerical(format!("svd: {e:?}")))
}

/// Thin SVD: (U, singular values descending, V) with a = U diag(s) V'.
pub fn svd(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let d = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd: {e:?}")))?;
    let s = d.S().column_vector();
    let sv = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((d.U().to_owned(), sv, d.V().to_owned()))
}

/// Spectral norm.
pub fn norm2(a: &Matrix) -> Result<f64> {
    Ok(singular_values(a)?.first().copied().unwrap_or(0.0))
}

/// Moore–Penrose pseudo-inverse; singular values below `rtol * s_max` are dropped.
/// Also returns the retained rank.
pub fn pinv_rank(a: &Matrix, rtol: f64) -> Result<(Matrix, usize)> {
    let (m, n) = (a.nrows(), a.ncols());
    if m == 0 || n == 0 {
        return Ok((zeros(n, m), 0));
    }
    let svd = a
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("svd: {e:?}")))?;
    let s = svd.S().column_vector();
    let k = s.nrows();
    let smax = if k > 0 { s[0] } else { 0.0 };
    let cut = rtol * smax;
    let u = svd.U();
    let v = svd.V();
    let mut out = zeros(n, m);
    let mut rank = 0;
    for l in 0..k {
        let sl = s[l];
        if sl <= cut || sl == 0.0 {
            continue;
        }
        rank += 1;
        let inv = 1.0 / sl;
        for i in 0..n {
            let vi = v[(i, l)] * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..m {
                out[(i, j)] += vi * u[(j, l)];
            }
        }
    }
    Ok((out, rank))
}

pub fn pinv(a: &Matrix, rtol: f64) -> Result<Matrix> {
    Ok(pinv_rank(a, rtol)?.0)
}

pub fn inv(a: &Matrix) -> Result<Matrix> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("inverse of non-square matrix".into()));
    }
    let out = a.partial_piv_lu().inverse();
    if !is_finite(&out) {
        return Err(Error::Numerical("singular matrix".into()));
    }
    Ok(out)
}

/// Solve `a x = b`.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let out = a.partial_piv_lu().solve(b);
    if !is_finite(&out) {
        return Err(Error::Numerical("singular system".into()));
    }
    Ok(out)
}

pub fn cond2(a: &Matrix) -> Result<f64> {
    let s = singular_values(a)?;
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) if lo > 0.0 => Ok(hi / lo),
        (Some(_), Some(_)) => Ok(f64::INFINITY),
        _ => Ok(0.0),
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigvals(a: &Matrix) -> Result<Vec<f64>> {
    if a.nrows() == 0 {
        return Ok(Vec::new());
    }
    sym(a)
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigh: {e:?}")))
}

pub fn max_eig(a: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(a)?.last().copied().unwrap_or(f64::NEG_INFINITY))
}

pub fn min_eig(a: &Matrix) -> Result<f64> {
    Ok(sym_eigvals(a)?.first().copied().unwrap_or(f64::INFINITY))
}

/// Symmetric eigendecomposition: (ascending eigenvalues, orthonormal eigenvectors as columns).
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let e = sym(a)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigh: {e:?}")))?;
    let s = e.S().column_vector();
    let vals = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((vals, e.U().to_owned()))
}

pub fn spectral_radius(a: &Matrix) -> Result<f64> {
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let ev = a
        .eigenvalues()
        .map_err(|e| Error::Numerical(format!("eig: {e:?}")))?;
    Ok(ev.iter().map(|z| z.re.hypot(z.im)).fold(0.0, f64::max))
}

/// Cholesky factor (lower) of a symmetric positive definite matrix.
pub fn chol(a: &Matrix) -> Option<Matrix> {
    a.llt(Side::Lower).ok().map(|l| l.L().to_owned())
}

/// Row-major JSON container shared by every serialized matrix.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for DenseMatrix {
    fn from(a: &Matrix) -> Self {
        DenseMatrix {
            rows: a.nrows(),
            cols: a.ncols(),
            data: to_rows(a.as_ref()),
        }
    }
}

impl DenseMatrix {
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Parse(format!(
                "matrix payload has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(from_rows(self.rows, self.cols, &self.data))
    }
}
