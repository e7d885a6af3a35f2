//! Dense symmetric eigendecomposition (cyclic Jacobi), one-sided Jacobi
//! SVD and modified Gram-Schmidt orthonormalization.
//!
//! All routines operate on small dense matrices (local graph Laplacians,
//! encoder projection matrices), so the quadratically convergent Jacobi
//! family is both simple and accurate enough for the tolerances used
//! throughout the crate.

use super::NumericsError;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, col: &[f64]) {
        for i in 0..self.rows {
            self[(i, j)] = col[i];
        }
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows);
        let mut out = Self::zeros(self.rows, self.cols + other.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(i, j)] = self[(i, j)];
            }
            for j in 0..other.cols {
                out[(i, self.cols + j)] = other[(i, j)];
            }
        }
        out
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

const MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns of the returned matrix.
pub fn sym_eig(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), NumericsError> {
    let n = a.rows;
    if a.cols != n {
        return Err(NumericsError::Dimension(format!("{}x{} not square", a.rows, a.cols)));
    }
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let scale = a.max_abs().max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    if asym > 1e-10 * scale {
        return Err(NumericsError::Symmetry(asym));
    }

    let mut m = a.clone();
    // enforce exact symmetry before sweeping
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    let mut v = DenseMatrix::identity(n);
    let tol = 1e-15 * scale;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(m[(i, j)].abs());
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= tol {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(NumericsError::Convergence("jacobi eigensolver", MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok((eigenvalues, vectors))
}

/// Singular value decomposition by one-sided Jacobi.
///
/// Returns `(u, sigma, v)` with singular values descending so that
/// `u * diag(sigma) * v^T` reconstructs the input. For `rows < cols`
/// the decomposition is computed on the transpose and swapped back.
pub fn svd(a: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix), NumericsError> {
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    if a.rows < a.cols {
        let (u, s, v) = svd(&a.transpose())?;
        return Ok((v, s, u));
    }
    let m = a.rows;
    let n = a.cols;
    let mut u = a.clone();
    let mut v = DenseMatrix::identity(n);
    let scale = a.max_abs().max(1.0);
    let tol = 1e-15 * scale * scale;

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for k in 0..m {
                    let up = u[(k, p)];
                    let uq = u[(k, q)];
                    app += up * up;
                    aqq += uq * uq;
                    apq += up * uq;
                }
                if apq.abs() <= tol.max(1e-15 * (app * aqq).sqrt()) {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..m {
                    let up = u[(k, p)];
                    let uq = u[(k, q)];
                    u[(k, p)] = c * up - s * uq;
                    u[(k, q)] = s * up + c * uq;
                }
                for k in 0..n {
                    let vp = v[(k, p)];
                    let vq = v[(k, q)];
                    v[(k, p)] = c * vp - s * vq;
                    v[(k, q)] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(NumericsError::Convergence("jacobi svd", MAX_SWEEPS));
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|k| u[(k, j)] * u[(k, j)]).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let mut u_out = DenseMatrix::zeros(m, n);
    let mut v_out = DenseMatrix::zeros(n, n);
    let mut s_out = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        let s = sigma[src];
        s_out.push(s);
        if s > 1e-300 {
            for k in 0..m {
                u_out[(k, dst)] = u[(k, src)] / s;
            }
        } else {
            // null direction: leave a zero column, fixed up below
            for k in 0..m {
                u_out[(k, dst)] = 0.0;
            }
        }
        for k in 0..n {
            v_out[(k, dst)] = v[(k, src)];
        }
    }
    // replace zero columns of U with any orthonormal completion
    complete_orthonormal(&mut u_out, &s_out);
    sigma = s_out;
    Ok((u_out, sigma, v_out))
}

fn complete_orthonormal(u: &mut DenseMatrix, sigma: &[f64]) {
    let m = u.rows;
    for j in 0..u.cols {
        if sigma[j] > 1e-300 {
            continue;
        }
        // find a unit vector orthogonal to all existing nonzero columns
        for seed in 0..m {
            let mut col = vec![0.0; m];
            col[seed] = 1.0;
            for k in 0..u.cols {
                if k == j {
                    continue;
                }
                let existing = u.column(k);
                let dot: f64 = col.iter().zip(&existing).map(|(a, b)| a * b).sum();
                for i in 0..m {
                    col[i] -= dot * existing[i];
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in col.iter_mut() {
                    *x /= norm;
                }
                u.set_column(j, &col);
                break;
            }
        }
    }
}

/// Orthonormalize the columns of `a` by modified Gram-Schmidt with
/// re-orthogonalization. Numerically dependent columns are dropped, so
/// the output may have fewer columns than the input.
pub fn orth(a: &DenseMatrix) -> Result<DenseMatrix, NumericsError> {
    if !a.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    let m = a.rows;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    let col_scale = a.max_abs().max(1.0);
    for j in 0..a.cols {
        let mut col = a.column(j);
        // two MGS passes
        for _ in 0..2 {
            for q in &kept {
                let dot: f64 = col.iter().zip(q).map(|(a, b)| a * b).sum();
                for i in 0..m {
                    col[i] -= dot * q[i];
                }
            }
        }
        let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-10 * col_scale {
            for x in col.iter_mut() {
                *x /= norm;
            }
            kept.push(col);
        }
    }
    if kept.is_empty() {
        return Err(NumericsError::Rank);
    }
    let mut out = DenseMatrix::zeros(m, kept.len());
    for (j, q) in kept.iter().enumerate() {
        out.set_column(j, q);
    }
    Ok(out)
}
