//! Small numerical kernels shared by the pipeline stages: a CSR matrix,
//! Jacobi-preconditioned conjugate gradient, symmetric eigendecomposition
//! and moment helpers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets. Duplicates are summed, explicit
    /// zeros are kept out.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(r, c, v) in triplets {
            assert!(r < n_rows && c < n_cols, "triplet out of bounds");
            rows[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(n_rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut iter = row.into_iter().peekable();
            while let Some((c, mut v)) = iter.next() {
                while let Some(&(c2, v2)) = iter.peek() {
                    if c2 != c {
                        break;
                    }
                    v += v2;
                    iter.next();
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        CsrMatrix {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(dense: ArrayView2<f64>) -> Self {
        let mut triplets = Vec::new();
        for ((r, c), &v) in dense.indexed_iter() {
            if v != 0.0 {
                triplets.push((r, c, v));
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), &triplets)
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self::from_triplets(n_rows, n_cols, &[])
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut y = Array1::zeros(self.n_rows);
        for r in 0..self.n_rows {
            y[r] = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
        y
    }

    /// `y = xᵀ A`, i.e. a row vector times the matrix.
    pub fn vec_mul(&self, x: ArrayView1<f64>) -> Array1<f64> {
        assert_eq!(x.len(), self.n_rows);
        let mut y = Array1::zeros(self.n_cols);
        for r in 0..self.n_rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += xr * v;
            }
        }
        y
    }

    /// Applies the matrix to every row of `x` from the right: `X A`.
    pub fn right_mul_rows(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.n_rows);
        let mut out = Array2::zeros((x.nrows(), self.n_cols));
        for (xr, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
            for r in 0..self.n_rows {
                let a = xr[r];
                if a == 0.0 {
                    continue;
                }
                for (c, v) in self.row(r) {
                    orow[c] += a * v;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        Self::from_triplets(self.n_cols, self.n_rows, &triplets)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut d = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                d[[r, c]] += v;
            }
        }
        d
    }

    pub fn abs(&self) -> CsrMatrix {
        CsrMatrix {
            values: self.values.iter().map(|v| v.abs()).collect(),
            ..self.clone()
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

/// Jacobi-preconditioned conjugate gradient for an SPD operator.
///
/// `x` holds the warm start on entry and the solution on exit. Convergence
/// is declared when `‖b − A x‖ ≤ tol · ‖b‖`.
pub fn pcg<F>(
    apply: F,
    diagonal: ArrayView1<f64>,
    b: ArrayView1<f64>,
    x: &mut Array1<f64>,
    tol: f64,
    max_iter: usize,
) -> CgOutcome
where
    F: Fn(ArrayView1<f64>) -> Array1<f64>,
{
    let b_norm = b.dot(&b).sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return CgOutcome {
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let inv_diag = diagonal.mapv(|d| if d > 0.0 { 1.0 / d } else { 1.0 });
    let mut r = &b - &apply(x.view());
    let mut res = r.dot(&r).sqrt() / b_norm;
    if res <= tol {
        return CgOutcome {
            iterations: 0,
            relative_residual: res,
            converged: true,
        };
    }
    let mut z = &r * &inv_diag;
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 1..=max_iter {
        let ap = apply(p.view());
        let pap = p.dot(&ap);
        if pap <= 0.0 || !pap.is_finite() {
            return CgOutcome {
                iterations: it,
                relative_residual: res,
                converged: false,
            };
        }
        let alpha = rz / pap;
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        res = r.dot(&r).sqrt() / b_norm;
        if res <= tol {
            // Guard against drift of the recursive residual.
            let true_r = &b - &apply(x.view());
            let true_res = true_r.dot(&true_r).sqrt() / b_norm;
            if true_res <= tol {
                return CgOutcome {
                    iterations: it,
                    relative_residual: true_res,
                    converged: true,
                };
            }
            r = true_r;
            res = true_res;
        }
        z = &r * &inv_diag;
        let rz_new = r.dot(&z);
        let beta = rz_new / rz;
        rz = rz_new;
        p = &z + &(beta * &p);
    }
    CgOutcome {
        iterations: max_iter,
        relative_residual: res,
        converged: false,
    }
}

/// Cholesky factor of a symmetric positive definite band matrix.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bandwidth: usize,
    /// Row `i` holds `L[i, i - bandwidth ..= i]`.
    rows: Vec<f64>,
}

impl BandCholesky {
    /// Factors the matrix given by its diagonal and strictly lower entries
    /// `(i, j, a_ij)` with `i > j`. Returns `None` if the matrix is not
    /// numerically positive definite.
    pub fn factor(diagonal: ArrayView1<f64>, lower: &[(usize, usize, f64)]) -> Option<Self> {
        let n = diagonal.len();
        let bandwidth = lower.iter().map(|&(i, j, _)| i - j).max().unwrap_or(0);
        let w = bandwidth + 1;
        let mut rows = vec![0.0; n * w];
        for i in 0..n {
            rows[i * w + bandwidth] = diagonal[i];
        }
        for &(i, j, v) in lower {
            rows[i * w + bandwidth - (i - j)] += v;
        }
        for i in 0..n {
            let lo = i.saturating_sub(bandwidth);
            for j in lo..=i {
                let mut sum = rows[i * w + bandwidth - (i - j)];
                for k in lo.max(j.saturating_sub(bandwidth))..j {
                    sum -= rows[i * w + bandwidth - (i - k)] * rows[j * w + bandwidth - (j - k)];
                }
                if i == j {
                    if !(sum > 0.0) {
                        return None;
                    }
                    rows[i * w + bandwidth] = sum.sqrt();
                } else {
                    rows[i * w + bandwidth - (i - j)] = sum / rows[j * w + bandwidth];
                }
            }
        }
        Some(BandCholesky { n, bandwidth, rows })
    }

    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let (n, bw) = (self.n, self.bandwidth);
        let w = bw + 1;
        let l = |i: usize, j: usize| self.rows[i * w + bw - (i - j)];
        let mut y = b.to_owned();
        for i in 0..n {
            let mut s = y[i];
            for k in i.saturating_sub(bw)..i {
                s -= l(i, k) * y[k];
            }
            y[i] = s / l(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..(i + bw + 1).min(n) {
                s -= l(k, i) * y[k];
            }
            y[i] = s / l(i, i);
        }
        y
    }
}

/// Eigendecomposition of a symmetric matrix. Eigenvalues are returned in
/// descending order with eigenvectors as the matching columns.
pub fn sym_eigh(a: ArrayView2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "sym_eigh needs a square matrix");
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| 0.5 * (a[[i, j]] + a[[j, i]]));
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = Array1::from_iter(order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = eig.eigenvectors[(r, src)];
        }
    }
    (vals, vecs)
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[[i, j]]);
    let chol = nalgebra::Cholesky::new(m)
        .ok_or_else(|| Error::InvalidArgument("matrix is not positive definite".into()))?;
    let rhs = nalgebra::DVector::from_iterator(n, b.iter().copied());
    let sol = chol.solve(&rhs);
    Ok(Array1::from_iter(sol.iter().copied()))
}

pub fn mean(x: ArrayView1<f64>) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.sum() / x.len() as f64
}

/// Population variance (divisor n).
pub fn variance(x: ArrayView1<f64>) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len().max(1) as f64
}

pub fn covariance(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    assert_eq!(x.len(), y.len());
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len().max(1) as f64
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Option<f64> {
    let (vx, vy) = (variance(x), variance(y));
    if vx <= 0.0 || vy <= 0.0 {
        return None;
    }
    Some((covariance(x, y) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation with the zero-variance convention (returns 0).
pub fn cor_or_zero(x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    pearson(x, y).unwrap_or(0.0)
}

/// Column means of a matrix.
pub fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(x.ncols()))
}

/// Subtracts column means in place and returns them.
pub fn center_columns(x: &mut Array2<f64>) -> Array1<f64> {
    let means = column_means(x.view());
    for mut row in x.outer_iter_mut() {
        row -= &means;
    }
    means
}

/// Pooled correlation matrix between the columns of `a` and `b`
/// (zero-variance columns give zero correlations).
pub fn cross_correlation(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    assert_eq!(a.nrows(), b.nrows());
    let mut ac = a.to_owned();
    let mut bc = b.to_owned();
    center_columns(&mut ac);
    center_columns(&mut bc);
    let sa = ac.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let sb = bc.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let mut cc = ac.t().dot(&bc);
    for ((i, j), v) in cc.indexed_iter_mut() {
        let d = sa[i] * sb[j];
        *v = if d > 0.0 { (*v / d).clamp(-1.0, 1.0) } else { 0.0 };
    }
    cc
}
