//! Source recovery: per-subject nuisance regression and standardization,
//! pooling across subjects, spatial smoothing, PCA whitening, symmetric
//! FastICA with a log-cosh contrast, and heuristic component filtering.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdjacencyGraph, GaussianKernel, SmoothingOperator, VoxelGrid};
use crate::linalg::{center_columns, solve_spd, sym_eigh};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    /// Polynomial drift order; 2 gives intercept, linear and quadratic trends.
    pub trend_order: usize,
    pub zscore: bool,
    pub smoothing_fwhm_mm: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            trend_order: 2,
            zscore: true,
            smoothing_fwhm_mm: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessedSubject {
    pub data: Array2<f64>,
    /// Voxels that were constant after nuisance regression (left as zeros).
    pub degenerate: Vec<bool>,
}

/// Intercept plus polynomial trends on `[-1, 1]`, followed by any extra columns.
pub fn nuisance_design(t_len: usize, trend_order: usize, extra: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    let extra_cols = extra.map_or(0, |e| e.ncols());
    if let Some(e) = extra {
        if e.nrows() != t_len {
            return Err(Error::DimensionMismatch(format!(
                "nuisance regressors have {} rows, series has {t_len}",
                e.nrows()
            )));
        }
    }
    let r = 1 + trend_order + extra_cols;
    let mut design = Array2::zeros((t_len, r));
    for t in 0..t_len {
        let tau = if t_len > 1 { -1.0 + 2.0 * t as f64 / (t_len - 1) as f64 } else { 0.0 };
        for k in 0..=trend_order {
            design[[t, k]] = tau.powi(k as i32);
        }
    }
    if let Some(e) = extra {
        design.slice_mut(s![.., 1 + trend_order..]).assign(&e);
    }
    Ok(design)
}

/// Orthonormal basis of the column space (modified Gram–Schmidt, two passes).
fn orthonormal_basis(design: ArrayView2<f64>) -> Vec<Array1<f64>> {
    let mut basis: Vec<Array1<f64>> = Vec::new();
    for col in design.axis_iter(Axis(1)) {
        let norm0 = col.dot(&col).sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col.to_owned();
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.scaled_add(-c, q);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-10 * norm0 {
            basis.push(v / norm);
        }
    }
    basis
}

pub fn preprocess_subject(
    x: ArrayView2<f64>,
    config: &PreprocessConfig,
    extra_regressors: Option<ArrayView2<f64>>,
) -> Result<PreprocessedSubject> {
    let (t_len, p) = x.dim();
    let r = 1 + config.trend_order + extra_regressors.map_or(0, |e| e.ncols());
    if t_len <= r {
        return Err(Error::TooFewTimePoints { t: t_len, r });
    }
    let design = nuisance_design(t_len, config.trend_order, extra_regressors)?;
    let basis = orthonormal_basis(design.view());
    let mut data = x.to_owned();
    for q in &basis {
        let coefs = q.dot(&data);
        for (mut row, &qt) in data.outer_iter_mut().zip(q.iter()) {
            row.scaled_add(-qt, &coefs);
        }
    }
    let mut degenerate = vec![false; p];
    for (j, mut col) in data.axis_iter_mut(Axis(1)).enumerate() {
        let orig = x.column(j);
        let orig_rms = (orig.dot(&orig) / t_len as f64).sqrt();
        let m = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - m);
        let sd = (col.dot(&col) / t_len as f64).sqrt();
        if sd <= 1e-10 * orig_rms || sd == 0.0 {
            col.fill(0.0);
            degenerate[j] = true;
        } else if config.zscore {
            col /= sd;
        }
    }
    Ok(PreprocessedSubject { data, degenerate })
}

/// Row-concatenated subject data before and after smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledData {
    pub raw: Array2<f64>,
    pub smoothed: Array2<f64>,
    pub spans: Vec<Range<usize>>,
    /// Renormalized kernel center weight per voxel.
    pub center_weights: Array1<f64>,
}

pub fn pool_and_smooth(subjects: &[ArrayView2<f64>], grid: &VoxelGrid, kernel: &GaussianKernel) -> Result<PooledData> {
    let p = grid.p();
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects to pool".into()));
    }
    for (i, m) in subjects.iter().enumerate() {
        if m.ncols() != p {
            return Err(Error::DimensionMismatch(format!(
                "subject {i} has {} voxels, grid has {p}",
                m.ncols()
            )));
        }
    }
    let total: usize = subjects.iter().map(|m| m.nrows()).sum();
    let mut raw = Array2::zeros((total, p));
    let mut spans = Vec::with_capacity(subjects.len());
    let mut start = 0;
    for m in subjects {
        raw.slice_mut(s![start..start + m.nrows(), ..]).assign(m);
        spans.push(start..start + m.nrows());
        start += m.nrows();
    }
    let op = SmoothingOperator::new(grid, kernel);
    let blocks: Vec<Array2<f64>> = subjects.par_iter().map(|m| op.apply_rows(*m)).collect();
    let mut smoothed = Array2::zeros((total, p));
    for (block, span) in blocks.iter().zip(&spans) {
        smoothed.slice_mut(s![span.clone(), ..]).assign(block);
    }
    Ok(PooledData {
        raw,
        smoothed,
        spans,
        center_weights: op.center_weights.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IcaOptions {
    fn default() -> Self {
        IcaOptions { tol: 1e-6, max_iter: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub final_delta: f64,
    pub converged: bool,
    pub warning: Option<String>,
}

/// PCA reduction retained from the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Whitening {
    /// `K × p`, rows `e_k / √λ_k`.
    pub matrix: Array2<f64>,
    pub eigenvalues: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDecomposition {
    /// `(ΣT) × K` standardized source time courses.
    pub f_hat: Array2<f64>,
    /// `K × p` least-squares maps from sources to pooled data.
    pub m_hat: Array2<f64>,
    /// `K × p` unmixing applied to centered pooled data.
    pub unmixing: Array2<f64>,
    pub mean: Array1<f64>,
    pub whitening: Whitening,
    pub kept: Vec<bool>,
    pub spans: Vec<Range<usize>>,
    pub convergence: Convergence,
}

impl SourceDecomposition {
    pub fn k(&self) -> usize {
        self.f_hat.ncols()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| self.kept[j]).collect()
    }

    /// Source time courses for new data in the pooled voxel space.
    pub fn transform(&self, data: ArrayView2<f64>) -> Array2<f64> {
        let mut centered = data.to_owned();
        for mut row in centered.outer_iter_mut() {
            row -= &self.mean;
        }
        centered.dot(&self.unmixing.t())
    }

    /// `F_hat · M_hat` plus the pooled mean.
    pub fn reconstruction(&self) -> Array2<f64> {
        let mut r = self.f_hat.dot(&self.m_hat);
        for mut row in r.outer_iter_mut() {
            row += &self.mean;
        }
        r
    }

    /// Reorders (and optionally flips) components; used to check that
    /// labelling does not change the reconstruction.
    pub fn relabel(&self, order: &[usize], flips: &[bool]) -> SourceDecomposition {
        let mut out = self.clone();
        for (dst, &src) in order.iter().enumerate() {
            let sign = if flips[dst] { -1.0 } else { 1.0 };
            out.f_hat.column_mut(dst).assign(&(sign * &self.f_hat.column(src)));
            out.m_hat.row_mut(dst).assign(&(sign * &self.m_hat.row(src)));
            out.unmixing.row_mut(dst).assign(&(sign * &self.unmixing.row(src)));
            out.kept[dst] = self.kept[src];
        }
        out
    }
}

/// Inverse square root of a symmetric positive definite matrix.
fn inv_sqrt_sym(a: ArrayView2<f64>) -> Array2<f64> {
    let (vals, vecs) = sym_eigh(a);
    let scaled = Array2::from_shape_fn(vecs.dim(), |(i, j)| vecs[[i, j]] / vals[j].max(1e-300).sqrt());
    scaled.dot(&vecs.t())
}

fn symmetric_decorrelation(w: &Array2<f64>) -> Array2<f64> {
    inv_sqrt_sym(w.dot(&w.t()).view()).dot(w)
}

fn pca_whitening(centered: ArrayView2<f64>, k: usize) -> Result<Whitening> {
    let (n, p) = centered.dim();
    let nf = n as f64;
    let (vals, vecs): (Array1<f64>, Array2<f64>) = if p <= n {
        let cov = centered.t().dot(&centered) / nf;
        let (vals, vecs) = sym_eigh(cov.view());
        (vals.slice(s![..k]).to_owned(), vecs.slice(s![.., ..k]).to_owned())
    } else {
        let gram = centered.dot(&centered.t()) / nf;
        let (vals, u) = sym_eigh(gram.view());
        let mut vecs = Array2::zeros((p, k));
        for j in 0..k {
            let e = centered.t().dot(&u.column(j)) / (nf * vals[j].max(1e-300)).sqrt();
            vecs.column_mut(j).assign(&e);
        }
        (vals.slice(s![..k]).to_owned(), vecs)
    };
    let top = vals[0].max(0.0);
    if let Some(j) = vals.iter().position(|&v| !(v > 1e-12 * top) || top == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "pooled data has rank {j}, below the requested {k} components"
        )));
    }
    let mut matrix = vecs.t().to_owned();
    for (mut row, &v) in matrix.outer_iter_mut().zip(vals.iter()) {
        row /= v.sqrt();
    }
    Ok(Whitening { matrix, eigenvalues: vals })
}

/// PCA to `k_target` components followed by symmetric FastICA.
pub fn fit_ica(pooled: ArrayView2<f64>, spans: &[Range<usize>], k_target: usize, seed: u64, opts: &IcaOptions) -> Result<SourceDecomposition> {
    let (n, p) = pooled.dim();
    if k_target == 0 || k_target > p {
        return Err(Error::InvalidArgument(format!("K_target = {k_target} must lie in 1..={p}")));
    }
    if n <= k_target {
        return Err(Error::InvalidArgument(format!(
            "pooled length {n} must exceed K_target = {k_target}"
        )));
    }
    let mut centered = pooled.to_owned();
    let mean = center_columns(&mut centered);
    let whitening = pca_whitening(centered.view(), k_target)?;
    let z = centered.dot(&whitening.matrix.t());
    let nf = n as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let w0 = Array2::from_shape_fn((k_target, k_target), |_| normal.sample(&mut rng));
    let mut w = symmetric_decorrelation(&w0);
    let mut best = (w.clone(), f64::INFINITY);
    let mut iterations = 0;
    let mut delta = f64::INFINITY;
    let mut converged = false;
    for it in 1..=opts.max_iter {
        iterations = it;
        let y = z.dot(&w.t());
        let g = y.mapv(f64::tanh);
        let g_prime_mean = g.mapv(|v| 1.0 - v * v).mean_axis(Axis(0)).expect("n > 0");
        let mut w_new = g.t().dot(&z) / nf;
        for (mut row, (&gp, w_row)) in w_new.outer_iter_mut().zip(g_prime_mean.iter().zip(w.outer_iter())) {
            row.scaled_add(-gp, &w_row);
        }
        let w_new = symmetric_decorrelation(&w_new);
        delta = w_new
            .outer_iter()
            .zip(w.outer_iter())
            .map(|(a, b)| (1.0 - a.dot(&b).abs()).abs())
            .fold(0.0, f64::max);
        w = w_new;
        if delta < best.1 {
            best = (w.clone(), delta);
        }
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let warning = if converged {
        None
    } else {
        w = best.0.clone();
        let msg = format!(
            "FastICA did not converge in {} iterations (best change {:.3e}, tolerance {:.1e})",
            opts.max_iter, best.1, opts.tol
        );
        log::warn!("{msg}");
        delta = best.1;
        Some(msg)
    };

    let mut unmixing = w.dot(&whitening.matrix);
    let mut f_hat = centered.dot(&unmixing.t());
    for (mut col, mut urow) in f_hat.axis_iter_mut(Axis(1)).zip(unmixing.outer_iter_mut()) {
        let m = col.mean().unwrap_or(0.0);
        col.mapv_inplace(|v| v - m);
        let sd = (col.dot(&col) / nf).sqrt();
        col /= sd;
        urow /= sd;
    }
    let ftf = f_hat.t().dot(&f_hat);
    let ftx = f_hat.t().dot(&centered);
    let mut m_hat = Array2::zeros((k_target, p));
    for v in 0..p {
        m_hat.column_mut(v).assign(&solve_spd(ftf.view(), ftx.column(v))?);
    }
    for k in 0..k_target {
        let row = m_hat.row(k);
        let peak = row
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |acc, (i, &v)| if v.abs() > acc.1.abs() { (i, v) } else { acc });
        if peak.1 < 0.0 {
            m_hat.row_mut(k).mapv_inplace(|v| -v);
            f_hat.column_mut(k).mapv_inplace(|v| -v);
            unmixing.row_mut(k).mapv_inplace(|v| -v);
        }
    }
    let energy: Vec<f64> = m_hat.outer_iter().map(|r| r.dot(&r)).collect();
    let mut order: Vec<usize> = (0..k_target).collect();
    order.sort_by(|&a, &b| energy[b].total_cmp(&energy[a]).then(a.cmp(&b)));

    let decomp = SourceDecomposition {
        f_hat,
        m_hat,
        unmixing,
        mean,
        whitening,
        kept: vec![true; k_target],
        spans: spans.to_vec(),
        convergence: Convergence {
            iterations,
            final_delta: delta,
            converged,
            warning,
        },
    };
    Ok(decomp.relabel(&order, &vec![false; k_target]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterOptions {
    /// Maps with excess kurtosis below this are treated as diffuse noise.
    pub min_kurtosis: f64,
    /// Maps with more of their energy on the mask boundary shell are noise.
    pub max_boundary_fraction: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            min_kurtosis: 2.0,
            max_boundary_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    pub kurtosis: f64,
    pub boundary_fraction: f64,
    pub kept: bool,
}

/// Excess kurtosis of map values; `None` for a constant map.
pub fn excess_kurtosis(map: ArrayView1<f64>) -> Option<f64> {
    let n = map.len() as f64;
    let m = map.sum() / n;
    let m2 = map.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return None;
    }
    let m4 = map.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    Some(m4 / (m2 * m2) - 3.0)
}

/// Flags noise-like components by map kurtosis and boundary-shell energy.
pub fn filter_components(
    mut decomp: SourceDecomposition,
    grid: &VoxelGrid,
    opts: &FilterOptions,
) -> (SourceDecomposition, Vec<ComponentDiagnostics>) {
    let graph = AdjacencyGraph::build(grid);
    let shell: Vec<bool> = (0..grid.p()).map(|v| graph.degree(v) < 6).collect();
    let mut diags = Vec::with_capacity(decomp.k());
    for k in 0..decomp.k() {
        let row = decomp.m_hat.row(k);
        let energy: f64 = row.dot(&row);
        let kurt = excess_kurtosis(row);
        let boundary = if energy > 0.0 {
            row.iter().zip(&shell).filter(|(_, &s)| s).map(|(v, _)| v * v).sum::<f64>() / energy
        } else {
            1.0
        };
        let kept = energy > 0.0
            && kurt.is_some_and(|k| k >= opts.min_kurtosis)
            && boundary <= opts.max_boundary_fraction;
        decomp.kept[k] = kept;
        diags.push(ComponentDiagnostics {
            kurtosis: kurt.unwrap_or(f64::NAN),
            boundary_fraction: boundary,
            kept,
        });
    }
    (decomp, diags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cross_correlation;
    use rand::Rng;

    fn laplace(rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random::<f64>() - 0.5;
        -u.signum() * (1.0 - 2.0 * u.abs()).ln() / 2f64.sqrt()
    }

    #[test]
    fn constant_and_trend_columns_become_zero() {
        let t = 30;
        let mut x = Array2::zeros((t, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..t {
            x[[i, 0]] = 4.2;
            x[[i, 1]] = 1.5 + 0.3 * i as f64;
            x[[i, 2]] = rng.random::<f64>();
        }
        let out = preprocess_subject(x.view(), &PreprocessConfig::default(), None).unwrap();
        assert_eq!(out.degenerate, vec![true, true, false]);
        assert!(out.data.column(0).iter().all(|&v| v == 0.0));
        assert!(out.data.column(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn columns_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((50, 10), |_| rng.random::<f64>() * 3.0 - 1.0);
        let out = preprocess_subject(x.view(), &PreprocessConfig::default(), None).unwrap();
        for col in out.data.axis_iter(Axis(1)) {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(m.abs() < 1e-12);
            assert!((sd - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nuisance_columns_are_projected_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let extra = Array2::from_shape_fn((40, 2), |_| rng.random::<f64>());
        let x = Array2::from_shape_fn((40, 4), |_| rng.random::<f64>());
        let cfg = PreprocessConfig {
            zscore: false,
            ..Default::default()
        };
        let out = preprocess_subject(x.view(), &cfg, Some(extra.view())).unwrap();
        let design = nuisance_design(40, 2, Some(extra.view())).unwrap();
        let proj = design.t().dot(&out.data);
        assert!(proj.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn too_few_time_points() {
        let x = Array2::zeros((3, 2));
        let err = preprocess_subject(x.view(), &PreprocessConfig::default(), None).unwrap_err();
        assert!(err.to_string().starts_with("too few time points"));
    }

    #[test]
    fn pooling_shapes_and_delta_kernel() {
        let g = VoxelGrid::full([2, 2, 2], 3.0).unwrap();
        let a = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64);
        let b = Array2::from_shape_fn((3, 8), |(i, j)| -((i * 8 + j) as f64));
        let pooled = pool_and_smooth(&[a.view(), b.view()], &g, &GaussianKernel::delta()).unwrap();
        assert_eq!(pooled.smoothed.dim(), (6, 8));
        assert_eq!(pooled.spans, vec![0..3, 3..6]);
        assert_eq!(pooled.smoothed, pooled.raw);
        assert_eq!(pooled.raw.slice(s![3..6, ..]), b);
        let bad = Array2::zeros((2, 7));
        assert!(pool_and_smooth(&[a.view(), bad.view()], &g, &GaussianKernel::delta()).is_err());
    }

    #[test]
    fn one_hot_rows_give_stencils() {
        let g = VoxelGrid::full([5, 5, 5], 3.0).unwrap();
        let k = crate::grid::gaussian_kernel(6.0, 3.0, 1).unwrap();
        let c = g.flat_at([2, 2, 2]).unwrap();
        let mut x = Array2::zeros((2, g.p()));
        x[[0, c]] = 1.0;
        x[[1, c]] = 1.0;
        let pooled = pool_and_smooth(&[x.view()], &g, &k).unwrap();
        for row in pooled.smoothed.outer_iter() {
            for &(off, w) in &k.weights {
                assert!((row[g.offset(c, off).unwrap()] - w).abs() < 1e-15);
            }
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    /// Amari index of `P = M_hat · M⁺`.
    fn amari_index(m_hat: &Array2<f64>, m: &Array2<f64>) -> f64 {
        let mmt = m.dot(&m.t());
        let k = m.nrows();
        let mut inv = Array2::zeros((k, k));
        for j in 0..k {
            let mut e = Array1::zeros(k);
            e[j] = 1.0;
            inv.column_mut(j).assign(&solve_spd(mmt.view(), e.view()).unwrap());
        }
        let pm = m_hat.dot(&m.t()).dot(&inv).mapv(f64::abs);
        let mut total = 0.0;
        for i in 0..k {
            let row = pm.row(i);
            let mx = row.iter().cloned().fold(0.0, f64::max);
            total += row.sum() / mx - 1.0;
        }
        for j in 0..k {
            let col = pm.column(j);
            let mx = col.iter().cloned().fold(0.0, f64::max);
            total += col.sum() / mx - 1.0;
        }
        total / (2.0 * k as f64 * (k as f64 - 1.0))
    }

    #[test]
    fn two_laplace_sources_are_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 4000;
        let f = Array2::from_shape_fn((n, 2), |_| laplace(&mut rng));
        let m = ndarray::array![[1.0, 1.0, 0.0, 0.5, 0.0], [0.0, 0.0, 1.0, 0.0, 2.0]];
        let x = f.dot(&m);
        let d = fit_ica(x.view(), &[0..n], 2, 7, &IcaOptions::default()).unwrap();
        assert!(d.convergence.converged);
        let amari = amari_index(&d.m_hat, &m);
        assert!(amari < 0.05, "amari {amari}");
    }

    #[test]
    fn single_source_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1000;
        let f = Array1::from_iter((0..n).map(|_| laplace(&mut rng)));
        let map = ndarray::array![0.5, -1.0, 2.0];
        let x = Array2::from_shape_fn((n, 3), |(t, v)| f[t] * map[v]);
        let d = fit_ica(x.view(), &[0..n], 1, 1, &IcaOptions::default()).unwrap();
        let c = crate::linalg::cor_or_zero(d.f_hat.column(0), f.view());
        assert!(c.abs() > 0.999);
        // Sign convention: the peak entry of the map is positive.
        assert!(d.m_hat[[0, 2]] > 0.0);
    }

    #[test]
    fn gaussian_data_reports_non_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let x = Array2::from_shape_fn((3000, 6), |_| normal.sample(&mut rng));
        let opts = IcaOptions { tol: 1e-6, max_iter: 200 };
        let d = fit_ica(x.view(), &[0..3000], 4, 3, &opts).unwrap();
        assert!(!d.convergence.converged);
        assert!(d.convergence.warning.as_deref().unwrap().contains("did not converge"));
    }

    #[test]
    fn outputs_are_white_and_reconstruct_invariantly() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1500;
        let f = Array2::from_shape_fn((n, 3), |_| laplace(&mut rng));
        let m = Array2::from_shape_fn((3, 12), |_| rng.random::<f64>() - 0.5);
        let noise = Array2::from_shape_fn((n, 12), |_| 0.05 * laplace(&mut rng));
        let x = f.dot(&m) + noise;
        let d = fit_ica(x.view(), &[0..n], 3, 2, &IcaOptions::default()).unwrap();
        let mut centered = x.clone();
        center_columns(&mut centered);
        let z = centered.dot(&d.whitening.matrix.t());
        let cov = z.t().dot(&z) / n as f64;
        for ((i, j), v) in cov.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((v - target).abs() < 1e-8);
        }
        let cc = cross_correlation(d.f_hat.view(), d.f_hat.view());
        for ((i, j), v) in cc.indexed_iter() {
            if i != j {
                assert!(v.abs() < 1e-6);
            }
        }
        for col in d.f_hat.axis_iter(Axis(1)) {
            let mean = col.mean().unwrap();
            assert!(mean.abs() < 1e-10);
            assert!((col.dot(&col) / n as f64 - 1.0).abs() < 1e-10);
        }
        let relabeled = d.relabel(&[2, 0, 1], &[true, false, true]);
        let a = d.reconstruction();
        let b = relabeled.reconstruction();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-10));
        let tf = d.transform(x.view());
        assert!(tf.iter().zip(d.f_hat.iter()).all(|(x, y)| (x - y).abs() < 1e-9));
    }

    fn filter_one(map: Array1<f64>, grid: &VoxelGrid) -> bool {
        let p = map.len();
        let decomp = SourceDecomposition {
            f_hat: Array2::zeros((4, 1)),
            m_hat: map.insert_axis(Axis(0)),
            unmixing: Array2::zeros((1, p)),
            mean: Array1::zeros(p),
            whitening: Whitening {
                matrix: Array2::zeros((1, p)),
                eigenvalues: Array1::ones(1),
            },
            kept: vec![true],
            spans: vec![0..4],
            convergence: Convergence {
                iterations: 1,
                final_delta: 0.0,
                converged: true,
                warning: None,
            },
        };
        filter_components(decomp, grid, &FilterOptions::default()).0.kept[0]
    }

    #[test]
    fn blob_maps_are_kept() {
        let g = VoxelGrid::full([10, 10, 10], 3.0).unwrap();
        let centre = g.flat_at([5, 5, 5]).unwrap();
        let mut map = Array1::zeros(g.p());
        map[centre] = 1.0;
        for v in g.face_neighbors(centre).collect::<Vec<_>>() {
            map[v] = 0.5;
        }
        // Oracle: 7 nonzeros among 1000 gives a very large excess kurtosis.
        assert!(excess_kurtosis(map.view()).unwrap() > 50.0);
        assert!(filter_one(map, &g));
    }

    #[test]
    fn gaussian_maps_are_flagged() {
        let g = VoxelGrid::full([10, 10, 10], 3.0).unwrap();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let flagged = (0..200)
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let map = Array1::from_iter((0..g.p()).map(|_| normal.sample(&mut rng)));
                !filter_one(map, &g)
            })
            .count();
        assert!(flagged as f64 / 200.0 > 0.95);
        assert!(!filter_one(Array1::zeros(g.p()), &g));
    }

    #[test]
    fn boundary_maps_are_flagged() {
        let g = VoxelGrid::full([10, 10, 10], 3.0).unwrap();
        let mut map = Array1::zeros(g.p());
        map[g.flat_at([0, 5, 5]).unwrap()] = 1.0;
        map[g.flat_at([0, 5, 6]).unwrap()] = 1.0;
        assert!(!filter_one(map, &g));
    }
}
