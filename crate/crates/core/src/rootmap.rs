//! Root-proximity maps: center-excluded neighbourhood regressors, the η/θ
//! correlation maps, TV + ℓ1 regularized ζ estimation by IRLS, and the
//! (λ1, λ2) selection by the roughness/diffuseness score ρ.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AdjacencyGraph, GaussianKernel, NormalizedLaplacian, SmoothingOperator, VoxelGrid};
use crate::linalg::{cor_or_zero, pcg, BandCholesky};

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [1.0, 0.1, 0.01, 0.001];

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodSeries {
    /// Smoothed series `X̃`, `T × p`.
    pub smoothed: Array2<f64>,
    /// Center-excluded neighbourhood series `N`, `T × p`.
    pub neighborhood: Array2<f64>,
    /// Per-voxel renormalized center weight.
    pub w0: Array1<f64>,
}

/// `N_i = (X̃_i − w0_i X_i) / (1 − w0_i)` for already smoothed data.
pub fn neighborhood_from_smoothed(
    raw: ArrayView2<f64>,
    smoothed: Array2<f64>,
    w0: Array1<f64>,
) -> Result<NeighborhoodSeries> {
    if raw.dim() != smoothed.dim() || raw.ncols() != w0.len() {
        return Err(Error::DimensionMismatch("raw, smoothed and w0 shapes disagree".into()));
    }
    if let Some((voxel, &w)) = w0.iter().enumerate().find(|(_, &w)| w >= 1.0 - 1e-12) {
        return Err(Error::KernelDegenerate { voxel, w0: w });
    }
    let mut neighborhood = smoothed.clone();
    for (mut n_row, x_row) in neighborhood.outer_iter_mut().zip(raw.outer_iter()) {
        for ((n, &x), &w) in n_row.iter_mut().zip(x_row.iter()).zip(w0.iter()) {
            *n = (*n - w * x) / (1.0 - w);
        }
    }
    Ok(NeighborhoodSeries {
        smoothed,
        neighborhood,
        w0,
    })
}

pub fn neighborhood_series(x: ArrayView2<f64>, grid: &VoxelGrid, kernel: &GaussianKernel) -> Result<NeighborhoodSeries> {
    if x.ncols() != grid.p() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} voxels, grid has {}",
            x.ncols(),
            grid.p()
        )));
    }
    let op = SmoothingOperator::new(grid, kernel);
    let smoothed = op.apply_rows(x);
    neighborhood_from_smoothed(x, smoothed, op.center_weights.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residualization {
    #[default]
    Pooled,
    PerSubject,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMaps {
    pub eta: Array2<f64>,
    pub theta: Array2<f64>,
    pub target: Array2<f64>,
}

/// Residual of `y` after regression on `(1, n)` within each span.
fn residualize(y: ArrayView1<f64>, n: ArrayView1<f64>, spans: &[Range<usize>]) -> Array1<f64> {
    let mut out = Array1::zeros(y.len());
    for span in spans {
        let ys = y.slice(ndarray::s![span.clone()]);
        let ns = n.slice(ndarray::s![span.clone()]);
        let len = span.len() as f64;
        let ym = ys.sum() / len;
        let nm = ns.sum() / len;
        let mut snn = 0.0;
        let mut sny = 0.0;
        for (&a, &b) in ns.iter().zip(ys.iter()) {
            snn += (a - nm) * (a - nm);
            sny += (a - nm) * (b - ym);
        }
        let slope = if snn > 0.0 { sny / snn } else { 0.0 };
        for (t, (&a, &b)) in span.clone().zip(ns.iter().zip(ys.iter())) {
            out[t] = b - ym - slope * (a - nm);
        }
    }
    out
}

/// Correlation that treats residuals at round-off level as zero vectors.
fn residual_correlation(a: &Array1<f64>, a_scale: f64, b: &Array1<f64>, b_scale: f64) -> f64 {
    let ra = a.dot(a).sqrt();
    let rb = b.dot(b).sqrt();
    if ra <= 1e-10 * a_scale || rb <= 1e-10 * b_scale {
        return 0.0;
    }
    cor_or_zero(a.view(), b.view())
}

fn centered_norm(x: ArrayView1<f64>) -> f64 {
    let m = x.mean().unwrap_or(0.0);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>().sqrt()
}

/// η, θ and η⊙θ from pooled sources and neighbourhood series.
pub fn correlation_maps_from_series(
    f_hat: ArrayView2<f64>,
    series: &NeighborhoodSeries,
    spans: &[Range<usize>],
    mode: Residualization,
) -> Result<CorrelationMaps> {
    let (len, p) = series.smoothed.dim();
    if len < 3 {
        return Err(Error::InvalidArgument(format!("pooled length {len} is below 3")));
    }
    if f_hat.nrows() != len {
        return Err(Error::DimensionMismatch(format!(
            "sources have {} rows, data has {len}",
            f_hat.nrows()
        )));
    }
    let pooled_span = [0..len];
    let spans: &[Range<usize>] = match mode {
        Residualization::Pooled => &pooled_span,
        Residualization::PerSubject => spans,
    };
    let k = f_hat.ncols();
    let f_scale: Vec<f64> = f_hat.axis_iter(Axis(1)).map(centered_norm).collect();
    let columns: Vec<(Vec<f64>, Vec<f64>)> = (0..p)
        .into_par_iter()
        .map(|i| {
            let xs = series.smoothed.column(i);
            let ns = series.neighborhood.column(i);
            let x_scale = centered_norm(xs);
            let rx = residualize(xs, ns, spans);
            let mut eta = Vec::with_capacity(k);
            let mut theta = Vec::with_capacity(k);
            for j in 0..k {
                let f = f_hat.column(j);
                eta.push(cor_or_zero(f, xs));
                let rf = residualize(f, ns, spans);
                theta.push(residual_correlation(&rf, f_scale[j], &rx, x_scale));
            }
            (eta, theta)
        })
        .collect();
    let mut eta = Array2::zeros((k, p));
    let mut theta = Array2::zeros((k, p));
    for (i, (e, t)) in columns.into_iter().enumerate() {
        for j in 0..k {
            eta[[j, i]] = e[j];
            theta[[j, i]] = t[j];
        }
    }
    let target = &eta * &theta;
    Ok(CorrelationMaps { eta, theta, target })
}

pub fn correlation_maps(
    f_hat: ArrayView2<f64>,
    subjects: &[ArrayView2<f64>],
    grid: &VoxelGrid,
    kernel: &GaussianKernel,
    mode: Residualization,
) -> Result<CorrelationMaps> {
    if subjects.is_empty() {
        return Err(Error::InvalidArgument("no subjects".into()));
    }
    let total: usize = subjects.iter().map(|s| s.nrows()).sum();
    let mut pooled = Array2::zeros((total, grid.p()));
    let mut spans = Vec::with_capacity(subjects.len());
    let mut start = 0;
    for s in subjects {
        if s.ncols() != grid.p() {
            return Err(Error::DimensionMismatch(format!(
                "subject has {} voxels, grid has {}",
                s.ncols(),
                grid.p()
            )));
        }
        pooled.slice_mut(ndarray::s![start..start + s.nrows(), ..]).assign(s);
        spans.push(start..start + s.nrows());
        start += s.nrows();
    }
    let series = neighborhood_series(pooled.view(), grid, kernel)?;
    correlation_maps_from_series(f_hat, &series, &spans, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZetaOptions {
    pub eps_start: f64,
    pub eps_floor: f64,
    pub cg_tol: f64,
    pub max_sweeps: usize,
    /// Stop once the largest coordinate change falls below this times `‖target‖∞`.
    pub tol: f64,
    pub zero_threshold: f64,
}

impl Default for ZetaOptions {
    fn default() -> Self {
        ZetaOptions {
            eps_start: 1e-6,
            eps_floor: 1e-10,
            cg_tol: 1e-8,
            max_sweeps: 200,
            tol: 1e-7,
            zero_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZetaFit {
    pub zeta: Array1<f64>,
    /// True objective after initialization, after every sweep and after the exit threshold.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub cg_iterations: usize,
    /// Sweeps where CG stalled and the banded direct solve was used.
    pub direct_solves: usize,
}

/// `‖t − ζ‖² + λ1 Σ_edges |ζ_u − ζ_v| + λ2 ‖ζ‖₁`.
pub fn zeta_objective(target: ArrayView1<f64>, zeta: ArrayView1<f64>, graph: &AdjacencyGraph, lambda1: f64, lambda2: f64) -> f64 {
    let fit: f64 = target.iter().zip(zeta.iter()).map(|(t, z)| (t - z) * (t - z)).sum();
    let tv: f64 = if lambda1 > 0.0 {
        graph.edges.iter().map(|&(u, v)| (zeta[u] - zeta[v]).abs()).sum()
    } else {
        0.0
    };
    let l1: f64 = if lambda2 > 0.0 { zeta.iter().map(|z| z.abs()).sum() } else { 0.0 };
    fit + lambda1 * tv + lambda2 * l1
}

/// Change in the objective from setting coordinate `u` to zero.
fn zeroing_delta(target: ArrayView1<f64>, zeta: &Array1<f64>, graph: &AdjacencyGraph, lambda1: f64, lambda2: f64, u: usize) -> f64 {
    let z = zeta[u];
    let t = target[u];
    let mut delta = t * t - (t - z) * (t - z) - lambda2 * z.abs();
    for &v in &graph.neighbors[u] {
        delta += lambda1 * (zeta[v].abs() - (z - zeta[v]).abs());
    }
    delta
}

/// Sparse TV + ℓ1 map by iteratively reweighted least squares.
pub fn fit_zeta(
    target: ArrayView1<f64>,
    graph: &AdjacencyGraph,
    lambda1: f64,
    lambda2: f64,
    opts: &ZetaOptions,
) -> Result<ZetaFit> {
    let p = target.len();
    if graph.p() != p {
        return Err(Error::DimensionMismatch(format!("target has {p} entries, graph has {}", graph.p())));
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::InvalidArgument("penalties must be nonnegative".into()));
    }
    let objective = |z: ArrayView1<f64>| zeta_objective(target, z, graph, lambda1, lambda2);
    if lambda1 == 0.0 && lambda2 == 0.0 {
        return Ok(ZetaFit {
            zeta: target.to_owned(),
            trace: vec![0.0],
            sweeps: 0,
            cg_iterations: 0,
            direct_solves: 0,
        });
    }
    let t_inf = target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut zeta = target.to_owned();
    let mut current = objective(zeta.view());
    let mut trace = vec![current];
    let mut eps = opts.eps_start;
    let mut sweeps = 0;
    let mut cg_iterations = 0;
    let mut direct_solves = 0;
    let mut edge_w = vec![0.0; graph.edges.len()];
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        for (w, &(u, v)) in edge_w.iter_mut().zip(&graph.edges) {
            let d = zeta[u] - zeta[v];
            *w = lambda1 / (2.0 * (d * d + eps * eps).sqrt());
        }
        let mut diag = Array1::from_elem(p, 1.0);
        for (i, z) in zeta.iter().enumerate() {
            diag[i] += lambda2 / (2.0 * (z * z + eps * eps).sqrt());
        }
        if lambda1 > 0.0 {
            for (w, &(u, v)) in edge_w.iter().zip(&graph.edges) {
                diag[u] += w;
                diag[v] += w;
            }
        }
        // Symmetric Jacobi scaling keeps the residual check meaningful when
        // the reweighting makes the diagonal span many orders of magnitude.
        let scale = diag.mapv(|d| 1.0 / d.sqrt());
        let apply = |y: ArrayView1<f64>| -> Array1<f64> {
            let x = &y * &scale;
            let mut out = &x * &diag;
            for (w, &(u, v)) in edge_w.iter().zip(&graph.edges) {
                out[u] -= w * x[v];
                out[v] -= w * x[u];
            }
            out *= &scale;
            out
        };
        let b = &target * &scale;
        let mut y = &zeta / &scale;
        let outcome = pcg(apply, Array1::ones(p).view(), b.view(), &mut y, opts.cg_tol, 10 * p.max(1));
        cg_iterations += outcome.iterations;
        if !outcome.converged {
            // Near-fused groups make the system very ill conditioned late in
            // the ε schedule; a banded Cholesky solve is stable there.
            let lower: Vec<(usize, usize, f64)> = edge_w
                .iter()
                .zip(&graph.edges)
                .map(|(w, &(u, v))| (u.max(v), u.min(v), -w * scale[u] * scale[v]))
                .collect();
            match BandCholesky::factor(Array1::ones(p).view(), &lower) {
                Some(chol) => {
                    y = chol.solve(b.view());
                    direct_solves += 1;
                }
                None => {
                    return Err(Error::CgNotConverged {
                        iterations: outcome.iterations,
                        residual: outcome.relative_residual,
                        trace,
                    })
                }
            }
        }
        let candidate = &y * &scale;
        let step = &candidate - &zeta;
        let mut accepted = None;
        let mut s = 1.0;
        for _ in 0..30 {
            let trial = &zeta + &(s * &step);
            let f = objective(trial.view());
            if f <= current {
                accepted = Some((trial, f));
                break;
            }
            s *= 0.5;
        }
        let change = match accepted {
            Some((trial, f)) => {
                let change = (&trial - &zeta).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                zeta = trial;
                current = f;
                change
            }
            None => 0.0,
        };
        trace.push(current);
        let at_floor = eps <= opts.eps_floor;
        eps = (eps * 0.5).max(opts.eps_floor);
        if at_floor && change <= opts.tol * t_inf.max(f64::MIN_POSITIVE) {
            break;
        }
    }

    let mut thresholded = zeta.clone();
    thresholded.mapv_inplace(|z| if z.abs() < opts.zero_threshold { 0.0 } else { z });
    let f_thr = objective(thresholded.view());
    if f_thr <= current + 1e-9 {
        zeta = thresholded;
        current = f_thr.min(current);
    } else {
        for u in 0..p {
            if zeta[u] != 0.0 && zeta[u].abs() < opts.zero_threshold {
                let delta = zeroing_delta(target, &zeta, graph, lambda1, lambda2, u);
                if delta <= 0.0 {
                    zeta[u] = 0.0;
                }
            }
        }
        current = objective(zeta.view());
    }
    trace.push(current);
    Ok(ZetaFit {
        zeta,
        trace,
        sweeps,
        cg_iterations,
        direct_solves,
    })
}

/// Normalized Rayleigh quotient `ζᵀLζ / (λmax ζᵀζ)`, clamped to `[0, 1]`;
/// 0 for a zero map.
pub fn roughness(zeta: ArrayView1<f64>, laplacian: &NormalizedLaplacian) -> f64 {
    let nn = zeta.dot(&zeta);
    if nn == 0.0 || laplacian.lambda_max <= 0.0 {
        return 0.0;
    }
    (laplacian.quadratic_form(zeta) / (laplacian.lambda_max * nn)).clamp(0.0, 1.0)
}

/// `‖ζ‖₁² / (p ‖ζ‖₂²)`; 1 for a zero map.
pub fn diffuseness(zeta: ArrayView1<f64>) -> f64 {
    let nn = zeta.dot(&zeta);
    if nn == 0.0 {
        return 1.0;
    }
    let l1: f64 = zeta.iter().map(|z| z.abs()).sum();
    l1 * l1 / (zeta.len() as f64 * nn)
}

/// Mean of `(1 − R_j)(1 − D_j)` over sources.
pub fn rho_score(roughness: &[f64], diffuseness: &[f64]) -> f64 {
    if roughness.is_empty() {
        return 0.0;
    }
    roughness
        .iter()
        .zip(diffuseness)
        .map(|(r, d)| (1.0 - r) * (1.0 - d))
        .sum::<f64>()
        / roughness.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEntry {
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub all_zero: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RootProximityMaps {
    pub zeta: Array2<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub roughness: Vec<f64>,
    pub diffuseness: Vec<f64>,
    pub solver_traces: Vec<Vec<f64>>,
    pub table: Vec<RhoEntry>,
}

struct PairFit {
    fits: Vec<ZetaFit>,
    roughness: Vec<f64>,
    diffuseness: Vec<f64>,
    rho: f64,
    all_zero: bool,
}

/// Fits every source at every grid pair and keeps the pair with the largest ρ.
/// Ties go to the larger λ1, then the larger λ2.
pub fn select_lambdas(
    target: ArrayView2<f64>,
    laplacian: &NormalizedLaplacian,
    graph: &AdjacencyGraph,
    grid_lambda1: &[f64],
    grid_lambda2: &[f64],
    opts: &ZetaOptions,
) -> Result<RootProximityMaps> {
    if grid_lambda1.is_empty() || grid_lambda2.is_empty() {
        return Err(Error::InvalidArgument("penalty grids must be nonempty".into()));
    }
    let k = target.nrows();
    let pairs: Vec<(f64, f64)> = grid_lambda1
        .iter()
        .flat_map(|&a| grid_lambda2.iter().map(move |&b| (a, b)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let results: Vec<Result<ZetaFit>> = jobs
        .par_iter()
        .map(|&(i, j)| fit_zeta(target.row(j), graph, pairs[i].0, pairs[i].1, opts))
        .collect();
    let mut results = results.into_iter();
    let mut pair_fits = Vec::with_capacity(pairs.len());
    for _ in &pairs {
        let fits: Vec<ZetaFit> = results.by_ref().take(k).collect::<Result<_>>()?;
        let roughness: Vec<f64> = fits.iter().map(|f| self::roughness(f.zeta.view(), laplacian)).collect();
        let diffuseness: Vec<f64> = fits.iter().map(|f| self::diffuseness(f.zeta.view())).collect();
        let all_zero = fits.iter().all(|f| f.zeta.iter().all(|&z| z == 0.0));
        let rho = rho_score(&roughness, &diffuseness);
        pair_fits.push(PairFit {
            fits,
            roughness,
            diffuseness,
            rho,
            all_zero,
        });
    }
    let mut best: Option<usize> = None;
    for (i, pf) in pair_fits.iter().enumerate() {
        if pf.all_zero {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let (cur, cand) = (&pair_fits[b], pf);
                let better = if cand.rho != cur.rho {
                    cand.rho > cur.rho
                } else if pairs[i].0 != pairs[b].0 {
                    pairs[i].0 > pairs[b].0
                } else {
                    pairs[i].1 > pairs[b].1
                };
                Some(if better { i } else { b })
            }
        };
    }
    let best = best.ok_or(Error::NoSignal)?;
    let table = pairs
        .iter()
        .zip(&pair_fits)
        .map(|(&(l1, l2), pf)| RhoEntry {
            lambda1: l1,
            lambda2: l2,
            rho: pf.rho,
            all_zero: pf.all_zero,
        })
        .collect();
    let chosen = pair_fits.swap_remove(best);
    let p = target.ncols();
    let mut zeta = Array2::zeros((k, p));
    for (j, f) in chosen.fits.iter().enumerate() {
        zeta.row_mut(j).assign(&f.zeta);
    }
    Ok(RootProximityMaps {
        zeta,
        lambda1: pairs[best].0,
        lambda2: pairs[best].1,
        rho: chosen.rho,
        roughness: chosen.roughness,
        diffuseness: chosen.diffuseness,
        solver_traces: chosen.fits.into_iter().map(|f| f.trace).collect(),
        table,
    })
}
