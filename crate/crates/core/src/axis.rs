//! Subject-level driver aggregation and sparse symptom axes.
//!
//! An axis is a pair `(α, β)` maximizing `cor(Sβ, Yα) − λ₃‖β‖₀` subject to
//! `Var(Sβ) = 1`, `α ≥ 0` and `‖α‖₁ = 1`. For a fixed support the problem is
//! solved by alternating an exact regression step in `β` with projected
//! gradient ascent for `α` on the probability simplex. Supports are
//! enumerated exhaustively for small `K` and grown greedily otherwise.

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, center_columns, solve_spd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    LogVar,
    Alff,
    Falff,
    MeanAbs,
}

impl Aggregator {
    fn needs_band(self) -> bool {
        matches!(self, Aggregator::Alff | Aggregator::Falff)
    }
}

/// Periodogram power `|DFT_k|² / T` at the positive frequencies
/// `k / (T·tr)`, `k = 1..=⌊T/2⌋`, of the mean-removed series.
pub fn periodogram(series: ArrayView1<f64>, tr: f64) -> Vec<(f64, f64)> {
    let t = series.len();
    let m = linalg::mean(series);
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v - m, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(t).process(&mut buf);
    (1..=t / 2)
        .map(|k| (k as f64 / (t as f64 * tr), buf[k].norm_sqr() / t as f64))
        .collect()
}

/// Reduces one time course to a scalar summary.
pub fn aggregate_series(
    aggregator: Aggregator,
    series: ArrayView1<f64>,
    band: Option<(f64, f64)>,
    tr: Option<f64>,
) -> Result<f64> {
    match aggregator {
        Aggregator::LogVar => {
            let v = linalg::variance(series);
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::InvalidArgument("zero variance series".into()))
            }
        }
        Aggregator::MeanAbs => Ok(series.iter().map(|v| v.abs()).sum::<f64>() / series.len() as f64),
        Aggregator::Alff | Aggregator::Falff => {
            let (lo, hi) = band.ok_or_else(|| Error::InvalidArgument("band aggregator needs a band".into()))?;
            let tr = tr.ok_or_else(|| Error::InvalidArgument("band aggregator needs tr".into()))?;
            let spec = periodogram(series, tr);
            let in_band: f64 = spec.iter().filter(|(f, _)| *f >= lo && *f <= hi).map(|(_, p)| p).sum();
            let alff = in_band.sqrt();
            if aggregator == Aggregator::Alff {
                return Ok(alff);
            }
            let total: f64 = spec.iter().map(|(_, p)| p).sum();
            if total > 0.0 {
                Ok(alff / total.sqrt())
            } else {
                Err(Error::InvalidArgument("zero power series".into()))
            }
        }
    }
}

/// Per-subject source summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverMatrix {
    /// `n × K` raw summaries.
    pub raw: Array2<f64>,
    /// Columns centered and scaled to unit variance; constant columns stay zero.
    pub standardized: Array2<f64>,
    pub aggregator: Aggregator,
    pub band: Option<(f64, f64)>,
    pub tr_seconds: Option<f64>,
    pub constant_columns: Vec<usize>,
}

pub fn aggregate(
    sources: ArrayView2<f64>,
    block_spans: &[Range<usize>],
    aggregator: Aggregator,
    band: Option<(f64, f64)>,
    tr: Option<f64>,
) -> Result<DriverMatrix> {
    let total = sources.nrows();
    let mut expected = 0;
    for span in block_spans {
        if span.start != expected || span.end < span.start {
            return Err(Error::InvalidArgument("block spans must partition the pooled index".into()));
        }
        expected = span.end;
    }
    if expected != total {
        return Err(Error::InvalidArgument("block spans must cover the pooled index".into()));
    }
    if aggregator.needs_band() {
        let (lo, hi) = band.ok_or_else(|| Error::InvalidArgument("band aggregator needs a band".into()))?;
        let tr = tr.ok_or_else(|| Error::InvalidArgument("band aggregator needs tr".into()))?;
        let nyquist = 1.0 / (2.0 * tr);
        if !(lo > 0.0 && lo < hi && hi < nyquist) {
            return Err(Error::InvalidArgument(format!(
                "band ({lo}, {hi}) must lie inside (0, {nyquist})"
            )));
        }
        if let Some(short) = block_spans.iter().position(|s| s.len() < 16) {
            return Err(Error::InvalidArgument(format!(
                "subject {short} has fewer than 16 time points for a band aggregator"
            )));
        }
    }
    let (n, k) = (block_spans.len(), sources.ncols());
    let mut raw = Array2::zeros((n, k));
    for (i, span) in block_spans.iter().enumerate() {
        for j in 0..k {
            let series = sources.slice(ndarray::s![span.clone(), j]);
            raw[[i, j]] = aggregate_series(aggregator, series, band, tr)
                .map_err(|_| Error::DegenerateDriver { subject: i, component: j })?;
        }
    }
    let (standardized, constant_columns) = standardize_columns(raw.view());
    Ok(DriverMatrix {
        raw,
        standardized,
        aggregator,
        band,
        tr_seconds: tr,
        constant_columns,
    })
}

pub fn standardize_columns(x: ArrayView2<f64>) -> (Array2<f64>, Vec<usize>) {
    let mut out = x.to_owned();
    center_columns(&mut out);
    let mut constant = Vec::new();
    for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
        let sd = (col.dot(&col) / col.len() as f64).sqrt();
        if is_negligible(sd * sd, x.column(j)) {
            col.fill(0.0);
            constant.push(j);
        } else {
            col /= sd;
        }
    }
    (out, constant)
}

fn is_negligible(var: f64, original: ArrayView1<f64>) -> bool {
    let scale = original.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    var <= 1e-24 + 1e-20 * scale * scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomAxis {
    /// Simplex weights over symptom items.
    pub alpha: Array1<f64>,
    /// Driver weights; zero outside the support.
    pub beta: Array1<f64>,
    pub train_correlation: f64,
    pub validation_correlation: Option<f64>,
    pub lambda3: f64,
    pub support: Vec<usize>,
    pub deflation_round: usize,
    /// Symptom columns dropped for zero variance.
    pub excluded_symptoms: Vec<usize>,
    /// Correlation after every alternation round for the chosen support.
    pub objective_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisOptions {
    /// Largest support size; defaults to `min(K, 10)`.
    pub max_support: Option<usize>,
    /// Exhaustive support search up to this many candidate drivers.
    pub exhaustive_limit: usize,
    /// Freeze `α` (e.g. uniform for a total score) and fit `β` only.
    pub fixed_alpha: Option<Array1<f64>>,
    pub alpha_tol: f64,
    pub alpha_max_iter: usize,
    pub max_rounds: usize,
}

impl Default for AxisOptions {
    fn default() -> Self {
        AxisOptions {
            max_support: None,
            exhaustive_limit: 12,
            fixed_alpha: None,
            alpha_tol: 1e-8,
            alpha_max_iter: 2000,
            max_rounds: 100,
        }
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: ArrayView1<f64>) -> Array1<f64> {
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i as f64 + 1.0);
        if ui - t > 0.0 {
            theta = t;
        }
    }
    let mut out = v.mapv(|x| (x - theta).max(0.0));
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    }
    out
}

/// Second moments of centered drivers and symptoms.
struct Moments {
    s_cov: Array2<f64>,
    y_cov: Array2<f64>,
    cross: Array2<f64>,
}

impl Moments {
    fn new(s: ArrayView2<f64>, y: ArrayView2<f64>) -> Self {
        let n = s.nrows() as f64;
        let mut sc = s.to_owned();
        let mut yc = y.to_owned();
        center_columns(&mut sc);
        center_columns(&mut yc);
        Moments {
            s_cov: sc.t().dot(&sc) / n,
            y_cov: yc.t().dot(&yc) / n,
            cross: sc.t().dot(&yc) / n,
        }
    }

    /// `cᵀα / √(αᵀ Σ_Y α)` where `c = cov(Y, Sβ)`.
    fn alpha_objective(&self, c: &Array1<f64>, alpha: &Array1<f64>) -> f64 {
        let var = alpha.dot(&self.y_cov.dot(alpha));
        if var <= 0.0 {
            0.0
        } else {
            c.dot(alpha) / var.sqrt()
        }
    }

    /// Regression direction restricted to `support`, scaled to unit variance.
    fn beta_step(&self, support: &[usize], alpha: &Array1<f64>) -> Option<Array1<f64>> {
        let m = support.len();
        let mut a = Array2::zeros((m, m));
        let mut rhs = Array1::zeros(m);
        let c = self.cross.dot(alpha);
        for (i, &si) in support.iter().enumerate() {
            rhs[i] = c[si];
            for (j, &sj) in support.iter().enumerate() {
                a[[i, j]] = self.s_cov[[si, sj]];
            }
        }
        let ridge = 1e-12 * a.diag().iter().fold(0.0f64, |m, v| m.max(*v));
        for i in 0..m {
            a[[i, i]] += ridge;
        }
        let b = solve_spd(a.view(), rhs.view()).ok()?;
        let mut beta = Array1::zeros(self.s_cov.nrows());
        for (i, &si) in support.iter().enumerate() {
            beta[si] = b[i];
        }
        let var = beta.dot(&self.s_cov.dot(&beta));
        if !(var > 0.0) {
            // α uncorrelated with the support: any unit-variance direction.
            let mut fallback = Array1::zeros(self.s_cov.nrows());
            fallback[support[0]] = 1.0 / self.s_cov[[support[0], support[0]]].sqrt();
            return Some(fallback);
        }
        Some(beta / var.sqrt())
    }

    fn alpha_step(&self, c: &Array1<f64>, start: &Array1<f64>, tol: f64, max_iter: usize) -> Array1<f64> {
        let mut alpha = start.clone();
        let mut value = self.alpha_objective(c, &alpha);
        let mut step = 1.0;
        for _ in 0..max_iter {
            let sa = self.y_cov.dot(&alpha);
            let var = alpha.dot(&sa);
            if var <= 0.0 {
                break;
            }
            let sd = var.sqrt();
            let grad = c / sd - &(sa * (c.dot(&alpha) / (var * sd)));
            let mut accepted = None;
            let mut trial_step = step * 2.0;
            for _ in 0..60 {
                let cand = project_simplex((&alpha + &(trial_step * &grad)).view());
                let cand_value = self.alpha_objective(c, &cand);
                let ascent = grad.dot(&(&cand - &alpha));
                if cand_value >= value + 1e-4 * ascent && cand_value >= value {
                    accepted = Some((cand, cand_value));
                    break;
                }
                trial_step *= 0.5;
            }
            let Some((cand, cand_value)) = accepted else {
                break;
            };
            step = trial_step;
            let moved = (&cand - &alpha).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            alpha = cand;
            value = cand_value;
            if moved <= tol {
                break;
            }
        }
        alpha
    }
}

#[derive(Debug, Clone)]
struct SupportFit {
    support: Vec<usize>,
    alpha: Array1<f64>,
    beta: Array1<f64>,
    correlation: f64,
    trace: Vec<f64>,
}

fn fit_support(moments: &Moments, support: &[usize], start_alpha: &Array1<f64>, opts: &AxisOptions) -> Option<SupportFit> {
    let mut alpha = start_alpha.clone();
    let mut beta = moments.beta_step(support, &alpha)?;
    let mut trace = Vec::new();
    let mut value = moments.alpha_objective(&moments.cross.t().dot(&beta), &alpha);
    trace.push(value);
    if opts.fixed_alpha.is_some() {
        return Some(SupportFit {
            support: support.to_vec(),
            alpha,
            beta,
            correlation: value,
            trace,
        });
    }
    for _ in 0..opts.max_rounds {
        let c = moments.cross.t().dot(&beta);
        alpha = moments.alpha_step(&c, &alpha, opts.alpha_tol, opts.alpha_max_iter);
        let Some(next_beta) = moments.beta_step(support, &alpha) else {
            break;
        };
        beta = next_beta;
        let next = moments.alpha_objective(&moments.cross.t().dot(&beta), &alpha);
        trace.push(next);
        let gain = next - value;
        value = next;
        if gain <= 1e-12 {
            break;
        }
    }
    Some(SupportFit {
        support: support.to_vec(),
        alpha,
        beta,
        correlation: value,
        trace,
    })
}

fn combinations(items: &[usize], size: usize) -> Vec<Vec<usize>> {
    fn rec(items: &[usize], size: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            if items.len() - i < size - cur.len() {
                break;
            }
            cur.push(items[i]);
            rec(items, size, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(items, size, 0, &mut Vec::new(), &mut out);
    out
}

/// Best fit of the given size among candidate supports; ties keep the
/// earliest (lexicographic) support.
fn best_of(moments: &Moments, supports: Vec<Vec<usize>>, start: &Array1<f64>, opts: &AxisOptions) -> Option<SupportFit> {
    let fits: Vec<Option<SupportFit>> = supports
        .par_iter()
        .map(|s| fit_support(moments, s, start, opts))
        .collect();
    let mut best: Option<SupportFit> = None;
    for fit in fits.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => fit.correlation > b.correlation + 1e-12,
        };
        if better {
            best = Some(fit);
        }
    }
    best
}

fn symptom_columns(y: ArrayView2<f64>) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (j, col) in y.axis_iter(Axis(1)).enumerate() {
        if col.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("symptom column {j} has non-finite entries")));
        }
        if is_negligible(linalg::variance(col), col) {
            log::warn!("symptom column {j} has zero variance and is excluded");
            excluded.push(j);
        } else {
            kept.push(j);
        }
    }
    if kept.is_empty() {
        return Err(Error::AllColumnsDegenerate);
    }
    Ok((kept, excluded))
}

/// Fits one symptom axis with the default search options.
pub fn fit_axis(s: ArrayView2<f64>, y: ArrayView2<f64>, lambda3: f64, max_support: Option<usize>) -> Result<SymptomAxis> {
    let opts = AxisOptions {
        max_support,
        ..Default::default()
    };
    fit_axis_with(s, y, lambda3, &opts)
}

pub fn fit_axis_with(s: ArrayView2<f64>, y: ArrayView2<f64>, lambda3: f64, opts: &AxisOptions) -> Result<SymptomAxis> {
    SupportPath::fit(s, y, opts)?.axis(s, y, lambda3)
}

/// Best fit of every support size. The ℓ0 penalty only chooses among these,
/// so one path serves every `λ₃`.
#[derive(Debug, Clone)]
pub struct SupportPath {
    per_size: Vec<SupportFit>,
    kept_y: Vec<usize>,
    excluded: Vec<usize>,
}

impl SupportPath {
    pub fn fit(s: ArrayView2<f64>, y: ArrayView2<f64>, opts: &AxisOptions) -> Result<Self> {
        let (n, k) = s.dim();
        if y.nrows() != n {
            return Err(Error::DimensionMismatch(format!("S has {n} rows, Y has {}", y.nrows())));
        }
        if n < k + 2 {
            log::warn!("fit_axis with n = {n} subjects and K = {k} drivers; n ≥ K + 2 is recommended");
        }
        let (kept_y, excluded) = symptom_columns(y)?;
        let y_kept = y.select(Axis(1), &kept_y);
        let moments = Moments::new(s, y_kept.view());
        let candidates: Vec<usize> = (0..k).filter(|&j| !is_negligible(moments.s_cov[[j, j]], s.column(j))).collect();
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("every driver column is constant".into()));
        }
        let q = kept_y.len();
        let start = match &opts.fixed_alpha {
            Some(a) => {
                if a.len() != y.ncols() {
                    return Err(Error::DimensionMismatch("fixed alpha must have one weight per symptom".into()));
                }
                let sub = Array1::from_iter(kept_y.iter().map(|&j| a[j]));
                let total = sub.sum();
                if !(total > 0.0) || sub.iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidArgument("fixed alpha must be a nonnegative, nonzero weight vector".into()));
                }
                sub / total
            }
            None => Array1::from_elem(q, 1.0 / q as f64),
        };
        let max_support = opts.max_support.unwrap_or(k.min(10)).min(candidates.len()).max(1);

        let mut per_size: Vec<SupportFit> = Vec::new();
        if candidates.len() <= opts.exhaustive_limit {
            for size in 1..=max_support {
                if let Some(best) = best_of(&moments, combinations(&candidates, size), &start, opts) {
                    per_size.push(best);
                }
            }
        } else {
            let mut current: Vec<usize> = Vec::new();
            for _ in 1..=max_support {
                let supports: Vec<Vec<usize>> = candidates
                    .iter()
                    .filter(|c| !current.contains(c))
                    .map(|&c| {
                        let mut s = current.clone();
                        s.push(c);
                        s.sort_unstable();
                        s
                    })
                    .collect();
                let Some(best) = best_of(&moments, supports, &start, opts) else {
                    break;
                };
                current = best.support.clone();
                per_size.push(best);
            }
        }

        Ok(SupportPath {
            per_size,
            kept_y,
            excluded,
        })
    }

    /// The axis chosen at `lambda3` (score = correlation − λ₃·|support|).
    pub fn axis(&self, s: ArrayView2<f64>, y: ArrayView2<f64>, lambda3: f64) -> Result<SymptomAxis> {
        if !(lambda3 >= 0.0) {
            return Err(Error::InvalidArgument("lambda3 must be nonnegative".into()));
        }
        let (per_size, kept_y, excluded) = (&self.per_size, &self.kept_y, self.excluded.clone());
        let mut chosen: Option<&SupportFit> = None;
        for fit in per_size.iter() {
            let score = fit.correlation - lambda3 * fit.support.len() as f64;
            let better = match chosen {
                None => true,
                Some(c) => score > c.correlation - lambda3 * c.support.len() as f64 + 1e-12,
            };
            if better {
                chosen = Some(fit);
            }
        }
        let chosen = chosen.ok_or_else(|| Error::InvalidArgument("no support could be fitted".into()))?;

        let mut alpha = Array1::zeros(y.ncols());
        for (i, &j) in kept_y.iter().enumerate() {
            alpha[j] = chosen.alpha[i];
        }
        let beta = chosen.beta.clone();
        let train_correlation = linalg::cor_or_zero(s.dot(&beta).view(), y.dot(&alpha).view());
        Ok(SymptomAxis {
            alpha,
            beta,
            train_correlation,
            validation_correlation: None,
            lambda3,
            support: chosen.support.clone(),
            deflation_round: 0,
            excluded_symptoms: excluded,
            objective_trace: chosen.trace.clone(),
        })
    }
}

/// Replaces every column of `S` by its residual after simple regression
/// on `Sβ`.
pub fn deflate(s: ArrayView2<f64>, beta: ArrayView1<f64>) -> Result<Array2<f64>> {
    let mut u = s.dot(&beta);
    let um = linalg::mean(u.view());
    u -= um;
    let var_u = u.dot(&u);
    if !(var_u > 0.0) {
        return Err(Error::InvalidArgument("deflation direction has zero variance".into()));
    }
    let mut out = s.to_owned();
    center_columns(&mut out);
    for mut col in out.axis_iter_mut(Axis(1)) {
        let coef = col.dot(&u) / var_u;
        col.scaled_add(-coef, &u);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxesFit {
    pub axes: Vec<SymptomAxis>,
    pub stop_reason: Option<String>,
}

pub const STOP_DRIVERS_EXHAUSTED: &str = "drivers exhausted";
pub const STOP_BELOW_PENALTY: &str = "best correlation below lambda3";

/// Extracts up to `n_axes` axes, deflating the drivers after each.
pub fn fit_axes(s: ArrayView2<f64>, y: ArrayView2<f64>, lambda3: f64, n_axes: usize) -> Result<AxesFit> {
    fit_axes_with(s, y, lambda3, n_axes, &AxisOptions::default())
}

pub fn fit_axes_with(
    s: ArrayView2<f64>,
    y: ArrayView2<f64>,
    lambda3: f64,
    n_axes: usize,
    opts: &AxisOptions,
) -> Result<AxesFit> {
    if n_axes == 0 {
        return Err(Error::InvalidArgument("n_axes must be at least 1".into()));
    }
    let total_var: f64 = s.axis_iter(Axis(1)).map(linalg::variance).sum();
    let mut current = s.to_owned();
    let mut axes = Vec::new();
    let mut stop_reason = None;
    for round in 0..n_axes {
        let remaining: f64 = current.axis_iter(Axis(1)).map(linalg::variance).sum();
        if round > 0 && remaining <= 1e-20 * total_var.max(1e-300) {
            stop_reason = Some(STOP_DRIVERS_EXHAUSTED.to_string());
            break;
        }
        if round > 0 {
            // Columns reduced to round-off by deflation are dropped from the search.
            for j in 0..current.ncols() {
                let v = linalg::variance(current.column(j));
                if v <= 1e-20 * linalg::variance(s.column(j)).max(1e-300) {
                    current.column_mut(j).fill(0.0);
                }
            }
            if current.iter().all(|&v| v == 0.0) {
                stop_reason = Some(STOP_DRIVERS_EXHAUSTED.to_string());
                break;
            }
        }
        let mut axis = fit_axis_with(current.view(), y, lambda3, opts)?;
        if round > 0 && axis.train_correlation < lambda3 {
            stop_reason = Some(STOP_BELOW_PENALTY.to_string());
            break;
        }
        axis.deflation_round = round;
        current = deflate(current.view(), axis.beta.view())?;
        axes.push(axis);
    }
    Ok(AxesFit { axes, stop_reason })
}

/// Default penalty grid for cross-validating `λ₃`.
pub const DEFAULT_LAMBDA3_GRID: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambda3Selection {
    pub lambda3: f64,
    /// `(λ₃, mean held-out correlation)` per grid value.
    pub table: Vec<(f64, f64)>,
}

/// K-fold cross-validation of `λ₃` by mean held-out `cor(Sβ, Yα)`; ties
/// prefer the larger penalty.
pub fn select_lambda3(
    s: ArrayView2<f64>,
    y: ArrayView2<f64>,
    grid: &[f64],
    folds: usize,
    seed: u64,
    opts: &AxisOptions,
) -> Result<Lambda3Selection> {
    let n = s.nrows();
    if grid.is_empty() {
        return Err(Error::InvalidArgument("lambda3 grid is empty".into()));
    }
    if folds < 2 || n < 2 * folds {
        return Err(Error::InvalidArgument(format!("cannot run {folds}-fold CV with {n} subjects")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..folds)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = idx.iter().enumerate().partition(|(i, _)| i % folds == f);
            (train.into_iter().map(|(_, &v)| v).collect(), test.into_iter().map(|(_, &v)| v).collect())
        })
        .collect();
    let paths = splits
        .par_iter()
        .map(|(train, _)| {
            let (s_train, y_train) = (s.select(Axis(0), train), y.select(Axis(0), train));
            let path = SupportPath::fit(s_train.view(), y_train.view(), opts)?;
            Ok((path, s_train, y_train))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Vec::with_capacity(grid.len());
    for &lambda3 in grid {
        let scores: Vec<f64> = paths
            .iter()
            .zip(&splits)
            .map(|((path, s_train, y_train), (_, test))| {
                let axis = path.axis(s_train.view(), y_train.view(), lambda3)?;
                let st = s.select(Axis(0), test);
                let yt = y.select(Axis(0), test);
                Ok(linalg::cor_or_zero(st.dot(&axis.beta).view(), yt.dot(&axis.alpha).view()))
            })
            .collect::<Result<Vec<f64>>>()?;
        table.push((lambda3, scores.iter().sum::<f64>() / scores.len() as f64));
    }
    let mut best = table[0];
    for &(l, c) in &table[1..] {
        if c > best.1 + 1e-12 || ((c - best.1).abs() <= 1e-12 && l > best.0) {
            best = (l, c);
        }
    }
    Ok(Lambda3Selection { lambda3: best.0, table })
}
