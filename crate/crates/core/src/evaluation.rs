//! Held-out metrics (correlation, correlation density, compactness), oracle
//! scoring helpers, and the bootstrap / ablation protocol.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, AxisConfig, RunConfig};
use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::linalg::{cross_correlation, pearson};
use crate::pipeline::{effect_maps, fit_sources, fit_stage3, held_out_drivers, prepare, CohortData, PreparedCohort, SourceFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    FixedTotal,
    LearnedAxis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectMapSet {
    /// `K × p`, rows with unit ℓ2 norm (all-zero rows stay zero).
    pub chi: Array2<f64>,
    pub beta_hat: Array1<f64>,
    pub target_kind: TargetKind,
    pub zero_rows: usize,
}

/// Scales every nonzero row to unit ℓ2 norm; returns the number of zero rows.
pub fn normalize_rows(chi: &mut Array2<f64>) -> usize {
    let mut zero = 0;
    for mut row in chi.outer_iter_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        } else {
            zero += 1;
        }
    }
    zero
}

impl EffectMapSet {
    pub fn new(mut chi: Array2<f64>, beta_hat: Array1<f64>, target_kind: TargetKind) -> Result<Self> {
        if chi.nrows() != beta_hat.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} map rows but {} coefficients",
                chi.nrows(),
                beta_hat.len()
            )));
        }
        let zero_rows = normalize_rows(&mut chi);
        Ok(EffectMapSet {
            chi,
            beta_hat,
            target_kind,
            zero_rows,
        })
    }
}

/// Pearson correlation of `Sβ` with the target; 0 (with a warning) when
/// either side is constant.
pub fn correlation_metric(s_test: ArrayView2<f64>, beta: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<f64> {
    if s_test.nrows() < 3 {
        return Err(Error::InvalidArgument(format!("test set has {} subjects, need 3", s_test.nrows())));
    }
    if target.len() != s_test.nrows() {
        return Err(Error::DimensionMismatch("target length differs from test rows".into()));
    }
    let proj = s_test.dot(&beta);
    Ok(pearson(proj.view(), target).unwrap_or_else(|| {
        log::warn!("zero-variance side in held-out correlation; using 0");
        0.0
    }))
}

/// `cor / ((1/p) Σ_k Σ_i |χ_ki| |β_k|)` with `χ` rows already unit-normalized.
pub fn correlation_density(cor: f64, chi: ArrayView2<f64>, beta: ArrayView1<f64>) -> Result<f64> {
    let p = chi.ncols() as f64;
    let mass: f64 = chi
        .outer_iter()
        .zip(beta.iter())
        .map(|(row, b)| row.iter().map(|v| v.abs()).sum::<f64>() * b.abs())
        .sum::<f64>()
        / p;
    if !(mass > 0.0) {
        return Err(Error::NoEffectMass);
    }
    Ok(cor / mass)
}

/// Largest 6-neighbourhood share of the weighted map `|χᵀβ|`.
pub fn compactness(chi: ArrayView2<f64>, beta: ArrayView1<f64>, grid: &VoxelGrid) -> Result<f64> {
    let weighted = chi.t().dot(&beta).mapv(f64::abs);
    let total = weighted.sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeightedMap);
    }
    let best = (0..grid.p())
        .map(|v| weighted[v] + grid.face_neighbors(v).map(|u| weighted[u]).sum::<f64>())
        .fold(0.0f64, f64::max);
    Ok(best / total)
}

/// Area under the ROC curve of `scores` for the positive set (Mann–Whitney
/// statistic with tied ranks averaged). `None` if either class is empty.
pub fn auc(scores: ArrayView1<f64>, positives: &BTreeSet<usize>) -> Option<f64> {
    let n = scores.len();
    let n_pos = positives.iter().filter(|&&i| i < n).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    let rank_sum: f64 = positives.iter().filter(|&&i| i < n).map(|&i| ranks[i]).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-to-one assignment of true sources (rows) to estimated components
/// (columns) maximizing the total score; exhaustive for small problems,
/// greedy otherwise. Unmatched rows get `None`.
pub fn best_matching(score: ArrayView2<f64>) -> Vec<Option<usize>> {
    let (k_true, k_est) = score.dim();
    let mut best: (f64, Vec<Option<usize>>) = (f64::NEG_INFINITY, vec![None; k_true]);
    if k_est <= 8 && k_true <= 8 {
        fn search(
            row: usize,
            score: ArrayView2<f64>,
            used: &mut Vec<bool>,
            current: &mut Vec<Option<usize>>,
            total: f64,
            best: &mut (f64, Vec<Option<usize>>),
        ) {
            if row == score.nrows() {
                if total > best.0 {
                    *best = (total, current.clone());
                }
                return;
            }
            let free = used.iter().filter(|u| !**u).count();
            let rows_left = score.nrows() - row;
            for c in 0..score.ncols() {
                if !used[c] {
                    used[c] = true;
                    current[row] = Some(c);
                    search(row + 1, score, used, current, total + score[[row, c]], best);
                    used[c] = false;
                }
            }
            if free < rows_left {
                current[row] = None;
                search(row + 1, score, used, current, total, best);
            }
        }
        search(0, score, &mut vec![false; k_est], &mut vec![None; k_true], 0.0, &mut best);
        return best.1;
    }
    let mut pairs: Vec<(usize, usize)> = (0..k_true).flat_map(|i| (0..k_est).map(move |j| (i, j))).collect();
    pairs.sort_by(|a, b| score[[b.0, b.1]].total_cmp(&score[[a.0, a.1]]).then(a.cmp(b)));
    let mut out = vec![None; k_true];
    let mut used = vec![false; k_est];
    for (i, j) in pairs {
        if out[i].is_none() && !used[j] {
            out[i] = Some(j);
            used[j] = true;
        }
    }
    out
}

/// Absolute correlations between true and estimated sources, plus the best
/// one-to-one matching.
pub fn match_sources(f_true: ArrayView2<f64>, f_hat: ArrayView2<f64>) -> (Array2<f64>, Vec<Option<usize>>) {
    let c = cross_correlation(f_true, f_hat).mapv(f64::abs);
    let m = best_matching(c.view());
    (c, m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// 1.96 standard errors of the mean.
    pub half_width: f64,
    pub count: usize,
}

pub fn mean_ci(values: &[f64]) -> MeanCi {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let n = finite.len();
    if n == 0 {
        return MeanCi {
            mean: f64::NAN,
            half_width: f64::NAN,
            count: 0,
        };
    }
    let mean = finite.iter().sum::<f64>() / n as f64;
    let half_width = if n > 1 {
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanCi { mean, half_width, count: n }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub correlation: MeanCi,
    pub correlation_density: MeanCi,
    pub compactness: MeanCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleResult {
    pub correlation: f64,
    pub correlation_density: Option<f64>,
    pub compactness: Option<f64>,
    pub lambda3: f64,
    pub support: Vec<usize>,
    pub in_bag: usize,
    pub out_of_bag: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReport {
    pub ablation: Ablation,
    pub target_kind: TargetKind,
    pub n_resamples: usize,
    pub seed: u64,
    pub refit_all: bool,
    /// Resamples whose out-of-bag set was too small and had to be redrawn.
    pub redraws: usize,
    pub resamples: Vec<ResampleResult>,
    pub summary: MetricSummary,
}

impl BootstrapReport {
    fn assemble(ablation: Ablation, seed: u64, refit_all: bool, results: Vec<(ResampleResult, usize)>) -> Self {
        let redraws = results.iter().map(|r| r.1).sum();
        let resamples: Vec<ResampleResult> = results.into_iter().map(|r| r.0).collect();
        let col = |f: &dyn Fn(&ResampleResult) -> Option<f64>| -> Vec<f64> {
            resamples.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect()
        };
        let summary = MetricSummary {
            correlation: mean_ci(&col(&|r| Some(r.correlation))),
            correlation_density: mean_ci(&col(&|r| r.correlation_density)),
            compactness: mean_ci(&col(&|r| r.compactness)),
        };
        BootstrapReport {
            ablation,
            target_kind: if ablation.uses_axis() {
                TargetKind::LearnedAxis
            } else {
                TargetKind::FixedTotal
            },
            n_resamples: resamples.len(),
            seed,
            refit_all,
            redraws,
            resamples,
            summary,
        }
    }
}

const MAX_REDRAWS: usize = 10;

/// In-bag indices drawn with replacement and the out-of-bag complement
/// (at least 3 subjects), plus the number of redraws needed.
fn draw_resample(n: usize, rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    for redraws in 0..=MAX_REDRAWS {
        let bag: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut seen = vec![false; n];
        for &i in &bag {
            seen[i] = true;
        }
        let oob: Vec<usize> = (0..n).filter(|&i| !seen[i]).collect();
        if oob.len() >= 3 {
            return Ok((bag, oob, redraws));
        }
    }
    Err(Error::InvalidArgument(format!(
        "out-of-bag set stayed below 3 subjects after {MAX_REDRAWS} redraws"
    )))
}

fn resample_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

fn evaluate_fold(
    s_train: ArrayView2<f64>,
    y_train: ArrayView2<f64>,
    s_test: ArrayView2<f64>,
    y_test: ArrayView2<f64>,
    chi: ArrayView2<f64>,
    grid: &VoxelGrid,
    axis_cfg: &AxisConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<ResampleResult> {
    let fit = fit_stage3(s_train, y_train, axis_cfg, ablation, seed)?;
    let axis = &fit.axes.axes[0];
    let target = y_test.dot(&axis.alpha);
    let cor = correlation_metric(s_test, axis.beta.view(), target.view())?;
    Ok(ResampleResult {
        correlation: cor,
        correlation_density: correlation_density(cor, chi, axis.beta.view()).ok(),
        compactness: compactness(chi, axis.beta.view(), grid).ok(),
        lambda3: fit.selection.lambda3,
        support: axis.support.clone(),
        in_bag: s_train.nrows(),
        out_of_bag: s_test.nrows(),
    })
}

/// Stage-3-only bootstrap on a fixed driver matrix and effect maps.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_stage3(
    s: ArrayView2<f64>,
    y: ArrayView2<f64>,
    chi: ArrayView2<f64>,
    grid: &VoxelGrid,
    axis_cfg: &AxisConfig,
    ablation: Ablation,
    n_resamples: usize,
    seed: u64,
) -> Result<BootstrapReport> {
    let n = s.nrows();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 10 subjects, got {n}")));
    }
    let mut chi = chi.to_owned();
    normalize_rows(&mut chi);
    let results = (0..n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = resample_rng(seed, r);
            let (bag, oob, redraws) = draw_resample(n, &mut rng)?;
            let res = evaluate_fold(
                s.select(Axis(0), &bag).view(),
                y.select(Axis(0), &bag).view(),
                s.select(Axis(0), &oob).view(),
                y.select(Axis(0), &oob).view(),
                chi.view(),
                grid,
                axis_cfg,
                ablation,
                rng.random(),
            )?;
            Ok((res, redraws))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapReport::assemble(ablation, seed, false, results))
}

/// Bootstrap with stages 1–2 shared across resamples (`fit`) or, when
/// `cfg.bootstrap.refit_all` is set, refitted on each in-bag set.
pub fn bootstrap_prepared(
    prepared: &PreparedCohort,
    fit: &SourceFit,
    cfg: &RunConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<BootstrapReport> {
    if !cfg.bootstrap.refit_all {
        let chi = effect_maps(fit, ablation);
        return bootstrap_stage3(
            fit.drivers.standardized.view(),
            prepared.y.view(),
            chi.view(),
            &prepared.grid,
            &cfg.axis,
            ablation,
            cfg.bootstrap.n_resamples,
            seed,
        );
    }
    let n = prepared.n();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("bootstrap needs at least 10 subjects, got {n}")));
    }
    let results = (0..cfg.bootstrap.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = resample_rng(seed, r);
            let (bag, oob, redraws) = draw_resample(n, &mut rng)?;
            let refit = fit_sources(prepared, &bag, cfg, rng.random())?;
            let s_test = held_out_drivers(prepared, &refit, &oob, &cfg.axis)?;
            let mut chi = effect_maps(&refit, ablation);
            normalize_rows(&mut chi);
            let res = evaluate_fold(
                refit.drivers.standardized.view(),
                prepared.y.select(Axis(0), &bag).view(),
                s_test.view(),
                prepared.y.select(Axis(0), &oob).view(),
                chi.view(),
                &prepared.grid,
                &cfg.axis,
                ablation,
                rng.random(),
            )?;
            Ok((res, redraws))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BootstrapReport::assemble(ablation, seed, true, results))
}

/// Full protocol with no ablation.
pub fn run_bootstrap(cohort: &CohortData, cfg: &RunConfig, n_resamples: usize, seed: u64) -> Result<BootstrapReport> {
    let mut cfg = cfg.clone();
    cfg.bootstrap.n_resamples = n_resamples;
    let prepared = prepare(cohort, &cfg)?;
    let all: Vec<usize> = (0..prepared.n()).collect();
    let fit = fit_sources(&prepared, &all, &cfg, cfg.seed)?;
    bootstrap_prepared(&prepared, &fit, &cfg, Ablation::None, seed)
}

pub fn run_ablation(cohort: &CohortData, cfg: &RunConfig, which: Ablation) -> Result<BootstrapReport> {
    let prepared = prepare(cohort, cfg)?;
    let all: Vec<usize> = (0..prepared.n()).collect();
    let fit = fit_sources(&prepared, &all, cfg, cfg.seed)?;
    bootstrap_prepared(&prepared, &fit, cfg, which, cfg.seed)
}
