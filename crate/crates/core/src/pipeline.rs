//! The three stages wired together: decomposition, root-proximity maps and
//! symptom axes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::axis::{aggregate, fit_axes_with, select_lambda3, AxesFit, AxisOptions, DriverMatrix, Lambda3Selection};
use crate::config::{Ablation, AxisConfig, RunConfig};
use crate::decomposition::{
    filter_components, fit_ica, pool_and_smooth, preprocess_subject, ComponentDiagnostics, PooledData, SourceDecomposition,
};
use crate::error::{Error, Result};
use crate::grid::{build_laplacian, AdjacencyGraph, GaussianKernel, SmoothingOperator, VoxelGrid};
use crate::rootmap::{correlation_maps_from_series, neighborhood_from_smoothed, select_lambdas, CorrelationMaps, RootProximityMaps};
use crate::simulator::Cohort;

/// Raw subject series and symptoms on a common grid.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub grid: VoxelGrid,
    pub subjects: Vec<Array2<f64>>,
    /// `n × q` symptom matrix.
    pub y: Array2<f64>,
}

impl CohortData {
    pub fn from_cohort(cohort: &Cohort, grid: &VoxelGrid) -> Self {
        CohortData {
            grid: grid.clone(),
            subjects: cohort.recordings.iter().map(|r| r.x.clone()).collect(),
            y: cohort.y_matrix(),
        }
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }
}

/// Preprocessed and smoothed per-subject series.
#[derive(Debug, Clone)]
pub struct PreparedCohort {
    pub grid: VoxelGrid,
    pub kernel: GaussianKernel,
    pub subjects: Vec<Array2<f64>>,
    pub smoothed: Vec<Array2<f64>>,
    pub degenerate: Vec<Vec<bool>>,
    pub y: Array2<f64>,
}

impl PreparedCohort {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }
}

pub fn prepare(cohort: &CohortData, cfg: &RunConfig) -> Result<PreparedCohort> {
    if cohort.y.nrows() != cohort.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} subjects but {} symptom rows",
            cohort.n(),
            cohort.y.nrows()
        )));
    }
    let stage = |e: Error| e.in_stage("decomposition");
    let kernel = GaussianKernel::from_fwhm(cfg.preprocess.smoothing_fwhm_mm, cohort.grid.voxel_size()).map_err(stage)?;
    let pre = cohort
        .subjects
        .par_iter()
        .map(|x| {
            if x.ncols() != cohort.grid.p() {
                return Err(Error::DimensionMismatch(format!(
                    "subject has {} voxels, grid has {}",
                    x.ncols(),
                    cohort.grid.p()
                )));
            }
            preprocess_subject(x.view(), &cfg.preprocess, None)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(stage)?;
    let op = SmoothingOperator::new(&cohort.grid, &kernel);
    let smoothed = pre.par_iter().map(|s| op.apply_rows(s.data.view())).collect();
    let (subjects, degenerate) = pre.into_iter().map(|s| (s.data, s.degenerate)).unzip();
    Ok(PreparedCohort {
        grid: cohort.grid.clone(),
        kernel,
        subjects,
        smoothed,
        degenerate,
        y: cohort.y.clone(),
    })
}

/// Stages 1 and 2 fitted on a set of subjects.
#[derive(Debug, Clone)]
pub struct SourceFit {
    pub subjects: Vec<usize>,
    pub pooled: PooledData,
    pub decomposition: SourceDecomposition,
    pub diagnostics: Vec<ComponentDiagnostics>,
    /// Indices of the components that passed the filter.
    pub kept: Vec<usize>,
    /// Rows follow `kept`.
    pub maps: CorrelationMaps,
    /// Rows follow `kept`.
    pub rootmap: RootProximityMaps,
    pub drivers: DriverMatrix,
}

impl SourceFit {
    /// Kept source time courses over the pooled index.
    pub fn kept_sources(&self) -> Array2<f64> {
        self.decomposition.f_hat.select(Axis(1), &self.kept)
    }
}

/// Stage 1 alone: pooled data and the filtered decomposition.
#[derive(Debug, Clone)]
pub struct Stage1Fit {
    pub subjects: Vec<usize>,
    pub pooled: PooledData,
    pub decomposition: SourceDecomposition,
    pub diagnostics: Vec<ComponentDiagnostics>,
    pub kept: Vec<usize>,
}

/// Fits stages 1–2 and the driver matrix on `subjects` (indices into the
/// prepared cohort; repeats allowed).
pub fn fit_sources(prepared: &PreparedCohort, subjects: &[usize], cfg: &RunConfig, seed: u64) -> Result<SourceFit> {
    let stage1 = fit_stage1(prepared, subjects, cfg, seed)?;
    finish_sources(stage1, &prepared.grid, cfg)
}

pub fn fit_stage1(prepared: &PreparedCohort, subjects: &[usize], cfg: &RunConfig, seed: u64) -> Result<Stage1Fit> {
    let grid = &prepared.grid;
    let raw: Vec<ArrayView2<f64>> = subjects.iter().map(|&i| prepared.subjects[i].view()).collect();
    let pooled = pool_and_smooth(&raw, grid, &prepared.kernel).map_err(|e| e.in_stage("decomposition"))?;
    let (decomposition, diagnostics) = (|| {
        let d = fit_ica(pooled.smoothed.view(), &pooled.spans, cfg.ica.n_components, seed, &cfg.ica.options())?;
        Ok(filter_components(d, grid, &cfg.filter))
    })()
    .map_err(|e: Error| e.in_stage("decomposition"))?;
    let kept = decomposition.kept_indices();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("every component was flagged as noise".into()).in_stage("decomposition"));
    }
    Ok(Stage1Fit {
        subjects: subjects.to_vec(),
        pooled,
        decomposition,
        diagnostics,
        kept,
    })
}

/// Stage 2 and the driver matrix on top of a stage-1 fit.
pub fn finish_sources(stage1: Stage1Fit, grid: &VoxelGrid, cfg: &RunConfig) -> Result<SourceFit> {
    let Stage1Fit {
        subjects,
        pooled,
        decomposition,
        diagnostics,
        kept,
    } = stage1;
    let f_kept = decomposition.f_hat.select(Axis(1), &kept);

    let (maps, rootmap) = (|| {
        let series = neighborhood_from_smoothed(pooled.raw.view(), pooled.smoothed.clone(), pooled.center_weights.clone())?;
        let maps = correlation_maps_from_series(f_kept.view(), &series, &pooled.spans, cfg.rootmap.residualization)?;
        let graph = AdjacencyGraph::build(grid);
        let laplacian = build_laplacian(grid, &graph);
        let rootmap = select_lambdas(
            maps.target.view(),
            &laplacian,
            &graph,
            &cfg.rootmap.lambda1_grid,
            &cfg.rootmap.lambda2_grid,
            &cfg.rootmap.solver,
        )?;
        Ok((maps, rootmap))
    })()
    .map_err(|e: Error| e.in_stage("rootmap"))?;

    let drivers = aggregate(
        f_kept.view(),
        &pooled.spans,
        cfg.axis.aggregator,
        cfg.axis.band_hz,
        cfg.axis.tr_seconds,
    )
    .map_err(|e| e.in_stage("axis"))?;
    Ok(SourceFit {
        subjects,
        pooled,
        decomposition,
        diagnostics,
        kept,
        maps,
        rootmap,
        drivers,
    })
}

pub fn axis_options(cfg: &AxisConfig, ablation: Ablation, q: usize) -> AxisOptions {
    AxisOptions {
        max_support: cfg.max_support,
        exhaustive_limit: cfg.exhaustive_limit,
        fixed_alpha: if ablation.uses_axis() {
            None
        } else {
            Some(Array1::from_elem(q, 1.0 / q as f64))
        },
        ..AxisOptions::default()
    }
}

#[derive(Debug, Clone)]
pub struct AxisFit {
    pub selection: Lambda3Selection,
    pub axes: AxesFit,
}

/// λ3 by cross-validation, then the axes at the selected penalty.
pub fn fit_stage3(s: ArrayView2<f64>, y: ArrayView2<f64>, cfg: &AxisConfig, ablation: Ablation, seed: u64) -> Result<AxisFit> {
    let opts = axis_options(cfg, ablation, y.ncols());
    let run = || -> Result<AxisFit> {
        let selection = select_lambda3(s, y, &cfg.lambda3_grid, cfg.cv_folds, seed, &opts)?;
        let axes = fit_axes_with(s, y, selection.lambda3, cfg.n_axes.max(1), &opts)?;
        Ok(AxisFit { selection, axes })
    };
    run().map_err(|e| e.in_stage("axis"))
}

/// Unit-norm effect maps for the given ablation: `ζ` or `η`, rows following
/// the kept components.
pub fn effect_maps(fit: &SourceFit, ablation: Ablation) -> Array2<f64> {
    if ablation.uses_rootmap() {
        fit.rootmap.zeta.clone()
    } else {
        fit.maps.eta.clone()
    }
}

/// Applies a fitted decomposition to held-out subjects and aggregates their
/// drivers, standardized with the fitting subjects' column moments.
pub fn held_out_drivers(prepared: &PreparedCohort, fit: &SourceFit, subjects: &[usize], cfg: &AxisConfig) -> Result<Array2<f64>> {
    let mut blocks = Vec::with_capacity(subjects.len());
    for &i in subjects {
        let f = fit.decomposition.transform(prepared.smoothed[i].view());
        blocks.push(f.select(Axis(1), &fit.kept));
    }
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut pooled = Array2::zeros((total, fit.kept.len()));
    let mut spans = Vec::new();
    let mut start = 0;
    for b in &blocks {
        pooled.slice_mut(ndarray::s![start..start + b.nrows(), ..]).assign(b);
        spans.push(start..start + b.nrows());
        start += b.nrows();
    }
    let held = aggregate(pooled.view(), &spans, cfg.aggregator, cfg.band_hz, cfg.tr_seconds)?;
    let raw = &fit.drivers.raw;
    let n = raw.nrows() as f64;
    let mut out = held.raw.clone();
    for j in 0..raw.ncols() {
        let col = raw.column(j);
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        let constant = fit.drivers.constant_columns.contains(&j);
        out.column_mut(j)
            .mapv_inplace(|v| if constant || sd == 0.0 { 0.0 } else { (v - m) / sd });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{sample_ground_truth, simulate_cohort, SubjectParams, TruthParams};

    fn small_cohort() -> (CohortData, RunConfig) {
        let grid = VoxelGrid::full([8, 8, 8], 3.0).unwrap();
        let params = TruthParams {
            n_sources: 2,
            n_symptoms: 3,
            ..Default::default()
        };
        let truth = sample_ground_truth(&grid, &params, 3).unwrap();
        let cohort = simulate_cohort(&truth, &grid, &SubjectParams::default(), 12, 80, 4).unwrap();
        let mut cfg = RunConfig::default();
        cfg.ica.n_components = 2;
        cfg.rootmap.lambda1_grid = vec![0.1, 0.01];
        cfg.rootmap.lambda2_grid = vec![0.1, 0.01];
        (CohortData::from_cohort(&cohort, &grid), cfg)
    }

    #[test]
    fn stages_fit_end_to_end() {
        let (data, cfg) = small_cohort();
        let prepared = prepare(&data, &cfg).unwrap();
        let all: Vec<usize> = (0..data.n()).collect();
        let fit = fit_sources(&prepared, &all, &cfg, 1).unwrap();
        assert_eq!(fit.rootmap.zeta.nrows(), fit.kept.len());
        assert_eq!(fit.drivers.raw.dim(), (12, fit.kept.len()));
        // Held-out drivers of the fitting subjects match the in-sample ones.
        let held = held_out_drivers(&prepared, &fit, &all, &cfg.axis).unwrap();
        for (a, b) in held.iter().zip(fit.drivers.standardized.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
        let axis = fit_stage3(fit.drivers.standardized.view(), prepared.y.view(), &cfg.axis, Ablation::NoAxis, 2).unwrap();
        let alpha = &axis.axes.axes[0].alpha;
        assert!(alpha.iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let (data, mut cfg) = small_cohort();
        cfg.ica.n_components = 5000;
        let prepared = prepare(&data, &cfg).unwrap();
        let err = fit_sources(&prepared, &[0, 1], &cfg, 1).unwrap_err();
        assert!(err.to_string().starts_with("decomposition stage failed"), "{err}");
        cfg.ica.n_components = 2;
        cfg.preprocess.smoothing_fwhm_mm = 0.0;
        let prepared = prepare(&data, &cfg).unwrap();
        let err = fit_sources(&prepared, &[0, 1, 2], &cfg, 1).unwrap_err();
        assert!(err.to_string().starts_with("rootmap stage failed: kernel degenerate"), "{err}");
    }
}
