//! The four subcommands and the artifacts they read and write.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use source_core::config::{Ablation, IcaConfig, RunConfig};
use source_core::decomposition::{ComponentDiagnostics, Convergence, FilterOptions, PreprocessConfig};
use source_core::evaluation::{
    auc, bootstrap_prepared, compactness, correlation_density, correlation_metric, match_sources, mean_ci, normalize_rows,
    BootstrapReport, MeanCi, ResampleResult,
};
use source_core::grid::VoxelGrid;
use source_core::linalg::center_columns;
use source_core::pipeline::{effect_maps, finish_sources, fit_stage1, fit_stage3, prepare, AxisFit, SourceFit, Stage1Fit};
use source_core::rootmap::{Residualization, RhoEntry};
use source_core::simulator::{sample_ground_truth, simulate_cohort};
use source_core::{Error, Result};

use crate::cohort::{read_cohort, write_cohort, write_grid, write_json};
use crate::format::{read_n, write_tensors, Tensor};

pub const FAILED_MARKER: &str = "FAILED";

/// Reads a config file, or the defaults when no path is given. Parse errors
/// name the file, line and column.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            RunConfig::from_json(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", p.display())))
        }
    }
}

/// Writes a simulated cohort; returns the number of subjects.
pub fn cmd_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<usize> {
    let sim = &cfg.simulation;
    let grid = VoxelGrid::full(sim.dims, sim.voxel_size_mm)?;
    let truth = sample_ground_truth(&grid, &sim.truth, cfg.seed)?;
    let cohort = simulate_cohort(&truth, &grid, &sim.subject, sim.n_subjects, sim.n_timepoints, cfg.seed)?;
    write_cohort(out_dir, &cohort, &grid, sim, cfg.seed)?;
    Ok(cohort.n())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompMeta {
    pub n_components: usize,
    pub kept: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    pub convergence: Convergence,
    pub diagnostics: Vec<ComponentDiagnostics>,
    pub preprocess: PreprocessConfig,
    pub ica: IcaConfig,
    pub filter: FilterOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub component: usize,
    pub sweeps: usize,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootmapMeta {
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    pub residualization: Residualization,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rho: f64,
    pub roughness: Vec<f64>,
    pub diffuseness: Vec<f64>,
    pub table: Vec<RhoEntry>,
    pub solver: Vec<SolverSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymptomWeight {
    pub name: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisDoc {
    pub deflation_round: usize,
    pub lambda3: f64,
    pub alpha: Vec<SymptomWeight>,
    /// Positions in the kept-component list.
    pub support: Vec<usize>,
    /// One value per kept component.
    pub beta: Vec<f64>,
    pub train_correlation: f64,
    pub validation_correlation: Option<f64>,
    pub excluded_symptoms: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxesDoc {
    pub ablation: Ablation,
    /// Decomposition component index of each driver column.
    pub components: Vec<usize>,
    pub lambda3: f64,
    pub lambda3_table: Vec<(f64, f64)>,
    pub stop_reason: Option<String>,
    pub axes: Vec<AxisDoc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InSampleMetrics {
    pub correlation: f64,
    pub correlation_density: Option<f64>,
    pub compactness: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedPenalties {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub label: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub selected: SelectedPenalties,
    pub in_sample: InSampleMetrics,
    pub bootstrap: BootstrapReport,
}

/// What `run` prints on success.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ablation: Ablation,
    pub correlation: MeanCi,
    pub correlation_density: MeanCi,
    pub compactness: MeanCi,
    pub selected: SelectedPenalties,
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "ablation={} correlation={:.4}±{:.4} cd={:.4}±{:.4} compactness={:.4}±{:.4} lambda1={} lambda2={} lambda3={}",
            self.ablation,
            self.correlation.mean,
            self.correlation.half_width,
            self.correlation_density.mean,
            self.correlation_density.half_width,
            self.compactness.mean,
            self.compactness.half_width,
            self.selected.lambda1,
            self.selected.lambda2,
            self.selected.lambda3
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub ablation: Ablation,
    pub refit_all: bool,
}

pub fn label(ablation: Ablation) -> String {
    match ablation {
        Ablation::None => "full".into(),
        a => format!("ablation:{a}"),
    }
}

/// Runs all three stages and the bootstrap on a cohort directory. On failure
/// the artifacts written so far are kept next to a `FAILED` marker.
pub fn cmd_run(cfg: &RunConfig, cohort_dir: &Path, out_dir: &Path, opts: RunOptions) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker)?;
    }
    let mut cfg = cfg.clone();
    cfg.bootstrap.refit_all |= opts.refit_all;
    let result = run_stages(&cfg, cohort_dir, out_dir, opts.ablation);
    if let Err(e) = &result {
        fs::write(&marker, format!("{e}\n"))?;
    }
    result
}

fn run_stages(cfg: &RunConfig, cohort_dir: &Path, out: &Path, ablation: Ablation) -> Result<RunSummary> {
    write_json(&out.join("config.json"), cfg)?;
    let cohort = read_cohort(cohort_dir)?;
    write_grid(&out.join("grid.json"), &cohort.data.grid)?;
    let prepared = prepare(&cohort.data, cfg)?;
    let all: Vec<usize> = (0..prepared.n()).collect();
    let stage1 = fit_stage1(&prepared, &all, cfg, cfg.seed)?;
    write_decomposition(out, &stage1, cfg)?;
    let fit = finish_sources(stage1, &prepared.grid, cfg)?;
    write_rootmap(out, &fit, cfg)?;
    write_tensors(
        &out.join("drivers.bin"),
        &[Tensor::from_array2(&fit.drivers.raw), Tensor::from_array2(&fit.drivers.standardized)],
    )?;

    let s = fit.drivers.standardized.view();
    let axis_fit = fit_stage3(s, prepared.y.view(), &cfg.axis, ablation, cfg.seed)?;
    let axes = axes_doc(&axis_fit, &fit, cfg, ablation, prepared.y.ncols());
    write_json(&out.join("axes.json"), &axes)?;

    let mut chi = effect_maps(&fit, ablation);
    normalize_rows(&mut chi);
    let in_sample = in_sample_metrics(s.to_owned(), &prepared.y, &chi, &axes, &prepared.grid)?;
    let bootstrap = bootstrap_prepared(&prepared, &fit, cfg, ablation, cfg.seed).map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => e.in_stage("evaluation"),
    })?;
    let selected = SelectedPenalties {
        lambda1: fit.rootmap.lambda1,
        lambda2: fit.rootmap.lambda2,
        lambda3: axis_fit.selection.lambda3,
    };
    let summary = RunSummary {
        ablation,
        correlation: bootstrap.summary.correlation,
        correlation_density: bootstrap.summary.correlation_density,
        compactness: bootstrap.summary.compactness,
        selected,
    };
    write_report_csv(&out.join("report.csv"), &bootstrap)?;
    let report = RunReport {
        label: label(ablation),
        ablation,
        seed: cfg.seed,
        selected,
        in_sample,
        bootstrap,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(summary)
}

fn write_decomposition(out: &Path, fit: &Stage1Fit, cfg: &RunConfig) -> Result<()> {
    let d = &fit.decomposition;
    write_tensors(
        &out.join("decomp.bin"),
        &[Tensor::from_array2(&d.f_hat), Tensor::from_array2(&d.m_hat), Tensor::from_bools(&d.kept)],
    )?;
    let meta = DecompMeta {
        n_components: d.k(),
        kept: fit.kept.clone(),
        spans: d.spans.iter().map(|r| (r.start, r.end)).collect(),
        convergence: d.convergence.clone(),
        diagnostics: fit.diagnostics.clone(),
        preprocess: cfg.preprocess.clone(),
        ica: cfg.ica.clone(),
        filter: cfg.filter.clone(),
    };
    write_json(&out.join("decomp.json"), &meta)
}

fn write_rootmap(out: &Path, fit: &SourceFit, cfg: &RunConfig) -> Result<()> {
    let r = &fit.rootmap;
    write_tensors(
        &out.join("rootmap.bin"),
        &[
            Tensor::from_array2(&r.zeta),
            Tensor::from_array1(&Array1::from(r.roughness.clone())),
            Tensor::from_array1(&Array1::from(r.diffuseness.clone())),
            Tensor::from_array2(&fit.maps.eta),
            Tensor::from_array2(&fit.maps.theta),
        ],
    )?;
    let meta = RootmapMeta {
        lambda1_grid: cfg.rootmap.lambda1_grid.clone(),
        lambda2_grid: cfg.rootmap.lambda2_grid.clone(),
        residualization: cfg.rootmap.residualization,
        lambda1: r.lambda1,
        lambda2: r.lambda2,
        rho: r.rho,
        roughness: r.roughness.clone(),
        diffuseness: r.diffuseness.clone(),
        table: r.table.clone(),
        solver: r
            .solver_traces
            .iter()
            .zip(&fit.kept)
            .map(|(t, &c)| SolverSummary {
                component: c,
                sweeps: t.len().saturating_sub(1),
                initial_objective: t.first().copied(),
                final_objective: t.last().copied(),
            })
            .collect(),
    };
    write_json(&out.join("rootmap.json"), &meta)
}

fn axes_doc(axis_fit: &AxisFit, fit: &SourceFit, cfg: &RunConfig, ablation: Ablation, q: usize) -> AxesDoc {
    let names: Vec<String> = match &cfg.axis.symptom_names {
        Some(n) if n.len() == q => n.clone(),
        _ => (0..q).map(|i| format!("item{}", i + 1)).collect(),
    };
    let cv = axis_fit
        .selection
        .table
        .iter()
        .find(|(l, _)| *l == axis_fit.selection.lambda3)
        .map(|&(_, c)| c);
    AxesDoc {
        ablation,
        components: fit.kept.clone(),
        lambda3: axis_fit.selection.lambda3,
        lambda3_table: axis_fit.selection.table.clone(),
        stop_reason: axis_fit.axes.stop_reason.clone(),
        axes: axis_fit
            .axes
            .axes
            .iter()
            .enumerate()
            .map(|(i, a)| AxisDoc {
                deflation_round: a.deflation_round,
                lambda3: a.lambda3,
                alpha: names
                    .iter()
                    .zip(a.alpha.iter())
                    .map(|(n, &w)| SymptomWeight { name: n.clone(), weight: w })
                    .collect(),
                support: a.support.clone(),
                beta: a.beta.to_vec(),
                train_correlation: a.train_correlation,
                validation_correlation: a.validation_correlation.or(if i == 0 { cv } else { None }),
                excluded_symptoms: a.excluded_symptoms.clone(),
            })
            .collect(),
    }
}

fn in_sample_metrics(
    s: Array2<f64>,
    y: &Array2<f64>,
    chi: &Array2<f64>,
    axes: &AxesDoc,
    grid: &VoxelGrid,
) -> Result<InSampleMetrics> {
    let first = axes
        .axes
        .first()
        .ok_or_else(|| Error::InvalidArgument("no symptom axis was fitted".into()))?;
    let beta = Array1::from(first.beta.clone());
    let alpha = Array1::from_iter(first.alpha.iter().map(|w| w.weight));
    if alpha.len() != y.ncols() || beta.len() != s.ncols() || chi.nrows() != beta.len() {
        return Err(Error::DimensionMismatch("saved axes do not fit the driver and symptom matrices".into()));
    }
    let correlation = correlation_metric(s.view(), beta.view(), y.dot(&alpha).view())?;
    Ok(InSampleMetrics {
        correlation,
        correlation_density: correlation_density(correlation, chi.view(), beta.view()).ok(),
        compactness: compactness(chi.view(), beta.view(), grid).ok(),
    })
}

fn csv_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn write_report_csv(path: &Path, report: &BootstrapReport) -> Result<()> {
    let mut text = String::from("resample,correlation,correlation_density,compactness,lambda3,support_size,in_bag,out_of_bag\n");
    for (i, r) in report.resamples.iter().enumerate() {
        text.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            r.correlation,
            csv_field(r.correlation_density),
            csv_field(r.compactness),
            r.lambda3,
            r.support.len(),
            r.in_bag,
            r.out_of_bag
        ));
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceScore {
    pub source: usize,
    /// Decomposition component matched to this source.
    pub component: Option<usize>,
    pub abs_correlation: Option<f64>,
    pub auc_zeta: Option<f64>,
    pub auc_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub sources: Vec<SourceScore>,
    pub mean_auc_zeta: Option<f64>,
    pub mean_auc_eta: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// AUC of `|ζ|` and `|η|` against the true root voxels, after matching the
/// kept components to the true sources by absolute correlation.
pub fn score_maps(
    f_true: &Array2<f64>,
    f_hat_kept: &Array2<f64>,
    kept: &[usize],
    zeta: &Array2<f64>,
    eta: &Array2<f64>,
    roots: &[BTreeSet<usize>],
) -> ScoreReport {
    let (cor, matching) = match_sources(f_true.view(), f_hat_kept.view());
    let sources: Vec<SourceScore> = matching
        .iter()
        .enumerate()
        .map(|(j, m)| match *m {
            Some(c) => SourceScore {
                source: j,
                component: Some(kept[c]),
                abs_correlation: Some(cor[[j, c]]),
                auc_zeta: auc(zeta.row(c).mapv(f64::abs).view(), &roots[j]),
                auc_eta: auc(eta.row(c).mapv(f64::abs).view(), &roots[j]),
            },
            None => SourceScore {
                source: j,
                component: None,
                abs_correlation: None,
                auc_zeta: None,
                auc_eta: None,
            },
        })
        .collect();
    ScoreReport {
        mean_auc_zeta: mean_of(sources.iter().map(|s| s.auc_zeta)),
        mean_auc_eta: mean_of(sources.iter().map(|s| s.auc_eta)),
        sources,
    }
}

pub fn cmd_score(run_dir: &Path, cohort_dir: &Path) -> Result<ScoreReport> {
    let cohort = read_cohort(cohort_dir)?;
    let truth = cohort
        .truth
        .as_ref()
        .ok_or_else(|| Error::NotSimulated(format!("{} has no truth.bin", cohort_dir.display())))?;
    let f_true = cohort
        .f_true
        .as_ref()
        .ok_or_else(|| Error::NotSimulated(format!("{} has no true source series", cohort_dir.display())))?;
    let meta: DecompMeta = read_json(&run_dir.join("decomp.json"))?;
    let decomp = read_n(&run_dir.join("decomp.bin"), 3)?;
    let f_hat = decomp[0].to_array2()?;
    let rootmap = read_n(&run_dir.join("rootmap.bin"), 5)?;
    let zeta = rootmap[0].to_array2()?;
    let eta = rootmap[3].to_array2()?;

    let total: usize = f_true.iter().map(|f| f.nrows()).sum();
    if total != f_hat.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "run has {} pooled time points, cohort has {total}",
            f_hat.nrows()
        )));
    }
    let k = truth.gamma.nrows();
    let mut pooled = Array2::zeros((total, k));
    let mut start = 0;
    for f in f_true {
        let mut block = f.clone();
        center_columns(&mut block);
        pooled.slice_mut(ndarray::s![start..start + f.nrows(), ..]).assign(&block);
        start += f.nrows();
    }
    let kept_hat = f_hat.select(Axis(1), &meta.kept);
    Ok(score_maps(&pooled, &kept_hat, &meta.kept, &zeta, &eta, &truth.root_voxels()))
}

/// The parts of report.json that `metrics` needs. Summary fields may hold
/// `null` for undefined means, so they are not read back.
#[derive(Deserialize)]
struct SavedReport {
    ablation: Ablation,
    bootstrap: SavedBootstrap,
}

#[derive(Deserialize)]
struct SavedBootstrap {
    resamples: Vec<ResampleResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ablation: Ablation,
    pub in_sample: InSampleMetrics,
    pub correlation: MeanCi,
    pub correlation_density: MeanCi,
    pub compactness: MeanCi,
}

/// Recomputes the in-sample metrics from the saved drivers, axes and maps,
/// and re-summarizes the saved bootstrap resamples.
pub fn cmd_metrics(run_dir: &Path, cohort_dir: &Path) -> Result<MetricsReport> {
    let cohort = read_cohort(cohort_dir)?;
    let report: SavedReport = read_json(&run_dir.join("report.json"))?;
    let axes: AxesDoc = read_json(&run_dir.join("axes.json"))?;
    let drivers = read_n(&run_dir.join("drivers.bin"), 2)?;
    let s = drivers[1].to_array2()?;
    let rootmap = read_n(&run_dir.join("rootmap.bin"), 5)?;
    let mut chi = if report.ablation.uses_rootmap() {
        rootmap[0].to_array2()?
    } else {
        rootmap[3].to_array2()?
    };
    normalize_rows(&mut chi);
    let in_sample = in_sample_metrics(s, &cohort.data.y, &chi, &axes, &cohort.data.grid)?;
    let col = |f: &dyn Fn(&ResampleResult) -> Option<f64>| -> Vec<f64> {
        report.bootstrap.resamples.iter().map(|r| f(r).unwrap_or(f64::NAN)).collect()
    };
    Ok(MetricsReport {
        ablation: report.ablation,
        in_sample,
        correlation: mean_ci(&col(&|r| Some(r.correlation))),
        correlation_density: mean_ci(&col(&|r| r.correlation_density)),
        compactness: mean_ci(&col(&|r| r.compactness)),
    })
}
