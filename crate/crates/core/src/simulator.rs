//! Synthetic cohorts from a bilevel linear SCM with known ground truth.
//!
//! Within a subject, every time point solves
//! `X(t) = X(t) B + F(t) Γ + δ + ε(t)` for the voxel row `X(t)`, where the
//! latent sources `F(t)` are independent and non-Gaussian. Between
//! subjects, symptoms are generated from a per-subject voxel summary `X̄`
//! as `Y = X̄ Φ · s_y + E_Y`.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::axis::{aggregate_series, Aggregator};
use crate::error::{Error, Result};
use crate::grid::{AdjacencyGraph, VoxelGrid};
use crate::linalg::CsrMatrix;

/// Non-Gaussian source families, each drawn with zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SourceDistribution {
    Laplace,
    Uniform,
    StudentT { df: f64 },
}

impl SourceDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SourceDistribution::StudentT { df } if !(df > 4.0) => Err(Error::InvalidArgument(format!(
                "student-t sources need df > 4, got {df}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SourceDistribution::Laplace => {
                let u: f64 = rng.random::<f64>() - 0.5;
                let b = std::f64::consts::FRAC_1_SQRT_2;
                -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
            SourceDistribution::Uniform => {
                let h = 3f64.sqrt();
                rng.random_range(-h..h)
            }
            SourceDistribution::StudentT { df } => {
                let t = StudentT::new(df).expect("validated df");
                t.sample(rng) * ((df - 2.0) / df).sqrt()
            }
        }
    }
}

/// How source families are assigned to the `K` sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourcePlan {
    Laplace,
    Uniform,
    StudentT,
    /// Cycles laplace, uniform, student-t (df 8).
    Mixed,
}

impl SourcePlan {
    fn families(self, k: usize) -> Vec<SourceDistribution> {
        let t = SourceDistribution::StudentT { df: 8.0 };
        (0..k)
            .map(|j| match self {
                SourcePlan::Laplace => SourceDistribution::Laplace,
                SourcePlan::Uniform => SourceDistribution::Uniform,
                SourcePlan::StudentT => t,
                SourcePlan::Mixed => [SourceDistribution::Laplace, SourceDistribution::Uniform, t][j % 3],
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthParams {
    pub n_sources: usize,
    pub n_symptoms: usize,
    pub blob_radius: usize,
    pub b_density: f64,
    pub b_scale: f64,
    /// Largest Manhattan distance between voxels joined by a B entry.
    pub b_max_distance: usize,
    /// Upper bound enforced on ρ(|B|) by rescaling.
    pub target_radius: f64,
    pub phi_density: f64,
    pub sources: SourcePlan,
    pub noise_sd: f64,
}

impl Default for TruthParams {
    fn default() -> Self {
        TruthParams {
            n_sources: 3,
            n_symptoms: 4,
            blob_radius: 1,
            b_density: 0.05,
            b_scale: 0.5,
            b_max_distance: 2,
            target_radius: 0.8,
            phi_density: 0.3,
            sources: SourcePlan::Laplace,
            noise_sd: 0.05,
        }
    }
}

/// Hidden truth of a simulated cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmGroundTruth {
    /// `K × p` direct source-to-voxel effects.
    pub gamma: Array2<f64>,
    /// `p × p` voxel propagation; `B[u, v]` is the effect of voxel `u` on `v`.
    pub b: CsrMatrix,
    /// `p × q` voxel-to-symptom effects.
    pub phi: Array2<f64>,
    pub delta: Array1<f64>,
    pub source_dist: Vec<SourceDistribution>,
    pub noise_sd: f64,
    /// Collatz–Wielandt upper bound on ρ(|B|), hence on ρ(B).
    pub spectral_bound: f64,
}

impl ScmGroundTruth {
    pub fn k(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn p(&self) -> usize {
        self.gamma.ncols()
    }

    pub fn q(&self) -> usize {
        self.phi.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (k, p) = self.gamma.dim();
        if self.b.n_rows != p || self.b.n_cols != p || self.phi.nrows() != p || self.delta.len() != p {
            return Err(Error::DimensionMismatch("ground-truth blocks disagree on p".into()));
        }
        if self.source_dist.len() != k {
            return Err(Error::DimensionMismatch("one source distribution per source".into()));
        }
        for d in &self.source_dist {
            d.validate()?;
        }
        if !(self.spectral_bound < 1.0) {
            return Err(Error::NotContractive(format!(
                "spectral radius bound {} is not below 1",
                self.spectral_bound
            )));
        }
        Ok(())
    }
}

/// Samples `Γ`, `B`, `Φ`, `δ` and the source families.
pub fn sample_ground_truth(grid: &VoxelGrid, params: &TruthParams, seed: u64) -> Result<ScmGroundTruth> {
    let k = params.n_sources;
    if k == 0 {
        return Err(Error::InvalidArgument("need at least one source".into()));
    }
    if params.n_symptoms == 0 {
        return Err(Error::InvalidArgument("need at least one symptom".into()));
    }
    if !(0.0..=1.0).contains(&params.b_density) || !(0.0..=1.0).contains(&params.phi_density) {
        return Err(Error::InvalidArgument("densities must lie in [0, 1]".into()));
    }
    if !(params.target_radius > 0.0 && params.target_radius < 1.0) {
        return Err(Error::InvalidArgument("target spectral radius must lie in (0, 1)".into()));
    }
    if !(params.noise_sd >= 0.0) {
        return Err(Error::InvalidArgument("noise sd must be nonnegative".into()));
    }
    let source_dist = params.sources.families(k);
    let p = grid.p();
    let graph = AdjacencyGraph::build(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Blob centres, pairwise Manhattan distance ≥ 2r + 1.
    let min_sep = 2 * params.blob_radius + 1;
    // Centres whose whole blob stays off the boundary shell are tried first
    // so that true maps do not look like edge artefacts.
    let r = params.blob_radius;
    let full_ball = (2 * r + 1) * (2 * r * r + 2 * r + 3) / 3;
    let (mut order, mut edge): (Vec<usize>, Vec<usize>) = (0..p).partition(|&v| {
        let ball = graph.ball(v, r);
        ball.len() == full_ball && ball.iter().all(|&(u, _)| graph.degree(u) == 6)
    });
    shuffle(&mut order, &mut rng);
    shuffle(&mut edge, &mut rng);
    order.extend(edge);
    let mut centres: Vec<usize> = Vec::with_capacity(k);
    for &v in &order {
        if centres.iter().all(|&c| grid.manhattan(c, v) >= min_sep) {
            centres.push(v);
            if centres.len() == k {
                break;
            }
        }
    }
    if centres.len() < k {
        return Err(Error::GridTooSmall {
            k,
            placed: centres.len(),
        });
    }

    let mut gamma = Array2::zeros((k, p));
    for (j, &c) in centres.iter().enumerate() {
        let amp = rng.random_range(0.8..1.2);
        for (v, d) in graph.ball(c, params.blob_radius) {
            gamma[[j, v]] = amp * (1.0 - d as f64 / (params.blob_radius as f64 + 1.0));
        }
    }

    let mut triplets = Vec::new();
    let reach = params.b_max_distance as i64;
    for u in 0..p {
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let d = dx.abs() + dy.abs() + dz.abs();
                    if d == 0 || d > reach {
                        continue;
                    }
                    let Some(v) = grid.offset(u, [dx, dy, dz]) else {
                        continue;
                    };
                    if rng.random::<f64>() < params.b_density {
                        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                        triplets.push((u, v, params.b_scale * sign * rng.random_range(0.5..1.0)));
                    }
                }
            }
        }
    }
    let mut b = CsrMatrix::from_triplets(p, p, &triplets);
    let mut spectral_bound = collatz_upper_bound(&b.abs());
    if spectral_bound > params.target_radius {
        b.scale(params.target_radius / spectral_bound);
        spectral_bound = collatz_upper_bound(&b.abs()).min(params.target_radius);
    }

    // Φ draws only from voxels reachable from some direct-effect support.
    let mut downstream = vec![false; p];
    let mut stack: Vec<usize> = Vec::new();
    for j in 0..k {
        for v in 0..p {
            if gamma[[j, v]] != 0.0 && !downstream[v] {
                downstream[v] = true;
                stack.push(v);
            }
        }
    }
    while let Some(u) = stack.pop() {
        for (v, _) in b.row(u) {
            if !downstream[v] {
                downstream[v] = true;
                stack.push(v);
            }
        }
    }
    let candidates: Vec<usize> = (0..p).filter(|&v| downstream[v]).collect();
    let q = params.n_symptoms;
    let mut phi = Array2::zeros((p, q));
    for col in 0..q {
        let mut any = false;
        for &v in &candidates {
            if rng.random::<f64>() < params.phi_density {
                phi[[v, col]] = rng.random_range(0.5..1.5);
                any = true;
            }
        }
        if !any {
            let v = candidates[rng.random_range(0..candidates.len())];
            phi[[v, col]] = rng.random_range(0.5..1.5);
        }
    }

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let delta = Array1::from_iter((0..p).map(|_| normal.sample(&mut rng)));

    let truth = ScmGroundTruth {
        gamma,
        b,
        phi,
        delta,
        source_dist,
        noise_sd: params.noise_sd,
        spectral_bound,
    };
    truth.validate()?;
    Ok(truth)
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Upper bound on the Perron root of a nonnegative matrix from power
/// iteration on `A + I`: for any positive `x`, `ρ(A) ≤ maxᵢ (Ax)ᵢ / xᵢ`.
pub fn collatz_upper_bound(a: &CsrMatrix) -> f64 {
    let p = a.n_rows;
    if a.nnz() == 0 {
        return 0.0;
    }
    let mut x = Array1::from_elem(p, 1.0);
    let mut best = f64::INFINITY;
    for _ in 0..5000 {
        let y = a.mul_vec(x.view()) + &x;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (yi, xi) in y.iter().zip(x.iter()) {
            let r = yi / xi;
            lo = lo.min(r);
            hi = hi.max(r);
        }
        best = best.min(hi - 1.0);
        if hi - lo <= 1e-12 * hi {
            break;
        }
        let norm = y.iter().cloned().fold(0.0, f64::max);
        x = y / norm;
    }
    best.max(0.0)
}

/// Solves `X (I − B) = R` row-wise by the Neumann fixed point
/// `X ← R + X B`.
pub fn solve_propagation(b: &CsrMatrix, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let scale = rhs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut x = rhs.to_owned();
    if b.nnz() == 0 {
        return Ok(x);
    }
    for _ in 0..10_000 {
        let next = &rhs + &b.right_mul_rows(x.view());
        let change = next
            .iter()
            .zip(x.iter())
            .fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
        if !change.is_finite() {
            return Err(Error::NotContractive("propagation solve diverged".into()));
        }
        x = next;
        if change <= 1e-15 * scale {
            return Ok(x);
        }
    }
    Err(Error::NotContractive(
        "propagation solve did not converge in 10000 sweeps".into(),
    ))
}

/// Mixing template `M = Γ (I − B)⁻¹`.
pub fn mixing_template(truth: &ScmGroundTruth) -> Result<Array2<f64>> {
    solve_propagation(&truth.b, truth.gamma.view())
}

/// Root-causal voxel sets: the support of each row of `Γ`.
pub fn oracle_root_voxels(truth: &ScmGroundTruth) -> Vec<BTreeSet<usize>> {
    truth
        .gamma
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Per-subject voxel summary that feeds the symptoms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymptomSummary {
    /// `X̄ = (S Γ + E_X)(I − B)⁻¹` with `S` the subject's log-variance drivers.
    BetweenSubjectScm,
    /// Time mean of the subject's voxel series.
    TimeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubjectParams {
    pub summary: SymptomSummary,
    /// `s_y` in `Y = X̄ Φ s_y + E_Y`.
    pub symptom_scale: f64,
    pub symptom_noise_sd: f64,
    /// Sd of `E_X` for the between-subject summary.
    pub summary_noise_sd: f64,
    /// Sd of the per-subject log source amplitude (0 keeps unit scalings).
    pub amplitude_log_sd: f64,
    /// Keep `ε` in the recording for residual checks.
    pub record_noise: bool,
}

impl Default for SubjectParams {
    fn default() -> Self {
        SubjectParams {
            summary: SymptomSummary::BetweenSubjectScm,
            symptom_scale: 1.0,
            symptom_noise_sd: 0.1,
            summary_noise_sd: 0.0,
            amplitude_log_sd: 0.0,
            record_noise: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecording {
    pub subject_id: usize,
    /// `T × p` voxel series.
    pub x: Array2<f64>,
    /// `q` symptom scores.
    pub y: Array1<f64>,
    /// `T × K` latent sources (oracle scoring only).
    pub f_true: Array2<f64>,
    /// Per-subject source means `m_i`.
    pub means: Array1<f64>,
    pub amplitudes: Array1<f64>,
    pub noise: Option<Array2<f64>>,
}

impl SubjectRecording {
    pub fn t(&self) -> usize {
        self.x.nrows()
    }
}

fn subject_rng(seed: u64, subject_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject_id as u64 + 1);
    rng
}

pub fn simulate_subject(
    truth: &ScmGroundTruth,
    grid: &VoxelGrid,
    params: &SubjectParams,
    t_len: usize,
    subject_id: usize,
    seed: u64,
) -> Result<SubjectRecording> {
    if t_len < 2 {
        return Err(Error::InvalidArgument("need at least 2 time points".into()));
    }
    if grid.p() != truth.p() {
        return Err(Error::DimensionMismatch(format!(
            "grid has {} voxels, truth has {}",
            grid.p(),
            truth.p()
        )));
    }
    truth.validate()?;
    let (k, p) = truth.gamma.dim();
    let mut rng = subject_rng(seed, subject_id);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let means = Array1::from_iter((0..k).map(|_| normal.sample(&mut rng)));
    let amplitudes =
        Array1::from_iter((0..k).map(|_| (params.amplitude_log_sd * normal.sample(&mut rng)).exp()));
    let mut f_true = Array2::zeros((t_len, k));
    for t in 0..t_len {
        for j in 0..k {
            f_true[[t, j]] = means[j] + amplitudes[j] * truth.source_dist[j].sample(&mut rng);
        }
    }
    let mut noise = Array2::zeros((t_len, p));
    if truth.noise_sd > 0.0 {
        noise.mapv_inplace(|_| truth.noise_sd * normal.sample(&mut rng));
    }
    let mut rhs = f_true.dot(&truth.gamma) + &noise;
    rhs += &truth.delta;
    let x = solve_propagation(&truth.b, rhs.view())?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotContractive("non-finite voxel series".into()));
    }

    let summary = match params.summary {
        SymptomSummary::TimeMean => x.mean_axis(Axis(0)).expect("T ≥ 2"),
        SymptomSummary::BetweenSubjectScm => {
            let mut drivers = Array1::zeros(k);
            for j in 0..k {
                drivers[j] = aggregate_series(Aggregator::LogVar, f_true.column(j), None, None)
                    .map_err(|_| Error::DegenerateDriver { subject: subject_id, component: j })?;
            }
            let mut row = drivers.dot(&truth.gamma);
            if params.summary_noise_sd > 0.0 {
                row.mapv_inplace(|v| v + params.summary_noise_sd * normal.sample(&mut rng));
            }
            let row = row.insert_axis(Axis(0));
            solve_propagation(&truth.b, row.view())?.row(0).to_owned()
        }
    };
    let mut y = summary.dot(&truth.phi) * params.symptom_scale;
    if params.symptom_noise_sd > 0.0 {
        y.mapv_inplace(|v| v + params.symptom_noise_sd * normal.sample(&mut rng));
    }

    Ok(SubjectRecording {
        subject_id,
        x,
        y,
        f_true,
        means,
        amplitudes,
        noise: params.record_noise.then_some(noise),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub recordings: Vec<SubjectRecording>,
    /// `n × K` log-variance drivers of the true sources.
    pub s_true: Array2<f64>,
    pub truth: ScmGroundTruth,
    pub seed: u64,
}

impl Cohort {
    pub fn n(&self) -> usize {
        self.recordings.len()
    }

    /// Symptom matrix, one row per subject.
    pub fn y_matrix(&self) -> Array2<f64> {
        let q = self.truth.q();
        let mut y = Array2::zeros((self.n(), q));
        for (i, r) in self.recordings.iter().enumerate() {
            y.row_mut(i).assign(&r.y);
        }
        y
    }

    /// True sources stacked in subject order, each subject's block centered
    /// on its own mean.
    pub fn pooled_centered_sources(&self) -> Array2<f64> {
        let k = self.truth.k();
        let total: usize = self.recordings.iter().map(|r| r.t()).sum();
        let mut out = Array2::zeros((total, k));
        let mut start = 0;
        for r in &self.recordings {
            let mut block = r.f_true.clone();
            crate::linalg::center_columns(&mut block);
            out.slice_mut(s![start..start + r.t(), ..]).assign(&block);
            start += r.t();
        }
        out
    }
}

pub fn simulate_cohort(
    truth: &ScmGroundTruth,
    grid: &VoxelGrid,
    params: &SubjectParams,
    n: usize,
    t_len: usize,
    seed: u64,
) -> Result<Cohort> {
    if n < 2 {
        return Err(Error::InvalidArgument("a cohort needs at least 2 subjects".into()));
    }
    let recordings = (0..n)
        .into_par_iter()
        .map(|i| simulate_subject(truth, grid, params, t_len, i, seed))
        .collect::<Result<Vec<_>>>()?;
    let k = truth.k();
    let mut s_true = Array2::zeros((n, k));
    for (i, r) in recordings.iter().enumerate() {
        for j in 0..k {
            s_true[[i, j]] = aggregate_series(Aggregator::LogVar, r.f_true.column(j), None, None)
                .map_err(|_| Error::DegenerateDriver { subject: i, component: j })?;
        }
    }
    Ok(Cohort {
        recordings,
        s_true,
        truth: truth.clone(),
        seed,
    })
}
