//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line and
//! asserts at the stated tolerance. Run with
//! `cargo test --release -p source-validation --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use source_cli::commands::{cmd_metrics, cmd_run, cmd_score, cmd_simulate, score_maps, RunOptions};
use source_core::axis::{fit_axis_with, select_lambda3, AxisOptions, DEFAULT_LAMBDA3_GRID};
use source_core::config::Ablation;
use source_core::evaluation::{bootstrap_prepared, compactness, match_sources, BootstrapReport};
use source_core::grid::{build_laplacian, AdjacencyGraph, VoxelGrid};
use source_core::linalg::pearson;
use source_core::pipeline::{fit_sources, fit_stage1, prepare, CohortData};
use source_core::rootmap::{
    diffuseness, fit_zeta, roughness, select_lambdas, zeta_objective, ZetaOptions, DEFAULT_LAMBDA_GRID,
};
use source_core::simulator::{
    mixing_template, oracle_root_voxels, sample_ground_truth, simulate_subject, SubjectParams, TruthParams,
};
use source_validation::{ablation_config, determinism_config, enrichment_config, recovery_config, simulate};

const SEEDS: u64 = 20;

/// Writes to the raw stdout handle so the line survives libtest's capture.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!("acceptance criterion {n} ({name}): {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

#[test]
fn criterion_1_structural_equation_fidelity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_eq, mut worst_neumann, mut max_p) = (0.0f64, 0.0f64, 0);
    for seed in 0..50u64 {
        let n = rng.random_range(4..=8usize);
        let grid = VoxelGrid::full([n, n, n], 3.0).unwrap();
        max_p = max_p.max(grid.p());
        let params = TruthParams {
            n_sources: rng.random_range(1..=3),
            b_density: rng.random_range(0.02..0.3),
            b_scale: rng.random_range(0.3..2.0),
            target_radius: rng.random_range(0.3..0.9),
            noise_sd: rng.random_range(0.01..0.5),
            ..Default::default()
        };
        let truth = sample_ground_truth(&grid, &params, seed).unwrap();
        let sp = SubjectParams {
            record_noise: true,
            ..Default::default()
        };
        let rec = simulate_subject(&truth, &grid, &sp, 24, 0, seed).unwrap();
        let lhs = &rec.x - &truth.b.right_mul_rows(rec.x.view());
        let rhs = rec.f_true.dot(&truth.gamma) + &truth.delta + rec.noise.as_ref().unwrap();
        worst_eq = lhs.iter().zip(rhs.iter()).fold(worst_eq, |m, (a, b)| m.max((a - b).abs()));

        let m = mixing_template(&truth).unwrap();
        let mut term = truth.gamma.clone();
        let mut series = truth.gamma.clone();
        for _ in 0..400 {
            term = truth.b.right_mul_rows(term.view());
            series += &term;
        }
        worst_neumann = m.iter().zip(series.iter()).fold(worst_neumann, |a, (x, y)| a.max((x - y).abs()));
    }
    let pass = worst_eq < 1e-8 && worst_neumann < 1e-6 && max_p <= 512;
    report(
        1,
        "structural-equation fidelity",
        pass,
        &format!("50 truths, p <= {max_p}: max equation residual {worst_eq:.2e} (< 1e-8), max Neumann gap {worst_neumann:.2e} (< 1e-6)"),
    );
    assert!(pass);
}

#[test]
fn criterion_2_ica_recovery() {
    let cfg = recovery_config();
    let mut good = 0;
    let mut means = Vec::new();
    for seed in 0..SEEDS {
        let (grid, cohort) = simulate(&cfg, seed).unwrap();
        let data = CohortData::from_cohort(&cohort, &grid);
        let prepared = prepare(&data, &cfg).unwrap();
        let all: Vec<usize> = (0..data.n()).collect();
        let stage1 = fit_stage1(&prepared, &all, &cfg, seed).unwrap();
        let f_true = cohort.pooled_centered_sources();
        let (c, m) = match_sources(f_true.view(), stage1.decomposition.f_hat.view());
        let mean = m.iter().enumerate().map(|(j, o)| o.map_or(0.0, |k| c[[j, k]])).sum::<f64>() / m.len() as f64;
        means.push(mean);
        if mean > 0.95 {
            good += 1;
        }
    }
    let min = means.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = good >= 18;
    report(
        2,
        "ICA recovery",
        pass,
        &format!("{good}/{SEEDS} seeds with best-permutation mean |cor| > 0.95 (need 18); lowest seed mean {min:.4}"),
    );
    assert!(pass);
}

#[test]
fn criterion_3_root_proximal_enrichment() {
    let cfg = enrichment_config();
    let (mut wins, mut any_gain) = (0, 0);
    let (mut zs, mut es) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let (grid, cohort) = simulate(&cfg, seed).unwrap();
        let data = CohortData::from_cohort(&cohort, &grid);
        let prepared = prepare(&data, &cfg).unwrap();
        let all: Vec<usize> = (0..data.n()).collect();
        let fit = fit_sources(&prepared, &all, &cfg, seed).unwrap();
        let f_true = cohort.pooled_centered_sources();
        let kept = fit.decomposition.f_hat.select(Axis(1), &fit.kept);
        let roots = oracle_root_voxels(&cohort.truth);
        let score = score_maps(&f_true, &kept, &fit.kept, &fit.rootmap.zeta, &fit.maps.eta, &roots);
        let (z, e) = (score.mean_auc_zeta.unwrap(), score.mean_auc_eta.unwrap());
        zs.push(z);
        es.push(e);
        if z >= e + 0.05 {
            wins += 1;
        }
        if z > e {
            any_gain += 1;
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min_eta = es.iter().copied().fold(f64::INFINITY, f64::min);
    let pass = wins >= 15;
    report(
        3,
        "root-proximal enrichment",
        pass,
        &format!(
            "{wins}/{SEEDS} seeds with AUC(|zeta|) >= AUC(|eta|) + 0.05 (need 15); mean AUC zeta {:.4}, eta {:.4}; \
             lowest eta AUC {min_eta:.4}; zeta above eta in {any_gain}/{SEEDS}",
            mean(&zs),
            mean(&es)
        ),
    );
    assert!(pass);
}

/// Objective minimum by grid search refined around the incumbent.
fn brute_force_min(target: &Array1<f64>, graph: &AdjacencyGraph, l1: f64, l2: f64) -> f64 {
    let p = target.len();
    let bound = target.iter().fold(0.0f64, |m, v| m.max(v.abs())) + 0.05;
    let mut centre = Array1::<f64>::zeros(p);
    let mut half = bound;
    let mut best = f64::INFINITY;
    let steps = 40i64;
    for _ in 0..8 {
        let h = 2.0 * half / steps as f64;
        let mut idx = vec![0i64; p];
        let mut incumbent = centre.clone();
        loop {
            let z = Array1::from_iter((0..p).map(|d| centre[d] - half + h * idx[d] as f64));
            let f = zeta_objective(target.view(), z.view(), graph, l1, l2);
            if f < best {
                best = f;
                incumbent = z;
            }
            let mut d = 0;
            while d < p {
                idx[d] += 1;
                if idx[d] <= steps {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
            if d == p {
                break;
            }
        }
        // The objective is also checked at exact zeros, where the kinks sit.
        for mask in 0..(1u32 << p) {
            let z = Array1::from_iter((0..p).map(|d| if mask >> d & 1 == 1 { 0.0 } else { incumbent[d] }));
            let f = zeta_objective(target.view(), z.view(), graph, l1, l2);
            if f < best {
                best = f;
                incumbent = z;
            }
        }
        centre = incumbent;
        half = 2.0 * h;
    }
    best
}

#[test]
fn criterion_4_irls_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_gap, mut worst_rise) = (0.0f64, f64::NEG_INFINITY);
    let mut ok = 0;
    for i in 0..100 {
        let p = if i % 2 == 0 { 2 } else { 3 };
        let grid = VoxelGrid::full([p, 1, 1], 3.0).unwrap();
        let graph = AdjacencyGraph::build(&grid);
        let target = Array1::from_iter((0..p).map(|_| rng.random_range(-1.0..1.0)));
        let l1 = rng.random_range(0.0..1.0);
        let l2 = rng.random_range(0.0..1.0);
        let fit = fit_zeta(target.view(), &graph, l1, l2, &ZetaOptions::default()).unwrap();
        let value = zeta_objective(target.view(), fit.zeta.view(), &graph, l1, l2);
        let gap = (value - brute_force_min(&target, &graph, l1, l2)).abs();
        let rise = fit.trace.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        worst_gap = worst_gap.max(gap);
        worst_rise = worst_rise.max(rise);
        if gap <= 1e-3 && rise <= 1e-9 {
            ok += 1;
        }
    }
    let pass = ok == 100;
    report(
        4,
        "IRLS correctness",
        pass,
        &format!("{ok}/100 problems within 1e-3 of brute force; worst gap {worst_gap:.2e}; largest trace increase {worst_rise:.2e}"),
    );
    assert!(pass);
}

fn single_compactness(z: &Array1<f64>, grid: &VoxelGrid) -> f64 {
    let chi = z.clone().insert_axis(Axis(0));
    compactness(chi.view(), Array1::from(vec![1.0]).view(), grid).unwrap()
}

#[test]
fn criterion_5_rho_selection_sanity() {
    let grid = VoxelGrid::full([8, 8, 8], 3.0).unwrap();
    let graph = AdjacencyGraph::build(&grid);
    let lap = build_laplacian(&grid, &graph);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut ok = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = [rng.random_range(2..6), rng.random_range(2..6), rng.random_range(2..6)];
        let centre = grid.flat_at(c).unwrap();
        let mut t = Array2::from_shape_fn((1, grid.p()), |_| noise.sample(&mut rng));
        for (v, _) in graph.ball(centre, 1) {
            t[[0, v]] += 1.0;
        }
        let maps = select_lambdas(t.view(), &lap, &graph, &DEFAULT_LAMBDA_GRID, &DEFAULT_LAMBDA_GRID, &ZetaOptions::default())
            .unwrap();
        let selected = maps.zeta.row(0).to_owned();
        let raw = t.row(0).to_owned();
        if single_compactness(&selected, &grid) > single_compactness(&raw, &grid)
            && diffuseness(selected.view()) < diffuseness(raw.view())
        {
            ok += 1;
        }
    }
    let pass = ok >= 18;
    report(
        5,
        "rho-selection sanity",
        pass,
        &format!("{ok}/{SEEDS} seeds with higher compactness and lower D than the unpenalized map (need 18)"),
    );
    assert!(pass);
}

#[test]
fn criterion_6_axis_recovery() {
    let (n, k, q) = (300, 4, 5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut ok = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Array2::from_shape_fn((n, k), |_| normal.sample(&mut rng));
        let mut support: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            support.swap(i, rng.random_range(0..=i));
        }
        let mut support = support[..2].to_vec();
        support.sort_unstable();
        let mut beta = Array1::zeros(k);
        for &j in &support {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            beta[j] = sign * rng.random_range(0.5..1.5);
        }
        let z = s.dot(&beta);
        let z = &z / z.std(0.0);
        // α* on three of the five items; the others carry only noise.
        let mut weights = Array1::<f64>::zeros(q);
        let mut items: Vec<usize> = (0..q).collect();
        for i in (1..q).rev() {
            items.swap(i, rng.random_range(0..=i));
        }
        for &j in &items[..3] {
            weights[j] = rng.random_range(0.5..1.5);
        }
        let alpha_star = &weights / weights.sum();
        let y = Array2::from_shape_fn((n, q), |(i, j)| weights[j] * z[i] + 0.2 * normal.sample(&mut rng));

        let opts = AxisOptions::default();
        let sel = select_lambda3(s.view(), y.view(), &DEFAULT_LAMBDA3_GRID, 5, seed, &opts).unwrap();
        let axis = fit_axis_with(s.view(), y.view(), sel.lambda3, &opts).unwrap();
        let c = pearson(y.dot(&axis.alpha).view(), y.dot(&alpha_star).view()).unwrap_or(0.0);
        worst = worst.min(c);
        if axis.support == support && c > 0.95 {
            ok += 1;
        }
    }
    let pass = ok >= 18;
    report(
        6,
        "axis recovery",
        pass,
        &format!("{ok}/{SEEDS} seeds with exact support and cor(Y alpha_hat, Y alpha*) > 0.95 (need 18); lowest cor {worst:.4}"),
    );
    assert!(pass);
}

fn ci_overlap(a: &BootstrapReport, b: &BootstrapReport) -> bool {
    let (x, y) = (a.summary.correlation, b.summary.correlation);
    x.mean - x.half_width <= y.mean + y.half_width && y.mean - y.half_width <= x.mean + x.half_width
}

#[test]
fn criterion_7_ablation_ordering() {
    let cfg = ablation_config();
    let (mut ordered, mut overlap) = (0, 0);
    for seed in 0..SEEDS {
        let (grid, cohort) = simulate(&cfg, seed).unwrap();
        let data = CohortData::from_cohort(&cohort, &grid);
        let prepared = prepare(&data, &cfg).unwrap();
        let all: Vec<usize> = (0..data.n()).collect();
        let fit = fit_sources(&prepared, &all, &cfg, seed).unwrap();
        let reports: Vec<BootstrapReport> = Ablation::ALL
            .iter()
            .map(|&a| bootstrap_prepared(&prepared, &fit, &cfg, a, seed).unwrap())
            .collect();
        let full = &reports[0].summary;
        if ci_overlap(&reports[0], &reports[1]) {
            overlap += 1;
        }
        let beats_all = reports[1..].iter().all(|r| {
            full.correlation_density.mean > r.summary.correlation_density.mean && full.compactness.mean > r.summary.compactness.mean
        });
        if beats_all {
            ordered += 1;
        }
    }
    let pass = overlap == SEEDS as usize && ordered >= 16;
    report(
        7,
        "ablation ordering",
        pass,
        &format!(
            "correlation CI overlap with no_rootmap in {overlap}/{SEEDS} seeds; full pipeline has the highest mean CD and \
             compactness over all three ablations in {ordered}/{SEEDS} seeds (need 16)"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_8_metric_units() {
    let grid = VoxelGrid::full([6, 6, 6], 3.0).unwrap();
    let graph = AdjacencyGraph::build(&grid);
    let lap = build_laplacian(&grid, &graph);
    let mut spike = Array1::zeros(grid.p());
    spike[grid.flat_at([2, 3, 1]).unwrap()] = 2.5;
    let hotspot = single_compactness(&spike, &grid);
    let d = diffuseness(spike.view());
    let null = Array1::from_iter((0..grid.p()).map(|v| (graph.degree(v) as f64).sqrt()));
    let r = roughness(null.view(), &lap);
    let errs = [(hotspot - 1.0).abs(), (d - 1.0 / grid.p() as f64).abs(), r.abs()];
    let pass = errs.iter().all(|&e| e <= 1e-10);
    report(
        8,
        "metric unit tests",
        pass,
        &format!(
            "|compactness - 1| = {:.1e}, |D - 1/p| = {:.1e}, |R(null)| = {:.1e} (all <= 1e-10)",
            errs[0], errs[1], errs[2]
        ),
    );
    assert!(pass);
}

fn files_in(dir: &Path) -> BTreeSet<std::path::PathBuf> {
    let mut out = BTreeSet::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_in(&p));
        } else {
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf());
        }
    }
    out
}

fn run_all(root: &Path) -> String {
    let cfg = determinism_config();
    let (cohort, run) = (root.join("cohort"), root.join("run"));
    let opts = RunOptions {
        ablation: Ablation::NoAxis,
        refit_all: false,
    };
    let n = cmd_simulate(&cfg, &cohort).unwrap();
    let summary = cmd_run(&cfg, &cohort, &run, opts).unwrap();
    let score = serde_json::to_string(&cmd_score(&run, &cohort).unwrap()).unwrap();
    let metrics = serde_json::to_string(&cmd_metrics(&run, &cohort).unwrap()).unwrap();
    format!("{n}\n{summary}\n{score}\n{metrics}\n")
}

#[test]
fn criterion_9_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let trees: Vec<PathBuf> = (0..2).map(|rep| tmp.path().join(format!("rep{rep}"))).collect();
    let stdout: Vec<String> = trees.iter().map(|root| pool.install(|| run_all(root))).collect();
    let (a, b) = (files_in(&trees[0]), files_in(&trees[1]));
    let mut differing: Vec<String> = a
        .iter()
        .filter(|f| fs::read(trees[0].join(f)).ok() != fs::read(trees[1].join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    if a != b {
        differing.push("file sets differ".into());
    }
    let pass = differing.is_empty() && stdout[0] == stdout[1];
    report(
        9,
        "determinism",
        pass,
        &format!(
            "simulate, run, score and metrics twice on one thread: {} artifacts compared, {} differ, outputs {}",
            a.len(),
            differing.len(),
            if stdout[0] == stdout[1] { "identical" } else { "differ" }
        ),
    );
    assert!(pass, "{differing:?}");
}
