//! Cohort directories: `grid.json`, `manifest.json`, `subjects/NNN.bin` and,
//! for simulated cohorts, `truth.bin`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use source_core::config::SimulationConfig;
use source_core::grid::{GridMeta, VoxelGrid};
use source_core::pipeline::CohortData;
use source_core::simulator::{Cohort, ScmGroundTruth};
use source_core::{Error, Result};

use crate::format::{read_tensors, write_tensors, Tensor};

pub const TOOLKIT: &str = "source";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub toolkit: String,
    pub version: String,
    pub n_subjects: usize,
    pub subject_files: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
}

/// Ground-truth arrays as stored in `truth.bin`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthArrays {
    pub gamma: Array2<f64>,
    pub b: Array2<f64>,
    pub phi: Array2<f64>,
    pub delta: Array1<f64>,
}

impl TruthArrays {
    pub fn root_voxels(&self) -> Vec<BTreeSet<usize>> {
        self.gamma
            .outer_iter()
            .map(|row| row.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub manifest: Manifest,
    pub data: CohortData,
    pub f_true: Option<Vec<Array2<f64>>>,
    pub truth: Option<TruthArrays>,
}

pub fn subject_file(i: usize) -> String {
    format!("subjects/{i:03}.bin")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_json(path, &grid.to_meta())
}

pub fn read_grid(path: &Path) -> Result<VoxelGrid> {
    let meta: GridMeta = serde_json::from_str(&fs::read_to_string(path)?)?;
    VoxelGrid::from_meta(&meta)
}

fn truth_tensors(truth: &ScmGroundTruth) -> Vec<Tensor> {
    vec![
        Tensor::from_array2(&truth.gamma),
        Tensor::from_array2(&truth.b.to_dense()),
        Tensor::from_array2(&truth.phi),
        Tensor::from_array1(&truth.delta),
    ]
}

pub fn write_cohort(dir: &Path, cohort: &Cohort, grid: &VoxelGrid, sim: &SimulationConfig, seed: u64) -> Result<()> {
    fs::create_dir_all(dir.join("subjects"))?;
    write_grid(&dir.join("grid.json"), grid)?;
    write_tensors(&dir.join("truth.bin"), &truth_tensors(&cohort.truth))?;
    let mut files = Vec::with_capacity(cohort.n());
    for (i, r) in cohort.recordings.iter().enumerate() {
        let name = subject_file(i);
        write_tensors(
            &dir.join(&name),
            &[Tensor::from_array2(&r.x), Tensor::from_array1(&r.y), Tensor::from_array2(&r.f_true)],
        )?;
        files.push(name);
    }
    let manifest = Manifest {
        toolkit: TOOLKIT.into(),
        version: VERSION.into(),
        n_subjects: cohort.n(),
        subject_files: files,
        seed: Some(seed),
        simulation: Some(sim.clone()),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn read_cohort(dir: &Path) -> Result<LoadedCohort> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let grid = read_grid(&dir.join("grid.json"))?;
    let mut subjects = Vec::with_capacity(manifest.n_subjects);
    let mut ys = Vec::with_capacity(manifest.n_subjects);
    let mut f_true = Vec::new();
    for name in &manifest.subject_files {
        let path: PathBuf = dir.join(name);
        let t = read_tensors(&path)?;
        if t.len() < 2 {
            return Err(Error::Format(format!("{} must hold X and Y", path.display())));
        }
        let x = t[0].to_array2()?;
        if x.ncols() != grid.p() {
            return Err(Error::DimensionMismatch(format!(
                "{} has {} voxels, grid has {}",
                path.display(),
                x.ncols(),
                grid.p()
            )));
        }
        subjects.push(x);
        ys.push(t[1].to_array1()?);
        if let Some(f) = t.get(2) {
            f_true.push(f.to_array2()?);
        }
    }
    if subjects.len() != manifest.n_subjects {
        return Err(Error::Format("manifest subject count disagrees with its file list".into()));
    }
    let q = ys.first().map_or(0, |y| y.len());
    let mut y = Array2::zeros((ys.len(), q));
    for (i, row) in ys.iter().enumerate() {
        if row.len() != q {
            return Err(Error::DimensionMismatch("subjects have different symptom counts".into()));
        }
        y.row_mut(i).assign(row);
    }
    let truth_path = dir.join("truth.bin");
    let truth = if truth_path.exists() {
        let t = read_tensors(&truth_path)?;
        if t.len() != 4 {
            return Err(Error::Format("truth.bin must hold Gamma, B, Phi and delta".into()));
        }
        Some(TruthArrays {
            gamma: t[0].to_array2()?,
            b: t[1].to_array2()?,
            phi: t[2].to_array2()?,
            delta: t[3].to_array1()?,
        })
    } else {
        None
    };
    let f_true = (f_true.len() == subjects.len() && !subjects.is_empty()).then_some(f_true);
    Ok(LoadedCohort {
        manifest,
        data: CohortData { grid, subjects, y },
        f_true,
        truth,
    })
}
