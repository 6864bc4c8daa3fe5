//! Voxel lattice geometry: masks, 6-connected adjacency, the normalized
//! graph Laplacian and truncated Gaussian smoothing kernels.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

const FACE_OFFSETS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// A 3D lattice with a boolean mask. In-mask voxels are numbered `0..p`
/// in lattice order (x slowest, z fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    voxel_size: f64,
    mask: Vec<bool>,
    flat_of_lattice: Vec<Option<usize>>,
    lattice_of_flat: Vec<usize>,
}

impl VoxelGrid {
    pub fn full(dims: [usize; 3], voxel_size: f64) -> Result<Self> {
        let n = dims.iter().product();
        build_grid(dims, voxel_size, vec![true; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Number of in-mask voxels.
    pub fn p(&self) -> usize {
        self.lattice_of_flat.len()
    }

    pub fn lattice_len(&self) -> usize {
        self.mask.len()
    }

    pub fn lattice_index(&self, coord: [usize; 3]) -> usize {
        (coord[0] * self.dims[1] + coord[1]) * self.dims[2] + coord[2]
    }

    pub fn coord_of_lattice(&self, idx: usize) -> [usize; 3] {
        let z = idx % self.dims[2];
        let y = (idx / self.dims[2]) % self.dims[1];
        let x = idx / (self.dims[1] * self.dims[2]);
        [x, y, z]
    }

    /// Lattice coordinate of an in-mask voxel.
    pub fn coord(&self, flat: usize) -> [usize; 3] {
        self.coord_of_lattice(self.lattice_of_flat[flat])
    }

    pub fn lattice_of_flat(&self, flat: usize) -> usize {
        self.lattice_of_flat[flat]
    }

    pub fn flat_of_lattice(&self, lattice: usize) -> Option<usize> {
        self.flat_of_lattice[lattice]
    }

    /// Flat index of the in-mask voxel at a (possibly out-of-range) coordinate.
    pub fn flat_at(&self, coord: [i64; 3]) -> Option<usize> {
        for a in 0..3 {
            if coord[a] < 0 || coord[a] >= self.dims[a] as i64 {
                return None;
            }
        }
        let c = [coord[0] as usize, coord[1] as usize, coord[2] as usize];
        self.flat_of_lattice[self.lattice_index(c)]
    }

    pub fn offset(&self, flat: usize, off: [i64; 3]) -> Option<usize> {
        let c = self.coord(flat);
        self.flat_at([
            c[0] as i64 + off[0],
            c[1] as i64 + off[1],
            c[2] as i64 + off[2],
        ])
    }

    /// In-mask face neighbours of a voxel.
    pub fn face_neighbors(&self, flat: usize) -> impl Iterator<Item = usize> + '_ {
        FACE_OFFSETS
            .iter()
            .filter_map(move |&off| self.offset(flat, off))
    }

    /// Manhattan distance between two in-mask voxels.
    pub fn manhattan(&self, a: usize, b: usize) -> usize {
        let (ca, cb) = (self.coord(a), self.coord(b));
        (0..3).map(|k| ca[k].abs_diff(cb[k])).sum()
    }

    /// Scatters a flat in-mask vector into a full lattice volume (zeros outside).
    pub fn to_lattice_volume(&self, values: ArrayView1<f64>) -> Vec<f64> {
        let mut vol = vec![0.0; self.lattice_len()];
        for (flat, &lat) in self.lattice_of_flat.iter().enumerate() {
            vol[lat] = values[flat];
        }
        vol
    }

    pub fn to_meta(&self) -> GridMeta {
        GridMeta {
            dims: self.dims,
            voxel_size: self.voxel_size,
            mask_rle: encode_rle(&self.mask),
        }
    }

    pub fn from_meta(meta: &GridMeta) -> Result<Self> {
        let n: usize = meta.dims.iter().product();
        let mask = decode_rle(&meta.mask_rle, n)?;
        build_grid(meta.dims, meta.voxel_size, mask)
    }
}

/// Validates a mask and numbers its voxels.
pub fn build_grid(dims: [usize; 3], voxel_size: f64, mask: Vec<bool>) -> Result<VoxelGrid> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "grid dims must be positive, got {dims:?}"
        )));
    }
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let n: usize = dims.iter().product();
    if mask.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} entries but dims {dims:?} need {n}",
            mask.len()
        )));
    }
    let mut flat_of_lattice = vec![None; n];
    let mut lattice_of_flat = Vec::new();
    for (lat, &inside) in mask.iter().enumerate() {
        if inside {
            flat_of_lattice[lat] = Some(lattice_of_flat.len());
            lattice_of_flat.push(lat);
        }
    }
    if lattice_of_flat.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(VoxelGrid {
        dims,
        voxel_size,
        mask,
        flat_of_lattice,
        lattice_of_flat,
    })
}

/// JSON form of a grid. The mask is run-length encoded as alternating run
/// lengths in lattice order, starting with a run of out-of-mask voxels
/// (which may be empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub mask_rle: Vec<usize>,
}

fn encode_rle(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_rle(runs: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut mask = Vec::with_capacity(n);
    let mut value = false;
    for &r in runs {
        mask.extend(std::iter::repeat_n(value, r));
        value = !value;
    }
    if mask.len() != n {
        return Err(Error::Format(format!(
            "mask run lengths sum to {} but the lattice has {n} voxels",
            mask.len()
        )));
    }
    Ok(mask)
}

/// Face adjacency between in-mask voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyGraph {
    /// Unordered edges stored as `(u, v)` with `u < v`.
    pub edges: Vec<(usize, usize)>,
    pub neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    pub fn build(grid: &VoxelGrid) -> Self {
        let p = grid.p();
        let mut neighbors = vec![Vec::new(); p];
        let mut edges = Vec::new();
        for u in 0..p {
            for v in grid.face_neighbors(u) {
                neighbors[u].push(v);
                if u < v {
                    edges.push((u, v));
                }
            }
            neighbors[u].sort_unstable();
        }
        AdjacencyGraph { edges, neighbors }
    }

    pub fn p(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// Voxels within graph distance `radius` of `seed`, in BFS order.
    pub fn ball(&self, seed: usize, radius: usize) -> Vec<(usize, usize)> {
        let mut dist = vec![usize::MAX; self.p()];
        let mut out = vec![(seed, 0)];
        dist[seed] = 0;
        let mut head = 0;
        while head < out.len() {
            let (u, d) = out[head];
            head += 1;
            if d == radius {
                continue;
            }
            for &v in &self.neighbors[u] {
                if dist[v] == usize::MAX {
                    dist[v] = d + 1;
                    out.push((v, d + 1));
                }
            }
        }
        out
    }
}

/// `L = I − D^{-1/2} A D^{-1/2}` over in-mask voxels; isolated voxels get a
/// zero row.
#[derive(Debug, Clone)]
pub struct NormalizedLaplacian {
    pub matrix: CsrMatrix,
    pub lambda_max: f64,
    pub power_iterations: usize,
}

pub const LAMBDA_MAX_TOL: f64 = 1e-8;
pub const LAMBDA_MAX_MAX_ITER: usize = 10_000;
const POWER_SEED: u64 = 0x51_7A_C0_DE;

impl NormalizedLaplacian {
    pub fn p(&self) -> usize {
        self.matrix.n_rows
    }

    pub fn quadratic_form(&self, x: ArrayView1<f64>) -> f64 {
        x.dot(&self.matrix.mul_vec(x))
    }
}

pub fn build_laplacian(grid: &VoxelGrid, graph: &AdjacencyGraph) -> NormalizedLaplacian {
    let p = grid.p();
    assert_eq!(graph.p(), p, "graph was built for a different grid");
    let mut triplets = Vec::new();
    for u in 0..p {
        let du = graph.degree(u);
        if du == 0 {
            continue;
        }
        triplets.push((u, u, 1.0));
        for &v in &graph.neighbors[u] {
            let dv = graph.degree(v) as f64;
            triplets.push((u, v, -1.0 / (du as f64 * dv).sqrt()));
        }
    }
    let matrix = CsrMatrix::from_triplets(p, p, &triplets);
    let (lambda_max, power_iterations) = power_lambda_max(&matrix);
    NormalizedLaplacian {
        matrix,
        lambda_max,
        power_iterations,
    }
}

/// Largest eigenvalue of a PSD matrix by power iteration with a residual
/// stopping rule `‖Lv − μv‖ ≤ tol · μ`.
fn power_lambda_max(l: &CsrMatrix) -> (f64, usize) {
    let p = l.n_rows;
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut v: Array1<f64> = Array1::from_iter((0..p).map(|_| rng.random_range(-1.0..1.0)));
    let norm = v.dot(&v).sqrt();
    if norm == 0.0 {
        return (0.0, 0);
    }
    v /= norm;
    let mut mu = 0.0;
    for it in 1..=LAMBDA_MAX_MAX_ITER {
        let w = l.mul_vec(v.view());
        mu = v.dot(&w);
        let wn = w.dot(&w).sqrt();
        if wn == 0.0 {
            return (0.0, it);
        }
        let resid = (&w - &(mu * &v)).dot(&(&w - &(mu * &v))).sqrt();
        if resid <= LAMBDA_MAX_TOL * mu.abs() {
            return (mu, it);
        }
        v = w / wn;
    }
    log::warn!("lambda_max power iteration hit {LAMBDA_MAX_MAX_ITER} iterations");
    (mu, LAMBDA_MAX_MAX_ITER)
}

/// Truncated isotropic Gaussian over the `(2r+1)³` offset box.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianKernel {
    pub fwhm_mm: f64,
    pub sigma_voxels: f64,
    pub radius_voxels: usize,
    /// Offsets with their normalized weights; the center comes first.
    pub weights: Vec<([i64; 3], f64)>,
    pub w0: f64,
}

/// `σ = FWHM / (2√(2 ln 2))`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

/// Truncation radius `⌈3σ⌉` (at least one voxel).
pub fn default_radius(fwhm_mm: f64, voxel_size: f64) -> usize {
    ((3.0 * fwhm_to_sigma(fwhm_mm) / voxel_size).ceil() as usize).max(1)
}

pub fn gaussian_kernel(fwhm_mm: f64, voxel_size: f64, radius_voxels: usize) -> Result<GaussianKernel> {
    if !(fwhm_mm > 0.0 && fwhm_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!("fwhm must be positive, got {fwhm_mm}")));
    }
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidArgument(format!("voxel size must be positive, got {voxel_size}")));
    }
    if radius_voxels < 1 {
        return Err(Error::InvalidArgument("kernel radius must be at least 1 voxel".into()));
    }
    let sigma = fwhm_to_sigma(fwhm_mm) / voxel_size;
    let r = radius_voxels as i64;
    let mut weights = vec![([0, 0, 0], 1.0)];
    for dx in -r..=r {
        for dy in -r..=r {
            for dz in -r..=r {
                if dx == 0 && dy == 0 && dz == 0 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                weights.push(([dx, dy, dz], (-d2 / (2.0 * sigma * sigma)).exp()));
            }
        }
    }
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut weights {
        *w /= total;
    }
    let w0 = weights[0].1;
    Ok(GaussianKernel {
        fwhm_mm,
        sigma_voxels: sigma,
        radius_voxels,
        weights,
        w0,
    })
}

impl GaussianKernel {
    /// Kernel with the `⌈3σ⌉` truncation radius.
    pub fn with_default_radius(fwhm_mm: f64, voxel_size: f64) -> Result<Self> {
        gaussian_kernel(fwhm_mm, voxel_size, default_radius(fwhm_mm, voxel_size))
    }

    /// Identity kernel (FWHM 0).
    pub fn delta() -> Self {
        GaussianKernel {
            fwhm_mm: 0.0,
            sigma_voxels: 0.0,
            radius_voxels: 0,
            weights: vec![([0, 0, 0], 1.0)],
            w0: 1.0,
        }
    }

    /// Delta kernel when `fwhm_mm == 0`, otherwise the default-radius Gaussian.
    pub fn from_fwhm(fwhm_mm: f64, voxel_size: f64) -> Result<Self> {
        if fwhm_mm == 0.0 {
            Ok(Self::delta())
        } else {
            Self::with_default_radius(fwhm_mm, voxel_size)
        }
    }
}

/// Mask-renormalized convolution as a sparse `p × p` operator: row `v`
/// holds the kernel weights of in-mask neighbours of `v`, rescaled to sum
/// to one.
#[derive(Debug, Clone)]
pub struct SmoothingOperator {
    matrix: CsrMatrix,
    transposed: CsrMatrix,
    /// Renormalized center weight per voxel.
    pub center_weights: Array1<f64>,
}

impl SmoothingOperator {
    pub fn new(grid: &VoxelGrid, kernel: &GaussianKernel) -> Self {
        let p = grid.p();
        let mut triplets = Vec::new();
        let mut center_weights = Array1::zeros(p);
        for v in 0..p {
            let support: Vec<(usize, f64)> = kernel
                .weights
                .iter()
                .filter_map(|&(off, w)| grid.offset(v, off).map(|u| (u, w)))
                .collect();
            let z: f64 = support.iter().map(|&(_, w)| w).sum();
            center_weights[v] = kernel.w0 / z;
            for (u, w) in support {
                triplets.push((v, u, w / z));
            }
        }
        let matrix = CsrMatrix::from_triplets(p, p, &triplets);
        let transposed = matrix.transpose();
        SmoothingOperator {
            matrix,
            transposed,
            center_weights,
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn apply(&self, volume: ArrayView1<f64>) -> Array1<f64> {
        self.matrix.mul_vec(volume)
    }

    /// Smooths every row (time point) of a `T × p` matrix.
    pub fn apply_rows(&self, data: ArrayView2<f64>) -> Array2<f64> {
        self.transposed.right_mul_rows(data)
    }
}

/// Smooths one in-mask volume.
pub fn smooth(grid: &VoxelGrid, kernel: &GaussianKernel, volume: ArrayView1<f64>) -> Result<Array1<f64>> {
    if volume.len() != grid.p() {
        return Err(Error::DimensionMismatch(format!(
            "volume has {} voxels, grid has {}",
            volume.len(),
            grid.p()
        )));
    }
    Ok(SmoothingOperator::new(grid, kernel).apply(volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigh;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_mask(dims: [usize; 3], count: usize, seed: u64) -> Vec<bool> {
        let n: usize = dims.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let mut mask = vec![false; n];
        for &i in idx.iter().take(count) {
            mask[i] = true;
        }
        mask
    }

    #[test]
    fn single_voxel_grid() {
        let g = VoxelGrid::full([1, 1, 1], 3.0).unwrap();
        assert_eq!(g.p(), 1);
        let graph = AdjacencyGraph::build(&g);
        assert!(graph.edges.is_empty());
        let l = build_laplacian(&g, &graph);
        assert_eq!(l.matrix.to_dense()[[0, 0]], 0.0);
        assert_eq!(l.lambda_max, 0.0);
    }

    #[test]
    fn cube_has_twelve_edges() {
        let g = VoxelGrid::full([2, 2, 2], 3.0).unwrap();
        assert_eq!(g.p(), 8);
        assert_eq!(AdjacencyGraph::build(&g).edges.len(), 12);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let err = build_grid([2, 2, 2], 3.0, vec![false; 8]).unwrap_err();
        assert_eq!(err.to_string(), "empty grid");
        assert!(build_grid([2, 2, 2], 3.0, vec![true; 7]).is_err());
        assert!(build_grid([0, 2, 2], 3.0, vec![]).is_err());
    }

    #[test]
    fn random_mask_round_trips() {
        let mask = random_mask([4, 4, 4], 50, 7);
        let g = build_grid([4, 4, 4], 3.0, mask.clone()).unwrap();
        assert_eq!(g.p(), 50);
        let mut seen = 0;
        for lat in 0..64 {
            if mask[lat] {
                let flat = g.flat_of_lattice(lat).unwrap();
                assert_eq!(g.lattice_of_flat(flat), lat);
                assert_eq!(g.lattice_index(g.coord(flat)), lat);
                seen += 1;
            } else {
                assert!(g.flat_of_lattice(lat).is_none());
            }
        }
        assert_eq!(seen, 50);
    }

    #[test]
    fn edges_are_face_adjacent() {
        let g = build_grid([5, 4, 3], 2.0, random_mask([5, 4, 3], 40, 3)).unwrap();
        let graph = AdjacencyGraph::build(&g);
        for &(u, v) in &graph.edges {
            assert!(u < v);
            assert_eq!(g.manhattan(u, v), 1);
            assert!(graph.neighbors[v].contains(&u));
        }
        let deg_sum: usize = (0..g.p()).map(|v| graph.degree(v)).sum();
        assert_eq!(deg_sum, 2 * graph.edges.len());
    }

    #[test]
    fn k2_laplacian() {
        let g = VoxelGrid::full([2, 1, 1], 3.0).unwrap();
        let l = build_laplacian(&g, &AdjacencyGraph::build(&g));
        let d = l.matrix.to_dense();
        assert_eq!(d, ndarray::array![[1.0, -1.0], [-1.0, 1.0]]);
        assert!((l.lambda_max - 2.0).abs() < 1e-8);
    }

    #[test]
    fn cube_lambda_max_matches_dense_eigensolver() {
        let g = VoxelGrid::full([3, 3, 3], 3.0).unwrap();
        let l = build_laplacian(&g, &AdjacencyGraph::build(&g));
        let (vals, _) = sym_eigh(l.matrix.to_dense().view());
        assert!((l.lambda_max - vals[0]).abs() < 1e-6, "{} vs {}", l.lambda_max, vals[0]);
        assert!(vals.iter().all(|&x| x > -1e-12 && x < 2.0 + 1e-12));
    }

    #[test]
    fn degree_weighted_ones_are_in_null_space() {
        let g = VoxelGrid::full([3, 4, 2], 3.0).unwrap();
        let graph = AdjacencyGraph::build(&g);
        let l = build_laplacian(&g, &graph);
        let x = Array1::from_iter((0..g.p()).map(|v| (graph.degree(v) as f64).sqrt()));
        assert!(l.matrix.mul_vec(x.view()).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn kernel_for_six_mm_at_three_mm() {
        let k = GaussianKernel::with_default_radius(6.0, 3.0).unwrap();
        assert!((k.sigma_voxels - 0.849_322_8).abs() < 1e-6);
        assert_eq!(k.radius_voxels, 3);
        // Direct evaluation of the Gaussian on the 7³ box.
        let s = k.sigma_voxels;
        let mut total = 0.0;
        for dx in -3i32..=3 {
            for dy in -3i32..=3 {
                for dz in -3i32..=3 {
                    total += (-f64::from(dx * dx + dy * dy + dz * dz) / (2.0 * s * s)).exp();
                }
            }
        }
        assert!((k.w0 - 1.0 / total).abs() < 1e-14);
        let sum: f64 = k.weights.iter().map(|(_, w)| w).sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(k.w0 > 0.0 && k.w0 < 1.0);
    }

    #[test]
    fn kernel_limits_and_support() {
        let tiny = gaussian_kernel(1e-3, 3.0, 1).unwrap();
        assert!((tiny.w0 - 1.0).abs() < 1e-12);
        let k = gaussian_kernel(6.0, 3.0, 1).unwrap();
        assert_eq!(k.weights.len(), 27);
        assert!(gaussian_kernel(6.0, 3.0, 0).is_err());
        assert!(gaussian_kernel(0.0, 3.0, 1).is_err());
    }

    #[test]
    fn kernel_weights_decay_with_distance() {
        let k = gaussian_kernel(8.0, 3.0, 3).unwrap();
        let mut pairs: Vec<(i64, f64)> = k
            .weights
            .iter()
            .map(|(o, w)| (o[0] * o[0] + o[1] * o[1] + o[2] * o[2], *w))
            .collect();
        pairs.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        for w in pairs.windows(2) {
            if w[0].0 < w[1].0 {
                assert!(w[0].1 > w[1].1);
            }
        }
    }

    #[test]
    fn constant_volume_is_preserved() {
        let g = build_grid([5, 5, 4], 3.0, random_mask([5, 5, 4], 70, 11)).unwrap();
        let k = GaussianKernel::with_default_radius(6.0, 3.0).unwrap();
        let out = smooth(&g, &k, Array1::from_elem(g.p(), 2.5).view()).unwrap();
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn delta_at_center_returns_kernel_stencil() {
        let g = VoxelGrid::full([5, 5, 5], 3.0).unwrap();
        let k = gaussian_kernel(6.0, 3.0, 1).unwrap();
        let center = g.flat_at([2, 2, 2]).unwrap();
        let mut vol = Array1::zeros(g.p());
        vol[center] = 1.0;
        let out = smooth(&g, &k, vol.view()).unwrap();
        let mut expected = Array1::zeros(g.p());
        for &(off, w) in &k.weights {
            expected[g.offset(center, off).unwrap()] = w;
        }
        assert!(out.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    fn brute_force_smooth(g: &VoxelGrid, sigma: f64, radius: i64, x: &Array1<f64>) -> Array1<f64> {
        let p = g.p();
        let mut out = Array1::zeros(p);
        for v in 0..p {
            let cv = g.coord(v);
            let (mut num, mut den) = (0.0, 0.0);
            for u in 0..p {
                let cu = g.coord(u);
                let d: Vec<i64> = (0..3).map(|a| cu[a] as i64 - cv[a] as i64).collect();
                if d.iter().any(|x| x.abs() > radius) {
                    continue;
                }
                let d2 = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) as f64;
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                num += w * x[u];
                den += w;
            }
            out[v] = num / den;
        }
        out
    }

    #[test]
    fn matches_brute_force_convolution() {
        let g = build_grid([4, 4, 4], 3.0, random_mask([4, 4, 4], 45, 5)).unwrap();
        let k = GaussianKernel::with_default_radius(6.0, 3.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array1::from_iter((0..g.p()).map(|_| rng.random_range(-1.0..1.0)));
        let fast = smooth(&g, &k, x.view()).unwrap();
        let slow = brute_force_smooth(&g, k.sigma_voxels, k.radius_voxels as i64, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn mass_is_preserved_away_from_the_boundary() {
        // On the full lattice every source voxel at least 2r from the faces
        // distributes exactly its mass.
        let g = VoxelGrid::full([7, 7, 7], 3.0).unwrap();
        let k = gaussian_kernel(6.0, 3.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Array1::zeros(g.p());
        for v in 0..g.p() {
            let c = g.coord(v);
            if c.iter().all(|&a| (2..=4).contains(&a)) {
                x[v] = rng.random_range(-1.0..1.0);
            }
        }
        let out = smooth(&g, &k, x.view()).unwrap();
        assert!((out.sum() - x.sum()).abs() < 1e-9);
    }

    #[test]
    fn rle_round_trip() {
        let mask = random_mask([3, 5, 2], 13, 1);
        let g = build_grid([3, 5, 2], 2.0, mask).unwrap();
        let meta = g.to_meta();
        let json = serde_json::to_string(&meta).unwrap();
        let back = VoxelGrid::from_meta(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back, g);
        let full = VoxelGrid::full([2, 2, 2], 1.0).unwrap();
        assert_eq!(full.to_meta().mask_rle, vec![0, 8]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn laplacian_quadratic_form_is_bounded(seed in 0u64..10_000, count in 2usize..60) {
            let g = build_grid([4, 4, 4], 3.0, random_mask([4, 4, 4], count, seed)).unwrap();
            let l = build_laplacian(&g, &AdjacencyGraph::build(&g));
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            for _ in 0..16 {
                let z = Array1::from_iter((0..g.p()).map(|_| rng.random_range(-1.0..1.0)));
                let q = l.quadratic_form(z.view());
                prop_assert!(q >= -1e-12);
                if l.lambda_max > 0.0 {
                    let r = q / (l.lambda_max * z.dot(&z));
                    prop_assert!(r <= 1.0 + 1e-7, "rayleigh {}", r);
                } else {
                    prop_assert!(q.abs() < 1e-12);
                }
            }
        }

        #[test]
        fn smoothing_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let g = build_grid([4, 3, 4], 3.0, random_mask([4, 3, 4], 30, seed)).unwrap();
            let op = SmoothingOperator::new(&g, &GaussianKernel::with_default_radius(6.0, 3.0).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Array1::from_iter((0..g.p()).map(|_| rng.random_range(-1.0..1.0)));
            let v = Array1::from_iter((0..g.p()).map(|_| rng.random_range(-1.0..1.0)));
            let lhs = op.apply((a * &u + b * &v).view());
            let rhs = a * &op.apply(u.view()) + b * &op.apply(v.view());
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
