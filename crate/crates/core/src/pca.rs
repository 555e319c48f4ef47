//! Global, local and random-group PCA over corrective matrices, plus the
//! per-part low-rank factorization used to build local blendshapes.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{column_means, truncated_svd};

/// Number of columns a Gaussian contributes to a color corrective matrix.
pub const COLUMNS_PER_GAUSSIAN: usize = 3;

#[derive(Clone, Debug)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// `[k, D]`, orthonormal rows.
    pub basis: Array2<f64>,
    /// `[F, k]`.
    pub coefficients: Array2<f64>,
    pub explained_ratio: Vec<f64>,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.basis.nrows()
    }

    /// `mean + coefficients · basis`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let mut r = self.coefficients.dot(&self.basis);
        for mut row in r.rows_mut() {
            row.iter_mut().zip(&self.mean).for_each(|(x, m)| *x += m);
        }
        r
    }
}

/// Flips each row so that its largest-magnitude entry (first on ties) is positive.
fn fix_signs(basis: &mut Array2<f64>, coeffs: &mut Array2<f64>) {
    for j in 0..basis.nrows() {
        let row = basis.row(j);
        let mut best = 0usize;
        for (i, v) in row.iter().enumerate() {
            if v.abs() > row[best].abs() {
                best = i;
            }
        }
        if !row.is_empty() && row[best] < 0.0 {
            basis.row_mut(j).mapv_inplace(|v| -v);
            coeffs.column_mut(j).mapv_inplace(|v| -v);
        }
    }
}

/// Top-`k` principal directions of the column-centered `x`.
pub fn pca(x: ArrayView2<f64>, k: usize) -> Result<PcaResult> {
    let (f, d) = x.dim();
    if k > f.min(d) {
        return Err(Error::Precondition(format!("k = {k} exceeds min(F, D) = {}", f.min(d))));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Precondition("matrix has non-finite entries".into()));
    }
    let mean = column_means(x);
    let mut xc = x.to_owned();
    for mut row in xc.rows_mut() {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    let total: f64 = xc.iter().map(|v| v * v).sum();
    let svd = truncated_svd(xc.view(), k);
    let mut basis = svd.vt;
    let mut coefficients = xc.dot(&basis.t());
    fix_signs(&mut basis, &mut coefficients);
    let explained_ratio = svd
        .singular_values
        .iter()
        .map(|s| {
            if total > 0.0 {
                (s * s / total).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(PcaResult {
        mean,
        basis,
        coefficients,
        explained_ratio,
    })
}

/// Mean absolute elementwise error between `x` and the PCA reconstruction.
pub fn reconstruction_error_l1(x: ArrayView2<f64>, result: &PcaResult) -> Result<f64> {
    if x.dim() != (result.coefficients.nrows(), result.mean.len()) {
        return Err(Error::Shape(format!(
            "matrix is {:?}, result is for {}x{}",
            x.dim(),
            result.coefficients.nrows(),
            result.mean.len()
        )));
    }
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(abs_error_sum(x, result) / x.len() as f64)
}

fn abs_error_sum(x: ArrayView2<f64>, result: &PcaResult) -> f64 {
    let recon = result.reconstruct();
    x.iter().zip(recon.iter()).map(|(a, b)| (a - b).abs()).sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct LocalPcaReport {
    pub group_errors: Vec<f64>,
    /// Mean absolute error over every entry of the matrix.
    pub pooled_error: f64,
    /// Explained-ratio curve averaged over groups, zero-padded to `k`.
    pub mean_explained_ratio: Vec<f64>,
}

/// PCA on each column group independently.
pub fn local_pca_experiment(x: ArrayView2<f64>, grouping: &[Vec<usize>], k: usize) -> Result<LocalPcaReport> {
    let (f, d) = x.dim();
    let mut seen = vec![false; d];
    for (g, cols) in grouping.iter().enumerate() {
        if cols.is_empty() {
            return Err(Error::Precondition(format!("group {g} is empty")));
        }
        for &c in cols {
            if c >= d || seen[c] {
                return Err(Error::Precondition(format!(
                    "column {c} is out of range or grouped twice"
                )));
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Precondition("grouping does not cover every column".into()));
    }
    let results: Vec<(f64, Vec<f64>)> = grouping
        .par_iter()
        .map(|cols| {
            let sub = x.select(Axis(1), cols);
            let kg = k.min(f).min(cols.len());
            let r = pca(sub.view(), kg)?;
            let mut ratio = r.explained_ratio.clone();
            ratio.resize(k, 0.0);
            Ok((abs_error_sum(sub.view(), &r), ratio))
        })
        .collect::<Result<_>>()?;
    let n_groups = results.len().max(1) as f64;
    let mut mean_ratio = vec![0.0; k];
    for (_, r) in &results {
        mean_ratio.iter_mut().zip(r).for_each(|(m, v)| *m += v / n_groups);
    }
    let total: f64 = results.iter().map(|r| r.0).sum();
    let entries = (f * d).max(1) as f64;
    Ok(LocalPcaReport {
        group_errors: results
            .iter()
            .zip(grouping)
            .map(|((e, _), cols)| e / (f * cols.len()).max(1) as f64)
            .collect(),
        pooled_error: total / entries,
        mean_explained_ratio: mean_ratio,
    })
}

/// Random balanced grouping of Gaussians. Each Gaussian owns three consecutive
/// columns that always land in the same group.
pub fn random_grouping(n_columns: usize, n_groups: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_columns % COLUMNS_PER_GAUSSIAN != 0 {
        return Err(Error::Precondition(format!(
            "{n_columns} columns is not a whole number of Gaussians"
        )));
    }
    let n_items = n_columns / COLUMNS_PER_GAUSSIAN;
    if n_groups == 0 || n_groups > n_items {
        return Err(Error::Precondition(format!(
            "cannot split {n_items} Gaussians into {n_groups} groups"
        )));
    }
    let mut items: Vec<usize> = (0..n_items).collect();
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); n_groups];
    for (i, g) in items.into_iter().enumerate() {
        groups[i % n_groups].push(g);
    }
    Ok(groups
        .into_iter()
        .map(|mut g| {
            g.sort_unstable();
            g.into_iter()
                .flat_map(|item| (0..COLUMNS_PER_GAUSSIAN).map(move |c| item * COLUMNS_PER_GAUSSIAN + c))
                .collect()
        })
        .collect())
}

/// Contiguous grouping with `gaussians_per_group` Gaussians per group.
pub fn block_grouping(n_groups: usize, gaussians_per_group: usize) -> Vec<Vec<usize>> {
    let w = gaussians_per_group * COLUMNS_PER_GAUSSIAN;
    (0..n_groups).map(|g| (g * w..(g + 1) * w).collect()).collect()
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BlockDataParams {
    pub frames: usize,
    pub groups: usize,
    pub gaussians_per_group: usize,
    /// Latent factors per group.
    pub rank: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for BlockDataParams {
    fn default() -> Self {
        Self {
            frames: 100,
            groups: 64,
            gaussians_per_group: 256,
            rank: 16,
            snr_db: 20.0,
            seed: 0,
        }
    }
}

/// Block-correlated corrective matrix: each group is `C_g M_g` with its own
/// latent factors, plus Gaussian noise at the requested SNR. Returns the
/// matrix and its generating grouping.
pub fn block_correlated_data(p: &BlockDataParams) -> (Array2<f64>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let w = p.gaussians_per_group * COLUMNS_PER_GAUSSIAN;
    let d = p.groups * w;
    let mut x = Array2::zeros((p.frames, d));
    let scale = 1.0 / (p.rank.max(1) as f64).sqrt();
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    for g in 0..p.groups {
        let c = Array2::from_shape_fn((p.frames, p.rank), |_| normal(&mut rng));
        let m = Array2::from_shape_fn((p.rank, w), |_| normal(&mut rng) * scale);
        x.slice_mut(s![.., g * w..(g + 1) * w]).assign(&c.dot(&m));
    }
    if p.snr_db.is_finite() {
        let signal = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
        let sigma = (signal / 10f64.powf(p.snr_db / 10.0)).sqrt();
        x.mapv_inplace(|v| v + sigma * normal(&mut rng));
    }
    (x, block_grouping(p.groups, p.gaussians_per_group))
}

/// Rank-`k` factorization `X ≈ features · basis` of one part's stack.
#[derive(Clone, Debug)]
pub struct LocalFactorization {
    /// `[k, cols]`; rows beyond the stack's rank are zero.
    pub basis: Array2<f64>,
    /// `[F, k]`, scaled to unit mean square per non-degenerate column.
    pub features: Array2<f64>,
}

impl LocalFactorization {
    pub fn reconstruct(&self) -> Array2<f64> {
        self.features.dot(&self.basis)
    }
}

/// Uncentered truncated SVD of every part's `[F, cols]` stack.
pub fn fit_local_blendshapes(stacks: &[Array2<f64>], k: usize) -> Result<Vec<LocalFactorization>> {
    stacks
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let (f, cols) = x.dim();
            if f < k {
                return Err(Error::Precondition(format!("part {i}: {f} poses for rank {k}")));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Precondition(format!("part {i}: non-finite corrective")));
            }
            let mut basis = Array2::zeros((k, cols));
            let mut features = Array2::zeros((f, k));
            let svd = truncated_svd(x.view(), k.min(cols));
            let root_f = (f.max(1) as f64).sqrt();
            for j in 0..svd.singular_values.len() {
                let s = svd.singular_values[j];
                let u = svd.u.column(j);
                if s == 0.0 || u.iter().all(|&v| v == 0.0) {
                    continue;
                }
                features.column_mut(j).assign(&(&u * root_f));
                basis.row_mut(j).assign(&(&svd.vt.row(j) * (s / root_f)));
            }
            fix_signs(&mut basis, &mut features);
            Ok(LocalFactorization { basis, features })
        })
        .collect()
}
