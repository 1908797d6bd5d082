//! Per-dimension normalization and PCA orthogonalization of feature grids,
//! halving the feature dimension. Fitting streams Welford moments and a
//! co-moment matrix over grid cells; the eigen-decomposition is a plain
//! Jacobi rotation sweep, which is plenty at these sizes (D <= 512).
//!
//! The projection orthogonalizes but does not whiten by default; eigenvalue
//! scaling is retained in projected coordinates. A whiten option exists for
//! study.

use crate::cnn::FeatureGrid;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// Variance floor below which a dimension is treated as dead: its std is
/// forced to 1 so downstream arithmetic stays finite.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Fitted normalization + projection for one CNN layer.
///
/// `projection` is `[D, K]` with orthonormal columns and `K = floor(D/2)`;
/// a cell vector `v` maps to `projection^T ((v - mean) / std)`.
#[derive(Debug, Clone)]
pub struct PreprocessParams<T: Element> {
    mean: Tensor<T>,
    std: Tensor<T>,
    projection: Tensor<T>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions {
    /// Scale projection columns by 1/sqrt(eigenvalue), making projected
    /// coordinates unit-variance on the fitting corpus.
    pub whiten: bool,
}

impl<T: Element> PreprocessParams<T> {
    /// Validate and assemble parameters (columns orthonormal within 1e-8,
    /// strictly positive std, K = floor(D/2)).
    pub fn new(mean: Tensor<T>, std: Tensor<T>, projection: Tensor<T>) -> Result<Self> {
        if mean.rank() != 1 || std.shape() != mean.shape() {
            return Err(Error::shape("preprocess mean/std", mean.shape(), std.shape()));
        }
        let d = mean.shape()[0];
        if projection.rank() != 2 || projection.shape()[0] != d || projection.shape()[1] != d / 2 {
            return Err(Error::shape("preprocess projection", projection.shape(), &[d, d / 2]));
        }
        if d < 2 {
            return Err(Error::InvalidArgument(
                "preprocess needs feature depth >= 2".into(),
            ));
        }
        if std.data().iter().any(|&s| s <= T::zero()) {
            return Err(Error::InvalidArgument("std components must be positive".into()));
        }
        let k = d / 2;
        let gram = projection.transpose()?.matmul(&projection)?;
        for i in 0..k {
            for j in 0..k {
                let expected = if i == j { 1.0 } else { 0.0 };
                let got = gram.get(&[i, j]).to_f64();
                if (got - expected).abs() > 1e-8 {
                    return Err(Error::InvalidArgument(format!(
                        "projection columns not orthonormal: gram[{i}][{j}] = {got}"
                    )));
                }
            }
        }
        Ok(PreprocessParams {
            mean,
            std,
            projection,
        })
    }

    /// Assemble without the orthonormality check (used by the whiten mode,
    /// whose columns are orthogonal but deliberately rescaled).
    pub fn new_unchecked_scale(mean: Tensor<T>, std: Tensor<T>, projection: Tensor<T>) -> Result<Self> {
        let d = mean.shape()[0];
        if projection.rank() != 2 || projection.shape()[0] != d || projection.shape()[1] != d / 2 {
            return Err(Error::shape("preprocess projection", projection.shape(), &[d, d / 2]));
        }
        Ok(PreprocessParams {
            mean,
            std,
            projection,
        })
    }

    pub fn mean(&self) -> &Tensor<T> {
        &self.mean
    }

    pub fn std(&self) -> &Tensor<T> {
        &self.std
    }

    pub fn projection(&self) -> &Tensor<T> {
        &self.projection
    }

    pub fn input_depth(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn output_depth(&self) -> usize {
        self.projection.shape()[1]
    }

    /// Project one cell vector.
    pub fn apply_cell(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        if v.shape() != self.mean.shape() {
            return Err(Error::shape("preprocess cell", v.shape(), self.mean.shape()));
        }
        let d = self.input_depth();
        let normalized = normalize_rows(&v.reshape(&[1, d])?, &self.mean, &self.std)?;
        normalized.matmul(&self.projection)?.reshape(&[self.output_depth()])
    }

    /// Normalize and project every cell of a grid: `[H,W,D] -> [H,W,K]`.
    pub fn apply(&self, grid: &FeatureGrid<T>) -> Result<FeatureGrid<T>> {
        let (h, w, d) = (grid.height(), grid.width(), grid.depth());
        if d != self.input_depth() {
            return Err(Error::shape("preprocess apply", &[h, w, d], self.mean.shape()));
        }
        let cells = grid.values.reshape(&[h * w, d])?;
        let normalized = normalize_rows(&cells, &self.mean, &self.std)?;
        let projected = normalized.matmul(&self.projection)?;
        FeatureGrid::new(
            grid.layer_name.clone(),
            projected.reshape(&[h, w, self.output_depth()])?,
        )
    }

    /// Tape version of [`apply`](Self::apply); parameters enter as
    /// constants, so gradients flow only into the grid.
    pub fn build_apply(&self, tape: &mut Tape<T>, grid: NodeId) -> Result<NodeId> {
        let shape = tape.value(grid).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.input_depth() {
            return Err(Error::shape("preprocess build_apply", &shape, self.mean.shape()));
        }
        let (h, w, d) = (shape[0], shape[1], shape[2]);
        let k = self.output_depth();
        // (v - mean) / std  ==  v * (1/std) + (-mean/std)
        let inv_std = self.std.map(|s| T::one() / s);
        let offset = self
            .mean
            .mul(&inv_std)
            .expect("mean/std shapes validated")
            .scale(-T::one());
        let scale_node = tape.constant(inv_std);
        let offset_node = tape.constant(offset);
        let proj_node = tape.constant(self.projection.clone());
        let cells = tape.reshape(grid, &[h * w, d])?;
        let scaled = tape.mul_row(cells, scale_node)?;
        let normalized = tape.add_row(scaled, offset_node)?;
        let projected = tape.matmul(normalized, proj_node)?;
        tape.reshape(projected, &[h, w, k])
    }
}

fn normalize_rows<T: Element>(
    cells: &Tensor<T>,
    mean: &Tensor<T>,
    std: &Tensor<T>,
) -> Result<Tensor<T>> {
    let inv_std = std.map(|s| T::one() / s);
    let offset = mean.mul(&inv_std)?.scale(-T::one());
    cells.mul_row(&inv_std)?.add_row(&offset)
}

/// Streaming moment accumulator over feature-grid cells: Welford mean and
/// variance plus the co-moment matrix, all in wide precision.
#[derive(Debug)]
pub struct MomentAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    comoment: Vec<f64>, // D x D, row-major
}

impl MomentAccumulator {
    pub fn new(depth: usize) -> Self {
        MomentAccumulator {
            count: 0,
            mean: vec![0.0; depth],
            m2: vec![0.0; depth],
            comoment: vec![0.0; depth * depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push_cell(&mut self, cell: &[f64]) {
        debug_assert_eq!(cell.len(), self.mean.len());
        let d = self.mean.len();
        self.count += 1;
        let n = self.count as f64;
        // delta against the old mean, then update the mean, then delta2
        // against the new mean; comoment gets delta * delta2.
        let mut delta = vec![0.0; d];
        for i in 0..d {
            delta[i] = cell[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..d {
            let delta2_i = cell[i] - self.mean[i];
            self.m2[i] += delta[i] * delta2_i;
            for j in 0..d {
                self.comoment[i * d + j] += delta[i] * (cell[j] - self.mean[j]);
            }
        }
    }

    pub fn push_grid<T: Element>(&mut self, grid: &FeatureGrid<T>) -> Result<()> {
        let d = grid.depth();
        if d != self.depth() {
            return Err(Error::shape("moment accumulator", &[d], &[self.depth()]));
        }
        let data = grid.values.data();
        let mut cell = vec![0.0; d];
        for chunk in data.chunks_exact(d) {
            for (dst, src) in cell.iter_mut().zip(chunk.iter()) {
                *dst = src.to_f64();
            }
            self.push_cell(&cell);
        }
        Ok(())
    }

    /// Population variance per dimension.
    pub fn variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2.iter().map(|&m| m / n).collect()
    }

    /// Population covariance matrix.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.comoment.iter().map(|&m| m / n).collect()
    }
}

/// Fit normalization and projection on a corpus of feature grids.
///
/// All grids must share depth `D >= 2`; the corpus must contain more cells
/// than the output dimension `K = floor(D/2)`. Dead dimensions (variance
/// below [`VARIANCE_FLOOR`]) get std 1 and a warning.
pub fn fit<'a, T: Element + 'a>(
    corpus: impl IntoIterator<Item = &'a FeatureGrid<T>>,
    options: FitOptions,
) -> Result<PreprocessParams<T>> {
    let mut acc: Option<MomentAccumulator> = None;
    for grid in corpus {
        let acc = acc.get_or_insert_with(|| MomentAccumulator::new(grid.depth()));
        acc.push_grid(grid)?;
    }
    let acc = acc.ok_or_else(|| Error::EmptyCorpus("preprocess fit".into()))?;
    fit_from_moments(&acc, options)
}

/// Finish a fit from accumulated moments.
pub fn fit_from_moments<T: Element>(
    acc: &MomentAccumulator,
    options: FitOptions,
) -> Result<PreprocessParams<T>> {
    let d = acc.depth();
    if d < 2 {
        return Err(Error::InvalidArgument(format!(
            "preprocess fit needs depth >= 2, got {d}"
        )));
    }
    let k = d / 2;
    if acc.count() <= k as u64 {
        return Err(Error::EmptyCorpus(format!(
            "preprocess fit needs more than {k} cells, got {}",
            acc.count()
        )));
    }
    let mean = acc.mean.clone();
    let mut std = vec![0.0; d];
    for (i, &var) in acc.variance().iter().enumerate() {
        if var < VARIANCE_FLOOR {
            log::warn!("preprocess fit: dimension {i} has variance {var:.3e}; std floored to 1");
            std[i] = 1.0;
        } else {
            std[i] = var.sqrt();
        }
    }
    // Covariance of the normalized cells: normalization is per-dimension
    // affine, so cov((v - mu)/sigma) = cov(v) / (sigma_i * sigma_j).
    let cov_raw = acc.covariance();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = cov_raw[i * d + j] / (std[i] * std[j]);
        }
    }
    let (eigenvalues, eigenvectors) = jacobi_eigen_symmetric(&cov, d);
    // top-K eigenvectors by eigenvalue, descending
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let mut projection = vec![0.0; d * k];
    for (col, &src) in order.iter().take(k).enumerate() {
        // deterministic sign: the component of largest magnitude is positive
        let mut pivot = 0;
        let mut best = 0.0;
        for row in 0..d {
            let mag = eigenvectors[row * d + src].abs();
            if mag > best {
                best = mag;
                pivot = row;
            }
        }
        let sign = if eigenvectors[pivot * d + src] < 0.0 { -1.0 } else { 1.0 };
        let col_scale = if options.whiten {
            sign / eigenvalues[order[col]].max(VARIANCE_FLOOR).sqrt()
        } else {
            sign
        };
        for row in 0..d {
            projection[row * k + col] = eigenvectors[row * d + src] * col_scale;
        }
    }
    let mean_t = Tensor::from_vec(&[d], mean.iter().map(|&v| T::from_f64(v)).collect())?;
    let std_t = Tensor::from_vec(&[d], std.iter().map(|&v| T::from_f64(v)).collect())?;
    let proj_t = Tensor::from_vec(&[d, k], projection.iter().map(|&v| T::from_f64(v)).collect())?;
    if options.whiten {
        PreprocessParams::new_unchecked_scale(mean_t, std_t, proj_t)
    } else {
        PreprocessParams::new(mean_t, std_t, proj_t)
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns, both unordered).
pub fn jacobi_eigen_symmetric(matrix: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), d * d);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let max_sweeps = 64;
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let eigenvalues = (0..d).map(|i| a[i * d + i]).collect();
    (eigenvalues, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_from_cells(cells: &[Vec<f64>]) -> FeatureGrid<f64> {
        let d = cells[0].len();
        let h = cells.len();
        let data: Vec<f64> = cells.iter().flatten().copied().collect();
        FeatureGrid::new("test", Tensor::from_vec(&[h, 1, d], data).unwrap()).unwrap()
    }

    #[test]
    fn jacobi_recovers_diagonal() {
        let m = vec![4.0, 0.0, 0.0, 1.0];
        let (vals, vecs) = jacobi_eigen_symmetric(&m, 2);
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] - 1.0).abs() < 1e-12);
        assert!((sorted[1] - 4.0).abs() < 1e-12);
        // eigenvectors of a diagonal matrix are the axes
        for (i, &val) in vals.iter().enumerate() {
            let axis = if (val - 4.0).abs() < 1e-9 { 0 } else { 1 };
            assert!((vecs[axis * 2 + i].abs() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobi_matches_hand_solved_2x2() {
        // [[2,1],[1,2]] has eigenvalues 3 and 1 with vectors (1,1)/sqrt2, (1,-1)/sqrt2
        let m = vec![2.0, 1.0, 1.0, 2.0];
        let (vals, vecs) = jacobi_eigen_symmetric(&m, 2);
        let hi = if vals[0] > vals[1] { 0 } else { 1 };
        assert!((vals[hi] - 3.0).abs() < 1e-12);
        assert!((vals[1 - hi] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[hi].abs() - inv_sqrt2).abs() < 1e-9);
        assert!((vecs[2 + hi].abs() - inv_sqrt2).abs() < 1e-9);
    }

    #[test]
    fn welford_matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 5;
        let cells: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
            .collect();
        let mut acc = MomentAccumulator::new(d);
        for c in &cells {
            acc.push_cell(c);
        }
        let n = cells.len() as f64;
        for i in 0..d {
            let mean: f64 = cells.iter().map(|c| c[i]).sum::<f64>() / n;
            assert!((acc.mean[i] - mean).abs() < 1e-12);
            let var: f64 = cells.iter().map(|c| (c[i] - mean).powi(2)).sum::<f64>() / n;
            assert!((acc.variance()[i] - var).abs() < 1e-12);
            for j in 0..d {
                let mean_j: f64 = cells.iter().map(|c| c[j]).sum::<f64>() / n;
                let cov: f64 = cells
                    .iter()
                    .map(|c| (c[i] - mean) * (c[j] - mean_j))
                    .sum::<f64>()
                    / n;
                assert!((acc.covariance()[i * d + j] - cov).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fit_anisotropic_2d_picks_dominant_axis() {
        // cells ~ (a, b) with var(a) >> var(b) after normalization both are
        // unit variance; correlate them so the top eigenvector is known.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cells: Vec<Vec<f64>> = (0..5000)
            .map(|_| {
                let shared: f64 = rng.gen_range(-1.0..1.0);
                let noise: f64 = rng.gen_range(-0.1..0.1);
                vec![shared + noise, shared - noise]
            })
            .collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions::default()).unwrap();
        assert_eq!(params.output_depth(), 1);
        // dominant direction of perfectly correlated unit-variance pair is (1,1)/sqrt2
        let p0 = params.projection().get(&[0, 0]);
        let p1 = params.projection().get(&[1, 0]);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((p0 - inv_sqrt2).abs() < 0.05, "p0={p0}");
        assert!((p1 - inv_sqrt2).abs() < 0.05, "p1={p1}");
    }

    #[test]
    fn zero_variance_dimension_floors_std() {
        let cells: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 7.0]).collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions::default()).unwrap();
        assert_eq!(params.std().get(&[1]), 1.0);
    }

    #[test]
    fn apply_mean_cell_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = 4;
        let cells: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions::default()).unwrap();
        let out = params.apply_cell(params.mean()).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projection_slices_components() {
        let d = 4;
        let mean = Tensor::zeros(&[d]);
        let std = Tensor::filled(&[d], 1.0);
        let mut proj = Tensor::zeros(&[d, 2]);
        proj.set(&[0, 0], 1.0);
        proj.set(&[1, 1], 1.0);
        let params = PreprocessParams::new(mean, std, proj).unwrap();
        let v = Tensor::from_vec(&[d], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = params.apply_cell(&v).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn apply_is_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let d = 6;
        let cells: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let params = fit([&grid_from_cells(&cells)], FitOptions::default()).unwrap();
        let v = Tensor::from_vec(&[d], (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let w = Tensor::from_vec(&[d], (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let a = 0.3;
        let combo = v.scale(a).add(&w.scale(1.0 - a)).unwrap();
        let lhs = params.apply_cell(&combo).unwrap();
        let rhs = params
            .apply_cell(&v)
            .unwrap()
            .scale(a)
            .add(&params.apply_cell(&w).unwrap().scale(1.0 - a))
            .unwrap();
        assert!(crate::tensor::max_abs_diff(&lhs, &rhs).unwrap() < 1e-10);
    }

    #[test]
    fn projected_covariance_is_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let d = 8;
        // correlated cells: random mixing of independent sources
        let mix: Vec<f64> = (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cells: Vec<Vec<f64>> = (0..4000)
            .map(|_| {
                let src: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                (0..d)
                    .map(|i| (0..d).map(|j| mix[i * d + j] * src[j]).sum())
                    .collect()
            })
            .collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions::default()).unwrap();
        let projected = params.apply(&grid).unwrap();
        let k = params.output_depth();
        let mut acc = MomentAccumulator::new(k);
        acc.push_grid(&projected).unwrap();
        let cov = acc.covariance();
        let max_diag = (0..k).map(|i| cov[i * k + i]).fold(0.0, f64::max);
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    assert!(
                        cov[i * k + j].abs() < 1e-6 * max_diag,
                        "off-diagonal {i},{j} = {}",
                        cov[i * k + j]
                    );
                }
            }
        }
    }

    #[test]
    fn whiten_makes_projected_variance_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let cells: Vec<Vec<f64>> = (0..3000)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                vec![3.0 * a, b, a + b, a - 0.5 * b]
            })
            .collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions { whiten: true }).unwrap();
        let projected = params.apply(&grid).unwrap();
        let k = params.output_depth();
        let mut acc = MomentAccumulator::new(k);
        acc.push_grid(&projected).unwrap();
        for (i, &var) in acc.variance().iter().enumerate() {
            assert!((var - 1.0).abs() < 1e-6, "dim {i} variance {var}");
        }
    }

    #[test]
    fn fit_rejects_degenerate_inputs() {
        assert!(fit::<f64>([], FitOptions::default()).is_err());
        // depth 1
        let g1 = FeatureGrid::new("t", Tensor::<f64>::zeros(&[4, 4, 1])).unwrap();
        assert!(fit([&g1], FitOptions::default()).is_err());
        // too few cells for K+1
        let g2 = FeatureGrid::new("t", Tensor::<f64>::zeros(&[1, 1, 8])).unwrap();
        assert!(fit([&g2], FitOptions::default()).is_err());
        // mismatched depths
        let g3 = FeatureGrid::new("t", Tensor::<f64>::zeros(&[4, 4, 4])).unwrap();
        let g4 = FeatureGrid::new("t", Tensor::<f64>::zeros(&[4, 4, 6])).unwrap();
        assert!(fit([&g3, &g4], FitOptions::default()).is_err());
    }

    #[test]
    fn depth_halving_96_to_48() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = 96;
        let cells: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let grid = grid_from_cells(&cells);
        let params = fit([&grid], FitOptions::default()).unwrap();
        assert_eq!(params.output_depth(), 48);
        let projected = params.apply(&grid).unwrap();
        assert_eq!(projected.depth(), 48);
    }
}
