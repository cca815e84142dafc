//! PCA compression of high-dimensional profile embeddings into a
//! kappa-dimensional basis.
//!
//! The covariance uses the unbiased `1/(rows-1)` normalization and is
//! diagonalized with a dense symmetric eigensolver. Component signs are
//! canonicalized (largest-magnitude entry positive) so that fitting is
//! reproducible across runs and platforms.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, Reader, Writer};
use crate::linalg::{self, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::User => "user",
            Side::Item => "item",
        })
    }
}

/// Raw profile embeddings for one side.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub side: Side,
    pub values: DenseMatrix,
}

impl EmbeddingMatrix {
    pub fn new(side: Side, values: DenseMatrix) -> Result<Self> {
        for (r, row) in values.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: r });
            }
        }
        Ok(Self { side, values })
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Checks the row count against the dataset extent for this side.
    pub fn expect_rows(&self, expected: usize) -> Result<()> {
        if self.rows() != expected {
            return Err(Error::Argument(format!(
                "{} embeddings have {} rows, dataset has {expected}",
                self.side,
                self.rows()
            )));
        }
        Ok(())
    }

    pub fn l2_normalized(&self) -> EmbeddingMatrix {
        let mut values = self.values.clone();
        for r in 0..values.rows() {
            let row = values.row_mut(r);
            let n = linalg::norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        EmbeddingMatrix {
            side: self.side,
            values,
        }
    }
}

pub fn load_embeddings(path: &Path, side: Side) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(side, formats::read_matrix(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// kappa x d_s, one principal direction per row.
    pub components: DenseMatrix,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Full-spectrum trace of the covariance, kept for variance reporting.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn kappa(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance == 0.0 {
            return 1.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(formats::PCA_MAGIC);
        w.u32(self.input_dim())?.u32(self.kappa())?;
        w.f32s(&self.mean)
            .f32s(&self.eigenvalues)
            .f32s(self.components.as_slice());
        w.finish(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::open(&bytes, formats::PCA_MAGIC)?;
        let ds = r.u32()?;
        let kappa = r.u32()?;
        let mean = r.f32s(ds, ds)?;
        let eigenvalues = r.f32s(kappa, kappa)?;
        let components = DenseMatrix::from_vec(kappa, ds, r.f32s(kappa * ds, ds)?)?;
        r.expect_end()?;
        let total_variance = eigenvalues.iter().sum();
        Ok(Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        })
    }
}

/// kappa-dimensional projected representations.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEmbeddings {
    pub side: Side,
    pub values: DenseMatrix,
}

impl CompressedEmbeddings {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            side: self.side,
            values: self.values.scaled(factor),
        }
    }
}

fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (k, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = k;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn fit_pca(matrix: &EmbeddingMatrix, kappa: usize) -> Result<PcaModel> {
    fit_rows(&matrix.values, kappa)
}

fn fit_rows(values: &DenseMatrix, kappa: usize) -> Result<PcaModel> {
    let rows = values.rows();
    let ds = values.cols();
    if rows < 2 {
        return Err(Error::Argument(format!("PCA needs at least 2 rows, got {rows}")));
    }
    if kappa == 0 || kappa > (rows - 1).min(ds) {
        return Err(Error::Argument(format!(
            "kappa={kappa} outside [1, min(rows-1={}, d_s={ds})]",
            rows - 1
        )));
    }
    let mut mean = vec![0.0; ds];
    for row in values.iter_rows() {
        linalg::axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);

    let centered = DMatrix::from_fn(rows, ds, |r, c| values.get(r, c) - mean[c]);
    let mut cov = centered.tr_mul(&centered);
    cov /= (rows - 1) as f64;
    // exact symmetry for the solver
    for i in 0..ds {
        for j in 0..i {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    let total_variance = cov.trace();

    if cov.iter().all(|&v| v == 0.0) {
        log::warn!("degenerate variance: all profile rows are identical; using coordinate axes");
        let mut components = DenseMatrix::zeros(kappa, ds);
        for k in 0..kappa {
            components.row_mut(k)[k] = 1.0;
        }
        return Ok(PcaModel {
            mean,
            components,
            eigenvalues: vec![0.0; kappa],
            total_variance: 0.0,
        });
    }

    let eigen = SymmetricEigen::try_new(cov, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..ds).collect();
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[b]
            .total_cmp(&eigen.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut components = DenseMatrix::zeros(kappa, ds);
    let mut eigenvalues = Vec::with_capacity(kappa);
    for (k, &idx) in order.iter().take(kappa).enumerate() {
        let row = components.row_mut(k);
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = eigen.eigenvectors[(c, idx)];
        }
        let n = linalg::norm(row);
        row.iter_mut().for_each(|v| *v /= n);
        canonical_sign(row);
        eigenvalues.push(eigen.eigenvalues[idx].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// Fits one basis over the row-wise concatenation of both sides.
pub fn fit_joint(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    kappa: usize,
) -> Result<PcaModel> {
    if items.rows() > 0 && users.rows() > 0 && users.dim() != items.dim() {
        return Err(Error::Argument(format!(
            "user dim {} != item dim {}",
            users.dim(),
            items.dim()
        )));
    }
    fit_rows(&users.values.vstack(&items.values)?, kappa)
}

pub fn project(model: &PcaModel, matrix: &EmbeddingMatrix) -> Result<CompressedEmbeddings> {
    if matrix.dim() != model.input_dim() {
        return Err(Error::Argument(format!(
            "embedding dim {} != model dim {}",
            matrix.dim(),
            model.input_dim()
        )));
    }
    let kappa = model.kappa();
    let mut out = DenseMatrix::zeros(matrix.rows(), kappa);
    let mut centered = vec![0.0; model.input_dim()];
    for (r, row) in matrix.values.iter_rows().enumerate() {
        for ((c, x), m) in centered.iter_mut().zip(row).zip(&model.mean) {
            *c = x - m;
        }
        let dst = out.row_mut(r);
        for (k, slot) in dst.iter_mut().enumerate() {
            *slot = linalg::dot(model.components.row(k), &centered);
        }
    }
    Ok(CompressedEmbeddings {
        side: matrix.side,
        values: out,
    })
}

/// Squared reconstruction error of `matrix` under `model`, summed over rows.
pub fn reconstruction_error(model: &PcaModel, matrix: &EmbeddingMatrix) -> Result<f64> {
    let projected = project(model, matrix)?;
    let mut total = 0.0;
    let mut recon = vec![0.0; model.input_dim()];
    for (r, row) in matrix.values.iter_rows().enumerate() {
        recon.copy_from_slice(&model.mean);
        for (k, coeff) in projected.row(r).iter().enumerate() {
            linalg::axpy(*coeff, model.components.row(k), &mut recon);
        }
        total += row
            .iter()
            .zip(&recon)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PcaMode {
    #[default]
    Joint,
    PerSide,
}

impl std::str::FromStr for PcaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(PcaMode::Joint),
            "per_side" | "per-side" => Ok(PcaMode::PerSide),
            other => Err(Error::Argument(format!("unknown pca mode '{other}'"))),
        }
    }
}

impl fmt::Display for PcaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PcaMode::Joint => "joint",
            PcaMode::PerSide => "per_side",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    pub kappa: usize,
    pub mode: PcaMode,
    pub pre_normalize: bool,
}

impl Default for CompressConfig {
    fn default() -> Self {
        Self {
            kappa: 32,
            mode: PcaMode::Joint,
            pre_normalize: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompressedProfiles {
    pub users: CompressedEmbeddings,
    pub items: CompressedEmbeddings,
    pub user_model: PcaModel,
    /// Present only in per-side mode.
    pub item_model: Option<PcaModel>,
}

/// Fits and applies the projection for both sides according to `config`.
pub fn compress_profiles(
    users: &EmbeddingMatrix,
    items: &EmbeddingMatrix,
    config: &CompressConfig,
) -> Result<CompressedProfiles> {
    let (users, items) = if config.pre_normalize {
        (users.l2_normalized(), items.l2_normalized())
    } else {
        (users.clone(), items.clone())
    };
    match config.mode {
        PcaMode::Joint => {
            let model = fit_joint(&users, &items, config.kappa)?;
            Ok(CompressedProfiles {
                users: project(&model, &users)?,
                items: project(&model, &items)?,
                user_model: model,
                item_model: None,
            })
        }
        PcaMode::PerSide => {
            let user_model = fit_pca(&users, config.kappa)?;
            let item_model = fit_pca(&items, config.kappa)?;
            Ok(CompressedProfiles {
                users: project(&user_model, &users)?,
                items: project(&item_model, &items)?,
                user_model,
                item_model: Some(item_model),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn emb(rows: &[Vec<f64>]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(Side::User, DenseMatrix::from_rows(rows).unwrap()).unwrap()
    }

    fn gaussian(rows: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        EmbeddingMatrix::new(Side::User, DenseMatrix::from_vec(rows, dim, data).unwrap()).unwrap()
    }

    #[test]
    fn hand_example_1d_axis() {
        let m = emb(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![2.0, 0.0],
            vec![-2.0, 0.0],
        ]);
        let model = fit_pca(&m, 1).unwrap();
        assert_eq!(model.mean, vec![0.0, 0.0]);
        assert!((model.eigenvalues[0] - 10.0 / 3.0).abs() < 1e-12);
        assert!((model.components.get(0, 0) - 1.0).abs() < 1e-12);
        assert!(model.components.get(0, 1).abs() < 1e-12);
        let p = project(&model, &emb(&[vec![3.0, 7.0]])).unwrap();
        assert!((p.row(0)[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_fall_back_to_axes() {
        let m = emb(&vec![vec![1.0, 2.0, 3.0]; 4]);
        let model = fit_pca(&m, 2).unwrap();
        assert_eq!(model.eigenvalues, vec![0.0, 0.0]);
        assert_eq!(model.components.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(model.components.row(1), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn kappa_out_of_range() {
        let m = gaussian(5, 3, 1);
        assert!(matches!(fit_pca(&m, 0), Err(Error::Argument(_))));
        assert!(matches!(fit_pca(&m, 4), Err(Error::Argument(_))));
        let tiny = gaussian(3, 8, 1);
        assert!(matches!(fit_pca(&tiny, 3), Err(Error::Argument(_))));
        assert!(fit_pca(&tiny, 2).is_ok());
    }

    #[test]
    fn isotropic_sample_has_flat_spectrum() {
        let m = gaussian(10_000, 4, 3);
        let model = fit_pca(&m, 2).unwrap();
        let ratio = model.eigenvalues[0] / model.eigenvalues[1];
        assert!((ratio - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn components_orthonormal_and_sorted() {
        let m = gaussian(60, 7, 5);
        let model = fit_pca(&m, 5).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let d = linalg::dot(model.components.row(a), model.components.row(b));
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-6);
            }
        }
        assert!(model.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(model.eigenvalues.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn variance_capture_bounded_by_trace() {
        let m = gaussian(40, 6, 8);
        for kappa in 1..=6 {
            let model = fit_pca(&m, kappa).unwrap();
            let sum: f64 = model.eigenvalues.iter().sum();
            assert!(sum <= model.total_variance + 1e-6);
            if kappa == 6 {
                assert!((sum - model.total_variance).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projecting_mean_gives_zero() {
        let m = gaussian(30, 5, 2);
        let model = fit_pca(&m, 3).unwrap();
        let p = project(&model, &emb(&[model.mean.clone()])).unwrap();
        assert!(p.row(0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn joint_with_empty_items_equals_user_fit() {
        let u = gaussian(20, 4, 9);
        let empty = EmbeddingMatrix::new(Side::Item, DenseMatrix::zeros(0, 4)).unwrap();
        assert_eq!(fit_joint(&u, &empty, 2).unwrap(), fit_pca(&u, 2).unwrap());
    }

    #[test]
    fn joint_with_identical_sides_rescales_covariance() {
        // Doubling every row leaves the mean unchanged and scales the
        // covariance by (2(n-1))/(2n-1) relative to the single-copy fit.
        let u = gaussian(15, 3, 4);
        let single = fit_pca(&u, 2).unwrap();
        let joint = fit_joint(&u, &u, 2).unwrap();
        let n = 15.0;
        let factor = 2.0 * (n - 1.0) / (2.0 * n - 1.0);
        for k in 0..2 {
            assert!((joint.eigenvalues[k] - factor * single.eigenvalues[k]).abs() < 1e-9);
            for c in 0..3 {
                assert!((joint.components.get(k, c) - single.components.get(k, c)).abs() < 1e-9);
            }
        }
        for c in 0..3 {
            assert!((joint.mean[c] - single.mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_two_cluster_axis() {
        // users near (5, 5, 0), items near (-5, -5, 0): the leading direction
        // is the between-cluster axis (1, 1, 0)/sqrt(2).
        let mut rows_u = Vec::new();
        let mut rows_i = Vec::new();
        for k in 0..10 {
            let jitter = 0.01 * (k as f64 - 4.5);
            rows_u.push(vec![5.0 + jitter, 5.0 - jitter, jitter]);
            rows_i.push(vec![-5.0 - jitter, -5.0 + jitter, -jitter]);
        }
        let users = emb(&rows_u);
        let items = EmbeddingMatrix::new(Side::Item, DenseMatrix::from_rows(&rows_i).unwrap())
            .unwrap();
        let model = fit_joint(&users, &items, 1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        let v = model.components.row(0);
        assert!((v[0] - h).abs() < 1e-6 && (v[1] - h).abs() < 1e-6 && v[2].abs() < 1e-6);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let u = gaussian(5, 3, 1);
        let i = gaussian(5, 4, 1);
        assert!(matches!(fit_joint(&u, &i, 1), Err(Error::Argument(_))));
        let model = fit_pca(&u, 1).unwrap();
        assert!(matches!(project(&model, &i), Err(Error::Argument(_))));
    }

    #[test]
    fn model_round_trips_through_pmpc() {
        let m = gaussian(12, 4, 6);
        let model = fit_pca(&m, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.pmpc");
        model.write(&p).unwrap();
        let back = PcaModel::read(&p).unwrap();
        assert_eq!(back.kappa(), 2);
        for (a, b) in back.components.as_slice().iter().zip(model.components.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
