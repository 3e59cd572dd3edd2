use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::curate::LabeledDataset;
use crate::error::{Error, Result};

/// Eigenvalues at or below this fraction of the largest count as zero when
/// no regularizer is given.
const RANK_TOL: f64 = 1e-10;

/// ZCA whitening fitted on flattened images.
///
/// `W = E·diag(1/√(λ+ε))·Eᵀ` from the population covariance (divisor n) of
/// the fitting set.
#[derive(Debug, Clone)]
pub struct ZcaTransform {
    dims: (usize, usize, usize),
    eps: f64,
    mean: DVector<f64>,
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    whitening: DMatrix<f64>,
}

impl ZcaTransform {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }

    /// `E·diag(√(λ+ε))·Eᵀ`.
    pub fn unwhitening(&self) -> DMatrix<f64> {
        let s = self.eigvals.map(|l| (l.max(0.0) + self.eps).sqrt());
        symmetrized(&self.eigvecs * DMatrix::from_diagonal(&s) * self.eigvecs.transpose())
    }
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn as_rows(images: &[f32], d: usize) -> DMatrix<f64> {
    DMatrix::from_row_iterator(images.len() / d, d, images.iter().map(|&v| v as f64))
}

pub fn zca_fit(images: &LabeledDataset, eps: f64) -> Result<ZcaTransform> {
    if images.len() < 2 {
        return Err(Error::InsufficientData { need: 2, got: images.len() });
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("zca eps must be >= 0, got {eps}")));
    }
    let d = images.image_len();
    let n = images.len();
    let mut x = as_rows(images.pixels(), d);
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = symmetrized(x.transpose() * &x / n as f64);
    let eig = SymmetricEigen::new(cov);
    let top = eig.eigenvalues.max().max(f64::MIN_POSITIVE);
    if eps == 0.0 {
        let (index, &value) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("at least one eigenvalue");
        if value <= RANK_TOL * top {
            return Err(Error::RankDeficient { index, value });
        }
    }
    let s = eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt());
    let whitening = symmetrized(&eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose());
    Ok(ZcaTransform {
        dims: images.dims(),
        eps,
        mean,
        eigvals: eig.eigenvalues,
        eigvecs: eig.eigenvectors,
        whitening,
    })
}

fn check_dims(t: &ZcaTransform, images: &LabeledDataset) -> Result<()> {
    if images.dims() != t.dims {
        return Err(Error::InvalidArgument(format!(
            "images {:?} do not match the fitted {:?}",
            images.dims(),
            t.dims
        )));
    }
    Ok(())
}

/// `(x − mean)·W` per flattened image.
pub fn zca_apply(t: &ZcaTransform, images: &LabeledDataset) -> Result<LabeledDataset> {
    check_dims(t, images)?;
    if images.is_empty() {
        return Ok(images.clone());
    }
    let d = images.image_len();
    let mut x = as_rows(images.pixels(), d);
    for mut row in x.row_iter_mut() {
        row -= t.mean.transpose();
    }
    let y = x * &t.whitening;
    images.with_pixels(row_major(&y))
}

/// Analytic inverse of [`zca_apply`]: `y·W⁻¹ + mean`.
pub fn zca_inverse(t: &ZcaTransform, images: &LabeledDataset) -> Result<LabeledDataset> {
    check_dims(t, images)?;
    if images.is_empty() {
        return Ok(images.clone());
    }
    let d = images.image_len();
    let mut x = as_rows(images.pixels(), d) * t.unwhitening();
    for mut row in x.row_iter_mut() {
        row += t.mean.transpose();
    }
    images.with_pixels(row_major(&x))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        out.extend(row.iter().map(|&v| v as f32));
    }
    out
}

/// Frobenius distance between the population covariance of `images` and
/// the identity.
pub fn covariance_distance_from_identity(images: &LabeledDataset) -> f64 {
    let d = images.image_len();
    let n = images.len() as f64;
    let mut x = as_rows(images.pixels(), d);
    let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n));
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = x.transpose() * &x / n;
    (cov - DMatrix::<f64>::identity(d, d)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(n: usize, d: usize, pixels: Vec<f32>) -> LabeledDataset {
        LabeledDataset::from_images((1, 1, d), 1, pixels, vec![0; n]).unwrap()
    }

    #[test]
    fn two_point_unit_variance() {
        let t = zca_fit(&flat(2, 1, vec![-1.0, 1.0]), 0.0).unwrap();
        assert!((t.whitening()[(0, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_deficiency_is_named() {
        // second feature is a copy of the first
        let d = flat(3, 2, vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0]);
        assert!(matches!(zca_fit(&d, 0.0), Err(Error::RankDeficient { .. })));
        assert!(zca_fit(&d, 1e-3).is_ok());
    }

    #[test]
    fn whitening_centers_and_whitens() {
        let mut rng = crate::seed::rng(3, &[]);
        use rand::Rng;
        let n = 400;
        let d = 6;
        // correlated features
        let mut pixels = Vec::with_capacity(n * d);
        for _ in 0..n {
            let z: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for j in 0..d {
                pixels.push(z[j] + 0.5 * z[(j + 1) % d] + 3.0);
            }
        }
        let ds = flat(n, d, pixels);
        let t = zca_fit(&ds, 0.0).unwrap();
        let w = t.whitening();
        assert!((w - w.transpose()).abs().max() < 1e-5);
        let out = zca_apply(&t, &ds).unwrap();
        assert!(covariance_distance_from_identity(&out) < 1e-3);
        for j in 0..d {
            let m: f64 = (0..n).map(|i| out.image(i)[j] as f64).sum::<f64>() / n as f64;
            assert!(m.abs() < 1e-5, "feature {j} mean {m}");
        }
        let back = zca_inverse(&t, &out).unwrap();
        for (a, b) in back.pixels().iter().zip(ds.pixels()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
