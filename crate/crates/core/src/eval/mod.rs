//! Quantitative evaluation: FID, MSE, the lesion-count severity curve and
//! the perceptual-weight ablation.

pub mod ablation;
pub mod curve;
pub mod embedding;

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RetinalImage;

pub use ablation::{ablation_percept, AblationReport, AblationRun, AblationSetup};
pub use curve::{
    box_stats, severity_curve, BoxStats, CurveItem, CurveReport, CurveRow, SeverityModel, StubSeverity,
    StubSynthesizer, Synthesizer, CURVE_SCALES,
};
pub use embedding::{Embedding, FeatureNetEmbedding, ThumbnailEmbedding};

/// Eigenvalues below `-PSD_TOLERANCE * max(1, largest eigenvalue)` are an
/// error; anything between that and zero is clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Mean, unbiased covariance and a factor `F` with `F^T F = cov`. The factor
/// is the scaled centred data when there are no more samples than dimensions
/// (the covariance is singular there), otherwise the symmetric square root.
struct Moments {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

fn moments(features: &[Vec<f64>], label: &str) -> Result<Moments> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid(format!("feature set `{label}` needs at least 2 vectors, got {n}")));
    }
    let d = features[0].len();
    if let Some(bad) = features.iter().find(|f| f.len() != d) {
        return Err(Error::shape(format!("feature set `{label}`"), &[d], &[bad.len()]));
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = m.row_mean().transpose();
    let scale = ((n - 1) as f64).sqrt();
    let centered = DMatrix::from_fn(n, d, |i, j| (m[(i, j)] - mean[j]) / scale);
    let cov = centered.transpose() * &centered;
    let factor = if n <= d { centered } else { sqrt_psd(&cov)? };
    Ok(Moments { mean, cov, factor })
}

/// Eigenvalues of a symmetric matrix with the PSD tolerance applied.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().cloned().fold(1.0_f64, f64::max);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * top {
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// Frechet distance between Gaussians fitted (unbiased covariance) to two
/// feature sets. With `S_a = F_a^T F_a` and `S_b = F_b^T F_b`, the nonzero
/// eigenvalues of `S_a S_b` are the squared singular values of `F_a F_b^T`,
/// so `tr (S_a S_b)^(1/2)` is its nuclear norm. That form is symmetric in
/// the two sets and avoids square roots of near-zero eigenvalues.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64> {
    let a = moments(features_a, "a")?;
    let b = moments(features_b, "b")?;
    if a.mean.len() != b.mean.len() {
        return Err(Error::shape("feature dimension", &[a.mean.len()], &[b.mean.len()]));
    }
    let cross = &a.factor * b.factor.transpose();
    let tr_sqrt: f64 = cross.singular_values().iter().sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    Ok((diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Per-pixel squared error of one pair.
pub fn pair_mse(a: &RetinalImage, b: &RetinalImage) -> Result<f64> {
    if a.hw() != b.hw() {
        return Err(Error::shape("mse pair", &[a.height(), a.width()], &[b.height(), b.width()]));
    }
    let n = a.pixels().len() as f64;
    Ok(a.pixels().iter().zip(b.pixels().iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Mean over pairs of per-pixel squared error.
pub fn mse(pairs: &[(RetinalImage, RetinalImage)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let total = pairs.iter().map(|(a, b)| pair_mse(a, b)).sum::<Result<f64>>()?;
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub method: String,
    pub embedding: String,
    pub fid: f64,
    /// Only for one-to-one paired sets.
    pub mse: Option<f64>,
    pub images: Vec<ImageRecord>,
}

impl EvalReport {
    /// FID between `real` and `synth` under `embedding`; with `paired`, the
    /// sets are matched by position and MSE is reported too.
    pub fn compute(
        dataset: &str,
        method: &str,
        real: &[(String, RetinalImage)],
        synth: &[(String, RetinalImage)],
        embedding: &dyn Embedding,
        paired: bool,
    ) -> Result<Self> {
        let fa = real.iter().map(|(_, im)| embedding.embed(im)).collect::<Result<Vec<_>>>()?;
        let fb = synth.iter().map(|(_, im)| embedding.embed(im)).collect::<Result<Vec<_>>>()?;
        let fid = fid(&fa, &fb)?;
        let (mse, images) = if paired {
            if real.len() != synth.len() {
                return Err(Error::shape("paired evaluation sets", &[real.len()], &[synth.len()]));
            }
            let images = real
                .iter()
                .zip(synth)
                .map(|((id, a), (_, b))| {
                    Ok(ImageRecord {
                        id: id.clone(),
                        mse: Some(pair_mse(a, b)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = images.iter().filter_map(|r| r.mse).sum::<f64>() / images.len() as f64;
            (Some(mean), images)
        } else {
            let images = synth
                .iter()
                .map(|(id, _)| ImageRecord { id: id.clone(), mse: None })
                .collect();
            (None, images)
        };
        Ok(Self {
            dataset: dataset.into(),
            method: method.into(),
            embedding: embedding.id(),
            fid,
            mse,
            images,
        })
    }

    /// Per-image CSV: `id,mse`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "mse"])?;
        for r in &self.images {
            w.write_record([r.id.clone(), r.mse.map(|v| v.to_string()).unwrap_or_default()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary as TOML (per-image records omitted).
    pub fn summary_toml(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            dataset: &'a str,
            method: &'a str,
            embedding: &'a str,
            fid: f64,
            mse: Option<f64>,
            images: usize,
        }
        toml::to_string(&Summary {
            dataset: &self.dataset,
            method: &self.method,
            embedding: &self.embedding,
            fid: self.fid,
            mse: self.mse,
            images: self.images.len(),
        })
        .map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_sets_fid_is_squared_mean_gap() {
        let a = vec![vec![0.0]; 5];
        let b = vec![vec![1.0]; 7];
        assert!((fid(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fid_input_errors() {
        assert!(fid(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(matches!(
            fid(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn psd_check_rejects_negative_definite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(psd_eigen(&m), Err(Error::NotPsd(_))));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-9]);
        assert!(psd_eigen(&m).is_ok());
    }

    #[test]
    fn mse_extremes() {
        let zero = RetinalImage::zeros(4, 4);
        let one = RetinalImage::new(ndarray::Array3::ones((3, 4, 4))).unwrap();
        assert_eq!(mse(&[(zero.clone(), zero.clone())]).unwrap(), 0.0);
        assert_eq!(mse(&[(zero.clone(), one)]).unwrap(), 1.0);
        assert!(mse(&[(zero, RetinalImage::zeros(2, 2))]).is_err());
    }

    fn feature_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..12).prop_flat_map(|n| prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), n))
    }

    proptest! {
        #[test]
        fn fid_self_is_zero(a in feature_set()) {
            prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
        }

        #[test]
        fn fid_symmetric(a in feature_set(), b in feature_set()) {
            let ab = fid(&a, &b).unwrap();
            let ba = fid(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-6, "{} vs {}", ab, ba);
        }

        #[test]
        fn mse_zero_iff_identical(v in prop::collection::vec(0.0f64..=1.0, 12), w in prop::collection::vec(0.0f64..=1.0, 12)) {
            let a = RetinalImage::new(ndarray::Array3::from_shape_vec((3, 2, 2), v).unwrap()).unwrap();
            let b = RetinalImage::new(ndarray::Array3::from_shape_vec((3, 2, 2), w).unwrap()).unwrap();
            let m = pair_mse(&a, &b).unwrap();
            prop_assert!(m >= 0.0);
            prop_assert_eq!(m == 0.0, a == b);
        }
    }
}
