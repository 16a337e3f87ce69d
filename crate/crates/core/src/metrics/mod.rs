//! Evaluation: PSNR, a Fréchet distance over handcrafted frame features, and drift.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::dct::dct2;
use crate::numerics::{NumericsError, Tensor};

/// Radial DCT bands in the feature vector.
pub const DCT_BANDS: usize = 8;
/// Mean, variance and the band energies.
pub const FEATURE_DIM: usize = 2 + DCT_BANDS;
/// Ridge added to covariances before the matrix square root.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} items, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Peak signal-to-noise ratio in dB for signals in `[0, peak]`; identical
/// inputs give `+inf`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64, MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::LengthMismatch(a.numel(), b.numel()));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean, variance and mean squared DCT coefficient in 8 equal radial bands
/// (over all channels).
pub fn frame_features(x: &Tensor) -> Result<[f64; FEATURE_DIM], MetricsError> {
    let s = x.shape();
    let (c, h, w) = match *s {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => {
            return Err(MetricsError::Numerics(NumericsError::RankMismatch {
                op: "frame_features",
                expected: 3,
                shape: s.to_vec(),
            }))
        }
    };
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let r_max = (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt().max(1.0);
    let mut energy = [0.0f64; DCT_BANDS];
    let mut count = [0usize; DCT_BANDS];
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let coef = dct2(&plane)?;
        for u in 0..h {
            for v in 0..w {
                let r = ((u * u + v * v) as f64).sqrt() / r_max;
                let b = ((r * DCT_BANDS as f64) as usize).min(DCT_BANDS - 1);
                energy[b] += (coef.data()[u * w + v] as f64).powi(2);
                count[b] += 1;
            }
        }
    }
    let mut f = [0.0; FEATURE_DIM];
    f[0] = mean;
    f[1] = var;
    for b in 0..DCT_BANDS {
        f[2 + b] = if count[b] > 0 { energy[b] / count[b] as f64 } else { 0.0 };
    }
    Ok(f)
}

fn gaussian(features: &[[f64; FEATURE_DIM]]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len() as f64;
    let mut mu = DVector::zeros(FEATURE_DIM);
    for f in features {
        mu += DVector::from_row_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(FEATURE_DIM, FEATURE_DIM);
    for f in features {
        let d = DVector::from_row_slice(f) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    (mu, cov)
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets:
/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½)`.
pub fn frechet_from_features(a: &[[f64; FEATURE_DIM]], b: &[[f64; FEATURE_DIM]]) -> Result<f64, MetricsError> {
    for set in [a, b] {
        if set.len() < 2 {
            return Err(MetricsError::TooFew { need: 2, got: set.len() });
        }
    }
    let (mu1, s1) = gaussian(a);
    let (mu2, s2) = gaussian(b);
    let ridge = DMatrix::<f64>::identity(FEATURE_DIM, FEATURE_DIM) * COV_RIDGE;
    let (s1, s2) = (s1 + &ridge, s2 + &ridge);
    let r1 = sqrt_psd(&s1);
    let cross = sqrt_psd(&(&r1 * &s2 * &r1));
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Fréchet distance over per-frame features of two frame sets.
pub fn proxy_frechet(generated: &[Tensor], reference: &[Tensor]) -> Result<f64, MetricsError> {
    let fa = generated.iter().map(frame_features).collect::<Result<Vec<_>, _>>()?;
    let fb = reference.iter().map(frame_features).collect::<Result<Vec<_>, _>>()?;
    frechet_from_features(&fa, &fb)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// `d_T`: mean absolute feature difference at each frame.
    pub series: Vec<f64>,
    /// Least-squares slope of `d_T` against `T`.
    pub slope: f64,
}

/// Least-squares slope of `y` against `0, 1, 2, ...`; 0 for fewer than 2 points.
pub fn ls_slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &v) in y.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (v - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Mean absolute difference between two feature vectors; one drift sample.
pub fn feature_distance(a: &[f64; FEATURE_DIM], b: &[f64; FEATURE_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / FEATURE_DIM as f64
}

pub fn drift_metric(generated: &[Tensor], gt: &[Tensor]) -> Result<Drift, MetricsError> {
    if generated.len() != gt.len() {
        return Err(MetricsError::LengthMismatch(generated.len(), gt.len()));
    }
    let series = generated
        .iter()
        .zip(gt)
        .map(|(g, t)| Ok(feature_distance(&frame_features(g)?, &frame_features(t)?)))
        .collect::<Result<Vec<f64>, MetricsError>>()?;
    let slope = ls_slope(&series);
    Ok(Drift { series, slope })
}
