use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::numerics::dct::{dct2, idct2};
use crate::numerics::Tensor;

/// Degradation applied to the condition latent during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// `keep_fraction ~ Uniform[lo, hi]` of the maximal radial DCT index.
    pub keep_fraction: [f64; 2],
    pub cond_dropout_p: f64,
    pub cond_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            keep_fraction: [0.3, 1.0],
            cond_dropout_p: 0.05,
            cond_noise_sigma: 0.02,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            keep_fraction: [1.0, 1.0],
            cond_dropout_p: 0.0,
            cond_noise_sigma: 0.0,
        }
    }
}

/// Zeroes DCT coefficients whose radial index `sqrt(u² + v²)` exceeds
/// `keep · sqrt((h-1)² + (w-1)²)`, per channel.
pub fn low_pass(x: &Tensor, keep: f64) -> Result<Tensor, PipelineError> {
    let [c, h, w] = match x.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(PipelineError::Contract(format!("low_pass expects [c, h, w], got {s:?}"))),
    };
    let r_max = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
    let r = keep * r_max;
    let mut out = Vec::with_capacity(x.numel());
    for ch in 0..c {
        let plane = Tensor::new(&[h, w], x.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        let mut coef = dct2(&plane)?;
        for u in 0..h {
            for v in 0..w {
                if (((u * u + v * v) as f64).sqrt()) > r {
                    coef.data_mut()[u * w + v] = 0.0;
                }
            }
        }
        out.extend_from_slice(idct2(&coef)?.data());
    }
    Ok(Tensor::new(&[c, h, w], out)?)
}

/// DCT low-pass with a random cutoff, then whole-condition dropout with
/// probability `cond_dropout_p`, then additive Gaussian noise.
pub fn augment_condition(cond: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor, PipelineError> {
    let [lo, hi] = cfg.keep_fraction;
    let keep = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let mut out = if keep >= 1.0 { cond.clone() } else { low_pass(cond, keep)? };
    if cfg.cond_dropout_p > 0.0 && rng.random_bool(cfg.cond_dropout_p) {
        out = Tensor::zeros(cond.shape());
    }
    if cfg.cond_noise_sigma > 0.0 {
        let s = cfg.cond_noise_sigma as f32;
        for v in out.data_mut() {
            let n: f32 = rng.sample(StandardNormal);
            *v += s * n;
        }
    }
    Ok(out)
}
