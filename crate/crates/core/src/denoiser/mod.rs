//! Conditional U-Net that predicts the clean latent from a noisy one, with
//! anchor-frame cross-attention in every block and temporal fusion hooks.

mod config;
mod unet;

use thiserror::Error;

use crate::geometry::WeightMap;
use crate::htft::{FeatureFrame, HtftError, SelectionSet, StreamingBuffer2D};
use crate::numerics::{NumericsError, Tape, Tensor, Var};

pub use config::{FusionSite, UNetConfig};
pub use unet::{denoiser_gradcheck_case, gradcheck_suite, Denoiser, ForwardOutput, StepContext};

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("invalid sigma {0}")]
    InvalidSigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Htft(#[from] HtftError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-frame conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionPack {
    /// Latent of the previous frame, `[c, H, W]`.
    pub cond_latent: Tensor,
    /// Patches of the first frame's latent, `[n, d]`.
    pub anchor_tokens: Tensor,
    /// Lane, crossing and box raster, `[3, H, W]`.
    pub raster: Tensor,
    pub weight_map: WeightMap,
}

impl ConditionPack {
    pub fn validate(&self, cfg: &UNetConfig) -> Result<(), DenoiserError> {
        let [c, h, w] = cfg.latent_shape();
        let checks: [(&str, &[usize], Vec<usize>); 4] = [
            ("cond_latent", self.cond_latent.shape(), vec![c, h, w]),
            ("anchor_tokens", self.anchor_tokens.shape(), vec![cfg.anchor_tokens(), cfg.anchor_dim()]),
            ("raster", self.raster.shape(), vec![3, h, w]),
            ("weight_map", self.weight_map.values.shape(), vec![h, w]),
        ];
        for (name, got, want) in checks {
            if got != want.as_slice() {
                return Err(DenoiserError::Shape(format!("{name}: expected {want:?}, got {got:?}")));
            }
        }
        Ok(())
    }
}

/// Splits a `[c, H, W]` latent into `p×p` patches, row-major over the patch
/// grid; each token is the patch flattened as `(c, y, x)`.
pub fn anchor_tokens(latent: &Tensor, patch: usize) -> Result<Tensor, DenoiserError> {
    let s = latent.shape();
    if s.len() != 3 || patch == 0 || s[1] % patch != 0 || s[2] % patch != 0 {
        return Err(DenoiserError::Shape(format!("cannot tile {s:?} with {patch}x{patch} patches")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let d = c * patch * patch;
    let src = latent.data();
    let mut out = vec![0.0; gh * gw * d];
    for pi in 0..gh {
        for pj in 0..gw {
            let tok = &mut out[(pi * gw + pj) * d..][..d];
            for ch in 0..c {
                for y in 0..patch {
                    for x in 0..patch {
                        tok[(ch * patch + y) * patch + x] = src[(ch * h + pi * patch + y) * w + pj * patch + x];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, d], out)?)
}

/// Per-site temporal caches for one generation or training stream.
#[derive(Debug, Clone)]
pub struct FusionState {
    sites: Vec<FusionSite>,
    buffers: Vec<StreamingBuffer2D>,
    selection: SelectionSet,
}

impl FusionState {
    pub fn new(
        sites: &[FusionSite],
        n_steps: usize,
        capacity: usize,
        selection: SelectionSet,
    ) -> Result<Self, DenoiserError> {
        selection.validate_for(capacity)?;
        let buffers = sites
            .iter()
            .map(|_| StreamingBuffer2D::new(n_steps, capacity))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            sites: sites.to_vec(),
            buffers,
            selection,
        })
    }

    pub fn sites(&self) -> &[FusionSite] {
        &self.sites
    }

    pub fn n_steps(&self) -> usize {
        self.buffers.first().map_or(0, |b| b.n_steps())
    }

    pub fn buffer(&self, site: usize) -> &StreamingBuffer2D {
        &self.buffers[site]
    }

    /// Cached tokens chosen for `site` at denoising step `step`.
    pub fn selected(&self, site: usize, step: usize) -> Result<Option<Tensor>, DenoiserError> {
        Ok(self.buffers[site].select(step, &self.selection)?)
    }

    /// Pushes one emitted frame per site, in site order.
    pub fn push(&mut self, frames: Vec<FeatureFrame>) -> Result<(), DenoiserError> {
        if frames.len() != self.buffers.len() {
            return Err(DenoiserError::Shape(format!(
                "{} feature frames for {} sites",
                frames.len(),
                self.buffers.len()
            )));
        }
        for (buf, f) in self.buffers.iter_mut().zip(frames) {
            buf.push(f)?;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        for b in &mut self.buffers {
            b.reset();
        }
    }

    pub fn token_bytes(&self) -> usize {
        self.buffers.iter().map(|b| b.token_bytes()).sum()
    }
}

/// Weighted squared error `mean(W ⊙ (x0 − x0_hat)²)`, `W` broadcast over channels.
pub fn weighted_loss(tape: &mut Tape, x0_hat: Var, x0: &Tensor, weights: &WeightMap) -> Result<Var, DenoiserError> {
    Ok(tape.weighted_mse(x0_hat, x0, &weights.values)?)
}
