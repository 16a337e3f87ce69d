use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{scene_conditions, stream_generate_with, ConditionCamera, FusionMode, GenerationState, PipelineError, RunConfig, UNetFrameDenoiser};
use crate::denoiser::Denoiser;
use crate::metrics::{drift_metric, ls_slope, proxy_frechet, psnr, Drift};
use crate::numerics::{derive_seed, Tensor};
use crate::synthdata::Dataset;

/// Autoregressive generation quality over a set of annotated scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Proxy Fréchet distance between all generated and all ground-truth latents.
    pub frechet: f64,
    /// Drift averaged over scenes frame by frame, with its slope.
    pub drift: Drift,
    /// Mean latent PSNR per generated frame index, averaged over scenes.
    pub psnr: Vec<f64>,
    pub ms_per_frame: f64,
}

/// Generates `n_frames` (default: each scene's length minus one) from every
/// scene's first latent under its annotated conditions.
pub fn evaluate(
    model: &Denoiser,
    cfg: &RunConfig,
    ds: &Dataset,
    mode: FusionMode,
    n_frames: Option<usize>,
    noise_seed: u64,
) -> Result<EvalReport, PipelineError> {
    let schedule = cfg.schedule.build()?;
    let cam = ConditionCamera::for_dataset(ds, cfg.weights);
    let (mut all_gen, mut all_gt) = (Vec::new(), Vec::new());
    let mut series: Vec<Vec<f64>> = Vec::new();
    let mut psnrs: Vec<Vec<f64>> = Vec::new();
    let mut frames = 0usize;
    let start = Instant::now();
    for (si, scene) in ds.scenes.iter().enumerate() {
        let n = n_frames.unwrap_or(scene.len() - 1).min(scene.len() - 1);
        let conds = scene_conditions(scene, &cam)?;
        let mut state =
            GenerationState::new(&scene.latents[0], &cfg.model, mode, schedule.n_steps(), cfg.buffer_capacity, &cfg.selection)?;
        let mut gen: Vec<Tensor> = Vec::with_capacity(n);
        stream_generate_with(
            &mut UNetFrameDenoiser { model },
            &schedule,
            &mut state,
            n,
            derive_seed(noise_seed, &[si as u64]),
            |t| Ok(conds[t].clone()),
            |_, x| {
                gen.push(x.clone());
                Ok(())
            },
        )?;
        frames += n;
        let gt = &scene.latents[1..=n];
        series.push(drift_metric(&gen, gt).map_err(|e| PipelineError::Contract(e.to_string()))?.series);
        psnrs.push(
            gen.iter()
                .zip(gt)
                .map(|(a, b)| psnr(a, b, 1.0).map_err(|e| PipelineError::Contract(e.to_string())))
                .collect::<Result<_, _>>()?,
        );
        all_gen.extend(gen);
        all_gt.extend_from_slice(gt);
    }
    let ms_per_frame = start.elapsed().as_secs_f64() * 1e3 / frames.max(1) as f64;
    let frechet = proxy_frechet(&all_gen, &all_gt).map_err(|e| PipelineError::Contract(e.to_string()))?;
    let mean_over = |rows: &[Vec<f64>]| -> Vec<f64> {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        (0..len)
            .map(|i| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.get(i).copied()).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            })
            .collect()
    };
    let mean_series = mean_over(&series);
    let slope = ls_slope(&mean_series);
    Ok(EvalReport {
        frechet,
        drift: Drift {
            series: mean_series,
            slope,
        },
        psnr: mean_over(&psnrs),
        ms_per_frame,
    })
}
