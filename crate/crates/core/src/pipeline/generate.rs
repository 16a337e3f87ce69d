use super::{predict_next_conditions, ConditionCamera, FrameConditions, PipelineError};
use crate::denoiser::{anchor_tokens, ConditionPack, Denoiser, FusionState};
use crate::geometry::Polyline;
use crate::htft::SelectionSet;
use crate::numerics::{derive_seed, seeded_rng, Tensor};
use crate::scheduler::{sampler_step, NoiseSchedule};
use crate::synthdata::SceneState;

/// Anything that maps a noisy latent to a clean estimate for one step of one frame.
pub trait FrameDenoiser {
    /// `fusion` carries the temporal caches when fusion is enabled; the
    /// implementation reads step `step` and pushes frame `time`'s features.
    fn denoise(
        &mut self,
        x_t: &Tensor,
        sigma: f64,
        cond: &ConditionPack,
        step: usize,
        time: usize,
        fusion: Option<&mut FusionState>,
    ) -> Result<Tensor, PipelineError>;
}

/// Returns the ground-truth latent of the requested frame at every step.
pub struct OracleDenoiser {
    pub latents: Vec<Tensor>,
}

impl FrameDenoiser for OracleDenoiser {
    fn denoise(
        &mut self,
        _x_t: &Tensor,
        _sigma: f64,
        _cond: &ConditionPack,
        _step: usize,
        time: usize,
        _fusion: Option<&mut FusionState>,
    ) -> Result<Tensor, PipelineError> {
        self.latents
            .get(time)
            .cloned()
            .ok_or_else(|| PipelineError::Contract(format!("oracle has no latent for frame {time}")))
    }
}

pub struct UNetFrameDenoiser<'a> {
    pub model: &'a Denoiser,
}

impl FrameDenoiser for UNetFrameDenoiser<'_> {
    fn denoise(
        &mut self,
        x_t: &Tensor,
        sigma: f64,
        cond: &ConditionPack,
        step: usize,
        time: usize,
        fusion: Option<&mut FusionState>,
    ) -> Result<Tensor, PipelineError> {
        let (x0, emitted) = self.model.predict(x_t, sigma, cond, fusion.as_deref(), step, time)?;
        if let Some(state) = fusion {
            state.push(emitted)?;
        }
        Ok(x0)
    }
}

/// Whether generation reads and fills the temporal caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Enabled,
    /// Buffers are never populated, so every fusion block is skipped.
    Ablated,
}

/// Everything carried from one generated frame to the next.
#[derive(Debug, Clone)]
pub struct GenerationState {
    /// Index of the most recently produced frame; `0` is the initial frame.
    pub frame: usize,
    pub last_latent: Tensor,
    pub anchor_latent: Tensor,
    anchor_tokens: Tensor,
    pub fusion: Option<FusionState>,
}

impl GenerationState {
    pub fn new(
        i0: &Tensor,
        model_cfg: &crate::denoiser::UNetConfig,
        mode: FusionMode,
        n_steps: usize,
        capacity: usize,
        selection: &SelectionSet,
    ) -> Result<Self, PipelineError> {
        let fusion = match mode {
            FusionMode::Enabled => Some(FusionState::new(&model_cfg.fusion_sites, n_steps, capacity, selection.clone())?),
            FusionMode::Ablated => None,
        };
        Ok(Self {
            frame: 0,
            last_latent: i0.clone(),
            anchor_latent: i0.clone(),
            anchor_tokens: anchor_tokens(i0, model_cfg.anchor_patch)?,
            fusion,
        })
    }

    pub fn buffer_bytes(&self) -> usize {
        self.fusion.as_ref().map_or(0, |f| f.token_bytes())
    }
}

/// Starting noise of frame `time`: `sigma_max · ε`, with `ε` drawn from a
/// stream keyed on `(seed, time)` so a frame's noise is independent of how
/// many frames are generated.
pub fn frame_noise(seed: u64, time: usize, shape: &[usize], sigma_max: f64) -> Tensor {
    let mut rng = seeded_rng(derive_seed(seed, &[time as u64]));
    Tensor::randn(shape, sigma_max as f32, &mut rng)
}

/// Generates `n_frames` frames after `state.frame`, each from pure noise
/// through every denoising step. `conditions(T)` supplies frame `T`'s layout
/// and `sink(T, latent)` receives each result; nothing else is retained.
pub fn stream_generate_with<D: FrameDenoiser>(
    denoiser: &mut D,
    schedule: &NoiseSchedule,
    state: &mut GenerationState,
    n_frames: usize,
    noise_seed: u64,
    mut conditions: impl FnMut(usize) -> Result<FrameConditions, PipelineError>,
    mut sink: impl FnMut(usize, &Tensor) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    for _ in 0..n_frames {
        let t = state.frame + 1;
        let fc = conditions(t)?;
        let pack = ConditionPack {
            cond_latent: state.last_latent.clone(),
            anchor_tokens: state.anchor_tokens.clone(),
            raster: fc.raster,
            weight_map: fc.weight_map,
        };
        let mut x = frame_noise(noise_seed, t, state.last_latent.shape(), schedule.sigma_max());
        for step in 0..schedule.n_steps() {
            let (s, s_next) = (schedule.sigma(step), schedule.next_sigma(step));
            let x0 = denoiser.denoise(&x, s, &pack, step, t, state.fusion.as_mut())?;
            x = sampler_step(&x, &x0, s, s_next)?;
        }
        sink(t, &x)?;
        state.last_latent = x;
        state.frame = t;
    }
    Ok(())
}

/// Like [`stream_generate`], but frame `T` is conditioned on the ground-truth
/// latent `gt[T-1]` instead of the previous generated frame.
#[allow(clippy::too_many_arguments)]
pub fn teacher_forced_generate<D: FrameDenoiser>(
    denoiser: &mut D,
    schedule: &NoiseSchedule,
    model_cfg: &crate::denoiser::UNetConfig,
    gt: &[Tensor],
    conditions: &[FrameConditions],
    n_frames: usize,
    mode: FusionMode,
    capacity: usize,
    selection: &SelectionSet,
    noise_seed: u64,
) -> Result<Vec<Tensor>, PipelineError> {
    if n_frames >= gt.len().min(conditions.len()) && n_frames > 0 {
        return Err(PipelineError::Contract(format!(
            "{n_frames} frames requested, ground truth covers {}",
            gt.len().min(conditions.len()).saturating_sub(1)
        )));
    }
    let mut state = GenerationState::new(&gt[0], model_cfg, mode, schedule.n_steps(), capacity, selection)?;
    let mut out = Vec::with_capacity(n_frames);
    for t in 1..=n_frames {
        state.last_latent = gt[t - 1].clone();
        stream_generate_with(
            denoiser,
            schedule,
            &mut state,
            1,
            noise_seed,
            |t| Ok(conditions[t].clone()),
            |_, x| {
                out.push(x.clone());
                Ok(())
            },
        )?;
    }
    Ok(out)
}

/// Generates frames `1..=n_frames` from `i0`; `conditions[T]` is frame `T`'s
/// layout (entry 0 belongs to `i0` and is unused).
#[allow(clippy::too_many_arguments)]
pub fn stream_generate<D: FrameDenoiser>(
    denoiser: &mut D,
    schedule: &NoiseSchedule,
    model_cfg: &crate::denoiser::UNetConfig,
    i0: &Tensor,
    conditions: &[FrameConditions],
    n_frames: usize,
    mode: FusionMode,
    capacity: usize,
    selection: &SelectionSet,
    noise_seed: u64,
) -> Result<Vec<Tensor>, PipelineError> {
    if n_frames >= conditions.len().max(1) && n_frames > 0 {
        return Err(PipelineError::Contract(format!(
            "{n_frames} frames requested but conditions exist for only {}",
            conditions.len().saturating_sub(1)
        )));
    }
    let mut state = GenerationState::new(i0, model_cfg, mode, schedule.n_steps(), capacity, selection)?;
    let mut out = Vec::with_capacity(n_frames);
    stream_generate_with(
        denoiser,
        schedule,
        &mut state,
        n_frames,
        noise_seed,
        |t| Ok(conditions[t].clone()),
        |_, x| {
            out.push(x.clone());
            Ok(())
        },
    )?;
    Ok(out)
}

/// Open-ended generation: every frame's layout is extrapolated from the
/// previous scene state, starting at `initial`.
#[allow(clippy::too_many_arguments)]
pub fn infinite_generate<D: FrameDenoiser>(
    denoiser: &mut D,
    schedule: &NoiseSchedule,
    state: &mut GenerationState,
    initial: &SceneState,
    map: &[Polyline],
    cam: &ConditionCamera,
    n_frames: usize,
    noise_seed: u64,
    sink: impl FnMut(usize, &Tensor) -> Result<(), PipelineError>,
) -> Result<(), PipelineError> {
    let mut scene = initial.clone();
    stream_generate_with(
        denoiser,
        schedule,
        state,
        n_frames,
        noise_seed,
        |_| {
            let (next, cond) = predict_next_conditions(&scene, map, cam)?;
            scene = next;
            Ok(cond)
        },
        sink,
    )
}
