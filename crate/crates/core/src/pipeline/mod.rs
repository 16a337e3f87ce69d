//! Streaming generation, condition augmentation, the three training stages
//! and condition extrapolation for open-ended generation.

mod augment;
mod conditions;
mod eval;
mod generate;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::{DenoiserError, UNetConfig};
use crate::geometry::{GeometryError, WeightParams};
use crate::htft::{HtftError, SelectionSet};
use crate::numerics::NumericsError;
use crate::scheduler::{ScheduleConfig, SchedulerError};

pub use augment::{augment_condition, AugmentConfig};
pub use conditions::{predict_next_conditions, scene_conditions, ConditionCamera, FrameConditions};
pub use eval::{evaluate, EvalReport};
pub use generate::{
    frame_noise, infinite_generate, stream_generate, stream_generate_with,
    teacher_forced_generate, FrameDenoiser, FusionMode, GenerationState,
    OracleDenoiser, UNetFrameDenoiser,
};
pub use train::{train_stage, train_stage1, train_stage2, train_stage3, LossRow, SequenceStats, TrainLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Contract(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Htft(#[from] HtftError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Optimiser steps; one step is one frame.
    pub steps: usize,
    pub lr: f32,
    /// Stage 3 runs at `lr / stage3_lr_divisor`.
    pub stage3_lr_divisor: f32,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub stage3_rollout: Rollout,
}

/// How stage 3 infers the condition latents of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rollout {
    /// Frame `T` is generated from the true latent `T-1`: one step of degradation.
    TeacherForced,
    /// Frames are generated from their own predecessors, accumulating drift.
    Autoregressive,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 1e-3,
            stage3_lr_divisor: 50.0,
            grad_clip: 1.0,
            stage3_rollout: Rollout::TeacherForced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub frames: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 8,
            eval_scenes: 2,
            frames: 48,
        }
    }
}

/// Locations relative to the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub train_data: String,
    pub eval_data: String,
    pub checkpoints: String,
    pub output: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            train_data: "data/train".into(),
            eval_data: "data/eval".into(),
            checkpoints: "checkpoints".into(),
            output: "output".into(),
        }
    }
}

/// Every tunable of a run; serialised as `run-config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub stage: u8,
    pub schedule: ScheduleConfig,
    /// Per-step buffer capacity N.
    pub buffer_capacity: usize,
    pub selection: SelectionSet,
    pub model: UNetConfig,
    pub augment: AugmentConfig,
    pub weights: WeightParams,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Use annotated conditions where they exist instead of extrapolating them.
    pub gt_conditions: bool,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stage: 1,
            schedule: ScheduleConfig::default(),
            buffer_capacity: 10,
            selection: SelectionSet::default(),
            model: UNetConfig::default(),
            augment: AugmentConfig::default(),
            weights: WeightParams::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            gt_conditions: true,
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage {} not in 1..=3", self.stage));
        }
        let a = &self.augment;
        let [lo, hi] = a.keep_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad(format!("keep_fraction range {:?}", a.keep_fraction));
        }
        if !(0.0..=1.0).contains(&a.cond_dropout_p) {
            return bad(format!("cond_dropout_p {}", a.cond_dropout_p));
        }
        if !(a.cond_noise_sigma >= 0.0) {
            return bad(format!("cond_noise_sigma {}", a.cond_noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.model.fusion_dropout) {
            return bad(format!("fusion_dropout {}", self.model.fusion_dropout));
        }
        if !(self.train.lr > 0.0 && self.train.stage3_lr_divisor > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(self.weights.k > 0.0 && self.weights.c >= 0.0) {
            return bad(format!("weight params {:?}", self.weights));
        }
        self.selection.validate_for(self.buffer_capacity)?;
        self.schedule.build()?;
        self.model.validate()?;
        Ok(())
    }

    /// Learning rate of the configured stage.
    pub fn stage_lr(&self, stage: u8) -> f32 {
        if stage == 3 {
            self.train.lr / self.train.stage3_lr_divisor
        } else {
            self.train.lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: RunConfig = serde_json::from_str(r#"{"stage": 2, "selection": [-1, -2]}"#).unwrap();
        assert_eq!(partial.stage, 2);
        assert_eq!(partial.selection.offsets(), &[-1, -2]);
    }

    #[test]
    fn rejects_bad_stage_and_probabilities() {
        let mut cfg = RunConfig { stage: 4, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        cfg.stage = 1;
        cfg.augment.cond_dropout_p = 1.5;
        assert!(cfg.validate().is_err());
        cfg.augment.cond_dropout_p = 0.0;
        cfg.augment.keep_fraction = [0.8, 0.2];
        assert!(cfg.validate().is_err());
        cfg.augment.keep_fraction = [0.3, 1.0];
        cfg.selection = SelectionSet::new(vec![-11]).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn stage3_lr_is_reduced() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage_lr(1), cfg.stage_lr(2));
        assert!((cfg.stage_lr(3) - cfg.train.lr / cfg.train.stage3_lr_divisor).abs() < 1e-12);
        assert!(cfg.stage_lr(3) < cfg.stage_lr(1));
    }
}
