use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::HtftError;
use crate::numerics::Tensor;

/// Pre-fusion features of one fusion site for one frame at one denoising step.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub time_index: usize,
    pub step_index: usize,
    /// `[n_tokens, d]`.
    pub tokens: Tensor,
}

/// Offsets relative to the newest entry; `-1` is the newest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct SelectionSet {
    offsets: Vec<i64>,
}

impl SelectionSet {
    pub fn new(offsets: Vec<i64>) -> Result<Self, HtftError> {
        if offsets.is_empty() {
            return Err(HtftError::InvalidSelection("empty selection set".into()));
        }
        for (i, &o) in offsets.iter().enumerate() {
            if o >= 0 {
                return Err(HtftError::InvalidSelection(format!("offset {o} is not negative")));
            }
            if offsets[..i].contains(&o) {
                return Err(HtftError::InvalidSelection(format!("duplicate offset {o}")));
            }
        }
        Ok(Self { offsets })
    }

    /// Checks that every offset lies in `[-capacity, -1]`.
    pub fn validate_for(&self, capacity: usize) -> Result<(), HtftError> {
        match self.offsets.iter().find(|&&o| o < -(capacity as i64)) {
            Some(o) => Err(HtftError::InvalidSelection(format!("offset {o} deeper than capacity {capacity}"))),
            None => Ok(()),
        }
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }
}

impl Default for SelectionSet {
    fn default() -> Self {
        Self {
            offsets: vec![-1, -5, -10],
        }
    }
}

impl TryFrom<Vec<i64>> for SelectionSet {
    type Error = HtftError;

    fn try_from(v: Vec<i64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SelectionSet> for Vec<i64> {
    fn from(s: SelectionSet) -> Self {
        s.offsets
    }
}

/// Fixed-capacity FIFO of feature frames with strictly increasing time index.
#[derive(Debug, Clone)]
pub struct StreamingBuffer1D {
    capacity: usize,
    frames: VecDeque<FeatureFrame>,
}

impl StreamingBuffer1D {
    pub fn new(capacity: usize) -> Result<Self, HtftError> {
        if capacity == 0 {
            return Err(HtftError::InvalidCapacity);
        }
        Ok(Self {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FeatureFrame> {
        self.frames.iter()
    }

    pub fn newest_time(&self) -> Option<usize> {
        self.frames.back().map(|f| f.time_index)
    }

    pub fn push(&mut self, frame: FeatureFrame) -> Result<(), HtftError> {
        if let Some(newest) = self.newest_time() {
            if frame.time_index <= newest {
                return Err(HtftError::OutOfOrder {
                    newest,
                    got: frame.time_index,
                });
            }
        }
        if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    /// Queue positions chosen by `sel`: offsets past the oldest entry clamp to
    /// it, duplicates after clamping are dropped, order follows `sel`.
    pub fn select_positions(&self, sel: &SelectionSet) -> Vec<usize> {
        let len = self.frames.len() as i64;
        let mut out: Vec<usize> = Vec::with_capacity(sel.offsets.len());
        if len == 0 {
            return out;
        }
        for &o in &sel.offsets {
            let pos = (len + o).max(0) as usize;
            if !out.contains(&pos) {
                out.push(pos);
            }
        }
        out
    }

    pub fn select_frames(&self, sel: &SelectionSet) -> Vec<&FeatureFrame> {
        self.select_positions(sel).into_iter().map(|p| &self.frames[p]).collect()
    }

    /// Selected token rows concatenated in selection order; `None` when empty.
    pub fn select(&self, sel: &SelectionSet) -> Result<Option<Tensor>, HtftError> {
        let frames = self.select_frames(sel);
        if frames.is_empty() {
            return Ok(None);
        }
        let parts: Vec<&Tensor> = frames.iter().map(|f| &f.tokens).collect();
        Ok(Some(Tensor::concat_leading(&parts)?))
    }

    /// Bytes held by cached token data.
    pub fn token_bytes(&self) -> usize {
        self.frames.iter().map(|f| f.tokens.numel() * 4).sum()
    }
}

/// One FIFO per denoising step; a frame pushed at step `t` is only visible at step `t`.
#[derive(Debug, Clone)]
pub struct StreamingBuffer2D {
    rows: Vec<StreamingBuffer1D>,
}

impl StreamingBuffer2D {
    pub fn new(n_steps: usize, capacity: usize) -> Result<Self, HtftError> {
        let rows = (0..n_steps)
            .map(|_| StreamingBuffer1D::new(capacity))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn n_steps(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, step: usize) -> Result<&StreamingBuffer1D, HtftError> {
        self.rows.get(step).ok_or(HtftError::StepOutOfRange {
            step,
            n_steps: self.rows.len(),
        })
    }

    pub fn push(&mut self, frame: FeatureFrame) -> Result<(), HtftError> {
        let n_steps = self.rows.len();
        let row = self.rows.get_mut(frame.step_index).ok_or(HtftError::StepOutOfRange {
            step: frame.step_index,
            n_steps,
        })?;
        row.push(frame)
    }

    pub fn select(&self, step: usize, sel: &SelectionSet) -> Result<Option<Tensor>, HtftError> {
        self.row(step)?.select(sel)
    }

    pub fn reset(&mut self) {
        for r in &mut self.rows {
            r.clear();
        }
    }

    pub fn token_bytes(&self) -> usize {
        self.rows.iter().map(|r| r.token_bytes()).sum()
    }
}
