use rand::Rng;

use super::HtftError;
use crate::numerics::ops::{cross_attention, linear, AttentionVars};
use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

/// Parameters of one fusion block: a normalised projection of the current
/// tokens, single-head cross-attention into the cached tokens, and a
/// zero-initialised output projection added back onto the (dropped-out) input.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub dim: usize,
    pub groups: usize,
    pub dropout: f32,
    gn_gamma: ParamId,
    gn_beta: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

impl FusionBlock {
    /// Registers the block's parameters under `prefix.*`.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        groups: usize,
        dropout: f32,
        rng: &mut impl Rng,
    ) -> Result<Self, HtftError> {
        if groups == 0 || dim % groups != 0 {
            return Err(HtftError::InvalidConfig(format!("dim {dim} not divisible into {groups} groups")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(HtftError::InvalidConfig(format!("dropout {dropout}")));
        }
        let std = 1.0 / (dim as f32).sqrt();
        let mut reg = |name: &str, t: Tensor| store.register(format!("{prefix}.{name}"), t);
        Ok(Self {
            dim,
            groups,
            dropout,
            gn_gamma: reg("gn_gamma", Tensor::full(&[dim], 1.0))?,
            gn_beta: reg("gn_beta", Tensor::zeros(&[dim]))?,
            proj_w: reg("proj_w", Tensor::randn(&[dim, dim], std, rng))?,
            proj_b: reg("proj_b", Tensor::zeros(&[dim]))?,
            wq: reg("wq", Tensor::randn(&[dim, dim], std, rng))?,
            wk: reg("wk", Tensor::randn(&[dim, dim], std, rng))?,
            wv: reg("wv", Tensor::randn(&[dim, dim], std, rng))?,
            out_w: reg("out_w", Tensor::zeros(&[dim, dim]))?,
            out_b: reg("out_b", Tensor::zeros(&[dim]))?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 9] {
        [
            self.gn_gamma,
            self.gn_beta,
            self.proj_w,
            self.proj_b,
            self.wq,
            self.wk,
            self.wv,
            self.out_w,
            self.out_b,
        ]
    }

    pub fn out_weight(&self) -> ParamId {
        self.out_w
    }

    pub fn out_bias(&self) -> ParamId {
        self.out_b
    }

    /// Fuses current tokens `f: [n, d]` with cached tokens `selected: [m, d]`.
    /// `p` maps every `ParamId` of the owning store to its var on `tape`.
    /// With no cached tokens the input is returned untouched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        f: Var,
        selected: Option<&Tensor>,
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, HtftError> {
        let Some(selected) = selected else {
            return Ok(f);
        };
        let shape = tape.shape(f).to_vec();
        if shape.len() != 2 || shape[1] != self.dim || selected.shape().len() != 2 || selected.shape()[1] != self.dim {
            return Err(HtftError::Numerics(NumericsError::ShapeMismatch {
                op: "fuse",
                lhs: shape,
                rhs: selected.shape().to_vec(),
            }));
        }
        let p = |_: &mut Tape, id: ParamId| p[id.0];

        // Group norm acts channel-first, so normalise the transposed tokens.
        let ft = tape.transpose(f)?;
        let (gamma, beta) = (p(tape, self.gn_gamma), p(tape, self.gn_beta));
        let normed = tape.group_norm(ft, gamma, beta, self.groups, 1e-5)?;
        let normed = tape.transpose(normed)?;
        let (pw, pb) = (p(tape, self.proj_w), p(tape, self.proj_b));
        let g = linear(tape, normed, pw, Some(pb))?;

        let kv = tape.leaf(selected.clone());
        let w = AttentionVars {
            wq: p(tape, self.wq),
            wk: p(tape, self.wk),
            wv: p(tape, self.wv),
        };
        let h = cross_attention(tape, g, kv, w)?;
        let (ow, ob) = (p(tape, self.out_w), p(tape, self.out_b));
        let out = linear(tape, h, ow, Some(ob))?;

        let residual = if train && self.dropout > 0.0 {
            let keep = 1.0 - self.dropout;
            let n = tape.value(f).numel();
            let mask: Vec<f32> = (0..n)
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            tape.mul_const(f, Tensor::new(tape.shape(f), mask)?)?
        } else {
            f
        };
        Ok(tape.add(residual, out)?)
    }
}
