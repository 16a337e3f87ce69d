use rand::Rng;

use super::{ConditionPack, DenoiserError, FusionSite, FusionState, UNetConfig};
use crate::htft::{FeatureFrame, FusionBlock};
use crate::numerics::gradcheck::{self, GradCheckCase, GradCheckReport};
use crate::numerics::ops::{cross_attention, from_tokens, linear, to_tokens, AttentionVars};
use crate::numerics::{seeded_rng, ParamId, ParamStore, Tape, Tensor, Var};

const GN_EPS: f32 = 1e-5;

/// Conv → bias → group norm → sigma shift → SiLU → anchor cross-attention (residual).
#[derive(Debug, Clone)]
struct Block {
    conv_w: ParamId,
    conv_b: ParamId,
    gn_g: ParamId,
    gn_b: ParamId,
    emb_w: ParamId,
    emb_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    attn_w: ParamId,
    attn_b: ParamId,
}

struct Registrar<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
}

impl<R: Rng> Registrar<'_, R> {
    fn randn(&mut self, name: String, shape: &[usize], std: f32) -> Result<ParamId, DenoiserError> {
        let t = Tensor::randn(shape, std, self.rng);
        Ok(self.store.register(name, t)?)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f32) -> Result<ParamId, DenoiserError> {
        Ok(self.store.register(name, Tensor::full(shape, v))?)
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, emb: usize, anchor: usize) -> Result<Block, DenoiserError> {
        let p = |s: &str| format!("unet.{name}.{s}");
        let inv = |n: usize| 1.0 / (n as f32).sqrt();
        Ok(Block {
            conv_w: self.randn(p("conv_w"), &[cout, cin, 3, 3], inv(cin * 9))?,
            conv_b: self.fill(p("conv_b"), &[cout], 0.0)?,
            gn_g: self.fill(p("gn_g"), &[cout], 1.0)?,
            gn_b: self.fill(p("gn_b"), &[cout], 0.0)?,
            emb_w: self.randn(p("emb_w"), &[emb, cout], inv(emb))?,
            emb_b: self.fill(p("emb_b"), &[cout], 0.0)?,
            wq: self.randn(p("attn_wq"), &[cout, cout], inv(cout))?,
            wk: self.randn(p("attn_wk"), &[anchor, cout], inv(anchor))?,
            wv: self.randn(p("attn_wv"), &[anchor, cout], inv(anchor))?,
            attn_w: self.fill(p("attn_out_w"), &[cout, cout], 0.0)?,
            attn_b: self.fill(p("attn_out_b"), &[cout], 0.0)?,
        })
    }
}

/// The denoiser: parameters plus the ids that wire them into the network.
#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: UNetConfig,
    store: ParamStore,
    emb1_w: ParamId,
    emb1_b: ParamId,
    emb2_w: ParamId,
    emb2_b: ParamId,
    enc: Vec<Block>,
    mid: Block,
    /// Indexed by level.
    dec: Vec<Block>,
    out_w: ParamId,
    out_b: ParamId,
    fusion: Vec<(FusionSite, FusionBlock)>,
}

/// Result of one recorded forward pass.
pub struct ForwardOutput {
    pub x0_hat: Var,
    /// Pre-fusion features, one per configured site in config order, tagged
    /// with the call's time and step indices.
    pub emitted: Vec<FeatureFrame>,
}

/// Everything a forward pass reads besides parameters.
pub struct StepContext<'a> {
    pub cond: &'a ConditionPack,
    pub fusion: Option<&'a FusionState>,
    pub step: usize,
    pub time: usize,
    pub train: bool,
}

impl Denoiser {
    pub fn new(cfg: UNetConfig, seed: u64) -> Result<Self, DenoiserError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut r = Registrar {
            store: &mut store,
            rng: &mut rng,
        };
        let (e, a) = (cfg.emb_dim, cfg.anchor_dim());
        let sin = 2 * cfg.sigma_freqs;
        let emb1_w = r.randn("unet.emb1_w".into(), &[sin, e], 1.0 / (sin as f32).sqrt())?;
        let emb1_b = r.fill("unet.emb1_b".into(), &[e], 0.0)?;
        let emb2_w = r.randn("unet.emb2_w".into(), &[e, e], 1.0 / (e as f32).sqrt())?;
        let emb2_b = r.fill("unet.emb2_b".into(), &[e], 0.0)?;
        let levels = cfg.levels();
        let mut enc = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 { cfg.input_channels() } else { cfg.channels(l - 1) };
            enc.push(r.block(&format!("enc{l}"), cin, cfg.channels(l), e, a)?);
        }
        let bottom = cfg.channels(levels - 1);
        let mid = r.block("mid", bottom, bottom, e, a)?;
        let mut dec: Vec<Option<Block>> = vec![None; levels];
        for l in (0..levels).rev() {
            let below = if l == levels - 1 { bottom } else { cfg.channels(l + 1) };
            dec[l] = Some(r.block(&format!("dec{l}"), below + cfg.channels(l), cfg.channels(l), e, a)?);
        }
        let c0 = cfg.channels(0);
        let out_w = r.randn("unet.out_w".into(), &[cfg.latent_channels, c0, 3, 3], 0.1 / ((c0 * 9) as f32).sqrt())?;
        let out_b = r.fill("unet.out_b".into(), &[cfg.latent_channels], 0.0)?;
        let mut fusion = Vec::with_capacity(cfg.fusion_sites.len());
        for &site in &cfg.fusion_sites {
            let block = FusionBlock::register(
                r.store,
                &format!("fuse.{site}"),
                cfg.site_dim(site),
                cfg.groups,
                cfg.fusion_dropout,
                r.rng,
            )?;
            fusion.push((site, block));
        }
        Ok(Self {
            cfg,
            store,
            emb1_w,
            emb1_b,
            emb2_w,
            emb2_b,
            enc,
            mid,
            dec: dec.into_iter().map(|b| b.expect("every level built")).collect(),
            out_w,
            out_b,
            fusion,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fusion_sites(&self) -> Vec<FusionSite> {
        self.fusion.iter().map(|(s, _)| *s).collect()
    }

    /// Names of parameters belonging to fusion blocks.
    pub fn is_fusion_param(name: &str) -> bool {
        name.starts_with("fuse.")
    }

    /// Records every parameter on the tape, indexed by `ParamId`.
    pub fn load_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.ids().map(|id| tape.param(&self.store, id)).collect()
    }

    fn sigma_features(&self, sigma: f64) -> Tensor {
        let c_noise = sigma.ln() / 4.0;
        let n = self.cfg.sigma_freqs;
        let mut v = Vec::with_capacity(2 * n);
        for k in 0..n {
            let f = if n == 1 { 1.0 } else { 100f64.powf(k as f64 / (n - 1) as f64) };
            v.push((c_noise * f).sin() as f32);
        }
        for k in 0..n {
            let f = if n == 1 { 1.0 } else { 100f64.powf(k as f64 / (n - 1) as f64) };
            v.push((c_noise * f).cos() as f32);
        }
        Tensor::new(&[1, 2 * n], v).expect("sigma features")
    }

    fn block(
        &self,
        tape: &mut Tape,
        p: &[Var],
        b: &Block,
        x: Var,
        emb: Var,
        anchor: Var,
    ) -> Result<Var, DenoiserError> {
        let y = tape.conv2d(x, p[b.conv_w.0])?;
        let y = tape.add_channel(y, p[b.conv_b.0])?;
        let y = tape.group_norm(y, p[b.gn_g.0], p[b.gn_b.0], self.cfg.groups, GN_EPS)?;
        let shift = linear(tape, emb, p[b.emb_w.0], Some(p[b.emb_b.0]))?;
        let c = tape.shape(y)[0];
        let shift = tape.reshape(shift, &[c])?;
        let y = tape.add_channel(y, shift)?;
        let y = tape.silu(y)?;
        let (h, w) = (tape.shape(y)[1], tape.shape(y)[2]);
        let tokens = to_tokens(tape, y)?;
        let attn = cross_attention(
            tape,
            tokens,
            anchor,
            AttentionVars {
                wq: p[b.wq.0],
                wk: p[b.wk.0],
                wv: p[b.wv.0],
            },
        )?;
        let attn = linear(tape, attn, p[b.attn_w.0], Some(p[b.attn_b.0]))?;
        let tokens = tape.add(tokens, attn)?;
        Ok(from_tokens(tape, tokens, h, w)?)
    }

    /// Reads the site's cache, fuses, and records the pre-fusion tokens.
    #[allow(clippy::too_many_arguments)]
    fn fusion_site(
        &self,
        tape: &mut Tape,
        p: &[Var],
        site: FusionSite,
        y: Var,
        ctx: &StepContext<'_>,
        emitted: &mut Vec<FeatureFrame>,
        rng: &mut impl Rng,
    ) -> Result<Var, DenoiserError> {
        let Some(idx) = self.fusion.iter().position(|(s, _)| *s == site) else {
            return Ok(y);
        };
        let (h, w) = (tape.shape(y)[1], tape.shape(y)[2]);
        let tokens = to_tokens(tape, y)?;
        emitted.push(FeatureFrame {
            time_index: ctx.time,
            step_index: ctx.step,
            tokens: tape.value(tokens).clone(),
        });
        let selected = match ctx.fusion {
            Some(state) => {
                if state.sites() != self.fusion_sites().as_slice() {
                    return Err(DenoiserError::InvalidConfig("fusion state sites differ from the model's".into()));
                }
                if ctx.step >= state.n_steps() {
                    return Err(DenoiserError::Htft(crate::htft::HtftError::StepOutOfRange {
                        step: ctx.step,
                        n_steps: state.n_steps(),
                    }));
                }
                state.selected(idx, ctx.step)?
            }
            None => None,
        };
        if selected.is_none() {
            return Ok(y);
        }
        let fused = self.fusion[idx]
            .1
            .forward(tape, p, tokens, selected.as_ref(), ctx.train, rng)?;
        Ok(from_tokens(tape, fused, h, w)?)
    }

    /// One recorded pass. `p` holds the parameter vars from [`Self::load_params`]
    /// (or substitutes with identical shapes).
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x_t: &Tensor,
        sigma: f64,
        ctx: &StepContext<'_>,
        rng: &mut impl Rng,
    ) -> Result<ForwardOutput, DenoiserError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(DenoiserError::InvalidSigma(sigma));
        }
        let cfg = &self.cfg;
        ctx.cond.validate(cfg)?;
        if x_t.shape() != cfg.latent_shape() {
            return Err(DenoiserError::Shape(format!(
                "x_t: expected {:?}, got {:?}",
                cfg.latent_shape(),
                x_t.shape()
            )));
        }
        if p.len() != self.store.len() {
            return Err(DenoiserError::Shape(format!("{} param vars for {} params", p.len(), self.store.len())));
        }
        let off = cfg.data_offset;
        let sd2 = cfg.sigma_data * cfg.sigma_data;
        let c_in = (1.0 / (sigma * sigma + sd2).sqrt()) as f32;
        let c_skip = (sd2 / (sigma * sigma + sd2)) as f32;
        let c_out = (sigma * cfg.sigma_data / (sigma * sigma + sd2).sqrt()) as f32;

        let base = if cfg.skip_on_condition {
            ctx.cond.cond_latent.clone()
        } else {
            Tensor::full(x_t.shape(), off)
        };
        let centred = x_t.sub(&base)?;
        let cond = ctx.cond.cond_latent.map(|v| v - off);
        let scaled = centred.scale(c_in);
        let input = Tensor::concat_leading(&[&scaled, &cond, &ctx.cond.raster])?;
        let x = tape.leaf(input);
        let anchor = tape.leaf(ctx.cond.anchor_tokens.map(|v| v - off));

        let s = tape.leaf(self.sigma_features(sigma));
        let e = linear(tape, s, p[self.emb1_w.0], Some(p[self.emb1_b.0]))?;
        let e = tape.silu(e)?;
        let e = linear(tape, e, p[self.emb2_w.0], Some(p[self.emb2_b.0]))?;
        let emb = tape.silu(e)?;

        let mut emitted = Vec::with_capacity(self.fusion.len());
        let levels = cfg.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut y = x;
        for (l, b) in self.enc.iter().enumerate() {
            if l > 0 {
                y = tape.avg_pool(y, 2)?;
            }
            y = self.block(tape, p, b, y, emb, anchor)?;
            skips.push(y);
        }
        y = self.block(tape, p, &self.mid, y, emb, anchor)?;
        y = self.fusion_site(tape, p, FusionSite::Mid, y, ctx, &mut emitted, rng)?;
        for l in (0..levels).rev() {
            if l < levels - 1 {
                y = tape.upsample(y, 2)?;
            }
            let cat = tape.concat(&[y, skips[l]])?;
            y = self.block(tape, p, &self.dec[l], cat, emb, anchor)?;
            y = self.fusion_site(tape, p, FusionSite::Dec(l), y, ctx, &mut emitted, rng)?;
        }
        let f = tape.conv2d(y, p[self.out_w.0])?;
        let f = tape.add_channel(f, p[self.out_b.0])?;
        let f = tape.scale(f, c_out)?;
        let skip = tape.leaf(centred.zip_map(&base, |v, b| c_skip * v + b)?);
        let x0_hat = tape.add(skip, f)?;

        // Emission order follows the config's site list.
        let order: Vec<FusionSite> = self.fusion_sites();
        let mut by_site: Vec<FeatureFrame> = Vec::with_capacity(emitted.len());
        let visit = std::iter::once(FusionSite::Mid).chain((0..levels).rev().map(FusionSite::Dec));
        let visited: Vec<FusionSite> = visit.filter(|s| order.contains(s)).collect();
        let mut slots: Vec<Option<FeatureFrame>> = emitted.into_iter().map(Some).collect();
        for s in &order {
            let i = visited.iter().position(|v| v == s).expect("visited every site");
            by_site.push(slots[i].take().expect("each site emitted once"));
        }
        Ok(ForwardOutput {
            x0_hat,
            emitted: by_site,
        })
    }

    /// Inference pass: returns `x0_hat` and the emitted pre-fusion features.
    pub fn predict(
        &self,
        x_t: &Tensor,
        sigma: f64,
        cond: &ConditionPack,
        fusion: Option<&FusionState>,
        step: usize,
        time: usize,
    ) -> Result<(Tensor, Vec<FeatureFrame>), DenoiserError> {
        let mut tape = Tape::new();
        let p = self.load_params(&mut tape);
        let ctx = StepContext {
            cond,
            fusion,
            step,
            time,
            train: false,
        };
        // Eval mode never draws from the rng.
        let out = self.forward(&mut tape, &p, x_t, sigma, &ctx, &mut seeded_rng(0))?;
        Ok((tape.value(out.x0_hat).clone(), out.emitted))
    }
}

/// Joint finite-difference case over every parameter of a tiny denoiser with
/// all fusion sites active (caches pre-filled, output projections non-zero).
pub fn denoiser_gradcheck_case(seed: u64) -> Result<GradCheckCase, DenoiserError> {
    use crate::geometry::WeightMap;
    use crate::htft::SelectionSet;

    let cfg = UNetConfig::tiny();
    let mut model = Denoiser::new(cfg.clone(), seed)?;
    let mut rng = seeded_rng(seed ^ 0x9e37);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        if name.ends_with("out_w") {
            let shape = model.store.get(id).shape().to_vec();
            *model.store.get_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    let [c, h, w] = cfg.latent_shape();
    let anchor_latent = Tensor::rand_uniform(&[c, h, w], 0.0, 1.0, &mut rng);
    let cond = ConditionPack {
        cond_latent: Tensor::rand_uniform(&[c, h, w], 0.0, 1.0, &mut rng),
        anchor_tokens: super::anchor_tokens(&anchor_latent, cfg.anchor_patch)?,
        raster: Tensor::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng).map(|v| (v > 0.7) as u8 as f32),
        weight_map: WeightMap::uniform(h, w),
    };
    let mut state = FusionState::new(&cfg.fusion_sites, 1, 10, SelectionSet::default())?;
    for t in 0..3 {
        let frames = cfg
            .fusion_sites
            .iter()
            .map(|&s| {
                let (sh, sw) = cfg.site_resolution(s);
                crate::htft::FeatureFrame {
                    time_index: t,
                    step_index: 0,
                    tokens: Tensor::randn(&[sh * sw, cfg.site_dim(s)], 1.0, &mut rng),
                }
            })
            .collect();
        state.push(frames)?;
    }
    let x_t = Tensor::randn(&[c, h, w], 1.0, &mut rng);
    let inputs: Vec<Tensor> = model.store.ids().map(|id| model.store.get(id).clone()).collect();
    Ok(GradCheckCase::new("denoiser", inputs, move |tape, vars| {
        let ctx = StepContext {
            cond: &cond,
            fusion: Some(&state),
            step: 0,
            time: 3,
            train: false,
        };
        let out = model
            .forward(tape, vars, &x_t, 1.3, &ctx, &mut seeded_rng(0))
            .map_err(|e| crate::numerics::NumericsError::InvalidArgument(e.to_string()))?;
        Ok(out.x0_hat)
    })
    .joint())
}

/// Every primitive at the composite step, then the whole denoiser at the
/// network step; `broken` appends the negative-control case.
pub fn gradcheck_suite(seed: u64, broken: bool) -> Result<GradCheckReport, DenoiserError> {
    let mut report = gradcheck::run(&gradcheck::standard_cases(seed), seed, gradcheck::FD_STEP_COMPOSITE)?;
    report
        .entries
        .push(gradcheck::check_case(&denoiser_gradcheck_case(seed)?, seed, gradcheck::FD_STEP_NETWORK)?);
    if broken {
        report
            .entries
            .push(gradcheck::check_case(&gradcheck::broken_square_case(seed), seed, gradcheck::FD_STEP)?);
    }
    Ok(report)
}
