use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::Serialize;
use streamdiff::denoiser::Denoiser;
use streamdiff::metrics::{feature_distance, frame_features, frechet_from_features, ls_slope, psnr, Drift, FEATURE_DIM};
use streamdiff::numerics::{checkpoint, derive_seed, Tensor};
use streamdiff::pipeline::{
    predict_next_conditions, scene_conditions, stream_generate_with, ConditionCamera, FusionMode, GenerationState,
    PipelineError, UNetFrameDenoiser,
};
use streamdiff::synthdata::{decode_latent, read_dataset};

use crate::{write_json, Workspace};

#[derive(Args)]
pub struct GenerateArgs {
    /// Checkpoint stem (`<stem>.bin` + `<stem>.json`).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frames to generate after the initial frame.
    #[arg(long)]
    frames: usize,
    /// Extrapolate conditions past the annotated scene instead of failing.
    #[arg(long)]
    infinite: bool,
    /// Also write decoded frames as binary PGM files.
    #[arg(long)]
    dump_frames: Option<PathBuf>,
    /// Eval scene providing the initial frame, annotations and ground truth.
    #[arg(long, default_value_t = 0)]
    scene: usize,
    /// Never populate the temporal feature buffers.
    #[arg(long)]
    ablate_fusion: bool,
    /// Output directory; defaults to the configured output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct LatentsManifest {
    shape: Vec<usize>,
    dtype: &'static str,
    first_frame: usize,
}

/// Scores of one generation run against ground truth.
#[derive(Serialize)]
pub struct MetricsReport {
    frames: usize,
    infinite: bool,
    fusion: bool,
    psnr_latent: Vec<f64>,
    psnr_pixel: Vec<f64>,
    mean_psnr_latent: f64,
    mean_psnr_pixel: f64,
    /// `None` below two frames.
    proxy_frechet: Option<f64>,
    drift: Drift,
    ms_per_frame: Vec<f64>,
    mean_ms_per_frame: f64,
    /// Resident-set high-water mark after each frame, kB; zeros where unavailable.
    peak_rss_kb: Vec<u64>,
    buffer_bytes: usize,
}

/// `VmHWM` of this process in kB.
pub fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// 8-bit binary PGM of a `[1, h, w]` frame in `[0, 1]`.
pub fn write_pgm(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn cmd_generate(ctx: &Workspace, args: &GenerateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let data_dir = ctx.path(&cfg.paths.eval_data);
    let ds = read_dataset(&data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let Some(scene) = ds.scenes.get(args.scene) else {
        bail!("--scene {} out of range: {} eval scenes", args.scene, ds.scenes.len());
    };
    let n = args.frames;
    if !args.infinite && n >= scene.len() {
        bail!(
            "{n} frames requested but scene {} has ground-truth conditions for {} frames after the initial one; pass --infinite to extrapolate",
            args.scene,
            scene.len() - 1
        );
    }
    let mut model = Denoiser::new(cfg.model.clone(), 0)?;
    let stem = ctx.path(&args.checkpoint);
    checkpoint::load_into(model.params_mut(), &stem)
        .with_context(|| format!("checkpoint {} does not match the configured model", stem.display()))?;

    let out_dir = ctx.path(args.out.as_ref().unwrap_or(&PathBuf::from(&cfg.paths.output)));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let dump_dir = args.dump_frames.as_ref().map(|d| ctx.path(d));
    if let Some(d) = &dump_dir {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }

    let schedule = cfg.schedule.build()?;
    let cam = ConditionCamera::for_dataset(&ds, cfg.weights);
    let annotated = scene_conditions(scene, &cam)?;
    let mode = if args.ablate_fusion { FusionMode::Ablated } else { FusionMode::Enabled };
    let mut state =
        GenerationState::new(&scene.latents[0], &cfg.model, mode, schedule.n_steps(), cfg.buffer_capacity, &cfg.selection)?;

    // Per-frame records are allocated and touched up front so long runs keep
    // a flat memory profile.
    let mut psnr_latent = vec![f64::NAN; n];
    let mut psnr_pixel = vec![f64::NAN; n];
    let mut ms = vec![f64::NAN; n];
    let mut rss = vec![u64::MAX; n];
    let mut feat_gen = vec![[f64::NAN; FEATURE_DIM]; n];
    let mut feat_gt = vec![[f64::NAN; FEATURE_DIM]; n];

    let latents_path = out_dir.join("latents.bin");
    let mut latents = BufWriter::new(File::create(&latents_path).with_context(|| format!("creating {}", latents_path.display()))?);
    let (k, t_ego2cam) = (ds.intrinsics, ds.t_ego2cam);
    let map = scene.map.clone();
    let mut cond_state = scene.spec.initial_state();
    let mut gt_state = scene.spec.initial_state();
    let mut clock = Instant::now();
    let io_err = |e: anyhow::Error| PipelineError::Contract(format!("{e:#}"));

    stream_generate_with(
        &mut UNetFrameDenoiser { model: &model },
        &schedule,
        &mut state,
        n,
        derive_seed(cfg.seed, &[0x6e, args.scene as u64]),
        |t| {
            let (next, predicted) = predict_next_conditions(&cond_state, &map, &cam)?;
            cond_state = next;
            Ok(match annotated.get(t) {
                Some(a) if cfg.gt_conditions => a.clone(),
                _ => predicted,
            })
        },
        |t, x| {
            let i = t - 1;
            gt_state = gt_state.step(streamdiff::synthdata::DT);
            let (gt_frame, gt_latent) = match (scene.frames.get(t), scene.latents.get(t)) {
                (Some(f), Some(l)) => (f.clone(), l.clone()),
                _ => scene.spec.render(&gt_state, &k, &t_ego2cam).map_err(|e| io_err(e.into()))?,
            };
            let frame = decode_latent(x)?;
            let err = |e: streamdiff::metrics::MetricsError| PipelineError::Contract(e.to_string());
            psnr_latent[i] = psnr(x, &gt_latent, 1.0).map_err(err)?;
            psnr_pixel[i] = psnr(&frame, &gt_frame, 1.0).map_err(err)?;
            feat_gen[i] = frame_features(x).map_err(err)?;
            feat_gt[i] = frame_features(&gt_latent).map_err(err)?;
            for v in x.data() {
                latents.write_all(&v.to_le_bytes()).map_err(|e| io_err(e.into()))?;
            }
            if let Some(d) = &dump_dir {
                write_pgm(&d.join(format!("frame_{t:04}.pgm")), &frame).map_err(io_err)?;
            }
            ms[i] = clock.elapsed().as_secs_f64() * 1e3;
            rss[i] = peak_rss_kb().unwrap_or(0);
            clock = Instant::now();
            Ok(())
        },
    )?;
    latents.flush()?;
    drop(latents);
    let shape = [vec![n], cfg.model.latent_shape().to_vec()].concat();
    write_json(
        &out_dir.join("latents.json"),
        &LatentsManifest {
            shape,
            dtype: "f32le",
            first_frame: 1,
        },
    )?;

    let series: Vec<f64> = feat_gen.iter().zip(&feat_gt).map(|(a, b)| feature_distance(a, b)).collect();
    let proxy_frechet = if n >= 2 { Some(frechet_from_features(&feat_gen, &feat_gt)?) } else { None };
    ensure!(psnr_latent.iter().all(|p| !p.is_nan()), "a frame was not scored");
    let report = MetricsReport {
        frames: n,
        infinite: args.infinite,
        fusion: !args.ablate_fusion,
        mean_psnr_latent: mean(&psnr_latent),
        mean_psnr_pixel: mean(&psnr_pixel),
        psnr_latent,
        psnr_pixel,
        proxy_frechet,
        drift: Drift {
            slope: ls_slope(&series),
            series,
        },
        mean_ms_per_frame: mean(&ms),
        ms_per_frame: ms,
        peak_rss_kb: rss,
        buffer_bytes: state.buffer_bytes(),
    };
    write_json(&out_dir.join("metrics.json"), &report)?;
    eprintln!(
        "generated {n} frames: mean latent PSNR {:.2} dB, drift slope {:.3e}, {:.0} ms/frame -> {}",
        report.mean_psnr_latent,
        report.drift.slope,
        report.mean_ms_per_frame,
        out_dir.display()
    );
    Ok(())
}
