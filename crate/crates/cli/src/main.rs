mod generate;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use streamdiff::denoiser::{gradcheck_suite, Denoiser};
use streamdiff::numerics::{checkpoint, derive_seed};
use streamdiff::pipeline::{train_stage, RunConfig};
use streamdiff::synthdata::{read_dataset, write_dataset, Dataset};

const RUN_CONFIG: &str = "run-config.json";
const SEED_ENV: &str = "STAGE_SEED";

#[derive(Parser)]
#[command(name = "streamdiff", version, about = "Streaming latent video diffusion on a synthetic driving world")]
struct Cli {
    /// Directory every relative path resolves against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    /// Run configuration; defaults to `<workdir>/run-config.json` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker thread cap. Every kernel is single-threaded, so values above 1 change nothing.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and eval datasets and write the run configuration.
    Synth {
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run one training stage and write a checkpoint with its loss log.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Checkpoint stem to start from; required for stages 2 and 3.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Generate frames from a checkpoint and score them against ground truth.
    Generate(generate::GenerateArgs),
    /// Finite-difference check of every differentiable op and the full denoiser.
    Gradcheck {
        /// Append a deliberately wrong gradient, which must be reported.
        #[arg(long)]
        broken: bool,
    },
}

pub struct Workspace {
    pub workdir: PathBuf,
    pub cfg: RunConfig,
}

impl Workspace {
    pub fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        self.workdir.join(p)
    }
}

fn load_config(workdir: &Path, explicit: Option<&Path>) -> Result<RunConfig> {
    let path = match explicit {
        Some(p) => Some(workdir.join(p)),
        None => Some(workdir.join(RUN_CONFIG)).filter(|p| p.exists()),
    };
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v.parse().with_context(|| format!("{SEED_ENV}={v} is not an unsigned integer"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn cmd_synth(ctx: &mut Workspace, scenes: Option<usize>, frames: Option<usize>) -> Result<()> {
    let data = &mut ctx.cfg.data;
    if let Some(s) = scenes {
        data.train_scenes = s;
    }
    if let Some(f) = frames {
        data.frames = f;
    }
    ensure!(data.train_scenes >= 1, "--scenes must be at least 1");
    ensure!(data.frames >= 2, "--frames must be at least 2");
    let data = data.clone();
    let seed = ctx.cfg.seed;
    let train = Dataset::generate(derive_seed(seed, &[0]), data.train_scenes, data.frames)?;
    let eval = Dataset::generate(derive_seed(seed, &[1]), data.eval_scenes, data.frames)?;
    for (ds, rel) in [(&train, &ctx.cfg.paths.train_data), (&eval, &ctx.cfg.paths.eval_data)] {
        let dir = ctx.path(rel);
        write_dataset(ds, &dir).with_context(|| format!("writing dataset {}", dir.display()))?;
        eprintln!("wrote {} scenes x {} frames to {}", ds.scenes.len(), data.frames, dir.display());
    }
    write_json(&ctx.path(RUN_CONFIG), &ctx.cfg)
}

fn cmd_train(ctx: &mut Workspace, stage: u8, init: Option<&Path>, steps: Option<usize>) -> Result<()> {
    if stage > 1 && init.is_none() {
        bail!("stage {stage} continues from an earlier stage and needs --init <checkpoint stem>");
    }
    let cfg = &mut ctx.cfg;
    cfg.stage = stage;
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    let data_dir = ctx.workdir.join(&cfg.paths.train_data);
    let ds = read_dataset(&data_dir).with_context(|| format!("reading dataset {}", data_dir.display()))?;
    let mut model = Denoiser::new(cfg.model.clone(), derive_seed(cfg.seed, &[0x1417]))?;
    if let Some(stem) = init {
        let stem = ctx.workdir.join(stem);
        checkpoint::load_into(model.params_mut(), &stem)
            .with_context(|| format!("loading checkpoint {} into the configured model", stem.display()))?;
    }
    let log = train_stage(&mut model, &ds, cfg)?;
    let dir = ctx.workdir.join(&cfg.paths.checkpoints).join(format!("stage{stage}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint::save(model.params(), &dir.join("model"))?;
    let mut csv = String::from("step,loss,lr,stage\n");
    for r in &log.rows {
        csv.push_str(&format!("{},{:?},{:?},{}\n", r.step, r.loss, r.lr, r.stage));
    }
    fs::write(dir.join("loss.csv"), csv).with_context(|| format!("writing {}", dir.display()))?;
    write_json(&dir.join(RUN_CONFIG), cfg)?;
    if let (Some(first), Some(last)) = (log.rows.first(), log.rows.last()) {
        eprintln!("stage {stage}: {} steps, loss {:.5} -> {:.5}", log.rows.len(), first.loss, last.loss);
    }
    eprintln!("wrote {}", dir.join("model").display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, broken: bool) -> Result<bool> {
    let report = gradcheck_suite(seed, broken)?;
    let mut out = std::io::stdout().lock();
    for e in &report.entries {
        writeln!(out, "{:<16} max_rel_err {:.3e} {}", e.op, e.max_rel_err, if e.passed { "ok" } else { "FAIL" })?;
    }
    let failures = report.failures();
    if failures.is_empty() {
        writeln!(out, "all {} checks passed", report.entries.len())?;
    } else {
        writeln!(out, "failed: {}", failures.join(", "))?;
    }
    Ok(failures.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = load_config(&cli.workdir, cli.config.as_deref())?;
    if cli.threads > 1 {
        eprintln!("--threads {}: kernels are single-threaded, running on one thread", cli.threads);
    }
    let mut ctx = Workspace {
        workdir: cli.workdir,
        cfg,
    };
    match cli.command {
        Command::Synth { scenes, frames } => cmd_synth(&mut ctx, scenes, frames)?,
        Command::Train { stage, init, steps } => cmd_train(&mut ctx, stage, init.as_deref(), steps)?,
        Command::Generate(args) => generate::cmd_generate(&ctx, &args)?,
        Command::Gradcheck { broken } => return cmd_gradcheck(ctx.cfg.seed, broken),
    }
    Ok(true)
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    if let Command::Train { stage, init: None, .. } = cli.command {
        if stage > 1 {
            Cli::command()
                .error(ErrorKind::MissingRequiredArgument, format!("--stage {stage} requires --init <checkpoint stem>"))
                .exit();
        }
    }
    match run(cli) {
        Ok(true) => std::process::ExitCode::SUCCESS,
        Ok(false) => std::process::ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
