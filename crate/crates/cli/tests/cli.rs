use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn streamdiff(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamdiff"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("STAGE_SEED")
        .output()
        .expect("spawn streamdiff")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// A small model so the end-to-end commands run in seconds.
fn small_config(dir: &Path) {
    let cfg = json!({
        "seed": 3,
        "schedule": {"n_steps": 4},
        "model": {
            "base_channels": 4, "channel_mults": [1, 2], "groups": 2, "sigma_freqs": 4, "emb_dim": 8,
            "fusion_sites": ["mid", "dec1"]
        },
        "data": {"train_scenes": 1, "eval_scenes": 1, "frames": 12}
    });
    fs::write(dir.join("run-config.json"), cfg.to_string()).unwrap();
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_writes_requested_sizes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    ok(streamdiff(dir.path(), &["synth", "--scenes", "1", "--frames", "24"]));
    let meta = read_json(&dir.path().join("data/train/meta.json"));
    assert_eq!(meta["scenes"].as_array().unwrap().len(), 1);
    assert_eq!(meta["scenes"][0]["n_frames"], 24);
    let latents = fs::read(dir.path().join("data/train/latents.bin")).unwrap();
    assert_eq!(latents.len(), 24 * 32 * 32 * 4);
    assert_eq!(read_json(&dir.path().join("data/eval/meta.json"))["scenes"].as_array().unwrap().len(), 2);
    let frames = fs::read(dir.path().join("data/train/frames.bin")).unwrap();
    ok(streamdiff(dir.path(), &["synth"]));
    assert_eq!(fs::read(dir.path().join("data/train/frames.bin")).unwrap(), frames);
}

#[test]
fn default_synth_has_eight_train_and_two_eval_scenes() {
    let dir = tempfile::tempdir().unwrap();
    ok(streamdiff(dir.path(), &["synth", "--frames", "2"]));
    let cfg = read_json(&dir.path().join("run-config.json"));
    assert_eq!(cfg["data"]["train_scenes"], 8);
    assert_eq!(read_json(&dir.path().join("data/train/meta.json"))["scenes"].as_array().unwrap().len(), 8);
    assert_eq!(read_json(&dir.path().join("data/eval/meta.json"))["scenes"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_env_overrides_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(streamdiff(a.path(), &["synth", "--scenes", "1", "--frames", "2"]));
    let out = Command::new(env!("CARGO_BIN_EXE_streamdiff"))
        .args(["--workdir", b.path().to_str().unwrap(), "synth", "--scenes", "1", "--frames", "2"])
        .env("STAGE_SEED", "77")
        .output()
        .unwrap();
    ok(out);
    assert_eq!(read_json(&b.path().join("run-config.json"))["seed"], 77);
    assert_ne!(
        fs::read(a.path().join("data/train/frames.bin")).unwrap(),
        fs::read(b.path().join("data/train/frames.bin")).unwrap()
    );
}

#[test]
fn later_stages_require_init() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["2", "3"] {
        let out = streamdiff(dir.path(), &["train", "--stage", stage]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
    }
    assert_eq!(streamdiff(dir.path(), &["train", "--stage", "4"]).status.code(), Some(2));
}

#[test]
fn train_chain_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    small_config(w);
    ok(streamdiff(w, &["synth"]));
    ok(streamdiff(w, &["train", "--stage", "1", "--steps", "7"]));
    let csv = fs::read_to_string(w.join("checkpoints/stage1/loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,stage");
    assert_eq!(lines.len(), 1 + 7);
    assert!(lines[1].ends_with(",1"));
    ok(streamdiff(w, &["train", "--stage", "2", "--init", "checkpoints/stage1/model", "--steps", "4"]));
    ok(streamdiff(w, &["train", "--stage", "3", "--init", "checkpoints/stage2/model", "--steps", "3"]));
    assert_eq!(fs::read_to_string(w.join("checkpoints/stage3/loss.csv")).unwrap().lines().count(), 1 + 3);

    ok(streamdiff(w, &["generate", "--checkpoint", "checkpoints/stage3/model", "--frames", "11", "--dump-frames", "frames"]));
    let pgms: Vec<String> = {
        let mut v: Vec<String> =
            fs::read_dir(w.join("frames")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(pgms.len(), 11);
    assert_eq!(pgms[0], "frame_0001.pgm");
    assert_eq!(pgms[10], "frame_0011.pgm");
    let pgm = fs::read(w.join("frames/frame_0001.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n128 128\n255\n"));
    assert_eq!(pgm.len(), 15 + 128 * 128);
    assert_eq!(fs::read(w.join("output/latents.bin")).unwrap().len(), 11 * 32 * 32 * 4);
    assert_eq!(read_json(&w.join("output/latents.json"))["shape"], json!([11, 1, 32, 32]));
    let m = read_json(&w.join("output/metrics.json"));
    assert_eq!(m["psnr_latent"].as_array().unwrap().len(), 11);
    assert_eq!(m["drift"]["series"].as_array().unwrap().len(), 11);
    assert!(m["psnr_latent"].as_array().unwrap().iter().all(|p| p.as_f64().unwrap().is_finite()));
    assert!(m["proxy_frechet"].as_f64().unwrap() >= 0.0);
    assert!(m["buffer_bytes"].as_u64().unwrap() > 0);

    let beyond = streamdiff(w, &["generate", "--checkpoint", "checkpoints/stage3/model", "--frames", "12"]);
    assert!(!beyond.status.success());
    assert!(String::from_utf8_lossy(&beyond.stderr).contains("--infinite"));

    ok(streamdiff(w, &["generate", "--checkpoint", "checkpoints/stage1/model", "--frames", "20", "--infinite", "--ablate-fusion", "--out", "inf"]));
    let m = read_json(&w.join("inf/metrics.json"));
    assert_eq!(m["psnr_pixel"].as_array().unwrap().len(), 20);
    assert_eq!(m["buffer_bytes"], 0);

    let first = fs::read(w.join("output/latents.bin")).unwrap();
    ok(streamdiff(w, &["generate", "--checkpoint", "checkpoints/stage3/model", "--frames", "11"]));
    assert_eq!(fs::read(w.join("output/latents.bin")).unwrap(), first);
}

#[test]
fn mismatched_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    small_config(w);
    ok(streamdiff(w, &["synth"]));
    ok(streamdiff(w, &["train", "--stage", "1", "--steps", "1"]));
    let mut cfg = read_json(&w.join("run-config.json"));
    cfg["model"]["base_channels"] = json!(8);
    fs::write(w.join("other.json"), cfg.to_string()).unwrap();
    let out = streamdiff(w, &["--config", "other.json", "generate", "--checkpoint", "checkpoints/stage1/model", "--frames", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not match"));
}

#[test]
fn gradcheck_passes_and_names_broken_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(streamdiff(dir.path(), &["gradcheck"]));
    let text = String::from_utf8_lossy(&out.stdout);
    for op in ["matmul", "conv2d", "cross_attention", "denoiser"] {
        assert!(text.contains(op), "{text}");
    }
    assert!(text.contains("max_rel_err"));
    let out = streamdiff(dir.path(), &["gradcheck", "--broken"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("failed: broken_square"));
}
