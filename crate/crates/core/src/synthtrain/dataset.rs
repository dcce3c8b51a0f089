//! On-disk datasets: `annotations.json`, `manifest.json` and raw
//! little-endian `f64` image tensors in `images.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneConfig, SceneFrame};
use crate::annot::{load_annotations, save_annotations};
use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::tensornet::Tensor;

pub const DATASET_FORMAT: &str = "arcnn-dataset/1";

#[derive(Serialize, Deserialize)]
struct FrameEntry {
    frame_id: String,
    night: bool,
    clutter: Vec<BBox>,
    /// Element offsets of the reference and sensed tensors in `images.bin`.
    reference_offset: usize,
    sensed_offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    scene_config: Option<SceneConfig>,
    image_shape: [usize; 3],
    frames: Vec<FrameEntry>,
}

pub fn save_dataset(dir: impl AsRef<Path>, frames: &[SceneFrame], config: Option<&SceneConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image_shape = match frames.first() {
        Some(f) => {
            let s = f.reference.shape();
            [s[0], s[1], s[2]]
        }
        None => [3, 0, 0],
    };
    let per = image_shape.iter().product::<usize>();
    let mut bytes = Vec::with_capacity(frames.len() * 2 * per * 8);
    let mut entries = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        for t in [&f.reference, &f.sensed] {
            if t.shape() != image_shape {
                return Err(Error::ShapeMismatch(format!(
                    "frame '{}' image {:?} differs from {:?}",
                    f.annotation.frame_id,
                    t.shape(),
                    image_shape
                )));
            }
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        entries.push(FrameEntry {
            frame_id: f.annotation.frame_id.clone(),
            night: f.night,
            clutter: f.clutter.clone(),
            reference_offset: 2 * i * per,
            sensed_offset: (2 * i + 1) * per,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        scene_config: config.copied(),
        image_shape,
        frames: entries,
    };
    let annotations: Vec<_> = frames.iter().map(|f| f.annotation.clone()).collect();
    save_annotations(dir.join("annotations.json"), &annotations)?;
    let m = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&m, text).map_err(|e| Error::io(&m, e))?;
    let b = dir.join("images.bin");
    fs::write(&b, bytes).map_err(|e| Error::io(&b, e))
}

/// Frames plus the generator settings recorded at save time, if any.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Vec<SceneFrame>, Option<SceneConfig>)> {
    let dir = dir.as_ref();
    let m = dir.join("manifest.json");
    let text = fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(m.display().to_string(), &e))?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::InvalidArgument(format!(
            "unsupported dataset format '{}' (expected '{DATASET_FORMAT}')",
            manifest.format
        )));
    }
    let annotations = load_annotations(dir.join("annotations.json"))?;
    if annotations.len() != manifest.frames.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest lists {} frames, annotations hold {}",
            manifest.frames.len(),
            annotations.len()
        )));
    }
    let b = dir.join("images.bin");
    let bytes = fs::read(&b).map_err(|e| Error::io(&b, e))?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let per = manifest.image_shape.iter().product::<usize>();
    let tensor = |offset: usize| -> Result<Tensor> {
        let data = values
            .get(offset..offset + per)
            .ok_or_else(|| Error::InvalidArgument(format!("images.bin too short for offset {offset}")))?;
        Tensor::new(manifest.image_shape.to_vec(), data.to_vec())
    };
    let mut frames = Vec::with_capacity(annotations.len());
    for (e, a) in manifest.frames.into_iter().zip(annotations) {
        if e.frame_id != a.frame_id {
            return Err(Error::InvalidArgument(format!(
                "manifest frame '{}' does not match annotation frame '{}'",
                e.frame_id, a.frame_id
            )));
        }
        frames.push(SceneFrame {
            reference: tensor(e.reference_offset)?,
            sensed: tensor(e.sensed_offset)?,
            annotation: a,
            clutter: e.clutter,
            night: e.night,
        });
    }
    Ok((frames, manifest.scene_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::synthtrain::generate_dataset;

    #[test]
    fn save_load_round_trip() {
        let cfg = SceneConfig {
            image_size: (48, 40),
            object_size: (16.0, 24.0),
            shift_std: (1.0, 1.0),
            clutter_per_frame: (1, 1),
            seed: 5,
            ..SceneConfig::default()
        };
        let frames = generate_dataset(&cfg, 3, Execution::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &frames, Some(&cfg)).unwrap();
        let (back, c) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, frames);
        assert_eq!(c, Some(cfg));
    }
}
