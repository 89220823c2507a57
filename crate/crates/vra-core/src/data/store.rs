//! On-disk dataset layout: `manifest.json` plus 8-bit RGB PNG frames under
//! `clips/<clip_id>/frame_00000.png …` with zero-padded 5-digit indices.

use std::fs;
use std::path::Path;

use image::{ImageReader, RgbImage};
use ndarray::Array4;

use super::manifest::{parse_manifest, Manifest, ManifestClip};
use super::{Dataset, LabelOntology, VideoClip};
use crate::error::{Error, Result};

fn frame_name(index: u64) -> String {
    format!("frame_{index:05}.png")
}

/// Writes a dataset to `root`, quantizing pixels to 8 bits.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let clips_dir = root.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;

    let manifest = Manifest {
        dataset_name: dataset.ontology.dataset_name().to_string(),
        split: dataset.split,
        class_names: dataset.ontology.class_names().to_vec(),
        clips: dataset
            .clips
            .iter()
            .map(|clip| ManifestClip {
                clip_id: clip.clip_id.clone(),
                class_name: dataset
                    .ontology
                    .name_of(clip.label_id)
                    .expect("dataset invariant: label id within ontology")
                    .to_string(),
                frame_count: clip.pixels.dim().0 as u64,
            })
            .collect(),
    };
    let manifest_path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest encode failed: {e}")))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    for clip in &dataset.clips {
        let dir = clips_dir.join(&clip.clip_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (t_len, height, width, _) = clip.pixels.dim();
        for t in 0..t_len {
            let mut img = RgbImage::new(width as u32, height as u32);
            for y in 0..height {
                for x in 0..width {
                    let px = img.get_pixel_mut(x as u32, y as u32);
                    for c in 0..3 {
                        let v = clip.pixels[[t, y, x, c]].clamp(0.0, 1.0);
                        px.0[c] = (v * 255.0).round() as u8;
                    }
                }
            }
            let path = dir.join(frame_name(t as u64));
            img.save(&path)
                .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

/// Loads a dataset root written by [`save_dataset`] (or compatible tools).
/// Frames are decoded in numeric filename order and scaled from 8-bit to
/// `[0, 1]`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    let bytes = fs::read(&manifest_path).map_err(|e| {
        Error::Load(format!(
            "missing or unreadable manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest = parse_manifest(&bytes)?;

    let ontology = LabelOntology::new(manifest.class_names.clone(), &manifest.dataset_name)?;

    let mut clips = Vec::with_capacity(manifest.clips.len());
    for entry in &manifest.clips {
        let label_id = ontology.index_of(&entry.class_name).ok_or_else(|| {
            Error::Label(format!(
                "clip {} references class {:?} not present in ontology",
                entry.clip_id, entry.class_name
            ))
        })?;
        let dir = root.join("clips").join(&entry.clip_id);
        if !dir.is_dir() {
            return Err(Error::Load(format!(
                "clip directory {} does not exist",
                dir.display()
            )));
        }

        let mut pixels: Option<Array4<f64>> = None;
        for t in 0..entry.frame_count {
            let path = dir.join(frame_name(t));
            let img = ImageReader::open(&path)
                .map_err(|e| Error::Load(format!("missing frame {}: {e}", path.display())))?
                .decode()
                .map_err(|e| Error::Format(format!("decoding {}: {e}", path.display())))?
                .into_rgb8();
            let (width, height) = (img.width() as usize, img.height() as usize);

            let tensor = pixels.get_or_insert_with(|| {
                Array4::zeros((entry.frame_count as usize, height, width, 3))
            });
            let (_, th, tw, _) = tensor.dim();
            if th != height || tw != width {
                return Err(Error::Format(format!(
                    "clip {}: frame {t} is {width}x{height}, expected {tw}x{th}",
                    entry.clip_id
                )));
            }
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    tensor[[t as usize, y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
                }
            }
        }
        let pixels = pixels.expect("frame_count >= 1 enforced by manifest validation");
        clips.push(VideoClip::new(pixels, label_id, entry.clip_id.clone())?);
    }

    Dataset::new(clips, ontology, manifest.split)
}
