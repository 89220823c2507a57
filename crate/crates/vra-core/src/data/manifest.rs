//! Dataset manifest schema and parser.
//!
//! On disk a dataset root looks like:
//!
//! ```text
//! <root>/manifest.json
//! <root>/clips/<clip_id>/frame_00000.png ... frame_NNNNN.png
//! ```
//!
//! The manifest is untrusted input; `parse_manifest` validates structure
//! before any frame is touched.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::Split;
use crate::error::{Error, Result};

/// Hard cap on manifest clip entries; guards against hostile inputs.
const MAX_CLIPS: usize = 1_000_000;
/// Hard cap on class count.
const MAX_CLASSES: usize = 100_000;
/// Hard cap on frames per clip.
const MAX_FRAMES: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClip {
    pub clip_id: String,
    pub class_name: String,
    pub frame_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_name: String,
    pub split: Split,
    pub class_names: Vec<String>,
    pub clips: Vec<ManifestClip>,
}

/// Rejects ids that could escape the dataset root when joined to a path.
fn valid_clip_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 255
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && id != "."
        && id != ".."
}

/// Parses and validates a manifest document.
pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("manifest parse failed: {e}")))?;

    if manifest.class_names.is_empty() {
        return Err(Error::Format("manifest has no class names".into()));
    }
    if manifest.class_names.len() > MAX_CLASSES {
        return Err(Error::Format(format!(
            "manifest lists {} classes, limit is {MAX_CLASSES}",
            manifest.class_names.len()
        )));
    }
    if manifest.clips.len() > MAX_CLIPS {
        return Err(Error::Format(format!(
            "manifest lists {} clips, limit is {MAX_CLIPS}",
            manifest.clips.len()
        )));
    }

    let mut class_set = HashSet::new();
    for name in &manifest.class_names {
        if name.is_empty() {
            return Err(Error::Label("manifest contains an empty class name".into()));
        }
        if !class_set.insert(name.as_str()) {
            return Err(Error::Label(format!(
                "manifest contains duplicate class name {name:?}"
            )));
        }
    }

    let mut id_set = HashSet::new();
    for clip in &manifest.clips {
        if !valid_clip_id(&clip.clip_id) {
            return Err(Error::Format(format!(
                "invalid clip id {:?}",
                clip.clip_id
            )));
        }
        if !id_set.insert(clip.clip_id.as_str()) {
            return Err(Error::Format(format!(
                "duplicate clip id {:?}",
                clip.clip_id
            )));
        }
        if !class_set.contains(clip.class_name.as_str()) {
            return Err(Error::Label(format!(
                "clip {} references unknown class {:?}",
                clip.clip_id, clip.class_name
            )));
        }
        if clip.frame_count == 0 || clip.frame_count > MAX_FRAMES {
            return Err(Error::Format(format!(
                "clip {} has invalid frame count {}",
                clip.clip_id, clip.frame_count
            )));
        }
    }

    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_json() -> String {
        serde_json::json!({
            "dataset_name": "synth",
            "split": "train",
            "class_names": ["a", "b"],
            "clips": [
                {"clip_id": "a_0000", "class_name": "a", "frame_count": 4},
                {"clip_id": "b_0000", "class_name": "b", "frame_count": 4}
            ]
        })
        .to_string()
    }

    #[test]
    fn parses_valid_manifest() {
        let m = parse_manifest(sample_json().as_bytes()).unwrap();
        assert_eq!(m.dataset_name, "synth");
        assert_eq!(m.clips.len(), 2);
        assert_eq!(m.split, Split::Train);
    }

    #[test]
    fn rejects_unknown_class_reference() {
        let json = sample_json().replace("\"class_name\":\"a\"", "\"class_name\":\"zzz\"");
        assert!(matches!(
            parse_manifest(json.as_bytes()),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn rejects_path_escape_clip_ids() {
        for bad in ["../x", "a/b", "", "..", "a\\b"] {
            let json = sample_json().replace("a_0000", bad);
            assert!(
                parse_manifest(json.as_bytes()).is_err(),
                "clip id {bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn rejects_zero_frames_and_garbage() {
        let json = sample_json().replace("\"frame_count\":4", "\"frame_count\":0");
        assert!(parse_manifest(json.as_bytes()).is_err());
        assert!(parse_manifest(b"not json").is_err());
        assert!(parse_manifest(b"{}").is_err());
    }
}
