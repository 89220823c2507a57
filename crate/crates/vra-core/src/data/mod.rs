//! Video datasets: clip/ontology types, on-disk storage, label overlap and
//! synthetic generation with controllable class overlap.

mod manifest;
mod store;
mod synthetic;

pub use manifest::{parse_manifest, Manifest, ManifestClip};
pub use store::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, generate_synthetic_split, motif_pool_size};

use std::collections::HashSet;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel tensor of one clip: shape `T × H × W × 3`, values in `[0, 1]`.
pub type PixelTensor = Array4<f64>;

/// One video clip with its class label.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub pixels: PixelTensor,
    pub label_id: usize,
    pub clip_id: String,
}

impl VideoClip {
    /// Builds a clip, enforcing shape and value-range invariants.
    pub fn new(pixels: PixelTensor, label_id: usize, clip_id: impl Into<String>) -> Result<Self> {
        let clip_id = clip_id.into();
        let (t, h, w, c) = pixels.dim();
        if t < 1 || h < 1 || w < 1 {
            return Err(Error::Format(format!(
                "clip {clip_id}: empty dimension in shape {t}x{h}x{w}x{c}"
            )));
        }
        if c != 3 {
            return Err(Error::Format(format!(
                "clip {clip_id}: channel dimension must be 3, got {c}"
            )));
        }
        if pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::Format(format!(
                "clip {clip_id}: pixel values outside [0, 1]"
            )));
        }
        Ok(VideoClip {
            pixels,
            label_id,
            clip_id,
        })
    }

    /// `(T, H, W)` of this clip.
    pub fn shape(&self) -> (usize, usize, usize) {
        let (t, h, w, _) = self.pixels.dim();
        (t, h, w)
    }
}

/// Ordered, unique class names of one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelOntology {
    class_names: Vec<String>,
    dataset_name: String,
}

impl LabelOntology {
    pub fn new(class_names: Vec<String>, dataset_name: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(Error::Label("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Label(format!("duplicate class name {name:?}")));
            }
        }
        Ok(LabelOntology {
            class_names,
            dataset_name: dataset_name.into(),
        })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn dataset_name(&self) -> &str {
        &self.dataset_name
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    /// Stable index of a class name, if present.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, label_id: usize) -> Option<&str> {
        self.class_names.get(label_id).map(String::as_str)
    }
}

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
        }
    }
}

/// A set of clips over one ontology. Immutable after construction; safe to
/// share read-only across workers.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<VideoClip>,
    pub ontology: LabelOntology,
    pub split: Split,
}

impl Dataset {
    pub fn new(clips: Vec<VideoClip>, ontology: LabelOntology, split: Split) -> Result<Self> {
        for clip in &clips {
            if clip.label_id >= ontology.len() {
                return Err(Error::Label(format!(
                    "clip {} has label id {} but ontology has {} classes",
                    clip.clip_id,
                    clip.label_id,
                    ontology.len()
                )));
            }
        }
        Ok(Dataset {
            clips,
            ontology,
            split,
        })
    }
}

/// Controlled-overlap request for synthetic source/target dataset pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapSpec {
    pub n_source_classes: usize,
    pub n_common_classes: usize,
    pub seed: u64,
}

impl OverlapSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_common_classes > self.n_source_classes {
            return Err(Error::Parameter(format!(
                "n_common_classes ({}) exceeds n_source_classes ({})",
                self.n_common_classes, self.n_source_classes
            )));
        }
        Ok(())
    }
}

/// Count and fraction of class names shared by two ontologies, using exact
/// string match.
pub fn class_overlap(a: &LabelOntology, b: &LabelOntology) -> (usize, f64) {
    let b_names: HashSet<&str> = b.class_names.iter().map(String::as_str).collect();
    let count = a
        .class_names
        .iter()
        .filter(|n| b_names.contains(n.as_str()))
        .count();
    let fraction = if a.class_names.is_empty() {
        0.0
    } else {
        count as f64 / a.class_names.len() as f64
    };
    (count, fraction)
}
