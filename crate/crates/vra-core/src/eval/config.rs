//! Experiment configuration schemas: JSON files with dotted-key overrides.
//!
//! Every run logs its resolved configuration and a hash of it, so any
//! emitted results row can be traced back to the exact settings.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attacks::{DirectionMode, FgsmParams, FgsmVariant, DEFAULT_EPSILON};
use crate::data::OverlapSpec;
use crate::error::{Error, Result};
use crate::model::features::FeatureSpec;
use crate::model::{ArchDescriptor, TrainConfig};
use crate::util::hex_digest;

/// One attack choice in an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Vra {
        #[serde(default = "default_direction")]
        direction: DirectionMode,
        #[serde(default)]
        features: FeatureSpec,
    },
    SparseVra {
        lambda: f64,
        n_iters: usize,
        #[serde(default)]
        features: FeatureSpec,
    },
    Fgsm {
        variant: FgsmVariant,
        #[serde(default)]
        params: FgsmParams,
    },
    TargetedLl,
    RandomPerturbation,
}

fn default_direction() -> DirectionMode {
    DirectionMode::Orthogonal
}

impl AttackSpec {
    /// Stable name used in result tables and plots.
    pub fn name(&self) -> String {
        match self {
            AttackSpec::Vra { direction, .. } => match direction {
                DirectionMode::Orthogonal => "vra-orthogonal".into(),
                DirectionMode::Random => "vra-random-direction".into(),
            },
            AttackSpec::SparseVra { lambda, n_iters, .. } => {
                format!("sparse-vra-l{lambda:e}-n{n_iters}")
            }
            AttackSpec::Fgsm { variant, .. } => variant.name().to_string(),
            AttackSpec::TargetedLl => "targeted-ll-fgsm".into(),
            AttackSpec::RandomPerturbation => "random-perturbation".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::SparseVra { lambda, n_iters, .. } => {
                if *n_iters < 1 {
                    return Err(Error::Parameter("sparse_vra.n_iters must be >= 1".into()));
                }
                if !(*lambda >= 0.0) {
                    return Err(Error::Parameter("sparse_vra.lambda must be >= 0".into()));
                }
                Ok(())
            }
            AttackSpec::Fgsm { params, .. } => params.validate(),
            _ => Ok(()),
        }
    }
}

/// Architecture selection for training jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSpec {
    Desk,
    Tiny,
    Custom(ArchDescriptor),
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec::Desk
    }
}

impl ArchSpec {
    pub fn descriptor(&self, n_classes: usize) -> Result<ArchDescriptor> {
        match self {
            ArchSpec::Desk => Ok(ArchDescriptor::desk(n_classes)),
            ArchSpec::Tiny => Ok(ArchDescriptor::tiny(n_classes)),
            ArchSpec::Custom(desc) => {
                if desc.n_classes != n_classes {
                    return Err(Error::Parameter(format!(
                        "custom architecture has {} classes but the dataset has {n_classes}",
                        desc.n_classes
                    )));
                }
                Ok(desc.clone())
            }
        }
    }
}

/// `gen-data`: synthetic source/target dataset pair with controlled overlap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub output_dir: PathBuf,
    pub overlap: OverlapSpec,
    pub n_target_classes: usize,
    pub clips_per_class_train: usize,
    pub clips_per_class_val: usize,
    /// Clip shape `[T, H, W]`.
    pub shape: (usize, usize, usize),
}

impl GenDataConfig {
    pub fn validate(&self) -> Result<()> {
        self.overlap.validate()?;
        if self.clips_per_class_train == 0 || self.clips_per_class_val == 0 {
            return Err(Error::Parameter("clips_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// `train`: fit a model on a dataset root and save a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJobConfig {
    /// Dataset split root (manifest.json + clips/).
    pub data_root: PathBuf,
    pub output_dir: PathBuf,
    /// Checkpoint filename within `output_dir`.
    #[serde(default = "default_checkpoint_name")]
    pub checkpoint_name: String,
    #[serde(default)]
    pub arch: ArchSpec,
    pub train: TrainConfig,
}

fn default_checkpoint_name() -> String {
    "model.vrck".into()
}

/// Attack selection plus its query budget, used by the `attack` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRunConfig {
    #[serde(flatten)]
    pub spec: AttackSpec,
    pub q_max: u64,
}

/// `attack`: one attack at one budget over an evaluation set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackJobConfig {
    pub source_checkpoint: PathBuf,
    pub target_checkpoint: PathBuf,
    /// Evaluation dataset root (target ontology).
    pub eval_data: PathBuf,
    pub attack: AttackRunConfig,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_eval_clips: Option<usize>,
    #[serde(default = "default_true")]
    pub clip_to_valid_range: bool,
    pub output_dir: PathBuf,
}

/// `sweep`: a list of attacks evaluated at every budget via prefix replay.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub source_checkpoint: PathBuf,
    pub target_checkpoint: PathBuf,
    pub eval_data: PathBuf,
    pub attacks: Vec<AttackSpec>,
    /// Strictly increasing query budgets.
    pub budgets: Vec<u64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub max_eval_clips: Option<usize>,
    #[serde(default = "default_true")]
    pub clip_to_valid_range: bool,
    pub output_dir: PathBuf,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attacks.is_empty() {
            return Err(Error::Parameter("attack list is empty".into()));
        }
        for attack in &self.attacks {
            attack.validate()?;
        }
        validate_budgets(&self.budgets)?;
        if !(self.epsilon >= 0.0) {
            return Err(Error::Parameter("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

pub(crate) fn validate_budgets(budgets: &[u64]) -> Result<()> {
    if budgets.is_empty() {
        return Err(Error::Parameter("budget list is empty".into()));
    }
    for pair in budgets.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Parameter(format!(
                "budgets must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    if budgets[0] == 0 {
        return Err(Error::Parameter("budgets must be >= 1".into()));
    }
    Ok(())
}

/// `overlap-exp`: train fresh source models at several overlap levels
/// against one fixed target and correlate overlap with deception rate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverlapExpConfig {
    /// At least three levels, including a zero-overlap one.
    pub levels: Vec<OverlapSpec>,
    pub n_target_classes: usize,
    pub clips_per_class_train: usize,
    pub clips_per_class_val: usize,
    pub shape: (usize, usize, usize),
    #[serde(default)]
    pub arch: ArchSpec,
    pub train: TrainConfig,
    #[serde(default = "default_overlap_q_max")]
    pub q_max: u64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub features: FeatureSpec,
    #[serde(default = "default_true")]
    pub include_random_baseline: bool,
    #[serde(default)]
    pub max_eval_clips: Option<usize>,
    pub output_dir: PathBuf,
}

fn default_overlap_q_max() -> u64 {
    100
}

impl OverlapExpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() < 3 {
            return Err(Error::Parameter(format!(
                "overlap experiment needs >= 3 levels, got {}",
                self.levels.len()
            )));
        }
        if !self.levels.iter().any(|l| l.n_common_classes == 0) {
            return Err(Error::Parameter(
                "overlap levels must include a zero-overlap level".into(),
            ));
        }
        for level in &self.levels {
            level.validate()?;
        }
        if self.q_max == 0 {
            return Err(Error::Parameter("q_max must be >= 1".into()));
        }
        if self.clips_per_class_train == 0 || self.clips_per_class_val == 0 {
            return Err(Error::Parameter("clips_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_true() -> bool {
    true
}

/// Applies one `dotted.key=value` override to a JSON document. The value is
/// parsed as JSON when possible, else taken as a string.
pub fn apply_override(doc: &mut serde_json::Value, key: &str, raw_value: &str) -> Result<()> {
    if key.is_empty() {
        return Err(Error::Parameter("override key is empty".into()));
    }
    let parsed: serde_json::Value = serde_json::from_str(raw_value)
        .unwrap_or_else(|_| serde_json::Value::String(raw_value.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Parameter(format!(
                "override key {key:?} has an empty segment"
            )));
        }
        let object = cursor.as_object_mut().ok_or_else(|| {
            Error::Parameter(format!(
                "override {key:?}: {} is not an object",
                parts[..i].join(".")
            ))
        })?;
        if i == parts.len() - 1 {
            object.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = object
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Parses `key=value` override arguments.
pub fn parse_override_arg(arg: &str) -> Result<(String, String)> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(Error::Parameter(format!(
            "override {arg:?} is not of the form key=value"
        ))),
    }
}

/// Parses configuration bytes into `T` after applying overrides. Returns the
/// typed config together with the resolved JSON document.
pub fn parse_config_with_overrides<T: DeserializeOwned>(
    bytes: &[u8],
    overrides: &[(String, String)],
) -> Result<(T, serde_json::Value)> {
    let mut doc: serde_json::Value = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("config parse failed: {e}")))?;
    if !doc.is_object() {
        return Err(Error::Format("config root must be a JSON object".into()));
    }
    for (key, value) in overrides {
        apply_override(&mut doc, key, value)?;
    }
    let typed: T = serde_json::from_value(doc.clone())
        .map_err(|e| Error::Format(format!("config invalid: {e}")))?;
    Ok((typed, doc))
}

/// Loads a config file with overrides.
pub fn load_config<T: DeserializeOwned>(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<(T, serde_json::Value)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Load(format!("missing config {}: {e}", path.display())))?;
    parse_config_with_overrides(&bytes, overrides)
}

/// Provenance hash of a resolved config document (serde_json maps are
/// sorted, so serialization is canonical).
pub fn config_hash(doc: &serde_json::Value) -> String {
    hex_digest(&serde_json::to_vec(doc).expect("JSON value serializes"))
}

/// Untrusted-input parsers exercised by the fuzz targets.
pub mod untrusted {
    use super::*;

    pub fn parse_gen_data(bytes: &[u8]) -> Result<GenDataConfig> {
        let (cfg, _) = parse_config_with_overrides::<GenDataConfig>(bytes, &[])?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_train_job(bytes: &[u8]) -> Result<TrainJobConfig> {
        let (cfg, _) = parse_config_with_overrides::<TrainJobConfig>(bytes, &[])?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn parse_attack_job(bytes: &[u8]) -> Result<AttackJobConfig> {
        let (cfg, _) = parse_config_with_overrides::<AttackJobConfig>(bytes, &[])?;
        cfg.attack.spec.validate()?;
        Ok(cfg)
    }

    pub fn parse_sweep(bytes: &[u8]) -> Result<SweepConfig> {
        let (cfg, _) = parse_config_with_overrides::<SweepConfig>(bytes, &[])?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_overlap_exp(bytes: &[u8]) -> Result<OverlapExpConfig> {
        let (cfg, _) = parse_config_with_overrides::<OverlapExpConfig>(bytes, &[])?;
        cfg.validate()?;
        Ok(cfg)
    }
}
