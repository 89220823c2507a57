//! Perturbation generators: the representation attack and its query loop,
//! the sparsity-constrained variant, gradient-sign transfer baselines, the
//! targeted least-likely query baseline, and random perturbations.

mod fgsm;
mod random_noise;
mod vra;

pub use fgsm::{
    ce_input_gradient, fgsm_family_attack, fgsm_family_perturb, targeted_ll_query_attack,
    FgsmParams, FgsmVariant,
};
pub use random_noise::random_perturbation_attack;
pub use vra::{sparse_vra_attack, sparse_vra_perturb, vra_attack, vra_loss, vra_perturb};

use serde::{Deserialize, Serialize};

use crate::data::PixelTensor;
use crate::error::{Error, Result};
use crate::model::features::FeatureSpec;
use crate::model::TargetOracle;

/// Default L∞ budget in pixel units.
pub const DEFAULT_EPSILON: f64 = 4.0 / 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionMode {
    Orthogonal,
    Random,
}

/// Shared attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ budget, pixel units.
    pub epsilon: f64,
    /// Query budget per attacked clip.
    pub q_max: u64,
    pub direction_mode: DirectionMode,
    /// Feature layers/timesteps the representation attack targets.
    pub features: FeatureSpec,
    /// Sparsity weight for the iterated sparse variant.
    pub sparsity_lambda: f64,
    /// Iterations for the sparse variant (step size epsilon / n_iters).
    pub n_iters: usize,
    pub seed: u64,
    /// Keep perturbed pixels inside [0, 1]. Adjustment only ever shrinks
    /// perturbation magnitudes.
    pub clip_to_valid_range: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: DEFAULT_EPSILON,
            q_max: 100,
            direction_mode: DirectionMode::Orthogonal,
            features: FeatureSpec::penultimate(),
            sparsity_lambda: 0.0,
            n_iters: 1,
            seed: 0,
            clip_to_valid_range: true,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Parameter("epsilon must be >= 0".into()));
        }
        if self.q_max < 1 {
            return Err(Error::Parameter("q_max must be >= 1".into()));
        }
        if self.n_iters < 1 {
            return Err(Error::Parameter("n_iters must be >= 1".into()));
        }
        if !(self.sparsity_lambda >= 0.0) {
            return Err(Error::Parameter("sparsity_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of one attack on one clip.
#[derive(Debug, Clone)]
pub struct AttackResult {
    /// The oracle's label flipped away from the true label.
    pub success: bool,
    /// Oracle queries consumed by this attack (including a charged clean
    /// check when no cached clean prediction was supplied).
    pub queries_used: u64,
    /// Last perturbation sent to the oracle; absent when the attack was
    /// skipped before generating one.
    pub perturbation: Option<PixelTensor>,
    /// Label returned by the last oracle query (the clean prediction when
    /// the attack was skipped).
    pub final_label: usize,
    /// The clean clip was already misclassified; the attack did not run.
    pub skipped_clean_error: bool,
    /// Orthogonal-basis resets observed during the search (0 for attacks
    /// without a basis).
    pub basis_resets: u64,
}

impl AttackResult {
    pub(crate) fn skipped(clean_label: usize, queries_used: u64) -> Self {
        AttackResult {
            success: false,
            queries_used,
            perturbation: None,
            final_label: clean_label,
            skipped_clean_error: true,
            basis_resets: 0,
        }
    }
}

/// Shrinks `delta` elementwise so `pixels + delta` stays in `[0, 1]`.
pub(crate) fn clamp_to_valid_range(delta: &mut PixelTensor, pixels: &PixelTensor) {
    delta.zip_mut_with(pixels, |d, &p| {
        *d = (p + *d).clamp(0.0, 1.0) - p;
    });
}

/// Resolves the clean prediction, charging one oracle query when the caller
/// has no cached value. Returns `(clean_label, queries_charged)`.
pub(crate) fn resolve_clean_prediction(
    oracle: &TargetOracle,
    pixels: &PixelTensor,
    clean_pred: Option<usize>,
) -> Result<(usize, u64)> {
    match clean_pred {
        Some(label) => Ok((label, 0)),
        None => Ok((oracle.hard_label_query(pixels)?, 1)),
    }
}

/// Max-norm of a perturbation.
pub fn linf_norm(delta: &PixelTensor) -> f64 {
    delta.iter().fold(0.0, |m, &v| m.max(v.abs()))
}

/// L1 norm of a perturbation.
pub fn l1_norm(delta: &PixelTensor) -> f64 {
    delta.iter().map(|v| v.abs()).sum()
}

#[cfg(test)]
pub(crate) mod test_support {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use crate::data::PixelTensor;
    use crate::model::HardLabelClassifier;

    /// Always answers `label`.
    pub struct ConstantClassifier {
        pub label: usize,
        pub classes: usize,
    }

    impl HardLabelClassifier for ConstantClassifier {
        fn predict_label(&self, _pixels: &PixelTensor) -> usize {
            self.label
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
    }

    /// Answers `clean_label` first (the cached-clean check), then always a
    /// different label: every perturbed input "fools" it.
    pub struct AlwaysFooled {
        pub clean_label: usize,
        pub classes: usize,
        pub calls: AtomicUsize,
    }

    impl AlwaysFooled {
        pub fn new(clean_label: usize, classes: usize) -> Self {
            AlwaysFooled {
                clean_label,
                classes,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl HardLabelClassifier for AlwaysFooled {
        fn predict_label(&self, _pixels: &PixelTensor) -> usize {
            self.calls.fetch_add(1, Ordering::SeqCst);
            (self.clean_label + 1) % self.classes
        }
        fn num_classes(&self) -> usize {
            self.classes
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn range_clamp_only_shrinks() {
        let mut pixels = Array4::<f64>::zeros((1, 1, 2, 3));
        pixels[[0, 0, 0, 0]] = 1.0;
        pixels[[0, 0, 1, 0]] = 0.5;
        let mut delta = Array4::<f64>::from_elem((1, 1, 2, 3), 0.1);
        clamp_to_valid_range(&mut delta, &pixels);
        // Pixel at 1.0 cannot go higher: coordinate becomes 0.
        assert!(delta[[0, 0, 0, 0]].abs() < 1e-12);
        assert!((delta[[0, 0, 1, 0]] - 0.1).abs() < 1e-12);
        assert!(linf_norm(&delta) <= 0.1 + 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.q_max = 0;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig {
            epsilon: -1.0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = AttackConfig {
            n_iters: 0,
            ..AttackConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_epsilon_matches_pixel_budget() {
        assert!((AttackConfig::default().epsilon - 4.0 / 255.0).abs() < 1e-15);
    }
}
