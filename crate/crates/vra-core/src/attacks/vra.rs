//! Representation attack: a single gradient-sign step that pushes the
//! source model's normalized features along a chosen unit direction, plus
//! the hard-label query loop that searches over directions, and the
//! iterated sparsity-constrained variant.

use ndarray::Array1;

use super::{
    clamp_to_valid_range, resolve_clean_prediction, AttackConfig, AttackResult, DirectionMode,
};
use crate::data::{PixelTensor, VideoClip};
use crate::directions::DirectionBasis;
use crate::error::{Error, Result};
use crate::model::features::{cosine_input_gradient, extract_features, FeatureSpec, FeatureVector};
use crate::model::{SourceModel, TargetOracle};
use crate::util::sign;

/// Cosine similarity between a feature vector and an attack direction.
pub fn vra_loss(features: &FeatureVector, direction: &Array1<f64>) -> Result<f64> {
    if features.dim() != direction.len() {
        return Err(Error::Interface(format!(
            "feature dimension {} != direction dimension {}",
            features.dim(),
            direction.len()
        )));
    }
    let f_norm = features.values.dot(&features.values).sqrt();
    let d_norm = direction.dot(direction).sqrt();
    if f_norm < 1e-12 || d_norm < 1e-12 {
        return Err(Error::DegenerateInput(
            "cosine loss undefined for zero vectors".into(),
        ));
    }
    Ok(features.values.dot(direction) / (f_norm * d_norm))
}

/// Single gradient-sign step: `delta = -epsilon * sign(d cos / d x)`.
/// Every element lies in `{-epsilon, 0, +epsilon}` before range clipping.
pub fn vra_perturb(
    model: &SourceModel,
    pixels: &PixelTensor,
    direction: &Array1<f64>,
    epsilon: f64,
    features: &FeatureSpec,
    clip_to_valid_range: bool,
) -> Result<PixelTensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Parameter("epsilon must be >= 0".into()));
    }
    let (_, grad) = cosine_input_gradient(model, pixels, features, direction)?;
    let mut delta = grad.mapv(|g| -epsilon * sign(g));
    if clip_to_valid_range {
        clamp_to_valid_range(&mut delta, pixels);
    }
    Ok(delta)
}

/// Iterated sparse perturbation: accumulates `n_iters` steps of magnitude
/// `epsilon / n_iters` against the cosine loss augmented with an L1
/// sparsity term on the running perturbation, then clamps to the L∞ ball
/// and the valid pixel range. With `lambda = 0` and `n_iters = 1` this
/// reduces bitwise to [`vra_perturb`].
pub fn sparse_vra_perturb(
    model: &SourceModel,
    pixels: &PixelTensor,
    direction: &Array1<f64>,
    epsilon: f64,
    lambda: f64,
    n_iters: usize,
    features: &FeatureSpec,
    clip_to_valid_range: bool,
) -> Result<PixelTensor> {
    if n_iters < 1 {
        return Err(Error::Parameter("n_iters must be >= 1".into()));
    }
    if !(epsilon >= 0.0) || !(lambda >= 0.0) {
        return Err(Error::Parameter("epsilon and lambda must be >= 0".into()));
    }
    let alpha = epsilon / n_iters as f64;
    let mut delta: PixelTensor = ndarray::Array4::zeros(pixels.dim());
    for _ in 0..n_iters {
        let point = pixels + &delta;
        let (_, mut grad) = cosine_input_gradient(model, &point, features, direction)?;
        if lambda > 0.0 {
            // d/d(delta) of lambda * ||delta||_1.
            grad.zip_mut_with(&delta, |g, &d| *g += lambda * sign(d));
        }
        delta.zip_mut_with(&grad, |d, &g| *d -= alpha * sign(g));
    }
    delta.mapv_inplace(|d| d.clamp(-epsilon, epsilon));
    if clip_to_valid_range {
        clamp_to_valid_range(&mut delta, pixels);
    }
    Ok(delta)
}

/// Shared hard-label query loop over a direction sequence. The candidate
/// perturbation is recomputed from the clean clip for every direction
/// (non-accumulating): candidate `i` depends only on the clean clip and
/// direction `i`.
fn direction_query_loop<F>(
    model: &SourceModel,
    oracle: &TargetOracle,
    clip: &VideoClip,
    true_label: usize,
    clean_pred: Option<usize>,
    cfg: &AttackConfig,
    mut perturb: F,
) -> Result<AttackResult>
where
    F: FnMut(&SourceModel, &PixelTensor, &Array1<f64>) -> Result<PixelTensor>,
{
    cfg.validate()?;
    let (clean_label, charged) = resolve_clean_prediction(oracle, &clip.pixels, clean_pred)?;
    if clean_label != true_label {
        return Ok(AttackResult::skipped(clean_label, charged));
    }

    let anchor = extract_features(model, &clip.pixels, &cfg.features)?;
    if anchor.is_degenerate() {
        return Err(Error::DegenerateInput(format!(
            "clip {}: zero feature vector, no attack direction defined",
            clip.clip_id
        )));
    }
    let mut basis = DirectionBasis::init(&anchor, cfg.seed)?;

    let mut used = charged;
    let mut last_delta = None;
    let mut last_label = clean_label;
    while used < cfg.q_max {
        let direction = match cfg.direction_mode {
            DirectionMode::Orthogonal => basis.next_direction()?,
            DirectionMode::Random => basis.random_direction(),
        };
        let delta = perturb(model, &clip.pixels, &direction)?;
        let adv = &clip.pixels + &delta;
        let label = match oracle.hard_label_query(&adv) {
            Ok(label) => label,
            Err(Error::BudgetExceeded { .. }) => {
                // Terminal failure: the oracle refused the query.
                return Ok(AttackResult {
                    success: false,
                    queries_used: used,
                    perturbation: last_delta,
                    final_label: last_label,
                    skipped_clean_error: false,
                    basis_resets: basis.resets(),
                });
            }
            Err(e) => return Err(e),
        };
        used += 1;
        if label != true_label {
            return Ok(AttackResult {
                success: true,
                queries_used: used,
                perturbation: Some(delta),
                final_label: label,
                skipped_clean_error: false,
                basis_resets: basis.resets(),
            });
        }
        last_delta = Some(delta);
        last_label = label;
    }
    Ok(AttackResult {
        success: false,
        queries_used: used,
        perturbation: last_delta,
        final_label: last_label,
        skipped_clean_error: false,
        basis_resets: basis.resets(),
    })
}

/// Representation attack in the hard-label query setup: anchor the basis at
/// the clean representation, then per query draw a direction (orthogonal or
/// random per config), compute the single-step perturbation from the clean
/// clip, and ask the oracle. Returns on the first label flip. The direction
/// sequence is a pure function of `cfg.seed`.
pub fn vra_attack(
    model: &SourceModel,
    oracle: &TargetOracle,
    clip: &VideoClip,
    true_label: usize,
    clean_pred: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    direction_query_loop(
        model,
        oracle,
        clip,
        true_label,
        clean_pred,
        cfg,
        |model, pixels, direction| {
            vra_perturb(
                model,
                pixels,
                direction,
                cfg.epsilon,
                &cfg.features,
                cfg.clip_to_valid_range,
            )
        },
    )
}

/// Query-loop variant generating sparsity-constrained perturbations.
pub fn sparse_vra_attack(
    model: &SourceModel,
    oracle: &TargetOracle,
    clip: &VideoClip,
    true_label: usize,
    clean_pred: Option<usize>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    direction_query_loop(
        model,
        oracle,
        clip,
        true_label,
        clean_pred,
        cfg,
        |model, pixels, direction| {
            sparse_vra_perturb(
                model,
                pixels,
                direction,
                cfg.epsilon,
                cfg.sparsity_lambda,
                cfg.n_iters,
                &cfg.features,
                cfg.clip_to_valid_range,
            )
        },
    )
}
