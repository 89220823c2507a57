//! Feature extraction and input gradients.
//!
//! A feature vector is built from one or more conv blocks: per requested
//! (layer, timestep) the feature map is spatially average-pooled into a
//! slice of that layer's channel width; slices are concatenated and the
//! result is L2-normalized once, after concatenation.

use ndarray::{Array1, Array4};

use super::{GradRequest, SourceModel};
use crate::data::PixelTensor;
use crate::error::{Error, Result};

/// Raw feature vectors with L2 norm below this are treated as degenerate
/// (an all-constant clip can zero out every ReLU feature).
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Which layers and temporal slices feed the feature vector.
///
/// `layers: None` selects the penultimate layer (the deepest conv block).
/// `timesteps: None` pools over each layer's full temporal extent;
/// `Some(ts)` takes one spatially pooled slice per listed timestep, and
/// every timestep must be valid for every selected layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSpec {
    pub layers: Option<Vec<usize>>,
    pub timesteps: Option<Vec<usize>>,
}

impl FeatureSpec {
    pub fn penultimate() -> Self {
        FeatureSpec::default()
    }

    pub fn resolve_layers(&self, model: &SourceModel) -> Result<Vec<usize>> {
        let n = model.arch().blocks.len();
        let layers = match &self.layers {
            None => vec![model.arch().penultimate_layer()],
            Some(list) => list.clone(),
        };
        if layers.is_empty() {
            return Err(Error::Interface("no layers selected".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &l in &layers {
            if l >= n {
                return Err(Error::Interface(format!(
                    "unknown layer id {l}; model has {n} blocks"
                )));
            }
            if !seen.insert(l) {
                return Err(Error::Interface(format!("layer id {l} selected twice")));
            }
        }
        Ok(layers)
    }
}

/// Unit-normalized multi-layer, multi-temporal representation of a clip.
#[derive(Debug, Clone)]
pub struct FeatureVector {
    /// L2-normalized values (or all zeros for degenerate inputs).
    pub values: Array1<f64>,
    pub layer_ids: Vec<usize>,
    /// `None` = pooled over the layer's full temporal extent.
    pub timestep_ids: Option<Vec<usize>>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// True when the raw features vanished and no direction is defined.
    pub fn is_degenerate(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Layout bookkeeping: one pooled slice per (layer, timestep or pooled-all).
struct SliceLayout {
    /// (layer id, timestep or None, channel width)
    slices: Vec<(usize, Option<usize>, usize)>,
}

fn pool_slices(
    maps: &[Array4<f64>],
    layers: &[usize],
    timesteps: &Option<Vec<usize>>,
) -> Result<(Array1<f64>, SliceLayout)> {
    let mut raw = Vec::new();
    let mut layout = Vec::new();
    for &l in layers {
        let map = &maps[l];
        let (c, t, h, w) = map.dim();
        match timesteps {
            None => {
                let count = (t * h * w) as f64;
                for ci in 0..c {
                    let mut sum = 0.0;
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                sum += map[[ci, ti, hi, wi]];
                            }
                        }
                    }
                    raw.push(sum / count);
                }
                layout.push((l, None, c));
            }
            Some(ts) => {
                for &ti in ts {
                    if ti >= t {
                        return Err(Error::Interface(format!(
                            "timestep {ti} out of range for layer {l} (temporal extent {t})"
                        )));
                    }
                    let count = (h * w) as f64;
                    for ci in 0..c {
                        let mut sum = 0.0;
                        for hi in 0..h {
                            for wi in 0..w {
                                sum += map[[ci, ti, hi, wi]];
                            }
                        }
                        raw.push(sum / count);
                    }
                    layout.push((l, Some(ti), c));
                }
            }
        }
    }
    Ok((Array1::from_vec(raw), SliceLayout { slices: layout }))
}

/// Spreads a gradient on the raw pooled vector back onto per-layer maps.
fn scatter_slices(
    d_raw: &Array1<f64>,
    layout: &SliceLayout,
    maps: &[Array4<f64>],
    n_blocks: usize,
) -> Vec<Option<Array4<f64>>> {
    let mut d_maps: Vec<Option<Array4<f64>>> = (0..n_blocks).map(|_| None).collect();
    let mut offset = 0;
    for &(l, ts, c) in &layout.slices {
        let dim = maps[l].dim();
        let (_, t, h, w) = dim;
        let d_map = d_maps[l].get_or_insert_with(|| Array4::zeros(dim));
        match ts {
            None => {
                let scale = 1.0 / (t * h * w) as f64;
                for ci in 0..c {
                    let g = d_raw[offset + ci] * scale;
                    for ti in 0..t {
                        for hi in 0..h {
                            for wi in 0..w {
                                d_map[[ci, ti, hi, wi]] += g;
                            }
                        }
                    }
                }
            }
            Some(ti) => {
                let scale = 1.0 / (h * w) as f64;
                for ci in 0..c {
                    let g = d_raw[offset + ci] * scale;
                    for hi in 0..h {
                        for wi in 0..w {
                            d_map[[ci, ti, hi, wi]] += g;
                        }
                    }
                }
            }
        }
        offset += c;
    }
    d_maps
}

/// Extracts the unit-normalized feature vector of a clip. Deterministic and
/// side-effect free. Degenerate (all-zero) raw features yield a zero vector;
/// attacks against it must fail loudly rather than divide by zero.
pub fn extract_features(
    model: &SourceModel,
    pixels: &PixelTensor,
    spec: &FeatureSpec,
) -> Result<FeatureVector> {
    let layers = spec.resolve_layers(model)?;
    let pass = model.forward(pixels, false)?;
    let (raw, _layout) = pool_slices(&pass.maps, &layers, &spec.timesteps)?;
    let norm = raw.dot(&raw).sqrt();
    let values = if norm < DEGENERATE_NORM {
        Array1::zeros(raw.len())
    } else {
        raw / norm
    };
    Ok(FeatureVector {
        values,
        layer_ids: layers,
        timestep_ids: spec.timesteps.clone(),
    })
}

/// A scalar objective over raw (pre-pooling) feature maps of selected layers.
pub trait MapObjective {
    /// Returns the loss and its gradient w.r.t. each selected map, in the
    /// order the layers were requested.
    fn eval(&self, maps: &[&Array4<f64>]) -> (f64, Vec<Array4<f64>>);
}

/// Gradient of a scalar feature-map objective w.r.t. the input pixels.
/// Returns `(loss, d_loss/d_pixels)`; model parameters are unchanged.
pub fn input_gradient(
    model: &SourceModel,
    pixels: &PixelTensor,
    layers: &[usize],
    objective: &dyn MapObjective,
) -> Result<(f64, PixelTensor)> {
    let n = model.arch().blocks.len();
    for &l in layers {
        if l >= n {
            return Err(Error::Interface(format!(
                "unknown layer id {l}; model has {n} blocks"
            )));
        }
    }
    let pass = model.forward(pixels, false)?;
    let selected: Vec<&Array4<f64>> = layers.iter().map(|&l| &pass.maps[l]).collect();
    let (loss, d_selected) = objective.eval(&selected);
    if d_selected.len() != layers.len() {
        return Err(Error::Interface(format!(
            "objective returned {} gradients for {} layers",
            d_selected.len(),
            layers.len()
        )));
    }
    let mut d_maps: Vec<Option<Array4<f64>>> = (0..n).map(|_| None).collect();
    for (&l, d) in layers.iter().zip(d_selected) {
        if d.dim() != pass.maps[l].dim() {
            return Err(Error::Interface(format!(
                "objective gradient shape {:?} != map shape {:?} at layer {l}",
                d.dim(),
                pass.maps[l].dim()
            )));
        }
        match &mut d_maps[l] {
            slot @ None => *slot = Some(d),
            Some(existing) => *existing += &d,
        }
    }
    let (grad, _) = model.backward(&pass, GradRequest::from_map_grads(d_maps))?;
    Ok((loss, grad.expect("input gradient requested")))
}

/// Cosine similarity between the clip's normalized features and a fixed
/// unit direction, with its input-pixel gradient.
///
/// Returns `Err(DegenerateInput)` when the raw features vanish.
pub fn cosine_input_gradient(
    model: &SourceModel,
    pixels: &PixelTensor,
    spec: &FeatureSpec,
    direction: &Array1<f64>,
) -> Result<(f64, PixelTensor)> {
    let layers = spec.resolve_layers(model)?;
    let pass = model.forward(pixels, false)?;
    let (raw, layout) = pool_slices(&pass.maps, &layers, &spec.timesteps)?;
    if raw.len() != direction.len() {
        return Err(Error::Interface(format!(
            "direction has dimension {}, features have {}",
            direction.len(),
            raw.len()
        )));
    }
    let norm = raw.dot(&raw).sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateInput(
            "feature vector is zero; cosine loss undefined".into(),
        ));
    }
    let dir_norm = direction.dot(direction).sqrt();
    if dir_norm < DEGENERATE_NORM {
        return Err(Error::DegenerateInput("zero attack direction".into()));
    }
    let unit = &raw / norm;
    let dir_unit = direction / dir_norm;
    let loss = unit.dot(&dir_unit);
    // d loss / d raw = (v - (f.v) f) / |raw|
    let d_raw = (&dir_unit - &(&unit * loss)) / norm;
    let d_maps = scatter_slices(&d_raw, &layout, &pass.maps, model.arch().blocks.len());
    let (grad, _) = model.backward(&pass, GradRequest::from_map_grads(d_maps))?;
    Ok((loss, grad.expect("input gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelOntology;
    use crate::model::{ArchDescriptor, SourceModel};
    use ndarray::{arr1, arr2, Array4};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ontology(n: usize) -> LabelOntology {
        LabelOntology::new((0..n).map(|i| format!("c{i}")).collect(), "t").unwrap()
    }

    fn tiny_model(seed: u64) -> SourceModel {
        SourceModel::init(ArchDescriptor::tiny(2), ontology(2), seed).unwrap()
    }

    fn random_clip(shape: (usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((shape.0, shape.1, shape.2, 3), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_features_are_unit_norm_penultimate() {
        let model = tiny_model(1);
        let clip = random_clip((4, 8, 8), 2);
        let f = extract_features(&model, &clip, &FeatureSpec::penultimate()).unwrap();
        assert_eq!(f.dim(), 16); // tiny arch: last block has 16 channels
        assert_eq!(f.layer_ids, vec![1]);
        let norm = f.values.dot(&f.values).sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn multi_layer_widths_concatenate() {
        let model = tiny_model(1);
        let clip = random_clip((4, 8, 8), 3);
        let spec = FeatureSpec {
            layers: Some(vec![0, 1]),
            timesteps: Some(vec![0]),
        };
        let f = extract_features(&model, &clip, &spec).unwrap();
        // widths 8 and 16, one timestep each
        assert_eq!(f.dim(), 24);
    }

    #[test]
    fn repeated_extraction_is_bitwise_identical() {
        let model = tiny_model(4);
        let clip = random_clip((4, 8, 8), 5);
        let a = extract_features(&model, &clip, &FeatureSpec::penultimate()).unwrap();
        let b = extract_features(&model, &clip, &FeatureSpec::penultimate()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn unknown_layer_and_timestep_are_interface_errors() {
        let model = tiny_model(1);
        let clip = random_clip((4, 8, 8), 6);
        let bad_layer = FeatureSpec {
            layers: Some(vec![7]),
            timesteps: None,
        };
        assert!(matches!(
            extract_features(&model, &clip, &bad_layer),
            Err(Error::Interface(_))
        ));
        let bad_t = FeatureSpec {
            layers: Some(vec![1]),
            timesteps: Some(vec![99]),
        };
        assert!(matches!(
            extract_features(&model, &clip, &bad_t),
            Err(Error::Interface(_))
        ));
    }

    #[test]
    fn all_constant_clip_yields_degenerate_features() {
        // A constant mid-gray clip centers to all-zero input; with zero
        // biases every pre-activation is zero and the pooled features
        // vanish.
        let model = tiny_model(3);
        let clip = Array4::<f64>::from_elem((4, 8, 8, 3), 0.5);
        let f = extract_features(&model, &clip, &FeatureSpec::penultimate()).unwrap();
        assert!(f.is_degenerate());
        let dir = Array1::from_elem(16, 1.0);
        assert!(matches!(
            cosine_input_gradient(&model, &clip, &FeatureSpec::penultimate(), &dir),
            Err(Error::DegenerateInput(_))
        ));
    }

    struct ZeroObjective;
    impl MapObjective for ZeroObjective {
        fn eval(&self, maps: &[&Array4<f64>]) -> (f64, Vec<Array4<f64>>) {
            (0.0, maps.iter().map(|m| Array4::zeros(m.dim())).collect())
        }
    }

    struct SumObjective;
    impl MapObjective for SumObjective {
        fn eval(&self, maps: &[&Array4<f64>]) -> (f64, Vec<Array4<f64>>) {
            (
                maps.iter().map(|m| m.sum()).sum(),
                maps.iter().map(|m| Array4::ones(m.dim())).collect(),
            )
        }
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let model = tiny_model(2);
        let clip = random_clip((2, 6, 6), 9);
        let (loss, grad) = input_gradient(&model, &clip, &[1], &ZeroObjective).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sum_of_pixels_through_identity_model_gives_ones() {
        // Identity "model": single 1x1x1 conv with identity weights and no
        // activation; the selected map IS the input.
        let arch = ArchDescriptor::linear(2, 3);
        let eye = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let model = SourceModel::from_parts(
            arch,
            vec![eye],
            vec![arr1(&[0.0, 0.0, 0.0])],
            arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            arr1(&[0.0, 0.0]),
            ontology(2),
            0.0,
        )
        .unwrap();
        let clip = random_clip((2, 3, 3), 10);
        let (loss, grad) = input_gradient(&model, &clip, &[0], &SumObjective).unwrap();
        assert!((loss - clip.sum()).abs() < 1e-9);
        assert!(grad.iter().all(|&g| (g - 1.0).abs() < 1e-12));
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let model = tiny_model(8);
        let clip = random_clip((2, 6, 6), 11);
        let spec = FeatureSpec::penultimate();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let direction = Array1::from_shape_fn(16, |_| rng.random_range(0.0..1.0));

        let (_, grad) = cosine_input_gradient(&model, &clip, &spec, &direction).unwrap();

        let loss_at = |p: &Array4<f64>| -> f64 {
            let f = extract_features(&model, p, &spec).unwrap();
            let d = &direction / direction.dot(&direction).sqrt();
            f.values.dot(&d)
        };
        let h = 1e-5;
        let mut checked = 0;
        for idx in [[0, 0, 0, 0], [1, 3, 2, 1], [0, 5, 5, 2], [1, 2, 4, 0], [0, 1, 1, 1]] {
            let mut plus = clip.clone();
            plus[idx] += h;
            let mut minus = clip.clone();
            minus[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grad[idx];
            let denom = fd.abs().max(analytic.abs());
            if denom > 1e-7 {
                assert!(
                    (fd - analytic).abs() / denom < 1e-3,
                    "mismatch at {idx:?}: fd={fd}, analytic={analytic}"
                );
                checked += 1;
            }
        }
        assert!(checked >= 3, "too few informative coordinates");
    }

    #[test]
    fn multi_timestep_cosine_gradient_matches_finite_differences() {
        let model = tiny_model(21);
        let clip = random_clip((4, 6, 6), 22);
        let spec = FeatureSpec {
            layers: Some(vec![0, 1]),
            timesteps: Some(vec![0, 1]),
        };
        let f = extract_features(&model, &clip, &spec).unwrap();
        let d = f.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let direction = Array1::from_shape_fn(d, |_| rng.random_range(0.0..1.0));

        let (_, grad) = cosine_input_gradient(&model, &clip, &spec, &direction).unwrap();
        let loss_at = |p: &Array4<f64>| -> f64 {
            let f = extract_features(&model, p, &spec).unwrap();
            let du = &direction / direction.dot(&direction).sqrt();
            f.values.dot(&du)
        };
        let h = 1e-5;
        for idx in [[0, 0, 0, 0], [3, 3, 2, 1], [2, 5, 5, 2], [1, 2, 4, 0]] {
            let mut plus = clip.clone();
            plus[idx] += h;
            let mut minus = clip.clone();
            minus[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let analytic = grad[idx];
            let denom = fd.abs().max(analytic.abs());
            if denom > 1e-7 {
                assert!(
                    (fd - analytic).abs() / denom < 1e-3,
                    "mismatch at {idx:?}: fd={fd}, analytic={analytic}"
                );
            }
        }
    }
}
