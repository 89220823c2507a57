//! Differentiable source models (small 3D CNNs), feature extraction with
//! input gradients, the hard-label target oracle and desk-scale training.

pub mod checkpoint;
pub mod features;
mod layers;
pub mod oracle;
pub mod train;

pub use layers::{softmax, softmax_cross_entropy, Activation, ConvBlockSpec};
pub use oracle::{HardLabelClassifier, TargetOracle};
pub use train::{train_model, Augmentation, TrainConfig};

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LabelOntology, PixelTensor};
use crate::error::{Error, Result};
use crate::util::mix_seed;
use layers::{
    activate, activate_backward, conv_backward, conv_forward, global_avg_pool,
    global_avg_pool_backward, im2col, ConvGrads,
};

/// Network shape: a stack of conv blocks, a global spatio-temporal average
/// pool, and a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub n_classes: usize,
    /// Subtract 0.5 from the input before the first conv. Pixel gradients
    /// are unaffected; conditioning of training improves substantially.
    #[serde(default)]
    pub center_input: bool,
}

impl ArchDescriptor {
    /// Desk-scale default: a 4-block 3D CNN (16/32/64/128 channels) shaped
    /// like a miniature residual video network, preserving the block
    /// structure needed for multi-block feature attacks.
    pub fn desk(n_classes: usize) -> Self {
        let block = |out_channels, stride| ConvBlockSpec {
            out_channels,
            kernel: (3, 3, 3),
            stride,
            padding: (1, 1, 1),
            activation: Activation::Relu,
        };
        ArchDescriptor {
            in_channels: 3,
            blocks: vec![
                block(16, (1, 2, 2)),
                block(32, (2, 2, 2)),
                block(64, (2, 2, 2)),
                block(128, (1, 2, 2)),
            ],
            n_classes,
            center_input: true,
        }
    }

    /// Very small two-block network for fast tests.
    pub fn tiny(n_classes: usize) -> Self {
        let block = |out_channels, stride| ConvBlockSpec {
            out_channels,
            kernel: (3, 3, 3),
            stride,
            padding: (1, 1, 1),
            activation: Activation::Relu,
        };
        ArchDescriptor {
            in_channels: 3,
            blocks: vec![block(8, (1, 2, 2)), block(16, (2, 2, 2))],
            n_classes,
            center_input: true,
        }
    }

    /// Single 1x1x1 identity-activation block: the whole network is linear
    /// in its input. Useful as an analytically tractable model.
    pub fn linear(n_classes: usize, hidden: usize) -> Self {
        ArchDescriptor {
            in_channels: 3,
            blocks: vec![ConvBlockSpec {
                out_channels: hidden,
                kernel: (1, 1, 1),
                stride: (1, 1, 1),
                padding: (0, 0, 0),
                activation: Activation::Identity,
            }],
            n_classes,
            center_input: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::Parameter("in_channels must be >= 1".into()));
        }
        if self.blocks.is_empty() {
            return Err(Error::Parameter("architecture needs >= 1 conv block".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Parameter("n_classes must be >= 2".into()));
        }
        for block in &self.blocks {
            block.validate()?;
        }
        Ok(())
    }

    /// Index of the deepest conv block (the layer right before the head).
    pub fn penultimate_layer(&self) -> usize {
        self.blocks.len() - 1
    }

    /// Input channel count of block `i`.
    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.blocks[i - 1].out_channels
        }
    }
}

/// Parameter gradients (or SGD velocity) matching a [`SourceModel`].
pub struct ParamGrads {
    pub conv: Vec<ConvGrads>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl ParamGrads {
    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.conv.iter_mut().zip(&other.conv) {
            a.d_weight += &b.d_weight;
            a.d_bias += &b.d_bias;
        }
        self.head_weight += &other.head_weight;
        self.head_bias += &other.head_bias;
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.conv {
            g.d_weight *= factor;
            g.d_bias *= factor;
        }
        self.head_weight *= factor;
        self.head_bias *= factor;
    }
}

/// Cached activations from one forward pass.
pub struct ForwardPass {
    input_dim: (usize, usize, usize, usize),
    /// Post-activation block outputs, channel-first `(C, T, H, W)`.
    pub maps: Vec<Array4<f64>>,
    cols: Vec<Array2<f64>>,
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
}

/// What [`SourceModel::backward`] should compute. Gradients may be injected
/// on the logits and/or directly on block outputs.
pub struct GradRequest {
    pub d_logits: Option<Array1<f64>>,
    pub d_maps: Vec<Option<Array4<f64>>>,
    pub input_grad: bool,
    pub param_grads: bool,
}

impl GradRequest {
    pub fn from_logits(d_logits: Array1<f64>) -> Self {
        GradRequest {
            d_logits: Some(d_logits),
            d_maps: Vec::new(),
            input_grad: false,
            param_grads: false,
        }
    }

    pub fn from_map_grads(d_maps: Vec<Option<Array4<f64>>>) -> Self {
        GradRequest {
            d_logits: None,
            d_maps,
            input_grad: true,
            param_grads: false,
        }
    }
}

/// A trained (or freshly initialized) source model. Immutable after
/// training; concurrent read-only inference is safe.
pub struct SourceModel {
    arch: ArchDescriptor,
    conv_weights: Vec<Array2<f64>>,
    conv_biases: Vec<Array1<f64>>,
    head_weight: Array2<f64>,
    head_bias: Array1<f64>,
    ontology: LabelOntology,
    val_top1: f64,
}

/// Clip layout `(T, H, W, 3)` to channel-first `(3, T, H, W)`.
fn to_cthw(pixels: &PixelTensor) -> Array4<f64> {
    pixels
        .view()
        .permuted_axes([3, 0, 1, 2])
        .as_standard_layout()
        .to_owned()
}

/// Channel-first `(C, T, H, W)` back to clip layout `(T, H, W, C)`.
fn from_cthw(x: &Array4<f64>) -> Array4<f64> {
    x.view()
        .permuted_axes([1, 2, 3, 0])
        .as_standard_layout()
        .to_owned()
}

/// First index of the maximum element; ties break to the lower index.
pub fn argmax(values: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Box-Muller standard normal draw.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

impl SourceModel {
    /// Random (Kaiming-style) initialization. Deterministic in `seed`.
    pub fn init(arch: ArchDescriptor, ontology: LabelOntology, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.n_classes != ontology.len() {
            return Err(Error::Parameter(format!(
                "architecture has {} classes but ontology has {}",
                arch.n_classes,
                ontology.len()
            )));
        }
        let mut conv_weights = Vec::with_capacity(arch.blocks.len());
        let mut conv_biases = Vec::with_capacity(arch.blocks.len());
        for (i, block) in arch.blocks.iter().enumerate() {
            let fan_in = block.col_rows(arch.block_in_channels(i));
            let std = (2.0 / fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x77, i as u64]));
            let weight =
                Array2::from_shape_fn((block.out_channels, fan_in), |_| gauss(&mut rng) * std);
            conv_weights.push(weight);
            conv_biases.push(Array1::zeros(block.out_channels));
        }
        let feat = arch.blocks.last().expect("validated non-empty").out_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x78]));
        let std = (1.0 / feat as f64).sqrt();
        let head_weight = Array2::from_shape_fn((arch.n_classes, feat), |_| gauss(&mut rng) * std);
        let head_bias = Array1::zeros(arch.n_classes);
        Ok(SourceModel {
            arch,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias,
            ontology,
            val_top1: 0.0,
        })
    }

    /// Builds a model from explicit parameters, validating shapes. Intended
    /// for checkpoint loading and analytically constructed test models.
    pub fn from_parts(
        arch: ArchDescriptor,
        conv_weights: Vec<Array2<f64>>,
        conv_biases: Vec<Array1<f64>>,
        head_weight: Array2<f64>,
        head_bias: Array1<f64>,
        ontology: LabelOntology,
        val_top1: f64,
    ) -> Result<Self> {
        arch.validate()?;
        if arch.n_classes != ontology.len() {
            return Err(Error::Parameter(format!(
                "architecture has {} classes but ontology has {}",
                arch.n_classes,
                ontology.len()
            )));
        }
        if conv_weights.len() != arch.blocks.len() || conv_biases.len() != arch.blocks.len() {
            return Err(Error::Format(format!(
                "expected {} conv parameter pairs, got {}/{}",
                arch.blocks.len(),
                conv_weights.len(),
                conv_biases.len()
            )));
        }
        for (i, block) in arch.blocks.iter().enumerate() {
            let expect = (block.out_channels, block.col_rows(arch.block_in_channels(i)));
            if conv_weights[i].dim() != expect {
                return Err(Error::Format(format!(
                    "block {i} weight shape {:?} != expected {:?}",
                    conv_weights[i].dim(),
                    expect
                )));
            }
            if conv_biases[i].len() != block.out_channels {
                return Err(Error::Format(format!(
                    "block {i} bias length {} != {}",
                    conv_biases[i].len(),
                    block.out_channels
                )));
            }
        }
        let feat = arch.blocks.last().expect("non-empty").out_channels;
        if head_weight.dim() != (arch.n_classes, feat) || head_bias.len() != arch.n_classes {
            return Err(Error::Format(format!(
                "head shape {:?}/{} != expected ({}, {feat})/{}",
                head_weight.dim(),
                head_bias.len(),
                arch.n_classes,
                arch.n_classes
            )));
        }
        Ok(SourceModel {
            arch,
            conv_weights,
            conv_biases,
            head_weight,
            head_bias,
            ontology,
            val_top1,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn ontology(&self) -> &LabelOntology {
        &self.ontology
    }

    /// Validation top-1 accuracy recorded by training.
    pub fn val_top1(&self) -> f64 {
        self.val_top1
    }

    pub(crate) fn set_val_top1(&mut self, acc: f64) {
        self.val_top1 = acc;
    }

    pub(crate) fn conv_weights(&self) -> &[Array2<f64>] {
        &self.conv_weights
    }

    pub(crate) fn conv_biases(&self) -> &[Array1<f64>] {
        &self.conv_biases
    }

    pub(crate) fn head_weight(&self) -> &Array2<f64> {
        &self.head_weight
    }

    pub(crate) fn head_bias(&self) -> &Array1<f64> {
        &self.head_bias
    }

    /// Forward pass over one clip. `keep_cols` caches the im2col matrices
    /// needed later for parameter gradients.
    pub fn forward(&self, pixels: &PixelTensor, keep_cols: bool) -> Result<ForwardPass> {
        let (_, _, _, c) = pixels.dim();
        if c != self.arch.in_channels {
            return Err(Error::Interface(format!(
                "clip has {c} channels, model expects {}",
                self.arch.in_channels
            )));
        }
        let mut x0 = to_cthw(pixels);
        if self.arch.center_input {
            x0 -= 0.5;
        }
        let input_dim = x0.dim();

        let n = self.arch.blocks.len();
        let mut maps: Vec<Array4<f64>> = Vec::with_capacity(n);
        let mut cols: Vec<Array2<f64>> = Vec::with_capacity(if keep_cols { n } else { 0 });
        for i in 0..n {
            let spec = &self.arch.blocks[i];
            let (col, out) = {
                let input = if i == 0 { &x0 } else { &maps[i - 1] };
                let (_, t, h, w) = input.dim();
                let out_shape = spec.out_shape((t, h, w))?;
                let col = im2col(input, spec, out_shape);
                let mut out =
                    conv_forward(&self.conv_weights[i], &self.conv_biases[i], &col, out_shape);
                activate(&mut out, spec.activation);
                (col, out)
            };
            maps.push(out);
            if keep_cols {
                cols.push(col);
            }
        }

        let pooled = global_avg_pool(maps.last().expect("at least one block"));
        let logits = self.head_weight.dot(&pooled) + &self.head_bias;
        Ok(ForwardPass {
            input_dim,
            maps,
            cols,
            pooled,
            logits,
        })
    }

    /// Backward pass. Model parameters are never modified.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        req: GradRequest,
    ) -> Result<(Option<PixelTensor>, Option<ParamGrads>)> {
        let n = self.arch.blocks.len();
        if !req.d_maps.is_empty() && req.d_maps.len() != n {
            return Err(Error::Interface(format!(
                "d_maps has {} entries, model has {n} blocks",
                req.d_maps.len()
            )));
        }
        if req.param_grads && pass.cols.len() != n {
            return Err(Error::Interface(
                "parameter gradients need a forward pass with keep_cols".into(),
            ));
        }
        let mut d_maps = req.d_maps;
        d_maps.resize_with(n, || None);

        let last_dim = pass.maps[n - 1].dim();
        let mut grad_map = Array4::<f64>::zeros(last_dim);
        let mut head_weight_grad = None;
        let mut head_bias_grad = None;
        if let Some(d_logits) = &req.d_logits {
            if req.param_grads {
                let dl = d_logits.view().insert_axis(Axis(1));
                let pooled = pass.pooled.view().insert_axis(Axis(0));
                head_weight_grad = Some(dl.dot(&pooled));
                head_bias_grad = Some(d_logits.clone());
            }
            let d_pooled = self.head_weight.t().dot(d_logits);
            grad_map += &global_avg_pool_backward(&d_pooled, last_dim);
        }
        if let Some(dm) = d_maps[n - 1].take() {
            grad_map += &dm;
        }

        let mut conv_grads_rev: Vec<ConvGrads> = Vec::new();
        for i in (0..n).rev() {
            let spec = &self.arch.blocks[i];
            activate_backward(&mut grad_map, &pass.maps[i], spec.activation);
            let input_shape = if i == 0 {
                pass.input_dim
            } else {
                pass.maps[i - 1].dim()
            };
            let col = if req.param_grads {
                Some(&pass.cols[i])
            } else {
                None
            };
            let (d_in, grads) =
                conv_backward(&self.conv_weights[i], &grad_map, col, input_shape, spec);
            if let Some(g) = grads {
                conv_grads_rev.push(g);
            }
            grad_map = d_in;
            if i > 0 {
                if let Some(dm) = d_maps[i - 1].take() {
                    grad_map += &dm;
                }
            }
        }

        let input_grad = if req.input_grad {
            Some(from_cthw(&grad_map))
        } else {
            None
        };
        let param_grads = if req.param_grads {
            conv_grads_rev.reverse();
            Some(ParamGrads {
                conv: conv_grads_rev,
                head_weight: head_weight_grad
                    .unwrap_or_else(|| Array2::zeros(self.head_weight.dim())),
                head_bias: head_bias_grad.unwrap_or_else(|| Array1::zeros(self.head_bias.len())),
            })
        } else {
            None
        };
        Ok((input_grad, param_grads))
    }

    /// Class scores for a clip.
    pub fn logits(&self, pixels: &PixelTensor) -> Result<Array1<f64>> {
        Ok(self.forward(pixels, false)?.logits)
    }

    /// Softmax class probabilities.
    pub fn predict_probs(&self, pixels: &PixelTensor) -> Result<Array1<f64>> {
        Ok(softmax(&self.logits(pixels)?))
    }

    /// Argmax label.
    pub fn predict(&self, pixels: &PixelTensor) -> Result<usize> {
        Ok(argmax(&self.logits(pixels)?))
    }

    /// Zero-filled gradient buffers matching this model's parameters.
    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads {
            conv: self
                .conv_weights
                .iter()
                .zip(&self.conv_biases)
                .map(|(w, b)| ConvGrads {
                    d_weight: Array2::zeros(w.dim()),
                    d_bias: Array1::zeros(b.len()),
                })
                .collect(),
            head_weight: Array2::zeros(self.head_weight.dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
        }
    }

    /// Momentum SGD update.
    pub(crate) fn sgd_step(
        &mut self,
        velocity: &mut ParamGrads,
        grads: &ParamGrads,
        lr: f64,
        momentum: f64,
    ) {
        for i in 0..self.conv_weights.len() {
            velocity.conv[i].d_weight *= momentum;
            velocity.conv[i].d_weight += &grads.conv[i].d_weight;
            velocity.conv[i].d_bias *= momentum;
            velocity.conv[i].d_bias += &grads.conv[i].d_bias;
            self.conv_weights[i].scaled_add(-lr, &velocity.conv[i].d_weight);
            self.conv_biases[i].scaled_add(-lr, &velocity.conv[i].d_bias);
        }
        velocity.head_weight *= momentum;
        velocity.head_weight += &grads.head_weight;
        velocity.head_bias *= momentum;
        velocity.head_bias += &grads.head_bias;
        self.head_weight.scaled_add(-lr, &velocity.head_weight);
        self.head_bias.scaled_add(-lr, &velocity.head_bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};

    fn two_class_ontology() -> LabelOntology {
        LabelOntology::new(vec!["a".into(), "b".into()], "t").unwrap()
    }

    /// Linear model over 2x1x1x3 inputs with hand-set weights.
    fn linear_model() -> SourceModel {
        let arch = ArchDescriptor::linear(2, 3);
        // Identity 1x1x1 conv: features are the channel means.
        let w = arr2(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let b = arr1(&[0.0, 0.0, 0.0]);
        let head_w = arr2(&[[1.0, -1.0, 0.5], [-0.5, 1.0, -1.0]]);
        let head_b = arr1(&[0.0, 0.1]);
        SourceModel::from_parts(arch, vec![w], vec![b], head_w, head_b, two_class_ontology(), 0.0)
            .unwrap()
    }

    #[test]
    fn linear_model_logits_match_hand_computation() {
        let model = linear_model();
        let mut pixels = Array4::<f64>::zeros((2, 1, 1, 3));
        pixels[[0, 0, 0, 0]] = 0.2;
        pixels[[1, 0, 0, 0]] = 0.4;
        pixels[[0, 0, 0, 1]] = 0.6;
        pixels[[1, 0, 0, 1]] = 0.8;
        pixels[[0, 0, 0, 2]] = 1.0;
        pixels[[1, 0, 0, 2]] = 0.0;
        // Pooled features = per-channel means = (0.3, 0.7, 0.5).
        let logits = model.logits(&pixels).unwrap();
        assert!((logits[0] - (0.3 - 0.7 + 0.25)).abs() < 1e-12);
        assert!((logits[1] - (-0.15 + 0.7 - 0.5 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_follow_arch() {
        let ontology = LabelOntology::new(
            (0..4).map(|i| format!("c{i}")).collect::<Vec<_>>(),
            "t",
        )
        .unwrap();
        let model = SourceModel::init(ArchDescriptor::desk(4), ontology, 0).unwrap();
        let pixels = Array4::<f64>::zeros((8, 32, 32, 3));
        let pass = model.forward(&pixels, false).unwrap();
        assert_eq!(pass.maps[0].dim(), (16, 8, 16, 16));
        assert_eq!(pass.maps[1].dim(), (32, 4, 8, 8));
        assert_eq!(pass.maps[2].dim(), (64, 2, 4, 4));
        assert_eq!(pass.maps[3].dim(), (128, 2, 2, 2));
        assert_eq!(pass.pooled.len(), 128);
        assert_eq!(pass.logits.len(), 4);
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let ontology = two_class_ontology();
        let a = SourceModel::init(ArchDescriptor::tiny(2), ontology.clone(), 5).unwrap();
        let b = SourceModel::init(ArchDescriptor::tiny(2), ontology.clone(), 5).unwrap();
        let c = SourceModel::init(ArchDescriptor::tiny(2), ontology, 6).unwrap();
        assert_eq!(a.conv_weights[0], b.conv_weights[0]);
        assert_eq!(a.head_weight, b.head_weight);
        assert_ne!(a.conv_weights[0], c.conv_weights[0]);
    }

    #[test]
    fn ce_input_gradient_matches_finite_differences_on_tiny_model() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let ontology = two_class_ontology();
        let model = SourceModel::init(ArchDescriptor::tiny(2), ontology, 11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let pixels = Array4::from_shape_fn((2, 6, 6, 3), |_| rng.random_range(0.0..1.0));

        let pass = model.forward(&pixels, false).unwrap();
        let (_, d_logits) = softmax_cross_entropy(&pass.logits, 1);
        let mut req = GradRequest::from_logits(d_logits);
        req.input_grad = true;
        let (grad, _) = model.backward(&pass, req).unwrap();
        let grad = grad.unwrap();

        let loss_at = |p: &Array4<f64>| -> f64 {
            let logits = model.logits(p).unwrap();
            softmax_cross_entropy(&logits, 1).0
        };
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 3, 2, 1], [0, 5, 5, 2], [1, 2, 4, 0]] {
            let mut plus = pixels.clone();
            plus[idx] += h;
            let mut minus = pixels.clone();
            minus[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            assert!(
                (fd - grad[idx]).abs() < 1e-6,
                "mismatch at {idx:?}: fd={fd}, analytic={}",
                grad[idx]
            );
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&arr1(&[1.0, 1.0, 0.5])), 0);
        assert_eq!(argmax(&arr1(&[-1.0, 2.0, 2.0])), 1);
    }
}
