//! 3D convolution, pooling and linear primitives with explicit backward
//! passes. Convolutions go through im2col so the heavy lifting is a single
//! `f64` matrix multiply per block.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// One convolutional block: 3D conv followed by an activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
    pub activation: Activation,
}

impl ConvBlockSpec {
    pub fn validate(&self) -> Result<()> {
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        if self.out_channels == 0 {
            return Err(Error::Parameter("conv block with zero channels".into()));
        }
        if kt == 0 || kh == 0 || kw == 0 || st == 0 || sh == 0 || sw == 0 {
            return Err(Error::Parameter(
                "conv kernel and stride entries must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Flattened kernel width for `in_channels` inputs.
    pub fn col_rows(&self, in_channels: usize) -> usize {
        let (kt, kh, kw) = self.kernel;
        in_channels * kt * kh * kw
    }

    /// Output spatial extent for a given input extent.
    pub fn out_shape(&self, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| -> Result<usize> {
            let padded = n + 2 * p;
            if padded < k {
                return Err(Error::Interface(format!(
                    "input extent {n} (padding {p}) smaller than kernel {k}"
                )));
            }
            Ok((padded - k) / s + 1)
        };
        let (t, h, w) = input;
        let (kt, kh, kw) = self.kernel;
        let (st, sh, sw) = self.stride;
        let (pt, ph, pw) = self.padding;
        Ok((dim(t, kt, st, pt)?, dim(h, kh, sh, ph)?, dim(w, kw, sw, pw)?))
    }
}

/// Unrolls conv input patches into a `(C_in*KT*KH*KW) x (To*Ho*Wo)` matrix.
pub fn im2col(
    input: &Array4<f64>,
    spec: &ConvBlockSpec,
    out_shape: (usize, usize, usize),
) -> Array2<f64> {
    let (c_in, t_in, h_in, w_in) = input.dim();
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let (t_out, h_out, w_out) = out_shape;
    let n_pos = t_out * h_out * w_out;

    let src = input.as_slice().expect("conv input must be contiguous");
    let mut col = Array2::<f64>::zeros((c_in * kt * kh * kw, n_pos));
    {
        let dst = col.as_slice_mut().expect("freshly allocated");
        for ic in 0..c_in {
            let src_c = ic * t_in * h_in * w_in;
            for kt_i in 0..kt {
                for kh_i in 0..kh {
                    for kw_i in 0..kw {
                        let row =
                            ((ic * kt + kt_i) * kh + kh_i) * kw + kw_i;
                        let row_base = row * n_pos;
                        for to in 0..t_out {
                            let ti = (to * st + kt_i) as isize - pt as isize;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let src_t = src_c + ti as usize * h_in * w_in;
                            for ho in 0..h_out {
                                let hi = (ho * sh + kh_i) as isize - ph as isize;
                                if hi < 0 || hi >= h_in as isize {
                                    continue;
                                }
                                let src_h = src_t + hi as usize * w_in;
                                let dst_base = row_base + (to * h_out + ho) * w_out;
                                for wo in 0..w_out {
                                    let wi = (wo * sw + kw_i) as isize - pw as isize;
                                    if wi < 0 || wi >= w_in as isize {
                                        continue;
                                    }
                                    dst[dst_base + wo] = src[src_h + wi as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
pub fn col2im(
    d_col: &Array2<f64>,
    input_shape: (usize, usize, usize, usize),
    spec: &ConvBlockSpec,
    out_shape: (usize, usize, usize),
) -> Array4<f64> {
    let (c_in, t_in, h_in, w_in) = input_shape;
    let (kt, kh, kw) = spec.kernel;
    let (st, sh, sw) = spec.stride;
    let (pt, ph, pw) = spec.padding;
    let (t_out, h_out, w_out) = out_shape;
    let n_pos = t_out * h_out * w_out;

    let src = d_col.as_slice().expect("col gradient must be contiguous");
    let mut d_input = Array4::<f64>::zeros((c_in, t_in, h_in, w_in));
    {
        let dst = d_input.as_slice_mut().expect("freshly allocated");
        for ic in 0..c_in {
            let dst_c = ic * t_in * h_in * w_in;
            for kt_i in 0..kt {
                for kh_i in 0..kh {
                    for kw_i in 0..kw {
                        let row = ((ic * kt + kt_i) * kh + kh_i) * kw + kw_i;
                        let row_base = row * n_pos;
                        for to in 0..t_out {
                            let ti = (to * st + kt_i) as isize - pt as isize;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let dst_t = dst_c + ti as usize * h_in * w_in;
                            for ho in 0..h_out {
                                let hi = (ho * sh + kh_i) as isize - ph as isize;
                                if hi < 0 || hi >= h_in as isize {
                                    continue;
                                }
                                let dst_h = dst_t + hi as usize * w_in;
                                let src_base = row_base + (to * h_out + ho) * w_out;
                                for wo in 0..w_out {
                                    let wi = (wo * sw + kw_i) as isize - pw as isize;
                                    if wi < 0 || wi >= w_in as isize {
                                        continue;
                                    }
                                    dst[dst_h + wi as usize] += src[src_base + wo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    d_input
}

/// Conv forward: `weight (C_out x K)` applied to the im2col matrix, bias
/// added per output channel.
pub fn conv_forward(
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    col: &Array2<f64>,
    out_shape: (usize, usize, usize),
) -> Array4<f64> {
    let (t_out, h_out, w_out) = out_shape;
    let mut out2d = weight.dot(col);
    for (mut row, &b) in out2d.rows_mut().into_iter().zip(bias.iter()) {
        row += b;
    }
    let c_out = weight.nrows();
    out2d
        .into_shape_with_order((c_out, t_out, h_out, w_out))
        .expect("row-major reshape of conv output")
}

pub struct ConvGrads {
    pub d_weight: Array2<f64>,
    pub d_bias: Array1<f64>,
}

/// Conv backward. Returns the gradient w.r.t. the block input and, when
/// `col` is provided, the parameter gradients.
pub fn conv_backward(
    weight: &Array2<f64>,
    d_out: &Array4<f64>,
    col: Option<&Array2<f64>>,
    input_shape: (usize, usize, usize, usize),
    spec: &ConvBlockSpec,
) -> (Array4<f64>, Option<ConvGrads>) {
    let (c_out, t_out, h_out, w_out) = d_out.dim();
    let n_pos = t_out * h_out * w_out;
    let d_out2d = d_out
        .view()
        .into_shape_with_order((c_out, n_pos))
        .expect("row-major reshape of conv output gradient");

    let grads = col.map(|col| ConvGrads {
        d_weight: d_out2d.dot(&col.t()),
        d_bias: d_out2d.sum_axis(Axis(1)),
    });

    let d_col = weight.t().dot(&d_out2d);
    let d_input = col2im(&d_col, input_shape, spec, (t_out, h_out, w_out));
    (d_input, grads)
}

/// In-place activation.
pub fn activate(map: &mut Array4<f64>, activation: Activation) {
    if activation == Activation::Relu {
        map.mapv_inplace(|v| v.max(0.0));
    }
}

/// Activation backward; for ReLU masks by the (post-activation) output.
pub fn activate_backward(d_out: &mut Array4<f64>, out: &Array4<f64>, activation: Activation) {
    if activation == Activation::Relu {
        d_out.zip_mut_with(out, |g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
    }
}

/// Global spatio-temporal mean per channel.
pub fn global_avg_pool(map: &Array4<f64>) -> Array1<f64> {
    let (c, t, h, w) = map.dim();
    let scale = 1.0 / (t * h * w) as f64;
    let flat = map
        .view()
        .into_shape_with_order((c, t * h * w))
        .expect("row-major reshape");
    flat.sum_axis(Axis(1)) * scale
}

/// Backward of [`global_avg_pool`].
pub fn global_avg_pool_backward(d_pooled: &Array1<f64>, map_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (c, t, h, w) = map_dim;
    let scale = 1.0 / (t * h * w) as f64;
    let mut d_map = Array4::<f64>::zeros(map_dim);
    for ci in 0..c {
        d_map.index_axis_mut(Axis(0), ci).fill(d_pooled[ci] * scale);
    }
    d_map
}

/// Numerically stable softmax cross-entropy; returns `(loss, d_logits)`.
pub fn softmax_cross_entropy(logits: &Array1<f64>, label: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|z| (z - max).exp());
    let sum: f64 = exp.sum();
    let loss = max + sum.ln() - logits[label];
    let mut d = exp / sum;
    d[label] -= 1.0;
    (loss, d)
}

/// Softmax probabilities.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|z| (z - max).exp());
    let sum: f64 = exp.sum();
    exp / sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    fn block(kernel: (usize, usize, usize), stride: (usize, usize, usize), pad: (usize, usize, usize)) -> ConvBlockSpec {
        ConvBlockSpec {
            out_channels: 1,
            kernel,
            stride,
            padding: pad,
            activation: Activation::Identity,
        }
    }

    #[test]
    fn conv_identity_kernel_passes_through() {
        // 1x1x1 kernel with weight 1 reproduces the input.
        let spec = block((1, 1, 1), (1, 1, 1), (0, 0, 0));
        let input = Array4::from_shape_fn((1, 2, 3, 3), |(_, t, h, w)| (t * 9 + h * 3 + w) as f64);
        let out_shape = spec.out_shape((2, 3, 3)).unwrap();
        let col = im2col(&input, &spec, out_shape);
        let weight = Array2::from_shape_vec((1, 1), vec![1.0]).unwrap();
        let out = conv_forward(&weight, &arr1(&[0.0]), &col, out_shape);
        assert_eq!(out, input);
    }

    #[test]
    fn conv_sum_kernel_matches_manual() {
        // 3x3x3 all-ones kernel with padding 1 computes local sums.
        let spec = ConvBlockSpec {
            out_channels: 1,
            kernel: (3, 3, 3),
            stride: (1, 1, 1),
            padding: (1, 1, 1),
            activation: Activation::Identity,
        };
        let input = Array4::from_elem((1, 2, 2, 2), 1.0);
        let out_shape = spec.out_shape((2, 2, 2)).unwrap();
        let col = im2col(&input, &spec, out_shape);
        let weight = Array2::from_elem((1, 27), 1.0);
        let out = conv_forward(&weight, &arr1(&[0.0]), &col, out_shape);
        // Every output position sees the whole 2x2x2 = 8-element input.
        assert!(out.iter().all(|&v| (v - 8.0).abs() < 1e-12));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);

        let spec = ConvBlockSpec {
            out_channels: 2,
            kernel: (2, 3, 3),
            stride: (1, 2, 2),
            padding: (0, 1, 1),
            activation: Activation::Identity,
        };
        let in_shape = (2usize, 3usize, 5usize, 5usize);
        let input = Array4::from_shape_fn(in_shape, |_| rng.random_range(-1.0..1.0));
        let weight =
            Array2::from_shape_fn((2, spec.col_rows(2)), |_| rng.random_range(-0.5..0.5));
        let bias = arr1(&[0.1, -0.2]);
        let out_shape = spec.out_shape((3, 5, 5)).unwrap();

        // Scalar loss: sum of outputs. d_out = ones.
        let loss = |x: &Array4<f64>| -> f64 {
            let col = im2col(x, &spec, out_shape);
            conv_forward(&weight, &bias, &col, out_shape).sum()
        };

        let d_out = Array4::from_elem((2, out_shape.0, out_shape.1, out_shape.2), 1.0);
        let col = im2col(&input, &spec, out_shape);
        let (d_input, grads) = conv_backward(&weight, &d_out, Some(&col), in_shape, &spec);
        let grads = grads.unwrap();

        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 2, 4, 4], [0, 1, 2, 3], [1, 0, 3, 1]] {
            let mut plus = input.clone();
            plus[idx] += h;
            let mut minus = input.clone();
            minus[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (fd - d_input[idx]).abs() < 1e-6,
                "input grad mismatch at {idx:?}: fd={fd} analytic={}",
                d_input[idx]
            );
        }

        // Weight gradient spot check via finite differences.
        let widx = (1usize, 7usize);
        let mut wp = weight.clone();
        wp[(widx.0, widx.1)] += h;
        let loss_w = |w: &Array2<f64>| -> f64 {
            conv_forward(w, &bias, &col, out_shape).sum()
        };
        let mut wm = weight.clone();
        wm[(widx.0, widx.1)] -= h;
        let fd_w = (loss_w(&wp) - loss_w(&wm)) / (2.0 * h);
        assert!((fd_w - grads.d_weight[(widx.0, widx.1)]).abs() < 1e-6);
        assert!((grads.d_bias[0] - (out_shape.0 * out_shape.1 * out_shape.2) as f64).abs() < 1e-9);
    }

    #[test]
    fn pool_and_backward_are_consistent() {
        let map = Array4::from_shape_fn((2, 1, 2, 2), |(c, _, h, w)| (c * 4 + h * 2 + w) as f64);
        let pooled = global_avg_pool(&map);
        assert!((pooled[0] - 1.5).abs() < 1e-12);
        assert!((pooled[1] - 5.5).abs() < 1e-12);

        let d = global_avg_pool_backward(&arr1(&[4.0, 8.0]), map.dim());
        assert!(d.index_axis(Axis(0), 0).iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(d.index_axis(Axis(0), 1).iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let logits = arr1(&[2.0, -1.0, 0.5]);
        let (loss, d) = softmax_cross_entropy(&logits, 1);
        assert!(loss > 0.0);
        assert!(d.sum().abs() < 1e-12);
        assert!(d[1] < 0.0);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut out = Array4::from_elem((1, 1, 1, 2), 0.0);
        out[[0, 0, 0, 1]] = 2.0;
        let mut g = Array4::from_elem((1, 1, 1, 2), 1.0);
        activate_backward(&mut g, &out, Activation::Relu);
        assert_eq!(g[[0, 0, 0, 0]], 0.0);
        assert_eq!(g[[0, 0, 0, 1]], 1.0);
    }
}
