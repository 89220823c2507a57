//! Desk-scale training: momentum SGD with single-cycle cosine annealing and
//! linear warmup, random crop (and optionally horizontal flip) augmentation.
//! Fully deterministic for a fixed seed.

use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{softmax_cross_entropy, ArchDescriptor, GradRequest, SourceModel};
use crate::data::{Dataset, PixelTensor, Split};
use crate::error::{Error, Result};
use crate::util::mix_seed;

const SALT_SHUFFLE: u64 = 0x5348; // "SH"
const SALT_AUG: u64 = 0x4147; // "AG"
/// Every 5th clip is held out for validation accuracy.
const HOLDOUT_EVERY: usize = 5;
/// Spatial padding used by random crop.
const CROP_PAD: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    RandomCrop,
    HorizontalFlip,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub frames_per_clip: usize,
    pub augmentations: Vec<Augmentation>,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale recipe. Horizontal flip is omitted: mirrored motion motifs
    /// (left vs right) make it label-destroying on the synthetic classes.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            peak_lr: 0.01,
            warmup_epochs: 3,
            batch_size: 16,
            frames_per_clip: 8,
            augmentations: vec![Augmentation::RandomCrop],
            momentum: 0.9,
            seed,
        }
    }

    /// Full-scale recipe: 100 epochs, warmup 5, batch 32, 16-frame clips,
    /// random crop + horizontal flip.
    pub fn paper_recipe(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            peak_lr: 0.01,
            warmup_epochs: 5,
            batch_size: 32,
            frames_per_clip: 16,
            augmentations: vec![Augmentation::RandomCrop, Augmentation::HorizontalFlip],
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Parameter("epochs must be >= 1".into()));
        }
        if !(self.peak_lr > 0.0) {
            return Err(Error::Parameter("peak_lr must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".into()));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Parameter("frames_per_clip must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must be in [0, 1)".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Parameter(
                "warmup_epochs must be smaller than epochs".into(),
            ));
        }
        Ok(())
    }

    /// Linear warmup to `peak_lr`, then cosine annealing to zero.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.peak_lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            let progress =
                (epoch - self.warmup_epochs) as f64 / (self.epochs - self.warmup_epochs) as f64;
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Temporal crop to `frames` starting at `offset`.
fn temporal_crop(pixels: &PixelTensor, frames: usize, offset: usize) -> PixelTensor {
    let (t, _, _, _) = pixels.dim();
    if frames >= t {
        return pixels.clone();
    }
    pixels
        .slice(ndarray::s![offset..offset + frames, .., .., ..])
        .to_owned()
}

/// Shifts the clip spatially by (dy, dx) in [-CROP_PAD, CROP_PAD], filling
/// vacated pixels with zeros. Equivalent to zero-padding then cropping.
fn spatial_shift(pixels: &PixelTensor, dy: isize, dx: isize) -> PixelTensor {
    let (t, h, w, c) = pixels.dim();
    let mut out = Array4::<f64>::zeros((t, h, w, c));
    for ti in 0..t {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                for ci in 0..c {
                    out[[ti, y, x, ci]] = pixels[[ti, sy as usize, sx as usize, ci]];
                }
            }
        }
    }
    out
}

fn horizontal_flip(pixels: &PixelTensor) -> PixelTensor {
    let mut out = pixels.clone();
    out.invert_axis(ndarray::Axis(2));
    out.as_standard_layout().to_owned()
}

fn augment(pixels: &PixelTensor, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> PixelTensor {
    let (t, _, _, _) = pixels.dim();
    let mut out = if cfg.frames_per_clip < t {
        let offset = rng.random_range(0..=t - cfg.frames_per_clip);
        temporal_crop(pixels, cfg.frames_per_clip, offset)
    } else {
        pixels.clone()
    };
    for aug in &cfg.augmentations {
        match aug {
            Augmentation::RandomCrop => {
                let pad = CROP_PAD as i64;
                let dy = rng.random_range(-pad..=pad) as isize;
                let dx = rng.random_range(-pad..=pad) as isize;
                if dy != 0 || dx != 0 {
                    out = spatial_shift(&out, dy, dx);
                }
            }
            Augmentation::HorizontalFlip => {
                if rng.random::<bool>() {
                    out = horizontal_flip(&out);
                }
            }
        }
    }
    out
}

/// Center temporal crop used for evaluation.
fn eval_view(pixels: &PixelTensor, frames: usize) -> PixelTensor {
    let (t, _, _, _) = pixels.dim();
    if frames >= t {
        pixels.clone()
    } else {
        temporal_crop(pixels, frames, (t - frames) / 2)
    }
}

/// Trains a model on the train split, holding out every 5th clip for the
/// recorded validation accuracy.
pub fn train_model(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    cfg: &TrainConfig,
) -> Result<SourceModel> {
    cfg.validate()?;
    if dataset.split != Split::Train {
        return Err(Error::Parameter(format!(
            "training expects the train split, got {}",
            dataset.split
        )));
    }
    if dataset.clips.is_empty() {
        return Err(Error::Training {
            epoch: None,
            msg: "dataset is empty".into(),
        });
    }
    if arch.n_classes != dataset.ontology.len() {
        return Err(Error::Parameter(format!(
            "architecture has {} classes, dataset ontology has {}",
            arch.n_classes,
            dataset.ontology.len()
        )));
    }

    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for i in 0..dataset.clips.len() {
        if i % HOLDOUT_EVERY == 0 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if train_idx.is_empty() {
        return Err(Error::Training {
            epoch: None,
            msg: "no training clips left after validation holdout".into(),
        });
    }

    let mut model = SourceModel::init(arch.clone(), dataset.ontology.clone(), cfg.seed)?;
    let mut velocity = model.zero_grads();

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let mut order = train_idx.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[SALT_SHUFFLE, epoch as u64]));
        order.shuffle(&mut shuffle_rng);

        for batch in order.chunks(cfg.batch_size) {
            // Per-clip gradients in parallel; reduction order is fixed by the
            // batch index order, so results are bitwise reproducible.
            let results: Vec<Result<(f64, super::ParamGrads)>> = batch
                .par_iter()
                .map(|&idx| {
                    let clip = &dataset.clips[idx];
                    let mut aug_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        cfg.seed,
                        &[SALT_AUG, epoch as u64, idx as u64],
                    ));
                    let pixels = augment(&clip.pixels, cfg, &mut aug_rng);
                    let pass = model.forward(&pixels, true)?;
                    let (loss, d_logits) = softmax_cross_entropy(&pass.logits, clip.label_id);
                    let mut req = GradRequest::from_logits(d_logits);
                    req.param_grads = true;
                    let (_, grads) = model.backward(&pass, req)?;
                    Ok((loss, grads.expect("param grads requested")))
                })
                .collect();

            let mut batch_loss = 0.0;
            let mut accum = model.zero_grads();
            for result in results {
                let (loss, grads) = result?;
                batch_loss += loss;
                accum.add_assign(&grads);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Training {
                    epoch: Some(epoch),
                    msg: format!("loss diverged (batch loss {batch_loss})"),
                });
            }
            accum.scale(1.0 / batch.len() as f64);
            model.sgd_step(&mut velocity, &accum, lr, cfg.momentum);
        }
    }

    let correct: usize = val_idx
        .par_iter()
        .map(|&idx| {
            let clip = &dataset.clips[idx];
            let view = eval_view(&clip.pixels, cfg.frames_per_clip);
            match model.predict(&view) {
                Ok(pred) if pred == clip.label_id => 1usize,
                _ => 0usize,
            }
        })
        .sum();
    let val_top1 = if val_idx.is_empty() {
        0.0
    } else {
        correct as f64 / val_idx.len() as f64
    };
    model.set_val_top1(val_top1);
    Ok(model)
}
