//! Query-efficient hard-label black-box attacks on video action classifiers.
//!
//! The crate trains small 3D convolutional source models on synthetic
//! moving-shape video datasets, extracts (multi-layer, multi-temporal)
//! feature representations, and generates L∞-bounded perturbations that
//! push those representations along systematically chosen attack
//! directions. A hard-label target oracle with strict query accounting is
//! attacked with either orthogonalized or random direction search, plus a
//! family of gradient-sign transfer baselines. The evaluation harness
//! measures attack success and deception rates across query budgets and
//! controlled class-overlap settings.

pub mod attacks;
pub mod data;
pub mod directions;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod util;
pub mod viz;

pub use error::{Error, Result};
