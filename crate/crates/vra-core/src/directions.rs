//! Orthogonal attack direction search.
//!
//! Starting from the clean representation as anchor, raw vectors are drawn
//! uniformly from `[0, 1)` per coordinate and orthogonalized with modified
//! Gram-Schmidt against the anchor and all previously emitted directions,
//! then normalized onto the unit sphere. A basis over a `d`-dimensional
//! feature space can emit at most `d - 1` such directions; on exhaustion the
//! orthogonal set is cleared (the anchor is kept) and a reset is counted, so
//! arbitrarily large query budgets never produce a direction along the clean
//! representation.
//!
//! All orthogonalization runs in double precision.

use ndarray::Array1;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::features::FeatureVector;

/// Resample this many times before declaring near-linear-dependence.
const MAX_RESAMPLES: usize = 16;
/// Residuals below `1e-6 * ||v||` are treated as linearly dependent.
const DEGENERACY_RATIO: f64 = 1e-6;
/// Residuals below `0.1 * ||v||` get one re-orthogonalization pass.
const REORTH_RATIO: f64 = 0.1;

/// Growing orthonormal set anchored at a clean feature vector.
pub struct DirectionBasis {
    anchor: Array1<f64>,
    ortho_set: Vec<Array1<f64>>,
    rng: ChaCha8Rng,
    resets: u64,
    dim: usize,
}

fn norm(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

impl DirectionBasis {
    /// Seeds a basis on the (normalized) anchor `v0`. Fails on zero anchors.
    pub fn init(anchor: &FeatureVector, seed: u64) -> Result<Self> {
        Self::from_raw(anchor.values.clone(), seed)
    }

    /// Like [`DirectionBasis::init`] but from a raw vector.
    pub fn from_raw(anchor: Array1<f64>, seed: u64) -> Result<Self> {
        let n = norm(&anchor);
        if n < 1e-12 {
            return Err(Error::DegenerateInput(
                "zero anchor vector; basis undefined".into(),
            ));
        }
        let dim = anchor.len();
        Ok(DirectionBasis {
            anchor: anchor / n,
            ortho_set: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            resets: 0,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Directions emitted since the last reset.
    pub fn ortho_len(&self) -> usize {
        self.ortho_set.len()
    }

    /// Number of times the orthogonal set has been exhausted and cleared.
    pub fn resets(&self) -> u64 {
        self.resets
    }

    /// Unit anchor direction.
    pub fn anchor(&self) -> &Array1<f64> {
        &self.anchor
    }

    fn draw_raw(&mut self) -> Array1<f64> {
        Array1::from_shape_fn(self.dim, |_| self.rng.random::<f64>())
    }

    /// Subtracts projections of `u` onto the anchor and the stored set,
    /// in order (modified Gram-Schmidt: each projection uses the already
    /// reduced residual).
    fn project_out(&self, u: &mut Array1<f64>) {
        let a = &self.anchor;
        let c = u.dot(a);
        u.scaled_add(-c, a);
        for e in &self.ortho_set {
            let c = u.dot(e);
            u.scaled_add(-c, e);
        }
    }

    /// Next orthogonal attack direction.
    pub fn next_direction(&mut self) -> Result<Array1<f64>> {
        for _ in 0..MAX_RESAMPLES {
            let v = self.draw_raw();
            let v_norm = norm(&v);
            if v_norm < 1e-12 {
                continue;
            }
            let mut u = v;
            self.project_out(&mut u);
            if norm(&u) < REORTH_RATIO * v_norm {
                // A second pass recovers the orthogonality lost to
                // cancellation when the residual is small.
                self.project_out(&mut u);
            }
            let u_norm = norm(&u);
            if u_norm < DEGENERACY_RATIO * v_norm {
                continue;
            }
            let e = u / u_norm;
            self.ortho_set.push(e.clone());
            if self.ortho_set.len() >= self.dim.saturating_sub(1) {
                // Exhausted: keep the anchor, drop the set, count the reset.
                self.ortho_set.clear();
                self.resets += 1;
            }
            return Ok(e);
        }
        Err(Error::DegenerateInput(format!(
            "no orthogonal direction found after {MAX_RESAMPLES} draws (dim {})",
            self.dim
        )))
    }

    /// Plain random search direction: a uniform draw normalized to unit
    /// length, with no orthogonalization. Shares (and advances) the basis
    /// RNG stream.
    pub fn random_direction(&mut self) -> Array1<f64> {
        loop {
            let v = self.draw_raw();
            let n = norm(&v);
            if n >= 1e-12 {
                return v / n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn basis_from(vec: &[f64], seed: u64) -> DirectionBasis {
        DirectionBasis::from_raw(arr1(vec), seed).unwrap()
    }

    #[test]
    fn init_stores_normalized_anchor_and_empty_set() {
        let b = basis_from(&[1.0, 0.0, 0.0], 0);
        assert_eq!(b.ortho_len(), 0);
        assert_eq!(b.resets(), 0);
        assert!((norm(b.anchor()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_anchor_is_degenerate() {
        assert!(matches!(
            DirectionBasis::from_raw(arr1(&[0.0, 0.0]), 0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn hand_projection_d3() {
        // Anchor (1,0,0); raw draw (1,1,0) must orthogonalize to (0,1,0),
        // then (1,1,1) to (0,0,1).
        let mut b = basis_from(&[1.0, 0.0, 0.0], 0);
        let mut u = arr1(&[1.0, 1.0, 0.0]);
        b.project_out(&mut u);
        let e1 = &u / norm(&u);
        assert!((e1[0]).abs() < 1e-12);
        assert!((e1[1] - 1.0).abs() < 1e-12);
        assert!((e1[2]).abs() < 1e-12);
        b.ortho_set.push(e1);

        let mut u2 = arr1(&[1.0, 1.0, 1.0]);
        b.project_out(&mut u2);
        let e2 = &u2 / norm(&u2);
        assert!((e2[0]).abs() < 1e-12);
        assert!((e2[1]).abs() < 1e-12);
        assert!((e2[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn directions_are_orthogonal_to_anchor_and_each_other() {
        let mut b = basis_from(&[0.3, -0.2, 0.8, 0.1, 0.5, -0.7, 0.2, 0.4], 42);
        let mut dirs = Vec::new();
        for _ in 0..7 {
            let e = b.next_direction().unwrap();
            assert!((norm(&e) - 1.0).abs() < 1e-6);
            assert!(e.dot(b.anchor()).abs() <= 1e-5);
            for prev in &dirs {
                let dot: f64 = e.dot(prev);
                assert!(dot.abs() <= 1e-5, "pairwise dot {dot}");
            }
            dirs.push(e);
        }
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let mut a = basis_from(&[1.0, 2.0, 3.0, 4.0], 5);
        let mut b = basis_from(&[1.0, 2.0, 3.0, 4.0], 5);
        for _ in 0..6 {
            assert_eq!(a.next_direction().unwrap(), b.next_direction().unwrap());
        }
        let mut c = basis_from(&[1.0, 2.0, 3.0, 4.0], 6);
        assert_ne!(a.next_direction().unwrap(), c.next_direction().unwrap());
    }

    #[test]
    fn prefix_property_holds() {
        let take = |n: usize| -> Vec<Array1<f64>> {
            let mut b = basis_from(&[0.2, 0.4, 0.6, 0.8, 1.0], 9);
            (0..n).map(|_| b.next_direction().unwrap()).collect()
        };
        let short = take(3);
        let long = take(9);
        for (a, b) in short.iter().zip(long.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reset_fires_once_per_dim_minus_one() {
        let d = 5;
        let mut b = basis_from(&[1.0, 0.5, 0.25, 0.125, 0.0625], 3);
        for i in 1..=3 * (d - 1) {
            b.next_direction().unwrap();
            assert_eq!(b.resets() as usize, i / (d - 1));
            assert_eq!(b.ortho_len(), i % (d - 1));
        }
    }

    #[test]
    fn random_direction_is_unit_norm_and_seeded() {
        let mut a = basis_from(&[1.0, 1.0, 1.0, 1.0], 11);
        let mut b = basis_from(&[1.0, 1.0, 1.0, 1.0], 11);
        for _ in 0..4 {
            let da = a.random_direction();
            assert!((norm(&da) - 1.0).abs() < 1e-12);
            assert_eq!(da, b.random_direction());
        }
        // Random mode does not grow the orthogonal set.
        assert_eq!(a.ortho_len(), 0);
    }

    #[test]
    fn nonnegative_orthant_directions_have_positive_mean_dot() {
        // Monte-Carlo estimate over 1000 pairs in d = 128: uniform [0,1)
        // draws are strongly correlated, unlike orthogonalized ones.
        let anchor = Array1::from_elem(128, 1.0);
        let mut b = DirectionBasis::from_raw(anchor, 77).unwrap();
        let mut mean_dot = 0.0;
        let n_pairs = 1000;
        for _ in 0..n_pairs {
            let x = b.random_direction();
            let y = b.random_direction();
            mean_dot += x.dot(&y);
        }
        mean_dot /= n_pairs as f64;
        assert!(
            mean_dot > 0.5,
            "uniform-orthant mean pairwise dot should be strongly positive, got {mean_dot}"
        );
    }

    #[test]
    fn d1_basis_errors_out() {
        let mut b = basis_from(&[2.0], 0);
        assert!(matches!(
            b.next_direction(),
            Err(Error::DegenerateInput(_))
        ));
    }
}
