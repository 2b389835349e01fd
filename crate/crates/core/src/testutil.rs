//! Random instances shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{FeatureBank, ProjectionHead, TextClassifier};
use crate::numerics::Mat;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Mat::new(rows, cols, data).unwrap()
}

pub fn random_head(r: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> ProjectionHead {
    let w = random_mat(r, d_in, d_out, 1.0);
    let b = bias.then(|| (0..d_out).map(|_| r.random_range(-0.3..0.3)).collect());
    ProjectionHead::pretrained(w, b, 100.0).unwrap()
}

/// Head whose current `W` has drifted away from its anchor.
pub fn drifted_head(r: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> ProjectionHead {
    let h = random_head(r, d_in, d_out, bias);
    let mut w = h.w().clone();
    w.axpy(1.0, &random_mat(r, d_in, d_out, 0.2)).unwrap();
    let mut h = h;
    h.set_w(w).unwrap();
    h
}

pub fn random_classifier(r: &mut ChaCha8Rng, k: usize, d: usize) -> TextClassifier {
    let raw = random_mat(r, k, d, 1.0);
    TextClassifier::from_unnormalized(raw, (0..k).map(|i| format!("class{i}")).collect()).unwrap()
}

pub fn random_bank(r: &mut ChaCha8Rng, n: usize, v: usize, d: usize, k: usize) -> FeatureBank {
    let data = (0..n * v * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    FeatureBank::new(n, v, d, data, Some(labels), "test").unwrap()
}
