//! Finite-difference verification of the analytic training gradient on
//! random small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{FeatureBank, ProjectionHead, TextClassifier, DEFAULT_TEMP};
use crate::numerics::Mat;
use crate::objective::{finite_diff_grad, grad_total_loss, max_relative_error};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-6;
/// Entries smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-3;
pub const LAMBDAS: [f64; 3] = [0.0, 0.1, 1.0];

/// Upper bounds on the random instance sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub max_input: usize,
    pub max_embed: usize,
    pub max_classes: usize,
    pub max_samples: usize,
    pub max_views: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            max_input: 16,
            max_embed: 8,
            max_classes: 8,
            max_samples: 32,
            max_views: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub samples: usize,
    pub views: usize,
    pub lambda: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub tolerance: f64,
    pub instances: Vec<InstanceReport>,
    pub worst: f64,
    pub passed: bool,
}

/// A random labeled problem whose head sits away from its anchor.
pub struct Instance {
    pub head: ProjectionHead,
    pub cls: TextClassifier,
    pub bank: FeatureBank,
    pub lambda: f64,
}

fn uniform_mat(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Mat::new(rows, cols, data).expect("finite")
}

pub fn random_instance(r: &mut ChaCha8Rng, dims: &Dims, lambda: f64) -> Result<Instance> {
    let d_out = r.random_range(2..=dims.max_embed.max(2));
    let d_in = r.random_range(d_out..=dims.max_input.max(d_out));
    let k = r.random_range(2..=dims.max_classes.max(2));
    let n = r.random_range(1..=dims.max_samples.max(1));
    let v = r.random_range(1..=dims.max_views.max(1));
    let w0 = uniform_mat(r, d_in, d_out, 1.0);
    let mut w = w0.clone();
    w.axpy(1.0, &uniform_mat(r, d_in, d_out, 0.2))?;
    let bias = r.random_bool(0.5).then(|| (0..d_out).map(|_| r.random_range(-0.3..0.3)).collect());
    let head = ProjectionHead::with_anchor(w, bias, w0, DEFAULT_TEMP)?;
    let cls = TextClassifier::from_unnormalized(
        uniform_mat(r, k, d_out, 1.0),
        (0..k).map(|i| format!("c{i}")).collect(),
    )?;
    let data = (0..n * v * d_in).map(|_| r.random_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    let bank = FeatureBank::new(n, v, d_in, data, Some(labels), "gradcheck")?;
    Ok(Instance { head, cls, bank, lambda })
}

/// Runs `count` instances, cycling λ through {0, 0.1, 1}. `flip_sign`
/// negates the analytic gradient, which must make the check fail.
pub fn run(count: usize, seed: u64, dims: &Dims, flip_sign: bool) -> Result<Report> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut instances = Vec::with_capacity(count);
    for index in 0..count {
        let lambda = LAMBDAS[index % LAMBDAS.len()];
        let inst = random_instance(&mut r, dims, lambda)?;
        let mut analytic = grad_total_loss(&inst.head, &inst.cls, &inst.bank, lambda)?;
        if flip_sign {
            analytic.scale(-1.0);
        }
        let numeric = finite_diff_grad(&inst.head, &inst.cls, &inst.bank, lambda, FD_STEP)?;
        let err = max_relative_error(&analytic, &numeric, FD_FLOOR)?;
        instances.push(InstanceReport {
            index,
            input_dim: inst.head.input_dim(),
            embed_dim: inst.head.output_dim(),
            classes: inst.cls.num_classes(),
            samples: inst.bank.len(),
            views: inst.bank.views(),
            lambda,
            max_rel_err: err,
            passed: err <= FD_TOLERANCE,
        });
    }
    let worst = instances.iter().map(|i| i.max_rel_err).fold(0.0, f64::max);
    Ok(Report {
        seed,
        tolerance: FD_TOLERANCE,
        passed: !instances.is_empty() && instances.iter().all(|i| i.passed),
        instances,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_instances_pass_and_sign_flip_fails() {
        let ok = run(6, 11, &Dims::default(), false).unwrap();
        assert!(ok.passed, "worst {}", ok.worst);
        let bad = run(3, 11, &Dims::default(), true).unwrap();
        assert!(!bad.passed);
        assert!(bad.worst > 0.5);
    }

    #[test]
    fn instances_respect_bounds() {
        let dims = Dims { max_input: 5, max_embed: 3, max_classes: 2, max_samples: 4, max_views: 1 };
        let rep = run(9, 2, &dims, false).unwrap();
        for i in &rep.instances {
            assert!(i.input_dim <= 5 && i.embed_dim <= 3 && i.embed_dim <= i.input_dim);
            assert!(i.classes == 2 && i.samples <= 4 && i.views == 1);
        }
        assert_eq!(rep.instances.iter().filter(|i| i.lambda == 0.1).count(), 3);
    }
}
