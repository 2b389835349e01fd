//! Full-batch fine-tuning of the projection matrix and the validation grid
//! sweep.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::eval::accuracy;
use crate::model::{class_logits, predict, FeatureBank, ProjectionHead, TextClassifier};
use crate::numerics::Mat;
use crate::objective::{loss_and_grad, LossBreakdown};

pub const DEFAULT_EPOCHS: usize = 300;

/// Learning rates of the validation sweep, largest first.
pub const DEFAULT_LR_GRID: [f64; 7] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];

/// Anchor weights of the validation sweep, largest first.
pub const DEFAULT_LAMBDA_GRID: [f64; 7] = [10.0, 1.0, 1e-1, 1e-2, 1e-3, 1e-4, 0.0];

/// How the anchor weight λ is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// λ = 1/N
    InverseShots { shots: usize },
    /// λ = 1/N²
    InverseShotsSquared { shots: usize },
    Zero,
}

impl LambdaSchedule {
    pub fn resolve(&self) -> Result<f64> {
        match *self {
            LambdaSchedule::Constant { value } => {
                if value.is_finite() && value >= 0.0 {
                    Ok(value)
                } else {
                    Err(invalid(format!("lambda must be non-negative, got {value}")))
                }
            }
            LambdaSchedule::InverseShots { shots } => {
                check_shots(shots)?;
                Ok(1.0 / shots as f64)
            }
            LambdaSchedule::InverseShotsSquared { shots } => {
                check_shots(shots)?;
                Ok(1.0 / (shots as f64 * shots as f64))
            }
            LambdaSchedule::Zero => Ok(0.0),
        }
    }

    /// Parses `inv_shots`, `inv_shots_sq`, `zero`, or a number.
    pub fn parse(spec: &str, shots: Option<usize>) -> Result<Self> {
        let need = || shots.ok_or_else(|| invalid(format!("lambda schedule {spec:?} needs a shot count")));
        match spec {
            "inv_shots" | "inverse_shots" => Ok(Self::InverseShots { shots: need()? }),
            "inv_shots_sq" | "inverse_shots_squared" => Ok(Self::InverseShotsSquared { shots: need()? }),
            "zero" => Ok(Self::Zero),
            other => other
                .parse::<f64>()
                .map_err(|_| invalid(format!("unrecognized lambda {other:?}")))
                .map(|value| Self::Constant { value }),
        }
    }
}

fn check_shots(shots: usize) -> Result<()> {
    if shots == 0 {
        return Err(invalid("shot-dependent lambda needs at least one shot"));
    }
    Ok(())
}

pub fn resolve_lambda(schedule: &LambdaSchedule) -> Result<f64> {
    schedule.resolve()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    PlainGd,
    /// Adam with β = (0.9, 0.999), ε = 1e-8.
    #[default]
    AdaptiveMoments,
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gd" | "plain_gd" => Ok(Self::PlainGd),
            "adam" | "adaptive_moments" => Ok(Self::AdaptiveMoments),
            other => Err(invalid(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    ConstantLr,
    CosineDecay,
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" | "constant_lr" => Ok(Self::ConstantLr),
            "cosine" | "cosine_decay" => Ok(Self::CosineDecay),
            other => Err(invalid(format!("unknown lr schedule {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub lambda: LambdaSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: DEFAULT_EPOCHS,
            optimizer: Optimizer::default(),
            schedule: LrSchedule::default(),
            seed: 0,
            lambda: LambdaSchedule::Zero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as an explicit no-op run
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        self.lambda.resolve().map(|_| ())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::ConstantLr => self.lr,
            LrSchedule::CosineDecay => {
                let t = epoch as f64 / self.epochs as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// SHA-256 of the final parameter matrix.
    pub final_hash: String,
}

impl TrainHistory {
    /// One JSON object per line, in epoch order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// SHA-256 over the little-endian bytes of the shape and entries.
pub fn mat_hash(m: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of the canonical JSON encoding of any serializable config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (((p, g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Stateful first-order update rule.
pub struct Stepper {
    kind: Optimizer,
    adam: Adam,
}

impl Stepper {
    pub fn new(kind: Optimizer, len: usize) -> Self {
        Self {
            kind,
            adam: Adam::new(len),
        }
    }

    pub fn step(&mut self, param: &mut Mat, grad: &Mat, lr: f64) {
        match self.kind {
            Optimizer::PlainGd => {
                for (p, g) in param.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                    *p -= lr * g;
                }
            }
            Optimizer::AdaptiveMoments => self.adam.step(param.as_mut_slice(), grad.as_slice(), lr),
        }
    }
}

/// Runs `cfg.epochs` full-batch steps on `param`. `objective` returns the
/// loss at the given parameter and its gradient. The loss recorded for an
/// epoch is the one evaluated before that epoch's step.
pub fn optimize<F>(init: Mat, cfg: &TrainConfig, mut objective: F) -> Result<(Mat, TrainHistory)>
where
    F: FnMut(&Mat) -> Result<(LossBreakdown, Mat)>,
{
    cfg.validate()?;
    let mut param = init;
    let mut stepper = Stepper::new(cfg.optimizer, param.as_slice().len());
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grad) = objective(&param)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite: Box::new(param),
            });
        }
        let lr = cfg.lr_at(epoch);
        records.push(EpochRecord {
            epoch,
            ce: loss.ce,
            reg: loss.reg,
            total: loss.total,
            lambda: loss.lambda,
            lr,
        });
        let before = param.clone();
        stepper.step(&mut param, &grad, lr);
        if !param.is_finite() {
            return Err(Error::Diverged {
                epoch,
                last_finite: Box::new(before),
            });
        }
    }
    let final_hash = mat_hash(&param);
    Ok((param, TrainHistory { records, final_hash }))
}

/// Fine-tunes `W` on the labeled bank; bias and anchor are left untouched.
pub fn train(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    cfg: &TrainConfig,
) -> Result<(ProjectionHead, TrainHistory)> {
    cfg.validate()?;
    let lambda = cfg.lambda.resolve()?;
    bank.require_labels()?;
    let mut probe = head.clone();
    let (w, history) = optimize(head.w().clone(), cfg, |w| {
        probe.set_w(w.clone())?;
        let lg = loss_and_grad(&probe, cls, bank, lambda)?;
        Ok((lg.loss, lg.grad))
    })?;
    let mut trained = head.clone();
    trained.set_w(w)?;
    Ok((trained, history))
}

/// One cell of the sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub lr: f64,
    pub lambda: f64,
    pub val_accuracy: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: TrainConfig,
    pub best_cell: usize,
    /// Cells in grid order: learning rate outer, lambda inner.
    pub cells: Vec<SweepCell>,
}

impl fmt::Display for SweepCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "lr={:e} lambda={:e} acc={:.4}{}",
            self.lr,
            self.lambda,
            self.val_accuracy,
            if self.diverged { " (diverged)" } else { "" }
        )
    }
}

/// Trains one head per (lr, λ) pair from the same starting head and picks the
/// best validation accuracy on view 0. Ties prefer the smaller lr, then the
/// larger λ.
pub fn grid_sweep(
    head: &ProjectionHead,
    cls: &TextClassifier,
    train_bank: &FeatureBank,
    val_bank: &FeatureBank,
    lr_grid: &[f64],
    lambda_grid: &[f64],
    base: &TrainConfig,
) -> Result<SweepResult> {
    if lr_grid.is_empty() || lambda_grid.is_empty() {
        return Err(invalid("sweep grids must be non-empty"));
    }
    let val_labels = val_bank.require_labels()?;
    let grid: Vec<(f64, f64)> = lr_grid
        .iter()
        .flat_map(|&lr| lambda_grid.iter().map(move |&l| (lr, l)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(lr, lambda)| {
            let cfg = TrainConfig {
                lr,
                lambda: LambdaSchedule::Constant { value: lambda },
                ..*base
            };
            match train(head, cls, train_bank, &cfg) {
                Ok((trained, _)) => {
                    let preds = predict(&class_logits(&trained, cls, val_bank, 0)?)?;
                    Ok(SweepCell {
                        lr,
                        lambda,
                        val_accuracy: accuracy(&preds, val_labels)?,
                        diverged: false,
                    })
                }
                Err(Error::Diverged { .. }) => Ok(SweepCell {
                    lr,
                    lambda,
                    val_accuracy: 0.0,
                    diverged: true,
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best = 0;
    for (i, c) in cells.iter().enumerate().skip(1) {
        let b = &cells[best];
        let better = c.val_accuracy > b.val_accuracy
            || (c.val_accuracy == b.val_accuracy
                && (c.lr < b.lr || (c.lr == b.lr && c.lambda > b.lambda)));
        if better {
            best = i;
        }
    }
    let chosen = &cells[best];
    Ok(SweepResult {
        best: TrainConfig {
            lr: chosen.lr,
            lambda: LambdaSchedule::Constant { value: chosen.lambda },
            ..*base
        },
        best_cell: best,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_bank, random_classifier, random_head, rng};

    #[test]
    fn lambda_formulas() {
        assert_eq!(LambdaSchedule::InverseShots { shots: 4 }.resolve().unwrap(), 0.25);
        assert_eq!(LambdaSchedule::InverseShotsSquared { shots: 4 }.resolve().unwrap(), 0.0625);
        assert_eq!(LambdaSchedule::Constant { value: 0.1 }.resolve().unwrap(), 0.1);
        assert_eq!(LambdaSchedule::Zero.resolve().unwrap(), 0.0);
        assert!(LambdaSchedule::InverseShots { shots: 0 }.resolve().is_err());
        assert!(LambdaSchedule::Constant { value: -1.0 }.resolve().is_err());
    }

    #[test]
    fn lambda_parsing() {
        assert_eq!(
            LambdaSchedule::parse("inv_shots", Some(4)).unwrap().resolve().unwrap(),
            0.25
        );
        assert!(LambdaSchedule::parse("inv_shots", None).is_err());
        assert_eq!(LambdaSchedule::parse("0.5", None).unwrap(), LambdaSchedule::Constant { value: 0.5 });
        assert!(LambdaSchedule::parse("abc", None).is_err());
    }

    #[test]
    fn zero_epochs_rejected_and_zero_lr_is_noop() {
        let mut r = rng(1);
        let head = random_head(&mut r, 6, 4, true);
        let cls = random_classifier(&mut r, 3, 4);
        let bank = random_bank(&mut r, 6, 2, 6, 3);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        assert!(train(&head, &cls, &bank, &cfg).is_err());
        for optimizer in [Optimizer::PlainGd, Optimizer::AdaptiveMoments] {
            let cfg = TrainConfig { epochs: 1, lr: 0.0, optimizer, ..Default::default() };
            let (trained, hist) = train(&head, &cls, &bank, &cfg).unwrap();
            assert_eq!(hist.records.len(), 1);
            let a: Vec<u64> = trained.w().as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = head.w().as_slice().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_keeps_anchor_and_bias_and_records_history() {
        let mut r = rng(2);
        let head = random_head(&mut r, 6, 4, true);
        let cls = random_classifier(&mut r, 3, 4);
        let bank = random_bank(&mut r, 6, 2, 6, 3);
        let cfg = TrainConfig { epochs: 25, lr: 1e-2, lambda: LambdaSchedule::Constant { value: 0.1 }, ..Default::default() };
        let (trained, hist) = train(&head, &cls, &bank, &cfg).unwrap();
        assert_eq!(trained.w0(), head.w0());
        assert_eq!(trained.bias(), head.bias());
        assert_eq!(hist.records.len(), 25);
        assert!(hist.records.last().unwrap().total < hist.records[0].total);
        assert_eq!(hist.final_hash, mat_hash(trained.w()));
        let (again, hist2) = train(&head, &cls, &bank, &cfg).unwrap();
        assert_eq!(again, trained);
        assert_eq!(hist, hist2);
        assert_eq!(hist.to_jsonl().lines().count(), 25);
    }

    #[test]
    fn plain_gd_diverges_with_huge_step() {
        let mut r = rng(3);
        let head = random_head(&mut r, 4, 3, false);
        let cls = random_classifier(&mut r, 2, 3);
        let bank = random_bank(&mut r, 4, 1, 4, 2);
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e300,
            optimizer: Optimizer::PlainGd,
            lambda: LambdaSchedule::Constant { value: 10.0 },
            ..Default::default()
        };
        match train(&head, &cls, &bank, &cfg) {
            Err(Error::Diverged { last_finite, .. }) => assert!(last_finite.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let cfg = TrainConfig { lr: 1.0, epochs: 10, schedule: LrSchedule::CosineDecay, ..Default::default() };
        assert_eq!(cfg.lr_at(0), 1.0);
        assert!(cfg.lr_at(5) < 0.51 && cfg.lr_at(5) > 0.49);
        assert!(cfg.lr_at(9) < 0.03);
    }

    #[test]
    fn single_cell_sweep_returns_it() {
        let mut r = rng(4);
        let head = random_head(&mut r, 6, 4, false);
        let cls = random_classifier(&mut r, 3, 4);
        let train_bank = random_bank(&mut r, 6, 2, 6, 3);
        let val = random_bank(&mut r, 6, 1, 6, 3);
        let base = TrainConfig { epochs: 5, ..Default::default() };
        let res = grid_sweep(&head, &cls, &train_bank, &val, &[1e-3], &[0.5], &base).unwrap();
        assert_eq!(res.cells.len(), 1);
        assert_eq!(res.best.lr, 1e-3);
        assert_eq!(res.best.lambda, LambdaSchedule::Constant { value: 0.5 });
    }

    #[test]
    fn sweep_tie_break_prefers_small_lr_then_large_lambda() {
        let mut r = rng(5);
        let head = random_head(&mut r, 6, 4, false);
        let cls = random_classifier(&mut r, 3, 4);
        let train_bank = random_bank(&mut r, 6, 2, 6, 3);
        let val = random_bank(&mut r, 6, 1, 6, 3);
        // lr = 0 leaves every head at the anchor so every cell ties
        let base = TrainConfig { epochs: 2, ..Default::default() };
        let res = grid_sweep(&head, &cls, &train_bank, &val, &[0.0, 0.0], &[0.0, 3.0, 1.0], &base).unwrap();
        assert_eq!(res.cells.len(), 6);
        assert_eq!(res.best_cell, 1);
        assert_eq!(res.best.lambda, LambdaSchedule::Constant { value: 3.0 });
    }

    #[test]
    fn sweep_marks_diverged_cells() {
        let mut r = rng(6);
        let head = random_head(&mut r, 4, 3, false);
        let cls = random_classifier(&mut r, 2, 3);
        let train_bank = random_bank(&mut r, 4, 1, 4, 2);
        let val = random_bank(&mut r, 4, 1, 4, 2);
        let base = TrainConfig { epochs: 30, optimizer: Optimizer::PlainGd, ..Default::default() };
        let res = grid_sweep(&head, &cls, &train_bank, &val, &[1e300, 1e-3], &[10.0], &base).unwrap();
        assert!(res.cells[0].diverged);
        assert_eq!(res.cells[0].val_accuracy, 0.0);
        assert!(!res.cells[1].diverged);
        assert_eq!(res.best_cell, 1);
    }
}
