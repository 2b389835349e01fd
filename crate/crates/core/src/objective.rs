//! The anchored cross-entropy objective on the projection matrix, its
//! analytic gradient, the test-time entropy objective, and a
//! central-difference gradient oracle.
//!
//! For one feature `x` with label `y`:
//!
//! ```text
//! u = Wᵀx + b,  v = u / ‖u‖,  z_k = temp · ⟨v, t_k⟩,  p = softmax(z)
//! ∂ce/∂z = p − e_y
//! ∂ce/∂v = temp · Tᵀ(p − e_y)
//! ∂ce/∂u = (I − v vᵀ) ∂ce/∂v / ‖u‖
//! ∂ce/∂W = x (∂ce/∂u)ᵀ
//! ```
//!
//! and the anchor term contributes `2λ(W − W0)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{check_compat, logits_from_embedding, FeatureBank, ProjectionHead, TextClassifier};
use crate::numerics::{dot, entropy_of, log_softmax_unchecked, softmax_unchecked, Mat, NORM_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, reg: f64, lambda: f64) -> Self {
        Self {
            ce,
            reg,
            total: ce + lambda * reg,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.reg.is_finite() && self.total.is_finite()
    }
}

/// Loss and gradient from a single pass over the bank.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: LossBreakdown,
    pub grad: Mat,
    /// `(sample, view)` pairs whose projection norm fell below the floor.
    /// They contribute zero gradient.
    pub degenerate: Vec<(usize, usize)>,
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn ce_loss(logits: &Mat, labels: &[usize]) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(invalid("cross-entropy of zero samples"));
    }
    if labels.len() != logits.rows() {
        return Err(invalid(format!(
            "{} labels for {} logit rows",
            labels.len(),
            logits.rows()
        )));
    }
    let k = logits.cols();
    let mut sum = 0.0;
    for (row, &y) in logits.iter_rows().zip(labels) {
        if y >= k {
            return Err(invalid(format!("label {y} outside [0, {k})")));
        }
        sum -= log_softmax_unchecked(row)[y];
    }
    Ok((sum / logits.rows() as f64).max(0.0))
}

/// Squared Frobenius distance `Σ (W − W0)²`.
pub fn frob_reg(w: &Mat, w0: &Mat) -> Result<f64> {
    Ok(w.sub(w0)?.frobenius_sq())
}

fn check_training_inputs<'a>(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &'a FeatureBank,
    lambda: f64,
) -> Result<&'a [usize]> {
    check_compat(head, cls, bank)?;
    if bank.is_empty() {
        return Err(invalid("objective needs at least one sample"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid(format!("lambda must be a non-negative number, got {lambda}")));
    }
    let labels = bank.require_labels()?;
    bank.check_labels_below(cls.num_classes())?;
    Ok(labels)
}

/// Cross-entropy over every (sample, view) pair plus `λ‖W − W0‖²_F`.
pub fn total_loss(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    lambda: f64,
) -> Result<LossBreakdown> {
    let labels = check_training_inputs(head, cls, bank, lambda)?;
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for v in 0..bank.views() {
            let mut u = head.project_raw(bank.feature(i, v))?;
            crate::numerics::normalize_in_place(&mut u);
            let z = logits_from_embedding(&u, cls, head.temp());
            sum -= log_softmax_unchecked(&z)[y];
        }
    }
    let ce = (sum / (bank.len() * bank.views()) as f64).max(0.0);
    Ok(LossBreakdown::new(ce, frob_reg(head.w(), head.w0())?, lambda))
}

/// Adds `x (∂/∂u)ᵀ` to `grad` given the logit gradient `dz` of one feature.
/// Returns `false` (and adds nothing) when the projection is degenerate.
pub(crate) fn backprop_feature(
    head: &ProjectionHead,
    cls: &TextClassifier,
    x: &[f64],
    u: &[f64],
    dz: &[f64],
    grad: &mut Mat,
) -> bool {
    let n = dot(u, u).sqrt();
    if n < NORM_FLOOR {
        return false;
    }
    let d = u.len();
    let v: Vec<f64> = u.iter().map(|a| a / n).collect();
    let mut gv = vec![0.0; d];
    for (t, &g) in cls.rows().iter_rows().zip(dz) {
        if g != 0.0 {
            for (o, tj) in gv.iter_mut().zip(t) {
                *o += g * tj;
            }
        }
    }
    gv.iter_mut().for_each(|g| *g *= head.temp());
    let radial = dot(&v, &gv);
    let gu: Vec<f64> = gv.iter().zip(&v).map(|(g, vj)| (g - vj * radial) / n).collect();
    for (r, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            for (o, g) in grad.row_mut(r).iter_mut().zip(&gu) {
                *o += xi * g;
            }
        }
    }
    true
}

pub fn loss_and_grad(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    lambda: f64,
) -> Result<LossGrad> {
    let labels = check_training_inputs(head, cls, bank, lambda)?;
    let m = (bank.len() * bank.views()) as f64;
    let mut grad = Mat::zeros(head.input_dim(), head.output_dim());
    let mut degenerate = Vec::new();
    let mut sum = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        for view in 0..bank.views() {
            let x = bank.feature(i, view);
            let u = head.project_raw(x)?;
            let mut e = u.clone();
            crate::numerics::normalize_in_place(&mut e);
            let z = logits_from_embedding(&e, cls, head.temp());
            let ls = log_softmax_unchecked(&z);
            sum -= ls[y];
            let mut dz: Vec<f64> = ls.iter().map(|l| l.exp() / m).collect();
            dz[y] -= 1.0 / m;
            if !backprop_feature(head, cls, x, &u, &dz, &mut grad) {
                degenerate.push((i, view));
            }
        }
    }
    let diff = head.w().sub(head.w0())?;
    let reg = diff.frobenius_sq();
    if lambda != 0.0 {
        grad.axpy(2.0 * lambda, &diff)?;
    }
    Ok(LossGrad {
        loss: LossBreakdown::new((sum / m).max(0.0), reg, lambda),
        grad,
        degenerate,
    })
}

/// Analytic `∂total/∂W`. The bias never receives a gradient.
pub fn grad_total_loss(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    lambda: f64,
) -> Result<Mat> {
    Ok(loss_and_grad(head, cls, bank, lambda)?.grad)
}

/// Central differences of [`total_loss`] over every entry of `W`.
pub fn finite_diff_grad(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    lambda: f64,
    step: f64,
) -> Result<Mat> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let (rows, cols) = head.w().shape();
    let mut out = Mat::zeros(rows, cols);
    let mut probe = head.clone();
    for r in 0..rows {
        for c in 0..cols {
            let base = head.w().get(r, c);
            let mut w = head.w().clone();
            w.set(r, c, base + step);
            probe.set_w(w.clone())?;
            let plus = total_loss(&probe, cls, bank, lambda)?.total;
            w.set(r, c, base - step);
            probe.set_w(w)?;
            let minus = total_loss(&probe, cls, bank, lambda)?.total;
            out.set(r, c, (plus - minus) / (2.0 * step));
        }
    }
    Ok(out)
}

/// Largest entrywise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat, floor: f64) -> Result<f64> {
    analytic.check_same_shape(numeric)?;
    Ok(analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max))
}

fn check_selection(views: &Mat, selection: &[usize]) -> Result<()> {
    if selection.is_empty() {
        return Err(invalid("empty view selection"));
    }
    if let Some(bad) = selection.iter().find(|&&s| s >= views.rows()) {
        return Err(invalid(format!("view {bad} out of range ({} views)", views.rows())));
    }
    Ok(())
}

/// Average of the per-view class distributions over `selection`.
pub fn mean_selected_probs(
    head: &ProjectionHead,
    cls: &TextClassifier,
    views: &Mat,
    selection: &[usize],
) -> Result<Vec<f64>> {
    check_selection(views, selection)?;
    let mut mean = vec![0.0; cls.num_classes()];
    for &s in selection {
        let mut e = head.project_raw(views.row(s))?;
        crate::numerics::normalize_in_place(&mut e);
        let p = softmax_unchecked(&logits_from_embedding(&e, cls, head.temp()));
        mean.iter_mut().zip(&p).for_each(|(m, p)| *m += p);
    }
    let c = selection.len() as f64;
    mean.iter_mut().for_each(|m| *m /= c);
    Ok(mean)
}

/// Entropy of the mean class distribution over the selected views.
pub fn entropy_objective(
    head: &ProjectionHead,
    cls: &TextClassifier,
    views: &Mat,
    selection: &[usize],
) -> Result<f64> {
    entropy_of(&mean_selected_probs(head, cls, views, selection)?)
}

/// [`entropy_objective`] and its gradient with respect to `W`.
///
/// With `p̄ = mean_s p_s` and `a = −ln p̄`, the logit gradient of view `s` is
/// `p_s ⊙ (a − ⟨p_s, a⟩) / |S|`.
pub fn entropy_objective_grad(
    head: &ProjectionHead,
    cls: &TextClassifier,
    views: &Mat,
    selection: &[usize],
) -> Result<(f64, Mat)> {
    check_selection(views, selection)?;
    if views.cols() != head.input_dim() {
        return Err(crate::error::shape(format!(
            "views are {}-dimensional, head expects {}",
            views.cols(),
            head.input_dim()
        )));
    }
    let c = selection.len() as f64;
    let mut raws = Vec::with_capacity(selection.len());
    let mut probs = Vec::with_capacity(selection.len());
    let mut mean = vec![0.0; cls.num_classes()];
    for &s in selection {
        let u = head.project_raw(views.row(s))?;
        let mut e = u.clone();
        crate::numerics::normalize_in_place(&mut e);
        let p = softmax_unchecked(&logits_from_embedding(&e, cls, head.temp()));
        mean.iter_mut().zip(&p).for_each(|(m, p)| *m += p);
        raws.push(u);
        probs.push(p);
    }
    mean.iter_mut().for_each(|m| *m /= c);
    let h = entropy_of(&mean)?;
    let a: Vec<f64> = mean.iter().map(|m| -m.max(f64::MIN_POSITIVE).ln()).collect();
    let mut grad = Mat::zeros(head.input_dim(), head.output_dim());
    for ((&s, u), p) in selection.iter().zip(&raws).zip(&probs) {
        let pa = dot(p, &a);
        let dz: Vec<f64> = p.iter().zip(&a).map(|(pk, ak)| pk * (ak - pa) / c).collect();
        backprop_feature(head, cls, views.row(s), u, &dz, &mut grad);
    }
    Ok((h, grad))
}
