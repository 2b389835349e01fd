//! Comparison methods that run on cached features: zero-shot, linear probe,
//! linear adapter, TaskRes residual, the text-side projector, and the
//! additive logit-bias view of a fine-tuned projection.
//!
//! Every method scores through [`crate::model::scores_against`], and every
//! method that has an anchor reproduces the zero-shot argmax there.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::model::{
    class_logits, embed_bank, predict, project, scores_against, FeatureBank, ProjectionHead, TextClassifier,
};
use crate::numerics::{dot, log_softmax_unchecked, Mat};
use crate::objective::LossBreakdown;
use crate::trainer::{optimize, train, TrainConfig, TrainHistory};

/// Residual weight used for TaskRes unless overridden.
pub const DEFAULT_TASKRES_ALPHA: f64 = 0.1;

/// Method tag stored in the projection container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    Prolip = 0,
    LinearProbe = 1,
    LinearAdapter = 2,
    Taskres = 3,
    Textproj = 4,
}

impl MethodTag {
    pub const ALL: [MethodTag; 5] = [
        MethodTag::Prolip,
        MethodTag::LinearProbe,
        MethodTag::LinearAdapter,
        MethodTag::Taskres,
        MethodTag::Textproj,
    ];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            MethodTag::Prolip => "prolip",
            MethodTag::LinearProbe => "linear_probe",
            MethodTag::LinearAdapter => "linear_adapter",
            MethodTag::Taskres => "taskres",
            MethodTag::Textproj => "textproj",
        }
    }

    /// Whether the method needs the frozen visual head to embed features.
    pub fn needs_base_head(self) -> bool {
        self != MethodTag::Prolip
    }
}

impl fmt::Display for MethodTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method {s:?}")))
    }
}

/// Zero-shot prediction on view 0. Refuses a head that has left its anchor.
pub fn zero_shot_predict(head0: &ProjectionHead, cls: &TextClassifier, bank: &FeatureBank) -> Result<Vec<usize>> {
    if !head0.is_at_anchor() {
        return Err(Error::InvalidUse("zero-shot prediction needs an untouched head".into()));
    }
    predict(&class_logits(head0, cls, bank, 0)?)
}

/// Linear classifier on frozen unit embeddings. Closed-set: it can only ever
/// score the K classes it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weights: Mat,
    pub init: Mat,
    pub init_from_text: bool,
}

impl LinearProbe {
    pub fn from_text(cls: &TextClassifier) -> Self {
        Self {
            weights: cls.rows().clone(),
            init: cls.rows().clone(),
            init_from_text: true,
        }
    }

    pub fn zeros(k: usize, d: usize) -> Self {
        Self {
            weights: Mat::zeros(k, d),
            init: Mat::zeros(k, d),
            init_from_text: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, embedding: &[f64], temp: f64) -> Vec<f64> {
        scores_against(embedding, &self.weights, temp)
    }
}

/// Square matrix applied to unit embeddings, anchored to the identity. The
/// adapted embedding is re-normalized before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAdapter {
    pub head: ProjectionHead,
}

impl LinearAdapter {
    pub fn identity(d: usize, temp: f64) -> Result<Self> {
        Ok(Self {
            head: ProjectionHead::pretrained(Mat::identity(d), None, temp)?,
        })
    }

    pub fn matrix(&self) -> &Mat {
        self.head.w()
    }
}

/// Per-class residual added to the frozen text rows: `t_k + α r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskResHead {
    pub residual: Mat,
    pub alpha: f64,
}

impl TaskResHead {
    pub fn zeros(k: usize, d: usize, alpha: f64) -> Self {
        Self {
            residual: Mat::zeros(k, d),
            alpha,
        }
    }

    pub fn effective_rows(&self, cls: &TextClassifier) -> Result<Mat> {
        let mut rows = cls.rows().clone();
        rows.axpy(self.alpha, &self.residual)?;
        Ok(rows)
    }
}

/// Trainable text-side projection: classifier rows are
/// `normalize(Wtᵀ y_k)` for pre-projection text features `y_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextProjHead {
    pub head: ProjectionHead,
}

impl TextProjHead {
    pub fn classifier(&self, text_pre: &Mat, names: &[String]) -> Result<TextClassifier> {
        if text_pre.cols() != self.head.input_dim() {
            return Err(shape(format!(
                "text features are {}-dimensional, text projector expects {}",
                text_pre.cols(),
                self.head.input_dim()
            )));
        }
        let rows = text_pre
            .iter_rows()
            .map(|y| project(&self.head, y))
            .collect::<Result<Vec<_>>>()?;
        TextClassifier::new(Mat::from_rows(&rows)?, names.to_vec())
    }
}

/// Learned additive term of a fine-tuned projection: `B = W − W0`.
pub fn bias_decompose(head: &ProjectionHead) -> Result<Mat> {
    head.w().sub(head.w0())
}

/// Un-normalized score `xᵀ M t`.
pub fn raw_score(x: &[f64], m: &Mat, t: &[f64]) -> Result<f64> {
    let mt = m.tmatvec(x)?;
    if mt.len() != t.len() {
        return Err(shape("score vector and class row differ in length"));
    }
    Ok(dot(&mt, t))
}

/// Unit embeddings of every (sample, view) as rows, with their labels.
fn flattened_embeddings(head0: &ProjectionHead, bank: &FeatureBank) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let labels = bank.require_labels()?;
    let mut rows = Vec::with_capacity(bank.len() * bank.views());
    let mut ys = Vec::with_capacity(rows.capacity());
    for (i, &y) in labels.iter().enumerate() {
        for v in 0..bank.views() {
            rows.push(project(head0, bank.feature(i, v))?);
            ys.push(y);
        }
    }
    if rows.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    Ok((rows, ys))
}

/// Cross-entropy of `temp · v (F + α P)ᵀ` and its gradient in `P`.
fn residual_ce(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    fixed: &Mat,
    alpha: f64,
    param: &Mat,
    temp: f64,
) -> Result<(f64, Mat)> {
    let mut rows = fixed.clone();
    rows.axpy(alpha, param)?;
    let k = rows.rows();
    let m = embeddings.len() as f64;
    let mut grad = Mat::zeros(param.rows(), param.cols());
    let mut sum = 0.0;
    for (v, &y) in embeddings.iter().zip(labels) {
        if y >= k {
            return Err(invalid(format!("label {y} outside [0, {k})")));
        }
        let ls = log_softmax_unchecked(&scores_against(v, &rows, temp));
        sum -= ls[y];
        for (c, l) in ls.iter().enumerate() {
            let dz = (l.exp() - if c == y { 1.0 } else { 0.0 }) / m;
            let scale = alpha * temp * dz;
            if scale != 0.0 {
                for (g, vj) in grad.row_mut(c).iter_mut().zip(v) {
                    *g += scale * vj;
                }
            }
        }
    }
    Ok(((sum / m).max(0.0), grad))
}

/// Full-batch cross-entropy training of a probe on frozen embeddings. The
/// probe objective carries no anchor term.
pub fn linear_probe_train(
    head0: &ProjectionHead,
    bank: &FeatureBank,
    cls: &TextClassifier,
    cfg: &TrainConfig,
    init_from_text: bool,
) -> Result<(LinearProbe, TrainHistory)> {
    let (emb, ys) = flattened_embeddings(head0, bank)?;
    let init = if init_from_text {
        LinearProbe::from_text(cls)
    } else {
        LinearProbe::zeros(cls.num_classes(), cls.dim())
    };
    let fixed = Mat::zeros(cls.num_classes(), cls.dim());
    let (weights, hist) = optimize(init.weights.clone(), cfg, |p| {
        let (ce, g) = residual_ce(&emb, &ys, &fixed, 1.0, p, head0.temp())?;
        Ok((LossBreakdown::new(ce, 0.0, 0.0), g))
    })?;
    Ok((
        LinearProbe {
            weights,
            ..init
        },
        hist,
    ))
}

/// Trains the adapter on embeddings from the frozen head, anchored to the
/// identity with `cfg.lambda`.
pub fn linear_adapter_train(
    head0: &ProjectionHead,
    bank: &FeatureBank,
    cls: &TextClassifier,
    cfg: &TrainConfig,
) -> Result<(LinearAdapter, TrainHistory)> {
    bank.require_labels()?;
    let embedded = embed_bank(head0, bank)?;
    let start = LinearAdapter::identity(head0.output_dim(), head0.temp())?;
    let (head, hist) = train(&start.head, cls, &embedded, cfg)?;
    Ok((LinearAdapter { head }, hist))
}

/// Trains the TaskRes residual with plain cross-entropy; the text rows stay
/// frozen.
pub fn taskres_train(
    head0: &ProjectionHead,
    bank: &FeatureBank,
    cls: &TextClassifier,
    cfg: &TrainConfig,
    alpha: f64,
) -> Result<(TaskResHead, TrainHistory)> {
    if !alpha.is_finite() {
        return Err(invalid("alpha must be finite"));
    }
    let (emb, ys) = flattened_embeddings(head0, bank)?;
    let init = TaskResHead::zeros(cls.num_classes(), cls.dim(), alpha);
    let (residual, hist) = optimize(init.residual.clone(), cfg, |p| {
        let (ce, g) = residual_ce(&emb, &ys, cls.rows(), alpha, p, head0.temp())?;
        Ok((LossBreakdown::new(ce, 0.0, 0.0), g))
    })?;
    Ok((TaskResHead { residual, alpha }, hist))
}

/// Loss of the text-side projector against frozen visual embeddings.
#[derive(Debug, Clone)]
pub struct TextProjProblem {
    embeddings: Vec<Vec<f64>>,
    labels: Vec<usize>,
    text_pre: Mat,
    temp: f64,
}

impl TextProjProblem {
    pub fn new(head0: &ProjectionHead, bank: &FeatureBank, text_pre: &Mat, cls: &TextClassifier) -> Result<Self> {
        if text_pre.rows() != cls.num_classes() {
            return Err(shape(format!(
                "{} text feature rows for {} classes",
                text_pre.rows(),
                cls.num_classes()
            )));
        }
        bank.check_labels_below(cls.num_classes())?;
        let (embeddings, labels) = flattened_embeddings(head0, bank)?;
        Ok(Self {
            embeddings,
            labels,
            text_pre: text_pre.clone(),
            temp: head0.temp(),
        })
    }

    pub fn loss(&self, text_head: &ProjectionHead, lambda: f64) -> Result<LossBreakdown> {
        Ok(self.loss_and_grad(text_head, lambda)?.0)
    }

    /// Cross-entropy plus `λ‖Wt − Wt0‖²_F`, and the gradient in `Wt`.
    pub fn loss_and_grad(&self, text_head: &ProjectionHead, lambda: f64) -> Result<(LossBreakdown, Mat)> {
        let k = self.text_pre.rows();
        let raws = self
            .text_pre
            .iter_rows()
            .map(|y| text_head.project_raw(y))
            .collect::<Result<Vec<_>>>()?;
        let mut units = raws.clone();
        units.iter_mut().for_each(|u| {
            crate::numerics::normalize_in_place(u);
        });
        let rows = Mat::from_rows(&units)?;
        let m = self.embeddings.len() as f64;
        // gradient in each class row: temp Σ_i dz_ik v_i
        let mut gt = vec![vec![0.0; rows.cols()]; k];
        let mut sum = 0.0;
        for (v, &y) in self.embeddings.iter().zip(&self.labels) {
            let ls = log_softmax_unchecked(&scores_against(v, &rows, self.temp));
            sum -= ls[y];
            for (c, l) in ls.iter().enumerate() {
                let dz = (l.exp() - if c == y { 1.0 } else { 0.0 }) / m;
                for (g, vj) in gt[c].iter_mut().zip(v) {
                    *g += self.temp * dz * vj;
                }
            }
        }
        let mut grad = Mat::zeros(text_head.input_dim(), text_head.output_dim());
        // back through t_k = u_k / ‖u_k‖ and u_k = Wtᵀ y_k
        for c in 0..k {
            let n = dot(&raws[c], &raws[c]).sqrt();
            if n < crate::numerics::NORM_FLOOR {
                continue;
            }
            let t = &units[c];
            let radial = dot(t, &gt[c]);
            let gu: Vec<f64> = gt[c].iter().zip(t).map(|(g, tj)| (g - tj * radial) / n).collect();
            for (r, &yr) in self.text_pre.row(c).iter().enumerate() {
                for (o, g) in grad.row_mut(r).iter_mut().zip(&gu) {
                    *o += yr * g;
                }
            }
        }
        let diff = text_head.w().sub(text_head.w0())?;
        if lambda != 0.0 {
            grad.axpy(2.0 * lambda, &diff)?;
        }
        Ok((LossBreakdown::new((sum / m).max(0.0), diff.frobenius_sq(), lambda), grad))
    }
}

/// Trains the text-side projector; the visual head stays frozen.
/// `text_pre` holds one pre-projection text feature row per class.
pub fn text_proj_train(
    text_pre: Option<&Mat>,
    text_head0: &ProjectionHead,
    head0: &ProjectionHead,
    bank: &FeatureBank,
    cls: &TextClassifier,
    cfg: &TrainConfig,
) -> Result<(TextProjHead, TrainHistory)> {
    let text_pre = text_pre.ok_or_else(|| {
        Error::Unsupported("text projector training needs pre-projection text features".into())
    })?;
    let problem = TextProjProblem::new(head0, bank, text_pre, cls)?;
    let lambda = cfg.lambda.resolve()?;
    let mut probe = text_head0.clone();
    let (w, hist) = optimize(text_head0.w().clone(), cfg, |w| {
        probe.set_w(w.clone())?;
        problem.loss_and_grad(&probe, lambda)
    })?;
    let mut head = text_head0.clone();
    head.set_w(w)?;
    Ok((TextProjHead { head }, hist))
}

/// A trained model of any method, ready to score a bank.
#[derive(Debug, Clone)]
pub enum Adapted {
    Prolip(ProjectionHead),
    LinearProbe {
        base: ProjectionHead,
        probe: LinearProbe,
    },
    LinearAdapter {
        base: ProjectionHead,
        adapter: LinearAdapter,
    },
    Taskres {
        base: ProjectionHead,
        taskres: TaskResHead,
    },
    Textproj {
        base: ProjectionHead,
        text: TextProjHead,
        text_pre: Mat,
    },
}

impl Adapted {
    pub fn method(&self) -> MethodTag {
        match self {
            Adapted::Prolip(_) => MethodTag::Prolip,
            Adapted::LinearProbe { .. } => MethodTag::LinearProbe,
            Adapted::LinearAdapter { .. } => MethodTag::LinearAdapter,
            Adapted::Taskres { .. } => MethodTag::Taskres,
            Adapted::Textproj { .. } => MethodTag::Textproj,
        }
    }

    /// Logits of one view of every sample against `cls`. The probe rejects a
    /// classifier whose class count differs from its own.
    pub fn logits(&self, cls: &TextClassifier, bank: &FeatureBank, view: usize) -> Result<Mat> {
        if let Adapted::Prolip(head) = self {
            return class_logits(head, cls, bank, view);
        }
        let base = self.base();
        if bank.dim() != base.input_dim() {
            return Err(shape(format!(
                "bank features are {}-dimensional, base head expects {}",
                bank.dim(),
                base.input_dim()
            )));
        }
        if view >= bank.views() {
            return Err(invalid(format!("view {view} out of range")));
        }
        let temp = base.temp();
        let text_rows;
        let rows: &Mat = match self {
            Adapted::LinearProbe { probe, .. } => {
                if probe.num_classes() != cls.num_classes() {
                    return Err(Error::InvalidUse(format!(
                        "linear probe is fixed to {} classes, classifier has {}",
                        probe.num_classes(),
                        cls.num_classes()
                    )));
                }
                &probe.weights
            }
            Adapted::Taskres { taskres, .. } => {
                text_rows = taskres.effective_rows(cls)?;
                &text_rows
            }
            Adapted::Textproj { text, text_pre, .. } => {
                text_rows = text.classifier(text_pre, cls.class_names())?.rows().clone();
                &text_rows
            }
            _ => cls.rows(),
        };
        let mut data = Vec::with_capacity(bank.len() * rows.rows());
        for i in 0..bank.len() {
            let mut e = project(base, bank.feature(i, view))?;
            if let Adapted::LinearAdapter { adapter, .. } = self {
                e = project(&adapter.head, &e)?;
            }
            data.extend(scores_against(&e, rows, temp));
        }
        Mat::new(bank.len(), rows.rows(), data)
    }

    /// The model restricted to a subset of the class ids it was built
    /// with. Only the text projector carries per-class state that needs
    /// slicing; the probe stays closed-set and is returned unchanged.
    pub fn for_classes(&self, ids: &[usize]) -> Result<Self> {
        match self {
            Adapted::Textproj { base, text, text_pre } => {
                let mut rows = Vec::with_capacity(ids.len());
                for &k in ids {
                    if k >= text_pre.rows() {
                        return Err(invalid(format!("class id {k} out of range")));
                    }
                    rows.push(text_pre.row(k).to_vec());
                }
                Ok(Adapted::Textproj {
                    base: base.clone(),
                    text: text.clone(),
                    text_pre: Mat::from_rows(&rows)?,
                })
            }
            other => Ok(other.clone()),
        }
    }

    pub fn predict(&self, cls: &TextClassifier, bank: &FeatureBank) -> Result<Vec<usize>> {
        predict(&self.logits(cls, bank, 0)?)
    }

    fn base(&self) -> &ProjectionHead {
        match self {
            Adapted::Prolip(h) => h,
            Adapted::LinearProbe { base, .. }
            | Adapted::LinearAdapter { base, .. }
            | Adapted::Taskres { base, .. }
            | Adapted::Textproj { base, .. } => base,
        }
    }

    /// The trained parameter as a projection-shaped container:
    /// prolip `W`/`W0`; probe `C`/`C0`; adapter `A`/`I`; TaskRes `α·r`/`0`;
    /// text projector `Wt`/`Wt0`.
    pub fn to_container(&self) -> Result<ProjectionHead> {
        let temp = self.base().temp();
        match self {
            Adapted::Prolip(h) => Ok(h.clone()),
            Adapted::LinearProbe { probe, .. } => {
                ProjectionHead::with_anchor(probe.weights.clone(), None, probe.init.clone(), temp)
            }
            Adapted::LinearAdapter { adapter, .. } => Ok(adapter.head.clone()),
            Adapted::Taskres { taskres, .. } => {
                let mut scaled = taskres.residual.clone();
                scaled.scale(taskres.alpha);
                let (k, d) = scaled.shape();
                ProjectionHead::with_anchor(scaled, None, Mat::zeros(k, d), temp)
            }
            Adapted::Textproj { text, .. } => Ok(text.head.clone()),
        }
    }

    /// Inverse of [`Adapted::to_container`]. Non-prolip methods need the
    /// frozen visual head; the text projector also needs its text features.
    pub fn from_container(
        method: MethodTag,
        stored: ProjectionHead,
        base: Option<ProjectionHead>,
        text_pre: Option<Mat>,
    ) -> Result<Self> {
        if method == MethodTag::Prolip {
            return Ok(Adapted::Prolip(stored));
        }
        let base = base.ok_or_else(|| {
            Error::InvalidUse(format!("method {method} needs the frozen base projection"))
        })?;
        Ok(match method {
            MethodTag::Prolip => unreachable!(),
            MethodTag::LinearProbe => Adapted::LinearProbe {
                base,
                probe: LinearProbe {
                    init_from_text: false,
                    weights: stored.w().clone(),
                    init: stored.w0().clone(),
                },
            },
            MethodTag::LinearAdapter => Adapted::LinearAdapter {
                base,
                adapter: LinearAdapter { head: stored },
            },
            MethodTag::Taskres => Adapted::Taskres {
                base,
                taskres: TaskResHead {
                    residual: stored.w().clone(),
                    alpha: 1.0,
                },
            },
            MethodTag::Textproj => Adapted::Textproj {
                base,
                text: TextProjHead { head: stored },
                text_pre: text_pre.ok_or_else(|| {
                    Error::Unsupported("text projector needs pre-projection text features".into())
                })?,
            },
        })
    }
}

/// Options that only some methods use.
#[derive(Debug, Clone, Default)]
pub struct MethodOptions {
    pub taskres_alpha: Option<f64>,
    pub probe_init_from_text: bool,
    pub text_pre: Option<Mat>,
    /// Pretrained text projector; required for the text-side method.
    pub text_head0: Option<ProjectionHead>,
}

/// Trains `method` starting from the pretrained visual head `head0`.
pub fn train_method(
    method: MethodTag,
    head0: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    cfg: &TrainConfig,
    opts: &MethodOptions,
) -> Result<(Adapted, TrainHistory)> {
    let base = head0.clone();
    match method {
        MethodTag::Prolip => {
            let (h, hist) = train(head0, cls, bank, cfg)?;
            Ok((Adapted::Prolip(h), hist))
        }
        MethodTag::LinearProbe => {
            let (probe, hist) = linear_probe_train(head0, bank, cls, cfg, opts.probe_init_from_text)?;
            Ok((Adapted::LinearProbe { base, probe }, hist))
        }
        MethodTag::LinearAdapter => {
            let (adapter, hist) = linear_adapter_train(head0, bank, cls, cfg)?;
            Ok((Adapted::LinearAdapter { base, adapter }, hist))
        }
        MethodTag::Taskres => {
            let alpha = opts.taskres_alpha.unwrap_or(DEFAULT_TASKRES_ALPHA);
            let (taskres, hist) = taskres_train(head0, bank, cls, cfg, alpha)?;
            Ok((Adapted::Taskres { base, taskres }, hist))
        }
        MethodTag::Textproj => {
            let text_head0 = opts.text_head0.clone().ok_or_else(|| {
                Error::Unsupported("text projector training needs a pretrained text projection".into())
            })?;
            let (text, hist) = text_proj_train(opts.text_pre.as_ref(), &text_head0, head0, bank, cls, cfg)?;
            let text_pre = opts.text_pre.clone().expect("checked by text_proj_train");
            Ok((Adapted::Textproj { base, text, text_pre }, hist))
        }
    }
}
