//! Projection head, text classifier, feature bank, and the forward pass
//! from pre-projection features to class logits.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{argmax, dot, normalize_in_place, Mat};

/// Pretrained temperature (`1/τ`) of stock checkpoints.
pub const DEFAULT_TEMP: f64 = 100.0;

/// Row-norm tolerance for classifier rows.
pub const UNIT_ROW_TOL: f64 = 1e-4;

/// The trainable projection `W` (D_o × D) with its frozen bias and the
/// pretrained snapshot it is anchored to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    w: Mat,
    bias: Option<Vec<f64>>,
    w0: Mat,
    temp: f64,
}

impl ProjectionHead {
    /// Builds a head whose anchor is a snapshot of `w`.
    pub fn pretrained(w: Mat, bias: Option<Vec<f64>>, temp: f64) -> Result<Self> {
        let w0 = w.clone();
        Self::with_anchor(w, bias, w0, temp)
    }

    pub fn with_anchor(w: Mat, bias: Option<Vec<f64>>, w0: Mat, temp: f64) -> Result<Self> {
        w.check_same_shape(&w0)?;
        if !(temp.is_finite() && temp > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {temp}")));
        }
        if let Some(b) = &bias {
            if b.len() != w.cols() {
                return Err(shape(format!(
                    "bias has {} entries, projection outputs {}",
                    b.len(),
                    w.cols()
                )));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(invalid("non-finite bias"));
            }
        }
        Ok(Self { w, bias, w0, temp })
    }

    pub fn w(&self) -> &Mat {
        &self.w
    }

    pub fn w0(&self) -> &Mat {
        &self.w0
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn temp(&self) -> f64 {
        self.temp
    }

    pub fn input_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn is_at_anchor(&self) -> bool {
        self.w == self.w0
    }

    /// Replaces the trainable matrix. The anchor and bias stay as they are.
    pub fn set_w(&mut self, w: Mat) -> Result<()> {
        w.check_same_shape(&self.w0)?;
        if !w.is_finite() {
            return Err(invalid("non-finite projection"));
        }
        self.w = w;
        Ok(())
    }

    /// A copy whose anchor is moved to the current `W`.
    pub fn reanchored(&self) -> Self {
        Self {
            w: self.w.clone(),
            bias: self.bias.clone(),
            w0: self.w.clone(),
            temp: self.temp,
        }
    }

    pub fn with_temp(mut self, temp: f64) -> Result<Self> {
        if !(temp.is_finite() && temp > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {temp}")));
        }
        self.temp = temp;
        Ok(self)
    }

    /// Raw projection `Wᵀx + b` before normalization.
    pub fn project_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut u = self.w.tmatvec(x)?;
        if let Some(b) = &self.bias {
            u.iter_mut().zip(b).for_each(|(u, b)| *u += b);
        }
        Ok(u)
    }
}

/// Unit-norm class embeddings (K × D) with their names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextClassifier {
    rows: Mat,
    class_names: Vec<String>,
}

impl TextClassifier {
    pub fn new(rows: Mat, class_names: Vec<String>) -> Result<Self> {
        if rows.rows() < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", rows.rows())));
        }
        if class_names.len() != rows.rows() {
            return Err(shape(format!(
                "{} class names for {} rows",
                class_names.len(),
                rows.rows()
            )));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if !seen.insert(name.as_str()) {
                return Err(invalid(format!("duplicate class name {name:?}")));
            }
        }
        for (k, row) in rows.iter_rows().enumerate() {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > UNIT_ROW_TOL {
                return Err(invalid(format!("class row {k} has norm {n}")));
            }
        }
        Ok(Self { rows, class_names })
    }

    /// Normalizes each row of `raw` before validating.
    pub fn from_unnormalized(mut raw: Mat, class_names: Vec<String>) -> Result<Self> {
        for k in 0..raw.rows() {
            if !normalize_in_place(raw.row_mut(k)) {
                return Err(invalid(format!("class row {k} is degenerate")));
            }
        }
        Self::new(raw, class_names)
    }

    pub fn rows(&self) -> &Mat {
        &self.rows
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Row-sliced classifier over the given class ids, in the given order.
    /// Unlike [`TextClassifier::new`], a single class is allowed here.
    pub fn subset(&self, ids: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        let mut names = Vec::with_capacity(ids.len());
        for &k in ids {
            if k >= self.num_classes() {
                return Err(invalid(format!("class id {k} out of range")));
            }
            data.extend_from_slice(self.rows.row(k));
            names.push(self.class_names[k].clone());
        }
        if ids.is_empty() {
            return Err(invalid("empty class subset"));
        }
        if ids.len() == 1 {
            // a single-class side of a base/new split; rows are already unit
            return Ok(Self {
                rows: Mat::new(1, self.dim(), data)?,
                class_names: names,
            });
        }
        Self::new(Mat::new(ids.len(), self.dim(), data)?, names)
    }
}

/// N samples × V views of D-dimensional features, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    n: usize,
    views: usize,
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<usize>>,
    split_tag: String,
}

impl FeatureBank {
    pub fn new(
        n: usize,
        views: usize,
        dim: usize,
        data: Vec<f64>,
        labels: Option<Vec<usize>>,
        split_tag: impl Into<String>,
    ) -> Result<Self> {
        if views == 0 {
            return Err(invalid("feature bank needs at least one view"));
        }
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if data.len() != n * views * dim {
            return Err(shape(format!(
                "{n}x{views}x{dim} bank needs {} values, got {}",
                n * views * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite feature"));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(shape(format!("{} labels for {n} samples", l.len())));
            }
        }
        Ok(Self {
            n,
            views,
            dim,
            data,
            labels,
            split_tag: split_tag.into(),
        })
    }

    /// Single-view bank from one row per sample.
    pub fn from_rows(rows: &Mat, labels: Option<Vec<usize>>, split_tag: &str) -> Result<Self> {
        Self::new(
            rows.rows(),
            1,
            rows.cols(),
            rows.as_slice().to_vec(),
            labels,
            split_tag,
        )
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split_tag(&self) -> &str {
        &self.split_tag
    }

    pub fn set_split_tag(&mut self, tag: impl Into<String>) {
        self.split_tag = tag.into();
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| invalid(format!("bank {:?} carries no labels", self.split_tag)))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn feature(&self, sample: usize, view: usize) -> &[f64] {
        let start = (sample * self.views + view) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// All views of one sample as a V × D matrix.
    pub fn sample_views(&self, sample: usize) -> Mat {
        let start = sample * self.views * self.dim;
        Mat::new(
            self.views,
            self.dim,
            self.data[start..start + self.views * self.dim].to_vec(),
        )
        .expect("bank block is finite and well shaped")
    }

    /// New bank holding the listed samples in order, view blocks intact.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let block = self.views * self.dim;
        let mut data = Vec::with_capacity(indices.len() * block);
        for &i in indices {
            if i >= self.n {
                return Err(invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * block..(i + 1) * block]);
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(indices.len(), self.views, self.dim, data, labels, self.split_tag.clone())
    }

    /// Keeps only the first `views` views of every sample.
    pub fn truncate_views(&self, views: usize) -> Result<Self> {
        if views == 0 || views > self.views {
            return Err(invalid(format!("cannot keep {views} of {} views", self.views)));
        }
        let mut data = Vec::with_capacity(self.n * views * self.dim);
        for i in 0..self.n {
            for v in 0..views {
                data.extend_from_slice(self.feature(i, v));
            }
        }
        Self::new(self.n, views, self.dim, data, self.labels.clone(), self.split_tag.clone())
    }

    pub fn with_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.n {
                return Err(shape(format!("{} labels for {} samples", l.len(), self.n)));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub(crate) fn check_labels_below(&self, k: usize) -> Result<()> {
        if let Some(l) = &self.labels {
            if let Some(bad) = l.iter().find(|&&y| y >= k) {
                return Err(invalid(format!("label {bad} outside [0, {k})")));
            }
        }
        Ok(())
    }
}

/// Unit embedding `normalize(Wᵀx + b)`. A degenerate projection (norm below
/// the floor) is returned unnormalized.
pub fn project(head: &ProjectionHead, x: &[f64]) -> Result<Vec<f64>> {
    let mut u = head.project_raw(x)?;
    normalize_in_place(&mut u);
    Ok(u)
}

pub(crate) fn check_compat(head: &ProjectionHead, cls: &TextClassifier, bank: &FeatureBank) -> Result<()> {
    if bank.dim() != head.input_dim() {
        return Err(shape(format!(
            "bank features are {}-dimensional, head expects {}",
            bank.dim(),
            head.input_dim()
        )));
    }
    if cls.dim() != head.output_dim() {
        return Err(shape(format!(
            "classifier rows are {}-dimensional, head outputs {}",
            cls.dim(),
            head.output_dim()
        )));
    }
    Ok(())
}

/// `temp · ⟨e, t_k⟩` for every class row.
pub fn logits_from_embedding(embedding: &[f64], cls: &TextClassifier, temp: f64) -> Vec<f64> {
    scores_against(embedding, cls.rows(), temp)
}

/// `temp · ⟨e, r⟩` for every row `r` of `rows`, normalized or not. This is
/// the one similarity kernel every method scores with.
pub fn scores_against(embedding: &[f64], rows: &Mat, temp: f64) -> Vec<f64> {
    rows.iter_rows().map(|t| temp * dot(embedding, t)).collect()
}

/// Class logits (N × K) of one view of every sample.
pub fn class_logits(
    head: &ProjectionHead,
    cls: &TextClassifier,
    bank: &FeatureBank,
    view: usize,
) -> Result<Mat> {
    check_compat(head, cls, bank)?;
    if view >= bank.views() {
        return Err(invalid(format!("view {view} out of range ({} views)", bank.views())));
    }
    let k = cls.num_classes();
    let mut data = Vec::with_capacity(bank.len() * k);
    for i in 0..bank.len() {
        let e = project(head, bank.feature(i, view))?;
        data.extend(logits_from_embedding(&e, cls, head.temp()));
    }
    Mat::new(bank.len(), k, data)
}

/// Per-row argmax, ties toward the lowest class index.
pub fn predict(logits: &Mat) -> Result<Vec<usize>> {
    if logits.rows() == 0 || logits.cols() == 0 {
        return Err(Error::InvalidInput("empty logits".into()));
    }
    Ok(logits.iter_rows().map(argmax).collect())
}

/// Bank of projected unit embeddings, one per sample view.
pub fn embed_bank(head: &ProjectionHead, bank: &FeatureBank) -> Result<FeatureBank> {
    if bank.dim() != head.input_dim() {
        return Err(shape(format!(
            "bank features are {}-dimensional, head expects {}",
            bank.dim(),
            head.input_dim()
        )));
    }
    let mut data = Vec::with_capacity(bank.len() * bank.views() * head.output_dim());
    for i in 0..bank.len() {
        for v in 0..bank.views() {
            data.extend(project(head, bank.feature(i, v))?);
        }
    }
    FeatureBank::new(
        bank.len(),
        bank.views(),
        head.output_dim(),
        data,
        bank.labels().map(<[usize]>::to_vec),
        bank.split_tag(),
    )
}
