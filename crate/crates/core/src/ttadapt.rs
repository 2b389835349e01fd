//! Per-sample test-time adaptation: keep the most confident augmented views,
//! take a few entropy-minimization steps on `W`, and predict from the
//! averaged distribution of the selected views.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::model::{logits_from_embedding, project, FeatureBank, ProjectionHead, TextClassifier};
use crate::numerics::{argmax, entropy, softmax, Mat, ProbVec};
use crate::objective::{entropy_objective_grad, mean_selected_probs};
use crate::trainer::{Optimizer, Stepper};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTConfig {
    /// Fraction of views kept by confidence selection.
    pub rho: f64,
    pub steps: usize,
    pub lr: f64,
    pub reset_per_sample: bool,
}

impl Default for TTConfig {
    fn default() -> Self {
        Self {
            rho: 0.1,
            steps: 1,
            lr: 1e-4,
            reset_per_sample: true,
        }
    }
}

impl TTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(invalid(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.steps == 0 {
            return Err(invalid("test-time adaptation needs at least one step"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(invalid(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Number of views kept: `max(1, ⌊rho·V⌋)`.
pub fn selection_size(views: usize, rho: f64) -> usize {
    // nudge so products like 0.29 * 100 land on the intended integer
    (((rho * views as f64) + 1e-9).floor() as usize).clamp(1, views.max(1))
}

/// Indices of the lowest-entropy views, sorted ascending. Ties in entropy go
/// to the lower view index.
pub fn confidence_select(view_probs: &[ProbVec], rho: f64) -> Result<Vec<usize>> {
    if view_probs.is_empty() {
        return Err(invalid("confidence selection over zero views"));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    let mut scored = view_probs
        .iter()
        .enumerate()
        .map(|(i, p)| Ok((entropy(p)?, i)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = scored
        .into_iter()
        .take(selection_size(view_probs.len(), rho))
        .map(|(_, i)| i)
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Class distribution of every view under `head`.
pub fn view_probs(head: &ProjectionHead, cls: &TextClassifier, views: &Mat) -> Result<Vec<ProbVec>> {
    views
        .iter_rows()
        .map(|x| softmax(&logits_from_embedding(&project(head, x)?, cls, head.temp())))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub head: ProjectionHead,
    pub pred: usize,
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub selected_views: Vec<usize>,
    /// Adaptation went non-finite and the unadapted prediction was used.
    pub fell_back: bool,
}

/// Adapts a copy of `head` to one sample's views and predicts its class.
pub fn tt_adapt_sample(
    head: &ProjectionHead,
    cls: &TextClassifier,
    views: &Mat,
    cfg: &TTConfig,
) -> Result<SampleOutcome> {
    cfg.validate()?;
    if views.rows() == 0 {
        return Err(invalid("sample has no views"));
    }
    if views.cols() != head.input_dim() {
        return Err(shape(format!(
            "views are {}-dimensional, head expects {}",
            views.cols(),
            head.input_dim()
        )));
    }
    if cls.dim() != head.output_dim() {
        return Err(shape("classifier and head disagree on embedding size"));
    }
    let probs = view_probs(head, cls, views)?;
    let selected = confidence_select(&probs, cfg.rho)?;
    let pre_mean = mean_selected_probs(head, cls, views, &selected)?;
    let pre_pred = argmax(&pre_mean);

    let mut w = head.w().clone();
    let mut stepper = Stepper::new(Optimizer::AdaptiveMoments, w.as_slice().len());
    let mut adapted = head.clone();
    let mut pre_entropy = f64::NAN;
    let mut ok = true;
    for step in 0..cfg.steps {
        let (h, g) = entropy_objective_grad(&adapted, cls, views, &selected)?;
        if step == 0 {
            pre_entropy = h;
        }
        if !g.is_finite() {
            ok = false;
            break;
        }
        stepper.step(&mut w, &g, cfg.lr);
        if !w.is_finite() {
            ok = false;
            break;
        }
        adapted.set_w(w.clone())?;
    }

    if ok {
        let post = mean_selected_probs(&adapted, cls, views, &selected)?;
        let post_entropy = crate::numerics::entropy_of(&post)?;
        if post_entropy.is_finite() {
            return Ok(SampleOutcome {
                head: adapted,
                pred: argmax(&post),
                pre_entropy,
                post_entropy,
                selected_views: selected,
                fell_back: false,
            });
        }
    }
    Ok(SampleOutcome {
        head: head.clone(),
        pred: pre_pred,
        pre_entropy,
        post_entropy: pre_entropy,
        selected_views: selected,
        fell_back: true,
    })
}

/// One line of the prediction stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub sample_id: usize,
    pub pred: usize,
    pub pre_entropy: f64,
    pub post_entropy: f64,
    pub selected_views: Vec<usize>,
    pub fell_back: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamError {
    pub sample_id: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub samples: usize,
    pub total_secs: f64,
    pub mean_secs_per_sample: f64,
}

#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub records: Vec<StreamRecord>,
    pub errors: Vec<StreamError>,
    pub timing: TimingStats,
}

impl StreamOutput {
    pub fn predictions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.pred).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Applies [`tt_adapt_sample`] to every sample of `stream`. With
/// `reset_per_sample` each sample starts from `head` and samples run in
/// parallel; otherwise the adapted head carries over in stream order.
/// Per-sample failures are collected and the stream continues.
pub fn tt_adapt_stream(
    head: &ProjectionHead,
    cls: &TextClassifier,
    stream: &FeatureBank,
    cfg: &TTConfig,
) -> Result<StreamOutput> {
    cfg.validate()?;
    if stream.is_empty() {
        return Err(invalid("empty stream"));
    }
    let start = Instant::now();
    let outcomes: Vec<Result<SampleOutcome>> = if cfg.reset_per_sample {
        (0..stream.len())
            .into_par_iter()
            .map(|i| tt_adapt_sample(head, cls, &stream.sample_views(i), cfg))
            .collect()
    } else {
        let mut current = head.clone();
        (0..stream.len())
            .map(|i| {
                let out = tt_adapt_sample(&current, cls, &stream.sample_views(i), cfg)?;
                current = out.head.clone();
                Ok(out)
            })
            .collect()
    };
    let elapsed = start.elapsed().as_secs_f64();

    let mut records = Vec::with_capacity(outcomes.len());
    let mut errors = Vec::new();
    for (sample_id, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => records.push(StreamRecord {
                sample_id,
                pred: o.pred,
                pre_entropy: o.pre_entropy,
                post_entropy: o.post_entropy,
                selected_views: o.selected_views,
                fell_back: o.fell_back,
            }),
            Err(e) => errors.push(StreamError {
                sample_id,
                message: e.to_string(),
            }),
        }
    }
    Ok(StreamOutput {
        records,
        errors,
        timing: TimingStats {
            samples: stream.len(),
            total_secs: elapsed,
            mean_secs_per_sample: elapsed / stream.len() as f64,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_classifier, random_head, random_mat, rng};
    use rand::Rng;

    fn random_probs(r: &mut rand_chacha::ChaCha8Rng, v: usize, k: usize) -> Vec<ProbVec> {
        (0..v)
            .map(|_| {
                let z: Vec<f64> = (0..k).map(|_| r.random_range(-3.0..3.0)).collect();
                softmax(&z).unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_views_keep_the_single_most_confident() {
        let mut r = rng(1);
        let probs = random_probs(&mut r, 10, 5);
        let sel = confidence_select(&probs, 0.1).unwrap();
        assert_eq!(sel.len(), 1);
        let best = (0..10)
            .min_by(|&a, &b| entropy(&probs[a]).unwrap().total_cmp(&entropy(&probs[b]).unwrap()))
            .unwrap();
        assert_eq!(sel, vec![best]);
    }

    #[test]
    fn identical_views_pick_lowest_indices() {
        let p = softmax(&[1.0, 0.0, -1.0]).unwrap();
        let probs = vec![p; 20];
        assert_eq!(confidence_select(&probs, 0.25).unwrap(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sixty_four_views_keep_six() {
        let mut r = rng(2);
        let probs = random_probs(&mut r, 64, 6);
        let sel = confidence_select(&probs, 0.1).unwrap();
        assert_eq!(sel.len(), 6);
        let mut order: Vec<(f64, usize)> = probs.iter().map(|p| entropy(p).unwrap()).zip(0..).collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let mut expected: Vec<usize> = order[..6].iter().map(|p| p.1).collect();
        expected.sort();
        assert_eq!(sel, expected);
    }

    #[test]
    fn selection_size_rules() {
        assert_eq!(selection_size(1, 0.1), 1);
        assert_eq!(selection_size(10, 0.1), 1);
        assert_eq!(selection_size(64, 0.1), 6);
        assert_eq!(selection_size(100, 0.29), 29);
        assert_eq!(selection_size(7, 1.0), 7);
        assert!(confidence_select(&[], 0.1).is_err());
        assert!(confidence_select(&[ProbVec::uniform(2)], 0.0).is_err());
    }

    #[test]
    fn zero_lr_keeps_unadapted_prediction() {
        let mut r = rng(3);
        let head = random_head(&mut r, 8, 4, false);
        let cls = random_classifier(&mut r, 5, 4);
        let views = random_mat(&mut r, 16, 8, 1.0);
        let cfg = TTConfig { lr: 0.0, rho: 0.25, ..Default::default() };
        let out = tt_adapt_sample(&head, &cls, &views, &cfg).unwrap();
        let mean = mean_selected_probs(&head, &cls, &views, &out.selected_views).unwrap();
        assert_eq!(out.pred, argmax(&mean));
        assert_eq!(out.head.w(), head.w());
        assert_eq!(out.pre_entropy, out.post_entropy);
    }

    #[test]
    fn single_view_selects_itself() {
        let mut r = rng(4);
        let head = random_head(&mut r, 6, 3, false);
        let cls = random_classifier(&mut r, 3, 3);
        let views = random_mat(&mut r, 1, 6, 1.0);
        let out = tt_adapt_sample(&head, &cls, &views, &TTConfig::default()).unwrap();
        assert_eq!(out.selected_views, vec![0]);
        let p = view_probs(&head, &cls, &views).unwrap();
        assert!((out.pre_entropy - entropy(&p[0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn stream_of_one_matches_sample_and_permutation_is_harmless() {
        let mut r = rng(5);
        let head = random_head(&mut r, 6, 4, false);
        let cls = random_classifier(&mut r, 4, 4);
        let data: Vec<f64> = (0..5 * 10 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let bank = FeatureBank::new(5, 10, 6, data, None, "stream").unwrap();
        let cfg = TTConfig { rho: 0.3, ..Default::default() };

        let one = tt_adapt_stream(&head, &cls, &bank.select(&[2]).unwrap(), &cfg).unwrap();
        let direct = tt_adapt_sample(&head, &cls, &bank.sample_views(2), &cfg).unwrap();
        assert_eq!(one.records[0].pred, direct.pred);
        assert_eq!(one.records[0].post_entropy, direct.post_entropy);

        let full = tt_adapt_stream(&head, &cls, &bank, &cfg).unwrap();
        let perm = [4usize, 1, 3, 0, 2];
        let shuffled = tt_adapt_stream(&head, &cls, &bank.select(&perm).unwrap(), &cfg).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert_eq!(shuffled.records[pos].pred, full.records[src].pred);
            assert_eq!(shuffled.records[pos].post_entropy, full.records[src].post_entropy);
        }
        assert_eq!(full.to_jsonl().lines().count(), 5);
    }

    #[test]
    fn carrying_state_changes_the_start_point() {
        let mut r = rng(6);
        // low temperature keeps the entropy gradient away from zero
        let head = random_head(&mut r, 6, 4, false).with_temp(1.0).unwrap();
        let cls = random_classifier(&mut r, 4, 4);
        let data: Vec<f64> = (0..3 * 4 * 6).map(|_| r.random_range(-1.0..1.0)).collect();
        let bank = FeatureBank::new(3, 4, 6, data, None, "stream").unwrap();
        let cfg = TTConfig { reset_per_sample: false, lr: 1e-2, rho: 0.5, ..Default::default() };
        let carried = tt_adapt_stream(&head, &cls, &bank, &cfg).unwrap();
        let fresh = tt_adapt_sample(&head, &cls, &bank.sample_views(1), &cfg).unwrap();
        assert!(!carried.records[0].fell_back);
        assert_ne!(carried.records[1].pre_entropy, fresh.pre_entropy);
    }
}
