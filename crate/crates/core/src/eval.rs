//! Accuracy, harmonic means, and base-to-new bookkeeping. Everything is
//! computed in fractions; [`percent`] renders for tables.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{class_logits, predict, FeatureBank, ProjectionHead, TextClassifier};

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(invalid("accuracy of zero samples"));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Accuracy restricted to each true class. Classes with no samples get 0.
pub fn per_class_accuracy(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>> {
    accuracy(preds, labels)?;
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    for (&p, &y) in preds.iter().zip(labels) {
        if y >= k {
            return Err(invalid(format!("label {y} outside [0, {k})")));
        }
        totals[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
        .collect())
}

/// `2ab / (a + b)`
pub fn harmonic_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(invalid(format!("harmonic mean of negative values ({a}, {b})")));
    }
    if a == 0.0 && b == 0.0 {
        return Err(invalid("harmonic mean of (0, 0) is undefined"));
    }
    Ok(2.0 * a * b / (a + b))
}

/// Mean of the per-dataset harmonic means.
pub fn total_hm_t1(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no datasets"));
    }
    let mut sum = 0.0;
    for &(b, n) in pairs {
        sum += harmonic_mean(b, n)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Harmonic mean of the mean base and mean new accuracies.
pub fn total_hm_t2(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(invalid("no datasets"));
    }
    let n = pairs.len() as f64;
    let base = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let new = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    harmonic_mean(base, new)
}

/// Fraction rendered as a percentage with two decimals.
pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub dataset: String,
    pub split_tag: String,
    pub accuracy: f64,
    pub per_class_acc: Vec<f64>,
    pub n_test: usize,
    pub shots: Option<usize>,
    pub seed: u64,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub config_hash: String,
}

/// Column order of the CSV report.
pub const CSV_HEADER: &str = "method,dataset,shots,seed,lr,lambda,split,accuracy";

impl EvalReport {
    pub fn from_predictions(preds: &[usize], labels: &[usize], k: usize) -> Result<Self> {
        Ok(Self {
            method: String::new(),
            dataset: String::new(),
            split_tag: String::new(),
            accuracy: accuracy(preds, labels)?,
            per_class_acc: per_class_accuracy(preds, labels, k)?,
            n_test: preds.len(),
            shots: None,
            seed: 0,
            lr: None,
            lambda: None,
            config_hash: String::new(),
        })
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.method,
            self.dataset,
            self.shots.map(|s| s.to_string()).unwrap_or_default(),
            self.seed,
            opt(self.lr),
            opt(self.lambda),
            self.split_tag,
            percent(self.accuracy)
        )
    }
}

/// Disjoint, exhaustive partition of the class ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseNewSplit {
    pub base_class_ids: Vec<usize>,
    pub new_class_ids: Vec<usize>,
}

impl BaseNewSplit {
    /// First ⌈K/2⌉ ids are base, the rest new.
    pub fn first_half(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("base/new split needs at least 2 classes, got {k}")));
        }
        let cut = k.div_ceil(2);
        Ok(Self {
            base_class_ids: (0..cut).collect(),
            new_class_ids: (cut..k).collect(),
        })
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.base_class_ids.is_empty() || self.new_class_ids.is_empty() {
            return Err(invalid("base and new sides must both be non-empty"));
        }
        let mut seen = HashSet::new();
        for &c in self.base_class_ids.iter().chain(&self.new_class_ids) {
            if c >= k || !seen.insert(c) {
                return Err(invalid(format!("class {c} repeated or out of range")));
            }
        }
        if seen.len() != k {
            return Err(invalid("split does not cover every class"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseNewResult {
    pub acc_base: f64,
    pub acc_new: f64,
    pub hm: f64,
}

/// Scores the same head against the base and the new classifier.
pub fn base_new_evaluate(
    head: &ProjectionHead,
    cls_base: &TextClassifier,
    cls_new: &TextClassifier,
    base_bank: &FeatureBank,
    new_bank: &FeatureBank,
) -> Result<BaseNewResult> {
    let base_names: HashSet<&str> = cls_base.class_names().iter().map(String::as_str).collect();
    if let Some(dup) = cls_new
        .class_names()
        .iter()
        .find(|n| base_names.contains(n.as_str()))
    {
        return Err(invalid(format!("class {dup:?} appears on both base and new sides")));
    }
    let score = |cls: &TextClassifier, bank: &FeatureBank| -> Result<f64> {
        let preds = predict(&class_logits(head, cls, bank, 0)?)?;
        accuracy(&preds, bank.require_labels()?)
    };
    let acc_base = score(cls_base, base_bank)?;
    let acc_new = score(cls_new, new_bank)?;
    let hm = if acc_base == 0.0 && acc_new == 0.0 {
        0.0
    } else {
        harmonic_mean(acc_base, acc_new)?
    };
    Ok(BaseNewResult { acc_base, acc_new, hm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn per_class_counts() {
        let pc = per_class_accuracy(&[0, 1, 1, 2], &[0, 1, 0, 1], 3).unwrap();
        assert_eq!(pc, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn harmonic_mean_cases() {
        assert_abs_diff_eq!(harmonic_mean(60.0, 60.0).unwrap(), 60.0, epsilon = 1e-12);
        assert_abs_diff_eq!(harmonic_mean(73.29, 65.96).unwrap(), 69.43, epsilon = 0.01);
        assert_eq!(harmonic_mean(5.0, 0.0).unwrap(), 0.0);
        assert!(harmonic_mean(0.0, 0.0).is_err());
        assert!(harmonic_mean(-1.0, 2.0).is_err());
    }

    #[test]
    fn total_hm_cases() {
        assert_abs_diff_eq!(total_hm_t1(&[(60.0, 60.0), (80.0, 80.0)]).unwrap(), 70.0, epsilon = 1e-12);
        assert_eq!(total_hm_t1(&[(70.0, 40.0)]).unwrap(), harmonic_mean(70.0, 40.0).unwrap());
        assert_abs_diff_eq!(total_hm_t2(&[(69.34, 74.22)]).unwrap(), 71.70, epsilon = 0.01);
        let same = [(50.0, 80.0); 4];
        assert_abs_diff_eq!(total_hm_t2(&same).unwrap(), harmonic_mean(50.0, 80.0).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(total_hm_t1(&same).unwrap(), total_hm_t2(&same).unwrap(), epsilon = 1e-12);
        assert!(total_hm_t1(&[]).is_err());
        assert!(total_hm_t2(&[]).is_err());
    }

    #[test]
    fn split_rule() {
        let s = BaseNewSplit::first_half(2).unwrap();
        assert_eq!((s.base_class_ids.len(), s.new_class_ids.len()), (1, 1));
        let s = BaseNewSplit::first_half(7).unwrap();
        assert_eq!(s.base_class_ids, vec![0, 1, 2, 3]);
        s.validate(7).unwrap();
        assert!(BaseNewSplit::first_half(1).is_err());
        let bad = BaseNewSplit { base_class_ids: vec![0, 1], new_class_ids: vec![1] };
        assert!(bad.validate(2).is_err());
    }

    #[test]
    fn percent_rendering() {
        assert_eq!(percent(0.69432), "69.43");
    }

    proptest! {
        #[test]
        fn hm_never_exceeds_arithmetic_mean(a in 0.0f64..100.0, b in 0.0f64..100.0) {
            prop_assume!(a + b > 0.0);
            let h = harmonic_mean(a, b).unwrap();
            prop_assert!(h <= (a + b) / 2.0 + 1e-12);
            if (a - b).abs() > 1e-6 {
                prop_assert!(h < (a + b) / 2.0);
            }
        }

        #[test]
        fn accuracy_is_permutation_invariant(v in prop::collection::vec((0usize..4, 0usize..4), 1..30)) {
            let (p, l): (Vec<usize>, Vec<usize>) = v.iter().cloned().unzip();
            let (pr, lr): (Vec<usize>, Vec<usize>) = v.iter().rev().cloned().unzip();
            prop_assert_eq!(accuracy(&p, &l).unwrap(), accuracy(&pr, &lr).unwrap());
            let hits = v.iter().filter(|(a, b)| a == b).count();
            prop_assert_eq!(accuracy(&p, &l).unwrap(), hits as f64 / v.len() as f64);
        }
    }
}
