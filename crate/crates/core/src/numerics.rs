//! Dense row-major matrices and the probability helpers used by the
//! objectives. Everything here is `f64` and reduces in index order, so
//! identical inputs give bitwise-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Rows whose L2 norm falls below this are treated as degenerate.
pub const NORM_FLOOR: f64 = 1e-12;

/// Row-major dense matrix of finite `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!(
                "non-finite entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers must keep entries finite.
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Computes `selfᵀ x` for a column vector `x` of length `rows`.
    pub fn tmatvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(shape(format!(
                "input has {} entries, matrix has {} rows",
                x.len(),
                self.rows
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (xi, row) in x.iter().zip(self.iter_rows()) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        self.check_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Mat) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_same_shape(&self, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// A probability vector: non-negative entries summing to one within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub const SUM_TOL: f64 = 1e-9;

    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("empty probability vector"));
        }
        if let Some(p) = entries.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(invalid(format!("probability entry {p} is not a finite non-negative number")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

/// Output of [`l2_normalize_rows`]: the normalized matrix and the indices of
/// rows that were left untouched because their norm was below [`NORM_FLOOR`].
#[derive(Debug, Clone)]
pub struct Normalized {
    pub mat: Mat,
    pub degenerate_rows: Vec<usize>,
}

pub fn l2_normalize_rows(m: &Mat) -> Result<Normalized> {
    if !m.is_finite() {
        return Err(invalid("non-finite matrix"));
    }
    let mut out = m.clone();
    let mut degenerate_rows = Vec::new();
    for r in 0..out.rows() {
        if !normalize_in_place(out.row_mut(r)) {
            degenerate_rows.push(r);
        }
    }
    Ok(Normalized {
        mat: out,
        degenerate_rows,
    })
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Normalizes `v` to unit length and returns `true`, or leaves it unchanged
/// and returns `false` when its norm is below [`NORM_FLOOR`].
pub fn normalize_in_place(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n < NORM_FLOOR {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(invalid("log_softmax of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(invalid("log_softmax of a non-finite vector"));
    }
    Ok(log_softmax_unchecked(v))
}

pub(crate) fn log_softmax_unchecked(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - max - lse).collect()
}

pub fn softmax(v: &[f64]) -> Result<ProbVec> {
    let ls = log_softmax(v)?;
    Ok(ProbVec(softmax_from_log(&ls)))
}

pub(crate) fn softmax_unchecked(v: &[f64]) -> Vec<f64> {
    softmax_from_log(&log_softmax_unchecked(v))
}

fn softmax_from_log(ls: &[f64]) -> Vec<f64> {
    ls.iter().map(|x| x.exp()).collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVec) -> Result<f64> {
    entropy_of(p.as_slice())
}

pub(crate) fn entropy_of(p: &[f64]) -> Result<f64> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(invalid(format!("entropy of invalid probability {x}")));
    }
    Ok(p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum::<f64>()
        .max(0.0))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalizes_pythagorean_row() {
        let m = Mat::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert_abs_diff_eq!(n.mat.get(0, 0), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.mat.get(0, 1), 0.8, epsilon = 1e-15);
        assert!(n.degenerate_rows.is_empty());
    }

    #[test]
    fn unit_row_is_unchanged() {
        let m = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert_eq!(n.mat, m);
    }

    #[test]
    fn zero_row_is_flagged() {
        let m = Mat::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let n = l2_normalize_rows(&m).unwrap();
        assert_eq!(n.mat.row(1), &[0.0, 0.0]);
        assert_eq!(n.degenerate_rows, vec![1]);
    }

    #[test]
    fn non_finite_matrix_is_rejected() {
        assert!(Mat::new(1, 2, vec![f64::NAN, 1.0]).is_err());
        assert!(Mat::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn log_softmax_cases() {
        let u = log_softmax(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(u[0], -(2f64.ln()), epsilon = 1e-15);
        assert_abs_diff_eq!(u[1], -(2f64.ln()), epsilon = 1e-15);

        let big = log_softmax(&[1000.0, 0.0]).unwrap();
        assert!(big[0].abs() < 1e-300 || big[0] == 0.0);
        assert_abs_diff_eq!(big[1], -1000.0, epsilon = 1e-9);

        assert!(log_softmax(&[]).is_err());
        assert!(log_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn entropy_cases() {
        assert_abs_diff_eq!(entropy(&ProbVec::uniform(10)).unwrap(), 10f64.ln(), epsilon = 1e-12);
        let one_hot = ProbVec::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let half = ProbVec::new(vec![0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(entropy(&half).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        assert!(ProbVec::new(vec![-0.5, 1.5]).is_err());
        assert!(entropy_of(&[-0.1, 1.1]).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
    }

    #[test]
    fn tmatvec_matches_naive() {
        let w = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let y = w.tmatvec(&[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(y, vec![1.0 - 3.0 + 10.0, 2.0 - 4.0 + 12.0]);
        assert!(w.tmatvec(&[1.0]).is_err());
    }

    fn finite_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-500.0f64..500.0, 1..16)
    }

    proptest! {
        #[test]
        fn log_softmax_exponentiates_to_one(v in finite_vec()) {
            let s: f64 = log_softmax(&v).unwrap().iter().map(|x| x.exp()).sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn log_softmax_is_shift_invariant(v in finite_vec(), c in -100.0f64..100.0) {
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }

        #[test]
        fn normalization_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            prop_assume!(norm(&v) > 1e-6);
            let m = Mat::new(1, v.len(), v).unwrap();
            let once = l2_normalize_rows(&m).unwrap().mat;
            let twice = l2_normalize_rows(&once).unwrap().mat;
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_entropy_is_bounded(v in finite_vec()) {
            let p = softmax(&v).unwrap();
            let h = entropy(&p).unwrap();
            let k = v.len() as f64;
            prop_assert!(h <= k.ln() + 1e-12);
            let all_equal = v.iter().all(|x| *x == v[0]);
            if !all_equal && v.len() > 1 {
                // strictly below the maximum unless entries are (numerically) equal
                let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    - v.iter().cloned().fold(f64::INFINITY, f64::min);
                if spread > 1e-3 {
                    prop_assert!(h < k.ln());
                }
            }
        }

        #[test]
        fn deterministic(v in finite_vec()) {
            let a = log_softmax(&v).unwrap();
            let b = log_softmax(&v).unwrap();
            prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }
}
