//! On-disk containers, provenance manifests, few-shot sampling, and the
//! synthetic scenario generator.
//!
//! All three containers are little-endian and begin with an 8-byte magic.
//! Values are 32-bit on disk and 64-bit in memory; since every `f32` is
//! exactly representable as `f64`, write → read → write is byte-identical.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::MethodTag;
use crate::error::{invalid, Error, FormatError, Result};
use crate::eval::{accuracy, BaseNewSplit};
use crate::model::{class_logits, predict, FeatureBank, ProjectionHead, TextClassifier, DEFAULT_TEMP};
use crate::numerics::{norm, Mat};

pub const FBANK_MAGIC: [u8; 8] = *b"PLIPFB1\0";
pub const TCLS_MAGIC: [u8; 8] = *b"PLIPTC1\0";
pub const PROJ_MAGIC: [u8; 8] = *b"PLIPPJ1\0";

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], magic: &[u8; 8]) -> Result<Self, FormatError> {
        let head = &buf[..buf.len().min(8)];
        if head != &magic[..head.len()] {
            return Err(FormatError::BadMagic {
                expected: *magic,
                found: head.to_vec(),
            });
        }
        let mut c = Self { buf, pos: 0 };
        c.take(8)?;
        Ok(c)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(FormatError::Truncated {
                needed: end,
                available: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| header("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }

    /// Fails unless the buffer is exactly `pos + rest` bytes long.
    fn expect_len(&self, rest: usize) -> Result<(), FormatError> {
        let expected = self.pos.saturating_add(rest);
        match expected.cmp(&self.buf.len()) {
            std::cmp::Ordering::Equal => Ok(()),
            std::cmp::Ordering::Greater => Err(FormatError::Truncated {
                needed: expected,
                available: self.buf.len(),
            }),
            std::cmp::Ordering::Less => Err(FormatError::SizeMismatch {
                expected,
                actual: self.buf.len(),
            }),
        }
    }

    fn finish(&self) -> Result<(), FormatError> {
        self.expect_len(0)
    }
}

fn header(msg: impl Into<String>) -> FormatError {
    FormatError::InvalidHeader(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| invalid(format!("{v} does not fit in a u32 header field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f64]) -> Result<()> {
    for &v in vals {
        let f = v as f32;
        if !f.is_finite() {
            return Err(invalid(format!("value {v} is not representable as a finite f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(())
}

fn positive(name: &str, v: u32) -> Result<usize, FormatError> {
    if v == 0 {
        return Err(header(format!("{name} must be positive")));
    }
    Ok(v as usize)
}

fn flag(name: &str, v: u32) -> Result<bool, FormatError> {
    match v {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(header(format!("{name} flag must be 0 or 1, got {other}"))),
    }
}

pub fn encode_fbank(bank: &FeatureBank) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(24 + bank.as_slice().len() * 4);
    out.extend_from_slice(&FBANK_MAGIC);
    put_u32(&mut out, bank.dim())?;
    put_u32(&mut out, bank.len())?;
    put_u32(&mut out, bank.views())?;
    put_u32(&mut out, bank.labels().is_some() as usize)?;
    if let Some(labels) = bank.labels() {
        for &y in labels {
            put_u32(&mut out, y)?;
        }
    }
    put_f32s(&mut out, bank.as_slice())?;
    Ok(out)
}

/// The split tag is not stored in the container; it is set from `split_tag`.
pub fn decode_fbank(buf: &[u8], split_tag: &str) -> Result<FeatureBank> {
    let mut c = Cursor::new(buf, &FBANK_MAGIC)?;
    let dim = positive("feature dimension", c.u32()?)?;
    let n = c.u32()? as usize;
    let views = positive("view count", c.u32()?)?;
    let has_labels = flag("has_labels", c.u32()?)?;
    let values = n
        .checked_mul(views)
        .and_then(|x| x.checked_mul(dim))
        .ok_or_else(|| header("bank size overflows"))?;
    let label_bytes = if has_labels { n * 4 } else { 0 };
    c.expect_len(label_bytes.saturating_add(values.saturating_mul(4)))?;
    let labels = if has_labels {
        Some((0..n).map(|_| c.u32().map(|y| y as usize)).collect::<Result<Vec<_>, _>>()?)
    } else {
        None
    };
    let data = c.f32s(values)?;
    c.finish()?;
    FeatureBank::new(n, views, dim, data, labels, split_tag)
}

pub fn encode_tcls(cls: &TextClassifier) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&TCLS_MAGIC);
    put_u32(&mut out, cls.dim())?;
    put_u32(&mut out, cls.num_classes())?;
    for name in cls.class_names() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
    }
    // rows are already unit-norm by construction of the classifier
    put_f32s(&mut out, cls.rows().as_slice())?;
    Ok(out)
}

/// Rows are checked against the unit-norm tolerance, not renormalized.
pub fn decode_tcls(buf: &[u8]) -> Result<TextClassifier> {
    let mut c = Cursor::new(buf, &TCLS_MAGIC)?;
    let dim = positive("embedding dimension", c.u32()?)?;
    let k = c.u32()? as usize;
    if k < 2 {
        return Err(header(format!("classifier needs at least 2 classes, header says {k}")).into());
    }
    let mut names = Vec::with_capacity(k.min(1 << 16));
    for i in 0..k {
        let len = c.u32()? as usize;
        let bytes = c.take(len)?;
        let name = std::str::from_utf8(bytes).map_err(|_| header(format!("class name {i} is not UTF-8")))?;
        names.push(name.to_owned());
    }
    let values = k.checked_mul(dim).ok_or_else(|| header("classifier size overflows"))?;
    c.expect_len(values.saturating_mul(4))?;
    let data = c.f32s(values)?;
    TextClassifier::new(Mat::new(k, dim, data)?, names)
}

pub fn encode_proj(head: &ProjectionHead, method: MethodTag) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&PROJ_MAGIC);
    put_u32(&mut out, head.input_dim())?;
    put_u32(&mut out, head.output_dim())?;
    put_u32(&mut out, head.bias().is_some() as usize)?;
    put_u32(&mut out, method.code() as usize)?;
    put_f32s(&mut out, &[head.temp()])?;
    put_f32s(&mut out, head.w().as_slice())?;
    if let Some(b) = head.bias() {
        put_f32s(&mut out, b)?;
    }
    put_f32s(&mut out, head.w0().as_slice())?;
    Ok(out)
}

pub fn decode_proj(buf: &[u8]) -> Result<(ProjectionHead, MethodTag)> {
    let mut c = Cursor::new(buf, &PROJ_MAGIC)?;
    let d_in = positive("input dimension", c.u32()?)?;
    let d_out = positive("output dimension", c.u32()?)?;
    let has_bias = flag("has_bias", c.u32()?)?;
    let tag = c.u32()?;
    let method = MethodTag::from_code(tag).ok_or_else(|| header(format!("unknown method tag {tag}")))?;
    let mat = d_in.checked_mul(d_out).ok_or_else(|| header("matrix size overflows"))?;
    let floats = 1 + 2 * mat + if has_bias { d_out } else { 0 };
    c.expect_len(floats.saturating_mul(4))?;
    let temp = c.f32s(1)?[0];
    if !(temp.is_finite() && temp > 0.0) {
        return Err(header(format!("temperature must be positive, got {temp}")).into());
    }
    let w = Mat::new(d_in, d_out, c.f32s(mat)?)?;
    let bias = if has_bias { Some(c.f32s(d_out)?) } else { None };
    let w0 = Mat::new(d_in, d_out, c.f32s(mat)?)?;
    c.finish()?;
    Ok((ProjectionHead::with_anchor(w, bias, w0, temp)?, method))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| io_err(path, e))
}

/// SHA-256 of a file's contents, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(read_bytes(path)?)))
}

/// Split tag is taken from the file stem.
pub fn read_fbank(path: &Path) -> Result<FeatureBank> {
    let tag = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
    decode_fbank(&read_bytes(path)?, tag)
}

pub fn write_fbank(bank: &FeatureBank, path: &Path) -> Result<()> {
    write_atomic(path, &encode_fbank(bank)?)
}

pub fn read_tcls(path: &Path) -> Result<TextClassifier> {
    decode_tcls(&read_bytes(path)?)
}

pub fn write_tcls(cls: &TextClassifier, path: &Path) -> Result<()> {
    write_atomic(path, &encode_tcls(cls)?)
}

pub fn read_proj(path: &Path) -> Result<(ProjectionHead, MethodTag)> {
    decode_proj(&read_bytes(path)?)
}

pub fn write_proj(head: &ProjectionHead, method: MethodTag, path: &Path) -> Result<()> {
    write_atomic(path, &encode_proj(head, method)?)
}

/// Provenance record stored next to a bank as `<file>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub split: String,
    pub source_checkpoint: String,
    pub template: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub fn manifest_path(bank_path: &Path) -> PathBuf {
    let mut s = bank_path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_manifest(bank_path: &Path, manifest: &Manifest) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&manifest_path(bank_path), &json)
}

pub fn read_manifest(bank_path: &Path) -> Result<Manifest> {
    let path = manifest_path(bank_path);
    let bytes = read_bytes(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Indices of an `n`-per-class support set, class by class, in shuffled
/// order. Classes are those present in the labels, ascending.
pub fn few_shot_indices(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(invalid("shots must be at least 1"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * k);
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < n {
            return Err(Error::InsufficientClass {
                class,
                needed: n,
                available: members.len(),
            });
        }
        members.shuffle(&mut rng);
        out.extend_from_slice(&members[..n]);
    }
    Ok(out)
}

/// Support bank with exactly `n` samples of every class, view blocks intact.
pub fn sample_few_shot(bank: &FeatureBank, n: usize, seed: u64) -> Result<FeatureBank> {
    let idx = few_shot_indices(bank.require_labels()?, n, seed)?;
    bank.select(&idx)
}

/// One side of a base-to-new split. `class_ids` maps local labels back to
/// the original ids.
#[derive(Debug, Clone)]
pub struct SplitSide {
    pub class_ids: Vec<usize>,
    pub cls: TextClassifier,
    pub bank: FeatureBank,
}

fn split_side(cls: &TextClassifier, bank: &FeatureBank, ids: &[usize]) -> Result<SplitSide> {
    let labels = bank.require_labels()?;
    let mut local = vec![None; cls.num_classes()];
    for (j, &c) in ids.iter().enumerate() {
        local[c] = Some(j);
    }
    let mut keep = Vec::new();
    let mut remapped = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        if let Some(j) = local.get(y).copied().flatten() {
            keep.push(i);
            remapped.push(j);
        }
    }
    let bank = bank.select(&keep)?.with_labels(Some(remapped))?;
    Ok(SplitSide {
        class_ids: ids.to_vec(),
        cls: cls.subset(ids)?,
        bank,
    })
}

/// First ⌈K/2⌉ classes form the base side, the rest the new side. Labels on
/// each side are remapped to `0..K_side`.
pub fn split_base_new(cls: &TextClassifier, bank: &FeatureBank) -> Result<(SplitSide, SplitSide)> {
    let split = BaseNewSplit::first_half(cls.num_classes())?;
    bank.check_labels_below(cls.num_classes())?;
    Ok((
        split_side(cls, bank, &split.base_class_ids)?,
        split_side(cls, bank, &split.new_class_ids)?,
    ))
}

/// Parameters of the synthetic scenario. Noise scales are relative: feature
/// noise and anchor drift are per-coordinate standard deviations scaled by
/// `1/√D_o`, text noise is relative to the norm of the clean text row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub embed_dim: usize,
    pub shots: usize,
    pub views: usize,
    pub test_per_class: usize,
    pub sigma_x: f64,
    pub sigma_t: f64,
    pub sigma_w: f64,
    /// Share of feature noise kept inside the column space of the oracle
    /// projector; the rest lies in directions the oracle ignores. 1 gives
    /// isotropic noise.
    pub signal_noise: f64,
    /// Typical feature norm. Projections are scaled by its inverse, so
    /// zero-shot behavior does not depend on it, but optimizer step sizes
    /// are relative to it.
    pub feature_scale: f64,
    pub seed: u64,
    /// Accepted zero-shot test accuracy range; `None` accepts any draw.
    pub zero_shot_window: Option<(f64, f64)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            input_dim: 32,
            embed_dim: 16,
            shots: 1,
            views: 4,
            test_per_class: 20,
            sigma_x: 3.0,
            sigma_t: 0.3,
            sigma_w: 1.0,
            signal_noise: 0.2,
            feature_scale: 10.0,
            seed: 0,
            zero_shot_window: Some((0.3, 0.9)),
        }
    }
}

pub const SYNTH_MAX_DRAWS: usize = 100;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("classes", self.classes),
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("shots", self.shots),
            ("views", self.views),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(invalid("need at least 2 classes"));
        }
        if self.embed_dim > self.input_dim {
            return Err(invalid(format!(
                "embedding dimension {} exceeds input dimension {}",
                self.embed_dim, self.input_dim
            )));
        }
        if !(self.feature_scale.is_finite() && self.feature_scale > 0.0) {
            return Err(invalid("feature_scale must be positive"));
        }
        if !(0.0..=1.0).contains(&self.signal_noise) {
            return Err(invalid("signal_noise must lie in [0, 1]"));
        }
        for (name, v) in [("sigma_x", self.sigma_x), ("sigma_t", self.sigma_t), ("sigma_w", self.sigma_w)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if let Some((lo, hi)) = self.zero_shot_window {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(invalid(format!("zero-shot window [{lo}, {hi}] is not a sub-range of [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Everything the synthetic scenario produces. `text_pre` holds one
/// pre-projection text feature per class and `text_head0` maps it onto the
/// (unnormalized) classifier rows.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: FeatureBank,
    pub val: FeatureBank,
    pub test: FeatureBank,
    pub cls: TextClassifier,
    pub head0: ProjectionHead,
    pub text_pre: Mat,
    pub text_head0: ProjectionHead,
    pub zero_shot_accuracy: f64,
    pub draws: usize,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

fn rounded(rows: usize, cols: usize, data: Vec<f64>) -> Mat {
    Mat::new(rows, cols, data.into_iter().map(f32_round).collect()).expect("finite synthetic values")
}

/// Orthonormal basis of the column space of `w` (modified Gram-Schmidt).
fn column_basis(w: &Mat) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(w.cols());
    for j in 0..w.cols() {
        let mut q: Vec<f64> = (0..w.rows()).map(|r| w.get(r, j)).collect();
        for b in &basis {
            let p = crate::numerics::dot(&q, b);
            q.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if crate::numerics::normalize_in_place(&mut q) {
            basis.push(q);
        }
    }
    basis
}

struct NoiseShape<'a> {
    basis: &'a [Vec<f64>],
    keep: f64,
}

impl NoiseShape<'_> {
    /// `n − (1 − keep) Q Qᵀ n`
    fn apply(&self, mut n: Vec<f64>) -> Vec<f64> {
        if self.keep < 1.0 {
            for b in self.basis {
                let p = (1.0 - self.keep) * crate::numerics::dot(&n, b);
                n.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        n
    }
}

fn synth_bank(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    protos: &[Vec<f64>],
    shape: &NoiseShape,
    per_class: usize,
    tag: &str,
) -> Result<FeatureBank> {
    let d = cfg.input_dim;
    let scale = cfg.sigma_x * cfg.feature_scale / (d as f64).sqrt();
    let n = protos.len() * per_class;
    let mut data = Vec::with_capacity(n * cfg.views * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % protos.len();
        let noise = shape.apply(gauss(rng, d, scale));
        let base: Vec<f64> = protos[y].iter().zip(noise).map(|(c, e)| c + e).collect();
        data.extend(base.iter().copied().map(f32_round));
        for _ in 1..cfg.views {
            let jitter = shape.apply(gauss(rng, d, 0.5 * scale));
            data.extend(base.iter().zip(jitter).map(|(b, e)| f32_round(b + e)));
        }
        labels.push(y);
    }
    FeatureBank::new(n, cfg.views, d, data, Some(labels), tag)
}

struct Draw {
    data: SynthData,
}

fn draw_once(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Draw> {
    let (k, d_o, d) = (cfg.classes, cfg.input_dim, cfg.embed_dim);
    let inv = 1.0 / ((d_o as f64).sqrt() * cfg.feature_scale);
    let w_star = Mat::new(d_o, d, gauss(rng, d_o * d, inv))?;

    // prototypes of norm `feature_scale` inside the column space of W*
    let mut protos = Vec::with_capacity(k);
    for _ in 0..k {
        let g = gauss(rng, d, 1.0);
        let mut c: Vec<f64> = (0..d_o)
            .map(|r| w_star.row(r).iter().zip(&g).map(|(a, b)| a * b).sum())
            .collect();
        let n = norm(&c);
        if n > 0.0 {
            c.iter_mut().for_each(|x| *x *= cfg.feature_scale / n);
        }
        protos.push(c);
    }

    // text rows t_k = normalize(W*ᵀ c_k + σ_t ‖W*ᵀ c_k‖ e_k); the same
    // vector is W_t0ᵀ y_k with y_k = [c_k ; σ_t ‖W*ᵀ c_k‖ e_k], W_t0 = [W* ; I]
    let mut text_pre = Vec::with_capacity(k * (d_o + d));
    let mut raw_rows = Vec::with_capacity(k * d);
    for c in &protos {
        let clean = w_star.tmatvec(c)?;
        let s = norm(&clean) * cfg.sigma_t / (d as f64).sqrt();
        let e = gauss(rng, d, s);
        text_pre.extend(c.iter().copied());
        text_pre.extend(e.iter().copied());
        raw_rows.extend(clean.iter().zip(&e).map(|(a, b)| a + b));
    }
    let text_pre = rounded(k, d_o + d, text_pre);
    let mut wt0 = w_star.as_slice().to_vec();
    wt0.extend(Mat::identity(d).into_vec());
    let wt0 = rounded(d_o + d, d, wt0);
    let names: Vec<String> = (0..k).map(|i| format!("class_{i:02}")).collect();
    let mut cls_rows = Vec::with_capacity(k * d);
    for row in Mat::new(k, d, raw_rows)?.iter_rows() {
        let n = norm(row);
        if n < crate::numerics::NORM_FLOOR {
            return Err(Error::Generation {
                attempts: 1,
                hint: "degenerate class row".into(),
            });
        }
        cls_rows.extend(row.iter().map(|x| x / n));
    }
    let cls = TextClassifier::new(rounded(k, d, cls_rows), names)?;

    let drift = gauss(rng, d_o * d, cfg.sigma_w * inv);
    let w0 = rounded(
        d_o,
        d,
        w_star.as_slice().iter().zip(drift).map(|(a, b)| a + b).collect(),
    );
    let head0 = ProjectionHead::pretrained(w0, None, DEFAULT_TEMP)?;
    let text_head0 = ProjectionHead::pretrained(wt0, None, DEFAULT_TEMP)?;

    let basis = column_basis(&w_star);
    let shape = NoiseShape { basis: &basis, keep: cfg.signal_noise };
    let train = synth_bank(rng, cfg, &protos, &shape, cfg.shots, "train")?;
    let val = synth_bank(rng, cfg, &protos, &shape, cfg.shots, "val")?;
    let test = synth_bank(rng, cfg, &protos, &shape, cfg.test_per_class, "test")?;
    let preds = predict(&class_logits(&head0, &cls, &test, 0)?)?;
    let zero_shot_accuracy = accuracy(&preds, test.require_labels()?)?;
    Ok(Draw {
        data: SynthData {
            train,
            val,
            test,
            cls,
            head0,
            text_pre,
            text_head0,
            zero_shot_accuracy,
            draws: 1,
        },
    })
}

/// Deterministic in `cfg`. Redraws the whole scenario until zero-shot test
/// accuracy lands in the configured window.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut last = f64::NAN;
    for attempt in 1..=SYNTH_MAX_DRAWS {
        let Draw { mut data } = match draw_once(&mut rng, cfg) {
            Ok(d) => d,
            Err(Error::Generation { .. }) => continue,
            Err(e) => return Err(e),
        };
        last = data.zero_shot_accuracy;
        let ok = cfg
            .zero_shot_window
            .is_none_or(|(lo, hi)| (lo..=hi).contains(&data.zero_shot_accuracy));
        if ok {
            data.draws = attempt;
            return Ok(data);
        }
    }
    Err(Error::Generation {
        attempts: SYNTH_MAX_DRAWS,
        hint: format!(
            "zero-shot accuracy of the last draw was {last:.3}; adjust sigma_w or sigma_x, or widen the window"
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_bank, random_classifier, random_head, rng};
    use proptest::prelude::*;

    #[test]
    fn fbank_round_trip_is_byte_identical() {
        let mut r = rng(1);
        let bank = random_bank(&mut r, 7, 3, 5, 4);
        let a = encode_fbank(&bank).unwrap();
        let back = decode_fbank(&a, "x").unwrap();
        assert_eq!(encode_fbank(&back).unwrap(), a);
        assert_eq!(back.labels(), bank.labels());
        assert_eq!(a.len(), 24 + 7 * 4 + 7 * 3 * 5 * 4);
        let unlabeled = bank.with_labels(None).unwrap();
        let b = encode_fbank(&unlabeled).unwrap();
        assert_eq!(b.len(), 24 + 7 * 3 * 5 * 4);
        assert_eq!(decode_fbank(&b, "x").unwrap().labels(), None);
    }

    #[test]
    fn fbank_layout_is_sample_then_view_then_dim() {
        let data: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64).collect();
        let bank = FeatureBank::new(2, 2, 3, data, Some(vec![1, 0]), "t").unwrap();
        let bytes = encode_fbank(&bank).unwrap();
        assert_eq!(&bytes[..8], b"PLIPFB1\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1);
        // sample 1, view 0, dim 2 is value 8
        let off = 32 + 8 * 4;
        assert_eq!(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 8.0);
    }

    fn format_code(e: Error) -> u8 {
        match e {
            Error::Format(f) => f.code(),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn fbank_corruption_yields_typed_errors() {
        let mut r = rng(2);
        let bytes = encode_fbank(&random_bank(&mut r, 3, 1, 4, 2)).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(format_code(decode_fbank(&bad, "").unwrap_err()), 1);
        assert_eq!(format_code(decode_fbank(&bytes[..bytes.len() - 1], "").unwrap_err()), 2);
        assert_eq!(format_code(decode_fbank(&bytes[..10], "").unwrap_err()), 2);
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert_eq!(format_code(decode_fbank(&long, "").unwrap_err()), 3);
        let mut zero_dim = bytes.clone();
        zero_dim[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(format_code(decode_fbank(&zero_dim, "").unwrap_err()), 4);
        assert_eq!(format_code(decode_fbank(&encode_tcls(&random_classifier(&mut r, 2, 2)).unwrap(), "").unwrap_err()), 1);
    }

    #[test]
    fn tcls_round_trip_and_checks() {
        let mut r = rng(3);
        let cls = TextClassifier::from_unnormalized(
            crate::testutil::random_mat(&mut r, 3, 4, 1.0),
            vec!["cat".into(), "sea otter".into(), "crème brûlée".into()],
        )
        .unwrap();
        let a = encode_tcls(&cls).unwrap();
        let back = decode_tcls(&a).unwrap();
        assert_eq!(back.class_names(), cls.class_names());
        assert_eq!(encode_tcls(&back).unwrap(), a);
        assert_eq!(format_code(decode_tcls(&a[..a.len() - 2]).unwrap_err()), 2);
        let mut extra = a.clone();
        extra.push(0);
        assert_eq!(format_code(decode_tcls(&extra).unwrap_err()), 3);

        // a row scaled off the unit sphere is rejected rather than renormalized
        let mut scaled = a.clone();
        let off = a.len() - 4;
        let v = f32::from_le_bytes(scaled[off..].try_into().unwrap());
        scaled[off..].copy_from_slice(&(v + 0.5).to_le_bytes());
        assert!(matches!(decode_tcls(&scaled), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn proj_round_trip_with_and_without_bias() {
        let mut r = rng(4);
        for bias in [false, true] {
            let head = crate::testutil::drifted_head(&mut r, 6, 3, bias);
            for m in MethodTag::ALL {
                let a = encode_proj(&head, m).unwrap();
                let (back, tag) = decode_proj(&a).unwrap();
                assert_eq!(tag, m);
                assert_eq!(back.bias().is_some(), bias);
                assert_eq!(encode_proj(&back, tag).unwrap(), a);
                assert_eq!(a.len(), 8 + 16 + 4 + 2 * 18 * 4 + if bias { 12 } else { 0 });
            }
        }
        let head = random_head(&mut r, 2, 2, false);
        let mut a = encode_proj(&head, MethodTag::Prolip).unwrap();
        a[20..24].copy_from_slice(&42u32.to_le_bytes());
        assert_eq!(format_code(decode_proj(&a).unwrap_err()), 4);
        let mut a = encode_proj(&head, MethodTag::Prolip).unwrap();
        a[24..28].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(format_code(decode_proj(&a).unwrap_err()), 4);
    }

    #[test]
    fn files_and_manifests_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng(5);
        let bank = random_bank(&mut r, 4, 2, 3, 2);
        let p = dir.path().join("train.fbank");
        write_fbank(&bank, &p).unwrap();
        let back = read_fbank(&p).unwrap();
        assert_eq!(back.split_tag(), "train");
        let m = Manifest {
            dataset: "synthetic".into(),
            split: "train".into(),
            seed: Some(3),
            ..Default::default()
        };
        write_manifest(&p, &m).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), m);
        assert!(manifest_path(&p).ends_with("train.fbank.json"));
        let missing = read_fbank(&dir.path().join("nope.fbank")).unwrap_err();
        assert_eq!(format_code(missing), 5);
    }

    #[test]
    fn few_shot_sampling() {
        let labels = vec![0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let data: Vec<f64> = (0..10 * 2).map(|i| i as f64).collect();
        let bank = FeatureBank::new(10, 2, 1, data, Some(labels.clone()), "t").unwrap();
        let s = sample_few_shot(&bank, 3, 7).unwrap();
        let mut counts = [0; 3];
        for &y in s.labels().unwrap() {
            counts[y] += 1;
        }
        assert_eq!(counts, [3, 3, 3]);
        // view blocks stay attached to their sample
        for i in 0..s.len() {
            assert_eq!(s.feature(i, 1)[0], s.feature(i, 0)[0] + 1.0);
        }
        assert_eq!(few_shot_indices(&labels, 3, 7).unwrap(), few_shot_indices(&labels, 3, 7).unwrap());
        // full population of class 1
        let mut ones: Vec<usize> = few_shot_indices(&labels, 3, 1).unwrap()[3..6].to_vec();
        ones.sort();
        assert_eq!(ones, vec![1, 4, 7]);
        assert!(matches!(
            sample_few_shot(&bank, 4, 0),
            Err(Error::InsufficientClass { class: 1, needed: 4, available: 3 })
        ));
    }

    #[test]
    fn base_new_split_remaps_labels() {
        let mut r = rng(6);
        let cls = random_classifier(&mut r, 10, 4);
        let bank = random_bank(&mut r, 40, 1, 5, 10);
        let (base, new) = split_base_new(&cls, &bank).unwrap();
        assert_eq!(base.class_ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(new.class_ids, vec![5, 6, 7, 8, 9]);
        assert_eq!(base.bank.len() + new.bank.len(), 40);
        let orig = bank.labels().unwrap();
        let mut seen = Vec::new();
        for side in [&base, &new] {
            for (i, &y) in side.bank.labels().unwrap().iter().enumerate() {
                let global = side.class_ids[y];
                assert_eq!(side.cls.class_names()[y], cls.class_names()[global]);
                let src = (0..40)
                    .find(|&j| bank.feature(j, 0) == side.bank.feature(i, 0))
                    .unwrap();
                assert_eq!(orig[src], global);
                seen.push(src);
            }
        }
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        let two = random_classifier(&mut r, 2, 3);
        let (b, n) = split_base_new(&two, &random_bank(&mut r, 6, 1, 2, 2)).unwrap();
        assert_eq!((b.cls.num_classes(), n.cls.num_classes()), (1, 1));
    }

    #[test]
    fn synth_is_deterministic_and_in_window() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(encode_fbank(&a.test).unwrap(), encode_fbank(&b.test).unwrap());
        assert_eq!(encode_proj(&a.head0, MethodTag::Prolip).unwrap(), encode_proj(&b.head0, MethodTag::Prolip).unwrap());
        assert!((0.3..=0.9).contains(&a.zero_shot_accuracy));
        assert_eq!(a.train.len(), cfg.classes * cfg.shots);
        assert_eq!(a.test.len(), cfg.classes * cfg.test_per_class);
        assert_eq!(a.train.views(), cfg.views);
    }

    #[test]
    fn synth_noiseless_limit_is_perfect() {
        let cfg = SynthConfig {
            sigma_x: 0.0,
            sigma_t: 0.0,
            sigma_w: 0.0,
            zero_shot_window: None,
            ..Default::default()
        };
        let d = synth_generate(&cfg).unwrap();
        assert_eq!(d.zero_shot_accuracy, 1.0);
    }

    #[test]
    fn synth_text_head_reproduces_classifier() {
        let d = synth_generate(&SynthConfig::default()).unwrap();
        for (k, y) in d.text_pre.iter_rows().enumerate() {
            let t = crate::model::project(&d.text_head0, y).unwrap();
            for (a, b) in t.iter().zip(d.cls.rows().row(k)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_configs() {
        let wide = SynthConfig { embed_dim: 40, ..Default::default() };
        assert!(matches!(synth_generate(&wide), Err(Error::InvalidInput(_))));
        let impossible = SynthConfig { zero_shot_window: Some((1.0, 1.0)), sigma_w: 5.0, ..Default::default() };
        assert!(matches!(synth_generate(&impossible), Err(Error::Generation { attempts: 100, .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_bank_round_trips(n in 0usize..6, v in 1usize..4, d in 1usize..5, seed in any::<u64>(), labeled in any::<bool>()) {
            let mut r = rng(seed);
            let bank = random_bank(&mut r, n, v, d, 3);
            let bank = if labeled { bank } else { bank.with_labels(None).unwrap() };
            let a = encode_fbank(&bank).unwrap();
            prop_assert_eq!(encode_fbank(&decode_fbank(&a, "").unwrap()).unwrap(), a);
        }
    }
}
