//! Sparse term-frequency features over a fixed phrase vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::par;

/// Lowercase and collapse runs of whitespace to single spaces.
pub fn normalize_phrase(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Lowercase tokens, splitting on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    phrases: Vec<String>,
    index: HashMap<String, usize>,
    by_tokens: HashMap<Vec<String>, usize>,
    max_len: usize,
}

impl Vocabulary {
    pub fn new<I, S>(phrases: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vocabulary {
            phrases: Vec::new(),
            index: HashMap::new(),
            by_tokens: HashMap::new(),
            max_len: 0,
        };
        for p in phrases {
            let norm = normalize_phrase(p.as_ref());
            let toks = tokenize(&norm);
            if toks.is_empty() || out.index.contains_key(&norm) || out.by_tokens.contains_key(&toks) {
                continue;
            }
            let t = out.phrases.len();
            out.max_len = out.max_len.max(toks.len());
            out.index.insert(norm.clone(), t);
            out.by_tokens.insert(toks, t);
            out.phrases.push(norm);
        }
        if out.phrases.is_empty() {
            return Err(Error::Empty("vocabulary has no phrases".into()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    /// Index of a phrase after normalization.
    pub fn get(&self, phrase: &str) -> Option<usize> {
        self.index.get(&normalize_phrase(phrase)).copied()
    }

    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in &self.phrases {
            h.update(p.as_bytes());
            h.update(b"\n");
        }
        h.finalize().into()
    }

    /// Greedy longest-match phrase counts; matched tokens are consumed.
    /// Returns (sorted phrase indices, counts, total token count).
    pub fn match_counts(&self, text: &str) -> (Vec<(usize, u32)>, usize) {
        let toks = tokenize(text);
        let mut counts: HashMap<usize, u32> = HashMap::new();
        let mut pos = 0;
        while pos < toks.len() {
            let longest = self.max_len.min(toks.len() - pos);
            let hit = (1..=longest)
                .rev()
                .find_map(|len| self.by_tokens.get(&toks[pos..pos + len]).map(|&t| (t, len)));
            match hit {
                Some((t, len)) => {
                    *counts.entry(t).or_default() += 1;
                    pos += len;
                }
                None => pos += 1,
            }
        }
        let mut counts: Vec<_> = counts.into_iter().collect();
        counts.sort_unstable();
        (counts, toks.len())
    }
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    Vocabulary::new(text.lines())
}

/// One sparse row with strictly increasing column indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseRow {
    pub fn dot(&self, dense: &[f64]) -> f64 {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&t, &x)| x * dense[t])
            .sum()
    }

    pub fn get(&self, t: usize) -> f64 {
        self.indices
            .binary_search(&t)
            .map(|p| self.values[p])
            .unwrap_or(0.0)
    }

    /// Sum of two rows (used for combining documents).
    pub fn add(&self, other: &SparseRow) -> SparseRow {
        let mut merged: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for (&t, &x) in self.indices.iter().zip(&self.values).chain(other.indices.iter().zip(&other.values)) {
            *merged.entry(t).or_default() += x;
        }
        SparseRow {
            indices: merged.keys().copied().collect(),
            values: merged.values().copied().collect(),
        }
    }
}

/// Term frequencies: phrase match count divided by document token count.
pub fn vectorize(text: &str, vocab: &Vocabulary) -> SparseRow {
    let (counts, n_tokens) = vocab.match_counts(text);
    if n_tokens == 0 {
        return SparseRow::default();
    }
    let total = n_tokens as f64;
    SparseRow {
        indices: counts.iter().map(|&(t, _)| t).collect(),
        values: counts.iter().map(|&(_, c)| c as f64 / total).collect(),
    }
}

/// Column scaling applied implicitly to the centered design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scaling {
    /// Divide by n × (population) variance.
    #[default]
    NVariance,
    /// Divide by the standard deviation.
    StdDev,
    /// Center only.
    None,
}

/// One corpus record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub coordinates: Vec<[f64; 3]>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<Document>> {
    let f = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line)
            .map_err(|e| Error::Malformed(format!("corpus line {}: {e}", lineno + 1)))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_corpus(docs: &[Document], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Sparse n×d term-frequency matrix (CSR) with lazy standardization.
///
/// The standardized centered design is `(X[i,t] - mean[t]) / scale[t]`, with
/// zero-variance columns identically 0. It is never materialized.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    zero_var: Vec<bool>,
    scaling: Scaling,
    pub ids: Vec<String>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[SparseRow], d: usize, ids: Vec<String>, scaling: Scaling) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no documents to assemble".into()));
        }
        if ids.len() != rows.len() {
            return Err(Error::ShapeMismatch("one id per row required".into()));
        }
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for r in rows {
            for (&t, &x) in r.indices.iter().zip(&r.values) {
                if t >= d {
                    return Err(invalid("features", format!("column {t} out of range for d = {d}")));
                }
                if x < 0.0 || !x.is_finite() {
                    return Err(invalid("features", "term frequencies must be finite and nonnegative"));
                }
                if x != 0.0 {
                    indices.push(t);
                    data.push(x);
                }
            }
            indptr.push(indices.len());
        }
        let mut fm = FeatureMatrix {
            n: rows.len(),
            d,
            indptr,
            indices,
            data,
            mean: vec![0.0; d],
            scale: vec![1.0; d],
            zero_var: vec![false; d],
            scaling,
            ids,
        };
        fm.compute_statistics();
        Ok(fm)
    }

    fn compute_statistics(&mut self) {
        let n = self.n as f64;
        let mut sum = vec![0.0; self.d];
        let mut nnz = vec![0usize; self.d];
        for (&t, &x) in self.indices.iter().zip(&self.data) {
            sum[t] += x;
            nnz[t] += 1;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut ss = vec![0.0; self.d];
        let mut sq = vec![0.0; self.d];
        for (&t, &x) in self.indices.iter().zip(&self.data) {
            ss[t] += (x - mean[t]).powi(2);
            sq[t] += x * x;
        }
        for t in 0..self.d {
            ss[t] += (self.n - nnz[t]) as f64 * mean[t] * mean[t];
            let zero = sq[t] == 0.0 || ss[t] <= 1e-12 * sq[t];
            self.zero_var[t] = zero;
            self.scale[t] = if zero {
                1.0
            } else {
                match self.scaling {
                    Scaling::NVariance => ss[t],
                    Scaling::StdDev => (ss[t] / n).sqrt(),
                    Scaling::None => 1.0,
                }
            };
        }
        self.mean = mean;
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    /// Number of stored values; equals `nnz` since only nonzeros are kept.
    pub fn stored_len(&self) -> usize {
        self.data.len().max(self.indices.len())
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn zero_variance(&self) -> &[bool] {
        &self.zero_var
    }

    pub fn scaling(&self) -> Scaling {
        self.scaling
    }

    pub fn row(&self, i: usize) -> SparseRow {
        let r = self.indptr[i]..self.indptr[i + 1];
        SparseRow {
            indices: self.indices[r.clone()].to_vec(),
            values: self.data[r].to_vec(),
        }
    }

    pub fn rows(&self) -> Vec<SparseRow> {
        (0..self.n).map(|i| self.row(i)).collect()
    }

    #[inline]
    fn row_slices(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.data[r])
    }

    /// Submatrix of the given rows, with statistics recomputed on that subset.
    pub fn select_rows(&self, rows: &[usize]) -> Result<FeatureMatrix> {
        let sub: Vec<SparseRow> = rows.iter().map(|&i| self.row(i)).collect();
        let ids = rows.iter().map(|&i| self.ids[i].clone()).collect();
        FeatureMatrix::from_rows(&sub, self.d, ids, self.scaling)
    }

    /// Same rows, different scaling convention.
    pub fn with_scaling(&self, scaling: Scaling) -> FeatureMatrix {
        let mut fm = self.clone();
        fm.scaling = scaling;
        fm.compute_statistics();
        fm
    }

    /// Standardized mean `x̄ / s`, zero on flagged columns.
    pub fn scaled_mean(&self) -> Vec<f64> {
        (0..self.d)
            .map(|t| if self.zero_var[t] { 0.0 } else { self.mean[t] / self.scale[t] })
            .collect()
    }

    /// `X_cᵀ u` for the standardized centered design.
    pub fn centered_t_mul(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        self.centered_t_mul_into(u, &self.scaled_mean(), &mut out);
        out
    }

    /// `X_cᵀ u` into `out`, given the precomputed standardized mean.
    pub fn centered_t_mul_into(&self, u: &[f64], scaled_mean: &[f64], out: &mut [f64]) {
        debug_assert_eq!(u.len(), self.n);
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut total = 0.0;
        for (i, &ui) in u.iter().enumerate() {
            total += ui;
            if ui == 0.0 {
                continue;
            }
            let (idx, val) = self.row_slices(i);
            for (&t, &x) in idx.iter().zip(val) {
                out[t] += x * ui;
            }
        }
        for t in 0..self.d {
            out[t] = if self.zero_var[t] {
                0.0
            } else {
                out[t] / self.scale[t] - scaled_mean[t] * total
            };
        }
    }

    /// `X_c v` for the standardized centered design.
    pub fn centered_mul(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        self.centered_mul_into(v, &mut out);
        out
    }

    pub fn centered_mul_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.d);
        let scaled: Vec<f64> = (0..self.d)
            .map(|t| if self.zero_var[t] { 0.0 } else { v[t] / self.scale[t] })
            .collect();
        let offset: f64 = scaled.iter().zip(&self.mean).map(|(a, b)| a * b).sum();
        for (i, o) in out.iter_mut().enumerate() {
            let (idx, val) = self.row_slices(i);
            let mut acc = 0.0;
            for (&t, &x) in idx.iter().zip(val) {
                acc += x * scaled[t];
            }
            *o = acc - offset;
        }
    }

    /// `X_cᵀ X_c` (d×d, row-major), assembled from sparse products.
    pub fn centered_gram(&self) -> Vec<f64> {
        let d = self.d;
        let mut g = vec![0.0; d * d];
        for i in 0..self.n {
            let (idx, val) = self.row_slices(i);
            for (a, (&s, &xs)) in idx.iter().zip(val).enumerate() {
                for (&t, &xt) in idx[a..].iter().zip(&val[a..]) {
                    g[s * d + t] += xs * xt;
                }
            }
        }
        let n = self.n as f64;
        for s in 0..d {
            for t in s..d {
                let v = if self.zero_var[s] || self.zero_var[t] {
                    0.0
                } else {
                    (g[s * d + t] - n * self.mean[s] * self.mean[t]) / (self.scale[s] * self.scale[t])
                };
                g[s * d + t] = v;
                g[t * d + s] = v;
            }
        }
        g
    }

    /// Dense standardized centered design (n×d, row-major); test oracles only.
    pub fn dense_centered(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.d];
        for i in 0..self.n {
            for t in 0..self.d {
                if !self.zero_var[t] {
                    out[i * self.d + t] = -self.mean[t] / self.scale[t];
                }
            }
            let (idx, val) = self.row_slices(i);
            for (&t, &x) in idx.iter().zip(val) {
                if !self.zero_var[t] {
                    out[i * self.d + t] = (x - self.mean[t]) / self.scale[t];
                }
            }
        }
        out
    }

    /// Raw (unstandardized) column `t` as a dense vector.
    pub fn raw_column(&self, t: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).get(t)).collect()
    }
}

/// Vectorize every document (in parallel when enabled) and assemble rows in corpus order.
pub fn assemble_features(docs: &[Document], vocab: &Vocabulary, scaling: Scaling) -> Result<FeatureMatrix> {
    if docs.is_empty() {
        return Err(Error::Empty("corpus has no documents".into()));
    }
    let rows = par::map(docs, |doc| vectorize(&doc.text, vocab));
    let ids = docs.iter().map(|d| d.id.clone()).collect();
    FeatureMatrix::from_rows(&rows, vocab.len(), ids, scaling)
}

const FEATURE_MAGIC: &[u8; 8] = b"LXFEATS1";

/// Binary CSR cache: magic, d, n, scaling tag, vocabulary hash, then per row
/// the id, nonzero count, and (u32 column, f64 value) pairs; all little-endian.
pub fn write_feature_cache(fm: &FeatureMatrix, vocab: &Vocabulary, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(fm.d as u64).to_le_bytes());
    out.extend_from_slice(&(fm.n as u64).to_le_bytes());
    out.push(match fm.scaling {
        Scaling::NVariance => 0,
        Scaling::StdDev => 1,
        Scaling::None => 2,
    });
    out.extend_from_slice(&vocab.content_hash());
    for i in 0..fm.n {
        let id = fm.ids[i].as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        let (idx, val) = fm.row_slices(i);
        out.extend_from_slice(&(idx.len() as u32).to_le_bytes());
        for (&t, &x) in idx.iter().zip(val) {
            out.extend_from_slice(&(t as u32).to_le_bytes());
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path, vocab: &Vocabulary) -> Result<FeatureMatrix> {
    let buf = std::fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    if cur.take(8)? != FEATURE_MAGIC {
        return Err(Error::Malformed("bad feature cache magic".into()));
    }
    let d = cur.u64()? as usize;
    let n = cur.u64()? as usize;
    let scaling = match cur.take(1)?[0] {
        0 => Scaling::NVariance,
        1 => Scaling::StdDev,
        2 => Scaling::None,
        t => return Err(Error::Malformed(format!("unknown scaling tag {t}"))),
    };
    if cur.take(32)? != vocab.content_hash() || d != vocab.len() {
        return Err(Error::Incompatible("feature cache was built with a different vocabulary".into()));
    }
    let mut rows = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = cur.u32()? as usize;
        let id = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Malformed("document id is not UTF-8".into()))?;
        ids.push(id.to_string());
        let k = cur.u32()? as usize;
        let mut row = SparseRow::default();
        for _ in 0..k {
            row.indices.push(cur.u32()? as usize);
            row.values.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        rows.push(row);
    }
    if cur.pos != buf.len() {
        return Err(Error::Malformed("trailing bytes in feature cache".into()));
    }
    FeatureMatrix::from_rows(&rows, d, ids, scaling)
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + k)
            .ok_or_else(|| Error::Malformed("unexpected end of file".into()))?;
        self.pos += k;
        Ok(s)
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
