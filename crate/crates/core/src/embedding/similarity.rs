//! Cosine similarity matrices and per-row top-k selection.

use super::{EmbeddingError, EmbeddingVector};
use rayon::prelude::*;
use std::cmp::Ordering;
use std::collections::HashSet;

/// Slack allowed outside `[-1, 1]` when validating externally supplied values.
pub const RANGE_SLACK: f32 = 1e-6;

/// Rows below this many cells are computed on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 14;

/// Sequential dot product. The accumulation order is fixed so scores are
/// bit-reproducible regardless of how rows are scheduled.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Similarity of two embedding vectors, clamped to `[-1, 1]`.
#[inline]
pub fn vector_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> f32 {
    let d = dot(a.values(), b.values());
    let s = if a.is_normalized() && b.is_normalized() { d } else { d / (a.norm() * b.norm()) };
    s.clamp(-1.0, 1.0)
}

/// Cosine of two raw slices.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Texts × images similarity scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<f32>,
}

/// Descending score, then ascending id. `-0.0` and `0.0` compare equal.
#[inline]
pub fn rank_order(a_score: f32, a_id: &str, b_score: f32, b_id: &str) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or_else(|| b_score.total_cmp(&a_score))
        .then_with(|| a_id.cmp(b_id))
}

impl SimilarityMatrix {
    /// Wraps precomputed values. Column ids must be unique and every value
    /// finite and within `[-1 - 1e-6, 1 + 1e-6]`.
    pub fn from_values(rows: Vec<String>, cols: Vec<String>, values: Vec<f32>) -> Result<Self, EmbeddingError> {
        if values.len() != rows.len() * cols.len() {
            return Err(EmbeddingError::Config(format!(
                "{} values for a {}x{} matrix",
                values.len(),
                rows.len(),
                cols.len()
            )));
        }
        let mut seen = HashSet::with_capacity(cols.len());
        if let Some(dup) = cols.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(EmbeddingError::Config(format!("duplicate column id `{dup}`")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0 + RANGE_SLACK) {
            return Err(EmbeddingError::InvalidVector(format!("similarity {v} outside [-1, 1]")));
        }
        Ok(SimilarityMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let n = self.cols.len();
        &self.values[r * n..(r + 1) * n]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols.len() + c]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Column indices of the `k` best entries of row `r`, best first.
    ///
    /// Uses partial selection; the result is identical to the first `k`
    /// entries of a full sort under [`rank_order`].
    pub fn top_k_row(&self, r: usize, k: usize) -> Vec<usize> {
        let row = self.row(r);
        let cmp = |&a: &usize, &b: &usize| rank_order(row[a], &self.cols[a], row[b], &self.cols[b]);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        let k = k.min(idx.len());
        if k == 0 {
            return Vec::new();
        }
        if k < idx.len() {
            idx.select_nth_unstable_by(k - 1, cmp);
            idx.truncate(k);
        }
        idx.sort_unstable_by(cmp);
        idx
    }

    pub fn top_k_per_row(&self, k: usize) -> Result<Vec<Vec<usize>>, EmbeddingError> {
        if k == 0 {
            return Err(EmbeddingError::Config("top-k requires k >= 1".into()));
        }
        Ok((0..self.n_rows()).map(|r| self.top_k_row(r, k)).collect())
    }
}

/// Pairwise similarity of every text vector against every image vector.
pub fn cosine_similarity(
    row_keys: Vec<String>,
    texts: &[&EmbeddingVector],
    col_ids: Vec<String>,
    images: &[&EmbeddingVector],
) -> Result<SimilarityMatrix, EmbeddingError> {
    if row_keys.len() != texts.len() || col_ids.len() != images.len() {
        return Err(EmbeddingError::Config("key lists do not match vector lists".into()));
    }
    if let (Some(t), Some(i)) = (texts.first(), images.first()) {
        let dim = i.dim();
        if let Some(bad) = texts.iter().chain(images).find(|v| v.dim() != dim) {
            return Err(EmbeddingError::DimensionMismatch { expected: dim, got: bad.dim() });
        }
        debug_assert_eq!(t.dim(), dim);
    }
    let n = images.len();
    let mut values = vec![0.0f32; texts.len() * n];
    let fill = |(r, out): (usize, &mut [f32])| {
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = vector_similarity(texts[r], images[c]);
        }
    };
    if n > 0 {
        if values.len() >= PARALLEL_THRESHOLD {
            values.par_chunks_mut(n).enumerate().for_each(fill);
        } else {
            values.chunks_mut(n).enumerate().for_each(fill);
        }
    }
    SimilarityMatrix::from_values(row_keys, col_ids, values)
}
