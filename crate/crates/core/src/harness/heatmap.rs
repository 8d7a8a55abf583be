//! Similarity matrices behind query-vs-image heatmaps, as tab-separated text.
//!
//! Row 0 is the original query; rows 1.. are the enhanced texts. The first
//! two columns are the row index and the text, then one column per image.

use super::HarnessError;
use crate::embedding::{EmbeddingProvider, EmbeddingStore, SimilarityMatrix};
use crate::enhancer::EnhancedQuery;
use crate::retrieval::{similarity, TextVectors};
use crate::types::QueryRecord;
use std::fmt::Write as _;
use std::path::Path;

/// The original query followed by every pooled text that differs from it.
pub fn heatmap_rows(query: &QueryRecord, enhanced: &EnhancedQuery) -> Vec<String> {
    let mut rows = vec![query.text.clone()];
    rows.extend(enhanced.pooled.iter().filter(|t| **t != query.text).cloned());
    rows
}

pub fn export_heatmap(
    query: &QueryRecord,
    enhanced: &EnhancedQuery,
    image_ids: &[String],
    encoder: &dyn EmbeddingProvider,
    images: &EmbeddingStore,
) -> Result<SimilarityMatrix, HarnessError> {
    let rows = heatmap_rows(query, enhanced);
    let vectors = TextVectors::embed(encoder, rows.iter().map(String::as_str))?;
    Ok(similarity(&rows, &vectors, image_ids, images)?)
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

pub fn render_heatmap(m: &SimilarityMatrix) -> String {
    let mut out = String::from("index\ttext");
    for c in m.cols() {
        write!(out, "\t{}", clean(c)).unwrap();
    }
    out.push('\n');
    for (r, text) in m.rows().iter().enumerate() {
        write!(out, "{r}\t{}", clean(text)).unwrap();
        for v in m.row(r) {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_heatmap(path: &Path, m: &SimilarityMatrix) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    std::fs::write(path, render_heatmap(m)).map_err(|e| HarnessError::io(path, e))
}
