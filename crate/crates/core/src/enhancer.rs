//! Query enhancement: expand a query into several batches of generated
//! sentences, each prefixed with the original query.

use crate::genclient::{parse_sentence_list, GenClient, GenError};
use crate::template::{PromptTemplate, TemplateError};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;
use thiserror::Error;

/// Joins the original query and one generated sentence.
pub const SEPARATOR: &str = ". ";
pub const DEFAULT_BATCHES: usize = 3;
pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum EnhanceError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("batch count must be at least 1")]
    NoBatches,
    #[error("every batch came back without usable sentences")]
    AllBatchesEmpty,
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancedQuery {
    pub original: String,
    /// Enhanced texts per surviving batch, in batch-tag order.
    pub batches: Vec<Vec<String>>,
    /// All enhanced texts, exact duplicates removed, first occurrence kept.
    pub pooled: Vec<String>,
}

impl EnhancedQuery {
    pub fn from_batches(original: impl Into<String>, batches: Vec<Vec<String>>) -> Self {
        let mut seen = HashSet::new();
        let pooled = batches.iter().flatten().filter(|t| seen.insert(t.as_str())).cloned().collect();
        EnhancedQuery { original: original.into(), batches, pooled }
    }

    pub fn sentence_count(&self) -> usize {
        self.batches.iter().map(Vec::len).sum()
    }
}

/// The unenhanced arm: one batch holding only the query.
pub fn passthrough(query: &str) -> EnhancedQuery {
    EnhancedQuery::from_batches(query, vec![vec![query.to_string()]])
}

pub fn enhanced_text(query: &str, sentence: &str) -> String {
    format!("{query}{SEPARATOR}{sentence}")
}

pub trait QueryEnhancer: Send + Sync {
    fn enhance(&self, query: &str) -> Result<EnhancedQuery, EnhanceError>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl QueryEnhancer for Passthrough {
    fn enhance(&self, query: &str) -> Result<EnhancedQuery, EnhanceError> {
        if query.trim().is_empty() {
            return Err(EnhanceError::EmptyQuery);
        }
        Ok(passthrough(query))
    }
}

/// Generation-backed enhancer.
///
/// Batch `b` (1-based) is requested with `batch_tag = b`. A batch that parses
/// to nothing is retried with tag `b + attempt * batches`, so every retry is
/// its own cache entry, up to `retries` times before the batch is dropped.
pub struct LlmEnhancer {
    client: Arc<GenClient>,
    template: PromptTemplate,
    model: String,
    batches: usize,
    retries: u32,
}

impl LlmEnhancer {
    pub fn new(client: Arc<GenClient>, template: PromptTemplate, model: impl Into<String>) -> Result<Self, EnhanceError> {
        template.require_once("query")?;
        Ok(LlmEnhancer { client, template, model: model.into(), batches: DEFAULT_BATCHES, retries: DEFAULT_RETRIES })
    }

    pub fn with_batches(mut self, batches: usize) -> Self {
        self.batches = batches;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn template(&self) -> &PromptTemplate {
        &self.template
    }

    fn run_batch(&self, query: &str, prompt: &str, batch: usize) -> Result<Option<Vec<String>>, EnhanceError> {
        for attempt in 0..=self.retries as usize {
            let tag = batch + attempt * self.batches;
            let request = self.template.request(&self.model, prompt.to_string(), tag as u32);
            let raw = self.client.generate(&request)?;
            match parse_sentence_list(&raw, self.template.n) {
                Ok(sentences) => return Ok(Some(sentences.iter().map(|s| enhanced_text(query, s)).collect())),
                Err(GenError::EmptyGeneration) => {
                    tracing::debug!(batch, attempt, "empty generation, retrying");
                }
                Err(e) => return Err(e.into()),
            }
        }
        tracing::warn!(batch, query, "dropping batch after retries");
        Ok(None)
    }
}

impl QueryEnhancer for LlmEnhancer {
    fn enhance(&self, query: &str) -> Result<EnhancedQuery, EnhanceError> {
        if query.trim().is_empty() {
            return Err(EnhanceError::EmptyQuery);
        }
        if self.batches == 0 {
            return Err(EnhanceError::NoBatches);
        }
        let prompt = self.template.render(&[("query", query)]);
        let results: Vec<Result<Option<Vec<String>>, EnhanceError>> = std::thread::scope(|s| {
            let handles: Vec<_> = (1..=self.batches)
                .map(|b| {
                    let prompt = &prompt;
                    s.spawn(move || self.run_batch(query, prompt, b))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("batch thread panicked")).collect()
        });
        let mut batches = Vec::new();
        for r in results {
            if let Some(batch) = r? {
                batches.push(batch);
            }
        }
        if batches.is_empty() {
            return Err(EnhanceError::AllBatchesEmpty);
        }
        Ok(EnhancedQuery::from_batches(query, batches))
    }
}
