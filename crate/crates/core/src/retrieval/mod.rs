//! Two-stage retrieval over enhanced queries.
//!
//! Stage 1 keeps the top `k1` images of every enhanced sentence, batch by
//! batch, and unions them into a candidate set. Stage 2 rescores the
//! candidates against the pooled sentences; each sentence votes for its top
//! `min(k_final, m)` candidates and images are ranked by
//! `(votes desc, max_sim desc, mean_sim desc, id asc)`.

pub mod oracle;

pub use oracle::brute_force_topk;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingProvider, EmbeddingStore, EmbeddingVector, SimilarityMatrix};
use crate::enhancer::{EnhanceError, EnhancedQuery, QueryEnhancer};
use crate::types::{QueryRecord, RankedImage, RetrievalMode, RetrievalResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("invalid retrieval config: {0}")]
    Config(String),
    #[error("image pool is empty")]
    EmptyPool,
    #[error("enhanced query has no sentences")]
    EmptyEnhancement,
    #[error("candidate set is empty")]
    NoCandidates,
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub n_initial: usize,
    pub k1: usize,
    pub k_final: usize,
    pub mode: RetrievalMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { n_initial: 1000, k1: 15, k_final: 10, mode: RetrievalMode::EnhancedVote }
    }
}

impl RetrievalConfig {
    pub fn with_mode(mut self, mode: RetrievalMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        if self.k1 == 0 || self.k1 > self.n_initial {
            return Err(RetrievalError::Config(format!("k1 = {} must be in 1..={}", self.k1, self.n_initial)));
        }
        if self.k_final == 0 {
            return Err(RetrievalError::Config("k_final must be at least 1".into()));
        }
        Ok(())
    }
}

/// Which sentence picked an image in stage 1. Both indices are 0-based:
/// `batch` indexes `EnhancedQuery::batches`, `sentence` the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Selection {
    pub batch: usize,
    pub sentence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Unique ids in first-selected order.
    ids: Vec<String>,
    provenance: BTreeMap<String, BTreeSet<Selection>>,
}

impl CandidateSet {
    fn add(&mut self, id: &str, by: Selection) {
        match self.provenance.get_mut(id) {
            Some(s) => {
                s.insert(by);
            }
            None => {
                self.ids.push(id.to_string());
                self.provenance.insert(id.to_string(), BTreeSet::from([by]));
            }
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.provenance.contains_key(id)
    }

    pub fn provenance(&self, id: &str) -> Option<&BTreeSet<Selection>> {
        self.provenance.get(id)
    }
}

/// Text vectors keyed by exact string.
#[derive(Debug, Clone, Default)]
pub struct TextVectors(HashMap<String, EmbeddingVector>);

impl TextVectors {
    /// Embeds each distinct text once.
    pub fn embed<'a>(provider: &dyn EmbeddingProvider, texts: impl IntoIterator<Item = &'a str>) -> Result<Self, EmbeddingError> {
        let mut seen = BTreeSet::new();
        let unique: Vec<String> = texts.into_iter().filter(|t| seen.insert(*t)).map(str::to_string).collect();
        let vectors = provider.embed_texts(&unique)?;
        if vectors.len() != unique.len() {
            return Err(EmbeddingError::Config(format!("{} vectors for {} texts", vectors.len(), unique.len())));
        }
        Ok(TextVectors(unique.into_iter().zip(vectors).collect()))
    }

    pub fn insert(&mut self, text: impl Into<String>, v: EmbeddingVector) {
        self.0.insert(text.into(), v);
    }

    pub fn lookup(&self, text: &str) -> Result<&EmbeddingVector, EmbeddingError> {
        self.0.get(text).ok_or_else(|| EmbeddingError::MissingId(text.to_string()))
    }
}

/// `texts × image_ids` cosine matrix.
pub fn similarity(texts: &[String], vectors: &TextVectors, image_ids: &[String], images: &EmbeddingStore) -> Result<SimilarityMatrix, EmbeddingError> {
    let t: Vec<&EmbeddingVector> = texts.iter().map(|s| vectors.lookup(s)).collect::<Result<_, _>>()?;
    let i: Vec<&EmbeddingVector> = image_ids.iter().map(|id| images.lookup(id)).collect::<Result<_, _>>()?;
    cosine_similarity(texts.to_vec(), &t, image_ids.to_vec(), &i)
}

pub fn stage1_filter(
    enhanced: &EnhancedQuery,
    image_ids: &[String],
    vectors: &TextVectors,
    images: &EmbeddingStore,
    config: &RetrievalConfig,
) -> Result<CandidateSet, RetrievalError> {
    if enhanced.batches.iter().all(Vec::is_empty) {
        return Err(RetrievalError::EmptyEnhancement);
    }
    if image_ids.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let tops: Vec<Vec<Vec<usize>>> = enhanced
        .batches
        .par_iter()
        .map(|batch| {
            let m = similarity(batch, vectors, image_ids, images)?;
            Ok((0..m.n_rows()).map(|r| m.top_k_row(r, config.k1)).collect())
        })
        .collect::<Result<_, RetrievalError>>()?;
    let mut set = CandidateSet::default();
    for (batch, rows) in tops.iter().enumerate() {
        for (sentence, top) in rows.iter().enumerate() {
            for &c in top {
                set.add(&image_ids[c], Selection { batch, sentence });
            }
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TallyEntry {
    pub image_id: String,
    pub votes: u32,
    pub max_sim: f32,
    pub mean_sim: f64,
}

/// Per-column votes, max and mean over all rows of `m`. Every row votes for
/// its `k` best columns.
pub fn vote_tally(m: &SimilarityMatrix, k: usize) -> Vec<TallyEntry> {
    let mut entries: Vec<TallyEntry> = m
        .cols()
        .iter()
        .enumerate()
        .map(|(c, id)| {
            let (mut max, mut sum) = (f32::NEG_INFINITY, 0.0f64);
            for r in 0..m.n_rows() {
                let v = m.get(r, c);
                max = max.max(v);
                sum += f64::from(v);
            }
            TallyEntry { image_id: id.clone(), votes: 0, max_sim: max, mean_sim: sum / m.n_rows().max(1) as f64 }
        })
        .collect();
    for r in 0..m.n_rows() {
        for c in m.top_k_row(r, k) {
            entries[c].votes += 1;
        }
    }
    entries
}

pub fn tally_order(a: &TallyEntry, b: &TallyEntry) -> Ordering {
    b.votes
        .cmp(&a.votes)
        .then_with(|| b.max_sim.partial_cmp(&a.max_sim).unwrap_or(Ordering::Equal))
        .then_with(|| b.mean_sim.partial_cmp(&a.mean_sim).unwrap_or(Ordering::Equal))
        .then_with(|| a.image_id.cmp(&b.image_id))
}

fn maxsim_order(a: &TallyEntry, b: &TallyEntry) -> Ordering {
    b.max_sim.partial_cmp(&a.max_sim).unwrap_or(Ordering::Equal).then_with(|| a.image_id.cmp(&b.image_id))
}

/// Scores the candidates against the pooled sentences and ranks them by
/// votes (`EnhancedVote`) or by best single-sentence similarity (any other
/// mode). Returns at most `k_final` entries.
pub fn stage2_rank(
    enhanced: &EnhancedQuery,
    candidates: &CandidateSet,
    vectors: &TextVectors,
    images: &EmbeddingStore,
    config: &RetrievalConfig,
) -> Result<Vec<RankedImage>, RetrievalError> {
    if candidates.is_empty() {
        return Err(RetrievalError::NoCandidates);
    }
    if enhanced.pooled.is_empty() {
        return Err(RetrievalError::EmptyEnhancement);
    }
    let m = similarity(&enhanced.pooled, vectors, candidates.ids(), images)?;
    let voting = config.mode == RetrievalMode::EnhancedVote;
    let mut tally = vote_tally(&m, config.k_final.min(candidates.len()));
    tally.sort_by(if voting { tally_order } else { maxsim_order });
    Ok(tally
        .into_iter()
        .take(config.k_final)
        .map(|t| RankedImage { image_id: t.image_id, score: t.max_sim, votes: voting.then_some(t.votes) })
        .collect())
}

/// Everything one query produced, for records and heatmaps.
#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub result: RetrievalResult,
    pub enhanced: Option<EnhancedQuery>,
    pub candidates: Option<CandidateSet>,
}

pub struct Retriever {
    images: Arc<EmbeddingStore>,
    encoder: Arc<dyn EmbeddingProvider>,
    config: RetrievalConfig,
}

impl Retriever {
    pub fn new(images: Arc<EmbeddingStore>, encoder: Arc<dyn EmbeddingProvider>, config: RetrievalConfig) -> Result<Self, RetrievalError> {
        config.validate()?;
        Ok(Retriever { images, encoder, config })
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn images(&self) -> &EmbeddingStore {
        &self.images
    }

    pub fn encoder(&self) -> &dyn EmbeddingProvider {
        self.encoder.as_ref()
    }

    /// Ranks `pool` for `query`. When the pool is larger than `n_initial`, the
    /// original query's top `n_initial` images form the working set.
    pub fn retrieve(&self, query: &QueryRecord, pool: &[String], enhancer: &dyn QueryEnhancer) -> Result<RetrievalOutcome, RetrievalError> {
        if pool.is_empty() {
            return Err(RetrievalError::EmptyPool);
        }
        let mut vectors = TextVectors::embed(self.encoder.as_ref(), [query.text.as_str()])?;
        let row = similarity(std::slice::from_ref(&query.text), &vectors, pool, &self.images)?;
        let initial: Vec<String> = if pool.len() > self.config.n_initial {
            row.top_k_row(0, self.config.n_initial).into_iter().map(|c| pool[c].clone()).collect()
        } else {
            pool.to_vec()
        };

        let baseline = |fell_back: bool| -> Result<RetrievalOutcome, RetrievalError> {
            let m = if initial.len() == pool.len() { row.clone() } else { similarity(std::slice::from_ref(&query.text), &vectors, &initial, &self.images)? };
            let ranked = m
                .top_k_row(0, self.config.k_final)
                .into_iter()
                .map(|c| RankedImage { image_id: initial[c].clone(), score: m.get(0, c), votes: None })
                .collect();
            Ok(RetrievalOutcome {
                result: RetrievalResult {
                    query_id: query.id.clone(),
                    mode: self.config.mode,
                    ranked,
                    candidate_set_size: initial.len(),
                    fell_back,
                },
                enhanced: None,
                candidates: None,
            })
        };

        if !self.config.mode.is_enhanced() {
            return baseline(false);
        }
        let enhanced = match enhancer.enhance(&query.text) {
            Ok(e) => e,
            Err(EnhanceError::AllBatchesEmpty) => {
                tracing::warn!(query = %query.id, "enhancement produced nothing, using baseline ranking");
                return baseline(true);
            }
            Err(e) => return Err(e.into()),
        };
        let extra = TextVectors::embed(self.encoder.as_ref(), enhanced.pooled.iter().map(String::as_str).filter(|t| *t != query.text))?;
        vectors.0.extend(extra.0);
        let candidates = stage1_filter(&enhanced, &initial, &vectors, &self.images, &self.config)?;
        let ranked = stage2_rank(&enhanced, &candidates, &vectors, &self.images, &self.config)?;
        Ok(RetrievalOutcome {
            result: RetrievalResult {
                query_id: query.id.clone(),
                mode: self.config.mode,
                ranked,
                candidate_set_size: candidates.len(),
                fell_back: false,
            },
            enhanced: Some(enhanced),
            candidates: Some(candidates),
        })
    }
}
