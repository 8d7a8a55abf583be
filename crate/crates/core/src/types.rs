//! Shared domain vocabulary: granularities, image and query records,
//! manifests, retrieval results and manifest validation.
//!
//! A manifest lives in a directory holding `images.jsonl`, `queries.jsonl`
//! and an optional `metadata.json`. Record files are line-delimited JSON;
//! blank lines are skipped and anything else that does not parse is a hard
//! error carrying the 1-based line number.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

pub const IMAGES_FILE: &str = "images.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";
pub const METADATA_FILE: &str = "metadata.json";

/// The five query corpus kinds, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityLevel {
    Caption,
    ImageryTag,
    Phrase,
    Triple,
    Fragment,
}

impl GranularityLevel {
    pub const ALL: [GranularityLevel; 5] = [
        GranularityLevel::Caption,
        GranularityLevel::ImageryTag,
        GranularityLevel::Phrase,
        GranularityLevel::Triple,
        GranularityLevel::Fragment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GranularityLevel::Caption => "caption",
            GranularityLevel::ImageryTag => "imagery_tag",
            GranularityLevel::Phrase => "phrase",
            GranularityLevel::Triple => "triple",
            GranularityLevel::Fragment => "fragment",
        }
    }

    /// Column heading used in count summaries.
    pub fn title(self) -> &'static str {
        match self {
            GranularityLevel::Caption => "Caption",
            GranularityLevel::ImageryTag => "Imagery Tag",
            GranularityLevel::Phrase => "Phrase",
            GranularityLevel::Triple => "Triple",
            GranularityLevel::Fragment => "Fragment",
        }
    }
}

impl fmt::Display for GranularityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown label `{0}`")]
pub struct UnknownLabel(pub String);

impl FromStr for GranularityLevel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Retrieval arm: plain query, enhanced with max-similarity fusion, or
/// enhanced with sentence-wise voting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Baseline,
    EnhancedMaxsim,
    EnhancedVote,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [
        RetrievalMode::Baseline,
        RetrievalMode::EnhancedMaxsim,
        RetrievalMode::EnhancedVote,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMode::Baseline => "baseline",
            RetrievalMode::EnhancedMaxsim => "enhanced_maxsim",
            RetrievalMode::EnhancedVote => "enhanced_vote",
        }
    }

    pub fn is_enhanced(self) -> bool {
        self != RetrievalMode::Baseline
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_id: Option<String>,
}

impl ImageRecord {
    /// Key under which the image is stored in an embedding store.
    pub fn store_key(&self) -> &str {
        self.embedding_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub text: String,
    pub granularity: GranularityLevel,
    /// Ground truth is a set: merged near-duplicate queries make several
    /// images equally correct.
    pub true_image_ids: BTreeSet<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub images: Vec<ImageRecord>,
    pub queries: Vec<QueryRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn image_ids(&self) -> Vec<String> {
        self.images.iter().map(|i| i.id.clone()).collect()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn count_by_granularity(&self) -> [usize; 5] {
        let mut counts = [0usize; 5];
        for q in &self.queries {
            counts[q.granularity as usize] += 1;
        }
        counts
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, ManifestError> {
        let dir = dir.as_ref();
        let images = read_jsonl(dir.join(IMAGES_FILE))?;
        let queries = read_jsonl(dir.join(QUERIES_FILE))?;
        let meta_path = dir.join(METADATA_FILE);
        let metadata = if meta_path.exists() {
            let raw = std::fs::read_to_string(&meta_path).map_err(|e| ManifestError::io(&meta_path, e))?;
            serde_json::from_str(&raw).map_err(|e| ManifestError::Parse {
                path: meta_path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        } else {
            BTreeMap::new()
        };
        Ok(DatasetManifest { images, queries, metadata })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), ManifestError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| ManifestError::io(dir, e))?;
        write_jsonl(dir.join(IMAGES_FILE), &self.images)?;
        write_jsonl(dir.join(QUERIES_FILE), &self.queries)?;
        let meta_path = dir.join(METADATA_FILE);
        let mut body = serde_json::to_string_pretty(&self.metadata).expect("string map serializes");
        body.push('\n');
        std::fs::write(&meta_path, body).map_err(|e| ManifestError::io(&meta_path, e))
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl ManifestError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ManifestError::Io { path: path.to_path_buf(), source }
    }
}

/// Reads a line-delimited JSON record file.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| ManifestError::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ManifestError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| ManifestError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| ManifestError::io(path, e))?;
    }
    w.flush().map_err(|e| ManifestError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    DuplicateId,
    EmptyGroundTruth,
    EmptyId,
    EmptyText,
    MissingImage,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::DuplicateId => "duplicate_id",
            Rule::EmptyGroundTruth => "empty_ground_truth",
            Rule::EmptyId => "empty_id",
            Rule::EmptyText => "empty_text",
            Rule::MissingImage => "missing_image",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub record_id: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.record_id, self.rule.as_str(), self.detail)
    }
}

/// Checks referential integrity and record invariants.
///
/// Violations come back sorted by record id, then rule name, then detail.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut image_ids = HashSet::new();
    let mut reported_dups = HashSet::new();
    for img in &manifest.images {
        if img.id.is_empty() {
            out.push(Violation {
                record_id: String::new(),
                rule: Rule::EmptyId,
                detail: format!("image with uri `{}` has an empty id", img.uri),
            });
            continue;
        }
        if !image_ids.insert(img.id.as_str()) && reported_dups.insert(img.id.as_str()) {
            out.push(Violation {
                record_id: img.id.clone(),
                rule: Rule::DuplicateId,
                detail: format!("image id `{}` is not unique", img.id),
            });
        }
    }

    let mut query_ids = HashSet::new();
    let mut reported_qdups = HashSet::new();
    for q in &manifest.queries {
        if q.id.is_empty() {
            out.push(Violation {
                record_id: String::new(),
                rule: Rule::EmptyId,
                detail: format!("query `{}` has an empty id", q.text),
            });
        } else if !query_ids.insert(q.id.as_str()) && reported_qdups.insert(q.id.as_str()) {
            out.push(Violation {
                record_id: q.id.clone(),
                rule: Rule::DuplicateId,
                detail: format!("query id `{}` is not unique", q.id),
            });
        }
        if q.text.trim().is_empty() {
            out.push(Violation {
                record_id: q.id.clone(),
                rule: Rule::EmptyText,
                detail: "query text is blank".to_string(),
            });
        }
        if q.true_image_ids.is_empty() {
            out.push(Violation {
                record_id: q.id.clone(),
                rule: Rule::EmptyGroundTruth,
                detail: "true_image_ids is empty".to_string(),
            });
        }
        for missing in q.true_image_ids.iter().filter(|id| !image_ids.contains(id.as_str())) {
            out.push(Violation {
                record_id: q.id.clone(),
                rule: Rule::MissingImage,
                detail: format!("true image `{missing}` is not in the image catalog"),
            });
        }
    }

    out.sort_by(|a, b| {
        (a.record_id.as_str(), a.rule.as_str(), a.detail.as_str())
            .cmp(&(b.record_id.as_str(), b.rule.as_str(), b.detail.as_str()))
    });
    out
}

/// One entry of a ranked result list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub votes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub query_id: String,
    pub mode: RetrievalMode,
    pub ranked: Vec<RankedImage>,
    /// Number of candidates the final ranking was drawn from.
    pub candidate_set_size: usize,
    /// Set when an enhanced mode fell back to the baseline ranking.
    #[serde(default)]
    pub fell_back: bool,
}

impl RetrievalResult {
    pub fn ids(&self) -> Vec<String> {
        self.ranked.iter().map(|r| r.image_id.clone()).collect()
    }
}
