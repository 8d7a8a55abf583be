//! Benchmark runner: every (encoder, granularity, mode) cell over a sampled
//! query set, with per-query records, aggregate reports and heatmap data.

mod heatmap;
mod report;
mod run;

pub use heatmap::{export_heatmap, heatmap_rows, render_heatmap, write_heatmap};
pub use report::{compare_runs, read_report, render_comparison, render_tables, report_cells, write_report_csv, DeltaRow, ReportCell, ReportKey};
pub use run::{build_enhancer, pool_for, prewarm, query_heatmap, run_benchmark, sample_queries, FailedCell, RunSummary};

use crate::embedding::{
    CachingProvider, EmbeddingError, EmbeddingProvider, EmbeddingStore, FileProvider, Provenance, RemoteEncoder, RemoteEncoderConfig,
    StoreError, SyntheticEncoder,
};
use crate::enhancer::{DEFAULT_BATCHES, DEFAULT_RETRIES};
use crate::genclient::GenerationConfig;
use crate::retrieval::RetrievalConfig;
use crate::template::TemplateError;
use crate::types::{DatasetManifest, GranularityLevel, ManifestError, RetrievalMode};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const HEATMAP_DIR: &str = "heatmaps";

/// Setup and I/O failures. Individual cell failures are not errors; they
/// are listed in [`RunSummary::failed`].
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("report {path}: {message}")]
    Report { path: PathBuf, message: String },
    #[error("reports do not share cells: {0}")]
    Mismatch(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io(path.to_path_buf(), e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalParams {
    pub n_initial: usize,
    pub k1: usize,
    pub k_final: usize,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        let d = RetrievalConfig::default();
        RetrievalParams { n_initial: d.n_initial, k1: d.k1, k_final: d.k_final }
    }
}

impl RetrievalParams {
    pub fn config(&self, mode: RetrievalMode) -> RetrievalConfig {
        RetrievalConfig { n_initial: self.n_initial, k1: self.k1, k_final: self.k_final, mode }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSpec {
    pub count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancementSpec {
    pub batches: usize,
    pub retries: u32,
    /// Prompt template file; the built-in one when absent.
    pub template: Option<PathBuf>,
}

impl Default for EnhancementSpec {
    fn default() -> Self {
        EnhancementSpec { batches: DEFAULT_BATCHES, retries: DEFAULT_RETRIES, template: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextEncoderSpec {
    Synthetic { seed: u64, dim: usize },
    /// Texts looked up by exact string in a prebuilt store.
    Store { path: PathBuf },
    Remote(RemoteEncoderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub name: String,
    /// Prebuilt image store. Without one, images are embedded by `text`'s
    /// provider at startup.
    #[serde(default)]
    pub image_store: Option<PathBuf>,
    pub text: TextEncoderSpec,
}

fn all_modes() -> Vec<RetrievalMode> {
    RetrievalMode::ALL.to_vec()
}

fn all_granularities() -> Vec<GranularityLevel> {
    GranularityLevel::ALL.to_vec()
}

fn one() -> usize {
    1
}

/// A benchmark run. Relative paths resolve against `base_dir`, which
/// [`RunSpec::load`] sets to the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    pub encoders: Vec<EncoderSpec>,
    #[serde(default = "all_modes")]
    pub modes: Vec<RetrievalMode>,
    #[serde(default = "all_granularities")]
    pub granularities: Vec<GranularityLevel>,
    #[serde(default)]
    pub retrieval: RetrievalParams,
    #[serde(default)]
    pub sample: Option<SampleSpec>,
    /// Evaluation pool size per granularity: true images of the sampled
    /// queries plus seeded distractors. All images when absent.
    #[serde(default)]
    pub pool_size: Option<usize>,
    #[serde(default)]
    pub enhancement: EnhancementSpec,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
    #[serde(default = "one")]
    pub parallelism: usize,
    /// Heatmaps exported per (encoder, granularity), first sampled queries.
    #[serde(default)]
    pub heatmaps: usize,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut spec: RunSpec = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        spec.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(spec)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m| self.retrieval.config(m).validate().map_err(|e| HarnessError::Config(e.to_string()));
        cfg(RetrievalMode::Baseline)?;
        if self.encoders.is_empty() {
            return Err(HarnessError::Config("at least one encoder is required".into()));
        }
        let mut names: Vec<&str> = self.encoders.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(HarnessError::Config(format!("encoder name `{}` used twice", w[0])));
        }
        if names.iter().any(|n| n.is_empty() || n.contains(['/', '\\'])) {
            return Err(HarnessError::Config("encoder names must be non-empty and contain no path separators".into()));
        }
        if self.modes.is_empty() || self.granularities.is_empty() {
            return Err(HarnessError::Config("modes and granularities must be non-empty".into()));
        }
        if let Some(s) = self.sample {
            if s.count == 0 {
                return Err(HarnessError::Config("sample count must be at least 1".into()));
            }
        }
        if self.pool_size == Some(0) || self.parallelism == 0 || self.enhancement.batches == 0 {
            return Err(HarnessError::Config("pool_size, parallelism and enhancement.batches must be at least 1".into()));
        }
        if self.modes.iter().any(|m| m.is_enhanced()) && self.generation.is_none() {
            return Err(HarnessError::Config("enhanced modes need a [generation] section".into()));
        }
        let manifest = self.resolve(&self.manifest);
        if !manifest.is_dir() {
            return Err(HarnessError::Config(format!("manifest directory {} does not exist", manifest.display())));
        }
        for e in &self.encoders {
            let mut files: Vec<&PathBuf> = e.image_store.iter().collect();
            if let TextEncoderSpec::Store { path } = &e.text {
                files.push(path);
            }
            if let Some(missing) = files.into_iter().map(|p| self.resolve(p)).find(|p| !p.is_file()) {
                return Err(HarnessError::Config(format!("encoder `{}`: {} does not exist", e.name, missing.display())));
            }
        }
        Ok(())
    }

    pub fn load_manifest(&self) -> Result<DatasetManifest, HarnessError> {
        Ok(DatasetManifest::load(self.resolve(&self.manifest))?)
    }

    pub fn generation_config(&self) -> Option<GenerationConfig> {
        self.generation.clone().map(|mut g| {
            g.cache_dir = self.resolve(&g.cache_dir);
            g
        })
    }
}

/// Text provider for an encoder spec.
pub fn text_provider(spec: &EncoderSpec, base: &Path) -> Result<Arc<dyn EmbeddingProvider>, HarnessError> {
    Ok(match &spec.text {
        TextEncoderSpec::Synthetic { seed, dim } => Arc::new(SyntheticEncoder::new(*seed, *dim).with_name(&spec.name)),
        TextEncoderSpec::Store { path } => Arc::new(FileProvider::new(&spec.name, Arc::new(EmbeddingStore::load(base.join(path))?))),
        TextEncoderSpec::Remote(cfg) => Arc::new(RemoteEncoder::new(&spec.name, cfg.clone())?),
    })
}

/// Image vectors for every manifest image, keyed by image id.
pub fn image_store(spec: &EncoderSpec, base: &Path, manifest: &DatasetManifest, text: &dyn EmbeddingProvider) -> Result<EmbeddingStore, HarnessError> {
    let (dim, vectors) = match &spec.image_store {
        Some(p) => {
            let store = EmbeddingStore::load(base.join(p))?;
            let v = manifest.images.iter().map(|i| store.lookup(i.store_key()).cloned()).collect::<Result<Vec<_>, _>>()?;
            (store.dim(), v)
        }
        None => {
            let v = text.embed_images(&manifest.images)?;
            (v.first().map_or(text.dimension().unwrap_or(0), |v| v.dim()), v)
        }
    };
    let records = manifest.images.iter().zip(vectors).map(|(i, v)| (i.id.clone(), v.into_values()));
    Ok(EmbeddingStore::build(dim, records, Provenance { encoder: spec.name.clone(), created_at: None })?)
}

/// A loaded encoder: image vectors plus a memoizing text provider.
pub struct Encoder {
    pub name: String,
    pub images: Arc<EmbeddingStore>,
    pub text: Arc<dyn EmbeddingProvider>,
}

impl Encoder {
    pub fn load(spec: &EncoderSpec, base: &Path, manifest: &DatasetManifest) -> Result<Self, HarnessError> {
        let raw = text_provider(spec, base)?;
        let images = Arc::new(image_store(spec, base, manifest, raw.as_ref())?);
        let text: Arc<dyn EmbeddingProvider> = Arc::new(CachingProvider::new(raw));
        Ok(Encoder { name: spec.name.clone(), images, text })
    }
}
