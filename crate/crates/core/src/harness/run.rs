use super::heatmap::{export_heatmap, write_heatmap};
use super::report::{render_tables, report_cells, write_report_csv, ReportCell};
use super::{Encoder, HarnessError, RunSpec, SampleSpec, HEATMAP_DIR, RECORDS_FILE, REPORT_CSV, REPORT_TXT, RUN_CONFIG_FILE};
use crate::enhancer::{passthrough, EnhancedQuery, LlmEnhancer, Passthrough, QueryEnhancer};
use crate::genclient::{CacheStats, GenClient};
use crate::metrics::EvalRecord;
use crate::retrieval::Retriever;
use crate::template::{PromptTemplate, DEFAULT_ENHANCE};
use crate::types::{validate_manifest, write_jsonl, DatasetManifest, GranularityLevel, QueryRecord, RetrievalMode};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Queries of granularity `g`, sorted by id, optionally subsampled without
/// replacement. The draw depends only on the seed, `g` and the sorted ids.
pub fn sample_queries(manifest: &DatasetManifest, g: GranularityLevel, sample: Option<SampleSpec>) -> Vec<&QueryRecord> {
    let mut qs: Vec<&QueryRecord> = manifest.queries.iter().filter(|q| q.granularity == g).collect();
    qs.sort_by(|a, b| a.id.cmp(&b.id));
    let Some(s) = sample else { return qs };
    if s.count >= qs.len() {
        return qs;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    rng.set_stream(1 + g as u64);
    let mut picked = index::sample(&mut rng, qs.len(), s.count).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| qs[i]).collect()
}

/// Sorted evaluation pool: every true image of `queries`, topped up with
/// seeded distractors to `pool_size`. All images when `pool_size` is `None`.
pub fn pool_for(manifest: &DatasetManifest, queries: &[&QueryRecord], pool_size: Option<usize>, seed: u64, g: GranularityLevel) -> Vec<String> {
    let mut all: Vec<String> = manifest.image_ids();
    all.sort();
    let Some(size) = pool_size else { return all };
    let truth: BTreeSet<&str> = queries.iter().flat_map(|q| q.true_image_ids.iter().map(String::as_str)).collect();
    let others: Vec<&String> = all.iter().filter(|id| !truth.contains(id.as_str())).collect();
    let want = size.saturating_sub(truth.len()).min(others.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1001 + g as u64);
    let mut pool: BTreeSet<String> = truth.iter().map(|s| s.to_string()).collect();
    pool.extend(index::sample(&mut rng, others.len(), want).into_iter().map(|i| others[i].clone()));
    pool.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FailedCell {
    pub encoder: String,
    pub granularity: GranularityLevel,
    pub mode: RetrievalMode,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub cells: Vec<ReportCell>,
    pub failed: Vec<FailedCell>,
    pub records: usize,
    pub out_dir: PathBuf,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        i32::from(!self.failed.is_empty())
    }
}

#[derive(Serialize)]
struct GranularityInfo {
    queries: usize,
    sampled: usize,
    pool: usize,
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    spec: &'a RunSpec,
    granularities: BTreeMap<&'static str, GranularityInfo>,
    cache: Option<CacheStats>,
    fallbacks: usize,
    failed_cells: &'a [FailedCell],
}

struct HeatmapJob {
    encoder: usize,
    query: QueryRecord,
    enhanced: EnhancedQuery,
    columns: Vec<String>,
}

struct CellOutput {
    records: Vec<EvalRecord>,
    heatmaps: Vec<HeatmapJob>,
}

/// Mode whose outcomes feed the heatmaps: the richest one that runs.
fn heatmap_mode(modes: &[RetrievalMode]) -> RetrievalMode {
    modes.iter().copied().max().unwrap_or(RetrievalMode::Baseline)
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    spec: &RunSpec,
    enc_idx: usize,
    encoder: &Encoder,
    g: GranularityLevel,
    mode: RetrievalMode,
    queries: &[&QueryRecord],
    pool: &[String],
    enhancer: Option<&LlmEnhancer>,
) -> Result<CellOutput, String> {
    let config = spec.retrieval.config(mode);
    let retriever = Retriever::new(encoder.images.clone(), encoder.text.clone(), config).map_err(|e| e.to_string())?;
    let enh: &dyn QueryEnhancer = match (mode.is_enhanced(), enhancer) {
        (false, _) => &Passthrough,
        (true, Some(e)) => e,
        (true, None) => return Err("no generation client configured".into()),
    };
    let want_heatmaps = mode == heatmap_mode(&spec.modes);
    let results: Vec<(EvalRecord, Option<HeatmapJob>)> = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let out = retriever.retrieve(q, pool, enh).map_err(|e| format!("query {}: {e}", q.id))?;
            let mut rec = EvalRecord::score(&encoder.name, mode, g, &q.id, out.result.ids(), q.true_image_ids.clone(), config.k_final)
                .map_err(|e| format!("query {}: {e}", q.id))?;
            rec.candidate_set_size = out.result.candidate_set_size;
            rec.fell_back = out.result.fell_back;
            let job = (want_heatmaps && i < spec.heatmaps).then(|| {
                let mut columns: Vec<String> = q.true_image_ids.iter().filter(|id| pool.binary_search(id).is_ok()).cloned().collect();
                for id in out.result.ids() {
                    if !columns.contains(&id) {
                        columns.push(id);
                    }
                }
                HeatmapJob { encoder: enc_idx, query: (*q).clone(), enhanced: out.enhanced.unwrap_or_else(|| passthrough(&q.text)), columns }
            });
            Ok((rec, job))
        })
        .collect::<Result<_, String>>()?;
    let (records, jobs): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(CellOutput { records, heatmaps: jobs.into_iter().flatten().collect() })
}

/// Runs every cell and writes records, reports, the run snapshot and any
/// heatmaps under the output directory. Failing cells are reported in the
/// summary and skipped; setup problems are errors.
pub fn run_benchmark(spec: &RunSpec) -> Result<RunSummary, HarnessError> {
    spec.validate()?;
    let manifest = spec.load_manifest()?;
    let violations = validate_manifest(&manifest);
    if let Some(v) = violations.first() {
        return Err(HarnessError::Config(format!("manifest has {} violation(s), first: {v}", violations.len())));
    }
    let encoders: Vec<Encoder> = spec.encoders.iter().map(|e| Encoder::load(e, &spec.base_dir, &manifest)).collect::<Result<_, _>>()?;

    let (client, enhancer) = match spec.modes.iter().any(|m| m.is_enhanced()) {
        true => match build_enhancer(spec)? {
            Some((c, e)) => (Some(c), Some(e)),
            None => (None, None),
        },
        false => (None, None),
    };

    let mut grans = spec.granularities.clone();
    grans.sort();
    grans.dedup();
    let mut modes = spec.modes.clone();
    modes.sort();
    modes.dedup();
    let seed = spec.sample.map_or(0, |s| s.seed);
    let mut info = BTreeMap::new();
    let mut per_gran = Vec::new();
    for &g in &grans {
        let sampled = sample_queries(&manifest, g, spec.sample);
        let pool = pool_for(&manifest, &sampled, spec.pool_size, seed, g);
        let total = manifest.queries.iter().filter(|q| q.granularity == g).count();
        info.insert(g.as_str(), GranularityInfo { queries: total, sampled: sampled.len(), pool: pool.len() });
        per_gran.push((g, sampled, pool));
    }

    let mut jobs = Vec::new();
    for (ei, enc) in encoders.iter().enumerate() {
        for (g, sampled, pool) in &per_gran {
            if sampled.is_empty() {
                continue;
            }
            for &m in &modes {
                jobs.push((ei, enc, *g, m, sampled, pool));
            }
        }
    }
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    let outputs: Vec<Result<CellOutput, String>> = threads.install(|| {
        jobs.par_iter().map(|&(ei, enc, g, m, sampled, pool)| run_cell(spec, ei, enc, g, m, sampled, pool, enhancer.as_ref())).collect()
    });

    let mut records = Vec::new();
    let mut heatmaps = Vec::new();
    let mut failed = Vec::new();
    for (&(_, enc, g, m, _, _), out) in jobs.iter().zip(outputs) {
        match out {
            Ok(o) => {
                records.extend(o.records);
                heatmaps.extend(o.heatmaps);
            }
            Err(error) => {
                tracing::error!(encoder = %enc.name, granularity = g.as_str(), mode = m.as_str(), %error, "cell failed");
                failed.push(FailedCell { encoder: enc.name.clone(), granularity: g, mode: m, error });
            }
        }
    }

    let out_dir = spec.resolve(&spec.out_dir);
    std::fs::create_dir_all(&out_dir).map_err(|e| HarnessError::io(&out_dir, e))?;
    write_jsonl(out_dir.join(RECORDS_FILE), &records)?;
    let cells = report_cells(&records, spec.retrieval.k_final);
    write_report_csv(&out_dir.join(REPORT_CSV), &cells)?;
    let failed_keys: BTreeSet<_> = failed.iter().map(|f| (f.encoder.clone(), f.granularity, f.mode)).collect();
    let mut text = render_tables(&cells, &failed_keys, &grans, &modes);
    for f in &failed {
        text.push_str(&format!("failed: {}/{}/{}: {}\n", f.encoder, f.granularity.as_str(), f.mode.as_str(), f.error));
    }
    let p = out_dir.join(REPORT_TXT);
    std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?;

    let hm_dir = out_dir.join(HEATMAP_DIR);
    if hm_dir.exists() {
        std::fs::remove_dir_all(&hm_dir).map_err(|e| HarnessError::io(&hm_dir, e))?;
    }
    for job in &heatmaps {
        let enc = &encoders[job.encoder];
        let m = export_heatmap(&job.query, &job.enhanced, &job.columns, enc.text.as_ref(), &enc.images)?;
        let path = hm_dir.join(file_safe(&enc.name)).join(job.query.granularity.as_str()).join(format!("{}.tsv", file_safe(&job.query.id)));
        write_heatmap(&path, &m)?;
    }

    let snapshot = RunSnapshot {
        spec,
        granularities: info,
        cache: client.as_ref().map(|c| c.stats()),
        fallbacks: records.iter().filter(|r| r.fell_back).count(),
        failed_cells: &failed,
    };
    write_json(&out_dir.join(RUN_CONFIG_FILE), &snapshot)?;
    Ok(RunSummary { cells, failed, records: records.len(), out_dir })
}

/// Generation client and enhancer from the run config's `[generation]` and
/// `[enhancement]` sections; `None` without a `[generation]` section.
pub fn build_enhancer(spec: &RunSpec) -> Result<Option<(Arc<GenClient>, LlmEnhancer)>, HarnessError> {
    let Some(g) = spec.generation_config() else { return Ok(None) };
    let client = Arc::new(GenClient::from_config(&g).map_err(|e| HarnessError::Config(e.to_string()))?);
    let template = match &spec.enhancement.template {
        Some(p) => PromptTemplate::load(spec.resolve(p))?,
        None => PromptTemplate::parse(DEFAULT_ENHANCE)?,
    };
    let e = LlmEnhancer::new(client.clone(), template, g.model).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(Some((client, e.with_batches(spec.enhancement.batches).with_retries(spec.enhancement.retries))))
}

/// Enhances every sampled query once so later runs can replay offline.
/// Returns the per-query failures and the client's cache statistics.
pub fn prewarm(spec: &RunSpec) -> Result<(Vec<(String, String)>, CacheStats), HarnessError> {
    let (client, enhancer) = build_enhancer(spec)?.ok_or_else(|| HarnessError::Config("enhance needs a [generation] section".into()))?;
    let manifest = spec.load_manifest()?;
    let mut queries = Vec::new();
    let mut grans = spec.granularities.clone();
    grans.sort();
    grans.dedup();
    for g in grans {
        queries.extend(sample_queries(&manifest, g, spec.sample));
    }
    let failures: Vec<(String, String)> = queries
        .par_iter()
        .filter_map(|q| enhancer.enhance(&q.text).err().map(|e| (q.id.clone(), e.to_string())))
        .collect();
    Ok((failures, client.stats()))
}

/// Heatmap for one query as the run would produce it: true images in the
/// pool, then the ranked result of `mode`.
pub fn query_heatmap(spec: &RunSpec, query_id: &str, encoder: Option<&str>, mode: RetrievalMode) -> Result<crate::embedding::SimilarityMatrix, HarnessError> {
    let manifest = spec.load_manifest()?;
    let query = manifest.queries.iter().find(|q| q.id == query_id).ok_or_else(|| HarnessError::Config(format!("no query `{query_id}`")))?;
    let enc_spec = match encoder {
        Some(name) => spec.encoders.iter().find(|e| e.name == name).ok_or_else(|| HarnessError::Config(format!("no encoder `{name}`")))?,
        None => spec.encoders.first().ok_or_else(|| HarnessError::Config("no encoders configured".into()))?,
    };
    let enc = Encoder::load(enc_spec, &spec.base_dir, &manifest)?;
    let sampled = sample_queries(&manifest, query.granularity, spec.sample);
    let pool = pool_for(&manifest, &sampled, spec.pool_size, spec.sample.map_or(0, |s| s.seed), query.granularity);
    let built = if mode.is_enhanced() { build_enhancer(spec)? } else { None };
    let enh: &dyn QueryEnhancer = match (&built, mode.is_enhanced()) {
        (Some((_, e)), true) => e,
        (None, true) => return Err(HarnessError::Config("enhanced heatmaps need a [generation] section".into())),
        _ => &Passthrough,
    };
    let retriever = Retriever::new(enc.images.clone(), enc.text.clone(), spec.retrieval.config(mode)).map_err(|e| HarnessError::Config(e.to_string()))?;
    let out = retriever.retrieve(query, &pool, enh).map_err(|e| HarnessError::Config(format!("query {query_id}: {e}")))?;
    let mut columns: Vec<String> = query.true_image_ids.iter().filter(|id| pool.binary_search(id).is_ok()).cloned().collect();
    for id in out.result.ids() {
        if !columns.contains(&id) {
            columns.push(id);
        }
    }
    let enhanced = out.enhanced.unwrap_or_else(|| passthrough(&query.text));
    export_heatmap(query, &enhanced, &columns, enc.text.as_ref(), &enc.images)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let mut body = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Config(e.to_string()))?;
    body.push('\n');
    std::fs::write(path, body).map_err(|e| HarnessError::io(path, e))
}
