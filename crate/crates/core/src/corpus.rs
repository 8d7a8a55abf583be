//! Builds a five-granularity query manifest from captions, phrases and
//! generated annotations: imagery tags per image, relation triples per
//! caption, and fragments fused from several triples of one image.

use crate::embedding::{vector_similarity, EmbeddingError, EmbeddingProvider};
use crate::genclient::{parse_sentence_list, GenClient, GenError};
use crate::retrieval::TextVectors;
use crate::template::{self, PromptTemplate, TemplateError};
use crate::types::{read_jsonl, validate_manifest, write_jsonl, DatasetManifest, GranularityLevel, ImageRecord, ManifestError, QueryRecord, Violation};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRIPLE_DELIMITER: char = '|';
pub const MAX_TAG_WORDS: usize = 6;
pub const DEFAULT_GROUP_SIZE: usize = 3;

pub const TAGS_FILE: &str = "tags.jsonl";
pub const TRIPLES_FILE: &str = "triples.jsonl";
pub const FRAGMENTS_FILE: &str = "fragments.jsonl";
pub const COUNTS_FILE: &str = "counts.csv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("caption `{0}` is empty")]
    EmptyCaption(String),
    #[error("a fragment needs at least 2 triples, got {0}")]
    TooFewTriples(usize),
    #[error("invalid triple: {0}")]
    InvalidTriple(String),
    #[error("fusing triples for image `{image}` failed: {source}")]
    Fusion {
        image: String,
        #[source]
        source: GenError,
    },
    #[error("caption `{caption}` refers to unknown image `{image}`")]
    UnknownImage { caption: String, image: String },
    #[error("manifest has {} violation(s), first: {}", .0.len(), .0[0])]
    Violations(Vec<Violation>),
    #[error("stage `{0}` needs output from an earlier stage: {1}")]
    MissingStage(&'static str, PathBuf),
    #[error("ground-truth merge threshold must be finite, got {0}")]
    BadThreshold(f32),
    #[error(transparent)]
    Generation(#[from] GenError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
}

/// A caption or phrase line: `{id, image_id, text}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub id: String,
    pub image_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpoTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub source_caption_id: String,
}

impl SpoTriple {
    pub fn new(subject: &str, predicate: &str, object: &str, source_caption_id: &str) -> Result<Self, CorpusError> {
        let t = SpoTriple {
            subject: subject.trim().to_string(),
            predicate: predicate.trim().to_string(),
            object: object.trim().to_string(),
            source_caption_id: source_caption_id.to_string(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn check(&self) -> Result<(), CorpusError> {
        for part in [&self.subject, &self.predicate, &self.object] {
            if part.trim().is_empty() || part.contains(TRIPLE_DELIMITER) || part.contains('\n') {
                return Err(CorpusError::InvalidTriple(format!("{:?}", (&self.subject, &self.predicate, &self.object))));
            }
        }
        Ok(())
    }

    /// Parses `subject | predicate | object`; anything else is `None`.
    pub fn parse_line(line: &str, source_caption_id: &str) -> Option<Self> {
        let parts: Vec<&str> = line.split(TRIPLE_DELIMITER).collect();
        match parts[..] {
            [s, p, o] => SpoTriple::new(s, p, o, source_caption_id).ok(),
            _ => None,
        }
    }

    /// Query text: the three parts joined by single spaces.
    pub fn text(&self) -> String {
        format!("{} {} {}", self.subject, self.predicate, self.object)
    }

    pub fn line(&self) -> String {
        format!("{} | {} | {}", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FragmentRecord {
    pub text: String,
    pub source_triples: Vec<SpoTriple>,
    pub image_ids: BTreeSet<String>,
}

impl FragmentRecord {
    pub fn check(&self) -> Result<(), CorpusError> {
        if self.source_triples.len() < 2 {
            return Err(CorpusError::TooFewTriples(self.source_triples.len()));
        }
        self.source_triples.iter().try_for_each(SpoTriple::check)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageryTagRecord {
    pub tag: String,
    pub image_ids: BTreeSet<String>,
}

/// Lowercased, whitespace-collapsed tag with list punctuation removed, or
/// `None` when empty or longer than [`MAX_TAG_WORDS`] words.
pub fn normalize_tag(raw: &str) -> Option<String> {
    let t = raw.trim().trim_matches(['"', '\'', '.', ',', ';']).to_lowercase();
    let words: Vec<&str> = t.split_whitespace().collect();
    if words.is_empty() || words.len() > MAX_TAG_WORDS {
        return None;
    }
    Some(words.join(" "))
}

/// One vision request per template with the image attached. Tags keep
/// their first-seen order across templates.
pub fn generate_imagery_tags(image: &ImageRecord, templates: &[PromptTemplate], model: &str, client: &GenClient) -> Result<Vec<String>, CorpusError> {
    if !client.supports_images() {
        return Err(GenError::NoVisionCapability.into());
    }
    let mut seen = BTreeSet::new();
    let mut tags = Vec::new();
    for t in templates {
        let mut request = t.request(model, t.render(&[]), 0);
        request.image_uri = Some(image.uri.clone());
        let raw = client.generate(&request)?;
        let lines = match parse_sentence_list(&raw, t.n) {
            Ok(l) => l,
            Err(GenError::EmptyGeneration) => continue,
            Err(e) => return Err(e.into()),
        };
        for tag in lines.iter().filter_map(|l| normalize_tag(l)) {
            if seen.insert(tag.clone()) {
                tags.push(tag);
            }
        }
    }
    Ok(tags)
}

pub fn extract_triples(caption: &TextRecord, template: &PromptTemplate, model: &str, client: &GenClient) -> Result<Vec<SpoTriple>, CorpusError> {
    if caption.text.trim().is_empty() {
        return Err(CorpusError::EmptyCaption(caption.id.clone()));
    }
    let request = template.request(model, template.render(&[("caption", caption.text.trim())]), 0);
    let raw = client.generate(&request)?;
    let lines = match parse_sentence_list(&raw, template.n) {
        Ok(l) => l,
        Err(GenError::EmptyGeneration) => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let triples: Vec<SpoTriple> = lines.iter().filter_map(|l| SpoTriple::parse_line(l, &caption.id)).collect();
    if triples.is_empty() {
        tracing::info!(caption = %caption.id, "no triples extracted");
    }
    Ok(triples)
}

pub fn fuse_fragments(
    triples: &[SpoTriple],
    image_ids: BTreeSet<String>,
    template: &PromptTemplate,
    model: &str,
    client: &GenClient,
) -> Result<FragmentRecord, CorpusError> {
    if triples.len() < 2 {
        return Err(CorpusError::TooFewTriples(triples.len()));
    }
    let listing: Vec<String> = triples.iter().map(SpoTriple::line).collect();
    let request = template.request(model, template.render(&[("triples", &listing.join("\n"))]), 0);
    let image = image_ids.iter().next().cloned().unwrap_or_default();
    let raw = client.generate(&request).map_err(|source| CorpusError::Fusion { image: image.clone(), source })?;
    let text = parse_sentence_list(&raw, 1).map_err(|source| CorpusError::Fusion { image, source })?.remove(0);
    Ok(FragmentRecord { text, source_triples: triples.to_vec(), image_ids })
}

/// Splits `t` triples into groups of 2..=`group_size` (at least 2) with
/// sizes differing by at most one. Fewer than 2 triples give no group.
pub fn group_sizes(t: usize, group_size: usize) -> Vec<usize> {
    let g = t.div_ceil(group_size.max(2)).min(t / 2);
    (0..g).map(|i| t / g + usize::from(i < t % g)).collect()
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

/// Unions the ground truth of same-granularity queries whose texts have
/// cosine similarity `>= tau`, closed transitively. Identical texts count as
/// similarity 1 whatever the encoder returns.
/// Quadratic in the number of queries per granularity.
pub fn merge_ground_truth(queries: &[QueryRecord], vectors: &TextVectors, tau: f32) -> Result<Vec<QueryRecord>, CorpusError> {
    if !tau.is_finite() {
        return Err(CorpusError::BadThreshold(tau));
    }
    let mut out = queries.to_vec();
    let mut uf = UnionFind((0..queries.len()).collect());
    for g in GranularityLevel::ALL {
        let idx: Vec<usize> = (0..queries.len()).filter(|&i| queries[i].granularity == g).collect();
        let vecs = idx.iter().map(|&i| vectors.lookup(&queries[i].text)).collect::<Result<Vec<_>, _>>()?;
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                let same = queries[idx[a]].text == queries[idx[b]].text;
                if (same && tau <= 1.0) || vector_similarity(vecs[a], vecs[b]) >= tau {
                    uf.union(idx[a], idx[b]);
                }
            }
        }
    }
    let mut merged: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, q) in queries.iter().enumerate() {
        merged.entry(uf.find(i)).or_default().extend(q.true_image_ids.iter().cloned());
    }
    for (i, q) in out.iter_mut().enumerate() {
        q.true_image_ids = merged[&uf.find(i)].clone();
    }
    Ok(out)
}

/// Per-granularity counts alongside the image count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorpusSummary {
    pub images: usize,
    pub counts: [usize; 5],
}

impl CorpusSummary {
    pub fn of(m: &DatasetManifest) -> Self {
        CorpusSummary { images: m.images.len(), counts: m.count_by_granularity() }
    }

    pub fn header() -> Vec<&'static str> {
        let mut h = vec!["Image"];
        h.extend(GranularityLevel::ALL.iter().map(|g| g.title()));
        h
    }

    pub fn values(&self) -> Vec<usize> {
        let mut v = vec![self.images];
        v.extend(self.counts);
        v
    }

    pub fn to_csv(&self) -> String {
        let vals: Vec<String> = self.values().iter().map(usize::to_string).collect();
        format!("{}\n{}\n", Self::header().join(","), vals.join(","))
    }
}

impl fmt::Display for CorpusSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let header = Self::header();
        let vals: Vec<String> = self.values().iter().map(usize::to_string).collect();
        let widths: Vec<usize> = header.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
        let row = |cells: Vec<&str>| cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ");
        writeln!(f, "{}", row(header.clone()))?;
        write!(f, "{}", row(vals.iter().map(String::as_str).collect()))
    }
}

/// Turns every annotation into a query and validates the result.
pub fn build_manifest(
    images: &[ImageRecord],
    captions: &[TextRecord],
    phrases: &[TextRecord],
    tags: &[ImageryTagRecord],
    triples: &[SpoTriple],
    fragments: &[FragmentRecord],
) -> Result<DatasetManifest, CorpusError> {
    let caption_image: BTreeMap<&str, &str> = captions.iter().map(|c| (c.id.as_str(), c.image_id.as_str())).collect();
    let one = |id: &str| BTreeSet::from([id.to_string()]);
    let mut queries = Vec::new();
    for c in captions {
        queries.push(QueryRecord { id: format!("caption:{}", c.id), text: c.text.clone(), granularity: GranularityLevel::Caption, true_image_ids: one(&c.image_id) });
    }
    for (i, t) in tags.iter().enumerate() {
        queries.push(QueryRecord { id: format!("tag:{i:05}"), text: t.tag.clone(), granularity: GranularityLevel::ImageryTag, true_image_ids: t.image_ids.clone() });
    }
    for p in phrases {
        queries.push(QueryRecord { id: format!("phrase:{}", p.id), text: p.text.clone(), granularity: GranularityLevel::Phrase, true_image_ids: one(&p.image_id) });
    }
    let mut per_caption: BTreeMap<&str, usize> = BTreeMap::new();
    for t in triples {
        t.check()?;
        let image = caption_image.get(t.source_caption_id.as_str()).ok_or_else(|| CorpusError::UnknownImage {
            caption: t.source_caption_id.clone(),
            image: "?".into(),
        })?;
        let n = per_caption.entry(&t.source_caption_id).or_default();
        queries.push(QueryRecord {
            id: format!("triple:{}:{n}", t.source_caption_id),
            text: t.text(),
            granularity: GranularityLevel::Triple,
            true_image_ids: one(image),
        });
        *n += 1;
    }
    for (i, f) in fragments.iter().enumerate() {
        f.check()?;
        queries.push(QueryRecord { id: format!("fragment:{i:05}"), text: f.text.clone(), granularity: GranularityLevel::Fragment, true_image_ids: f.image_ids.clone() });
    }
    let manifest = DatasetManifest { images: images.to_vec(), queries, metadata: BTreeMap::new() };
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(CorpusError::Violations(violations));
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stages {
    pub tags: bool,
    pub triples: bool,
    pub fragments: bool,
    pub merge: bool,
    pub assemble: bool,
}

impl Stages {
    pub const ALL: Stages = Stages { tags: true, triples: true, fragments: true, merge: true, assemble: true };
}

#[derive(Debug, Clone)]
pub struct CorpusTemplates {
    pub tags: Vec<PromptTemplate>,
    pub triples: PromptTemplate,
    pub fragment: PromptTemplate,
}

impl CorpusTemplates {
    /// Templates from `dir` (`tags_scene.txt`, `tags_mood.txt`, `triples.txt`,
    /// `fragment.txt`), or the built-in set.
    pub fn load(dir: Option<&Path>) -> Result<Self, TemplateError> {
        let tags = vec![
            PromptTemplate::load_or_default(dir, "tags_scene", template::DEFAULT_TAGS_SCENE)?,
            PromptTemplate::load_or_default(dir, "tags_mood", template::DEFAULT_TAGS_MOOD)?,
        ];
        let triples = PromptTemplate::load_or_default(dir, "triples", template::DEFAULT_TRIPLES)?;
        triples.require_once("caption")?;
        let fragment = PromptTemplate::load_or_default(dir, "fragment", template::DEFAULT_FRAGMENT)?;
        fragment.require_once("triples")?;
        Ok(CorpusTemplates { tags, triples, fragment })
    }
}

pub struct CorpusInputs {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<TextRecord>,
    pub phrases: Vec<TextRecord>,
}

impl CorpusInputs {
    pub fn load(images: &Path, captions: &Path, phrases: Option<&Path>) -> Result<Self, CorpusError> {
        Ok(CorpusInputs {
            images: read_jsonl(images)?,
            captions: read_jsonl(captions)?,
            phrases: match phrases {
                Some(p) => read_jsonl(p)?,
                None => Vec::new(),
            },
        })
    }
}

pub struct CorpusOptions {
    pub model: String,
    pub vision_model: String,
    pub group_size: usize,
    pub templates: CorpusTemplates,
}

/// Threshold and text encoder for the ground-truth merge.
pub struct MergeSettings<'a> {
    pub tau: f32,
    pub encoder: &'a dyn EmbeddingProvider,
}

pub struct CorpusOutput {
    pub manifest: DatasetManifest,
    pub summary: CorpusSummary,
}

fn load_stage<T: serde::de::DeserializeOwned>(stage: &'static str, path: PathBuf) -> Result<Vec<T>, CorpusError> {
    if !path.exists() {
        return Err(CorpusError::MissingStage(stage, path));
    }
    Ok(read_jsonl(&path)?)
}

/// Runs the selected stages. Each stage writes its records under `work`;
/// a later stage run alone picks them up from there. Assembling writes the
/// manifest and `counts.csv` to `out`.
pub fn run_stages(
    inputs: &CorpusInputs,
    work: &Path,
    out: Option<&Path>,
    client: &GenClient,
    opts: &CorpusOptions,
    stages: Stages,
    merge: Option<MergeSettings<'_>>,
) -> Result<Option<CorpusOutput>, CorpusError> {
    std::fs::create_dir_all(work).map_err(|e| CorpusError::Io(work.into(), e))?;
    let known: BTreeSet<&str> = inputs.images.iter().map(|i| i.id.as_str()).collect();
    for c in &inputs.captions {
        if !known.contains(c.image_id.as_str()) {
            return Err(CorpusError::UnknownImage { caption: c.id.clone(), image: c.image_id.clone() });
        }
    }

    if stages.tags {
        let per_image: Vec<Vec<String>> = inputs
            .images
            .par_iter()
            .map(|img| generate_imagery_tags(img, &opts.templates.tags, &opts.vision_model, client))
            .collect::<Result<_, _>>()?;
        let mut vocab: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (img, tags) in inputs.images.iter().zip(per_image) {
            for t in tags {
                vocab.entry(t).or_default().insert(img.id.clone());
            }
        }
        let records: Vec<ImageryTagRecord> = vocab.into_iter().map(|(tag, image_ids)| ImageryTagRecord { tag, image_ids }).collect();
        write_jsonl(work.join(TAGS_FILE), &records)?;
        tracing::info!(tags = records.len(), "imagery tags written");
    }

    if stages.triples {
        let per_caption: Vec<Vec<SpoTriple>> = inputs
            .captions
            .par_iter()
            .map(|c| extract_triples(c, &opts.templates.triples, &opts.model, client))
            .collect::<Result<_, _>>()?;
        let triples: Vec<SpoTriple> = per_caption.into_iter().flatten().collect();
        write_jsonl(work.join(TRIPLES_FILE), &triples)?;
        tracing::info!(triples = triples.len(), "triples written");
    }

    if stages.fragments {
        let triples: Vec<SpoTriple> = load_stage("fragments", work.join(TRIPLES_FILE))?;
        let caption_image: BTreeMap<&str, &str> = inputs.captions.iter().map(|c| (c.id.as_str(), c.image_id.as_str())).collect();
        let mut by_image: BTreeMap<&str, Vec<SpoTriple>> = BTreeMap::new();
        for t in triples {
            if let Some(img) = caption_image.get(t.source_caption_id.as_str()) {
                by_image.entry(img).or_default().push(t);
            }
        }
        let mut groups: Vec<(&str, Vec<SpoTriple>)> = Vec::new();
        for (img, ts) in by_image {
            let mut start = 0;
            for size in group_sizes(ts.len(), opts.group_size) {
                groups.push((img, ts[start..start + size].to_vec()));
                start += size;
            }
        }
        let fragments: Vec<FragmentRecord> = groups
            .par_iter()
            .map(|(img, ts)| fuse_fragments(ts, BTreeSet::from([img.to_string()]), &opts.templates.fragment, &opts.model, client))
            .collect::<Result<_, _>>()?;
        write_jsonl(work.join(FRAGMENTS_FILE), &fragments)?;
        tracing::info!(fragments = fragments.len(), "fragments written");
    }

    if !stages.assemble {
        return Ok(None);
    }
    let tags: Vec<ImageryTagRecord> = load_stage("assemble", work.join(TAGS_FILE))?;
    let triples: Vec<SpoTriple> = load_stage("assemble", work.join(TRIPLES_FILE))?;
    let fragments: Vec<FragmentRecord> = load_stage("assemble", work.join(FRAGMENTS_FILE))?;
    let mut manifest = build_manifest(&inputs.images, &inputs.captions, &inputs.phrases, &tags, &triples, &fragments)?;
    if let (true, Some(m)) = (stages.merge, merge) {
        let vectors = TextVectors::embed(m.encoder, manifest.queries.iter().map(|q| q.text.as_str()))?;
        manifest.queries = merge_ground_truth(&manifest.queries, &vectors, m.tau)?;
        manifest.metadata.insert("merge_threshold".into(), m.tau.to_string());
        manifest.metadata.insert("merge_encoder".into(), m.encoder.name().to_string());
    }
    let summary = CorpusSummary::of(&manifest);
    if let Some(out) = out {
        manifest.save(out)?;
        let p = out.join(COUNTS_FILE);
        std::fs::write(&p, summary.to_csv()).map_err(|e| CorpusError::Io(p, e))?;
    }
    Ok(Some(CorpusOutput { manifest, summary }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingVector, SyntheticEncoder};
    use crate::genclient::testing::StubTransport;
    use crate::genclient::GenerationCache;

    fn client(t: StubTransport, dir: &Path) -> GenClient {
        GenClient::new(GenerationCache::open(dir).unwrap(), Some(Box::new(t)))
    }

    fn templates() -> CorpusTemplates {
        CorpusTemplates::load(None).unwrap()
    }

    fn image(id: &str) -> ImageRecord {
        ImageRecord { id: id.into(), uri: format!("file:///{id}.jpg"), embedding_id: None }
    }

    fn text(id: &str, image: &str, text: &str) -> TextRecord {
        TextRecord { id: id.into(), image_id: image.into(), text: text.into() }
    }

    #[test]
    fn tags_parsed_and_folded() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = StubTransport::fixed("1. pleasant afternoon\n2. family gathering");
        let c = client(t, dir.path());
        let tags = generate_imagery_tags(&image("i1"), &templates().tags[..1], "vlm", &c).unwrap();
        assert_eq!(tags, vec!["pleasant afternoon", "family gathering"]);
    }

    #[test]
    fn long_tags_dropped_and_overlap_merged() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = StubTransport::with(|r| {
            Ok(if r.prompt.contains("occasion") {
                "1. Family Gathering\n2. one two three four five six seven eight nine ten eleven twelve".into()
            } else {
                "1. family gathering\n2. Cold Morning.".into()
            })
        });
        let c = client(t, dir.path());
        let tags = generate_imagery_tags(&image("i1"), &templates().tags, "vlm", &c).unwrap();
        assert_eq!(tags, vec!["family gathering", "cold morning"]);
    }

    #[test]
    fn tags_need_vision_before_any_call() {
        let dir = tempfile::tempdir().unwrap();
        let (t, calls) = StubTransport::fixed("1. x");
        let c = client(t, dir.path()).with_vision(false);
        let err = generate_imagery_tags(&image("i1"), &templates().tags, "vlm", &c).unwrap_err();
        assert!(matches!(err, CorpusError::Generation(GenError::NoVisionCapability)));
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 0);
    }

    #[test]
    fn triple_grammar() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = StubTransport::fixed("children | bundled up for | cold weather\nchildren cold weather\na | b\n | x | y");
        let c = client(t, dir.path());
        let cap = text("c1", "i1", "children with some adults bundled up for cold weather");
        let ts = extract_triples(&cap, &templates().triples, "m", &c).unwrap();
        assert_eq!(ts, vec![SpoTriple::new("children", "bundled up for", "cold weather", "c1").unwrap()]);
        assert_eq!(ts[0].text(), "children bundled up for cold weather");
        assert!(matches!(extract_triples(&text("c2", "i1", "  "), &templates().triples, "m", &c), Err(CorpusError::EmptyCaption(_))));
    }

    #[test]
    fn triple_parts_validated() {
        assert!(SpoTriple::new("a", " ", "c", "x").is_err());
        assert!(SpoTriple::parse_line("a | b | c | d", "x").is_none());
        assert!(SpoTriple::parse_line("  a|b |c ", "x").is_some());
    }

    #[test]
    fn fusion_contract() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = StubTransport::fixed("children bundled up near a snowy street\nextra line");
        let c = client(t, dir.path());
        let ts = vec![SpoTriple::new("children", "bundled up for", "cold weather", "c1").unwrap(), SpoTriple::new("children", "stand on", "street", "c1").unwrap()];
        let f = fuse_fragments(&ts, BTreeSet::from(["i1".to_string()]), &templates().fragment, "m", &c).unwrap();
        assert_eq!(f.source_triples.len(), 2);
        assert_eq!(f.text, "children bundled up near a snowy street");
        assert!(matches!(fuse_fragments(&ts[..1], BTreeSet::new(), &templates().fragment, "m", &c), Err(CorpusError::TooFewTriples(1))));

        let (t, _) = StubTransport::fixed("\n");
        let dir2 = tempfile::tempdir().unwrap();
        let c = client(t, dir2.path());
        assert!(matches!(fuse_fragments(&ts, BTreeSet::from(["i1".to_string()]), &templates().fragment, "m", &c), Err(CorpusError::Fusion { .. })));
    }

    #[test]
    fn grouping() {
        assert_eq!(group_sizes(0, 3), Vec::<usize>::new());
        assert_eq!(group_sizes(1, 3), Vec::<usize>::new());
        assert_eq!(group_sizes(2, 3), vec![2]);
        assert_eq!(group_sizes(3, 3), vec![3]);
        assert_eq!(group_sizes(4, 3), vec![2, 2]);
        assert_eq!(group_sizes(7, 3), vec![3, 2, 2]);
        for t in 2..50 {
            for gs in 1..6 {
                let g = group_sizes(t, gs);
                assert_eq!(g.iter().sum::<usize>(), t);
                assert!(g.iter().all(|&s| s >= 2 && s <= gs.max(2) + 1));
            }
        }
    }

    fn q(id: &str, text: &str, img: &str) -> QueryRecord {
        QueryRecord { id: id.into(), text: text.into(), granularity: GranularityLevel::Caption, true_image_ids: BTreeSet::from([img.to_string()]) }
    }

    fn unit(v: Vec<f32>) -> EmbeddingVector {
        EmbeddingVector::new(v).unwrap()
    }

    #[test]
    fn identical_texts_merge_even_at_one() {
        let enc = SyntheticEncoder::new(1, 16);
        let qs = vec![q("a", "a dog", "i1"), q("b", "a dog", "i2"), q("c", "a cat", "i3")];
        let v = TextVectors::embed(&enc, qs.iter().map(|q| q.text.as_str())).unwrap();
        let m = merge_ground_truth(&qs, &v, 1.0).unwrap();
        assert_eq!(m[0].true_image_ids, BTreeSet::from(["i1".into(), "i2".into()]));
        assert_eq!(m[1].true_image_ids, m[0].true_image_ids);
        assert_eq!(m[2].true_image_ids.len(), 1);
        let none = merge_ground_truth(&qs, &v, 1.01).unwrap();
        assert!(none.iter().all(|q| q.true_image_ids.len() == 1));
    }

    #[test]
    fn merge_is_transitive() {
        // a~b and b~c at 0.95, a~c at 0.5
        let ang = |deg: f32| unit(vec![deg.to_radians().cos(), deg.to_radians().sin()]);
        let ab = 0.95f32.acos().to_degrees();
        let mut v = TextVectors::default();
        v.insert("a", ang(0.0));
        v.insert("b", ang(ab));
        v.insert("c", ang(2.0 * ab));
        let qs = vec![q("qa", "a", "1"), q("qb", "b", "2"), q("qc", "c", "3")];
        let m = merge_ground_truth(&qs, &v, 0.9).unwrap();
        assert!(m.iter().all(|q| q.true_image_ids.len() == 3));
        assert_eq!(merge_ground_truth(&m, &v, 0.9).unwrap(), m);
    }

    #[test]
    fn merge_stays_within_granularity() {
        let mut qs = vec![q("a", "x", "1"), q("b", "x", "2")];
        qs[1].granularity = GranularityLevel::Phrase;
        let enc = SyntheticEncoder::new(1, 8);
        let v = TextVectors::embed(&enc, ["x"]).unwrap();
        assert_eq!(merge_ground_truth(&qs, &v, 0.5).unwrap(), qs);
    }

    #[test]
    fn manifest_counts() {
        let images = vec![image("i1"), image("i2")];
        let captions = vec![text("c1", "i1", "a"), text("c2", "i2", "b")];
        let phrases = vec![text("p1", "i1", "x"), text("p2", "i1", "y"), text("p3", "i2", "z")];
        let tags = vec![ImageryTagRecord { tag: "family gathering".into(), image_ids: BTreeSet::from(["i1".into(), "i2".into()]) }];
        let t1 = SpoTriple::new("s", "p", "o", "c1").unwrap();
        let t2 = SpoTriple::new("s2", "p2", "o2", "c1").unwrap();
        let frag = FragmentRecord { text: "f".into(), source_triples: vec![t1.clone(), t2.clone()], image_ids: BTreeSet::from(["i1".into()]) };
        let m = build_manifest(&images, &captions, &phrases, &tags, &[t1, t2], &[frag]).unwrap();
        let s = CorpusSummary::of(&m);
        assert_eq!(s.counts, [2, 1, 3, 2, 1]);
        assert_eq!(s.to_csv(), "Image,Caption,Imagery Tag,Phrase,Triple,Fragment\n2,2,1,3,2,1\n");
        assert_eq!(m.queries.iter().find(|q| q.id == "triple:c1:0").unwrap().text, "s p o");
        assert!(s.to_string().starts_with("Image  Caption  Imagery Tag"));
    }

    #[test]
    fn manifest_violations_abort() {
        let err = build_manifest(&[image("i1")], &[text("c1", "i9", "a")], &[], &[], &[], &[]).unwrap_err();
        match err {
            CorpusError::Violations(v) => assert_eq!(v[0].record_id, "caption:c1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stages_resume_from_work_dir() {
        let dir = tempfile::tempdir().unwrap();
        let (t, _) = StubTransport::with(|r| {
            Ok(if r.image_uri.is_some() {
                "1. winter walk\n2. cold morning".into()
            } else if r.prompt.contains("Caption:") {
                "kids | wear | coats\nkids | walk on | snow\nadults | watch | kids".into()
            } else {
                "kids in coats walking on snow".into()
            })
        });
        let c = client(t, &dir.path().join("cache"));
        let inputs = CorpusInputs {
            images: vec![image("i1"), image("i2")],
            captions: vec![text("c1", "i1", "kids in coats walk on snow"), text("c2", "i2", "a man sits")],
            phrases: vec![text("p1", "i1", "kids")],
        };
        let opts = CorpusOptions { model: "m".into(), vision_model: "v".into(), group_size: 3, templates: templates() };
        let work = dir.path().join("work");
        let none = run_stages(&inputs, &work, None, &c, &opts, Stages { tags: true, triples: true, ..Default::default() }, None).unwrap();
        assert!(none.is_none());
        let stages = Stages { fragments: true, assemble: true, ..Default::default() };
        let out = run_stages(&inputs, &work, Some(&dir.path().join("out")), &c, &opts, stages, None).unwrap().unwrap();
        assert_eq!(out.summary.counts, [2, 2, 1, 6, 2]);
        assert!(validate_manifest(&DatasetManifest::load(dir.path().join("out")).unwrap()).is_empty());
        assert!(dir.path().join("out").join(COUNTS_FILE).exists());
    }

    #[test]
    fn assemble_without_earlier_stages_fails() {
        let dir = tempfile::tempdir().unwrap();
        let c = GenClient::new(GenerationCache::open(dir.path().join("c")).unwrap(), None);
        let inputs = CorpusInputs { images: vec![], captions: vec![], phrases: vec![] };
        let opts = CorpusOptions { model: "m".into(), vision_model: "v".into(), group_size: 3, templates: templates() };
        let err = run_stages(&inputs, &dir.path().join("w"), None, &c, &opts, Stages { assemble: true, ..Default::default() }, None);
        assert!(matches!(err, Err(CorpusError::MissingStage("assemble", _))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn angle_vectors(texts: &[String], angles: &[f32]) -> TextVectors {
            let mut v = TextVectors::default();
            for (t, a) in texts.iter().zip(angles) {
                v.insert(t.clone(), EmbeddingVector::new(vec![a.cos(), a.sin()]).unwrap());
            }
            v
        }

        proptest! {
            #[test]
            fn merge_is_idempotent(angles in prop::collection::vec(0.0f32..3.0, 1..12), tau in 0.5f32..1.05, dup in 0usize..4) {
                let mut texts: Vec<String> = (0..angles.len()).map(|i| format!("t{i}")).collect();
                // Repeat one text so exact duplicates are part of the input.
                if dup < texts.len() && texts.len() > 1 {
                    texts[0] = texts[dup.max(1) % texts.len()].clone();
                }
                let v = angle_vectors(&texts, &angles);
                let qs: Vec<QueryRecord> = texts.iter().enumerate().map(|(i, t)| {
                    let g = if i % 3 == 0 { GranularityLevel::Phrase } else { GranularityLevel::Caption };
                    QueryRecord { id: format!("q{i}"), text: t.clone(), granularity: g, true_image_ids: BTreeSet::from([format!("i{i}")]) }
                }).collect();
                let once = merge_ground_truth(&qs, &v, tau).unwrap();
                let twice = merge_ground_truth(&once, &v, tau).unwrap();
                prop_assert_eq!(&once, &twice);
                for (a, b) in qs.iter().zip(&once) {
                    prop_assert!(b.true_image_ids.is_superset(&a.true_image_ids));
                }
            }

            #[test]
            fn built_manifests_validate(n_images in 1usize..6, caps in prop::collection::vec((0usize..6, "[a-z]{1,8}( [a-z]{1,8}){0,4}"), 0..10), n_triples in 0usize..8) {
                let images: Vec<ImageRecord> = (0..n_images).map(|i| image(&format!("img{i}"))).collect();
                let captions: Vec<TextRecord> = caps.iter().enumerate().map(|(i, (img, text))| TextRecord { id: format!("c{i}"), image_id: format!("img{}", img % n_images), text: text.clone() }).collect();
                let triples: Vec<SpoTriple> = (0..n_triples.min(captions.len() * 2)).map(|i| SpoTriple::new("s", "p", &format!("o{i}"), &captions[i / 2].id).unwrap()).collect();
                let fragments: Vec<FragmentRecord> = triples.chunks(2).filter(|c| c.len() == 2).map(|c| FragmentRecord { text: "f".into(), source_triples: c.to_vec(), image_ids: BTreeSet::from(["img0".to_string()]) }).collect();
                let tags = vec![ImageryTagRecord { tag: "family gathering".into(), image_ids: (0..n_images).map(|i| format!("img{i}")).collect() }];
                let m = build_manifest(&images, &captions, &captions, &tags, &triples, &fragments).unwrap();
                prop_assert!(validate_manifest(&m).is_empty());
                let s = CorpusSummary::of(&m);
                prop_assert_eq!(s.values(), vec![n_images, captions.len(), 1, captions.len(), triples.len(), fragments.len()]);
            }
        }
    }
}
