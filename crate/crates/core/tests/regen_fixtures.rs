//! Rebuilds the committed fixtures under `tests/fixtures` with a scripted
//! transport. Run with `cargo test --test regen_fixtures -- --ignored`.

mod common;

use cfq_core::corpus::{self, CorpusInputs, CorpusOptions, CorpusTemplates, MergeSettings, Stages, TextRecord, DEFAULT_GROUP_SIZE};
use cfq_core::embedding::SyntheticEncoder;
use cfq_core::enhancer::{LlmEnhancer, QueryEnhancer};
use cfq_core::genclient::{GenClient, GenerationCache};
use cfq_core::harness::{sample_queries, RunSpec};
use cfq_core::template::{PromptTemplate, DEFAULT_ENHANCE};
use cfq_core::types::{write_jsonl, ImageRecord};
use common::*;
use std::sync::Arc;

const RUN_TOML: &str = r#"manifest = "manifest"
out_dir = "out"
modes = ["baseline", "enhanced_maxsim", "enhanced_vote"]
granularities = ["caption", "imagery_tag", "phrase", "triple", "fragment"]
parallelism = 2
heatmaps = 2

[retrieval]
n_initial = 1000
k1 = 4
k_final = 5

[sample]
count = 6
seed = 3

[enhancement]
batches = 3
retries = 2

[generation]
cache_dir = "cache"
offline = true

[[encoders]]
name = "syn-a"
text = { kind = "synthetic", seed = 11, dim = 64 }

[[encoders]]
name = "syn-b"
text = { kind = "synthetic", seed = 12, dim = 32 }
"#;

fn reset(dir: &std::path::Path) {
    if dir.exists() {
        std::fs::remove_dir_all(dir).unwrap();
    }
    std::fs::create_dir_all(dir).unwrap();
}

#[test]
#[ignore]
fn regenerate_fixtures() {
    let root = fixtures();
    let corpus_dir = root.join("corpus");
    std::fs::create_dir_all(&corpus_dir).unwrap();
    let images: Vec<ImageRecord> = IMAGES.iter().map(|id| ImageRecord { id: id.to_string(), uri: format!("images/{id}.jpg"), embedding_id: None }).collect();
    let captions: Vec<TextRecord> = CAPTIONS.iter().map(|c| TextRecord { id: c.id.into(), image_id: c.image.into(), text: c.text.into() }).collect();
    let phrases: Vec<TextRecord> = PHRASES.iter().map(|(id, img, t)| TextRecord { id: id.to_string(), image_id: img.to_string(), text: t.to_string() }).collect();
    write_jsonl(corpus_dir.join("images.jsonl"), &images).unwrap();
    write_jsonl(corpus_dir.join("captions.jsonl"), &captions).unwrap();
    write_jsonl(corpus_dir.join("phrases.jsonl"), &phrases).unwrap();

    let cache_dir = corpus_dir.join("cache");
    reset(&cache_dir);
    let (transport, _) = ScriptedTransport::new();
    let client = GenClient::new(GenerationCache::open(&cache_dir).unwrap(), Some(Box::new(transport)));
    let opts = CorpusOptions {
        model: "gpt-3.5-turbo".into(),
        vision_model: "gpt-4o".into(),
        group_size: DEFAULT_GROUP_SIZE,
        templates: CorpusTemplates::load(None).unwrap(),
    };
    let inputs = CorpusInputs::load(&corpus_dir.join("images.jsonl"), &corpus_dir.join("captions.jsonl"), Some(&corpus_dir.join("phrases.jsonl"))).unwrap();
    let work = tempfile::tempdir().unwrap();
    let bench = root.join("bench");
    reset(&bench);
    let encoder = SyntheticEncoder::new(7, 64);
    let merge = MergeSettings { tau: 0.9, encoder: &encoder };
    let out = corpus::run_stages(&inputs, work.path(), Some(&bench.join("manifest")), &client, &opts, Stages::ALL, Some(merge)).unwrap().unwrap();
    println!("{}", out.summary);

    std::fs::write(bench.join("run.toml"), RUN_TOML).unwrap();
    let spec = RunSpec::load(bench.join("run.toml")).unwrap();
    let manifest = spec.load_manifest().unwrap();
    let (transport, calls) = ScriptedTransport::new();
    let client = Arc::new(GenClient::new(GenerationCache::open(bench.join("cache")).unwrap(), Some(Box::new(transport))));
    let g = spec.generation_config().unwrap();
    let enhancer = LlmEnhancer::new(client, PromptTemplate::parse(DEFAULT_ENHANCE).unwrap(), g.model)
        .unwrap()
        .with_batches(spec.enhancement.batches)
        .with_retries(spec.enhancement.retries);
    for &gran in &spec.granularities {
        for q in sample_queries(&manifest, gran, spec.sample) {
            enhancer.enhance(&q.text).unwrap();
        }
    }
    println!("{} enhancement calls", calls.load(std::sync::atomic::Ordering::SeqCst));
}
