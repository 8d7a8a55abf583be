use anyhow::{bail, Context, Result};
use cfq_core::corpus::{self, CorpusInputs, CorpusOptions, CorpusTemplates, MergeSettings, Stages, DEFAULT_GROUP_SIZE};
use cfq_core::embedding::{EmbeddingProvider, EmbeddingStore, Provenance, SyntheticEncoder};
use cfq_core::enhancer::QueryEnhancer;
use cfq_core::genclient::{GenClient, GenerationConfig, ImageMode};
use cfq_core::harness::{self, EncoderSpec, RunSpec, SampleSpec, TextEncoderSpec};
use cfq_core::types::{validate_manifest, DatasetManifest, RetrievalMode};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeSet;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "cfq", version, about = "Multi-granularity text-to-image retrieval benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a manifest directory for referential and record errors.
    Validate {
        manifest: PathBuf,
    },
    /// Build embedding stores for one configured encoder.
    Embed(EmbedArgs),
    /// Generate (or replay) enhancements for the sampled queries.
    Enhance(RunArgs),
    /// Run the benchmark.
    Run(RunArgs),
    /// Write the similarity matrix for one query.
    Heatmap(HeatmapArgs),
    /// Per-cell differences between two report.csv files (second minus first).
    Compare {
        a: PathBuf,
        b: PathBuf,
    },
    /// Build a five-granularity manifest from captions and phrases.
    BuildCorpus(CorpusArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Add a synthetic encoder, `NAME:SEED:DIM`.
    #[arg(long = "synthetic", value_name = "NAME:SEED:DIM")]
    synthetic: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    granularities: Option<Vec<String>>,
    #[arg(long)]
    n_initial: Option<usize>,
    #[arg(long)]
    k1: Option<usize>,
    #[arg(long)]
    k_final: Option<usize>,
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    sample_count: Option<usize>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    heatmaps: Option<usize>,
    /// Generation cache directory; enables enhanced modes without a config.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Chat model name used for enhancement.
    #[arg(long)]
    model: Option<String>,
    /// Serve generations from the cache only.
    #[arg(long)]
    offline: bool,
}

fn parse_labels<T: std::str::FromStr<Err = cfq_core::types::UnknownLabel>>(v: &[String]) -> Result<Vec<T>> {
    v.iter().map(|s| s.trim().parse::<T>().map_err(anyhow::Error::from)).collect()
}

fn parse_synthetic(s: &str) -> Result<EncoderSpec> {
    let parts: Vec<&str> = s.split(':').collect();
    let [name, seed, dim] = parts[..] else { bail!("--synthetic expects NAME:SEED:DIM, got `{s}`") };
    Ok(EncoderSpec {
        name: name.to_string(),
        image_store: None,
        text: TextEncoderSpec::Synthetic { seed: seed.parse().context("synthetic seed")?, dim: dim.parse().context("synthetic dim")? },
    })
}

impl RunArgs {
    fn spec(&self) -> Result<RunSpec> {
        let mut spec = match &self.config {
            Some(p) => RunSpec::load(p)?,
            None => {
                let manifest = self.manifest.clone().context("--manifest is required without --config")?;
                let out_dir = self.out_dir.clone().context("--out-dir is required without --config")?;
                let mut s: RunSpec = toml::from_str(&format!("manifest = {:?}\nout_dir = {:?}\nencoders = []", manifest, out_dir))?;
                s.manifest = manifest;
                s.out_dir = out_dir;
                s
            }
        };
        // Paths given on the command line are relative to the working directory.
        let cwd = std::env::current_dir()?;
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { cwd.join(p) };
        if self.config.is_some() {
            if let Some(m) = &self.manifest {
                spec.manifest = abs(m);
            }
            if let Some(o) = &self.out_dir {
                spec.out_dir = abs(o);
            }
        }
        for s in &self.synthetic {
            spec.encoders.push(parse_synthetic(s)?);
        }
        if let Some(m) = &self.modes {
            spec.modes = parse_labels(m)?;
        }
        if let Some(g) = &self.granularities {
            spec.granularities = parse_labels(g)?;
        }
        if let Some(v) = self.n_initial {
            spec.retrieval.n_initial = v;
        }
        if let Some(v) = self.k1 {
            spec.retrieval.k1 = v;
        }
        if let Some(v) = self.k_final {
            spec.retrieval.k_final = v;
        }
        if let Some(v) = self.batches {
            spec.enhancement.batches = v;
        }
        match (self.sample_count, self.sample_seed, spec.sample) {
            (Some(count), seed, prev) => spec.sample = Some(SampleSpec { count, seed: seed.or(prev.map(|p| p.seed)).unwrap_or(0) }),
            (None, Some(seed), Some(prev)) => spec.sample = Some(SampleSpec { seed, ..prev }),
            (None, Some(_), None) => bail!("--sample-seed needs --sample-count"),
            _ => {}
        }
        if let Some(v) = self.pool_size {
            spec.pool_size = Some(v);
        }
        if let Some(v) = self.parallelism {
            spec.parallelism = v;
        }
        if let Some(v) = self.heatmaps {
            spec.heatmaps = v;
        }
        if let Some(dir) = &self.cache_dir {
            let g = spec.generation.get_or_insert_with(|| GenerationConfig { offline: false, ..GenerationConfig::offline(abs(dir)) });
            g.cache_dir = abs(dir);
        }
        if let Some(g) = spec.generation.as_mut() {
            if self.offline {
                g.offline = true;
            }
            if let Some(m) = &self.model {
                g.model = m.clone();
            }
        }
        Ok(spec)
    }
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Encoder to embed with; the first configured one by default.
    #[arg(long)]
    encoder: Option<String>,
    /// Output store for image vectors.
    #[arg(long)]
    images_out: PathBuf,
    /// Output store for text vectors: query texts, plus cached enhancements
    /// with --with-enhanced.
    #[arg(long)]
    texts_out: Option<PathBuf>,
    #[arg(long)]
    with_enhanced: bool,
}

#[derive(Args)]
struct HeatmapArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    query_id: String,
    #[arg(long)]
    encoder: Option<String>,
    #[arg(long, default_value = "enhanced_vote")]
    mode: String,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Stage {
    Tags,
    Triples,
    Fragments,
    Merge,
    Assemble,
}

#[derive(Args)]
struct CorpusArgs {
    /// Image records (`{id, uri}` per line).
    #[arg(long)]
    images: PathBuf,
    /// Caption records (`{id, image_id, text}` per line).
    #[arg(long)]
    captions: PathBuf,
    /// Phrase records, same shape as captions.
    #[arg(long)]
    phrases: Option<PathBuf>,
    /// Directory for intermediate stage outputs.
    #[arg(long)]
    work_dir: PathBuf,
    /// Manifest output directory.
    #[arg(long)]
    out: PathBuf,
    /// Stages to run; all of them when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    stage: Vec<Stage>,
    #[arg(long)]
    cache_dir: PathBuf,
    #[arg(long)]
    offline: bool,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, default_value = "gpt-4o")]
    vision_model: String,
    /// How images reach a vision endpoint: none, uri or base64.
    #[arg(long, default_value = "uri")]
    image_mode: String,
    /// Directory with tags_scene/tags_mood/triples/fragment templates.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GROUP_SIZE)]
    group_size: usize,
    /// Cosine threshold for ground-truth merging; required by the merge stage.
    #[arg(long)]
    tau: Option<f32>,
    /// Text encoder for merging, `SEED:DIM` of the synthetic encoder.
    #[arg(long, value_name = "SEED:DIM")]
    merge_synthetic: Option<String>,
    /// Text store for merging (texts looked up by exact string).
    #[arg(long)]
    merge_store: Option<PathBuf>,
}

fn validate(manifest: &Path) -> Result<ExitCode> {
    let m = DatasetManifest::load(manifest)?;
    let v = validate_manifest(&m);
    for x in &v {
        println!("{x}");
    }
    let counts = m.count_by_granularity();
    eprintln!("{} images, {} queries, {} violation(s)", m.images.len(), counts.iter().sum::<usize>(), v.len());
    Ok(if v.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn embed(args: &EmbedArgs) -> Result<ExitCode> {
    let spec = args.run.spec()?;
    let enc = match &args.encoder {
        Some(n) => spec.encoders.iter().find(|e| &e.name == n).with_context(|| format!("no encoder `{n}`"))?,
        None => spec.encoders.first().context("no encoders configured")?,
    };
    if matches!(enc.text, TextEncoderSpec::Store { .. }) {
        bail!("encoder `{}` reads a prebuilt store and cannot embed new inputs", enc.name);
    }
    let manifest = spec.load_manifest()?;
    let provider = harness::text_provider(enc, &spec.base_dir)?;
    let images = harness::image_store(&EncoderSpec { image_store: None, ..enc.clone() }, &spec.base_dir, &manifest, provider.as_ref())?;
    images.save(&args.images_out)?;
    eprintln!("wrote {} image vectors to {}", images.len(), args.images_out.display());

    if let Some(out) = &args.texts_out {
        let mut texts: BTreeSet<String> = manifest.queries.iter().map(|q| q.text.clone()).collect();
        if args.with_enhanced {
            let (_, enhancer) = harness::build_enhancer(&spec)?.context("--with-enhanced needs a generation cache")?;
            let mut missing = 0;
            for q in &manifest.queries {
                match enhancer.enhance(&q.text) {
                    Ok(e) => texts.extend(e.pooled),
                    Err(_) => missing += 1,
                }
            }
            if missing > 0 {
                eprintln!("{missing} queries had no usable enhancement");
            }
        }
        let texts: Vec<String> = texts.into_iter().collect();
        let vectors = provider.embed_texts(&texts)?;
        let dim = vectors.first().map_or(0, |v| v.dim());
        let store = EmbeddingStore::build(dim, texts.into_iter().zip(vectors.into_iter().map(|v| v.into_values())), Provenance { encoder: enc.name.clone(), created_at: None })?;
        store.save(out)?;
        eprintln!("wrote {} text vectors to {}", store.len(), out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn enhance(args: &RunArgs) -> Result<ExitCode> {
    let spec = args.spec()?;
    let (failures, stats) = harness::prewarm(&spec)?;
    for (id, e) in &failures {
        println!("{id}: {e}");
    }
    eprintln!("cache hits {}, misses {}, network calls {}, failures {}", stats.hits, stats.misses, stats.network_calls, failures.len());
    Ok(if failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn run(args: &RunArgs) -> Result<ExitCode> {
    let spec = args.spec()?;
    let summary = harness::run_benchmark(&spec)?;
    let report = std::fs::read_to_string(summary.out_dir.join(harness::REPORT_TXT))?;
    print!("{report}");
    eprintln!("{} records, {} cells failed, output in {}", summary.records, summary.failed.len(), summary.out_dir.display());
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn heatmap(args: &HeatmapArgs) -> Result<ExitCode> {
    let spec = args.run.spec()?;
    let mode: RetrievalMode = args.mode.parse()?;
    let m = harness::query_heatmap(&spec, &args.query_id, args.encoder.as_deref(), mode)?;
    match &args.out {
        Some(p) => harness::write_heatmap(p, &m)?,
        None => print!("{}", harness::render_heatmap(&m)),
    }
    Ok(ExitCode::SUCCESS)
}

fn compare(a: &Path, b: &Path) -> Result<ExitCode> {
    let rows = harness::compare_runs(&harness::read_report(a)?, &harness::read_report(b)?)?;
    print!("{}", harness::render_comparison(&rows));
    Ok(ExitCode::SUCCESS)
}

fn build_corpus(args: &CorpusArgs) -> Result<ExitCode> {
    let stages = if args.stage.is_empty() {
        Stages::ALL
    } else {
        let has = |s| args.stage.contains(&s);
        Stages { tags: has(Stage::Tags), triples: has(Stage::Triples), fragments: has(Stage::Fragments), merge: has(Stage::Merge), assemble: has(Stage::Assemble) }
    };
    if stages.merge && !stages.assemble {
        bail!("the merge stage runs during assembly; add --stage assemble");
    }
    let image_mode = match args.image_mode.as_str() {
        "none" => ImageMode::None,
        "uri" => ImageMode::Uri,
        "base64" => ImageMode::Base64,
        other => bail!("unknown image mode `{other}`"),
    };
    let gen = GenerationConfig { offline: args.offline, image_mode, model: args.model.clone(), ..GenerationConfig::offline(&args.cache_dir) };
    let client = GenClient::from_config(&gen)?;
    let opts = CorpusOptions {
        model: args.model.clone(),
        vision_model: args.vision_model.clone(),
        group_size: args.group_size,
        templates: CorpusTemplates::load(args.templates.as_deref())?,
    };
    let inputs = CorpusInputs::load(&args.images, &args.captions, args.phrases.as_deref())?;

    let encoder: Option<Arc<dyn EmbeddingProvider>> = match (&args.merge_synthetic, &args.merge_store) {
        (Some(s), None) => {
            let (seed, dim) = s.split_once(':').context("--merge-synthetic expects SEED:DIM")?;
            Some(Arc::new(SyntheticEncoder::new(seed.parse()?, dim.parse()?)))
        }
        (None, Some(p)) => Some(Arc::new(cfq_core::embedding::FileProvider::new("store", Arc::new(EmbeddingStore::load(p)?)))),
        (None, None) => None,
        _ => bail!("give only one of --merge-synthetic and --merge-store"),
    };
    let merge = if stages.merge {
        let tau = args.tau.context("the merge stage needs an explicit --tau")?;
        let encoder = encoder.as_deref().context("the merge stage needs --merge-synthetic or --merge-store")?;
        Some(MergeSettings { tau, encoder })
    } else {
        None
    };
    let out = corpus::run_stages(&inputs, &args.work_dir, Some(&args.out), &client, &opts, stages, merge)?;
    if let Some(o) = out {
        println!("{}", o.summary);
        eprintln!("manifest written to {}", args.out.display());
    }
    let s = client.stats();
    eprintln!("cache hits {}, misses {}, network calls {}", s.hits, s.misses, s.network_calls);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("CFQ_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Validate { manifest } => validate(manifest),
        Command::Embed(a) => embed(a),
        Command::Enhance(a) => enhance(a),
        Command::Run(a) => run(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Compare { a, b } => compare(a, b),
        Command::BuildCorpus(a) => build_corpus(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
