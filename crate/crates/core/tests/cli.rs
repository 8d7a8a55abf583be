mod common;

use cfq_core::embedding::EmbeddingStore;
use common::*;
use std::path::Path;
use std::process::Output;

fn bench_config() -> std::path::PathBuf {
    fixtures().join("bench").join("run.toml")
}

fn code(o: &Output) -> Option<i32> {
    o.status.code()
}

fn run(out: &Path, extra: &[&str]) -> Output {
    cfq().args(["run", "--config"]).arg(bench_config()).arg("--out-dir").arg(out).args(extra).output().unwrap()
}

#[test]
fn validate_reports_violations_with_exit_1() {
    let ok = cfq().arg("validate").arg(fixtures().join("bench").join("manifest")).output().unwrap();
    assert_eq!(code(&ok), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    let tmp = tempfile::tempdir().unwrap();
    let src = fixtures().join("bench").join("manifest");
    for e in std::fs::read_dir(&src).unwrap() {
        let p = e.unwrap().path();
        std::fs::copy(&p, tmp.path().join(p.file_name().unwrap())).unwrap();
    }
    let mut queries = std::fs::read_to_string(tmp.path().join("queries.jsonl")).unwrap();
    queries.push_str("{\"id\":\"extra\",\"text\":\"x\",\"granularity\":\"caption\",\"true_image_ids\":[\"nowhere\"]}\n");
    std::fs::write(tmp.path().join("queries.jsonl"), queries).unwrap();
    let bad = cfq().arg("validate").arg(tmp.path()).output().unwrap();
    assert_eq!(code(&bad), Some(1));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("nowhere"));
}

#[test]
fn missing_manifest_is_a_config_error() {
    let o = cfq().arg("validate").arg("/nonexistent/manifest").output().unwrap();
    assert_eq!(code(&o), Some(2));
}

#[test]
fn compare_of_identical_runs_is_all_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    assert_eq!(code(&run(&a, &[])), Some(0));
    let o = cfq().arg("compare").arg(a.join("report.csv")).arg(a.join("report.csv")).output().unwrap();
    assert_eq!(code(&o), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 5 * 3 * 2);
    assert!(rows.iter().all(|r| r.ends_with("=0.00")));
}

#[test]
fn compare_rejects_mismatched_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&run(&a, &[])), Some(0));
    assert_eq!(code(&run(&b, &["--modes", "baseline"])), Some(0));
    let o = cfq().arg("compare").arg(a.join("report.csv")).arg(b.join("report.csv")).output().unwrap();
    assert_eq!(code(&o), Some(2));
}

#[test]
fn cache_misses_fail_only_enhanced_cells() {
    let tmp = tempfile::tempdir().unwrap();
    // Another seed samples queries whose enhancements are not cached.
    let o = run(tmp.path(), &["--sample-seed", "1"]);
    assert_eq!(code(&o), Some(1));
    let report = std::fs::read_to_string(tmp.path().join("report.txt")).unwrap();
    assert!(report.contains("failed"));
    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert!(csv.lines().filter(|l| l.contains(",baseline,")).count() == 2 * 5 * 2);
}

#[test]
fn baseline_only_run_needs_no_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = fixtures().join("bench").join("manifest");
    let o = cfq()
        .args(["run", "--manifest"])
        .arg(&manifest)
        .arg("--out-dir")
        .arg(tmp.path())
        .args(["--synthetic", "s:1:16", "--modes", "baseline", "--granularities", "caption,phrase", "--k-final", "3"])
        .output()
        .unwrap();
    assert_eq!(code(&o), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.contains("s,phrase,baseline,multi_recall@3,"));
}

#[test]
fn heatmap_matches_the_run_export() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &[])), Some(0));
    let exported = tmp.path().join("heatmaps/syn-a/caption/caption_c01a.tsv");
    let path = tmp.path().join("one.tsv");
    let o = cfq()
        .args(["heatmap", "--config"])
        .arg(bench_config())
        .args(["--query-id", "caption:c01a", "--encoder", "syn-a", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(code(&o), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let single = std::fs::read_to_string(&path).unwrap();
    let from_run = std::fs::read_to_string(exported).unwrap();
    // Same rows; the run export may order columns differently.
    let rows = |s: &str| s.lines().skip(1).map(|l| l.split('\t').take(2).collect::<Vec<_>>().join("\t")).collect::<Vec<_>>();
    assert_eq!(rows(&single), rows(&from_run));
    assert!(single.lines().count() > 2);
}

#[test]
fn embed_writes_image_and_text_stores() {
    let tmp = tempfile::tempdir().unwrap();
    let (images, texts) = (tmp.path().join("img.emb"), tmp.path().join("txt.emb"));
    let o = cfq()
        .args(["embed", "--config"])
        .arg(bench_config())
        .args(["--encoder", "syn-b", "--with-enhanced", "--images-out"])
        .arg(&images)
        .arg("--texts-out")
        .arg(&texts)
        .output()
        .unwrap();
    assert_eq!(code(&o), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let img = EmbeddingStore::load(&images).unwrap();
    assert_eq!((img.len(), img.dim()), (8, 32));
    assert_eq!(img.provenance().encoder, "syn-b");
    let txt = EmbeddingStore::load(&texts).unwrap();
    assert!(txt.get("A man rides a bike down a busy city street.").is_some());
    assert!(txt.len() > 86);
}

#[test]
fn build_corpus_requires_explicit_tau_for_merge() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let base = |stage: &str| {
        let mut c = cfq();
        c.arg("build-corpus")
            .arg("--images").arg(corpus.join("images.jsonl"))
            .arg("--captions").arg(corpus.join("captions.jsonl"))
            .arg("--work-dir").arg(tmp.path().join("w"))
            .arg("--out").arg(tmp.path().join("m"))
            .arg("--cache-dir").arg(corpus.join("cache"))
            .args(["--offline", "--merge-synthetic", "7:64", "--stage", stage]);
        c
    };
    assert_eq!(code(&base("tags,triples,fragments,merge,assemble").output().unwrap()), Some(2));
    // Stages run separately and resume from the work directory.
    assert_eq!(code(&base("tags,triples").output().unwrap()), Some(0));
    assert!(!tmp.path().join("m").exists());
    assert_eq!(code(&base("fragments").output().unwrap()), Some(0));
    let o = base("assemble").output().unwrap();
    assert_eq!(code(&o), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let counts = std::fs::read_to_string(tmp.path().join("m/counts.csv")).unwrap();
    assert_eq!(counts, "Image,Caption,Imagery Tag,Phrase,Triple,Fragment\n8,16,24,0,26,10\n");
}

#[test]
fn offline_build_without_cache_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = fixtures().join("corpus");
    let o = cfq()
        .arg("build-corpus")
        .arg("--images").arg(corpus.join("images.jsonl"))
        .arg("--captions").arg(corpus.join("captions.jsonl"))
        .arg("--work-dir").arg(tmp.path().join("w"))
        .arg("--out").arg(tmp.path().join("m"))
        .arg("--cache-dir").arg(tmp.path().join("empty-cache"))
        .args(["--offline", "--stage", "triples"])
        .output()
        .unwrap();
    assert_eq!(code(&o), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cache miss"));
}
