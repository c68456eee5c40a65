//! Values recorded from the shipped fixture run in `fixtures/golden`.

use std::path::{Path, PathBuf};

use deltallm::checkpoint;
use deltallm::cli::unigram_ppl;
use deltallm::corpus::load_corpus;
use deltallm_core::delta::{compress, CompressOptions, InitMethod, InitOptions, PlanStrategy, Rank, RankMap};
use deltallm_core::model::perplexity;
use deltallm_core::redundancy::{build_plan, layer_similarity, sample_windows, PlanRequest, SublayerChoice};
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(root().join("fixtures/golden").join(name)).unwrap()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * b.abs()
}

#[test]
fn teacher_and_student_perplexities() {
    let corpus = load_corpus(root().join("fixtures/corpus.txt"), 0).unwrap();
    let teacher = checkpoint::load(root().join("fixtures/teacher.dllm")).unwrap().0.into_model().unwrap();
    let val = &corpus.val()[..16_385];
    let g = golden("recovery.json");
    let ppl = perplexity(&teacher, val, 128, 8).unwrap();
    assert!(close(ppl, g["teacher_ppl"].as_f64().unwrap()), "{ppl}");
    let unigram = unigram_ppl(corpus.train(), val, 258);
    assert!(ppl < unigram / 10.0, "{ppl} vs unigram {unigram}");

    let req = PlanRequest { strategy: PlanStrategy::Sequential, sublayer: SublayerChoice::Mlp, k: 3, protected_blocks: None };
    let plan = build_plan(&teacher.config, &req, None).unwrap();
    assert_eq!(plan.target_blocks(), [3, 4, 5]);
    let o = CompressOptions { ranks: RankMap::uniform(Rank::Fixed(16)), method: InitMethod::Svd, init: InitOptions::default(), seed: 0 };
    let student = compress(&teacher, &plan, &o, None).unwrap();
    let s = perplexity(&student, val, 128, 8).unwrap();
    assert!(close(s, g["initial_ppl"].as_f64().unwrap()), "{s}");
}

#[test]
fn recorded_runs_are_consistent() {
    let r = golden("recovery.json");
    let teacher = r["teacher_ppl"].as_f64().unwrap();
    for run in r["runs"].as_array().unwrap() {
        assert!(run["final_ppl"].as_f64().unwrap() <= 1.15 * teacher);
        assert!(run["tokens"].as_u64().unwrap() <= 2_000_000);
    }
    let c = golden("pmr_comparison.json");
    let pmr = c["pmr_epochs_to_threshold"].as_u64().unwrap();
    let base = c["baseline_epochs_to_threshold"].as_u64().unwrap();
    assert!(pmr <= base, "{pmr} vs {base}");
    assert!(c["pmr"]["converged_epoch"].is_u64());
}

#[test]
fn similarity_table_matches() {
    let corpus = load_corpus(root().join("fixtures/corpus.txt"), 0).unwrap();
    let teacher = checkpoint::load(root().join("fixtures/teacher.dllm")).unwrap().0.into_model().unwrap();
    let windows = sample_windows(corpus.train(), 8192, 128, 0).unwrap();
    let report = layer_similarity(&teacher, &windows, SublayerChoice::Both, &corpus.id).unwrap();
    let table = std::fs::read_to_string(root().join("fixtures/golden/similarity.tsv")).unwrap();
    let fresh = report.to_table();
    for (want, got) in table.lines().zip(fresh.lines()).skip(1) {
        let w: Vec<&str> = want.split('\t').collect();
        let g: Vec<&str> = got.split('\t').collect();
        assert_eq!((w[0], w[2]), (g[0], g[2]));
        let (a, b): (f64, f64) = (w[1].parse().unwrap(), g[1].parse().unwrap());
        assert!((a - b).abs() <= 1.5e-6, "{}: {a} vs {b}", w[0]);
    }
    assert_eq!(table.lines().count(), fresh.lines().count());
}
