use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmatch::diff::Tensor;
use gmatch::embeddings::{random_table, EmbeddingTable};
use rand::{Rng, SeedableRng};

fn gmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmatch")).args(args).output().expect("spawn gmatch")
}

fn ok(args: &[&str]) -> String {
    let out = gmatch(args);
    assert!(
        out.status.success(),
        "gmatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    gmatch(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three entity types, 40 entities each; six dense background relations and
/// six task relations of 15-30 triples.
fn write_kg(path: &Path) {
    let mut r = rand::rngs::StdRng::seed_from_u64(5);
    let types = ["person", "city", "team"];
    let ent = |t: usize, i: usize| format!("concept:{}:e{i:02}", types[t]);
    let mut lines = Vec::new();
    for rel in 0..6 {
        let (a, b) = (rel % 3, (rel + 1) % 3);
        for _ in 0..80 {
            lines.push(format!("{}\tconcept:bg{rel}\t{}", ent(a, r.gen_range(0..40)), ent(b, r.gen_range(0..40))));
        }
    }
    for rel in 0..6 {
        let (a, b) = (rel % 3, (rel + 2) % 3);
        for _ in 0..(15 + 3 * rel) {
            lines.push(format!("{}\tconcept:task{rel}\t{}", ent(a, r.gen_range(0..40)), ent(b, r.gen_range(0..40))));
        }
    }
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    dataset: PathBuf,
}

impl Fixture {
    fn new() -> Fixture {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let kg = root.join("kg.tsv");
        write_kg(&kg);
        let dataset = root.join("ds");
        ok(&[
            "build-dataset", "--input", s(&kg), "--out", s(&dataset), "--band-lo", "10", "--band-hi", "50",
            "--split-counts", "2,2,2", "--seed", "11",
        ]);
        Fixture { _dir: dir, root, dataset }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn embeddings(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let mut args = vec!["train-embeddings", "--dataset", s(&self.dataset), "--out", s(&dir), "--dim", "8", "--epochs", "5", "--seed", "11"];
        args.extend_from_slice(extra);
        ok(&args);
        dir.join("table")
    }

    fn matcher_args<'a>(&'a self, table: &'a Path, out: &'a Path, episodes: &'a str) -> Vec<&'a str> {
        vec![
            "train-matcher", "--dataset", s(&self.dataset), "--table", s(table), "--out", s(out), "--hidden", "8",
            "--batch-size", "4", "--max-episodes", episodes, "--eval-interval", "4", "--seed", "11",
        ]
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), read(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn build_is_reproducible_and_strict() {
    let fx = Fixture::new();
    let again = fx.path("ds2");
    ok(&[
        "build-dataset", "--input", s(&fx.path("kg.tsv")), "--out", s(&again), "--band-lo", "10", "--band-hi", "50",
        "--split-counts", "2,2,2", "--seed", "11",
    ]);
    // the frozen config records the output path, so it is the one file allowed to differ
    let strip = |files: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        files.into_iter().filter(|(n, _)| n != "run_config.toml").collect()
    };
    let (a, b) = (strip(dir_files(&fx.dataset)), strip(dir_files(&again)));
    assert_eq!(a.iter().map(|f| &f.0).collect::<Vec<_>>(), b.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between identical builds");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&read(&fx.dataset.join("manifest.json"))).unwrap();
    for key in ["meta_train", "meta_validation", "meta_test"] {
        assert_eq!(manifest[key].as_array().unwrap().len(), 2, "{key}");
    }
    let frozen = String::from_utf8(read(&fx.dataset.join("run_config.toml"))).unwrap();
    assert!(frozen.contains("band_lo = 10"), "{frozen}");

    // lo is exclusive, so the 15-triple relation drops to the background
    let narrow = fx.path("ds3");
    let out = gmatch(&[
        "build-dataset", "--input", s(&fx.path("kg.tsv")), "--out", s(&narrow), "--band-lo", "15", "--band-hi", "50",
        "--split-counts", "2,2,2",
    ]);
    assert_eq!(out.status.code(), Some(1), "5 task relations cannot fill 2,2,2");
}

#[test]
fn full_pipeline_with_paired_report() {
    let fx = Fixture::new();
    let table = fx.embeddings("emb", &[]);
    assert!(fx.path("emb/run_config.toml").exists());
    let loss: Vec<f64> = serde_json::from_slice(&read(&fx.path("emb/loss.json"))).unwrap();
    assert_eq!(loss.len(), 5);

    let out = fx.path("m");
    ok(&fx.matcher_args(&table, &out, "8"));
    for name in ["model.json", "model.bin", "best.json", "last.json", "outcome.json", "run_config.toml"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let log = String::from_utf8(read(&out.join("train_log.jsonl"))).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.iter().filter(|v| v.get("loss").is_some()).count(), 8);
    assert_eq!(lines.iter().filter(|v| v.get("mrr").is_some()).count(), 2);

    let rep = fx.path("rep");
    let stdout = ok(&[
        "evaluate", "--dataset", s(&fx.dataset), "--checkpoint", s(&out.join("model")), "--split", "both", "--out",
        s(&rep),
    ]);
    assert!(stdout.contains("GMatching (transe)"), "{stdout}");
    assert!(stdout.contains("Hits@10"));
    let report: serde_json::Value = serde_json::from_slice(&read(&rep.join("report.json"))).unwrap();
    for split in ["validation", "test"] {
        let mrr = report["splits"][split]["overall"]["mrr"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&mrr));
    }
    assert!(rep.join("run_config.toml").exists());
}

#[test]
fn frozen_config_reproduces_training() {
    let fx = Fixture::new();
    let table = fx.embeddings("emb", &[]);
    let first = fx.path("m1");
    ok(&fx.matcher_args(&table, &first, "6"));
    let second = fx.path("m2");
    ok(&[
        "train-matcher", "--config", s(&first.join("run_config.toml")), "--out", s(&second),
    ]);
    assert_eq!(read(&first.join("model.bin")), read(&second.join("model.bin")));
    assert_eq!(read(&first.join("train_log.jsonl")), read(&second.join("train_log.jsonl")));
}

#[test]
fn resume_continues_identically() {
    let fx = Fixture::new();
    let table = fx.embeddings("emb", &[]);
    let full = fx.path("full");
    ok(&fx.matcher_args(&table, &full, "12"));

    let part = fx.path("part");
    ok(&fx.matcher_args(&table, &part, "4"));
    // leftover lines past the checkpoint are discarded on resume
    let mut log = read(&part.join("train_log.jsonl"));
    log.extend_from_slice(b"{\"step\":5,\"relation\":\"x\",\"loss\":1.0,\"lr\":0.001}\n");
    fs::write(part.join("train_log.jsonl"), log).unwrap();
    let mut args = fx.matcher_args(&table, &part, "12");
    args.push("--resume");
    ok(&args);
    assert_eq!(read(&full.join("train_log.jsonl")), read(&part.join("train_log.jsonl")));
    assert_eq!(read(&full.join("model.bin")), read(&part.join("model.bin")));

    let fresh = fx.path("fresh");
    let mut args = fx.matcher_args(&table, &fresh, "4");
    args.push("--resume");
    assert_eq!(code(&args), 1);
}

#[test]
fn ablation_flags_are_recorded() {
    let fx = Fixture::new();
    let table = fx.embeddings("emb", &[]);
    let out = fx.path("abl");
    let mut args = fx.matcher_args(&table, &out, "4");
    args.extend(["--no-matching-processor", "--no-scaling-factor", "--freeze-embeddings"]);
    ok(&args);
    let frozen = String::from_utf8(read(&out.join("run_config.toml"))).unwrap();
    assert!(frozen.contains("use_matching_processor = false"), "{frozen}");
    assert!(frozen.contains("use_neighbor_encoder = true"));
    let index: serde_json::Value = serde_json::from_slice(&read(&out.join("model.json"))).unwrap();
    let cfg = &index["metadata"]["config"];
    assert_eq!(cfg["use_scaling_factor"], false);
    assert_eq!(cfg["freeze_embeddings"], true);
    assert_eq!(cfg["dim"], 8);
}

#[test]
fn baseline_mode_and_regimes() {
    let fx = Fixture::new();
    let base = fx.embeddings("base", &["--regime", "baseline", "--model", "distmult"]);
    let rep = fx.path("rep");
    let stdout = ok(&[
        "evaluate", "--dataset", s(&fx.dataset), "--baseline", s(&base), "--split", "both", "--out", s(&rep),
    ]);
    assert!(stdout.contains("distmult"), "{stdout}");

    let plain = fx.embeddings("plain", &[]);
    let out = gmatch(&["evaluate", "--dataset", s(&fx.dataset), "--baseline", s(&plain)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regime baseline"));

    let rnd = fx.embeddings("rnd", &["--model", "random"]);
    let rnd2 = fx.embeddings("rnd2", &["--model", "random"]);
    assert_eq!(read(&rnd.with_extension("bin")), read(&rnd2.with_extension("bin")));
    let table = EmbeddingTable::load(&rnd).unwrap();
    assert_eq!(table.dim(), 8);
    assert_eq!(code(&["evaluate", "--dataset", s(&fx.dataset), "--baseline", s(&rnd)]), 2);
}

#[test]
fn k_shot_evaluation_uses_fewer_queries() {
    let fx = Fixture::new();
    let table = fx.embeddings("emb", &[]);
    let out = fx.path("m");
    ok(&fx.matcher_args(&table, &out, "4"));
    let count = |shots: &str| {
        let rep = fx.path(&format!("rep{shots}"));
        ok(&[
            "evaluate", "--dataset", s(&fx.dataset), "--checkpoint", s(&out.join("model")), "--shots", shots,
            "--workers", "2", "--out", s(&rep),
        ]);
        let report: serde_json::Value = serde_json::from_slice(&read(&rep.join("report.json"))).unwrap();
        assert_eq!(report["shots"].as_u64().unwrap().to_string(), shots);
        report["splits"]["test"]["overall"]["count"].as_u64().unwrap()
    };
    // two test relations, each giving up four more queries as references
    assert_eq!(count("1"), count("5") + 8);
}

#[test]
fn exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["build-dataset", "--bogus"]), 1);
    assert_eq!(code(&["build-dataset", "--out", "/tmp/x"]), 1);
    assert_eq!(code(&["build-dataset", "--input", "/nonexistent/kg.tsv", "--out", "/tmp/x"]), 2);

    let fx = Fixture::new();
    let cfg = fx.path("bad.toml");
    fs::write(&cfg, "seed = \"seven\"\n").unwrap();
    assert_eq!(code(&["build-dataset", "--config", s(&cfg)]), 1);
    let cfg = fx.path("bad_split.toml");
    fs::write(&cfg, "[dataset]\nsplit = { Counts = [1, 1, 1] }\nband_lo = 10\nband_hi = 50\n").unwrap();
    assert_eq!(code(&["build-dataset", "--config", s(&cfg), "--input", s(&fx.path("kg.tsv")), "--out", s(&fx.path("o"))]), 1);

    // a table holding NaN makes the very first episode non-finite
    let mut table = random_table(120, 12, 8, 1).unwrap();
    let mut data = table.entity.clone().into_data();
    data.iter_mut().for_each(|x| *x = f64::NAN);
    table.entity = Tensor::matrix(120, 8, data).unwrap();
    let nan = fx.path("nan");
    table.save(&nan).unwrap();
    let out = fx.path("nan_run");
    assert_eq!(code(&fx.matcher_args(&nan, &out, "4")), 3);
}
