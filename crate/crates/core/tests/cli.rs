mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use jointnlp::corpus::{format_corpus, parse_columns, Schema};
use tempfile::TempDir;

fn jointnlp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointnlp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Quick model over the toy corpus.
fn trained(dir: &Path) {
    let toy = common::toy_path();
    let out = jointnlp(&[
        "--mode", "train", "--save_dir", p(dir),
        "--corpus-format", "joint",
        "--joint-train", p(&toy), "--joint-valid", p(&toy),
        "--epochs", "2", "--lr", "0.01", "--batch-size", "16",
        "--encoder-dim", "8", "--parser-dim", "16",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn no_arguments_prints_help() {
    let out = jointnlp(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--mode"));
}

#[test]
fn bad_lambdas_are_rejected() {
    let dir = TempDir::new().unwrap();
    let toy = common::toy_path();
    let out = jointnlp(&[
        "--mode", "train", "--save_dir", p(dir.path()),
        "--corpus-format", "joint",
        "--joint-train", p(&toy), "--joint-valid", p(&toy),
        "--lambda-pos", "0.8", "--lambda-ner", "0.5",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("must not exceed 1"), "{}", stderr(&out));
}

#[test]
fn missing_flag_names_the_flag() {
    let out = jointnlp(&["--mode", "annotate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--save_dir"));
}

#[test]
fn train_eval_annotate_bench() {
    let work = TempDir::new().unwrap();
    let model = work.path().join("model");
    trained(&model);
    for file in ["config.json", "training.json", "merges.txt", "params.bin", "params.manifest", "vocab.pos.txt"] {
        assert!(model.join(file).exists(), "{file} missing");
    }

    let toy = common::toy_path();
    let scores = work.path().join("scores.json");
    let out = jointnlp(&[
        "--mode", "eval", "--save_dir", p(&model),
        "--corpus-format", "joint", "--joint-test", p(&toy),
        "--output_file", p(&scores),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&scores).unwrap()).unwrap();
    for key in ["pos_accuracy", "ner_f1", "uas", "las", "average"] {
        let x = v[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key} = {x}");
    }

    let input = work.path().join("plain.txt");
    fs::write(&input, "Tôi đang làm_việc tại VinAI .\n\nĐây là Hà_Nội\nchữ_lạ\n").unwrap();
    let annotated = work.path().join("annotated.conll");
    let out = jointnlp(&[
        "--mode", "annotate", "--save_dir", p(&model),
        "--input_file", p(&input), "--output_file", p(&annotated),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&annotated).unwrap();
    let corpus = parse_columns(&text, Schema::Joint, "annotated").unwrap();
    let lengths: Vec<usize> = corpus.sentences.iter().map(|s| s.len()).collect();
    assert_eq!(lengths, vec![6, 3, 1]);
    assert_eq!(format_corpus(&corpus, Schema::Joint), text);

    let bench = work.path().join("bench.json");
    let out = jointnlp(&[
        "--mode", "bench", "--save_dir", p(&model),
        "--input_file", p(&input), "--output_file", p(&bench), "--batch-size", "2",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&bench).unwrap()).unwrap();
    assert_eq!(v["sentences"], 3);
    assert_eq!(v["batch_size"], 2);
}

#[test]
fn multi_seed_and_grid() {
    let work = TempDir::new().unwrap();
    let toy = common::toy_path();
    let base = [
        "--corpus-format", "joint",
        "--joint-train", p(&toy), "--joint-valid", p(&toy), "--joint-test", p(&toy),
        "--epochs", "1", "--lr", "0.01", "--batch-size", "25",
        "--encoder-dim", "8", "--parser-dim", "8", "--eval-final-only",
    ];
    let seeds = work.path().join("seeds.json");
    let model = work.path().join("m");
    let mut args = vec!["--mode", "train", "--save_dir", p(&model), "--seeds", "3,3", "--output_file", p(&seeds)];
    args.extend(base);
    let out = jointnlp(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&seeds).unwrap()).unwrap();
    assert_eq!(v["rows"][0], v["rows"][1]);
    assert_eq!(v["stdev"]["average"], 0.0);

    let grid = work.path().join("grid.json");
    let mut args = vec![
        "--mode", "train", "--save_dir", p(&model),
        "--grid-lr", "0.01,0.001", "--grid-lambda-pos", "0.4,0.3", "--output_file", p(&grid),
    ];
    args.extend(base);
    let out = jointnlp(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&grid).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 4);
    assert!(model.join("training.json").exists());
}

#[test]
fn precomputed_embeddings() {
    let work = TempDir::new().unwrap();
    let toy = common::toy_corpus();
    let mut vectors = String::new();
    let mut seen = std::collections::BTreeSet::new();
    for s in &toy.sentences {
        for w in s.forms() {
            if seen.insert(w.to_string()) {
                let n = seen.len() as f64;
                vectors.push_str(&format!("{w} {} {} {}\n", n.sin(), n.cos(), (n / 7.0).sin()));
            }
        }
    }
    let emb = work.path().join("vectors.txt");
    fs::write(&emb, vectors).unwrap();
    let model = work.path().join("m");
    let path = common::toy_path();
    let out = jointnlp(&[
        "--mode", "train", "--save_dir", p(&model),
        "--corpus-format", "joint", "--joint-train", p(&path), "--joint-valid", p(&path),
        "--epochs", "1", "--lr", "0.01", "--batch-size", "25", "--parser-dim", "8",
        "--embeddings", p(&emb),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let config = fs::read_to_string(model.join("config.json")).unwrap();
    assert!(config.contains("external-precomputed"), "{config}");
}

/// POS/NER/parsing files in their native formats with planted leakage.
fn native_files(dir: &Path) -> Vec<String> {
    let fx = common::leak_fixture(30);
    let mut args = vec!["--corpus-format".to_string(), "native".to_string()];
    for (task, splits, schema) in [("pos", &fx.pos, Schema::Pos), ("ner", &fx.ner, Schema::Ner), ("dep", &fx.dep, Schema::Dep)] {
        for (split, corpus) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
            let path = dir.join(format!("{task}.{split}.txt"));
            fs::write(&path, format_corpus(corpus, schema)).unwrap();
            args.push(format!("--{task}-{split}"));
            args.push(path.display().to_string());
        }
    }
    args
}

#[test]
fn audit_and_resplit() {
    let work = TempDir::new().unwrap();
    let files = native_files(work.path());
    let report = work.path().join("report.txt");
    let mut args = vec!["--mode".to_string(), "audit".to_string(), "--output_file".to_string(), report.display().to_string()];
    args.extend(files.iter().cloned());
    let out = jointnlp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("90.00%"), "{text}");
    assert!(text.contains("30 redundant"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(work.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["overlaps"].as_array().unwrap().len(), 4);

    let out_dir = work.path().join("resplit");
    let mut args = vec![
        "--mode".to_string(), "resplit".to_string(),
        "--output_dir".to_string(), out_dir.display().to_string(), "--strict".to_string(),
    ];
    args.extend(files);
    let out = jointnlp(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", stderr(&out));
    let audit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("audit.json")).unwrap()).unwrap();
    for o in audit["overlaps"].as_array().unwrap() {
        assert_eq!(o["count"], 0);
    }
    let total: usize = ["train", "valid", "test"]
        .iter()
        .map(|s| {
            let text = fs::read_to_string(out_dir.join(format!("pos.{s}.txt"))).unwrap();
            parse_columns(&text, Schema::Pos, s).unwrap().len()
        })
        .sum();
    let fx = common::leak_fixture(30);
    assert_eq!(total, common::pos_union(&fx.pos).len() - 30);
}
