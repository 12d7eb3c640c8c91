//! End-to-end acceptance checks. Runs without the test harness so each
//! check's PASS/FAIL line is always printed; exits non-zero on any failure.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use jointnlp::autograd::Graph;
use jointnlp::corpus::{format_corpus, parse_columns, Schema, Sentence};
use jointnlp::dep::{mst_decode, ArcScores};
use jointnlp::leakage::{audit, deduplicate, resplit_pos, SentenceKey};
use jointnlp::model::ModelConfig;
use jointnlp::ner::CrfPotentials;
use jointnlp::trainer::{
    joint_loss, make_epoch_schedule, multi_seed, train, train_step, validate, Checkpoint, TaskCorpora, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use common::*;

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn crf_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(1..=4);
        let em = random_matrix(&mut rng, n, k, 3.0);
        let tr = random_matrix(&mut rng, k, k, 3.0);
        let st = random_matrix(&mut rng, 1, k, 3.0).remove(0);
        let en = random_matrix(&mut rng, 1, k, 3.0).remove(0);
        let (em_t, tr_t) = (to_tensor(&em), to_tensor(&tr));
        let crf = CrfPotentials::new(&em_t, &tr_t, &st, &en).map_err(|e| e.to_string())?;
        let (log_z, best) = brute_crf(&em, &tr, &st, &en);
        let rel = (crf.log_partition() - log_z).abs() / log_z.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure!(rel <= 1e-8, "case {case}: log Z {} vs {log_z}", crf.log_partition());
        let path = crf.viterbi();
        ensure!(path.score == best, "case {case}: viterbi score {} vs {best}", path.score);
        let rescored = crf_path_score(&em, &tr, &st, &en, &path.labels);
        ensure!(rescored == best, "case {case}: viterbi path scores {rescored} vs {best}");
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    Ok(format!("500 instances, worst log Z rel err {worst:.1e}, {took:.2?}"))
}

fn mst_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..1000 {
        let n = rng.random_range(1..=5);
        let size = n + 1;
        // every other instance uses small integers so ties are common
        let scores: Vec<f64> = (0..size * size)
            .map(|_| {
                if case % 2 == 0 {
                    rng.random_range(-5.0..5.0)
                } else {
                    rng.random_range(-2i32..=2) as f64
                }
            })
            .collect();
        let arcs = ArcScores::new(n, scores).map_err(|e| e.to_string())?;
        let heads = mst_decode(&arcs);
        ensure!(is_single_root_tree(&heads), "case {case}: {heads:?} is not a single-root tree");
        let best = brute_mst(n, |d, h| arcs.get(d, h));
        ensure!(arcs.tree_score(&heads) == best, "case {case}: {} vs {best}", arcs.tree_score(&heads));
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("1000 instances, {took:.2?}"))
}

fn gradient_check() -> Check {
    let sentence = three_token_sentence();
    let mut model = tiny_model(std::slice::from_ref(&sentence), 5);
    let lambdas = (0.4, 0.2);
    {
        let mut g = Graph::new();
        let batch = [&sentence];
        let (total, _) = joint_loss(&model, &mut g, [&batch, &batch, &batch], lambdas.0, lambdas.1).map_err(|e| e.to_string())?;
        g.backward(total, &mut model.store).map_err(|e| e.to_string())?;
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut worst = (0.0f64, String::new());
    for id in ids {
        let analytic = model.store.grad(id).data().to_vec();
        let numeric = numeric_grad(&mut model, id, &sentence, lambdas, 1e-6);
        let err = relative_error(&analytic, &numeric);
        let name = model.store.name(id).to_string();
        ensure!(err < 1e-4, "{name}: relative error {err:.2e}");
        if err >= worst.0 {
            worst = (err, name);
        }
    }
    Ok(format!(
        "{} parameter groups, worst {} at {:.2e}",
        model.store.len(),
        worst.1,
        worst.0
    ))
}

fn loss_identity() -> Check {
    let toy = toy_corpus();
    let data = TaskCorpora::shared(&toy);
    let mut steps = 0;
    for &(lp, ln) in &[(0.4, 0.2), (0.1, 0.7), (1.0, 0.0), (0.0, 0.0)] {
        let config = TrainConfig {
            lr: 1e-3,
            lambda_pos: lp,
            lambda_ner: ln,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut model = tiny_model(&toy.sentences, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2 {
            for [p, n, d] in make_epoch_schedule(data.sizes(), 16, &mut rng).map_err(|e| e.to_string())? {
                let pick = |ids: &[usize]| ids.iter().map(|&i| &toy.sentences[i]).collect::<Vec<&Sentence>>();
                let (p, n, d) = (pick(&p), pick(&n), pick(&d));
                let l = train_step(&mut model, [&p, &n, &d], &config).map_err(|e| e.to_string())?;
                let expected = lp * l.pos + ln * l.ner + (1.0 - lp - ln) * l.dep;
                ensure!(
                    (l.combined - expected).abs() <= 1e-12,
                    "lambdas ({lp}, {ln}): combined {} vs {expected}",
                    l.combined
                );
                steps += 1;
            }
        }
    }

    // With all weight on POS, the combined gradient equals the POS-only one.
    let mut model = tiny_model(&toy.sentences, 3);
    let batch: Vec<&Sentence> = toy.sentences.iter().take(4).collect();
    let mut g = Graph::new();
    let (total, parts) = joint_loss(&model, &mut g, [&batch, &batch, &batch], 1.0, 0.0).map_err(|e| e.to_string())?;
    let mut pos_only = model.clone();
    g.backward(total, &mut model.store).map_err(|e| e.to_string())?;
    g.backward(parts[0], &mut pos_only.store).map_err(|e| e.to_string())?;
    drop(g);
    let mut untouched = 0;
    for id in model.store.ids() {
        let (a, b) = (model.store.grad(id), pos_only.store.grad(id));
        ensure!(a.data() == b.data(), "{}: combined gradient differs from POS-only", model.store.name(id));
        let name = model.store.name(id);
        if name.starts_with("ner.") || name.starts_with("dep.") {
            ensure!(a.data().iter().all(|&v| v == 0.0), "{name} has a non-zero gradient");
            untouched += 1;
        }
    }
    let opt = TrainConfig::default().optimizer();
    model.store.adamw_step(&opt);
    pos_only.store.adamw_step(&opt);
    for id in model.store.ids() {
        ensure!(
            model.store.value(id).data() == pos_only.store.value(id).data(),
            "{} differs after the update",
            model.store.name(id)
        );
    }
    Ok(format!("{steps} steps within 1e-12; {untouched} NER/parser groups with zero gradient at weights (1, 0)"))
}

struct ToyRun {
    checkpoint: Checkpoint,
    dir: TempDir,
}

fn toy_train() -> std::result::Result<(ToyRun, Duration), String> {
    let toy = toy_corpus();
    let data = TaskCorpora::shared(&toy);
    let start = Instant::now();
    let checkpoint = train(&toy_train_config(), &ModelConfig::default(), &data, &data).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    checkpoint.save(dir.path()).map_err(|e| e.to_string())?;
    Ok((ToyRun { checkpoint, dir }, took))
}

fn overfit(run: &mut Option<ToyRun>) -> Check {
    let (toy, took) = toy_train()?;
    let s = toy.checkpoint.scores;
    let epochs = toy.checkpoint.history.len() - 1;
    let summary = format!(
        "pos {:.2} ner {:.2} las {:.2} after {epochs} epochs in {took:.1?}",
        100.0 * s.pos_accuracy,
        100.0 * s.ner_f1,
        100.0 * s.las
    );
    *run = Some(toy);
    let toy = run.as_ref().unwrap();
    ensure!(epochs == 200, "{summary}");
    ensure!(s.pos_accuracy == 1.0 && s.ner_f1 == 1.0 && s.las >= 0.95, "{summary}");
    ensure!(took < Duration::from_secs(120), "{summary}");

    let work = TempDir::new().map_err(|e| e.to_string())?;
    let input = work.path().join("input.txt");
    let output = work.path().join("output.conll");
    fs::write(&input, "Tôi đang làm_việc tại VinAI .\n").map_err(|e| e.to_string())?;
    let code = jointnlp::cli::run([
        "jointnlp",
        "--mode",
        "annotate",
        "--save_dir",
        toy.dir.path().to_str().unwrap(),
        "--input_file",
        input.to_str().unwrap(),
        "--output_file",
        output.to_str().unwrap(),
    ]);
    ensure!(code == 0, "annotate exited with {code}");
    let text = fs::read_to_string(&output).map_err(|e| e.to_string())?;
    let row = text.lines().nth(4).unwrap_or_default();
    let spaced = row.split_whitespace().collect::<Vec<_>>().join(" ");
    ensure!(spaced == "5 VinAI Np B-ORG 4 pob", "{summary}; annotate row 5 is {row:?}");
    Ok(format!("{summary}; annotate row {spaced:?}"))
}

fn fixture_files() -> Vec<(String, Schema)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    vec![
        (dir.join("data/toy.conll").display().to_string(), Schema::Joint),
        (dir.join("tests/fixtures/sample.pos").display().to_string(), Schema::Pos),
        (dir.join("tests/fixtures/sample.ner").display().to_string(), Schema::Ner),
        (dir.join("tests/fixtures/sample.conllx").display().to_string(), Schema::Dep),
        (dir.join("tests/fixtures/sample.joint").display().to_string(), Schema::Joint),
    ]
}

fn format_fidelity(run: Option<&ToyRun>) -> Check {
    let files = fixture_files();
    for (path, schema) in &files {
        let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
        let first = parse_columns(&text, *schema, path).map_err(|e| e.to_string())?;
        let written = format_corpus(&first, *schema);
        let second = parse_columns(&written, *schema, "rewritten").map_err(|e| e.to_string())?;
        ensure!(first == second, "{path}: round trip changed the corpus");
        ensure!(format_corpus(&second, *schema) == written, "{path}: second write differs");
    }

    let run = run.ok_or("no toy checkpoint (overfit run failed)")?;
    let toy = toy_corpus();
    let forms: String = toy
        .sentences
        .iter()
        .map(|s| s.forms().join(" ") + "\n")
        .collect();
    let (annotated, count) = jointnlp::cli::annotate_text(&run.checkpoint.model, &forms).map_err(|e| e.to_string())?;
    let reparsed = parse_columns(&annotated, Schema::Joint, "annotated").map_err(|e| e.to_string())?;
    ensure!(reparsed.len() == count && count == toy.len(), "annotate produced {} sentences", reparsed.len());

    let loaded = Checkpoint::load(run.dir.path()).map_err(|e| e.to_string())?;
    let data = TaskCorpora::shared(&toy);
    let scores = validate(&loaded.model, &data, false).map_err(|e| e.to_string())?;
    let bits = |s: &jointnlp::trainer::ValidationScores| {
        [s.pos_accuracy, s.ner_f1, s.uas, s.las, s.average].map(f64::to_bits)
    };
    ensure!(bits(&scores) == bits(&run.checkpoint.scores), "reloaded {scores:?} vs {:?}", run.checkpoint.scores);
    ensure!(bits(&loaded.scores) == bits(&scores), "stored scores differ from recomputed ones");
    Ok(format!("{} fixtures round-trip, {count} annotated sentences re-parse, reload scores identical", files.len()))
}

fn dir_bytes(dir: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), fs::read(entry.path())?);
    }
    Ok(out)
}

fn determinism(run: Option<&ToyRun>) -> Check {
    let run = run.ok_or("no toy checkpoint (overfit run failed)")?;
    let (second, _) = toy_train()?;
    let a = dir_bytes(run.dir.path()).map_err(|e| e.to_string())?;
    let b = dir_bytes(second.dir.path()).map_err(|e| e.to_string())?;
    ensure!(a.keys().eq(b.keys()), "file sets differ: {:?} vs {:?}", a.keys(), b.keys());
    for (name, bytes) in &a {
        ensure!(bytes == &b[name], "{name} differs between runs");
    }

    let toy = toy_corpus();
    let data = TaskCorpora::shared(&toy);
    let config = TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    };
    let result = multi_seed(&config, &ModelConfig::default(), &data, &data, &data, &[7, 7]).map_err(|e| e.to_string())?;
    ensure!(result.rows[0] == result.rows[1], "rows differ: {:?}", result.rows);
    ensure!(result.stdev.average == 0.0, "non-zero spread {:?}", result.stdev);
    Ok(format!("{} checkpoint files byte-identical; duplicated seeds give identical rows", a.len()))
}

fn leakage_protocol() -> Check {
    let fx = leak_fixture(594);
    let report = audit(&fx.pos, &fx.ner, &fx.dep);
    let ner_test = report.overlap("ner.test").ok_or("no ner.test row")?;
    ensure!(ner_test.percent == 90.0, "ner.test overlap {}%", ner_test.percent);
    ensure!(report.redundant_sentences() == 594, "audit counts {} duplicates", report.redundant_sentences());

    let all = pos_union(&fx.pos);
    let (deduped, removed) = deduplicate(&all);
    ensure!(removed == 594, "deduplicate removed {removed}");

    let resplit = resplit_pos(&deduped, &fx.ner, &fx.dep, true).map_err(|e| e.to_string())?;
    let after = audit(&resplit.splits, &fx.ner, &fx.dep);
    for o in &after.overlaps {
        ensure!(o.count == 0 && o.percent == 0.0, "{} still {}% inside {}", o.target, o.percent, o.source);
    }
    ensure!(after.pos_duplicates.is_empty(), "duplicates survive the resplit");
    let sizes = resplit.splits.sizes();
    ensure!(sizes.iter().sum::<usize>() == deduped.len(), "sizes {sizes:?} vs {}", deduped.len());
    let mut parts: Vec<SentenceKey> = pos_union(&resplit.splits).sentences.iter().map(SentenceKey::of).collect();
    let mut whole: Vec<SentenceKey> = deduped.sentences.iter().map(SentenceKey::of).collect();
    parts.sort();
    whole.sort();
    ensure!(parts == whole, "splits do not partition the deduplicated corpus");
    Ok(format!(
        "audit {:.0}% / {} duplicates, removed {removed}, resplit sizes {sizes:?}, 0% overlap",
        ner_test.percent,
        report.redundant_sentences()
    ))
}

fn schedule_arithmetic() -> Check {
    let sizes = [23906, 14861, 8977];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let schedule = make_epoch_schedule(sizes, 32, &mut rng).map_err(|e| e.to_string())?;
    ensure!(schedule.len() == 748, "{} steps", schedule.len());
    let mut pos: Vec<usize> = schedule.iter().flat_map(|b| b[0].iter().copied()).collect();
    pos.sort_unstable();
    ensure!(pos == (0..23906).collect::<Vec<_>>(), "POS stream is not one full pass");
    for (task, &size) in sizes.iter().enumerate().skip(1) {
        let stream: Vec<usize> = schedule.iter().flat_map(|b| b[task].iter().copied()).collect();
        ensure!(stream.len() == 23906, "stream {task} has {} entries", stream.len());
        let distinct: std::collections::HashSet<_> = stream.iter().collect();
        ensure!(distinct.len() == size, "stream {task} covers {} of {size}", distinct.len());
    }
    let again = make_epoch_schedule(sizes, 32, &mut ChaCha8Rng::seed_from_u64(9)).map_err(|e| e.to_string())?;
    ensure!(again == schedule, "same seed gave a different schedule");
    Ok("748 triples, POS consumed once, reproducible".to_string())
}

fn report(id: usize, name: &str, check: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".to_string()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.as_str()),
        Err(d) => ("FAIL", d.as_str()),
    };
    println!("{tag} {id} {name}: {detail} [{:.1?}]", start.elapsed());
    outcome.is_ok()
}

fn main() {
    let mut toy: Option<ToyRun> = None;
    let results = [
        report(1, "crf", crf_oracle),
        report(2, "mst", mst_oracle),
        report(3, "gradients", gradient_check),
        report(4, "loss identity", loss_identity),
        report(5, "overfit", || overfit(&mut toy)),
        report(6, "leakage", leakage_protocol),
        report(7, "schedule", schedule_arithmetic),
        report(8, "format fidelity", || format_fidelity(toy.as_ref())),
        report(9, "determinism", || determinism(toy.as_ref())),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(i, _)| i + 1).collect();
    if failed.is_empty() {
        println!("acceptance: all {} checks passed", results.len());
    } else {
        println!("acceptance: failed checks {failed:?}");
        std::process::exit(1);
    }
}
