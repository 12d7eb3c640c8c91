//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use jointnlp::autograd::{Graph, ParamId, Tensor};
use jointnlp::corpus::{parse_columns, read_column_file, Corpus, Schema, Sentence, Task, Token};
use jointnlp::encoder::{EncoderConfig, EncoderKind};
use jointnlp::model::{JointModel, ModelConfig};
use jointnlp::trainer::{joint_loss, prepare, TaskCorpora, TrainConfig};
use rand::Rng;

pub fn toy_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy.conll")
}

pub fn toy_corpus() -> Corpus {
    read_column_file(&toy_path(), Schema::Joint).expect("toy corpus parses")
}

/// Hyperparameters for overfitting the toy corpus on one core.
pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        batch_size: 16,
        epochs: 200,
        eval_each_epoch: false,
        ..TrainConfig::default()
    }
}

// ---------------------------------------------------------------- CRF

/// Left-to-right sum `start + h₁ + T + h₂ + … + end`.
pub fn crf_path_score(emissions: &[Vec<f64>], trans: &[Vec<f64>], start: &[f64], end: &[f64], path: &[usize]) -> f64 {
    let mut s = start[path[0]] + emissions[0][path[0]];
    for t in 1..path.len() {
        s = s + trans[path[t - 1]][path[t]] + emissions[t][path[t]];
    }
    s + end[path[path.len() - 1]]
}

/// Every label sequence of length `n` over `k` labels.
pub fn all_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |y| {
                    let mut q = p.clone();
                    q.push(y);
                    q
                })
            })
            .collect();
    }
    out
}

/// `(log Z, best score)` by enumeration.
pub fn brute_crf(emissions: &[Vec<f64>], trans: &[Vec<f64>], start: &[f64], end: &[f64]) -> (f64, f64) {
    let k = start.len();
    let scores: Vec<f64> = all_paths(emissions.len(), k)
        .iter()
        .map(|p| crf_path_score(emissions, trans, start, end, p))
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    (log_z, max)
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).expect("rectangular")
}

// ---------------------------------------------------------------- trees

/// True when every token reaches the root and exactly one attaches to it.
pub fn is_single_root_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if heads.iter().filter(|&&h| h == 0).count() != 1 {
        return false;
    }
    for start in 1..=n {
        let mut node = start;
        let mut steps = 0;
        while node != 0 {
            let h = heads[node - 1];
            if h == node || h > n {
                return false;
            }
            node = h;
            steps += 1;
            if steps > n {
                return false;
            }
        }
    }
    true
}

/// Best single-root arborescence score by enumerating all head vectors.
/// `score(d, h)` is summed for `d = 1..=n` in order.
pub fn brute_mst(n: usize, score: impl Fn(usize, usize) -> f64) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut heads = vec![0usize; n];
    loop {
        if is_single_root_tree(&heads) {
            let s = heads.iter().enumerate().fold(0.0, |acc, (i, &h)| acc + score(i + 1, h));
            best = best.max(s);
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            heads[i] += 1;
            if heads[i] <= n {
                break;
            }
            heads[i] = 0;
            i += 1;
        }
    }
}

// ---------------------------------------------------------------- gradients

/// A small model over `sentence` so that finite differences stay cheap.
pub fn tiny_model(sentences: &[Sentence], seed: u64) -> JointModel {
    let corpus = Corpus {
        sentences: sentences.to_vec(),
        task: Task::Joint,
    };
    let config = ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::DeskScale,
            dim: 6,
            layers: 2,
            merges: 4,
        },
        parser_dim: 5,
        seed,
        ..ModelConfig::default()
    };
    let (vocabs, bpe) = prepare(&config, &TaskCorpora::shared(&corpus), 1);
    JointModel::new(config, vocabs, bpe).expect("model builds")
}

pub fn three_token_sentence() -> Sentence {
    let text = "1\tĐây\tPRON\tO\t2\tsub\n2\tlà\tVERB\tB-LOC\t0\troot\n3\tHà_Nội\tNOUN\tI-LOC\t2\tvmod\n";
    parse_columns(text, Schema::Joint, "inline").unwrap().sentences.remove(0)
}

pub fn joint_value(model: &JointModel, sentence: &Sentence, lambdas: (f64, f64)) -> f64 {
    let mut g = Graph::new();
    let batch = [sentence];
    let (total, _) = joint_loss(model, &mut g, [&batch, &batch, &batch], lambdas.0, lambdas.1).unwrap();
    g.scalar(total)
}

/// Central differences of the joint loss for every entry of `id`.
pub fn numeric_grad(model: &mut JointModel, id: ParamId, sentence: &Sentence, lambdas: (f64, f64), h: f64) -> Vec<f64> {
    let len = model.store.value(id).numel();
    (0..len)
        .map(|i| {
            let orig = model.store.value(id).data()[i];
            model.store.value_mut(id).data_mut()[i] = orig + h;
            let up = joint_value(model, sentence, lambdas);
            model.store.value_mut(id).data_mut()[i] = orig - h;
            let down = joint_value(model, sentence, lambdas);
            model.store.value_mut(id).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute gap when both are tiny.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-8 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

// ---------------------------------------------------------------- leakage

pub fn sentence_of(words: &[String], task: Task) -> Sentence {
    let tokens = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut t = Token::new(i + 1, w);
            match task {
                Task::Pos => t.pos = Some("N".to_string()),
                Task::Ner => t.ner = Some("O".to_string()),
                _ => {
                    t.pos = Some("N".to_string());
                    t.head = Some(if i == 0 { 0 } else { 1 });
                    t.deprel = Some(if i == 0 { "root" } else { "dep" }.to_string());
                }
            }
            t
        })
        .collect();
    Sentence::new(tokens).unwrap()
}

/// Distinct sentence number `i`, spelled with letters only.
pub fn words(i: usize) -> Vec<String> {
    let mut n = i;
    let mut word = String::new();
    loop {
        word.push((b'a' + (n % 26) as u8) as char);
        n /= 26;
        if n == 0 {
            break;
        }
    }
    vec!["câu".to_string(), word, "số".to_string()]
}

pub fn corpus_of(ids: &[usize], task: Task) -> Corpus {
    Corpus {
        sentences: ids.iter().map(|&i| sentence_of(&words(i), task)).collect(),
        task,
    }
}

/// Synthetic POS/NER/parsing splits.
///
/// * NER test: 200 sentences, 180 of them (90%) also in POS train.
/// * NER valid: 100 sentences, 50 in POS train.
/// * Parsing valid/test: 100 each, 40 and 30 in POS train.
/// * POS (train + valid + test) carries exactly `duplicates` redundant
///   copies: some sentences repeated twice, some three times.
pub struct LeakFixture {
    pub pos: jointnlp::leakage::Splits,
    pub ner: jointnlp::leakage::Splits,
    pub dep: jointnlp::leakage::Splits,
    pub duplicates: usize,
}

pub fn leak_fixture(duplicates: usize) -> LeakFixture {
    use jointnlp::leakage::Splits;
    // id ranges: POS-only 0..2000, NER test 10_000.., NER valid 11_000..,
    // parsing valid 12_000.., parsing test 13_000..
    let ner_test: Vec<usize> = (10_000..10_200).collect();
    let ner_valid: Vec<usize> = (11_000..11_100).collect();
    let dep_valid: Vec<usize> = (12_000..12_100).collect();
    let dep_test: Vec<usize> = (13_000..13_100).collect();

    let mut train: Vec<usize> = (0..1500).collect();
    train.extend(&ner_test[..180]);
    train.extend(&ner_valid[..50]);
    train.extend(&dep_valid[..40]);
    train.extend(&dep_test[..30]);
    let mut valid: Vec<usize> = (1500..1750).collect();
    valid.extend(&ner_valid[50..]);
    valid.extend(&dep_valid[40..]);
    let mut test: Vec<usize> = (1750..2000).collect();
    test.extend(&ner_test[180..]);
    test.extend(&dep_test[30..]);

    // Extra copies: every third pick gets two copies, the rest one.
    let mut planted = 0;
    let mut source = 0;
    while planted < duplicates {
        let id = source * 7 % 2000;
        let copies = if source % 3 == 0 && duplicates - planted >= 2 { 2 } else { 1 };
        for c in 0..copies {
            match (source + c) % 3 {
                0 => train.push(id),
                1 => valid.push(id),
                _ => test.push(id),
            }
        }
        planted += copies;
        source += 1;
    }

    LeakFixture {
        pos: Splits {
            train: corpus_of(&train, Task::Pos),
            valid: corpus_of(&valid, Task::Pos),
            test: corpus_of(&test, Task::Pos),
        },
        ner: Splits {
            train: corpus_of(&(20_000..20_300).collect::<Vec<_>>(), Task::Ner),
            valid: corpus_of(&ner_valid, Task::Ner),
            test: corpus_of(&ner_test, Task::Ner),
        },
        dep: Splits {
            train: corpus_of(&(30_000..30_300).collect::<Vec<_>>(), Task::Dep),
            valid: corpus_of(&dep_valid, Task::Dep),
            test: corpus_of(&dep_test, Task::Dep),
        },
        duplicates,
    }
}

/// POS train + valid + test in that order.
pub fn pos_union(splits: &jointnlp::leakage::Splits) -> Corpus {
    let mut all = splits.train.clone();
    all.sentences.extend(splits.valid.sentences.iter().cloned());
    all.sentences.extend(splits.test.sentences.iter().cloned());
    all
}
