//! Cross-corpus sentence leakage: audit, deduplication and POS re-splitting.
//!
//! Sentences are identified by their word forms joined with single spaces.
//! No case folding is applied.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Sentence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SentenceKey {
    pub text: String,
    /// Hex SHA-256 of `text`.
    pub hash: String,
}

impl SentenceKey {
    pub fn of(sentence: &Sentence) -> Self {
        let text = sentence
            .tokens()
            .iter()
            .map(|t| t.form.trim())
            .collect::<Vec<_>>()
            .join(" ");
        let hash = Sha256::digest(text.as_bytes())
            .iter()
            .fold(String::with_capacity(64), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            });
        SentenceKey { text, hash }
    }
}

/// Train/valid/test splits of one task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

impl Splits {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.valid.len(), self.test.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub source: String,
    pub target: String,
    pub target_size: usize,
    pub count: usize,
    /// Share of the target found in the source, in percent.
    pub percent: f64,
    pub keys: Vec<SentenceKey>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub key: SentenceKey,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub overlaps: Vec<Overlap>,
    /// Repeated sentences across all POS splits, in first-seen order.
    pub pos_duplicates: Vec<DuplicateGroup>,
}

impl LeakageReport {
    pub fn overlap(&self, target: &str) -> Option<&Overlap> {
        self.overlaps.iter().find(|o| o.target == target)
    }

    /// Sentences that deduplication would remove.
    pub fn redundant_sentences(&self) -> usize {
        self.pos_duplicates.iter().map(|g| g.count - 1).sum()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for o in &self.overlaps {
            let _ = writeln!(
                out,
                "{:<10} in {:<10} {:>6} / {:<6} {:>7.2}%",
                o.target, o.source, o.count, o.target_size, o.percent
            );
        }
        let _ = writeln!(
            out,
            "pos duplicates: {} groups, {} redundant sentences",
            self.pos_duplicates.len(),
            self.redundant_sentences()
        );
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn key_set(corpus: &Corpus) -> HashSet<SentenceKey> {
    corpus.sentences.iter().map(SentenceKey::of).collect()
}

fn overlap(source_name: &str, source: &HashSet<SentenceKey>, target_name: &str, target: &Corpus) -> Overlap {
    let keys: Vec<SentenceKey> = target
        .sentences
        .iter()
        .map(SentenceKey::of)
        .filter(|k| source.contains(k))
        .collect();
    let percent = if target.is_empty() {
        0.0
    } else {
        100.0 * keys.len() as f64 / target.len() as f64
    };
    Overlap {
        source: source_name.to_string(),
        target: target_name.to_string(),
        target_size: target.len(),
        count: keys.len(),
        percent,
        keys,
    }
}

/// Repeated keys with their counts, ordered by first occurrence.
pub fn duplicate_groups<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<DuplicateGroup> {
    let mut order = Vec::new();
    let mut counts: HashMap<SentenceKey, usize> = HashMap::new();
    for s in sentences {
        let key = SentenceKey::of(s);
        let c = counts.entry(key.clone()).or_default();
        if *c == 0 {
            order.push(key);
        }
        *c += 1;
    }
    order
        .into_iter()
        .filter_map(|key| {
            let count = counts[&key];
            (count > 1).then_some(DuplicateGroup { key, count })
        })
        .collect()
}

/// Share of each NER and parsing valid/test set found in POS train, plus
/// duplicate groups across the POS splits.
pub fn audit(pos: &Splits, ner: &Splits, dep: &Splits) -> LeakageReport {
    let train = key_set(&pos.train);
    let overlaps = vec![
        overlap("pos.train", &train, "ner.valid", &ner.valid),
        overlap("pos.train", &train, "ner.test", &ner.test),
        overlap("pos.train", &train, "dep.valid", &dep.valid),
        overlap("pos.train", &train, "dep.test", &dep.test),
    ];
    let all = pos.train.sentences.iter().chain(&pos.valid.sentences).chain(&pos.test.sentences);
    LeakageReport {
        overlaps,
        pos_duplicates: duplicate_groups(all),
    }
}

/// Keeps the first occurrence of every sentence, in order.
pub fn deduplicate(corpus: &Corpus) -> (Corpus, usize) {
    let mut seen = HashSet::new();
    let kept: Vec<Sentence> = corpus
        .sentences
        .iter()
        .filter(|s| seen.insert(SentenceKey::of(s)))
        .cloned()
        .collect();
    let removed = corpus.len() - kept.len();
    (
        Corpus {
            sentences: kept,
            task: corpus.task,
        },
        removed,
    )
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Resplit {
    pub splits: Splits,
    /// NER/parsing valid or test sentences with no POS counterpart.
    pub missing: Vec<SentenceKey>,
    /// POS sentences wanted by both a valid and a test set (sent to test).
    pub conflicts: Vec<SentenceKey>,
}

/// New POS splits: valid holds the POS sentences that occur in NER-valid or
/// parsing-valid, test likewise for the test sets, train the rest. Source
/// order is preserved within each split.
pub fn resplit_pos(pos_all: &Corpus, ner: &Splits, dep: &Splits, strict: bool) -> Result<Resplit> {
    let mut valid_keys = key_set(&ner.valid);
    valid_keys.extend(key_set(&dep.valid));
    let mut test_keys = key_set(&ner.test);
    test_keys.extend(key_set(&dep.test));

    let pos_keys = key_set(pos_all);
    let mut missing: Vec<SentenceKey> = valid_keys.union(&test_keys).filter(|k| !pos_keys.contains(k)).cloned().collect();
    missing.sort();
    if !missing.is_empty() {
        if strict {
            return Err(Error::Leakage(format!(
                "{} evaluation sentences have no POS counterpart, e.g. {:?}",
                missing.len(),
                missing[0].text
            )));
        }
        warn!("{} evaluation sentences have no POS counterpart", missing.len());
    }

    let mut conflicts: Vec<SentenceKey> = valid_keys.intersection(&test_keys).cloned().collect();
    conflicts.sort();
    if !conflicts.is_empty() {
        warn!("{} sentences occur in both a valid and a test set; assigned to test", conflicts.len());
    }

    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in &pos_all.sentences {
        let key = SentenceKey::of(s);
        if test_keys.contains(&key) {
            test.push(s.clone());
        } else if valid_keys.contains(&key) {
            valid.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    let task = pos_all.task;
    Ok(Resplit {
        splits: Splits {
            train: Corpus { sentences: train, task },
            valid: Corpus { sentences: valid, task },
            test: Corpus { sentences: test, task },
        },
        missing,
        conflicts,
    })
}
