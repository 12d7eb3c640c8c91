//! POS accuracy, entity-level NER scores and attachment scores.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// POS tag treated as punctuation by `exclude_punct`.
pub const PUNCT_TAG: &str = "CH";

/// Entity span with 1-based inclusive token bounds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

fn check_lengths<A, B>(gold: &[A], pred: &[B], what: &str) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Length(format!("{what}: {} gold vs {} predicted", gold.len(), pred.len())));
    }
    Ok(())
}

/// Token-level accuracy over all sentences. An empty input scores 1.
pub fn pos_accuracy<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<T>]) -> Result<f64> {
    check_lengths(gold, pred, "sentences")?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        check_lengths(g, p, "tokens")?;
        total += g.len();
        correct += g.iter().zip(p).filter(|(a, b)| a.as_ref() == b.as_ref()).count();
    }
    Ok(if total == 0 { 1.0 } else { correct as f64 / total as f64 })
}

fn split_bio(label: &str) -> Option<(char, &str)> {
    let (prefix, kind) = label.split_once('-')?;
    match prefix {
        "B" => Some(('B', kind)),
        "I" => Some(('I', kind)),
        _ => None,
    }
}

/// Maximal `B-X I-X*` runs. An `I-X` that does not continue an open `X`
/// span starts a new one.
pub fn extract_spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, label) in labels.iter().enumerate() {
        let pos = i + 1;
        match split_bio(label.as_ref()) {
            Some(('I', kind)) if open.as_ref().is_some_and(|s| s.label == kind) => {
                if let Some(s) = open.as_mut() {
                    s.end = pos;
                }
            }
            Some((_, kind)) => {
                spans.extend(open.take());
                open = Some(Span {
                    label: kind.to_string(),
                    start: pos,
                    end: pos,
                });
            }
            None => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

/// Rewrites each `I-X` that does not continue an `X` span as `B-X`.
pub fn repair_bio<S: AsRef<str>>(labels: &[S]) -> Vec<String> {
    let mut out: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
    for span in extract_spans(labels) {
        out[span.start - 1] = format!("B-{}", span.label);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NerScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold_spans: usize,
    pub predicted_spans: usize,
    pub correct_spans: usize,
}

fn ratio(num: usize, den: usize, other_den: usize) -> f64 {
    match (den, other_den) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => num as f64 / den as f64,
    }
}

/// Micro-averaged exact-span scores. When neither side has entities every
/// score is 1.
pub fn ner_f1<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<T>]) -> Result<NerScores> {
    check_lengths(gold, pred, "sentences")?;
    let (mut n_gold, mut n_pred, mut n_correct) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        check_lengths(g, p, "tokens")?;
        let gs: HashSet<Span> = extract_spans(g).into_iter().collect();
        let ps: HashSet<Span> = extract_spans(p).into_iter().collect();
        n_gold += gs.len();
        n_pred += ps.len();
        n_correct += gs.intersection(&ps).count();
    }
    let precision = ratio(n_correct, n_pred, n_gold);
    let recall = ratio(n_correct, n_gold, n_pred);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(NerScores {
        precision,
        recall,
        f1,
        gold_spans: n_gold,
        predicted_spans: n_pred,
        correct_spans: n_correct,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttachmentScores {
    pub uas: f64,
    pub las: f64,
    pub tokens: usize,
}

/// One sentence's tree for scoring: heads, relations and (optionally) gold
/// POS tags used to spot punctuation.
#[derive(Clone, Copy, Debug)]
pub struct TreeView<'a, S> {
    pub heads: &'a [usize],
    pub labels: &'a [S],
    pub pos: Option<&'a [S]>,
}

/// UAS and LAS over all tokens, or over non-punctuation tokens (gold POS
/// `CH`) when `exclude_punct` is set. An empty input scores 1.
pub fn attachment_scores<S: AsRef<str>, T: AsRef<str>>(
    gold: &[TreeView<S>],
    pred: &[TreeView<T>],
    exclude_punct: bool,
) -> Result<AttachmentScores> {
    check_lengths(gold, pred, "sentences")?;
    let (mut total, mut head_ok, mut both_ok) = (0usize, 0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        check_lengths(g.heads, p.heads, "tokens")?;
        check_lengths(g.labels, p.labels, "tokens")?;
        check_lengths(g.heads, g.labels, "tokens")?;
        for i in 0..g.heads.len() {
            if exclude_punct && g.pos.is_some_and(|tags| tags[i].as_ref() == PUNCT_TAG) {
                continue;
            }
            total += 1;
            if g.heads[i] == p.heads[i] {
                head_ok += 1;
                if g.labels[i].as_ref() == p.labels[i].as_ref() {
                    both_ok += 1;
                }
            }
        }
    }
    let frac = |k: usize| if total == 0 { 1.0 } else { k as f64 / total as f64 };
    Ok(AttachmentScores {
        uas: frac(head_ok),
        las: frac(both_ok),
        tokens: total,
    })
}

/// Scores of predicted sentences against gold ones, per task. A task is
/// skipped (score `None`) when the gold side lacks its annotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub pos_accuracy: Option<f64>,
    pub ner: Option<NerScores>,
    pub attachment: Option<AttachmentScores>,
}

fn missing(task: &str) -> Error {
    Error::Length(format!("predicted sentence lacks {task} annotation"))
}

pub fn evaluate_pos(gold: &[Sentence], pred: &[Sentence]) -> Result<f64> {
    check_lengths(gold, pred, "sentences")?;
    let g: Vec<Vec<&str>> = gold.iter().map(|s| s.pos_tags().ok_or_else(|| missing("POS"))).collect::<Result<_>>()?;
    let p: Vec<Vec<&str>> = pred.iter().map(|s| s.pos_tags().ok_or_else(|| missing("POS"))).collect::<Result<_>>()?;
    pos_accuracy(&g, &p)
}

pub fn evaluate_ner(gold: &[Sentence], pred: &[Sentence]) -> Result<NerScores> {
    check_lengths(gold, pred, "sentences")?;
    let g: Vec<Vec<&str>> = gold.iter().map(|s| s.ner_labels().ok_or_else(|| missing("NER"))).collect::<Result<_>>()?;
    let p: Vec<Vec<&str>> = pred.iter().map(|s| s.ner_labels().ok_or_else(|| missing("NER"))).collect::<Result<_>>()?;
    ner_f1(&g, &p)
}

pub fn evaluate_dep(gold: &[Sentence], pred: &[Sentence], exclude_punct: bool) -> Result<AttachmentScores> {
    check_lengths(gold, pred, "sentences")?;
    let unpack = |s: &Sentence| -> Result<(Vec<usize>, Vec<String>, Option<Vec<String>>)> {
        let heads = s.heads().ok_or_else(|| missing("dependency"))?;
        let labels = s.deprels().ok_or_else(|| missing("dependency"))?;
        let pos = s.pos_tags().map(|t| t.into_iter().map(String::from).collect());
        Ok((heads, labels.into_iter().map(String::from).collect(), pos))
    };
    let g = gold.iter().map(unpack).collect::<Result<Vec<_>>>()?;
    let p = pred.iter().map(unpack).collect::<Result<Vec<_>>>()?;
    fn view(tree: &(Vec<usize>, Vec<String>, Option<Vec<String>>)) -> TreeView<'_, String> {
        TreeView {
            heads: &tree.0,
            labels: &tree.1,
            pos: tree.2.as_deref(),
        }
    }
    let gv: Vec<TreeView<String>> = g.iter().map(view).collect();
    let pv: Vec<TreeView<String>> = p.iter().map(view).collect();
    attachment_scores(&gv, &pv, exclude_punct)
}

/// Evaluates whichever tasks every gold sentence is annotated for.
pub fn evaluate(gold: &[Sentence], pred: &[Sentence], exclude_punct: bool) -> Result<Evaluation> {
    let all = |f: fn(&Sentence) -> bool| !gold.is_empty() && gold.iter().all(f);
    Ok(Evaluation {
        pos_accuracy: if all(|s| s.annotations().pos) { Some(evaluate_pos(gold, pred)?) } else { None },
        ner: if all(|s| s.annotations().ner) { Some(evaluate_ner(gold, pred)?) } else { None },
        attachment: if all(|s| s.annotations().dep) {
            Some(evaluate_dep(gold, pred, exclude_punct)?)
        } else {
            None
        },
    })
}
