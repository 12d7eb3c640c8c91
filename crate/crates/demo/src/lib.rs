//! In-browser playground for three pieces of the tagger/parser: maximum
//! spanning tree decoding, CRF inference and BPE segmentation.
//!
//! Every export takes and returns a JSON string. The `*_json` functions hold
//! the logic and run natively; the `#[wasm_bindgen]` wrappers only convert
//! errors.

use jointnlp::autograd::Tensor;
use jointnlp::dep::{mst_decode, ArcScores};
use jointnlp::encoder::Bpe;
use jointnlp::metrics::repair_bio;
use jointnlp::ner::CrfPotentials;
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type Result<T> = std::result::Result<T, String>;

fn parse<'a, T: Deserialize<'a>>(input: &'a str) -> Result<T> {
    serde_json::from_str(input).map_err(|e| format!("bad input: {e}"))
}

fn render<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    Tensor::from_rows(rows).map_err(|e| format!("{what}: {e}"))
}

#[derive(Deserialize)]
struct TreeInput {
    /// `(n+1) × (n+1)`, `[dependent][head]`, row 0 for the root.
    scores: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct TreeOutput {
    heads: Vec<usize>,
    score: f64,
}

pub fn decode_tree_json(input: &str) -> Result<String> {
    let input: TreeInput = parse(input)?;
    let size = input.scores.len();
    if size < 2 {
        return Err("need a root row and at least one token".to_string());
    }
    if input.scores.iter().any(|r| r.len() != size) {
        return Err(format!("scores must be {size} × {size}"));
    }
    let flat = input.scores.concat();
    let arcs = ArcScores::new(size - 1, flat).map_err(|e| e.to_string())?;
    let heads = mst_decode(&arcs);
    let score = arcs.tree_score(&heads);
    render(&TreeOutput { heads, score })
}

#[derive(Deserialize)]
struct CrfInput {
    labels: Vec<String>,
    emissions: Vec<Vec<f64>>,
    transitions: Vec<Vec<f64>>,
    start: Vec<f64>,
    end: Vec<f64>,
}

#[derive(Serialize)]
struct CrfOutput {
    path: Vec<String>,
    /// `path` with dangling `I-X` rewritten as `B-X`.
    repaired: Vec<String>,
    score: f64,
    log_partition: f64,
    probability: f64,
    marginals: Vec<Vec<f64>>,
}

pub fn crf_json(input: &str) -> Result<String> {
    let input: CrfInput = parse(input)?;
    if input.emissions.is_empty() {
        return Err("no tokens".to_string());
    }
    if input.labels.len() != input.start.len() {
        return Err(format!("{} label names for {} labels", input.labels.len(), input.start.len()));
    }
    let emissions = matrix(&input.emissions, "emissions")?;
    let transitions = matrix(&input.transitions, "transitions")?;
    let crf = CrfPotentials::new(&emissions, &transitions, &input.start, &input.end).map_err(|e| e.to_string())?;
    let best = crf.viterbi();
    let log_partition = crf.log_partition();
    let m = crf.marginals();
    let path: Vec<String> = best.labels.iter().map(|&l| input.labels[l].clone()).collect();
    render(&CrfOutput {
        repaired: repair_bio(&path),
        path,
        score: best.score,
        log_partition,
        probability: (best.score - log_partition).exp(),
        marginals: (0..m.rows()).map(|i| m.row(i).to_vec()).collect(),
    })
}

#[derive(Deserialize)]
struct SegmentInput {
    /// Whitespace-separated training words.
    corpus: String,
    merges: usize,
    /// Whitespace-separated words to segment.
    text: String,
}

#[derive(Serialize)]
struct SegmentOutput {
    merges: Vec<(String, String)>,
    pieces: Vec<Vec<String>>,
}

pub fn segment_json(input: &str) -> Result<String> {
    let input: SegmentInput = parse(input)?;
    let bpe = Bpe::train(input.corpus.split_whitespace(), input.merges);
    render(&SegmentOutput {
        merges: bpe.merges().to_vec(),
        pieces: input.text.split_whitespace().map(|w| bpe.segment_word(w)).collect(),
    })
}

fn js(r: Result<String>) -> std::result::Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn decode_tree(input: &str) -> std::result::Result<String, JsValue> {
    js(decode_tree_json(input))
}

#[wasm_bindgen]
pub fn crf(input: &str) -> std::result::Result<String, JsValue> {
    js(crf_json(input))
}

#[wasm_bindgen]
pub fn segment(input: &str) -> std::result::Result<String, JsValue> {
    js(segment_json(input))
}
