//! Contextual word encoder with first-subword pooling.
//!
//! The desk-scale encoder embeds BPE pieces, adds a sinusoidal position
//! signal and applies `layers` rounds of
//!
//! ```text
//! x ← x + softmax(x·Wq (x·Wk)ᵀ / √d) · x·Wv
//! x ← x + tanh(x·Wf + bf)
//! ```
//!
//! over the piece sequence of one sentence. Word `i` is represented by the
//! hidden state at its first piece.

mod bpe;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use bpe::{train_bpe, Bpe, SubwordSegmentation};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EncoderKind {
    DeskScale,
    /// Frozen per-word vectors read from a text file.
    ExternalPrecomputed { path: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub dim: usize,
    pub layers: usize,
    pub merges: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::DeskScale,
            dim: 64,
            layers: 2,
            merges: 200,
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    mix: ParamId,
    mix_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct DeskEncoder {
    embedding: ParamId,
    layers: Vec<Layer>,
    dim: usize,
}

impl DeskEncoder {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, subwords: usize, dim: usize, layers: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("encoder dimension must be positive".to_string()));
        }
        let embedding = store.add("encoder.embedding", init::embedding(rng, subwords, dim))?;
        let layers = (0..layers)
            .map(|l| {
                Ok(Layer {
                    query: store.add(&format!("encoder.{l}.query"), init::glorot(rng, dim, dim))?,
                    key: store.add(&format!("encoder.{l}.key"), init::glorot(rng, dim, dim))?,
                    value: store.add(&format!("encoder.{l}.value"), init::glorot(rng, dim, dim))?,
                    mix: store.add(&format!("encoder.{l}.mix"), init::glorot(rng, dim, dim))?,
                    mix_bias: store.add(&format!("encoder.{l}.mix_bias"), Tensor::zeros(&[1, dim]))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DeskEncoder { embedding, layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hidden states of every subword piece (`m × d`).
    pub fn encode_pieces(&self, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("sentence has no subwords".to_string()));
        }
        let table = g.param(store, self.embedding);
        let x = g.gather_rows(table, ids)?;
        let pos = g.constant(position_signal(ids.len(), self.dim))?;
        let mut x = g.add(x, pos)?;
        let scale = 1.0 / (self.dim as f64).sqrt();
        for layer in &self.layers {
            let wq = g.param(store, layer.query);
            let wk = g.param(store, layer.key);
            let wv = g.param(store, layer.value);
            let q = g.matmul(x, wq)?;
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let att = g.matmul_nt(q, k)?;
            let att = g.scale(att, scale)?;
            let att = g.softmax(att)?;
            let ctx = g.matmul(att, v)?;
            x = g.add(x, ctx)?;

            let wf = g.param(store, layer.mix);
            let bf = g.param(store, layer.mix_bias);
            let f = g.matmul(x, wf)?;
            let f = g.add_row(f, bf)?;
            let f = g.tanh(f)?;
            x = g.add(x, f)?;
        }
        Ok(x)
    }

    /// One row per word: the hidden state at the word's first piece.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, seg: &SubwordSegmentation) -> Result<Var> {
        let hidden = self.encode_pieces(g, store, &seg.ids)?;
        g.gather_rows(hidden, &seg.first)
    }
}

/// Sinusoidal position signal: `sin(p / 10000^(2i/d))` in even columns and
/// the matching cosine in odd columns.
pub fn position_signal(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, dim]);
    for p in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            t.set(p, c, if c % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// Word vectors loaded from a `word v1 v2 ... vd` file. Unknown words get a
/// zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut dim = None;
        let mut vectors = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: "embeddings".to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if *dim.get_or_insert(values.len()) != values.len() || values.is_empty() {
                return Err(Error::Parse {
                    path: "embeddings".to_string(),
                    line: i + 1,
                    message: format!("expected {} values, found {}", dim.unwrap_or(0), values.len()),
                });
            }
            vectors.insert(word.to_string(), values);
        }
        let dim = dim.ok_or_else(|| Error::Empty("embedding file has no vectors".to_string()))?;
        Ok(PrecomputedEmbeddings { dim, vectors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vectors.contains_key(word)
    }

    pub fn encode<S: AsRef<str>>(&self, g: &mut Graph, forms: &[S]) -> Result<Var> {
        if forms.is_empty() {
            return Err(Error::Empty("sentence has no words".to_string()));
        }
        let mut data = Vec::with_capacity(forms.len() * self.dim);
        for f in forms {
            match self.vectors.get(f.as_ref()) {
                Some(v) => data.extend_from_slice(v),
                None => data.extend(std::iter::repeat_n(0.0, self.dim)),
            }
        }
        g.constant(Tensor::matrix(forms.len(), self.dim, data)?)
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Desk(DeskEncoder),
    Precomputed(PrecomputedEmbeddings),
}

impl Encoder {
    pub fn dim(&self) -> usize {
        match self {
            Encoder::Desk(e) => e.dim(),
            Encoder::Precomputed(e) => e.dim(),
        }
    }

    /// `n × d` word representations.
    pub fn encode<S: AsRef<str>>(&self, g: &mut Graph, store: &ParamStore, bpe: &Bpe, forms: &[S]) -> Result<Var> {
        match self {
            Encoder::Desk(e) => {
                if forms.is_empty() {
                    return Err(Error::Empty("sentence has no words".to_string()));
                }
                e.encode(g, store, &bpe.segment_forms(forms))
            }
            Encoder::Precomputed(e) => e.encode(g, forms),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn no_layers_is_embedding_plus_position() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = DeskEncoder::init(&mut store, &mut rng, 5, 6, 0).unwrap();
        let mut g = Graph::new();
        let seg = SubwordSegmentation {
            pieces: vec!["x".into()],
            ids: vec![3],
            first: vec![0],
        };
        let e = enc.encode(&mut g, &store, &seg).unwrap();
        let table = store.value(enc.embedding);
        let pos = position_signal(1, 6);
        let expected: Vec<f64> = table.row(3).iter().zip(pos.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(g.value(e).data(), expected.as_slice());
    }

    #[test]
    fn one_row_per_word() {
        let bpe = Bpe::train(["Tôi", "đang", "làm_việc", "tại", "VinAI", "."], 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::Desk(DeskEncoder::init(&mut store, &mut rng, bpe.vocab().len(), 32, 2).unwrap());
        let mut g = Graph::new();
        let forms = ["Tôi", "đang", "làm_việc", "tại", "VinAI", "."];
        let e = enc.encode(&mut g, &store, &bpe, &forms).unwrap();
        assert_eq!(g.value(e).shape(), &[6, 32]);
        let empty: [&str; 0] = [];
        assert!(enc.encode(&mut g, &store, &bpe, &empty).is_err());
    }

    #[test]
    fn precomputed_lookup() {
        let emb = PrecomputedEmbeddings::parse("a 1 2\nb 3 4\n").unwrap();
        let mut g = Graph::new();
        let v = emb.encode(&mut g, &["b", "zz"]).unwrap();
        assert_eq!(g.value(v).data(), &[3.0, 4.0, 0.0, 0.0]);
        assert!(PrecomputedEmbeddings::parse("a 1 2\nb 3\n").is_err());
        assert!(PrecomputedEmbeddings::parse("").is_err());
    }

    #[test]
    fn position_signal_values() {
        let p = position_signal(2, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.get(1, 0) - 1f64.sin()).abs() < 1e-15);
        assert!((p.get(1, 2) - (0.01f64).sin()).abs() < 1e-15);
    }
}
