//! Affine POS layer and the two soft tag projections feeding NER and parsing.

use rand::Rng;

use crate::autograd::{init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

/// Rows of each soft tag projection.
pub const TAG_DIM: usize = 100;

/// Which consumer a soft tag embedding is for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagConsumer {
    Ner,
    Parser,
}

#[derive(Clone, Debug)]
pub struct PosHead {
    pub weight: ParamId,
    pub bias: ParamId,
    /// `W(1)`, `100 × |POS|`.
    pub ner_proj: ParamId,
    /// `W(2)`, `100 × |POS|`.
    pub parser_proj: ParamId,
    pub tags: usize,
}

impl PosHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, input_dim: usize, tags: usize) -> Result<Self> {
        Ok(PosHead {
            weight: store.add("pos.weight", init::glorot(rng, input_dim, tags))?,
            bias: store.add("pos.bias", Tensor::zeros(&[1, tags]))?,
            ner_proj: store.add("pos.soft_ner", init::glorot_shaped(rng, &[TAG_DIM, tags], tags, TAG_DIM))?,
            parser_proj: store.add("pos.soft_parser", init::glorot_shaped(rng, &[TAG_DIM, tags], tags, TAG_DIM))?,
            tags,
        })
    }

    /// Returns `(logits, p)`, both `n × |POS|`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<(Var, Var)> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let logits = g.matmul(e, w)?;
        let logits = g.add_row(logits, b)?;
        let p = g.softmax(logits)?;
        Ok((logits, p))
    }

    /// Sum of token cross-entropies.
    pub fn loss(&self, g: &mut Graph, logits: Var, gold: &[usize]) -> Result<Var> {
        g.cross_entropy(logits, gold)
    }

    /// `t_i = W p_i` for every token (`n × 100`).
    pub fn soft_tags(&self, g: &mut Graph, store: &ParamStore, p: Var, consumer: TagConsumer) -> Result<Var> {
        let w = match consumer {
            TagConsumer::Ner => g.param(store, self.ner_proj),
            TagConsumer::Parser => g.param(store, self.parser_proj),
        };
        g.matmul_nt(p, w)
    }

    /// Ablation: project the one-hot argmax tag instead of `p`. No gradient
    /// reaches the POS layer through this path.
    pub fn hard_tags(&self, g: &mut Graph, store: &ParamStore, p: Var, consumer: TagConsumer) -> Result<Var> {
        let probs = g.value(p);
        let mut onehot = Tensor::zeros(&[probs.rows(), probs.cols()]);
        for i in 0..probs.rows() {
            let j = probs.argmax_row(i);
            onehot.set(i, j, 1.0);
        }
        let onehot = g.constant(onehot)?;
        self.soft_tags(g, store, onehot, consumer)
    }
}
