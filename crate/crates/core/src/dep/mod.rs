//! Dependency layer: head/dependent projections, biaffine arc scoring with
//! relative-order and distance terms, biaffine relation labelling and tree
//! decoding.
//!
//! Arc score of head `h` for dependent `d`:
//!
//! ```text
//! S[d][h] = a_d·W_arc·b_h + u·b_h
//!         + sgn(h − d) · (a_d·W_ord·b_h)
//!         − (ln|h − d| − softplus(a_d·W_dist·b_h))²
//! ```
//!
//! where `a` are arc-dependent and `b` arc-head representations. The root
//! sits at position 0, so its distance to token `d` is `d`.

mod mst;

use rand::Rng;

use crate::autograd::{init, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

pub use mst::{mst_decode, validate_tree, ArcScores};

/// Head and relation per token; `heads[i]` is the head of token `i+1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepTree {
    pub heads: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
struct Ffnn {
    weight: ParamId,
    bias: ParamId,
}

impl Ffnn {
    fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input: usize, output: usize) -> Result<Self> {
        Ok(Ffnn {
            weight: store.add(&format!("dep.{name}.weight"), init::glorot(rng, input, output))?,
            bias: store.add(&format!("dep.{name}.bias"), Tensor::zeros(&[1, output]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        let h = g.add_row(h, b)?;
        g.relu(h)
    }
}

/// Rows `0..=n` (row 0 is the root) of the four projections.
#[derive(Clone, Copy, Debug)]
pub struct ParserReprs {
    pub arc_head: Var,
    pub arc_dep: Var,
    pub label_head: Var,
    pub label_dep: Var,
}

#[derive(Clone, Debug)]
pub struct DepHead {
    arc_head: Ffnn,
    arc_dep: Ffnn,
    label_head: Ffnn,
    label_dep: Ffnn,
    root: ParamId,
    arc_bilinear: ParamId,
    arc_head_bias: ParamId,
    order: ParamId,
    distance: ParamId,
    label_bilinear: ParamId,
    label_linear: ParamId,
    label_bias: ParamId,
    pub hidden: usize,
    pub relations: usize,
}

impl DepHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, input: usize, hidden: usize, relations: usize) -> Result<Self> {
        Ok(DepHead {
            arc_head: Ffnn::init(store, rng, "arc_head", input, hidden)?,
            arc_dep: Ffnn::init(store, rng, "arc_dep", input, hidden)?,
            label_head: Ffnn::init(store, rng, "label_head", input, hidden)?,
            label_dep: Ffnn::init(store, rng, "label_dep", input, hidden)?,
            root: store.add("dep.root", init::embedding(rng, 1, input))?,
            arc_bilinear: store.add("dep.arc.bilinear", init::glorot(rng, hidden, hidden))?,
            arc_head_bias: store.add("dep.arc.head_bias", init::glorot_shaped(rng, &[1, hidden], hidden, 1))?,
            order: store.add("dep.arc.order", init::glorot(rng, hidden, hidden))?,
            distance: store.add("dep.arc.distance", init::glorot(rng, hidden, hidden))?,
            label_bilinear: store.add(
                "dep.label.bilinear",
                init::glorot_shaped(rng, &[hidden, relations * hidden], hidden, hidden),
            )?,
            label_linear: store.add(
                "dep.label.linear",
                init::glorot_shaped(rng, &[relations, 2 * hidden], 2 * hidden, relations),
            )?,
            label_bias: store.add("dep.label.bias", Tensor::zeros(&[1, relations]))?,
            hidden,
            relations,
        })
    }

    /// Projects `z_i = [e_i ; t_i]` (or `e_i` alone when `soft_tags` is
    /// `None`), with the learned root vector prepended as row 0.
    pub fn reprs(&self, g: &mut Graph, store: &ParamStore, e: Var, soft_tags: Option<Var>) -> Result<ParserReprs> {
        let z = match soft_tags {
            Some(t) => g.concat_cols(&[e, t])?,
            None => e,
        };
        let root = g.param(store, self.root);
        let z = g.concat_rows(&[root, z])?;
        Ok(ParserReprs {
            arc_head: self.arc_head.forward(g, store, z)?,
            arc_dep: self.arc_dep.forward(g, store, z)?,
            label_head: self.label_head.forward(g, store, z)?,
            label_dep: self.label_dep.forward(g, store, z)?,
        })
    }

    /// `(n+1) × (n+1)` matrix indexed `[dependent][head]`. Row 0 and the
    /// diagonal carry no meaning and must be masked by the caller.
    pub fn arc_scores(&self, g: &mut Graph, store: &ParamStore, reprs: &ParserReprs) -> Result<Var> {
        let (dep, head) = (reprs.arc_dep, reprs.arc_head);
        let size = g.value(dep).rows();

        let w = g.param(store, self.arc_bilinear);
        let dw = g.matmul(dep, w)?;
        let biaffine = g.matmul_nt(dw, head)?;
        let u = g.param(store, self.arc_head_bias);
        let head_bias = g.matmul_nt(u, head)?;
        let scores = g.add_row(biaffine, head_bias)?;

        let w = g.param(store, self.order);
        let dw = g.matmul(dep, w)?;
        let order = g.matmul_nt(dw, head)?;
        let sign = g.constant(sign_matrix(size))?;
        let order = g.mul(order, sign)?;
        let scores = g.add(scores, order)?;

        let w = g.param(store, self.distance);
        let dw = g.matmul(dep, w)?;
        let predicted = g.matmul_nt(dw, head)?;
        let predicted = g.softplus(predicted)?;
        let log_dist = g.constant(log_distance_matrix(size))?;
        let gap = g.sub(log_dist, predicted)?;
        let penalty = g.mul(gap, gap)?;
        g.sub(scores, penalty)
    }

    /// Relation scores (`k × R`) for the arcs `heads[i] → dependents[i]`.
    pub fn label_scores(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reprs: &ParserReprs,
        dependents: &[usize],
        heads: &[usize],
    ) -> Result<Var> {
        let dep = g.gather_rows(reprs.label_dep, dependents)?;
        let head = g.gather_rows(reprs.label_head, heads)?;
        self.pair_label_scores(g, store, dep, head)
    }

    fn pair_label_scores(&self, g: &mut Graph, store: &ParamStore, dep: Var, head: Var) -> Result<Var> {
        let u = g.param(store, self.label_bilinear);
        let bilinear = g.bilinear(dep, u, head)?;
        let pair = g.concat_cols(&[dep, head])?;
        let w = g.param(store, self.label_linear);
        let linear = g.matmul_nt(pair, w)?;
        let b = g.param(store, self.label_bias);
        let linear = g.add_row(linear, b)?;
        g.add(bilinear, linear)
    }

    /// Head cross-entropy (each dependent's softmax over all other
    /// positions) plus relation cross-entropy at the gold arcs.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        reprs: &ParserReprs,
        gold_heads: &[usize],
        gold_labels: &[usize],
    ) -> Result<Var> {
        self.batch_loss(g, store, &[(reprs, gold_heads, gold_labels)])
    }

    /// Summed [`DepHead::loss`] over several sentences. Relation scores of
    /// the whole batch share one bilinear product.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        items: &[(&ParserReprs, &[usize], &[usize])],
    ) -> Result<Var> {
        let mut arc_losses = Vec::with_capacity(items.len());
        let (mut deps, mut heads, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for &(reprs, gold_heads, gold_labels) in items {
            validate_tree(gold_heads)?;
            let n = gold_heads.len();
            if gold_labels.len() != n || gold_labels.iter().any(|&l| l >= self.relations) {
                return Err(Error::InvalidTree(format!("{} relation labels for {n} tokens", gold_labels.len())));
            }
            let scores = self.arc_scores(g, store, reprs)?;
            let dependents: Vec<usize> = (1..=n).collect();
            let rows = g.gather_rows(scores, &dependents)?;
            let diagonal: Vec<Option<usize>> = dependents.iter().map(|&d| Some(d)).collect();
            arc_losses.push(g.cross_entropy_excluding(rows, gold_heads, &diagonal)?);
            deps.push(g.gather_rows(reprs.label_dep, &dependents)?);
            heads.push(g.gather_rows(reprs.label_head, gold_heads)?);
            labels.extend_from_slice(gold_labels);
        }
        let Some(&first) = arc_losses.first() else {
            return Err(Error::Empty("no sentences to score".to_string()));
        };
        let dep = g.concat_rows(&deps)?;
        let head = g.concat_rows(&heads)?;
        let scores = self.pair_label_scores(g, store, dep, head)?;
        let mut total = g.cross_entropy(scores, &labels)?;
        total = g.add(total, first)?;
        for &l in &arc_losses[1..] {
            total = g.add(total, l)?;
        }
        Ok(total)
    }

    /// Maximum spanning tree over the arc scores, then the best relation
    /// for each chosen arc.
    pub fn decode(&self, g: &mut Graph, store: &ParamStore, reprs: &ParserReprs) -> Result<DepTree> {
        let scores = self.arc_scores(g, store, reprs)?;
        let n = g.value(scores).rows() - 1;
        let arcs = ArcScores::new(n, g.value(scores).data().to_vec())?;
        let heads = mst_decode(&arcs);
        let dependents: Vec<usize> = (1..=n).collect();
        let label_scores = self.label_scores(g, store, reprs, &dependents, &heads)?;
        let table = g.value(label_scores);
        let labels = (0..n).map(|i| table.argmax_row(i)).collect();
        Ok(DepTree { heads, labels })
    }
}

/// `sgn(h − d)` at `[d][h]`.
fn sign_matrix(size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[size, size]);
    for d in 0..size {
        for h in 0..size {
            t.set(d, h, (h as f64 - d as f64).signum() * f64::from(h != d));
        }
    }
    t
}

/// `ln|h − d|` at `[d][h]`; the diagonal (never scored) holds 0.
fn log_distance_matrix(size: usize) -> Tensor {
    let mut t = Tensor::zeros(&[size, size]);
    for d in 0..size {
        for h in 0..size {
            if h != d {
                t.set(d, h, (h.abs_diff(d) as f64).ln());
            }
        }
    }
    t
}
