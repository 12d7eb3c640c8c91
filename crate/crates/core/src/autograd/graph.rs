use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm, log_sum_exp};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
    Sum(usize),
    Mean(usize),
    CrossEntropy { logits: usize, probs: Tensor, targets: Vec<usize> },
    Bilinear { a: usize, u: usize, b: usize, au: Tensor },
    /// Gradients w.r.t. emissions, transitions, start and end are computed
    /// during the forward pass and only scaled by the upstream gradient.
    Crf { inputs: [usize; 4], grads: Box<[Tensor; 4]> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Dynamic reverse-mode tape, rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].tracked)
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Tracked parameter; repeated requests for the same id share one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&var) = self.params.get(&id) {
            return var;
        }
        self.nodes.push(Node {
            value: store.shared_value(id),
            op: Op::Param(id),
            tracked: true,
        });
        let var = Var(self.nodes.len() - 1);
        self.params.insert(id, var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if transpose_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != bk {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?} (transpose_b={transpose_b})", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), transpose_b, &mut out, false);
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(
            "matmul",
            Tensor::matrix(m, n, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                transpose_b,
            },
            tracked,
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (av, bv) = (self.val(a.0), self.val(b.0));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let tracked = self.tracked(&[a.0, b.0]);
        self.push(op_name, value, op, tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    /// Pointwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.val(a.0).map(|x| x * factor);
        let tracked = self.tracked(&[a.0]);
        self.push("scale", value, Op::Scale(a.0, factor), tracked)
    }

    /// Adds a `1 × n` (or length-`n`) row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.val(a.0), self.val(row.0));
        if rv.numel() != av.cols() || rv.rows() != 1 {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", av.shape(), rv.shape())));
        }
        let mut value = av.clone();
        let cols = av.cols();
        for r in 0..av.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        debug_assert_eq!(cols, rv.numel());
        let tracked = self.tracked(&[a.0, row.0]);
        self.push("add_row", value, Op::AddRow(a.0, row.0), tracked)
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.val(parts[0].0).rows();
        if parts.iter().any(|p| self.val(p.0).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ".to_string()));
        }
        let cols: usize = parts.iter().map(|p| self.val(p.0).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let tracked = self.tracked(&idx);
        self.push("concat_cols", Tensor::matrix(rows, cols, data)?, Op::ConcatCols(idx), tracked)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.val(parts[0].0).cols();
        if parts.iter().any(|p| self.val(p.0).cols() != cols) {
            return Err(shape_err("concat_rows", "column counts differ".to_string()));
        }
        let rows: usize = parts.iter().map(|p| self.val(p.0).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(self.val(p.0).data());
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let tracked = self.tracked(&idx);
        self.push("concat_rows", Tensor::matrix(rows, cols, data)?, Op::ConcatRows(idx), tracked)
    }

    /// Row selection; doubles as the embedding lookup when `a` is a table.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.val(a.0);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {:?}", av.shape())));
        }
        let cols = av.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let tracked = self.tracked(&[a.0]);
        self.push(
            "gather_rows",
            Tensor::matrix(rows.len(), cols, data)?,
            Op::GatherRows(a.0, rows.to_vec()),
            tracked,
        )
    }

    fn unary(&mut self, op_name: &'static str, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let value = self.val(a.0).map(f);
        let tracked = self.tracked(&[a.0]);
        self.push(op_name, value, op, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu(a.0), |x| x.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, Op::Softplus(a.0), softplus)
    }

    fn row_wise(&mut self, op_name: &'static str, a: Var, op: Op, f: impl Fn(&[f64], &mut Vec<f64>)) -> Result<Var> {
        let av = self.val(a.0);
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            f(av.row(r), &mut data);
        }
        let cols = data.len() / av.rows().max(1);
        let shape = if cols == av.cols() {
            av.shape().to_vec()
        } else {
            vec![av.rows(), cols]
        };
        let tracked = self.tracked(&[a.0]);
        self.push(op_name, Tensor::new(shape, data)?, op, tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise("softmax", a, Op::Softmax(a.0), |row, out| {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| (x - lse).exp()));
        })
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.row_wise("log_softmax", a, Op::LogSoftmax(a.0), |row, out| {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x - lse));
        })
    }

    /// Row-wise log-sum-exp, producing an `m × 1` column.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        self.row_wise("logsumexp", a, Op::LogSumExp(a.0), |row, out| {
            out.push(log_sum_exp(row));
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.val(a.0).data().iter().sum();
        let tracked = self.tracked(&[a.0]);
        self.push("sum", Tensor::scalar(total), Op::Sum(a.0), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        if av.numel() == 0 {
            return Err(shape_err("mean", "empty tensor".to_string()));
        }
        let mean = av.data().iter().sum::<f64>() / av.numel() as f64;
        let tracked = self.tracked(&[a.0]);
        self.push("mean", Tensor::scalar(mean), Op::Mean(a.0), tracked)
    }

    /// Sum over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_excluding(logits, targets, &[])
    }

    /// Cross entropy where row `r` ignores column `excluded[r]` (if any)
    /// entirely, as if its logit were `-inf`.
    pub fn cross_entropy_excluding(&mut self, logits: Var, targets: &[usize], excluded: &[Option<usize>]) -> Result<Var> {
        let lv = self.val(logits.0);
        let (rows, cols) = (lv.rows(), lv.cols());
        if targets.len() != rows || (!excluded.is_empty() && excluded.len() != rows) {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {:?}", targets.len(), lv.shape()),
            ));
        }
        let mut probs = Tensor::zeros(&[rows, cols]);
        let mut loss = 0.0;
        for r in 0..rows {
            let skip = excluded.get(r).copied().flatten();
            let t = targets[r];
            if t >= cols || Some(t) == skip {
                return Err(shape_err("cross_entropy", format!("invalid target {t} in row {r}")));
            }
            let row = lv.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| Some(c) != skip)
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if Some(c) != skip {
                    z += (x - max).exp();
                }
            }
            let lse = max + z.ln();
            let prow = probs.row_mut(r);
            for (c, &x) in row.iter().enumerate() {
                if Some(c) != skip {
                    prow[c] = (x - lse).exp();
                }
            }
            loss += lse - row[t];
        }
        let tracked = self.tracked(&[logits.0]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                probs,
                targets: targets.to_vec(),
            },
            tracked,
        )
    }

    /// Per-row bilinear forms: `out[i][r] = a[i] · U_r · b[i]`, where `u` is
    /// stored as `p × (R·q)` with block `r` holding `U_r`.
    pub fn bilinear(&mut self, a: Var, u: Var, b: Var) -> Result<Var> {
        let (av, uv, bv) = (self.val(a.0), self.val(u.0), self.val(b.0));
        let (k, p, q) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k || uv.rows() != p || q == 0 || uv.cols() % q != 0 {
            return Err(shape_err(
                "bilinear",
                format!("{:?}, {:?}, {:?}", av.shape(), uv.shape(), bv.shape()),
            ));
        }
        let labels = uv.cols() / q;
        let mut au = vec![0.0; k * labels * q];
        gemm(k, p, labels * q, av.data(), false, uv.data(), false, &mut au, false);
        let mut out = vec![0.0; k * labels];
        for i in 0..k {
            let brow = bv.row(i);
            for r in 0..labels {
                let block = &au[i * labels * q + r * q..i * labels * q + (r + 1) * q];
                out[i * labels + r] = block.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let tracked = self.tracked(&[a.0, u.0, b.0]);
        self.push(
            "bilinear",
            Tensor::matrix(k, labels, out)?,
            Op::Bilinear {
                a: a.0,
                u: u.0,
                b: b.0,
                au: Tensor::matrix(k, labels * q, au)?,
            },
            tracked,
        )
    }

    /// Negative log-likelihood of `gold` under a linear-chain CRF.
    pub fn crf_nll(&mut self, emissions: Var, transitions: Var, start: Var, end: Var, gold: &[usize]) -> Result<Var> {
        let (nll, grads) = crate::ner::crf_nll_with_grads(
            self.val(emissions.0),
            self.val(transitions.0),
            self.val(start.0),
            self.val(end.0),
            gold,
        )?;
        let inputs = [emissions.0, transitions.0, start.0, end.0];
        let tracked = self.tracked(&inputs);
        self.push(
            "crf_nll",
            Tensor::scalar(nll),
            Op::Crf {
                inputs,
                grads: Box::new(grads),
            },
            tracked,
        )
    }

    /// Backpropagates from the scalar `loss`, adding `∂loss/∂param` into the
    /// store's gradient accumulators.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.val(loss.0).numel() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.val(loss.0).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::filled(self.val(loss.0).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                store.accumulate_grad(*id, g);
            }
            Op::MatMul { a, b, transpose_b } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if self.nodes[*a].tracked {
                    // dA = G · Bᵀ (or G · B when b was used transposed)
                    let ga = self.grad_slot(grads, *a);
                    gemm(m, n, k, g.data(), false, bv.data(), !transpose_b, ga.data_mut(), true);
                }
                if self.nodes[*b].tracked {
                    let gb = self.grad_slot(grads, *b);
                    if *transpose_b {
                        // B is n × k: dB = Gᵀ · A
                        gemm(n, m, k, g.data(), true, av.data(), false, gb.data_mut(), true);
                    } else {
                        // B is k × n: dB = Aᵀ · G
                        gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g, 1.0);
                self.accumulate(grads, *b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].tracked {
                    let bv = self.val(*b);
                    let ga = self.grad_slot(grads, *a);
                    for ((x, &gv), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *x += gv * y;
                    }
                }
                if self.nodes[*b].tracked {
                    let av = self.val(*a);
                    let gb = self.grad_slot(grads, *b);
                    for ((x, &gv), &y) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *x += gv * y;
                    }
                }
            }
            Op::Scale(a, factor) => self.accumulate(grads, *a, g, *factor),
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g, 1.0);
                if self.nodes[*row].tracked {
                    let gr = self.grad_slot(grads, *row);
                    for r in 0..g.rows() {
                        for (x, &gv) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).cols();
                    if self.nodes[p].tracked {
                        let gp = self.grad_slot(grads, p);
                        for r in 0..g.rows() {
                            for (x, &gv) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + cols]) {
                                *x += gv;
                            }
                        }
                    }
                    offset += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    if self.nodes[p].tracked {
                        let gp = self.grad_slot(grads, p);
                        for (x, &gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *x += gv;
                        }
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, rows) => {
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    for (i, &r) in rows.iter().enumerate() {
                        for (x, &gv) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *x += gv;
                        }
                    }
                }
            }
            Op::Relu(a) => self.pointwise_back(grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, out),
            Op::Tanh(a) => self.pointwise_back(grads, *a, g, |_, y| 1.0 - y * y, out),
            Op::Softplus(a) => self.pointwise_back(grads, *a, g, |x, _| sigmoid(x), out),
            Op::Softmax(a) => {
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((x, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *x += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let total: f64 = gr.iter().sum();
                        for ((x, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *x += gv - yv.exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp(a) => {
                if self.nodes[*a].tracked {
                    let av = self.val(*a);
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..av.rows() {
                        let (lse, gv) = (out.data()[r], g.data()[r]);
                        for (x, &v) in ga.row_mut(r).iter_mut().zip(av.row(r)) {
                            *x += gv * (v - lse).exp();
                        }
                    }
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    ga.data_mut().iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel() as f64;
                let gv = g.item() / n;
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    ga.data_mut().iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                if self.nodes[*logits].tracked {
                    let gv = g.item();
                    let gl = self.grad_slot(grads, *logits);
                    gl.add_scaled(probs, gv);
                    let cols = probs.cols();
                    for (r, &t) in targets.iter().enumerate() {
                        gl.data_mut()[r * cols + t] -= gv;
                    }
                }
            }
            Op::Bilinear { a, u, b, au } => {
                let (av, uv, bv) = (self.val(*a), self.val(*u), self.val(*b));
                let (k, p, q) = (av.rows(), av.cols(), bv.cols());
                let labels = out.cols();
                // d(AU)[i][r·q + j] = g[i][r] · b[i][j]
                let mut dau = vec![0.0; k * labels * q];
                for i in 0..k {
                    for r in 0..labels {
                        let gv = g.get(i, r);
                        let block = &mut dau[i * labels * q + r * q..i * labels * q + (r + 1) * q];
                        for (x, &bj) in block.iter_mut().zip(bv.row(i)) {
                            *x = gv * bj;
                        }
                    }
                }
                if self.nodes[*b].tracked {
                    let gb = self.grad_slot(grads, *b);
                    for i in 0..k {
                        for r in 0..labels {
                            let gv = g.get(i, r);
                            let block = &au.row(i)[r * q..(r + 1) * q];
                            for (x, &v) in gb.row_mut(i).iter_mut().zip(block) {
                                *x += gv * v;
                            }
                        }
                    }
                }
                if self.nodes[*a].tracked {
                    let ga = self.grad_slot(grads, *a);
                    gemm(k, labels * q, p, &dau, false, uv.data(), true, ga.data_mut(), true);
                }
                if self.nodes[*u].tracked {
                    let gu = self.grad_slot(grads, *u);
                    gemm(p, k, labels * q, av.data(), true, &dau, false, gu.data_mut(), true);
                }
            }
            Op::Crf { inputs, grads: local } => {
                let gv = g.item();
                for (&input, local) in inputs.iter().zip(local.iter()) {
                    self.accumulate(grads, input, local, gv);
                }
            }
        }
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Tensor>], idx: usize) -> &'g mut Tensor {
        grads[idx].get_or_insert_with(|| Tensor::zeros(self.nodes[idx].value.shape()))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], idx: usize, g: &Tensor, scale: f64) {
        if self.nodes[idx].tracked {
            self.grad_slot(grads, idx).add_scaled(g, scale);
        }
    }

    fn pointwise_back(&self, grads: &mut [Option<Tensor>], a: usize, g: &Tensor, d: impl Fn(f64, f64) -> f64, out: &Tensor) {
        if !self.nodes[a].tracked {
            return;
        }
        let av = self.val(a);
        let ga = self.grad_slot(grads, a);
        for (((x, &gv), &inp), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()).zip(out.data()) {
            *x += gv * d(inp, y);
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
