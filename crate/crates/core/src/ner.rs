//! NER layer: emission scores over `[e_i ; t_i]` and a linear-chain CRF.

use rand::Rng;

use crate::autograd::{init, log_sum_exp, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Best label sequence and its log-potential.
#[derive(Clone, Debug, PartialEq)]
pub struct NerPath {
    pub labels: Vec<usize>,
    pub score: f64,
}

/// Borrowed CRF potentials: `emissions` is `n × K`, `transitions[a][b]`
/// scores label `a` followed by `b`.
#[derive(Clone, Copy, Debug)]
pub struct CrfPotentials<'a> {
    pub emissions: &'a Tensor,
    pub transitions: &'a Tensor,
    pub start: &'a [f64],
    pub end: &'a [f64],
}

impl<'a> CrfPotentials<'a> {
    pub fn new(emissions: &'a Tensor, transitions: &'a Tensor, start: &'a [f64], end: &'a [f64]) -> Result<Self> {
        let k = emissions.cols();
        if transitions.rows() != k || transitions.cols() != k || start.len() != k || end.len() != k {
            return Err(Error::Shape {
                op: "crf",
                detail: format!(
                    "emissions {:?}, transitions {:?}, start {}, end {}",
                    emissions.shape(),
                    transitions.shape(),
                    start.len(),
                    end.len()
                ),
            });
        }
        Ok(CrfPotentials {
            emissions,
            transitions,
            start,
            end,
        })
    }

    pub fn len(&self) -> usize {
        self.emissions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_labels(&self) -> usize {
        self.emissions.cols()
    }

    /// `start[y₁] + Σ h_t[y_t] + Σ trans[y_t][y_{t+1}] + end[y_n]`, summed
    /// left to right.
    pub fn path_score(&self, path: &[usize]) -> f64 {
        let mut score = self.start[path[0]] + self.emissions.get(0, path[0]);
        for t in 1..path.len() {
            score += self.transitions.get(path[t - 1], path[t]);
            score += self.emissions.get(t, path[t]);
        }
        score + self.end[path[path.len() - 1]]
    }

    /// Log-space forward table: `alpha[t][y]` sums all prefixes ending in `y`.
    fn forward(&self) -> Vec<Vec<f64>> {
        let (n, k) = (self.len(), self.num_labels());
        let mut alpha = vec![vec![0.0; k]; n];
        for y in 0..k {
            alpha[0][y] = self.start[y] + self.emissions.get(0, y);
        }
        let mut scratch = vec![0.0; k];
        for t in 1..n {
            for y in 0..k {
                for (prev, s) in scratch.iter_mut().enumerate() {
                    *s = alpha[t - 1][prev] + self.transitions.get(prev, y);
                }
                alpha[t][y] = self.emissions.get(t, y) + log_sum_exp(&scratch);
            }
        }
        alpha
    }

    fn backward(&self) -> Vec<Vec<f64>> {
        let (n, k) = (self.len(), self.num_labels());
        let mut beta = vec![vec![0.0; k]; n];
        beta[n - 1].copy_from_slice(self.end);
        let mut scratch = vec![0.0; k];
        for t in (0..n - 1).rev() {
            for y in 0..k {
                for (next, s) in scratch.iter_mut().enumerate() {
                    *s = self.transitions.get(y, next) + self.emissions.get(t + 1, next) + beta[t + 1][next];
                }
                beta[t][y] = log_sum_exp(&scratch);
            }
        }
        beta
    }

    /// `log Z` by the forward recursion.
    pub fn log_partition(&self) -> f64 {
        let alpha = self.forward();
        let last: Vec<f64> = alpha[self.len() - 1]
            .iter()
            .zip(self.end)
            .map(|(a, e)| a + e)
            .collect();
        log_sum_exp(&last)
    }

    /// Per-position label posteriors.
    pub fn marginals(&self) -> Tensor {
        let (alpha, beta) = (self.forward(), self.backward());
        let log_z = self.log_partition();
        let (n, k) = (self.len(), self.num_labels());
        let mut out = Tensor::zeros(&[n, k]);
        for t in 0..n {
            for y in 0..k {
                out.set(t, y, (alpha[t][y] + beta[t][y] - log_z).exp());
            }
        }
        out
    }

    /// Highest-scoring path. Backpointers and the final label prefer the
    /// smaller label id on ties.
    pub fn viterbi(&self) -> NerPath {
        let (n, k) = (self.len(), self.num_labels());
        let mut delta: Vec<f64> = (0..k).map(|y| self.start[y] + self.emissions.get(0, y)).collect();
        let mut backptr = vec![vec![0usize; k]; n];
        for t in 1..n {
            let mut next = vec![0.0; k];
            for y in 0..k {
                let mut best = 0;
                let mut best_score = delta[0] + self.transitions.get(0, y);
                for prev in 1..k {
                    let s = delta[prev] + self.transitions.get(prev, y);
                    if s > best_score {
                        best = prev;
                        best_score = s;
                    }
                }
                backptr[t][y] = best;
                next[y] = best_score + self.emissions.get(t, y);
            }
            delta = next;
        }
        let mut last = 0;
        for y in 1..k {
            if delta[y] + self.end[y] > delta[last] + self.end[last] {
                last = y;
            }
        }
        let mut labels = vec![0; n];
        labels[n - 1] = last;
        for t in (1..n).rev() {
            labels[t - 1] = backptr[t][labels[t]];
        }
        let score = self.path_score(&labels);
        NerPath { labels, score }
    }
}

/// NLL of `gold` and its gradients w.r.t. (emissions, transitions, start,
/// end), shaped like the inputs.
pub(crate) fn crf_nll_with_grads(
    emissions: &Tensor,
    transitions: &Tensor,
    start: &Tensor,
    end: &Tensor,
    gold: &[usize],
) -> Result<(f64, [Tensor; 4])> {
    let crf = CrfPotentials::new(emissions, transitions, start.data(), end.data())?;
    let (n, k) = (crf.len(), crf.num_labels());
    if n == 0 || gold.len() != n || gold.iter().any(|&y| y >= k) {
        return Err(Error::Shape {
            op: "crf_nll",
            detail: format!("gold path of length {} for {n} tokens", gold.len()),
        });
    }
    let (alpha, beta) = (crf.forward(), crf.backward());
    let last: Vec<f64> = alpha[n - 1].iter().zip(crf.end).map(|(a, e)| a + e).collect();
    let log_z = log_sum_exp(&last);
    let nll = log_z - crf.path_score(gold);

    let mut g_emit = Tensor::zeros(emissions.shape());
    let mut g_trans = Tensor::zeros(transitions.shape());
    let mut g_start = Tensor::zeros(start.shape());
    let mut g_end = Tensor::zeros(end.shape());
    for t in 0..n {
        for y in 0..k {
            g_emit.set(t, y, (alpha[t][y] + beta[t][y] - log_z).exp());
        }
    }
    for y in 0..k {
        g_start.data_mut()[y] = g_emit.get(0, y);
        g_end.data_mut()[y] = g_emit.get(n - 1, y);
    }
    for t in 0..n - 1 {
        for a in 0..k {
            for b in 0..k {
                let xi = alpha[t][a] + transitions.get(a, b) + emissions.get(t + 1, b) + beta[t + 1][b] - log_z;
                let cur = g_trans.get(a, b);
                g_trans.set(a, b, cur + xi.exp());
            }
        }
    }
    for (t, &y) in gold.iter().enumerate() {
        let cur = g_emit.get(t, y);
        g_emit.set(t, y, cur - 1.0);
        if t > 0 {
            let cur = g_trans.get(gold[t - 1], y);
            g_trans.set(gold[t - 1], y, cur - 1.0);
        }
    }
    g_start.data_mut()[gold[0]] -= 1.0;
    g_end.data_mut()[gold[n - 1]] -= 1.0;
    Ok((nll, [g_emit, g_trans, g_start, g_end]))
}

/// Affine emission layer plus CRF transition, start and end scores.
#[derive(Clone, Debug)]
pub struct NerHead {
    pub weight: ParamId,
    pub bias: ParamId,
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub labels: usize,
}

impl NerHead {
    pub fn init<R: Rng>(store: &mut ParamStore, rng: &mut R, input_dim: usize, labels: usize) -> Result<Self> {
        Ok(NerHead {
            weight: store.add("ner.weight", init::glorot(rng, input_dim, labels))?,
            bias: store.add("ner.bias", Tensor::zeros(&[1, labels]))?,
            transitions: store.add("ner.transitions", Tensor::zeros(&[labels, labels]))?,
            start: store.add("ner.start", Tensor::zeros(&[1, labels]))?,
            end: store.add("ner.end", Tensor::zeros(&[1, labels]))?,
            labels,
        })
    }

    /// `h_i = affine([e_i ; t_i])`
    pub fn emissions(&self, g: &mut Graph, store: &ParamStore, e: Var, soft_tags: Var) -> Result<Var> {
        let v = g.concat_cols(&[e, soft_tags])?;
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(v, w)?;
        g.add_row(h, b)
    }

    pub fn nll(&self, g: &mut Graph, store: &ParamStore, emissions: Var, gold: &[usize]) -> Result<Var> {
        let trans = g.param(store, self.transitions);
        let start = g.param(store, self.start);
        let end = g.param(store, self.end);
        g.crf_nll(emissions, trans, start, end, gold)
    }

    pub fn decode(&self, store: &ParamStore, emissions: &Tensor) -> Result<NerPath> {
        let crf = CrfPotentials::new(
            emissions,
            store.value(self.transitions),
            store.value(self.start).data(),
            store.value(self.end).data(),
        )?;
        Ok(crf.viterbi())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        Tensor::matrix(rows, cols, data).unwrap()
    }

    fn all_paths(n: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
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

    #[test]
    fn single_label_single_token() {
        let h = Tensor::zeros(&[1, 1]);
        let t = Tensor::zeros(&[1, 1]);
        let z = Tensor::zeros(&[1, 1]);
        let (nll, _) = crf_nll_with_grads(&h, &t, &z, &z, &[0]).unwrap();
        assert_eq!(nll, 0.0);
    }

    #[test]
    fn zero_transitions_factorize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, k) = (5, 4);
        let h = random(&mut rng, n, k);
        let trans = Tensor::zeros(&[k, k]);
        let zeros = Tensor::zeros(&[1, k]);
        let gold = [0, 3, 1, 1, 2];
        let (nll, _) = crf_nll_with_grads(&h, &trans, &zeros, &zeros, &gold).unwrap();
        let independent: f64 = (0..n).map(|t| log_sum_exp(h.row(t)) - h.get(t, gold[t])).sum();
        assert!((nll - independent).abs() < 1e-12);

        let crf = CrfPotentials::new(&h, &trans, zeros.data(), zeros.data()).unwrap();
        let argmax: Vec<usize> = (0..n).map(|t| h.argmax_row(t)).collect();
        assert_eq!(crf.viterbi().labels, argmax);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..=5);
            let k = rng.random_range(1..=4);
            let h = random(&mut rng, n, k);
            let trans = random(&mut rng, k, k);
            let start = random(&mut rng, 1, k);
            let end = random(&mut rng, 1, k);
            let crf = CrfPotentials::new(&h, &trans, start.data(), end.data()).unwrap();
            let scores: Vec<f64> = all_paths(n, k).iter().map(|p| crf.path_score(p)).collect();
            let brute = log_sum_exp(&scores);
            assert!((crf.log_partition() - brute).abs() <= 1e-10 * brute.abs().max(1.0));
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(crf.viterbi().score, best);
            let marg = crf.marginals();
            for t in 0..n {
                assert!((marg.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn emission_shift_keeps_viterbi() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, k) = (4, 3);
        let h = random(&mut rng, n, k);
        let trans = random(&mut rng, k, k);
        let start = random(&mut rng, 1, k);
        let end = random(&mut rng, 1, k);
        let crf = CrfPotentials::new(&h, &trans, start.data(), end.data()).unwrap();
        let mut shifted = h.clone();
        for v in shifted.row_mut(2) {
            *v += 7.5;
        }
        let crf2 = CrfPotentials::new(&shifted, &trans, start.data(), end.data()).unwrap();
        assert_eq!(crf.viterbi().labels, crf2.viterbi().labels);
        assert!((crf2.log_partition() - crf.log_partition() - 7.5).abs() < 1e-10);
    }

    #[test]
    fn ties_prefer_smaller_ids() {
        let h = Tensor::zeros(&[3, 3]);
        let trans = Tensor::zeros(&[3, 3]);
        let z = [0.0; 3];
        let crf = CrfPotentials::new(&h, &trans, &z, &z).unwrap();
        assert_eq!(crf.viterbi().labels, vec![0, 0, 0]);
    }

    #[test]
    fn bad_gold_is_rejected() {
        let h = Tensor::zeros(&[2, 2]);
        let t = Tensor::zeros(&[2, 2]);
        let z = Tensor::zeros(&[1, 2]);
        assert!(crf_nll_with_grads(&h, &t, &z, &z, &[0]).is_err());
        assert!(crf_nll_with_grads(&h, &t, &z, &z, &[0, 2]).is_err());
    }
}
