//! Maximum spanning arborescence decoding (Chu-Liu/Edmonds).

use crate::error::{Error, Result};

/// Dense arc scores for a sentence of `n` tokens plus the root at position 0.
///
/// `get(d, h)` is the score of attaching dependent `d` to head `h`. The
/// diagonal and the root row are `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcScores {
    n: usize,
    scores: Vec<f64>,
}

impl ArcScores {
    /// Builds from a row-major `(n+1) × (n+1)` matrix indexed `[dependent][head]`.
    /// Diagonal and row 0 are overwritten with `-inf`.
    pub fn new(n: usize, mut scores: Vec<f64>) -> Result<Self> {
        let size = n + 1;
        if scores.len() != size * size {
            return Err(Error::Shape {
                op: "arc_scores",
                detail: format!("{} values for {n} tokens", scores.len()),
            });
        }
        for h in 0..size {
            scores[h] = f64::NEG_INFINITY;
        }
        for d in 0..size {
            scores[d * size + d] = f64::NEG_INFINITY;
        }
        if let Some(i) = scores.iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Shape {
                op: "arc_scores",
                detail: format!("invalid score at flat index {i}"),
            });
        }
        Ok(ArcScores { n, scores })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, dependent: usize, head: usize) -> f64 {
        self.scores[dependent * (self.n + 1) + head]
    }

    /// Sum of `get(d, heads[d-1])` for `d = 1..=n`, in order.
    pub fn tree_score(&self, heads: &[usize]) -> f64 {
        heads.iter().enumerate().fold(0.0, |acc, (i, &h)| acc + self.get(i + 1, h))
    }
}

/// Checks that `heads` (head of token `i+1` at position `i`, `0` = root) is a
/// tree with exactly one token attached to the root.
pub fn validate_tree(heads: &[usize]) -> Result<()> {
    let n = heads.len();
    let mut roots = 0;
    for (i, &h) in heads.iter().enumerate() {
        if h > n {
            return Err(Error::InvalidTree(format!("token {} has head {h} beyond length {n}", i + 1)));
        }
        if h == i + 1 {
            return Err(Error::InvalidTree(format!("token {} heads itself", i + 1)));
        }
        if h == 0 {
            roots += 1;
        }
    }
    if roots != 1 {
        return Err(Error::InvalidTree(format!("{roots} tokens attached to the root")));
    }
    for start in 1..=n {
        let mut node = start;
        let mut steps = 0;
        while node != 0 {
            node = heads[node - 1];
            steps += 1;
            if steps > n {
                return Err(Error::InvalidTree(format!("token {start} lies on a cycle")));
            }
        }
    }
    Ok(())
}

/// Highest-scoring tree with a single root child.
///
/// The unconstrained arborescence is tried first; if it attaches several
/// tokens to the root, each token is in turn forced to be the only root
/// child and the best of those trees wins (smaller token on ties).
pub fn mst_decode(scores: &ArcScores) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    // weights[h][d] for the edge h -> d.
    let size = n + 1;
    let mut weights = vec![vec![f64::NEG_INFINITY; size]; size];
    for (h, row) in weights.iter_mut().enumerate() {
        for (d, w) in row.iter_mut().enumerate().skip(1) {
            *w = scores.get(d, h);
        }
    }
    let heads = arborescence(&weights);
    if heads.iter().filter(|&&h| h == 0).count() == 1 {
        return heads;
    }

    let mut best: Option<(f64, Vec<usize>)> = None;
    for child in 1..=n {
        let mut forced = weights.clone();
        for (d, w) in forced[0].iter_mut().enumerate() {
            if d != child {
                *w = f64::NEG_INFINITY;
            }
        }
        let heads = arborescence(&forced);
        let score = scores.tree_score(&heads);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, heads));
        }
    }
    best.map(|(_, h)| h).expect("at least one token")
}

/// Chu-Liu/Edmonds on a dense graph rooted at node 0. Returns the head of
/// nodes `1..N`.
fn arborescence(weights: &[Vec<f64>]) -> Vec<usize> {
    let parents = contract_and_solve(weights);
    parents[1..].to_vec()
}

fn best_incoming(weights: &[Vec<f64>]) -> Vec<usize> {
    let size = weights.len();
    let mut best = vec![0; size];
    for (v, b) in best.iter_mut().enumerate().skip(1) {
        let mut arg = None;
        let mut score = f64::NEG_INFINITY;
        for (u, row) in weights.iter().enumerate() {
            if u != v && (arg.is_none() || row[v] > score) {
                arg = Some(u);
                score = row[v];
            }
        }
        *b = arg.unwrap_or(0);
    }
    best
}

fn find_cycle(parents: &[usize]) -> Option<Vec<usize>> {
    let size = parents.len();
    // 0 = unvisited, 1 = on current walk, 2 = done
    let mut state = vec![0u8; size];
    state[0] = 2;
    for start in 1..size {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parents[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).expect("node on walk");
            let cycle = path[pos..].to_vec();
            for &p in &path {
                state[p] = 2;
            }
            return Some(cycle);
        }
        for &p in &path {
            state[p] = 2;
        }
    }
    None
}

fn contract_and_solve(weights: &[Vec<f64>]) -> Vec<usize> {
    let size = weights.len();
    let parents = best_incoming(weights);
    let Some(cycle) = find_cycle(&parents) else {
        return parents;
    };

    let mut in_cycle = vec![false; size];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    // Contracted node ids: non-cycle nodes keep their relative order, the
    // cycle becomes the last node.
    let mut new_id = vec![usize::MAX; size];
    let mut old_of = Vec::new();
    for v in 0..size {
        if !in_cycle[v] {
            new_id[v] = old_of.len();
            old_of.push(v);
        }
    }
    let c = old_of.len();
    let contracted_size = c + 1;

    let mut w = vec![vec![f64::NEG_INFINITY; contracted_size]; contracted_size];
    // Best real endpoint inside the cycle for edges entering / leaving it.
    let mut enter_at = vec![usize::MAX; contracted_size];
    let mut leave_from = vec![usize::MAX; contracted_size];
    for (nu, &u) in old_of.iter().enumerate() {
        for (nv, &v) in old_of.iter().enumerate() {
            w[nu][nv] = weights[u][v];
        }
        for &v in &cycle {
            let entering = weights[u][v] - weights[parents[v]][v];
            if enter_at[nu] == usize::MAX || entering > w[nu][c] {
                w[nu][c] = entering;
                enter_at[nu] = v;
            }
        }
        for &x in &cycle {
            if leave_from[nu] == usize::MAX || weights[x][u] > w[c][nu] {
                w[c][nu] = weights[x][u];
                leave_from[nu] = x;
            }
        }
    }

    let sub = contract_and_solve(&w);

    let mut result = parents.clone();
    for (nv, &v) in old_of.iter().enumerate().skip(1) {
        let np = sub[nv];
        result[v] = if np == c { leave_from[nv] } else { old_of[np] };
    }
    let entering_parent = sub[c];
    let entry = enter_at[entering_parent];
    result[entry] = old_of[entering_parent];
    result
}
