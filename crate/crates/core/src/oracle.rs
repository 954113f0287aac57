//! Straight-line reference implementations used as independent oracles.
//!
//! Nothing here shares code with the production paths it checks; each
//! routine is the most literal O(n²)-or-worse version of its definition.

use std::collections::BTreeSet;

use crate::tensor::Matrix;

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// Central finite differences of a scalar function over every entry of `x`.
pub fn finite_difference(x: &Matrix, step: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe);
        probe.data_mut()[i] = orig - step;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Central differences on a chosen subset of flat indices; other entries are 0.
pub fn finite_difference_at(
    x: &Matrix,
    step: f64,
    indices: &[usize],
    f: impl Fn(&Matrix) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    indices
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let up = f(&probe);
            probe.data_mut()[i] = orig - step;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Single-head attention weights `softmax(P W_q (F W_k)ᵀ / √d)` written out
/// entry by entry.
pub fn attention_scores_reference(p: &Matrix, f: &Matrix, wq: &Matrix, wk: &Matrix) -> Matrix {
    let d = wq.cols();
    let q = naive_matmul(p, wq);
    let k = naive_matmul(f, wk);
    let mut out = Matrix::zeros(p.rows(), f.rows());
    for i in 0..p.rows() {
        let logits: Vec<f64> = (0..f.rows())
            .map(|j| (0..d).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Undirected φ-NN edge set `(lo, hi)` from all-pairs cosine similarity,
/// ties broken toward the lower vertex index. No connectivity repair.
pub fn knn_edges_reference(x: &Matrix, phi: usize) -> BTreeSet<(usize, usize)> {
    let n = x.rows();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut cands: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (cosine(x.row(i), x.row(j)), j))
            .collect();
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for &(_, j) in cands.iter().take(phi) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

/// Kruskal minimum spanning forest; returns the chosen edges' weights sorted
/// ascending.
pub fn kruskal_weights(n: usize, edges: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..edges.len()).collect();
    order.sort_by(|&a, &b| edges[a].2.partial_cmp(&edges[b].2).unwrap().then(a.cmp(&b)));
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut chosen = Vec::new();
    for i in order {
        let (u, v, w) = edges[i];
        let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
        if ru != rv {
            parent[ru] = rv;
            chosen.push(w);
        }
    }
    chosen.sort_by(|a, b| a.partial_cmp(b).unwrap());
    chosen
}

/// Minimum-cost assignment of every row to a distinct column by trying all
/// injective maps. Only for tiny problems.
pub fn exhaustive_assignment(cost: &Matrix) -> (f64, Vec<usize>) {
    fn rec(
        cost: &Matrix,
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
        acc: f64,
    ) {
        if row == cost.rows() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for c in 0..cost.cols() {
            if used[c] {
                continue;
            }
            used[c] = true;
            cur.push(c);
            rec(cost, row + 1, used, cur, best, acc + cost.get(row, c));
            cur.pop();
            used[c] = false;
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(cost, 0, &mut vec![false; cost.cols()], &mut Vec::new(), &mut best, 0.0);
    best
}
