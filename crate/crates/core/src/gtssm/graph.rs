//! φ-nearest-neighbour cosine graphs, contractive Borůvka MST and the
//! breadth-first topological order of the resulting tree.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{HvplError, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Undirected weighted graph over sequence positions.
#[derive(Clone, Debug)]
pub struct SequenceGraph {
    n: usize,
    edges: Vec<Edge>,
}

impl SequenceGraph {
    /// Builds a graph from an edge list; edges are normalised to `u < v`,
    /// deduplicated and sorted.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        let mut out: Vec<Edge> = Vec::new();
        for e in edges {
            if e.u == e.v {
                return Err(HvplError::Structure(format!("self-loop at vertex {}", e.u)));
            }
            if e.u >= n || e.v >= n {
                return Err(HvplError::Structure(format!(
                    "edge ({}, {}) outside {n} vertices",
                    e.u, e.v
                )));
            }
            if !(0.0..=2.0).contains(&e.weight) {
                return Err(HvplError::Structure(format!("edge weight {} outside [0, 2]", e.weight)));
            }
            out.push(Edge {
                u: e.u.min(e.v),
                v: e.u.max(e.v),
                weight: e.weight,
            });
        }
        out.sort_by_key(|a| (a.u, a.v));
        out.dedup_by(|a, b| a.u == b.u && a.v == b.v);
        Ok(SequenceGraph { n, edges: out })
    }

    pub fn vertex_count(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges
            .binary_search_by(|e| (e.u, e.v).cmp(&key))
            .is_ok()
    }

    pub fn component_count(&self) -> usize {
        let mut uf = UnionFind::new(self.n);
        for e in &self.edges {
            uf.union(e.u, e.v);
        }
        uf.count()
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
    count: usize,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
            count: n,
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        self.count -= 1;
        true
    }

    fn count(&self) -> usize {
        self.count
    }
}

fn cosine_matrix(x: &Matrix) -> Result<Matrix> {
    let n = x.rows();
    let norms: Vec<f64> = (0..n)
        .map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|&v| v == 0.0 || !v.is_finite()) {
        return Err(HvplError::Degenerate(format!(
            "row {i} has zero or non-finite norm; cosine similarity undefined"
        )));
    }
    let gram = x.matmul_t(x)?;
    Ok(Matrix::from_fn(n, n, |i, j| {
        (gram.get(i, j) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
    }))
}

/// Symmetrised φ-NN graph with weights `1 − cos`.
///
/// Each vertex links to its `phi` most similar other vertices (ties toward
/// the lower index). If the union is disconnected, the most similar
/// cross-component pair is joined repeatedly until one component remains.
pub fn build_knn_graph(x: &Matrix, phi: usize) -> Result<SequenceGraph> {
    let n = x.rows();
    if n > 0 && phi >= n.max(2) {
        return Err(HvplError::Usage(format!("phi = {phi} must be below {n} vertices")));
    }
    let sim = cosine_matrix(x)?;
    let weight = |i: usize, j: usize| (1.0 - sim.get(i, j)).clamp(0.0, 2.0);

    let mut edges = Vec::new();
    let mut cands: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        cands.clear();
        cands.extend((0..n).filter(|&j| j != i));
        cands.sort_by(|&a, &b| sim.get(i, b).total_cmp(&sim.get(i, a)).then(a.cmp(&b)));
        for &j in cands.iter().take(phi) {
            edges.push(Edge {
                u: i,
                v: j,
                weight: weight(i, j),
            });
        }
    }

    let mut uf = UnionFind::new(n);
    for e in &edges {
        uf.union(e.u, e.v);
    }
    while uf.count() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if uf.find(i) == uf.find(j) {
                    continue;
                }
                let s = sim.get(i, j);
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, i, j));
                }
            }
        }
        let (_, i, j) = best.expect("more than one component implies a cross pair");
        uf.union(i, j);
        edges.push(Edge {
            u: i,
            v: j,
            weight: weight(i, j),
        });
    }
    SequenceGraph::from_edges(n, edges)
}

/// Rooted spanning tree (or forest) with its breadth-first topological order.
#[derive(Clone, Debug, PartialEq)]
pub struct SpanningTree {
    parent: Vec<usize>,
    children: Vec<Vec<usize>>,
    bto: Vec<usize>,
    /// Weight of the edge from each vertex to its parent (0 at roots).
    edge_weight: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParentsFixture {
    parents: Vec<usize>,
}

impl SpanningTree {
    /// Builds a tree from a parent array where roots map to themselves.
    pub fn from_parents(parent: Vec<usize>) -> Result<Self> {
        let n = parent.len();
        if let Some((i, &p)) = parent.iter().enumerate().find(|(_, &p)| p >= n) {
            return Err(HvplError::Structure(format!("vertex {i} has parent {p} outside {n}")));
        }
        let mut children = vec![Vec::new(); n];
        for (i, &p) in parent.iter().enumerate() {
            if p != i {
                children[p].push(i);
            }
        }
        let bto = bto_order(&parent, &children)?;
        Ok(SpanningTree {
            edge_weight: vec![0.0; n],
            parent,
            children,
            bto,
        })
    }

    pub fn single(n: usize) -> Self {
        Self::from_parents((0..n).collect()).expect("all roots is a valid forest")
    }

    /// Simple path `0 → 1 → … → n−1` rooted at 0.
    pub fn chain(n: usize) -> Self {
        Self::from_parents((0..n).map(|i| i.saturating_sub(1)).collect()).expect("valid chain")
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self, v: usize) -> usize {
        self.parent[v]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn is_root(&self, v: usize) -> bool {
        self.parent[v] == v
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&v| self.is_root(v)).collect()
    }

    /// First root in breadth-first order.
    pub fn root(&self) -> Option<usize> {
        self.bto.first().copied()
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub fn bto(&self) -> &[usize] {
        &self.bto
    }

    pub fn edge_count(&self) -> usize {
        self.len() - self.roots().len()
    }

    /// Sum of edge weights, accumulated in ascending order so equal edge
    /// multisets give bitwise-equal totals.
    pub fn total_weight(&self) -> f64 {
        let mut w: Vec<f64> = (0..self.len())
            .filter(|&v| !self.is_root(v))
            .map(|v| self.edge_weight[v])
            .collect();
        w.sort_by(f64::total_cmp);
        w.iter().sum()
    }

    pub fn edge_weights_sorted(&self) -> Vec<f64> {
        let mut w: Vec<f64> = (0..self.len())
            .filter(|&v| !self.is_root(v))
            .map(|v| self.edge_weight[v])
            .collect();
        w.sort_by(f64::total_cmp);
        w
    }

    /// Undirected edge set as `(lo, hi)` pairs.
    pub fn edge_set(&self) -> std::collections::BTreeSet<(usize, usize)> {
        (0..self.len())
            .filter(|&v| !self.is_root(v))
            .map(|v| (v.min(self.parent[v]), v.max(self.parent[v])))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ParentsFixture {
            parents: self.parent.clone(),
        })
        .expect("plain struct serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ParentsFixture = serde_json::from_str(s)?;
        Self::from_parents(f.parents)
    }
}

/// Kahn-style breadth-first order from the roots (`parent[v] == v`), roots
/// in increasing index order. Fails if some vertex is unreachable, which
/// means the parent array contains a cycle.
pub fn bto_order(parent: &[usize], children: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = parent.len();
    let mut order = Vec::with_capacity(n);
    let mut queue: VecDeque<usize> = (0..n).filter(|&v| parent[v] == v).collect();
    while let Some(v) = queue.pop_front() {
        order.push(v);
        queue.extend(children[v].iter().copied());
    }
    if order.len() != n {
        return Err(HvplError::Structure(format!(
            "cycle in parent array: only {} of {n} vertices reachable from a root",
            order.len()
        )));
    }
    Ok(order)
}

/// Minimum spanning tree by contractive Borůvka rounds, rooted at vertex 0.
///
/// Edges are totally ordered by `(weight, u, v)`, which makes every round
/// deterministic and the result the unique MST under that order.
pub fn boruvka_mst(g: &SequenceGraph) -> Result<SpanningTree> {
    let n = g.vertex_count();
    let edges = g.edges();
    let better = |a: usize, b: usize| {
        let (ea, eb) = (&edges[a], &edges[b]);
        ea.weight
            .total_cmp(&eb.weight)
            .then((ea.u, ea.v).cmp(&(eb.u, eb.v)))
            .is_lt()
    };

    let mut uf = UnionFind::new(n);
    let mut chosen: Vec<usize> = Vec::with_capacity(n.saturating_sub(1));
    // Edges still crossing components; contracted away as rounds proceed.
    let mut live: Vec<usize> = (0..edges.len()).collect();
    loop {
        let mut cheapest: Vec<Option<usize>> = vec![None; n];
        live.retain(|&i| uf.find(edges[i].u) != uf.find(edges[i].v));
        if live.is_empty() {
            break;
        }
        for &i in &live {
            let (ru, rv) = (uf.find(edges[i].u), uf.find(edges[i].v));
            for r in [ru, rv] {
                if cheapest[r].is_none_or(|c| better(i, c)) {
                    cheapest[r] = Some(i);
                }
            }
        }
        let mut picked: Vec<usize> = cheapest.into_iter().flatten().collect();
        picked.sort_unstable();
        picked.dedup();
        for i in picked {
            if uf.union(edges[i].u, edges[i].v) {
                chosen.push(i);
            }
        }
    }
    if uf.count() > 1 {
        return Err(HvplError::Disconnected {
            components: uf.count(),
        });
    }

    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for &i in &chosen {
        let e = edges[i];
        adj[e.u].push((e.v, e.weight));
        adj[e.v].push((e.u, e.weight));
    }
    for a in adj.iter_mut() {
        a.sort_by_key(|&(v, _)| v);
    }
    let mut parent: Vec<usize> = (0..n).collect();
    let mut weight = vec![0.0; n];
    let mut seen = vec![false; n];
    if n > 0 {
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(v) = queue.pop_front() {
            for &(w, wt) in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    parent[w] = v;
                    weight[w] = wt;
                    queue.push_back(w);
                }
            }
        }
    }
    let mut tree = SpanningTree::from_parents(parent)?;
    tree.edge_weight = weight;
    Ok(tree)
}
