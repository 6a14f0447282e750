//! Exact unit-cost graph edit distance by depth-first branch and bound, plus
//! the normalized distance and its binned similarity score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeled::LabeledGraph;

/// Default limit on `|V1| + |V2|` when no budget is given.
pub const DEFAULT_SIZE_LIMIT: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EditOp {
    VertexIns { v2: usize, label: u64 },
    VertexDel { v1: usize, label: u64 },
    VertexRelabel { v1: usize, v2: usize, from: u64, to: u64 },
    EdgeIns { u2: usize, v2: usize, label: u64 },
    EdgeDel { u1: usize, v1: usize, label: u64 },
    EdgeRelabel { u1: usize, v1: usize, from: u64, to: u64 },
}

impl EditOp {
    pub fn is_insertion(&self) -> bool {
        matches!(self, EditOp::VertexIns { .. } | EditOp::EdgeIns { .. })
    }

    pub fn is_deletion(&self) -> bool {
        matches!(self, EditOp::VertexDel { .. } | EditOp::EdgeDel { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GedResult {
    pub ged: usize,
    pub dist: f64,
    pub exact: bool,
    /// Vertex map of `g1` into `g2` (`None` = deleted).
    pub mapping: Vec<Option<usize>>,
    pub edit_path: Vec<EditOp>,
    /// Search nodes expanded.
    pub expanded: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GedOptions {
    pub size_limit: usize,
    /// Maximum expanded nodes; lifts the size limit.
    pub budget: Option<u64>,
}

impl Default for GedOptions {
    fn default() -> Self {
        GedOptions { size_limit: DEFAULT_SIZE_LIMIT, budget: None }
    }
}

/// `ged / (|V1| + |E1| + |V2| + |E2|)`.
pub fn normalized_dist(ged: usize, g1: &LabeledGraph, g2: &LabeledGraph) -> Result<f64> {
    let denom = g1.n_vertices() + g1.n_edges() + g2.n_vertices() + g2.n_edges();
    if denom == 0 {
        return Err(Error::EmptyGraphs);
    }
    Ok(ged as f64 / denom as f64)
}

/// Piecewise-constant map from normalized distance to similarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBins {
    /// Upper edge of each bin over distance, strictly increasing.
    pub edges: Vec<f64>,
    pub scores: Vec<f64>,
}

impl Default for SimilarityBins {
    fn default() -> Self {
        SimilarityBins {
            edges: vec![0.0, 0.05, 0.10, 0.20, 0.35],
            scores: vec![1.0, 0.75, 0.5, 0.25, 0.0],
        }
    }
}

impl SimilarityBins {
    pub fn new(edges: Vec<f64>, scores: Vec<f64>) -> Result<Self> {
        let b = SimilarityBins { edges, scores };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Bins(m.to_string()));
        if self.edges.is_empty() || self.edges.len() != self.scores.len() {
            return bad("need one score per edge");
        }
        if self.edges[0] != 0.0 || self.scores[0] != 1.0 {
            return bad("first bin must map distance 0 to score 1");
        }
        if self.edges.windows(2).any(|w| !(w[0] < w[1])) {
            return bad("edges must be strictly increasing");
        }
        if self.scores.windows(2).any(|w| w[1] > w[0]) || self.scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("scores must be nonincreasing within [0, 1]");
        }
        Ok(())
    }

    /// Score of the first bin whose edge is at or above `dist`; 0 past the last edge.
    pub fn to_similarity(&self, dist: f64) -> f64 {
        self.edges
            .iter()
            .position(|&e| dist <= e)
            .map_or(0.0, |i| self.scores[i])
    }

    /// Snap a predicted score to the nearest bin score.
    pub fn snap(&self, score: f64) -> f64 {
        *self
            .scores
            .iter()
            .min_by(|a, b| (*a - score).abs().total_cmp(&(*b - score).abs()))
            .unwrap()
    }

    /// Second-highest bin score, the default approximate-match bound.
    pub fn default_bound(&self) -> f64 {
        self.scores.get(1).copied().unwrap_or(1.0)
    }
}

struct Search<'a> {
    g1: &'a LabeledGraph,
    g2: &'a LabeledGraph,
    adj1: Vec<Vec<Option<u64>>>,
    adj2: Vec<Vec<Option<u64>>>,
    order: Vec<usize>,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: usize,
    best_map: Vec<Option<usize>>,
    root_lb: usize,
    expanded: u64,
    budget: Option<u64>,
    exhausted: bool,
}

fn multiset_gap(a: &BTreeMap<u64, usize>, b: &BTreeMap<u64, usize>, na: usize, nb: usize) -> usize {
    let common: usize = a.iter().map(|(l, &c)| c.min(*b.get(l).unwrap_or(&0))).sum();
    na.max(nb) - common
}

impl Search<'_> {
    /// Admissible bound on the cost of completing the current partial map
    /// once `k` vertices of `order` are assigned.
    fn lower_bound(&self, k: usize) -> usize {
        let mut assigned = vec![false; self.g1.n_vertices()];
        for &u in &self.order[..k] {
            assigned[u] = true;
        }
        let mut l1 = BTreeMap::new();
        let mut n1 = 0;
        for (u, &l) in self.g1.labels.iter().enumerate() {
            if !assigned[u] {
                *l1.entry(l).or_insert(0) += 1;
                n1 += 1;
            }
        }
        let mut l2 = BTreeMap::new();
        let mut n2 = 0;
        for (v, &l) in self.g2.labels.iter().enumerate() {
            if !self.used[v] {
                *l2.entry(l).or_insert(0) += 1;
                n2 += 1;
            }
        }
        let mut e1 = BTreeMap::new();
        let mut m1 = 0;
        for &(u, v, l) in &self.g1.edges {
            if !assigned[u] || !assigned[v] {
                *e1.entry(l).or_insert(0) += 1;
                m1 += 1;
            }
        }
        let mut e2 = BTreeMap::new();
        let mut m2 = 0;
        for &(u, v, l) in &self.g2.edges {
            if !self.used[u] || !self.used[v] {
                *e2.entry(l).or_insert(0) += 1;
                m2 += 1;
            }
        }
        multiset_gap(&l1, &l2, n1, n2) + multiset_gap(&e1, &e2, m1, m2)
    }

    /// Cost of mapping `order[k]` to `target` given the first `k` assignments.
    fn step_cost(&self, k: usize, target: Option<usize>) -> usize {
        let u = self.order[k];
        let mut c = match target {
            Some(j) => (self.g1.labels[u] != self.g2.labels[j]) as usize,
            None => 1,
        };
        for &w in &self.order[..k] {
            let e1 = self.adj1[u][w];
            match (target, self.map[w]) {
                (Some(j), Some(m)) => {
                    let e2 = self.adj2[j][m];
                    c += match (e1, e2) {
                        (Some(a), Some(b)) => (a != b) as usize,
                        (None, None) => 0,
                        _ => 1,
                    };
                }
                _ => c += e1.is_some() as usize,
            }
        }
        c
    }

    /// Cost of inserting everything in `g2` left unmatched at a leaf.
    fn completion_cost(&self) -> usize {
        let verts = self.used.iter().filter(|u| !**u).count();
        let edges = self.g2.edges.iter().filter(|&&(u, v, _)| !self.used[u] || !self.used[v]).count();
        verts + edges
    }

    fn dfs(&mut self, k: usize, g: usize) {
        if self.best == self.root_lb || self.exhausted {
            return;
        }
        if let Some(b) = self.budget {
            if self.expanded >= b {
                self.exhausted = true;
                return;
            }
        }
        self.expanded += 1;
        if k == self.order.len() {
            let total = g + self.completion_cost();
            if total < self.best {
                self.best = total;
                self.best_map = self.map.clone();
            }
            return;
        }
        let u = self.order[k];
        let mut children: Vec<(usize, usize, Option<usize>)> = Vec::new();
        let targets: Vec<Option<usize>> =
            (0..self.g2.n_vertices()).filter(|&j| !self.used[j]).map(Some).chain([None]).collect();
        for t in targets {
            let step = self.step_cost(k, t);
            self.map[u] = t;
            if let Some(j) = t {
                self.used[j] = true;
            }
            let h = self.lower_bound(k + 1);
            if let Some(j) = t {
                self.used[j] = false;
            }
            self.map[u] = None;
            let f = g + step + h;
            if f < self.best {
                children.push((f, step, t));
            }
        }
        children.sort_by_key(|&(f, _, t)| (f, t.is_none(), t));
        for (f, step, t) in children {
            if f >= self.best {
                continue;
            }
            self.map[u] = t;
            if let Some(j) = t {
                self.used[j] = true;
            }
            self.dfs(k + 1, g + step);
            if let Some(j) = t {
                self.used[j] = false;
            }
            self.map[u] = None;
            if self.best == self.root_lb || self.exhausted {
                return;
            }
        }
    }
}

/// Vertices in BFS order from the highest-degree vertex of each component.
fn search_order(g: &LabeledGraph) -> Vec<usize> {
    let n = g.n_vertices();
    let deg = g.degree();
    let adj = g.label_matrix();
    let mut seen = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let start = (0..n).filter(|&v| !seen[v]).max_by_key(|&v| (deg[v], std::cmp::Reverse(v))).unwrap();
        seen[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = (0..n).filter(|&w| !seen[w] && adj[v][w].is_some()).collect();
            next.sort_by_key(|&w| (std::cmp::Reverse(deg[w]), w));
            for w in next {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    order
}

/// Edit operations realising vertex map `map` from `g1` to `g2`.
pub fn edit_path(g1: &LabeledGraph, g2: &LabeledGraph, map: &[Option<usize>]) -> Vec<EditOp> {
    let mut ops = Vec::new();
    let mut used = vec![false; g2.n_vertices()];
    for (u, t) in map.iter().enumerate() {
        match *t {
            Some(j) => {
                used[j] = true;
                if g1.labels[u] != g2.labels[j] {
                    ops.push(EditOp::VertexRelabel { v1: u, v2: j, from: g1.labels[u], to: g2.labels[j] });
                }
            }
            None => ops.push(EditOp::VertexDel { v1: u, label: g1.labels[u] }),
        }
    }
    for (j, &l) in g2.labels.iter().enumerate() {
        if !used[j] {
            ops.push(EditOp::VertexIns { v2: j, label: l });
        }
    }
    let mut covered = std::collections::BTreeSet::new();
    for &(u, v, l) in &g1.edges {
        match (map[u], map[v]) {
            (Some(a), Some(b)) => match g2.edge(a, b) {
                Some(l2) => {
                    covered.insert((a.min(b), a.max(b)));
                    if l2 != l {
                        ops.push(EditOp::EdgeRelabel { u1: u, v1: v, from: l, to: l2 });
                    }
                }
                None => ops.push(EditOp::EdgeDel { u1: u, v1: v, label: l }),
            },
            _ => ops.push(EditOp::EdgeDel { u1: u, v1: v, label: l }),
        }
    }
    for &(u, v, l) in &g2.edges {
        if !covered.contains(&(u, v)) {
            ops.push(EditOp::EdgeIns { u2: u, v2: v, label: l });
        }
    }
    ops
}

/// Optimal unit-cost GED. With a budget the search may stop early and report
/// the best path found with `exact = false`.
pub fn ged_exact(g1: &LabeledGraph, g2: &LabeledGraph, opts: GedOptions) -> Result<GedResult> {
    let (n1, n2) = (g1.n_vertices(), g2.n_vertices());
    if opts.budget.is_none() && n1 + n2 > opts.size_limit {
        return Err(Error::GedSizeLimit { n1, n2, limit: opts.size_limit });
    }
    let mut s = Search {
        g1,
        g2,
        adj1: g1.label_matrix(),
        adj2: g2.label_matrix(),
        order: search_order(g1),
        map: vec![None; n1],
        used: vec![false; n2],
        best: usize::MAX,
        best_map: vec![None; n1],
        root_lb: 0,
        expanded: 0,
        budget: opts.budget,
        exhausted: false,
    };
    s.root_lb = s.lower_bound(0);
    // Deleting everything then inserting everything is always feasible.
    s.best = n1 + g1.n_edges() + n2 + g2.n_edges();
    // The index-aligned map is a cheap incumbent; for identical graphs it
    // meets the root bound and the search ends at once.
    let aligned: Vec<Option<usize>> = (0..n1).map(|u| (u < n2).then_some(u)).collect();
    let aligned_cost = edit_path(g1, g2, &aligned).len();
    if aligned_cost < s.best {
        s.best = aligned_cost;
        s.best_map = aligned;
    }
    s.dfs(0, 0);
    let path = edit_path(g1, g2, &s.best_map);
    debug_assert_eq!(path.len(), s.best);
    let dist = if n1 + n2 == 0 { 0.0 } else { normalized_dist(s.best, g1, g2)? };
    Ok(GedResult {
        ged: s.best,
        dist,
        exact: !s.exhausted,
        mapping: s.best_map,
        edit_path: path,
        expanded: s.expanded,
    })
}
