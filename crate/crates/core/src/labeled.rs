//! Plain vertex/edge-labeled undirected graphs, the common input of the exact
//! GED solver and the learned similarity model.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Structural vertex codes. Every structural label is below [`N_CATEGORIES`].
pub mod code {
    pub const NET: u64 = 0;
    pub const SUPPLY_NET: u64 = 1;
    pub const NMOS: u64 = 2;
    pub const PMOS: u64 = 3;
    pub const RES: u64 = 4;
    pub const CAP: u64 = 5;
    pub const IND: u64 = 6;
    /// First code used for named composite kinds (instances, supernodes).
    pub const NAMED_BASE: u64 = 8;

    /// Edge codes 1..=7 are gate/source/drain bit masks.
    pub const EDGE_G: u64 = 1;
    pub const EDGE_S: u64 = 2;
    pub const EDGE_D: u64 = 4;
    pub const EDGE_NEUTRAL: u64 = 8;
    pub const EDGE_PORT_BASE: u64 = 16;
}

pub const N_CATEGORIES: usize = 128;

/// Map a composite kind name (primitive or subckt) into the structural code space.
pub fn named_code(name: &str) -> u64 {
    code::NAMED_BASE + stable_hash(name.as_bytes()) % (N_CATEGORIES as u64 - code::NAMED_BASE)
}

pub fn port_edge_code(role: &str) -> u64 {
    code::EDGE_PORT_BASE + stable_hash(role.as_bytes()) % 1024
}

pub fn stable_hash(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledGraph {
    pub labels: Vec<u64>,
    /// Undirected edges `(u, v, label)` with `u < v`, at most one per pair.
    pub edges: Vec<(usize, usize, u64)>,
}

impl LabeledGraph {
    pub fn new(labels: Vec<u64>) -> Self {
        LabeledGraph { labels, edges: Vec::new() }
    }

    pub fn n_vertices(&self) -> usize {
        self.labels.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Insert or replace the edge between `u` and `v`.
    pub fn set_edge(&mut self, u: usize, v: usize, label: u64) {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        assert!(a != b, "self loops are not representable");
        match self.edges.iter_mut().find(|e| e.0 == a && e.1 == b) {
            Some(e) => e.2 = label,
            None => self.edges.push((a, b, label)),
        }
    }

    pub fn remove_edge(&mut self, u: usize, v: usize) -> Option<u64> {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        let pos = self.edges.iter().position(|e| e.0 == a && e.1 == b)?;
        Some(self.edges.remove(pos).2)
    }

    pub fn edge(&self, u: usize, v: usize) -> Option<u64> {
        let (a, b) = if u < v { (u, v) } else { (v, u) };
        self.edges.iter().find(|e| e.0 == a && e.1 == b).map(|e| e.2)
    }

    /// Remove vertex `v` with its edges; later indices shift down by one.
    pub fn remove_vertex(&mut self, v: usize) {
        self.labels.remove(v);
        self.edges.retain(|e| e.0 != v && e.1 != v);
        for e in &mut self.edges {
            if e.0 > v {
                e.0 -= 1;
            }
            if e.1 > v {
                e.1 -= 1;
            }
        }
    }

    /// Dense adjacency matrix of edge labels (`None` = no edge).
    pub fn label_matrix(&self) -> Vec<Vec<Option<u64>>> {
        let n = self.n_vertices();
        let mut m = vec![vec![None; n]; n];
        for &(u, v, l) in &self.edges {
            m[u][v] = Some(l);
            m[v][u] = Some(l);
        }
        m
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_vertices()];
        for &(u, v, _) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    /// Relabel vertex positions: vertex `i` moves to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> LabeledGraph {
        let mut labels = vec![0; self.labels.len()];
        for (i, &l) in self.labels.iter().enumerate() {
            labels[perm[i]] = l;
        }
        let mut g = LabeledGraph::new(labels);
        for &(u, v, l) in &self.edges {
            g.set_edge(perm[u], perm[v], l);
        }
        g.canonicalize_edges();
        g
    }

    pub fn canonicalize_edges(&mut self) {
        self.edges.sort_unstable();
    }

    /// Content hash of this exact vertex ordering.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.labels.len() as u64).to_le_bytes());
        for l in &self.labels {
            h.update(l.to_le_bytes());
        }
        let mut e = self.edges.clone();
        e.sort_unstable();
        for (u, v, l) in e {
            h.update((u as u64).to_le_bytes());
            h.update((v as u64).to_le_bytes());
            h.update(l.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }

    /// Element (non-net) vertices must only touch net vertices.
    pub fn is_bipartite_by_label(&self) -> bool {
        let is_net = |l: u64| l == code::NET || l == code::SUPPLY_NET;
        self.edges.iter().all(|&(u, v, _)| is_net(self.labels[u]) != is_net(self.labels[v]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remove_vertex_shifts_edges() {
        let mut g = LabeledGraph::new(vec![2, 0, 0]);
        g.set_edge(0, 1, 4);
        g.set_edge(0, 2, 1);
        g.remove_vertex(1);
        assert_eq!(g.labels, vec![2, 0]);
        assert_eq!(g.edges, vec![(0, 1, 1)]);
    }

    #[test]
    fn named_codes_stay_in_category_space() {
        for n in ["DP", "SCM", "CMB", "ota", "some_long_name"] {
            let c = named_code(n);
            assert!((code::NAMED_BASE..N_CATEGORIES as u64).contains(&c));
        }
    }
}
