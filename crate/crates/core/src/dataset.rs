//! Synthetic training corpora: perturbed copies of base graphs labelled with
//! exact GED, binned similarity and a recorded train/test split.

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit_graph::{build_graph, CircuitGraph, PromotedPorts};
use crate::error::Result;
use crate::ged_exact::{ged_exact, GedOptions, SimilarityBins};
use crate::labeled::{code, stable_hash, LabeledGraph};
use crate::netlist::{identify_supply_nets, parse_netlist};
use crate::primitive::{collapse, match_primitives, Library};

pub const CORPUS_VERSION: u32 = 1;
/// Default cap on edits per pair.
pub const MAX_EDITS: usize = 6;
const ELEMENT_KINDS: [u64; 5] = [code::NMOS, code::PMOS, code::RES, code::CAP, code::IND];

fn is_net(label: u64) -> bool {
    label == code::NET || label == code::SUPPLY_NET
}

fn is_mos(label: u64) -> bool {
    label == code::NMOS || label == code::PMOS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Edit {
    EdgeMove { element: usize, from: usize, to: usize },
    Relabel { vertex: usize, from: u64, to: u64 },
    AddElement { vertex: usize, label: u64, nets: Vec<usize> },
    RemoveElement { vertex: usize },
    SwapTerminals { element: usize, a: usize, b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// Edge moves, relabels, element insertion and removal.
    #[default]
    Structural,
    /// Only swaps of terminal labels on one transistor.
    TerminalSwap,
}

fn try_edit(g: &mut LabeledGraph, kind: PerturbKind, rng: &mut ChaCha8Rng) -> Option<Edit> {
    let elements: Vec<usize> = (0..g.n_vertices()).filter(|&v| !is_net(g.labels[v])).collect();
    let nets: Vec<usize> = (0..g.n_vertices()).filter(|&v| is_net(g.labels[v])).collect();
    if elements.is_empty() || nets.is_empty() {
        return None;
    }
    let op = match kind {
        PerturbKind::TerminalSwap => 4,
        PerturbKind::Structural => rng.gen_range(0..4),
    };
    match op {
        0 => {
            let &(u, v, l) = g.edges.choose(rng)?;
            let (e, n) = if is_net(g.labels[u]) { (v, u) } else { (u, v) };
            let free: Vec<usize> = nets.iter().copied().filter(|&m| m != n && g.edge(e, m).is_none()).collect();
            let to = *free.choose(rng)?;
            g.remove_edge(e, n);
            g.set_edge(e, to, l);
            Some(Edit::EdgeMove { element: e, from: n, to })
        }
        1 => {
            let v = *elements.choose(rng)?;
            let from = g.labels[v];
            // Keep transistors transistors and passives passives so edge
            // labels stay meaningful.
            let pool: Vec<u64> = ELEMENT_KINDS
                .iter()
                .copied()
                .filter(|&k| k != from && is_mos(k) == is_mos(from))
                .collect();
            let to = *pool.choose(rng)?;
            g.labels[v] = to;
            Some(Edit::Relabel { vertex: v, from, to })
        }
        2 => {
            let label = *ELEMENT_KINDS.choose(rng)?;
            let arity = if is_mos(label) { 3 } else { 2 };
            if nets.len() < arity {
                return None;
            }
            let chosen: Vec<usize> = nets.choose_multiple(rng, arity).copied().collect();
            let v = g.n_vertices();
            g.labels.push(label);
            for (i, &n) in chosen.iter().enumerate() {
                let l = if is_mos(label) { [code::EDGE_G, code::EDGE_S, code::EDGE_D][i] } else { code::EDGE_NEUTRAL };
                g.set_edge(v, n, l);
            }
            Some(Edit::AddElement { vertex: v, label, nets: chosen })
        }
        3 => {
            if elements.len() < 3 {
                return None;
            }
            let v = *elements.choose(rng)?;
            g.remove_vertex(v);
            Some(Edit::RemoveElement { vertex: v })
        }
        _ => {
            let mos: Vec<usize> = elements
                .iter()
                .copied()
                .filter(|&e| {
                    let ls: Vec<u64> = g.edges.iter().filter(|x| x.0 == e || x.1 == e).map(|x| x.2).collect();
                    ls.iter().any(|l| ls.iter().any(|m| m != l))
                })
                .collect();
            let e = *mos.choose(rng)?;
            let mut inc: Vec<(usize, u64)> = g
                .edges
                .iter()
                .filter(|x| x.0 == e || x.1 == e)
                .map(|x| (if x.0 == e { x.1 } else { x.0 }, x.2))
                .collect();
            inc.shuffle(rng);
            let (a, la) = inc[0];
            let &(b, lb) = inc.iter().find(|x| x.1 != la)?;
            g.set_edge(e, a, lb);
            g.set_edge(e, b, la);
            Some(Edit::SwapTerminals { element: e, a, b })
        }
    }
}

/// Apply `k` random edits. Returns fewer edits (with a warning) when none is
/// feasible after bounded retries.
pub fn perturb(g: &LabeledGraph, k: usize, kind: PerturbKind, rng: &mut ChaCha8Rng) -> (LabeledGraph, Vec<Edit>) {
    let mut out = g.clone();
    let mut script = Vec::with_capacity(k);
    for _ in 0..k {
        let mut done = false;
        for _ in 0..32 {
            let mut trial = out.clone();
            if let Some(e) = try_edit(&mut trial, kind, rng) {
                out = trial;
                script.push(e);
                done = true;
                break;
            }
        }
        if !done {
            warn!("perturbation stopped after {} of {k} edits", script.len());
            break;
        }
    }
    out.canonicalize_edges();
    (out, script)
}

/// Random circuit-like bipartite graph: transistors on three distinct nets,
/// passives on two.
pub fn random_circuit(rng: &mut ChaCha8Rng, n_elements: usize, n_nets: usize) -> LabeledGraph {
    let n_nets = n_nets.max(3);
    let mut labels: Vec<u64> = (0..n_elements).map(|_| *ELEMENT_KINDS.choose(rng).unwrap()).collect();
    labels.extend((0..n_nets).map(|i| if i == 0 { code::SUPPLY_NET } else { code::NET }));
    let mut g = LabeledGraph::new(labels);
    let nets: Vec<usize> = (n_elements..n_elements + n_nets).collect();
    for e in 0..n_elements {
        let mos = is_mos(g.labels[e]);
        let chosen: Vec<usize> = nets.choose_multiple(rng, if mos { 3 } else { 2 }).copied().collect();
        for (i, &n) in chosen.iter().enumerate() {
            let l = if mos { [code::EDGE_G, code::EDGE_S, code::EDGE_D][i] } else { code::EDGE_NEUTRAL };
            g.set_edge(e, n, l);
        }
    }
    g.canonicalize_edges();
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub version: u32,
    pub id: String,
    pub base: String,
    pub a: LabeledGraph,
    pub b: LabeledGraph,
    pub ged: usize,
    pub dist: f64,
    pub gs: f64,
    pub seed: u64,
    pub script: Vec<Edit>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub pairs_per_base: usize,
    pub max_edits: usize,
    pub kind: PerturbKind,
    pub bins: SimilarityBins,
    /// Node budget per GED label; pairs exceeding it are dropped.
    pub budget: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 0,
            pairs_per_base: 8,
            max_edits: MAX_EDITS,
            kind: PerturbKind::Structural,
            bins: SimilarityBins::default(),
            budget: 200_000,
        }
    }
}

/// Train/test sizes for `n` pairs at a 51:28 ratio.
pub fn split_counts(n: usize) -> (usize, usize) {
    let test = (n as f64 * 28.0 / 79.0).round() as usize;
    (n - test, test)
}

/// Structural graph of every subckt in a netlist, after primitive collapse.
pub fn netlist_graphs(name: &str, text: &str, lib: &Library) -> Result<Vec<(String, LabeledGraph)>> {
    let d = parse_netlist(text)?;
    let supply = identify_supply_nets(&d, &[]);
    let promoted = PromotedPorts::new();
    let mut out = Vec::new();
    for scope in d.bottom_up_from(&d.top) {
        let def = d.subckt(&scope).expect("scope comes from the design");
        let raw: CircuitGraph = build_graph(def, &d, &supply, &promoted).remove_inert_dummies();
        let g = collapse(&raw, &match_primitives(&raw, lib));
        out.push((format!("{name}:{scope}"), g.to_labeled_all(false)));
    }
    Ok(out)
}

/// Fixture circuits small enough for exact labelling within the default
/// budget, plus `n_random` random circuits.
pub fn default_bases(seed: u64, n_random: usize) -> Vec<(String, LabeledGraph)> {
    let lib = Library::builtin();
    let mut out = Vec::new();
    for (name, text) in [
        ("cs_lna", include_str!("../fixtures/cs_lna.sp")),
        ("cg_lna", include_str!("../fixtures/cg_lna.sp")),
    ] {
        out.extend(netlist_graphs(name, text, &lib).expect("bundled fixture parses"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_random {
        let ne = rng.gen_range(3..=6);
        let nn = rng.gen_range(3..=5);
        out.push((format!("random{i}"), random_circuit(&mut rng, ne, nn)));
    }
    out
}

/// Deterministic corpus: a pure function of the bases and the spec.
pub fn build_corpus(bases: &[(String, LabeledGraph)], spec: &CorpusSpec) -> Vec<PairRecord> {
    let jobs: Vec<(usize, usize)> =
        (0..bases.len()).flat_map(|b| (0..spec.pairs_per_base).map(move |i| (b, i))).collect();
    let mut records: Vec<PairRecord> = jobs
        .par_iter()
        .filter_map(|&(b, i)| {
            let (name, g) = &bases[b];
            let id = format!("{name}#{i}");
            let seed = spec.seed ^ stable_hash(id.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(0..=spec.max_edits);
            let (p, script) = perturb(g, k, spec.kind, &mut rng);
            let opts = GedOptions { budget: Some(spec.budget), ..Default::default() };
            match ged_exact(g, &p, opts) {
                Ok(r) if r.exact => Some(PairRecord {
                    version: CORPUS_VERSION,
                    id,
                    base: name.clone(),
                    a: g.clone(),
                    b: p,
                    ged: r.ged,
                    dist: r.dist,
                    gs: spec.bins.to_similarity(r.dist),
                    seed,
                    script,
                    split: Split::Train,
                }),
                Ok(_) => {
                    debug!("{id}: GED budget exceeded; dropped");
                    None
                }
                Err(e) => {
                    debug!("{id}: {e}; dropped");
                    None
                }
            }
        })
        .collect();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let (_, n_test) = split_counts(records.len());
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    for &i in &idx[..n_test] {
        records[i].split = Split::Test;
    }
    records
}

pub fn to_jsonl(records: &[PairRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

pub fn from_jsonl(text: &str) -> Result<Vec<PairRecord>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: PairRecord = serde_json::from_str(line)?;
        if r.version != CORPUS_VERSION {
            return Err(crate::error::Error::Model(format!("corpus record version {} unsupported", r.version)));
        }
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_80_is_52_28() {
        assert_eq!(split_counts(80), (52, 28));
        assert_eq!(split_counts(79), (51, 28));
        assert_eq!(split_counts(0), (0, 0));
    }

    #[test]
    fn zero_edits_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_circuit(&mut rng, 4, 4);
        let (p, script) = perturb(&g, 0, PerturbKind::Structural, &mut rng);
        assert!(script.is_empty());
        assert_eq!(ged_exact(&g, &p, GedOptions::default()).unwrap().ged, 0);
    }

    #[test]
    fn empty_bases_empty_corpus() {
        assert!(build_corpus(&[], &CorpusSpec::default()).is_empty());
    }

    #[test]
    fn corpus_is_reproducible() {
        let bases = default_bases(3, 3);
        let spec = CorpusSpec { seed: 5, pairs_per_base: 2, ..Default::default() };
        let a = to_jsonl(&build_corpus(&bases, &spec));
        let b = to_jsonl(&build_corpus(&bases, &spec));
        assert_eq!(a, b);
        assert_eq!(to_jsonl(&from_jsonl(&a).unwrap()), a);
    }
}
