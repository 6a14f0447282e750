//! Hierarchical symmetry detection: recursive pair search from candidate net
//! pairs, pair matching, self-symmetry, array creation, and the bottom-up driver.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use log::{debug, warn};
use rayon::prelude::*;

use crate::circuit_graph::{
    build_graph, params_equal, CircuitGraph, EdgeLabel, Marks, PortPair, PromotedPorts, VertexId,
    VertexKind,
};
use crate::constraints::{Axis, Constraint, ConstraintSet, MatchKind, MemberMatch, Verdict, VerifyEntry, VerifyReport};
use crate::error::{Error, Result};
use crate::ged_exact::{ged_exact, GedOptions, SimilarityBins};
use crate::netlist::{identify_supply_nets, Design};
use crate::primitive::{collapse, match_primitives, seed_candidates, InternalConstraint, Library, Seed, Supernode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApproxMode {
    Off,
    #[default]
    Exact,
    Gnn,
}

/// Learned similarity between two element sets, each taken from its own graph.
pub trait BlockScorer: Sync {
    fn similarity(&self, ga: &CircuitGraph, a: &[VertexId], gb: &CircuitGraph, b: &[VertexId]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct DetectOptions {
    pub approx: ApproxMode,
    /// Minimum similarity for an approximate match; defaults to the second-highest bin.
    pub bound: Option<f64>,
    pub bins: SimilarityBins,
    pub supply_overrides: Vec<String>,
    /// Node budget for exact GED inside matching.
    pub ged_budget: u64,
    /// Approximate matching applies only to blocks with at least this many devices.
    pub min_approx_devices: usize,
    pub emit_nets: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        DetectOptions {
            approx: ApproxMode::Exact,
            bound: None,
            bins: SimilarityBins::default(),
            supply_overrides: Vec::new(),
            ged_budget: 50_000,
            min_approx_devices: 4,
            emit_nets: false,
        }
    }
}

impl DetectOptions {
    pub fn bound(&self) -> f64 {
        self.bound.unwrap_or_else(|| self.bins.default_bound())
    }
}

/// One side of a symmetric pair: a whole element, or a block seen through one net.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Endpoint {
    Elem(VertexId),
    Port(VertexId, VertexId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFound {
    pub root: Vec<VertexId>,
    pub members: Vec<Vec<VertexId>>,
    pub matches: Vec<(usize, usize, MatchKind)>,
    pub dummy: bool,
}

/// Findings of one exploration, before names and axis ids are assigned.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Found {
    pub pairs: Vec<(Endpoint, Endpoint, MatchKind)>,
    pub selfs: Vec<Endpoint>,
    pub arrays: Vec<ArrayFound>,
    pub array_pairs: Vec<(usize, usize)>,
    pub array_selfs: Vec<usize>,
    pub net_pairs: Vec<(VertexId, VertexId)>,
}

impl Found {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty() && self.selfs.is_empty() && self.arrays.is_empty()
    }

    /// Matched depth: elements covered by the findings.
    pub fn size(&self) -> usize {
        2 * self.pairs.len()
            + self.selfs.len()
            + self.arrays.iter().map(|a| a.members.iter().map(Vec::len).sum::<usize>()).sum::<usize>()
    }

    /// Elements named by any finding.
    pub fn elements(&self) -> BTreeSet<VertexId> {
        let v = |e: &Endpoint| match e {
            Endpoint::Elem(x) | Endpoint::Port(x, _) => *x,
        };
        let mut out: BTreeSet<VertexId> = self.pairs.iter().flat_map(|(a, b, _)| [v(a), v(b)]).collect();
        out.extend(self.selfs.iter().map(v));
        out.extend(self.arrays.iter().flat_map(|a| a.members.iter().flatten().copied()));
        out
    }

    fn merge(&mut self, o: Found) {
        let base = self.arrays.len();
        self.pairs.extend(o.pairs);
        self.selfs.extend(o.selfs);
        self.arrays.extend(o.arrays);
        self.array_pairs.extend(o.array_pairs.into_iter().map(|(a, b)| (a + base, b + base)));
        self.array_selfs.extend(o.array_selfs.into_iter().map(|a| a + base));
        self.net_pairs.extend(o.net_pairs);
    }
}

/// Matching and traversal over one collapsed scope graph.
pub struct Engine<'a> {
    pub g: &'a CircuitGraph,
    /// Collapsed graphs of already analysed subcircuits.
    pub children: &'a BTreeMap<String, CircuitGraph>,
    pub opts: &'a DetectOptions,
    pub scorer: Option<&'a dyn BlockScorer>,
    member_cache: Mutex<HashMap<(Vec<VertexId>, Vec<VertexId>), Option<MatchKind>>>,
    model_cache: Mutex<HashMap<(String, String), Option<MatchKind>>>,
}

fn union_find(n: usize, links: &[(usize, usize)]) -> Vec<usize> {
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut p: Vec<usize> = (0..n).collect();
    for &(a, b) in links {
        let (ra, rb) = (root(&mut p, a), root(&mut p, b));
        if ra != rb {
            p[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| root(&mut p, x)).collect()
}

impl<'a> Engine<'a> {
    pub fn new(
        g: &'a CircuitGraph,
        children: &'a BTreeMap<String, CircuitGraph>,
        opts: &'a DetectOptions,
        scorer: Option<&'a dyn BlockScorer>,
    ) -> Self {
        Engine {
            g,
            children,
            opts,
            scorer,
            member_cache: Mutex::new(HashMap::new()),
            model_cache: Mutex::new(HashMap::new()),
        }
    }

    fn device_count(&self, elems: &[VertexId]) -> usize {
        elems.iter().map(|e| self.g.vertex(*e).device_count).sum()
    }

    fn approx_score(
        &self,
        ga: &CircuitGraph,
        a: &[VertexId],
        gb: &CircuitGraph,
        b: &[VertexId],
    ) -> Option<MatchKind> {
        let score = match self.opts.approx {
            ApproxMode::Off => return None,
            ApproxMode::Exact => {
                let (la, _) = ga.to_labeled(a, true);
                let (lb, _) = gb.to_labeled(b, true);
                let r = ged_exact(&la, &lb, GedOptions { budget: Some(self.opts.ged_budget), ..Default::default() })
                    .ok()?;
                self.opts.bins.to_similarity(r.dist)
            }
            ApproxMode::Gnn => {
                let s = self.scorer?;
                match s.similarity(ga, a, gb, b) {
                    Ok(v) => self.opts.bins.snap(v),
                    Err(e) => {
                        warn!("similarity model failed: {e}");
                        return None;
                    }
                }
            }
        };
        (score >= self.opts.bound()).then_some(MatchKind::Approx { score })
    }

    /// Whether two element sets of this graph are the same structure (exactly,
    /// or approximately when both are large enough).
    pub fn member_match(&self, a: &[VertexId], b: &[VertexId]) -> Option<MatchKind> {
        let mut ka = a.to_vec();
        ka.sort();
        let mut kb = b.to_vec();
        kb.sort();
        let key = if ka <= kb { (ka, kb) } else { (kb, ka) };
        if let Some(hit) = self.member_cache.lock().unwrap().get(&key) {
            return *hit;
        }
        let (la, _) = self.g.to_labeled(a, true);
        let (lb, _) = self.g.to_labeled(b, true);
        let exact = la.content_hash() == lb.content_hash()
            || ged_exact(&la, &lb, GedOptions { budget: Some(self.opts.ged_budget), ..Default::default() })
                .map(|r| r.ged == 0)
                .unwrap_or(false);
        let out = if exact {
            Some(MatchKind::Exact)
        } else if self.device_count(a) >= self.opts.min_approx_devices
            && self.device_count(b) >= self.opts.min_approx_devices
        {
            self.approx_score(self.g, a, self.g, b)
        } else {
            None
        };
        self.member_cache.lock().unwrap().insert(key, out);
        out
    }

    fn instance_approx(&self, ma: &str, mb: &str) -> Option<MatchKind> {
        let key = if ma <= mb { (ma.to_string(), mb.to_string()) } else { (mb.to_string(), ma.to_string()) };
        if let Some(hit) = self.model_cache.lock().unwrap().get(&key) {
            return *hit;
        }
        let out = match (self.children.get(ma), self.children.get(mb)) {
            (Some(ga), Some(gb)) => {
                let ea: Vec<VertexId> = ga.elements().collect();
                let eb: Vec<VertexId> = gb.elements().collect();
                self.approx_score(ga, &ea, gb, &eb)
            }
            _ => None,
        };
        self.model_cache.lock().unwrap().insert(key, out);
        out
    }

    /// Compare two element vertices reached from nets `s1` and `s2`.
    pub fn match_pair(&self, a: VertexId, b: VertexId, s1: VertexId, s2: VertexId) -> Option<MatchKind> {
        let (va, vb) = (self.g.vertex(a), self.g.vertex(b));
        match (&va.block, &vb.block) {
            (None, None) => {
                if va.kind != vb.kind || !params_equal(&va.params, &vb.params) {
                    return None;
                }
                if va.kind.is_passive() {
                    return Some(MatchKind::Exact);
                }
                if a == b {
                    return None;
                }
                let (la, lb) = (self.g.edge_label(a, s1)?, self.g.edge_label(b, s2)?);
                (la == lb).then_some(MatchKind::Exact)
            }
            (Some(ba), Some(bb)) => {
                let pa: Vec<&str> = ba.ports_on(s1).map(|p| p.name.as_str()).collect();
                let pb: Vec<&str> = bb.ports_on(s2).map(|p| p.name.as_str()).collect();
                if a == b {
                    let sym = ba.self_symmetric
                        && pa.iter().any(|x| pb.iter().any(|y| x != y && ba.symmetric(x, y)));
                    return sym.then_some(MatchKind::Exact);
                }
                let role_a: BTreeSet<&str> = ba.ports_on(s1).map(|p| p.role.as_str()).collect();
                let same_role = bb.ports_on(s2).any(|p| role_a.contains(p.role.as_str()));
                if va.kind != vb.kind {
                    return None;
                }
                if ba.model == bb.model && ba.signature == bb.signature && same_role {
                    return Some(MatchKind::Exact);
                }
                if ba.family == bb.family && ba.family_signature == bb.family_signature && same_role {
                    return Some(MatchKind::Exact);
                }
                let same_port = pa.iter().any(|x| pb.contains(x));
                if va.kind == VertexKind::Instance
                    && same_port
                    && va.device_count >= self.opts.min_approx_devices
                    && vb.device_count >= self.opts.min_approx_devices
                {
                    return self.instance_approx(&ba.model, &bb.model);
                }
                None
            }
            _ => None,
        }
    }

    /// Net pairs to explore after matching `p1` (seen from `s1`) with `p2` (from `s2`).
    fn next_net_pairs(&self, p1: VertexId, p2: VertexId, s1: VertexId, s2: VertexId) -> Vec<(VertexId, VertexId)> {
        let g = self.g;
        let (v1, v2) = (g.vertex(p1), g.vertex(p2));
        let mut raw = Vec::new();
        match (&v1.block, &v2.block) {
            (None, None) => {
                if p1 == p2 {
                } else if v1.kind.is_passive() {
                    let other = |p: VertexId, s: VertexId| g.edges_of(p).iter().map(|(n, _)| *n).find(|n| *n != s);
                    if let (Some(a), Some(b)) = (other(p1, s1), other(p2, s2)) {
                        raw.push((a, b));
                    }
                } else {
                    for (n, l) in g.edges_of(p1) {
                        for (m, l2) in g.edges_of(p2) {
                            if l == l2 {
                                raw.push((*n, *m));
                            }
                        }
                    }
                }
            }
            (Some(b1), Some(b2)) => {
                if p1 == p2 {
                    for p in &b1.ports {
                        if let Some(q) = b1.port(&b1.mirror(&p.name)) {
                            raw.push((p.net, q.net));
                        }
                    }
                } else if b1.model == b2.model {
                    let pa: Vec<&str> = b1.ports_on(s1).map(|p| p.name.as_str()).collect();
                    let pb: Vec<&str> = b2.ports_on(s2).map(|p| p.name.as_str()).collect();
                    let mirrored = !pa.iter().any(|x| pb.contains(x))
                        && pa.iter().any(|x| pb.iter().any(|y| b1.symmetric(x, y)));
                    for p in &b1.ports {
                        let name = if mirrored { b1.mirror(&p.name) } else { p.name.clone() };
                        if let Some(q) = b2.port(&name) {
                            raw.push((p.net, q.net));
                        }
                    }
                } else if b1.family == b2.family {
                    for p in &b1.ports {
                        for q in b2.ports.iter().filter(|q| q.role == p.role) {
                            raw.push((p.net, q.net));
                        }
                    }
                } else {
                    for p in &b1.ports {
                        if let Some(q) = b2.port(&p.name) {
                            raw.push((p.net, q.net));
                        }
                    }
                }
            }
            _ => {}
        }
        let mut out: Vec<(VertexId, VertexId)> = Vec::new();
        for (a, b) in raw {
            if g.vertex(a).is_supply || g.vertex(b).is_supply {
                continue;
            }
            if (a == s1 && b == s2) || (a == s2 && b == s1) {
                continue;
            }
            if !out.iter().any(|&(x, y)| (x == a && y == b) || (x == b && y == a)) {
                out.push((a, b));
            }
        }
        out
    }
}

/// One traversal from a seed, with the blocks that proposed it.
pub struct Explorer<'e, 'a> {
    pub eng: &'e Engine<'a>,
    pub origin: Vec<VertexId>,
}

impl Explorer<'_, '_> {
    fn endpoints(&self, p1: VertexId, p2: VertexId, s1: VertexId, s2: VertexId) -> (Endpoint, Endpoint) {
        let g = self.eng.g;
        if g.vertex(p1).block.is_some() {
            (Endpoint::Port(p1, s1), Endpoint::Port(p2, s2))
        } else {
            (Endpoint::Elem(p1), Endpoint::Elem(p2))
        }
    }

    /// Recursive search from the net pair (`s1`, `s2`). `None` means the
    /// branch found no match and is discarded.
    pub fn find(&self, s1: VertexId, s2: VertexId, marks: &mut Marks) -> Option<Found> {
        let g = self.eng.g;
        marks.mark(s1);
        marks.mark(s2);
        let n1: Vec<VertexId> = g.neighbors(s1, marks).into_iter().map(|(v, _)| v).collect();
        let n2: Vec<VertexId> = g.neighbors(s2, marks).into_iter().map(|(v, _)| v).collect();
        if n1.is_empty() && n2.is_empty() {
            return Some(Found::default());
        }
        let mut edges: Vec<(VertexId, VertexId, MatchKind)> = Vec::new();
        if s1 == s2 {
            for (i, &a) in n1.iter().enumerate() {
                for &b in &n1[i + 1..] {
                    if let Some(k) = self.eng.match_pair(a, b, s1, s2) {
                        edges.push((a, b, k));
                    }
                }
            }
        } else {
            for &a in &n1 {
                for &b in &n2 {
                    if let Some(k) = self.eng.match_pair(a, b, s1, s2) {
                        edges.push((a, b, k));
                    }
                }
            }
        }
        if edges.is_empty() {
            return None;
        }
        for &(a, b, _) in &edges {
            marks.mark(a);
            marks.mark(b);
        }
        let mut found = Found::default();
        if s1 != s2 {
            found.net_pairs.push((s1, s2));
        }
        // Connected components of the match graph, in order of first edge.
        let verts: Vec<VertexId> = {
            let mut v: Vec<VertexId> = edges.iter().flat_map(|e| [e.0, e.1]).collect();
            v.sort();
            v.dedup();
            v
        };
        let idx = |v: VertexId| verts.binary_search(&v).unwrap();
        let links: Vec<(usize, usize)> = edges.iter().map(|e| (idx(e.0), idx(e.1))).collect();
        let comp = union_find(verts.len(), &links);
        let mut order: Vec<usize> = Vec::new();
        for e in &edges {
            let c = comp[idx(e.0)];
            if !order.contains(&c) {
                order.push(c);
            }
        }
        for c in order {
            let ce: Vec<(VertexId, VertexId, MatchKind)> =
                edges.iter().filter(|e| comp[idx(e.0)] == c).copied().collect();
            let left: BTreeSet<VertexId> = ce.iter().map(|e| e.0).collect();
            let right: BTreeSet<VertexId> = ce.iter().map(|e| e.1).collect();
            if ce.len() == 1 {
                let (a, b, k) = ce[0];
                found.merge(self.process_pair(a, b, s1, s2, k, marks));
            } else if left.len() == 1 || right.len() == 1 {
                // One element matching several: branch and keep the deepest.
                let mut best: Option<(Found, Marks)> = None;
                for &(a, b, k) in &ce {
                    let mut m = marks.clone();
                    let f = self.process_pair(a, b, s1, s2, k, &mut m);
                    if best.as_ref().is_none_or(|(bf, _)| f.size() > bf.size()) {
                        best = Some((f, m));
                    }
                }
                let (f, m) = best.unwrap();
                *marks = m;
                found.merge(f);
            } else {
                found.merge(self.array_case(&left, &right, s1, s2, marks));
            }
        }
        Some(found)
    }

    fn process_pair(&self, p1: VertexId, p2: VertexId, s1: VertexId, s2: VertexId, k: MatchKind, marks: &mut Marks) -> Found {
        let mut found = Found::default();
        marks.mark(p1);
        marks.mark(p2);
        if p1 == p2 {
            found.selfs.push(Endpoint::Elem(p1));
        } else {
            let (a, b) = self.endpoints(p1, p2, s1, s2);
            found.pairs.push((a, b, k));
        }
        let next: Vec<(VertexId, VertexId)> = self
            .eng
            .next_net_pairs(p1, p2, s1, s2)
            .into_iter()
            .filter(|(a, b)| !marks.is_marked(*a) && !marks.is_marked(*b))
            .collect();
        if next.is_empty() {
            return found;
        }
        let verts: Vec<VertexId> = {
            let mut v: Vec<VertexId> = next.iter().flat_map(|e| [e.0, e.1]).collect();
            v.sort();
            v.dedup();
            v
        };
        let idx = |v: VertexId| verts.binary_search(&v).unwrap();
        let links: Vec<(usize, usize)> = next.iter().map(|e| (idx(e.0), idx(e.1))).collect();
        let comp = union_find(verts.len(), &links);
        let mut order: Vec<usize> = Vec::new();
        for e in &next {
            let c = comp[idx(e.0)];
            if !order.contains(&c) {
                order.push(c);
            }
        }
        for c in order {
            let alts: Vec<(VertexId, VertexId)> = next.iter().filter(|e| comp[idx(e.0)] == c).copied().collect();
            if alts.len() == 1 {
                let (a, b) = alts[0];
                if marks.is_marked(a) || marks.is_marked(b) {
                    continue;
                }
                let mut m = marks.clone();
                if let Some(f) = self.find(a, b, &mut m) {
                    *marks = m;
                    found.merge(f);
                }
                continue;
            }
            let mut best: Option<(Found, Marks)> = None;
            for &(a, b) in &alts {
                if marks.is_marked(a) || marks.is_marked(b) {
                    continue;
                }
                let mut m = marks.clone();
                if let Some(f) = self.find(a, b, &mut m) {
                    if best.as_ref().is_none_or(|(bf, _)| f.size() > bf.size()) {
                        best = Some((f, m));
                    }
                }
            }
            if let Some((f, m)) = best {
                *marks = m;
                found.merge(f);
            }
        }
        found
    }

    fn origin_matches(&self, members: &BTreeSet<VertexId>, roots: &[VertexId], s1: VertexId, s2: VertexId) -> Vec<VertexId> {
        let g = self.eng.g;
        self.origin
            .iter()
            .copied()
            .filter(|o| !members.contains(o))
            .filter(|o| roots.iter().any(|r| g.edge_label(*o, *r).is_some()))
            .filter(|o| {
                members.iter().any(|m| {
                    self.eng.match_pair(*o, *m, s1, s2).is_some() || self.eng.match_pair(*m, *o, s1, s2).is_some()
                })
            })
            .collect()
    }

    fn array_case(
        &self,
        left: &BTreeSet<VertexId>,
        right: &BTreeSet<VertexId>,
        s1: VertexId,
        s2: VertexId,
        marks: &mut Marks,
    ) -> Found {
        let mut found = Found::default();
        if left.intersection(right).next().is_some() {
            let mut seeds: BTreeSet<VertexId> = left.union(right).copied().collect();
            let roots = if s1 == s2 { vec![s1] } else { vec![s1, s2] };
            seeds.extend(self.origin_matches(&seeds, &roots, s1, s2));
            if let Some(a) = self.create_array(&roots, &seeds, marks) {
                found.arrays.push(a);
                found.array_selfs.push(0);
            }
            return found;
        }
        let mut ls = left.clone();
        ls.extend(self.origin_matches(left, &[s1], s1, s2));
        let mut rs = right.clone();
        rs.extend(self.origin_matches(right, &[s2], s1, s2));
        let a = self.create_array(&[s1], &ls, marks);
        let b = self.create_array(&[s2], &rs, marks);
        match (a, b) {
            (Some(a), Some(b)) => {
                let paired = a.members.len() == b.members.len()
                    && self.eng.member_match(&a.members[0], &b.members[0]).is_some();
                found.arrays.push(a);
                found.arrays.push(b);
                if paired {
                    found.array_pairs.push((0, 1));
                }
            }
            (Some(a), None) | (None, Some(a)) => found.arrays.push(a),
            (None, None) => {}
        }
        found
    }

    /// Grow one repeated structure from each seed element and group the
    /// mutually matching ones.
    pub fn create_array(&self, roots: &[VertexId], seeds: &BTreeSet<VertexId>, marks: &mut Marks) -> Option<ArrayFound> {
        let g = self.eng.g;
        let mut owners: Vec<VertexId> = seeds.iter().copied().collect();
        owners.sort_by(|a, b| g.vertex(*a).sort_key().cmp(&g.vertex(*b).sort_key()));
        let n = owners.len();
        if n < 2 {
            return None;
        }
        let mut seen: BTreeSet<VertexId> = roots.iter().copied().chain(owners.iter().copied()).collect();
        let blocked = |v: VertexId, seen: &BTreeSet<VertexId>| {
            seen.contains(&v) || g.vertex(v).is_supply || marks.is_marked(v)
        };
        let mut members: Vec<Vec<VertexId>> = owners.iter().map(|o| vec![*o]).collect();
        let mut frontier: Vec<Vec<VertexId>> = members.clone();
        while frontier.iter().any(|f| !f.is_empty()) {
            let mut claims: BTreeMap<VertexId, BTreeSet<usize>> = BTreeMap::new();
            for (k, f) in frontier.iter().enumerate() {
                for &v in f {
                    for (w, _) in g.edges_of(v) {
                        if !blocked(*w, &seen) {
                            claims.entry(*w).or_default().insert(k);
                        }
                    }
                }
            }
            let mut next = vec![Vec::new(); n];
            for (w, ks) in claims {
                seen.insert(w);
                if g.vertex(w).is_net() {
                    if ks.len() == 1 {
                        next[*ks.iter().next().unwrap()].push(w);
                    }
                } else {
                    let k = *ks.iter().next().unwrap();
                    members[k].push(w);
                    next[k].push(w);
                }
            }
            frontier = next;
        }
        for m in &mut members {
            m.sort_by(|a, b| g.vertex(*a).sort_key().cmp(&g.vertex(*b).sort_key()));
        }
        // Largest mutually matching subset, grown greedily from each start.
        let mut pair_match: BTreeMap<(usize, usize), Option<MatchKind>> = BTreeMap::new();
        for i in 0..n {
            for j in i + 1..n {
                pair_match.insert((i, j), self.eng.member_match(&members[i], &members[j]));
            }
        }
        let ok = |i: usize, j: usize| pair_match[&(i.min(j), i.max(j))].is_some();
        let mut best: Vec<usize> = Vec::new();
        for start in 0..n {
            let mut kept = vec![start];
            for j in 0..n {
                if j != start && kept.iter().all(|&k| ok(k, j)) {
                    kept.push(j);
                }
            }
            kept.sort();
            if kept.len() > best.len() {
                best = kept;
            }
        }
        if best.len() < 2 {
            return None;
        }
        if best.len() < n {
            debug!("array at {:?}: {} of {} structures match", roots, best.len(), n);
        }
        let kept: Vec<Vec<VertexId>> = best.iter().map(|&i| members[i].clone()).collect();
        for m in &kept {
            for v in m {
                marks.mark(*v);
            }
        }
        let mut matches = Vec::new();
        for (x, &i) in best.iter().enumerate() {
            for (y, &j) in best.iter().enumerate().skip(x + 1) {
                matches.push((x, y, pair_match[&(i, j)].unwrap()));
            }
        }
        let dummy = kept.iter().all(|m| {
            m.len() == 1
                && g.vertex(m[0]).kind.is_mos()
                && g.edges_of(m[0]).iter().any(|(n, l)| {
                    matches!(l, EdgeLabel::Mos(b) if b & EdgeLabel::G != 0) && g.vertex(*n).is_supply
                })
        });
        Some(ArrayFound { root: roots.to_vec(), members: kept, matches, dummy })
    }
}

/// Scope graph after preprocessing and primitive collapse.
#[derive(Debug, Clone)]
pub struct PreparedScope {
    pub raw: CircuitGraph,
    pub supernodes: Vec<Supernode>,
    pub graph: CircuitGraph,
}

pub fn prepare_scope(
    design: &Design,
    scope: &str,
    lib: &Library,
    supply: &BTreeSet<String>,
    promoted: &PromotedPorts,
) -> Result<PreparedScope> {
    let def = design.subckt(scope).ok_or_else(|| Error::UnknownScope(scope.to_string()))?;
    let raw = build_graph(def, design, supply, promoted).remove_inert_dummies();
    let supernodes = match_primitives(&raw, lib);
    let graph = collapse(&raw, &supernodes);
    Ok(PreparedScope { raw, supernodes, graph })
}

/// Full result of a detection run.
#[derive(Debug, Clone)]
pub struct Detection {
    pub constraints: ConstraintSet,
    pub promoted: PromotedPorts,
    pub warnings: Vec<String>,
}

fn endpoint_name(g: &CircuitGraph, e: Endpoint) -> String {
    match e {
        Endpoint::Elem(v) => g.vertex(v).name.clone(),
        Endpoint::Port(b, n) => format!("{}/{}", g.vertex(b).name, g.vertex(n).name),
    }
}

fn member_key(g: &CircuitGraph, members: &[Vec<VertexId>]) -> String {
    let mut ms: Vec<Vec<String>> =
        members.iter().map(|m| {
            let mut v: Vec<String> = m.iter().map(|x| g.vertex(*x).name.clone()).collect();
            v.sort();
            v
        }).collect();
    ms.sort();
    format!("{ms:?}")
}

/// Identity of each finding independent of axis ids and array names.
fn finding_keys(g: &CircuitGraph, f: &Found) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let pair = |a: String, b: String| if a <= b { format!("{a}|{b}") } else { format!("{b}|{a}") };
    for (a, b, _) in &f.pairs {
        out.insert(format!("P:{}", pair(endpoint_name(g, *a), endpoint_name(g, *b))));
    }
    for s in &f.selfs {
        out.insert(format!("S:{}", endpoint_name(g, *s)));
    }
    let akeys: Vec<String> = f.arrays.iter().map(|a| member_key(g, &a.members)).collect();
    for k in &akeys {
        out.insert(format!("A:{k}"));
    }
    for (a, b) in &f.array_pairs {
        out.insert(format!("AP:{}", pair(akeys[*a].clone(), akeys[*b].clone())));
    }
    for a in &f.array_selfs {
        out.insert(format!("AS:{}", akeys[*a]));
    }
    out
}

struct ScopeState {
    axis_counter: u32,
    array_names: BTreeMap<String, String>,
    prefix_counts: BTreeMap<&'static str, usize>,
}

/// Analyse one scope: explore every seed privately, then accept results in
/// coverage order, dropping those already covered.
#[allow(clippy::too_many_arguments)]
fn detect_scope(
    scope: &str,
    prep: &PreparedScope,
    children: &BTreeMap<String, CircuitGraph>,
    opts: &DetectOptions,
    scorer: Option<&dyn BlockScorer>,
    next_axis: &mut u32,
    out: &mut ConstraintSet,
    warnings: &mut Vec<String>,
) -> Vec<PortPair> {
    let g = &prep.graph;
    let eng = Engine::new(g, children, opts, scorer);
    let seeds: Vec<Seed> = seed_candidates(g);
    debug!("{scope}: {} seeds", seeds.len());
    let explore = |seed: &Seed, scope_marks: Option<&Marks>| -> Found {
        let mut marks = scope_marks.cloned().unwrap_or_else(|| Marks::new(g.len()));
        for o in &seed.origin {
            marks.mark(*o);
        }
        let ex = Explorer { eng: &eng, origin: seed.origin.clone() };
        ex.find(seed.a, seed.b, &mut marks).unwrap_or_default()
    };
    let private: Vec<Found> = seeds.par_iter().map(|s| explore(s, None)).collect();
    let mut ranked: Vec<usize> = (0..seeds.len()).collect();
    ranked.sort_by_key(|&i| (std::cmp::Reverse(private[i].size()), i));

    let mut st = ScopeState { axis_counter: 0, array_names: BTreeMap::new(), prefix_counts: BTreeMap::new() };
    let mut accepted_keys: BTreeSet<String> = BTreeSet::new();
    // Elements covered by accepted results, per parent axis.
    let mut covered: BTreeMap<Option<u32>, BTreeSet<VertexId>> = BTreeMap::new();
    // (member elements, axis of the owning array)
    let mut claimed: Vec<(BTreeSet<VertexId>, u32)> = Vec::new();
    let mut promoted_nets: Vec<(VertexId, VertexId)> = Vec::new();
    let mut partner: BTreeMap<String, String> = BTreeMap::new();

    for i in ranked {
        let seed = &seeds[i];
        let owners: BTreeSet<usize> = seed
            .origin
            .iter()
            .filter_map(|o| claimed.iter().position(|(m, _)| m.contains(o)))
            .collect();
        let (found, parent) = match owners.len() {
            0 => (private[i].clone(), None),
            1 if seed.origin.iter().all(|o| claimed[*owners.iter().next().unwrap()].0.contains(o)) => {
                let k = *owners.iter().next().unwrap();
                let mut m = Marks::new(g.len());
                for e in g.elements().filter(|e| !claimed[k].0.contains(e)) {
                    m.mark(e);
                }
                (explore(seed, Some(&m)), Some(claimed[k].1))
            }
            _ => continue,
        };
        if found.is_empty() {
            continue;
        }
        let keys = finding_keys(g, &found);
        let elems = found.elements();
        let cov = covered.entry(parent).or_default();
        if keys.is_subset(&accepted_keys) || elems.is_subset(cov) {
            debug!("{scope}: seed {i} subsumed");
            continue;
        }
        cov.extend(elems);
        accepted_keys.extend(keys);
        *next_axis += 1;
        st.axis_counter += 1;
        let axis = *next_axis;
        out.axes.push(Axis { id: axis, parent, scope: scope.to_string() });
        emit_found(scope, g, &found, axis, &mut st, &mut claimed, out, opts, &mut partner, warnings);
        promoted_nets.extend(found.net_pairs.iter().copied());
        promoted_nets.push((seed.a, seed.b));
        if let [o] = seed.origin.as_slice() {
            if let Some(b) = &g.vertex(*o).block {
                for pp in &b.port_symmetries {
                    if let (Some(x), Some(y)) = (b.port(&pp.a), b.port(&pp.b)) {
                        promoted_nets.push((x.net, y.net));
                    }
                }
            }
        }
    }

    for sn in &prep.supernodes {
        for c in &sn.internal_constraints {
            match c {
                InternalConstraint::CommonCentroid => out.push(Constraint::CommonCentroid {
                    scope: scope.to_string(),
                    block: sn.name.clone(),
                    devices: sn.members.clone(),
                }),
            }
        }
    }

    let mut pairs: Vec<PortPair> = Vec::new();
    for (a, b) in promoted_nets {
        let (va, vb) = (g.vertex(a), g.vertex(b));
        if a == b || !va.is_port || !vb.is_port {
            continue;
        }
        let (x, y) = if va.name <= vb.name { (&va.name, &vb.name) } else { (&vb.name, &va.name) };
        let pp = PortPair { a: x.clone(), b: y.clone(), seed: true };
        if !pairs.contains(&pp) {
            pairs.push(pp);
        }
    }
    pairs
}

#[allow(clippy::too_many_arguments)]
fn emit_found(
    scope: &str,
    g: &CircuitGraph,
    f: &Found,
    axis: u32,
    st: &mut ScopeState,
    claimed: &mut Vec<(BTreeSet<VertexId>, u32)>,
    out: &mut ConstraintSet,
    opts: &DetectOptions,
    partner: &mut BTreeMap<String, String>,
    warnings: &mut Vec<String>,
) {
    let s = scope.to_string();
    let mut names = Vec::new();
    for a in &f.arrays {
        let key = member_key(g, &a.members);
        let name = match st.array_names.get(&key) {
            Some(n) => n.clone(),
            None => {
                let prefix = if a.dummy { "Dummy" } else { "Array" };
                let c = st.prefix_counts.entry(prefix).or_insert(0);
                *c += 1;
                let n = format!("{prefix}{c}");
                st.array_names.insert(key, n.clone());
                out.push(Constraint::ArrayGroup {
                    scope: s.clone(),
                    name: n.clone(),
                    root: a.root.iter().map(|r| g.vertex(*r).name.clone()).collect(),
                    members: a.members.iter().map(|m| m.iter().map(|v| g.vertex(*v).name.clone()).collect()).collect(),
                    matches: a.matches.iter().map(|&(i, j, kind)| MemberMatch { i, j, kind }).collect(),
                });
                for m in &a.members {
                    claimed.push((m.iter().copied().collect(), axis));
                }
                n
            }
        };
        names.push(name);
    }
    let mut note_pair = |a: &str, b: &str, warnings: &mut Vec<String>| {
        for (x, y) in [(a, b), (b, a)] {
            match partner.get(x) {
                Some(p) if p != y => {
                    let w = format!("{scope}: {x} paired with both {p} and {y}");
                    warn!("{w}");
                    warnings.push(w);
                }
                Some(_) => {}
                None => {
                    partner.insert(x.to_string(), y.to_string());
                }
            }
        }
    };
    for (a, b, k) in &f.pairs {
        let (na, nb) = (endpoint_name(g, *a), endpoint_name(g, *b));
        note_pair(&na, &nb, warnings);
        if let MatchKind::Approx { .. } = k {
            let block = |e: &Endpoint| match e {
                Endpoint::Elem(v) | Endpoint::Port(v, _) => g.vertex(*v).name.clone(),
            };
            out.push(Constraint::MatchBlocks { scope: s.clone(), a: block(a), b: block(b), kind: *k });
        }
        out.push(Constraint::SymmetricPair { scope: s.clone(), a: na, b: nb, axis });
    }
    for e in &f.selfs {
        out.push(Constraint::SelfSymmetric { scope: s.clone(), block: endpoint_name(g, *e), axis });
    }
    for (a, b) in &f.array_pairs {
        note_pair(&names[*a], &names[*b], warnings);
        out.push(Constraint::SymmetricPair { scope: s.clone(), a: names[*a].clone(), b: names[*b].clone(), axis });
    }
    for a in &f.array_selfs {
        out.push(Constraint::SelfSymmetric { scope: s.clone(), block: names[*a].clone(), axis });
    }
    if opts.emit_nets {
        for (a, b) in &f.net_pairs {
            out.push(Constraint::SymmetricNets {
                scope: s.clone(),
                net_a: g.vertex(*a).name.clone(),
                net_b: g.vertex(*b).name.clone(),
                axis,
            });
        }
    }
}

/// Bottom-up detection over every subcircuit reachable from the top.
pub fn run_detection(
    design: &Design,
    lib: &Library,
    opts: &DetectOptions,
    scorer: Option<&dyn BlockScorer>,
) -> Result<Detection> {
    if opts.approx == ApproxMode::Gnn && scorer.is_none() {
        return Err(Error::Model("approximate mode `gnn` needs a model".into()));
    }
    opts.bins.validate()?;
    let supply = identify_supply_nets(design, &opts.supply_overrides);
    let mut promoted = PromotedPorts::new();
    let mut children: BTreeMap<String, CircuitGraph> = BTreeMap::new();
    let mut out = ConstraintSet::new();
    let mut warnings = Vec::new();
    let mut next_axis = 0;
    for scope in design.bottom_up_from(&design.top) {
        let prep = prepare_scope(design, &scope, lib, &supply, &promoted)?;
        let pairs = detect_scope(&scope, &prep, &children, opts, scorer, &mut next_axis, &mut out, &mut warnings);
        if !pairs.is_empty() {
            promoted.insert(scope.clone(), pairs);
        }
        children.insert(scope, prep.graph);
    }
    out.canonicalize();
    Ok(Detection { constraints: out, promoted, warnings })
}

enum Resolved {
    Elem(VertexId),
    Port(VertexId, VertexId),
    Array(Vec<Vec<VertexId>>),
}

struct VerifyScope<'a> {
    prep: &'a PreparedScope,
    arrays: BTreeMap<&'a str, &'a Vec<Vec<String>>>,
}

impl VerifyScope<'_> {
    fn elem(&self, name: &str) -> Option<VertexId> {
        self.prep.graph.find_element(name)
    }

    fn resolve(&self, name: &str) -> std::result::Result<Resolved, Vec<String>> {
        if let Some(m) = self.arrays.get(name) {
            let mut missing = Vec::new();
            let mut out = Vec::new();
            for member in m.iter() {
                let mut ids = Vec::new();
                for e in member {
                    match self.elem(e) {
                        Some(v) => ids.push(v),
                        None => missing.push(e.clone()),
                    }
                }
                out.push(ids);
            }
            return if missing.is_empty() { Ok(Resolved::Array(out)) } else { Err(missing) };
        }
        if let Some(v) = self.elem(name) {
            return Ok(Resolved::Elem(v));
        }
        if let Some((b, n)) = name.split_once('/') {
            if let (Some(bv), Some(nv)) = (self.elem(b), self.prep.graph.find_net(n)) {
                return Ok(Resolved::Port(bv, nv));
            }
        }
        Err(vec![name.to_string()])
    }
}

fn verdict_of(r: std::result::Result<(), String>) -> Verdict {
    match r {
        Ok(()) => Verdict::Consistent,
        Err(reason) => Verdict::Inconsistent { reason },
    }
}

/// Context-free comparison of two elements.
fn elements_match(eng: &Engine, a: VertexId, b: VertexId) -> std::result::Result<(), String> {
    let g = eng.g;
    let (va, vb) = (g.vertex(a), g.vertex(b));
    if va.kind != vb.kind {
        return Err(format!("{} is {:?} but {} is {:?}", va.name, va.kind, vb.name, vb.kind));
    }
    match (&va.block, &vb.block) {
        (None, None) => {
            if params_equal(&va.params, &vb.params) {
                Ok(())
            } else {
                Err(format!("parameters of {} and {} differ", va.name, vb.name))
            }
        }
        (Some(ba), Some(bb)) => {
            if (ba.model == bb.model && ba.signature == bb.signature)
                || (ba.family == bb.family && ba.family_signature == bb.family_signature)
            {
                return Ok(());
            }
            let big = va.device_count >= eng.opts.min_approx_devices && vb.device_count >= eng.opts.min_approx_devices;
            if va.kind == VertexKind::Instance && big && eng.instance_approx(&ba.model, &bb.model).is_some() {
                return Ok(());
            }
            Err(format!("blocks {} ({}) and {} ({}) do not match", va.name, ba.model, vb.name, bb.model))
        }
        _ => Err(format!("{} and {} differ in kind", va.name, vb.name)),
    }
}

fn arrays_match(eng: &Engine, members: &[Vec<VertexId>]) -> std::result::Result<(), String> {
    for i in 0..members.len() {
        for j in i + 1..members.len() {
            if eng.member_match(&members[i], &members[j]).is_none() {
                return Err(format!("array members {i} and {j} do not match"));
            }
        }
    }
    Ok(())
}

fn check_pair(eng: &Engine, a: &Resolved, b: &Resolved) -> std::result::Result<(), String> {
    let g = eng.g;
    let port_ok = |blk: VertexId, net: VertexId| {
        g.edge_label(blk, net)
            .is_some()
            .then_some(())
            .ok_or_else(|| format!("{} is not connected to {}", g.vertex(net).name, g.vertex(blk).name))
    };
    match (a, b) {
        (Resolved::Elem(x), Resolved::Elem(y)) => elements_match(eng, *x, *y),
        (Resolved::Port(x, n), Resolved::Port(y, m)) => {
            port_ok(*x, *n)?;
            port_ok(*y, *m)?;
            elements_match(eng, *x, *y)
        }
        (Resolved::Array(x), Resolved::Array(y)) => {
            if x.len() != y.len() {
                return Err(format!("arrays have {} and {} members", x.len(), y.len()));
            }
            match (x.first(), y.first()) {
                (Some(p), Some(q)) if eng.member_match(p, q).is_none() => Err("array members do not match".into()),
                _ => Ok(()),
            }
        }
        _ => Err("pair mixes an array with a single element".into()),
    }
}

/// Re-check a constraint file against a netlist without re-running detection.
pub fn verify(
    design: &Design,
    lib: &Library,
    opts: &DetectOptions,
    scorer: Option<&dyn BlockScorer>,
    set: &ConstraintSet,
) -> Result<VerifyReport> {
    let supply = identify_supply_nets(design, &opts.supply_overrides);
    let promoted = PromotedPorts::new();
    let mut preps: BTreeMap<String, PreparedScope> = BTreeMap::new();
    let mut children: BTreeMap<String, CircuitGraph> = BTreeMap::new();
    for scope in design.bottom_up_from(&design.top) {
        let prep = prepare_scope(design, &scope, lib, &supply, &promoted)?;
        children.insert(scope.clone(), prep.graph.clone());
        preps.insert(scope, prep);
    }
    let mut report = VerifyReport::default();
    for c in &set.constraints {
        let scope = c.scope();
        let Some(prep) = preps.get(scope) else {
            report.entries.push(VerifyEntry { constraint: c.clone(), verdict: Verdict::Stale { missing: vec![scope.to_string()] } });
            continue;
        };
        let vs = VerifyScope {
            prep,
            arrays: set
                .in_scope(scope)
                .filter_map(|c| match c {
                    Constraint::ArrayGroup { name, members, .. } => Some((name.as_str(), members)),
                    _ => None,
                })
                .collect(),
        };
        let eng = Engine::new(&prep.graph, &children, opts, scorer);
        let g = &prep.graph;
        let verdict = match c {
            Constraint::SymmetricPair { a, b, .. } | Constraint::MatchBlocks { a, b, .. } => {
                match (vs.resolve(a), vs.resolve(b)) {
                    (Ok(x), Ok(y)) => verdict_of(check_pair(&eng, &x, &y)),
                    (x, y) => {
                        let mut missing = x.err().unwrap_or_default();
                        missing.extend(y.err().unwrap_or_default());
                        Verdict::Stale { missing }
                    }
                }
            }
            Constraint::SelfSymmetric { block, .. } => match vs.resolve(block) {
                Ok(Resolved::Elem(v)) | Ok(Resolved::Port(v, _)) => {
                    let vx = g.vertex(v);
                    if vx.kind == VertexKind::Supernode && !vx.block.as_ref().is_some_and(|b| b.self_symmetric) {
                        Verdict::Inconsistent { reason: format!("{} has no internal symmetry", vx.name) }
                    } else {
                        Verdict::Consistent
                    }
                }
                Ok(Resolved::Array(_)) => Verdict::Consistent,
                Err(missing) => Verdict::Stale { missing },
            },
            Constraint::SymmetricNets { net_a, net_b, .. } => {
                let missing: Vec<String> =
                    [net_a, net_b].into_iter().filter(|n| g.find_net(n).is_none()).cloned().collect();
                if missing.is_empty() { Verdict::Consistent } else { Verdict::Stale { missing } }
            }
            Constraint::ArrayGroup { name, .. } => match vs.resolve(name) {
                Ok(Resolved::Array(m)) => verdict_of(arrays_match(&eng, &m)),
                Ok(_) => Verdict::Inconsistent { reason: format!("{name} is not an array") },
                Err(missing) => Verdict::Stale { missing },
            },
            Constraint::CommonCentroid { block, devices, .. } => {
                let mut missing: Vec<String> =
                    devices.iter().filter(|d| prep.raw.find_element(d).is_none()).cloned().collect();
                if !prep.supernodes.iter().any(|s| &s.name == block) {
                    missing.insert(0, block.clone());
                }
                if missing.is_empty() { Verdict::Consistent } else { Verdict::Stale { missing } }
            }
        };
        report.entries.push(VerifyEntry { constraint: c.clone(), verdict });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netlist::parse_netlist;

    const OTA: &str = include_str!("../fixtures/ota.sp");

    fn detect(src: &str) -> Detection {
        let d = parse_netlist(src).unwrap();
        run_detection(&d, &Library::builtin(), &DetectOptions::default(), None).unwrap()
    }

    fn pairs(set: &ConstraintSet) -> Vec<(String, String)> {
        set.constraints
            .iter()
            .filter_map(|c| match c {
                Constraint::SymmetricPair { a, b, .. } => Some((a.clone(), b.clone())),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn ota_pairs_and_dummies() {
        let det = detect(OTA);
        let p = pairs(&det.constraints);
        for (a, b) in [("C1", "C2"), ("CMB1/out1", "SCM2/out2"), ("Dummy1", "Dummy2"), ("R1", "R2")] {
            assert!(p.contains(&(a.to_string(), b.to_string())), "missing {a}/{b}");
        }
        assert_eq!(p.len(), 4);
        assert!(det.warnings.is_empty());
        let axes: BTreeSet<u32> = det.constraints.constraints.iter().filter_map(Constraint::axis).collect();
        assert_eq!(axes.len(), 1);
    }

    #[test]
    fn detection_is_deterministic() {
        let a = detect(OTA).constraints.to_json();
        let b = detect(OTA).constraints.to_json();
        assert_eq!(a, b);
    }

    #[test]
    fn approx_off_drops_mismatched_taps() {
        let d = parse_netlist(include_str!("../fixtures/fir4.sp")).unwrap();
        let opts = DetectOptions { approx: ApproxMode::Off, ..Default::default() };
        let det = run_detection(&d, &Library::builtin(), &opts, None).unwrap();
        for c in &det.constraints.constraints {
            if let Constraint::ArrayGroup { members, matches, .. } = c {
                assert!(members.len() <= 2);
                assert!(matches.iter().all(|m| m.kind == MatchKind::Exact));
            }
        }
    }

    #[test]
    fn gnn_mode_needs_scorer() {
        let d = parse_netlist(OTA).unwrap();
        let opts = DetectOptions { approx: ApproxMode::Gnn, ..Default::default() };
        assert!(run_detection(&d, &Library::builtin(), &opts, None).is_err());
    }

    #[test]
    fn verify_detected_set_is_consistent() {
        let d = parse_netlist(OTA).unwrap();
        let lib = Library::builtin();
        let opts = DetectOptions::default();
        let det = run_detection(&d, &lib, &opts, None).unwrap();
        let r = verify(&d, &lib, &opts, None, &det.constraints).unwrap();
        assert_eq!(r.exit_code(), 0, "{r:?}");
    }

    #[test]
    fn verify_flags_mismatch_and_stale() {
        let d = parse_netlist(OTA).unwrap();
        let lib = Library::builtin();
        let opts = DetectOptions::default();
        let mut set = ConstraintSet::new();
        set.push(Constraint::SymmetricPair { scope: "ota".into(), a: "R1".into(), b: "C1".into(), axis: 1 });
        let r = verify(&d, &lib, &opts, None, &set).unwrap();
        assert_eq!(r.exit_code(), 2);
        let mut set = ConstraintSet::new();
        set.push(Constraint::SymmetricPair { scope: "ota".into(), a: "R1".into(), b: "R9".into(), axis: 1 });
        let r = verify(&d, &lib, &opts, None, &set).unwrap();
        assert_eq!(r.exit_code(), 3);
        assert_eq!(r.entries[0].verdict, Verdict::Stale { missing: vec!["R9".into()] });
    }
}
