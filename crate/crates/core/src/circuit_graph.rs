//! Bipartite element/net graph of one subcircuit scope.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::labeled::{self, code, LabeledGraph};
use crate::netlist::{Design, DeviceKind, SubcktDef, TerminalRole};

/// Relative tolerance for parameter equality.
pub const PARAM_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexId(pub u32);

impl VertexId {
    pub fn idx(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for VertexId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexClass {
    Element,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VertexKind {
    Nmos,
    Pmos,
    Res,
    Cap,
    Ind,
    Instance,
    Supernode,
    Net,
}

impl VertexKind {
    pub fn from_device(k: DeviceKind) -> Self {
        match k {
            DeviceKind::Nmos => VertexKind::Nmos,
            DeviceKind::Pmos => VertexKind::Pmos,
            DeviceKind::Res => VertexKind::Res,
            DeviceKind::Cap => VertexKind::Cap,
            DeviceKind::Ind => VertexKind::Ind,
            DeviceKind::Subckt => VertexKind::Instance,
        }
    }

    pub fn is_mos(self) -> bool {
        matches!(self, VertexKind::Nmos | VertexKind::Pmos)
    }

    pub fn is_passive(self) -> bool {
        matches!(self, VertexKind::Res | VertexKind::Cap | VertexKind::Ind)
    }

    pub fn is_block(self) -> bool {
        matches!(self, VertexKind::Instance | VertexKind::Supernode)
    }
}

/// Label of an element–net edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeLabel {
    /// Gate/source/drain bit mask (`G = 1`, `S = 2`, `D = 4`).
    Mos(u8),
    /// Two-terminal passive; orientation-insensitive.
    Neutral,
    /// Port role of a composite block.
    Port(String),
}

impl EdgeLabel {
    pub const G: u8 = 1;
    pub const S: u8 = 2;
    pub const D: u8 = 4;

    pub fn code(&self) -> u64 {
        match self {
            EdgeLabel::Mos(b) => *b as u64,
            EdgeLabel::Neutral => code::EDGE_NEUTRAL,
            EdgeLabel::Port(r) => labeled::port_edge_code(r),
        }
    }
}

impl fmt::Display for EdgeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeLabel::Mos(b) => {
                let mut s = String::new();
                for (bit, c) in [(Self::G, 'g'), (Self::S, 's'), (Self::D, 'd')] {
                    if b & bit != 0 {
                        s.push(c);
                    }
                }
                f.write_str(&s)
            }
            EdgeLabel::Neutral => f.write_str("-"),
            EdgeLabel::Port(r) => write!(f, "port:{r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortBinding {
    pub name: String,
    pub role: String,
    pub net: VertexId,
}

/// Symmetric port pair of a composite block. `seed` pairs start symmetry searches.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PortPair {
    pub a: String,
    pub b: String,
    #[serde(default)]
    pub seed: bool,
}

/// Matching metadata of a composite block (supernode or subckt instance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub model: String,
    pub family: String,
    pub ports: Vec<PortBinding>,
    pub port_symmetries: Vec<PortPair>,
    pub self_symmetric: bool,
    /// Parameter signature of the whole block.
    pub signature: String,
    /// Signature that must agree between distinct kinds of one family.
    pub family_signature: String,
    pub members: Vec<String>,
}

impl BlockInfo {
    pub fn port(&self, name: &str) -> Option<&PortBinding> {
        self.ports.iter().find(|p| p.name == name)
    }

    pub fn ports_on(&self, net: VertexId) -> impl Iterator<Item = &PortBinding> {
        self.ports.iter().filter(move |p| p.net == net)
    }

    pub fn symmetric(&self, a: &str, b: &str) -> bool {
        self.port_symmetries
            .iter()
            .any(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
    }

    /// Image of `port` under the swap of every declared symmetric pair.
    pub fn mirror(&self, port: &str) -> String {
        for p in &self.port_symmetries {
            if p.a == port {
                return p.b.clone();
            }
            if p.b == port {
                return p.a.clone();
            }
        }
        port.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub id: VertexId,
    pub class: VertexClass,
    pub kind: VertexKind,
    pub name: String,
    pub params: BTreeMap<String, f64>,
    /// Body net of a MOS device; kept only for dummy detection.
    pub body: Option<String>,
    pub block: Option<BlockInfo>,
    /// Leaf devices represented by this vertex.
    pub device_count: usize,
    pub is_supply: bool,
    pub is_port: bool,
}

impl Vertex {
    pub fn is_element(&self) -> bool {
        self.class == VertexClass::Element
    }

    pub fn is_net(&self) -> bool {
        self.class == VertexClass::Net
    }

    pub fn sort_key(&self) -> (VertexClass, VertexKind, &str) {
        (self.class, self.kind, &self.name)
    }

    /// Structural label for GED / GNN inputs.
    pub fn structural_code(&self) -> u64 {
        match self.kind {
            VertexKind::Net if self.is_supply => code::SUPPLY_NET,
            VertexKind::Net => code::NET,
            VertexKind::Nmos => code::NMOS,
            VertexKind::Pmos => code::PMOS,
            VertexKind::Res => code::RES,
            VertexKind::Cap => code::CAP,
            VertexKind::Ind => code::IND,
            VertexKind::Instance | VertexKind::Supernode => {
                labeled::named_code(self.block.as_ref().map_or("", |b| b.model.as_str()))
            }
        }
    }

    /// Label that also distinguishes device sizes.
    pub fn param_code(&self) -> u64 {
        if self.is_net() {
            return self.structural_code();
        }
        let mut s = format!("{:?}|", self.kind);
        if let Some(b) = &self.block {
            s.push_str(&b.model);
            s.push('|');
            s.push_str(&b.signature);
        }
        s.push_str(&param_signature(&self.params));
        labeled::stable_hash(s.as_bytes())
    }
}

/// Stable text form of a parameter map at the matching tolerance.
pub fn param_signature(p: &BTreeMap<String, f64>) -> String {
    p.iter().map(|(k, v)| format!("{k}={v:.9e};")).collect()
}

pub fn params_equal(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|((ka, va), (kb, vb))| {
            ka == kb && (va - vb).abs() <= PARAM_RTOL * va.abs().max(vb.abs())
        })
}

/// Visited marks owned by one traversal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marks(Vec<bool>);

impl Marks {
    pub fn new(n: usize) -> Self {
        Marks(vec![false; n])
    }

    pub fn mark(&mut self, v: VertexId) {
        self.0[v.idx()] = true;
    }

    pub fn unmark(&mut self, v: VertexId) {
        self.0[v.idx()] = false;
    }

    pub fn is_marked(&self, v: VertexId) -> bool {
        self.0[v.idx()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub scope: String,
    pub vertices: Vec<Vertex>,
    /// Per-vertex adjacency sorted by neighbour id.
    pub adj: Vec<Vec<(VertexId, EdgeLabel)>>,
}

/// Incremental constructor used by `build_graph` and by primitive collapse.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    scope: String,
    vertices: Vec<Vertex>,
    edges: BTreeMap<(VertexId, VertexId), EdgeLabel>,
    nets: BTreeMap<String, VertexId>,
}

impl GraphBuilder {
    pub fn new(scope: &str) -> Self {
        GraphBuilder { scope: scope.to_string(), ..Default::default() }
    }

    pub fn net(&mut self, name: &str, is_supply: bool, is_port: bool) -> VertexId {
        if let Some(&id) = self.nets.get(name) {
            return id;
        }
        let id = VertexId(self.vertices.len() as u32);
        self.vertices.push(Vertex {
            id,
            class: VertexClass::Net,
            kind: VertexKind::Net,
            name: name.to_string(),
            params: BTreeMap::new(),
            body: None,
            block: None,
            device_count: 0,
            is_supply,
            is_port,
        });
        self.nets.insert(name.to_string(), id);
        id
    }

    pub fn element(&mut self, mut v: Vertex) -> VertexId {
        let id = VertexId(self.vertices.len() as u32);
        v.id = id;
        v.class = VertexClass::Element;
        self.vertices.push(v);
        id
    }

    /// Connect element `e` to net `n`, merging MOS terminal bits on repeat.
    pub fn connect(&mut self, e: VertexId, n: VertexId, label: EdgeLabel) {
        use std::collections::btree_map::Entry;
        match self.edges.entry((e, n)) {
            Entry::Vacant(v) => {
                v.insert(label);
            }
            Entry::Occupied(mut o) => {
                let merged = match (o.get(), &label) {
                    (EdgeLabel::Mos(a), EdgeLabel::Mos(b)) => EdgeLabel::Mos(a | b),
                    (EdgeLabel::Port(a), EdgeLabel::Port(b)) if a != b => {
                        let mut r = [a.as_str(), b.as_str()];
                        r.sort();
                        EdgeLabel::Port(r.join("+"))
                    }
                    (old, _) => old.clone(),
                };
                o.insert(merged);
            }
        }
    }

    pub fn finish(self) -> CircuitGraph {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for ((e, n), l) in self.edges {
            adj[e.idx()].push((n, l.clone()));
            adj[n.idx()].push((e, l));
        }
        for a in &mut adj {
            a.sort_by_key(|(v, _)| *v);
        }
        CircuitGraph { scope: self.scope, vertices: self.vertices, adj }
    }
}

fn blank_element(name: &str, kind: VertexKind) -> Vertex {
    Vertex {
        id: VertexId(0),
        class: VertexClass::Element,
        kind,
        name: name.to_string(),
        params: BTreeMap::new(),
        body: None,
        block: None,
        device_count: 1,
        is_supply: false,
        is_port: false,
    }
}

/// Port symmetries promoted from already-analysed child subcircuits.
pub type PromotedPorts = BTreeMap<String, Vec<PortPair>>;

/// Build the bipartite graph of `scope`. Body terminals never create edges.
pub fn build_graph(
    scope: &SubcktDef,
    design: &Design,
    supply: &BTreeSet<String>,
    promoted: &PromotedPorts,
) -> CircuitGraph {
    let mut b = GraphBuilder::new(&scope.name);
    let ports: BTreeSet<&str> = scope.ports.iter().map(String::as_str).collect();
    // Net vertices in first-appearance order, ports first.
    let connected: BTreeSet<&str> = scope
        .devices
        .iter()
        .flat_map(|d| d.terminals.iter())
        .filter(|(r, _)| *r != TerminalRole::B)
        .map(|(_, n)| n.as_str())
        .collect();
    for n in scope.nets() {
        if connected.contains(n.as_str()) {
            b.net(&n, supply.contains(&n), ports.contains(n.as_str()));
        }
    }
    for d in &scope.devices {
        let kind = VertexKind::from_device(d.kind);
        let mut v = blank_element(&d.name, kind);
        v.params = d.params.clone();
        v.body = d.net(TerminalRole::B).map(str::to_string);
        if let Some(sub) = &d.subckt {
            let def = design.subckt(sub);
            let port_names: Vec<String> =
                def.map(|s| s.ports.clone()).unwrap_or_default();
            v.device_count = design.flat_device_count(sub);
            let syms = promoted.get(sub).cloned().unwrap_or_default();
            v.block = Some(BlockInfo {
                model: sub.clone(),
                family: sub.clone(),
                ports: Vec::new(),
                self_symmetric: !syms.is_empty(),
                port_symmetries: syms,
                signature: sub.clone(),
                family_signature: sub.clone(),
                members: vec![d.name.clone()],
            });
            let id = b.element(v);
            let mut bindings = Vec::new();
            for (role, net) in &d.terminals {
                let TerminalRole::Port(i) = role else { continue };
                let pname = port_names.get(*i).cloned().unwrap_or_else(|| format!("p{i}"));
                let nid = b.net(net, supply.contains(net), ports.contains(net.as_str()));
                b.connect(id, nid, EdgeLabel::Port(pname.clone()));
                bindings.push(PortBinding { name: pname.clone(), role: pname, net: nid });
            }
            b.vertices[id.idx()].block.as_mut().unwrap().ports = bindings;
            continue;
        }
        let id = b.element(v);
        for (role, net) in &d.terminals {
            let label = match role {
                TerminalRole::D => EdgeLabel::Mos(EdgeLabel::D),
                TerminalRole::G => EdgeLabel::Mos(EdgeLabel::G),
                TerminalRole::S => EdgeLabel::Mos(EdgeLabel::S),
                TerminalRole::B => continue,
                _ => EdgeLabel::Neutral,
            };
            let nid = b.net(net, supply.contains(net), ports.contains(net.as_str()));
            b.connect(id, nid, label);
        }
    }
    b.finish()
}

impl CircuitGraph {
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertex(&self, v: VertexId) -> &Vertex {
        &self.vertices[v.idx()]
    }

    pub fn ids(&self) -> impl Iterator<Item = VertexId> + '_ {
        (0..self.vertices.len() as u32).map(VertexId)
    }

    pub fn elements(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.ids().filter(|&v| self.vertex(v).is_element())
    }

    pub fn nets(&self) -> impl Iterator<Item = VertexId> + '_ {
        self.ids().filter(|&v| self.vertex(v).is_net())
    }

    pub fn find_element(&self, name: &str) -> Option<VertexId> {
        self.vertices.iter().find(|v| v.is_element() && v.name == name).map(|v| v.id)
    }

    pub fn find_net(&self, name: &str) -> Option<VertexId> {
        self.vertices.iter().find(|v| v.is_net() && v.name == name).map(|v| v.id)
    }

    pub fn n_edges(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn edges_of(&self, v: VertexId) -> &[(VertexId, EdgeLabel)] {
        &self.adj[v.idx()]
    }

    pub fn edge_label(&self, a: VertexId, b: VertexId) -> Option<&EdgeLabel> {
        let list = &self.adj[a.idx()];
        list.binary_search_by_key(&b, |(v, _)| *v).ok().map(|i| &list[i].1)
    }

    /// Unvisited, non-supply neighbours of `v` in canonical order.
    pub fn neighbors(&self, v: VertexId, visited: &Marks) -> Vec<(VertexId, EdgeLabel)> {
        let mut out: Vec<(VertexId, EdgeLabel)> = self.adj[v.idx()]
            .iter()
            .filter(|(n, _)| !visited.is_marked(*n) && !self.vertex(*n).is_supply)
            .cloned()
            .collect();
        out.sort_by(|a, b| self.vertex(a.0).sort_key().cmp(&self.vertex(b.0).sort_key()));
        out
    }

    pub fn is_bipartite(&self) -> bool {
        self.ids().all(|v| {
            let c = self.vertex(v).class;
            self.adj[v.idx()].iter().all(|(n, _)| self.vertex(*n).class != c)
        })
    }

    /// Copy of the graph keeping only vertices accepted by `keep`.
    pub fn retain(&self, keep: impl Fn(&Vertex) -> bool) -> CircuitGraph {
        let mut remap = vec![None; self.len()];
        let mut vertices = Vec::new();
        for v in &self.vertices {
            if keep(v) {
                let id = VertexId(vertices.len() as u32);
                remap[v.id.idx()] = Some(id);
                let mut nv = v.clone();
                nv.id = id;
                vertices.push(nv);
            }
        }
        for v in &mut vertices {
            if let Some(b) = &mut v.block {
                b.ports.retain(|p| remap[p.net.idx()].is_some());
                for p in &mut b.ports {
                    p.net = remap[p.net.idx()].unwrap();
                }
            }
        }
        let mut adj = vec![Vec::new(); vertices.len()];
        for (old, list) in self.adj.iter().enumerate() {
            let Some(new) = remap[old] else { continue };
            for (n, l) in list {
                if let Some(nn) = remap[n.idx()] {
                    adj[new.idx()].push((nn, l.clone()));
                }
            }
        }
        for a in &mut adj {
            a.sort_by_key(|(v, _)| *v);
        }
        CircuitGraph { scope: self.scope.clone(), vertices, adj }
    }

    /// Delete MOS devices whose gate, source and drain all sit on supply nets.
    pub fn remove_inert_dummies(&self) -> CircuitGraph {
        let inert: BTreeSet<VertexId> = self
            .elements()
            .filter(|&e| {
                let v = self.vertex(e);
                v.kind.is_mos()
                    && !self.adj[e.idx()].is_empty()
                    && self.adj[e.idx()].iter().all(|(n, _)| self.vertex(*n).is_supply)
            })
            .collect();
        if inert.is_empty() {
            return self.clone();
        }
        self.retain(|v| !inert.contains(&v.id))
    }

    /// Element vertices plus every incident net, as a labeled graph. Returns
    /// the graph and the originating vertex of each labeled vertex.
    pub fn to_labeled(&self, elements: &[VertexId], with_params: bool) -> (LabeledGraph, Vec<VertexId>) {
        let mut order: Vec<VertexId> = elements.to_vec();
        order.sort_by(|a, b| self.vertex(*a).sort_key().cmp(&self.vertex(*b).sort_key()));
        let mut nets = BTreeSet::new();
        for &e in &order {
            for (n, _) in &self.adj[e.idx()] {
                nets.insert(*n);
            }
        }
        let mut net_list: Vec<VertexId> = nets.into_iter().collect();
        net_list.sort_by(|a, b| self.vertex(*a).sort_key().cmp(&self.vertex(*b).sort_key()));
        order.extend(net_list);
        let index: BTreeMap<VertexId, usize> = order.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let labels = order
            .iter()
            .map(|&v| {
                let vx = self.vertex(v);
                if with_params {
                    vx.param_code()
                } else {
                    vx.structural_code()
                }
            })
            .collect();
        let mut g = LabeledGraph::new(labels);
        for &e in elements {
            for (n, l) in &self.adj[e.idx()] {
                g.set_edge(index[&e], index[n], l.code());
            }
        }
        g.canonicalize_edges();
        (g, order)
    }

    /// Whole graph as a labeled graph.
    pub fn to_labeled_all(&self, with_params: bool) -> LabeledGraph {
        let elems: Vec<VertexId> = self.elements().collect();
        let (mut g, order) = self.to_labeled(&elems, with_params);
        // Isolated nets are part of the graph too.
        let present: BTreeSet<VertexId> = order.into_iter().collect();
        for n in self.nets().filter(|n| !present.contains(n)) {
            let v = self.vertex(n);
            g.labels.push(if with_params { v.param_code() } else { v.structural_code() });
        }
        g
    }

    /// Diagnostic adjacency dump, stable across runs.
    pub fn dump(&self) -> serde_json::Value {
        let vs: Vec<serde_json::Value> = self
            .vertices
            .iter()
            .map(|v| {
                let nbrs: Vec<serde_json::Value> = self.adj[v.id.idx()]
                    .iter()
                    .map(|(n, l)| serde_json::json!({"to": self.vertex(*n).name, "label": l.to_string()}))
                    .collect();
                serde_json::json!({
                    "id": v.id.0,
                    "class": v.class,
                    "kind": v.kind,
                    "name": v.name,
                    "supply": v.is_supply,
                    "port": v.is_port,
                    "model": v.block.as_ref().map(|b| b.model.clone()),
                    "members": v.block.as_ref().map(|b| b.members.clone()),
                    "edges": nbrs,
                })
            })
            .collect();
        serde_json::json!({"scope": self.scope, "vertices": vs})
    }
}
