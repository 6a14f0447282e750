//! Primitive recognition: library patterns are located by labeled subgraph
//! isomorphism and collapsed into supernodes with labeled ports.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit_graph::{
    param_signature, params_equal, BlockInfo, CircuitGraph, EdgeLabel, GraphBuilder, PortBinding,
    PortPair, Vertex, VertexClass, VertexId, VertexKind,
};
use crate::error::{Error, Result};

pub const LIBRARY_VERSION: u32 = 1;

/// Relative tolerance on mirror width ratios.
pub const RATIO_RTOL: f64 = 1e-6;

const BUILTIN: &str = include_str!("data/builtin_library.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Nmos,
    Pmos,
    /// Either polarity; all `mos` devices of one match share it.
    Mos,
    Res,
    Cap,
    Ind,
}

impl PatternKind {
    fn accepts(self, k: VertexKind) -> bool {
        match self {
            PatternKind::Nmos => k == VertexKind::Nmos,
            PatternKind::Pmos => k == VertexKind::Pmos,
            PatternKind::Mos => k.is_mos(),
            PatternKind::Res => k == VertexKind::Res,
            PatternKind::Cap => k == VertexKind::Cap,
            PatternKind::Ind => k == VertexKind::Ind,
        }
    }

    fn is_mos(self) -> bool {
        matches!(self, PatternKind::Nmos | PatternKind::Pmos | PatternKind::Mos)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternDevice {
    pub name: String,
    pub kind: PatternKind,
    /// Terminal (`d`, `g`, `s` for MOS; `p`, `n` for passives) to pattern net.
    pub terminals: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPort {
    pub name: String,
    pub role: String,
}

/// Replicate one device (and the listed nets) `min..=max` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repeat {
    pub device: String,
    pub nets: Vec<String>,
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalConstraint {
    CommonCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveDef {
    pub name: String,
    pub family: String,
    pub devices: Vec<PatternDevice>,
    #[serde(default)]
    pub repeat: Option<Repeat>,
    pub ports: Vec<PatternPort>,
    #[serde(default)]
    pub port_symmetries: Vec<PortPair>,
    #[serde(default)]
    pub self_symmetric: bool,
    #[serde(default)]
    pub internal_constraints: Vec<InternalConstraint>,
    /// Device groups whose parameters must be equal.
    #[serde(default)]
    pub equal: Vec<Vec<String>>,
    /// Device groups that may differ in width by integer ratios.
    #[serde(default)]
    pub ratio: Vec<Vec<String>>,
    /// Pattern nets allowed to bind to supply nets.
    #[serde(default)]
    pub supply_ok: Vec<String>,
    /// Pattern nets that must bind to supply nets.
    #[serde(default)]
    pub supply_required: Vec<String>,
    #[serde(default)]
    pub key_device: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Library {
    pub version: u32,
    pub primitives: Vec<PrimitiveDef>,
}

impl Library {
    pub fn builtin() -> Library {
        Library::from_json(BUILTIN).expect("builtin library is valid")
    }

    pub fn from_json(text: &str) -> Result<Library> {
        let lib: Library =
            serde_json::from_str(text).map_err(|e| Error::Library(e.to_string()))?;
        lib.validate()?;
        Ok(lib)
    }

    /// Builtin primitives followed by user extensions.
    pub fn extended(user: Library) -> Result<Library> {
        let mut lib = Library::builtin();
        for p in user.primitives {
            if lib.primitives.iter().any(|q| q.name == p.name) {
                return Err(Error::Library(format!("primitive `{}` already defined", p.name)));
            }
            lib.primitives.push(p);
        }
        lib.validate()?;
        Ok(lib)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != LIBRARY_VERSION {
            return Err(Error::Library(format!(
                "unsupported library version {} (expected {LIBRARY_VERSION})",
                self.version
            )));
        }
        for p in &self.primitives {
            p.validate().map_err(|m| Error::Library(format!("{}: {m}", p.name)))?;
        }
        Ok(())
    }

    fn compile(&self) -> Vec<Pattern> {
        let mut out = Vec::new();
        for (i, p) in self.primitives.iter().enumerate() {
            match &p.repeat {
                None => out.push(Pattern::compile(i, p, None)),
                Some(r) => {
                    for n in (r.min..=r.max).rev() {
                        out.push(Pattern::compile(i, p, Some(n)));
                    }
                }
            }
        }
        out
    }
}

impl PrimitiveDef {
    fn validate(&self) -> std::result::Result<(), String> {
        if self.devices.is_empty() {
            return Err("pattern has no devices".into());
        }
        let mut nets = BTreeSet::new();
        for d in &self.devices {
            let allowed: &[&str] = if d.kind.is_mos() { &["d", "g", "s"] } else { &["p", "n"] };
            if d.terminals.len() != allowed.len()
                || !d.terminals.keys().all(|k| allowed.contains(&k.as_str()))
            {
                return Err(format!("device {} needs terminals {:?}", d.name, allowed));
            }
            nets.extend(d.terminals.values().cloned());
        }
        let device_names: BTreeSet<&str> = self.devices.iter().map(|d| d.name.as_str()).collect();
        if device_names.len() != self.devices.len() {
            return Err("duplicate device names".into());
        }
        for port in &self.ports {
            if !nets.contains(&port.name) {
                return Err(format!("port `{}` is not a pattern net", port.name));
            }
        }
        let role = |n: &str| self.ports.iter().find(|p| p.name == n).map(|p| &p.role);
        for s in &self.port_symmetries {
            match (role(&s.a), role(&s.b)) {
                (Some(a), Some(b)) if a == b || self.self_symmetric => {}
                (Some(_), Some(_)) => {
                    return Err(format!("symmetric ports `{}`/`{}` have different roles", s.a, s.b))
                }
                _ => return Err(format!("symmetric pair `{}`/`{}` names unknown ports", s.a, s.b)),
            }
        }
        for g in self.equal.iter().chain(&self.ratio) {
            if let Some(bad) = g.iter().find(|n| !device_names.contains(n.as_str())) {
                return Err(format!("unknown device `{bad}` in parameter group"));
            }
        }
        if let Some(k) = &self.key_device {
            if !device_names.contains(k.as_str()) {
                return Err(format!("unknown key device `{k}`"));
            }
        }
        if let Some(r) = &self.repeat {
            if !device_names.contains(r.device.as_str()) || r.min == 0 || r.min > r.max {
                return Err("invalid repeat".into());
            }
        }
        for n in self.supply_ok.iter().chain(&self.supply_required) {
            if !nets.contains(n) {
                return Err(format!("unknown supply net `{n}`"));
            }
        }
        // Connectivity over shared nets.
        let mut seen = vec![false; self.devices.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for (j, d) in self.devices.iter().enumerate() {
                if !seen[j]
                    && d.terminals.values().any(|n| self.devices[i].terminals.values().any(|m| m == n))
                {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err("pattern is not connected".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct PNet {
    name: String,
    role: Option<String>,
    supply_ok: bool,
    supply_required: bool,
    degree: usize,
}

#[derive(Debug, Clone)]
struct PDevice {
    name: String,
    kind: PatternKind,
    edges: Vec<(usize, EdgeLabel)>,
}

/// One concrete (repeat-expanded) pattern.
#[derive(Debug, Clone)]
struct Pattern {
    prim: usize,
    devices: Vec<PDevice>,
    nets: Vec<PNet>,
    ports: Vec<PatternPort>,
    /// Matching order; each device after the first touches an earlier one.
    order: Vec<usize>,
    equal: Vec<Vec<usize>>,
    ratio: Vec<Vec<usize>>,
    key: Option<usize>,
}

impl Pattern {
    fn compile(prim: usize, def: &PrimitiveDef, copies: Option<usize>) -> Pattern {
        let rep = def.repeat.as_ref();
        let expand_dev = |name: &str| -> Vec<String> {
            match (rep, copies) {
                (Some(r), Some(n)) if r.device == name => (1..=n).map(|i| format!("{name}{i}")).collect(),
                _ => vec![name.to_string()],
            }
        };
        let net_name = |net: &str, copy: Option<usize>| -> String {
            match (rep, copy) {
                (Some(r), Some(i)) if r.nets.iter().any(|n| n == net) => format!("{net}{i}"),
                _ => net.to_string(),
            }
        };
        let mut raw: Vec<(String, PatternKind, Vec<(String, String, String)>)> = Vec::new();
        for d in &def.devices {
            let reps = match (rep, copies) {
                (Some(r), Some(n)) if r.device == d.name => (1..=n).map(Some).collect(),
                _ => vec![None],
            };
            for c in reps {
                let name = c.map_or(d.name.clone(), |i| format!("{}{i}", d.name));
                let terms = d
                    .terminals
                    .iter()
                    .map(|(t, n)| (t.clone(), net_name(n, c), n.clone()))
                    .collect();
                raw.push((name, d.kind, terms));
            }
        }
        let mut ports = Vec::new();
        for p in &def.ports {
            match (rep, copies) {
                (Some(r), Some(n)) if r.nets.contains(&p.name) => {
                    for i in 1..=n {
                        ports.push(PatternPort { name: format!("{}{i}", p.name), role: p.role.clone() });
                    }
                }
                _ => ports.push(p.clone()),
            }
        }
        let mut nets: Vec<PNet> = Vec::new();
        let mut net_idx: BTreeMap<String, usize> = BTreeMap::new();
        let mut devices = Vec::new();
        for (name, kind, terms) in raw {
            let mut edges: Vec<(usize, EdgeLabel)> = Vec::new();
            for (t, n, base) in terms {
                let idx = *net_idx.entry(n.clone()).or_insert_with(|| {
                    nets.push(PNet {
                        name: n.clone(),
                        role: ports.iter().find(|p| p.name == n).map(|p| p.role.clone()),
                        supply_ok: def.supply_ok.contains(&base),
                        supply_required: def.supply_required.contains(&base),
                        degree: 0,
                    });
                    nets.len() - 1
                });
                let label = match t.as_str() {
                    "d" => EdgeLabel::Mos(EdgeLabel::D),
                    "g" => EdgeLabel::Mos(EdgeLabel::G),
                    "s" => EdgeLabel::Mos(EdgeLabel::S),
                    _ => EdgeLabel::Neutral,
                };
                match edges.iter_mut().find(|(i, _)| *i == idx) {
                    Some((_, EdgeLabel::Mos(b))) => {
                        if let EdgeLabel::Mos(x) = label {
                            *b |= x;
                        }
                    }
                    Some(_) => {}
                    None => edges.push((idx, label)),
                }
            }
            for (i, _) in &edges {
                nets[*i].degree += 1;
            }
            devices.push(PDevice { name, kind, edges });
        }
        let index_of = |n: &str| devices.iter().position(|d: &PDevice| d.name == n).unwrap();
        let groups = |gs: &Vec<Vec<String>>| -> Vec<Vec<usize>> {
            gs.iter()
                .map(|g| g.iter().flat_map(|n| expand_dev(n)).map(|n| index_of(&n)).collect())
                .collect()
        };
        let equal = groups(&def.equal);
        let ratio = groups(&def.ratio);
        let key = def.key_device.as_ref().map(|k| index_of(&expand_dev(k)[0]));
        let mut order = vec![0];
        while order.len() < devices.len() {
            let next = (0..devices.len())
                .filter(|i| !order.contains(i))
                .find(|&i| {
                    devices[i].edges.iter().any(|(n, _)| {
                        order.iter().any(|&o| devices[o].edges.iter().any(|(m, _)| m == n))
                    })
                })
                .expect("validated patterns are connected");
            order.push(next);
        }
        Pattern { prim, devices, nets, ports, order, equal, ratio, key }
    }
}

/// A recognised primitive instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Supernode {
    pub name: String,
    pub primitive: String,
    pub family: String,
    /// Member device names in pattern order.
    pub members: Vec<String>,
    pub member_ids: Vec<VertexId>,
    /// (port name, role, net) with nets in the pre-collapse graph.
    pub ports: Vec<(String, String, VertexId)>,
    pub internal_nets: Vec<VertexId>,
    pub port_symmetries: Vec<PortPair>,
    pub self_symmetric: bool,
    pub internal_constraints: Vec<InternalConstraint>,
    pub signature: String,
    pub family_signature: String,
}

#[derive(Debug, Clone)]
struct Embedding {
    pattern: usize,
    devices: Vec<VertexId>,
    nets: Vec<VertexId>,
}

struct Matcher<'a> {
    g: &'a CircuitGraph,
    p: &'a Pattern,
    dev: Vec<Option<VertexId>>,
    net: Vec<Option<VertexId>>,
    used_elem: BTreeSet<VertexId>,
    used_net: BTreeSet<VertexId>,
    mos_kind: Option<VertexKind>,
    found: Vec<Embedding>,
    pattern_idx: usize,
}

impl Matcher<'_> {
    fn net_ok(&self, pn: usize, h: VertexId) -> bool {
        let pnet = &self.p.nets[pn];
        let v = self.g.vertex(h);
        if v.is_supply && !(pnet.supply_ok || pnet.supply_required) {
            return false;
        }
        if pnet.supply_required && !v.is_supply {
            return false;
        }
        if pnet.role.is_none() {
            // Internal nets disappear on collapse, so nothing outside may touch them.
            if v.is_supply || v.is_port || self.g.edges_of(h).len() != pnet.degree {
                return false;
            }
        }
        true
    }

    fn search(&mut self, depth: usize) {
        if depth == self.p.order.len() {
            if self.params_ok() {
                self.found.push(Embedding {
                    pattern: self.pattern_idx,
                    devices: self.dev.iter().map(|d| d.unwrap()).collect(),
                    nets: self.net.iter().map(|n| n.unwrap()).collect(),
                });
            }
            return;
        }
        let pi = self.p.order[depth];
        let pd = &self.p.devices[pi];
        let anchor = pd.edges.iter().find_map(|(n, _)| self.net[*n]);
        let candidates: Vec<VertexId> = match anchor {
            Some(h) => self.g.edges_of(h).iter().map(|(e, _)| *e).collect(),
            None => self.g.elements().collect(),
        };
        for c in candidates {
            let v = self.g.vertex(c);
            if self.used_elem.contains(&c) || v.block.is_some() || !pd.kind.accepts(v.kind) {
                continue;
            }
            if pd.kind == PatternKind::Mos && self.mos_kind.is_some_and(|k| k != v.kind) {
                continue;
            }
            let host = self.g.edges_of(c);
            if host.len() != pd.edges.len() {
                continue;
            }
            for perm in permutations(host.len()) {
                let mut bound = Vec::new();
                let mut ok = true;
                for (k, (pn, pl)) in pd.edges.iter().enumerate() {
                    let (hn, hl) = &host[perm[k]];
                    if hl != pl {
                        ok = false;
                        break;
                    }
                    match self.net[*pn] {
                        Some(b) if b == *hn => {}
                        Some(_) => {
                            ok = false;
                            break;
                        }
                        None => {
                            if self.used_net.contains(hn) || !self.net_ok(*pn, *hn) {
                                ok = false;
                                break;
                            }
                            self.net[*pn] = Some(*hn);
                            self.used_net.insert(*hn);
                            bound.push(*pn);
                        }
                    }
                }
                if ok {
                    let prev_kind = self.mos_kind;
                    if pd.kind == PatternKind::Mos {
                        self.mos_kind = Some(v.kind);
                    }
                    self.dev[pi] = Some(c);
                    self.used_elem.insert(c);
                    self.search(depth + 1);
                    self.used_elem.remove(&c);
                    self.dev[pi] = None;
                    self.mos_kind = prev_kind;
                }
                for pn in bound {
                    self.used_net.remove(&self.net[pn].unwrap());
                    self.net[pn] = None;
                }
            }
        }
    }

    fn params_ok(&self) -> bool {
        let params = |i: usize| &self.g.vertex(self.dev[i].unwrap()).params;
        for grp in &self.p.equal {
            if grp.windows(2).any(|w| !params_equal(params(w[0]), params(w[1]))) {
                return false;
            }
        }
        for grp in &self.p.ratio {
            if grp.windows(2).any(|w| !ratio_compatible(params(w[0]), params(w[1]))) {
                return false;
            }
        }
        true
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, n: usize, out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !cur.contains(&i) {
                cur.push(i);
                rec(cur, n, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), n, &mut out);
    out
}

/// Equal parameters except `w`, whose values must be integer multiples.
fn ratio_compatible(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> bool {
    let strip = |p: &BTreeMap<String, f64>| {
        let mut q = p.clone();
        q.remove("w");
        q
    };
    if !params_equal(&strip(a), &strip(b)) {
        return false;
    }
    match (a.get("w"), b.get("w")) {
        (None, None) => true,
        (Some(x), Some(y)) => {
            let r = x.max(*y) / x.min(*y);
            (r - r.round()).abs() <= RATIO_RTOL * r
        }
        _ => false,
    }
}

fn find_embeddings(g: &CircuitGraph, p: &Pattern, pattern_idx: usize) -> Vec<Embedding> {
    let mut m = Matcher {
        g,
        p,
        dev: vec![None; p.devices.len()],
        net: vec![None; p.nets.len()],
        used_elem: BTreeSet::new(),
        used_net: BTreeSet::new(),
        mos_kind: None,
        found: Vec::new(),
        pattern_idx,
    };
    m.search(0);
    // Automorphic images describe the same match; keep the first (smallest) one.
    let mut seen = BTreeSet::new();
    m.found.retain(|e| {
        let mut key = e.devices.clone();
        key.sort();
        seen.insert(key)
    });
    m.found
}

/// Maximal non-overlapping set of library matches. Overlaps resolve by larger
/// pattern first, then library order, then netlist position.
pub fn match_primitives(g: &CircuitGraph, lib: &Library) -> Vec<Supernode> {
    let patterns = lib.compile();
    let mut all: Vec<Embedding> = patterns
        .par_iter()
        .enumerate()
        .map(|(i, p)| find_embeddings(g, p, i))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    all.sort_by_key(|e| {
        let mut pos = e.devices.clone();
        pos.sort();
        (std::cmp::Reverse(e.devices.len()), patterns[e.pattern].prim, pos)
    });
    let mut taken = BTreeSet::new();
    let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for e in all {
        if e.devices.iter().any(|d| taken.contains(d)) {
            continue;
        }
        taken.extend(e.devices.iter().copied());
        let p = &patterns[e.pattern];
        let def = &lib.primitives[p.prim];
        let n = counters.entry(def.family.as_str()).or_insert(0);
        *n += 1;
        out.push(make_supernode(g, def, p, &e, format!("{}{}", def.name, n)));
    }
    out
}

fn make_supernode(g: &CircuitGraph, def: &PrimitiveDef, p: &Pattern, e: &Embedding, name: String) -> Supernode {
    let members: Vec<String> = e.devices.iter().map(|d| g.vertex(*d).name.clone()).collect();
    let ports = p
        .ports
        .iter()
        .map(|port| {
            let i = p.nets.iter().position(|n| n.name == port.name).unwrap();
            (port.name.clone(), port.role.clone(), e.nets[i])
        })
        .collect();
    let internal_nets = p
        .nets
        .iter()
        .enumerate()
        .filter(|(_, n)| n.role.is_none())
        .map(|(i, _)| e.nets[i])
        .collect();
    let dev_sig = |d: VertexId| {
        let v = g.vertex(d);
        format!("{:?}:{}", v.kind, param_signature(&v.params))
    };
    let signature = e.devices.iter().map(|d| dev_sig(*d)).collect::<Vec<_>>().join("/");
    let family_signature = p.key.map(|k| dev_sig(e.devices[k])).unwrap_or_else(|| signature.clone());
    Supernode {
        name,
        primitive: def.name.clone(),
        family: def.family.clone(),
        members,
        member_ids: e.devices.clone(),
        ports,
        internal_nets,
        port_symmetries: def.port_symmetries.clone(),
        self_symmetric: def.self_symmetric,
        internal_constraints: def.internal_constraints.clone(),
        signature: format!("{}|{}", def.name, signature),
        family_signature,
    }
}

/// Replace each supernode's members with one element vertex; internal nets go away.
pub fn collapse(g: &CircuitGraph, supernodes: &[Supernode]) -> CircuitGraph {
    if supernodes.is_empty() {
        return g.clone();
    }
    let mut owner: BTreeMap<VertexId, usize> = BTreeMap::new();
    for (i, s) in supernodes.iter().enumerate() {
        for m in &s.member_ids {
            owner.insert(*m, i);
        }
    }
    let internal: BTreeSet<VertexId> =
        supernodes.iter().flat_map(|s| s.internal_nets.iter().copied()).collect();
    let mut b = GraphBuilder::new(&g.scope);
    let mut net_map: BTreeMap<VertexId, VertexId> = BTreeMap::new();
    for n in g.nets().filter(|n| !internal.contains(n)) {
        let v = g.vertex(n);
        net_map.insert(n, b.net(&v.name, v.is_supply, v.is_port));
    }
    let mut emitted = vec![false; supernodes.len()];
    for e in g.elements() {
        let v = g.vertex(e);
        match owner.get(&e) {
            Some(&i) => {
                if emitted[i] {
                    continue;
                }
                emitted[i] = true;
                let s = &supernodes[i];
                let ports: Vec<PortBinding> = s
                    .ports
                    .iter()
                    .map(|(name, role, net)| PortBinding {
                        name: name.clone(),
                        role: role.clone(),
                        net: net_map[net],
                    })
                    .collect();
                let vertex = Vertex {
                    id: VertexId(0),
                    class: VertexClass::Element,
                    kind: VertexKind::Supernode,
                    name: s.name.clone(),
                    params: BTreeMap::new(),
                    body: None,
                    block: Some(BlockInfo {
                        model: s.primitive.clone(),
                        family: s.family.clone(),
                        ports: ports.clone(),
                        port_symmetries: s.port_symmetries.clone(),
                        self_symmetric: s.self_symmetric,
                        signature: s.signature.clone(),
                        family_signature: s.family_signature.clone(),
                        members: s.members.clone(),
                    }),
                    device_count: s.members.len(),
                    is_supply: false,
                    is_port: false,
                };
                let id = b.element(vertex);
                for p in ports {
                    b.connect(id, p.net, EdgeLabel::Port(p.role));
                }
            }
            None => {
                let mut nv = v.clone();
                if let Some(bl) = &mut nv.block {
                    for p in &mut bl.ports {
                        p.net = net_map[&p.net];
                    }
                }
                let id = b.element(nv);
                for (n, l) in g.edges_of(e) {
                    b.connect(id, net_map[n], l.clone());
                }
            }
        }
    }
    b.finish()
}

/// Potentially symmetric net pair and the blocks that proposed it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seed {
    pub a: VertexId,
    pub b: VertexId,
    pub origin: Vec<VertexId>,
}

/// Candidate net pairs from declared port symmetries (`seed` pairs) and from
/// like-role ports of like blocks of one family.
pub fn seed_candidates(g: &CircuitGraph) -> Vec<Seed> {
    let mut blocks: Vec<VertexId> = g.elements().filter(|&e| g.vertex(e).block.is_some()).collect();
    // Primitives propose first; instance seeds come from promoted port pairs.
    blocks.sort_by_key(|b| (g.vertex(*b).kind != VertexKind::Supernode, g.vertex(*b).sort_key()));
    let usable = |a: VertexId, b: VertexId| a != b && !g.vertex(a).is_supply && !g.vertex(b).is_supply;
    let mut out: Vec<Seed> = Vec::new();
    let mut push = |s: Seed| {
        if !out.iter().any(|o| (o.a == s.a && o.b == s.b) || (o.a == s.b && o.b == s.a)) {
            out.push(s);
        }
    };
    for &blk in &blocks {
        let info = g.vertex(blk).block.as_ref().unwrap();
        for pp in info.port_symmetries.iter().filter(|p| p.seed) {
            if let (Some(a), Some(b)) = (info.port(&pp.a), info.port(&pp.b)) {
                if usable(a.net, b.net) {
                    push(Seed { a: a.net, b: b.net, origin: vec![blk] });
                }
            }
        }
    }
    for (i, &x) in blocks.iter().enumerate() {
        let bx = g.vertex(x).block.as_ref().unwrap();
        for &y in &blocks[i + 1..] {
            let by = g.vertex(y).block.as_ref().unwrap();
            if bx.family != by.family || bx.family_signature != by.family_signature {
                continue;
            }
            for px in &bx.ports {
                for py in by.ports.iter().filter(|p| p.role == px.role) {
                    if usable(px.net, py.net) {
                        push(Seed { a: px.net, b: py.net, origin: vec![x, y] });
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit_graph::{build_graph, PromotedPorts};
    use crate::netlist::{identify_supply_nets, parse_netlist};

    fn graph(src: &str) -> CircuitGraph {
        let d = parse_netlist(src).unwrap();
        let supply = identify_supply_nets(&d, &[]);
        build_graph(d.top_subckt(), &d, &supply, &PromotedPorts::new()).remove_inert_dummies()
    }

    fn names(s: &[Supernode]) -> Vec<(String, Vec<String>)> {
        s.iter().map(|s| (s.name.clone(), s.members.clone())).collect()
    }

    #[test]
    fn builtin_library_loads() {
        let lib = Library::builtin();
        assert_eq!(lib.primitives.len(), 5);
    }

    #[test]
    fn library_rejects_unknown_port() {
        let txt = r#"{"version":1,"primitives":[{"name":"X","family":"x",
            "devices":[{"name":"M","kind":"nmos","terminals":{"d":"a","g":"b","s":"c"}}],
            "ports":[{"name":"zz","role":"r"}]}]}"#;
        assert!(Library::from_json(txt).is_err());
    }

    #[test]
    fn library_requires_version() {
        let txt = r#"{"version":7,"primitives":[]}"#;
        assert!(Library::from_json(txt).is_err());
        assert!(Library::from_json(r#"{"primitives":[]}"#).is_err());
    }

    #[test]
    fn empty_graph_has_no_matches() {
        let g = graph("R1 a b 1k");
        assert!(match_primitives(&g, &Library::builtin()).is_empty());
    }

    #[test]
    fn single_dp() {
        let g = graph("M1 o1 i1 t vss nmos w=1u\nM2 o2 i2 t vss nmos w=1u\nM3 t vb vss vss nmos w=1u");
        let s = match_primitives(&g, &Library::builtin());
        assert_eq!(names(&s), vec![("DP1".into(), vec!["M1".into(), "M2".into()])]);
        let c = collapse(&g, &s);
        assert!(c.is_bipartite());
        let dp = c.find_element("DP1").unwrap();
        assert_eq!(c.edges_of(dp).len(), 5);
        let seeds = seed_candidates(&c);
        assert_eq!(seeds.len(), 1);
        let pair = (c.vertex(seeds[0].a).name.as_str(), c.vertex(seeds[0].b).name.as_str());
        assert_eq!(pair, ("o1", "o2"));
    }

    #[test]
    fn unequal_pair_is_not_dp() {
        let g = graph("M1 o1 i1 t vss nmos w=1u\nM2 o2 i2 t vss nmos w=2u");
        assert!(match_primitives(&g, &Library::builtin()).is_empty());
    }

    #[test]
    fn mirror_bank_beats_single_mirror() {
        let g = graph(
            "M1 r r vss vss nmos w=1u\nM2 a r vss vss nmos w=2u\nM3 b r vss vss nmos w=1u\nR1 a b 1k\nR2 r b 1k",
        );
        let s = match_primitives(&g, &Library::builtin());
        assert_eq!(names(&s), vec![("CMB1".into(), vec!["M1".into(), "M2".into(), "M3".into()])]);
        assert_eq!(s[0].internal_constraints, vec![InternalConstraint::CommonCentroid]);
    }

    #[test]
    fn non_integer_ratio_rejected() {
        let g = graph("M1 r r vss vss nmos w=1u\nM2 a r vss vss nmos w=1.5u\nR1 a r 1k");
        assert!(match_primitives(&g, &Library::builtin()).is_empty());
    }

    #[test]
    fn cascode_internal_net_removed() {
        let g = graph("M1 m gb vss vss nmos\nM2 o gc m vss nmos\nR1 o vdd 1k\nR2 gb gc 1k");
        let s = match_primitives(&g, &Library::builtin());
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].primitive, "CASC");
        let c = collapse(&g, &s);
        assert!(c.find_net("m").is_none());
        assert!(c.find_net("o").is_some());
    }

    #[test]
    fn externally_used_middle_net_blocks_cascode() {
        let g = graph("M1 m gb vss vss nmos\nM2 o gc m vss nmos\nR1 o vdd 1k\nR3 m vdd 1k");
        assert!(match_primitives(&g, &Library::builtin()).iter().all(|s| s.primitive != "CASC"));
    }

    #[test]
    fn collapse_without_supernodes_is_identity() {
        let g = graph("R1 a b 1k\nM1 a b c vss nmos");
        assert_eq!(collapse(&g, &[]), g);
    }

    #[test]
    fn ota_primitives() {
        let g = graph(include_str!("../fixtures/ota.sp"));
        let s = match_primitives(&g, &Library::builtin());
        let got: Vec<&str> = s.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(got, vec!["CMB1", "SCM2", "SCM3", "SCM4", "DP1"]);
        let c = collapse(&g, &s);
        let seeds: BTreeSet<(String, String)> = seed_candidates(&c)
            .iter()
            .map(|s| (c.vertex(s.a).name.clone(), c.vertex(s.b).name.clone()))
            .collect();
        let want: BTreeSet<(String, String)> =
            [("out1", "out2"), ("net3", "net4"), ("net7", "net4"), ("ibo", "net4")]
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect();
        assert_eq!(seeds, want);
    }
}
