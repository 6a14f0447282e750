//! SPICE-subset netlist parsing.
//!
//! The accepted grammar is deliberately small and deterministic:
//!
//! ```text
//! * full-line comment
//! M<name> <d> <g> <s> <b> nmos|pmos [w=<v>] [l=<v>] ...
//! R<name> <a> <b> <value> [key=<v> ...]
//! C<name> <a> <b> <value> [key=<v> ...]
//! L<name> <a> <b> <value> [key=<v> ...]
//! X<name> <n1> ... <nk> <subckt>
//! .subckt <name> <p1> ... <pk>
//! .ends [<name>]
//! .global <n1> ...
//! .end
//! + continuation of the previous card
//! ```
//!
//! `;` starts a trailing comment. Identifiers are `[A-Za-z0-9_]+`. Numeric
//! values accept the suffixes `f p n u m k meg g` (case-insensitive) and
//! nothing else. Cards outside any `.subckt` form the implicit top level
//! named [`TOP_NAME`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use indexmap::IndexMap;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{NetlistError, Result};

/// Name given to the implicit top-level scope.
pub const TOP_NAME: &str = "<top>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceKind {
    Nmos,
    Pmos,
    Res,
    Cap,
    Ind,
    Subckt,
}

impl DeviceKind {
    pub fn is_mos(self) -> bool {
        matches!(self, DeviceKind::Nmos | DeviceKind::Pmos)
    }

    pub fn is_passive(self) -> bool {
        matches!(self, DeviceKind::Res | DeviceKind::Cap | DeviceKind::Ind)
    }

    /// Parameter key holding the value of a two-terminal passive.
    fn value_key(self) -> Option<&'static str> {
        match self {
            DeviceKind::Res => Some("r"),
            DeviceKind::Cap => Some("c"),
            DeviceKind::Ind => Some("l"),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::Nmos => "nmos",
            DeviceKind::Pmos => "pmos",
            DeviceKind::Res => "res",
            DeviceKind::Cap => "cap",
            DeviceKind::Ind => "ind",
            DeviceKind::Subckt => "subckt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalRole {
    D,
    G,
    S,
    B,
    /// First terminal of a two-terminal passive.
    Pos,
    /// Second terminal of a two-terminal passive.
    Neg,
    /// Positional port of a subcircuit instance.
    Port(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    pub kind: DeviceKind,
    pub terminals: Vec<(TerminalRole, String)>,
    pub params: BTreeMap<String, f64>,
    /// Referenced subcircuit, for instances only.
    pub subckt: Option<String>,
}

impl Device {
    pub fn net(&self, role: TerminalRole) -> Option<&str> {
        self.terminals
            .iter()
            .find(|(r, _)| *r == role)
            .map(|(_, n)| n.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubcktDef {
    pub name: String,
    pub ports: Vec<String>,
    pub devices: Vec<Device>,
}

impl SubcktDef {
    /// Every net referenced by the subcircuit: ports first, then local nets in
    /// order of first appearance.
    pub fn nets(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for p in &self.ports {
            if seen.insert(p.clone()) {
                out.push(p.clone());
            }
        }
        for d in &self.devices {
            for (_, n) in &d.terminals {
                if seen.insert(n.clone()) {
                    out.push(n.clone());
                }
            }
        }
        out
    }

    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Design {
    /// Subcircuits in definition order. The implicit top level, when present,
    /// is stored under [`TOP_NAME`].
    pub subckts: IndexMap<String, SubcktDef>,
    pub top: String,
    pub global_nets: BTreeSet<String>,
}

impl Design {
    pub fn subckt(&self, name: &str) -> Option<&SubcktDef> {
        self.subckts.get(name)
    }

    pub fn top_subckt(&self) -> &SubcktDef {
        &self.subckts[&self.top]
    }

    /// Subcircuits reachable from `root`, children before parents.
    pub fn bottom_up_from(&self, root: &str) -> Vec<String> {
        fn visit(d: &Design, name: &str, seen: &mut BTreeSet<String>, out: &mut Vec<String>) {
            if !seen.insert(name.to_string()) {
                return;
            }
            if let Some(s) = d.subckts.get(name) {
                for dev in &s.devices {
                    if let Some(child) = &dev.subckt {
                        visit(d, child, seen, out);
                    }
                }
            }
            out.push(name.to_string());
        }
        let mut out = Vec::new();
        visit(self, root, &mut BTreeSet::new(), &mut out);
        out
    }

    /// Number of leaf devices in `name` after full flattening.
    pub fn flat_device_count(&self, name: &str) -> usize {
        self.subckts.get(name).map_or(0, |s| {
            s.devices
                .iter()
                .map(|d| match &d.subckt {
                    Some(c) => self.flat_device_count(c),
                    None => 1,
                })
                .sum()
        })
    }

    /// Serialize back to netlist text accepted by [`parse_netlist`].
    pub fn to_netlist(&self) -> String {
        let mut out = String::new();
        if !self.global_nets.is_empty() {
            let g: Vec<&str> = self.global_nets.iter().map(String::as_str).collect();
            let _ = writeln!(out, ".global {}", g.join(" "));
        }
        for (name, s) in &self.subckts {
            if name == TOP_NAME {
                continue;
            }
            let _ = writeln!(out, ".subckt {} {}", name, s.ports.join(" "));
            for d in &s.devices {
                let _ = writeln!(out, "{}", format_card(d));
            }
            let _ = writeln!(out, ".ends {}", name);
        }
        if let Some(top) = self.subckts.get(TOP_NAME) {
            for d in &top.devices {
                let _ = writeln!(out, "{}", format_card(d));
            }
        }
        out.push_str(".end\n");
        out
    }
}

fn format_card(d: &Device) -> String {
    let nets: Vec<&str> = d.terminals.iter().map(|(_, n)| n.as_str()).collect();
    let mut s = format!("{} {}", d.name, nets.join(" "));
    match d.kind {
        DeviceKind::Nmos | DeviceKind::Pmos => {
            s.push(' ');
            s.push_str(d.kind.as_str());
            for (k, v) in &d.params {
                let _ = write!(s, " {}={:e}", k, v);
            }
        }
        DeviceKind::Res | DeviceKind::Cap | DeviceKind::Ind => {
            let key = d.kind.value_key().unwrap();
            let _ = write!(s, " {:e}", d.params[key]);
            for (k, v) in d.params.iter().filter(|(k, _)| k.as_str() != key) {
                let _ = write!(s, " {}={:e}", k, v);
            }
        }
        DeviceKind::Subckt => {
            s.push(' ');
            s.push_str(d.subckt.as_deref().unwrap_or_default());
        }
    }
    s
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_card(self))
    }
}

/// Parse a numeric value with an optional SI suffix.
pub fn parse_value(tok: &str) -> std::result::Result<f64, String> {
    let lower = tok.to_ascii_lowercase();
    // Longest numeric prefix that parses as f64.
    let split = (1..=lower.len())
        .rev()
        .find(|&i| lower.is_char_boundary(i) && lower[..i].parse::<f64>().is_ok())
        .ok_or_else(|| format!("invalid numeric value `{}`", tok))?;
    let (num, suffix) = lower.split_at(split);
    let exp: i32 = match suffix {
        "" => 0,
        "f" => -15,
        "p" => -12,
        "n" => -9,
        "u" => -6,
        "m" => -3,
        "k" => 3,
        "meg" => 6,
        "g" => 9,
        other => return Err(format!("unknown value suffix `{}` in `{}`", other, tok)),
    };
    // Scale in decimal so "100n" is exactly the f64 nearest to 1e-7.
    let v = if num.contains('e') {
        num.parse::<f64>().map_err(|e| e.to_string())? * 10f64.powi(exp)
    } else {
        format!("{num}e{exp}").parse::<f64>().map_err(|e| e.to_string())?
    };
    if !v.is_finite() || v <= 0.0 {
        return Err(format!("value `{}` must be finite and positive", tok));
    }
    Ok(v)
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

#[derive(Debug)]
struct Token<'a> {
    text: &'a str,
    line: usize,
    col: usize,
}

struct Card<'a> {
    tokens: Vec<Token<'a>>,
}

fn logical_cards(text: &str) -> Result<Vec<Card<'_>>> {
    let mut cards: Vec<Card<'_>> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = match raw.find(';') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let trimmed = body.trim_start();
        if trimmed.is_empty() || trimmed.starts_with('*') {
            continue;
        }
        let continuation = trimmed.starts_with('+');
        let mut toks = Vec::new();
        let base = body.len() - trimmed.len();
        let start = if continuation { 1 } else { 0 };
        let mut i = start;
        let bytes = trimmed.as_bytes();
        while i < bytes.len() {
            while i < bytes.len() && bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            let s = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            if s < i {
                toks.push(Token { text: &trimmed[s..i], line, col: base + s + 1 });
            }
        }
        if continuation {
            match cards.last_mut() {
                Some(c) => c.tokens.extend(toks),
                None => {
                    return Err(NetlistError::Syntax {
                        line,
                        col: base + 1,
                        msg: "continuation line without a preceding card".into(),
                    }
                    .into())
                }
            }
        } else if !toks.is_empty() {
            cards.push(Card { tokens: toks });
        }
    }
    Ok(cards)
}

fn syntax(tok: &Token<'_>, msg: impl Into<String>) -> crate::error::Error {
    NetlistError::Syntax { line: tok.line, col: tok.col, msg: msg.into() }.into()
}

fn ident<'a>(tok: &Token<'a>) -> Result<&'a str> {
    if is_ident(tok.text) {
        Ok(tok.text)
    } else {
        Err(syntax(tok, format!("invalid identifier `{}`", tok.text)))
    }
}

fn parse_kv(tok: &Token<'_>) -> Result<(String, f64)> {
    let (k, v) = tok
        .text
        .split_once('=')
        .ok_or_else(|| syntax(tok, format!("expected key=value, found `{}`", tok.text)))?;
    if !is_ident(k) {
        return Err(syntax(tok, format!("invalid parameter name `{}`", k)));
    }
    let v = parse_value(v).map_err(|m| syntax(tok, m))?;
    Ok((k.to_ascii_lowercase(), v))
}

struct PendingInstance {
    device: String,
    target: String,
    arity: usize,
    line: usize,
    col: usize,
}

/// Parse netlist text into a resolved [`Design`].
pub fn parse_netlist(text: &str) -> Result<Design> {
    let cards = logical_cards(text)?;
    let mut subckts: IndexMap<String, SubcktDef> = IndexMap::new();
    let mut top = SubcktDef { name: TOP_NAME.into(), ports: vec![], devices: vec![] };
    let mut current: Option<SubcktDef> = None;
    let mut globals = BTreeSet::new();
    let mut pending = Vec::new();
    let mut ended = false;

    for card in &cards {
        let head = &card.tokens[0];
        if ended {
            return Err(syntax(head, "card after .end"));
        }
        let lower = head.text.to_ascii_lowercase();
        if let Some(directive) = lower.strip_prefix('.') {
            match directive {
                "subckt" => {
                    if current.is_some() {
                        return Err(syntax(head, "nested .subckt is not supported"));
                    }
                    let name_tok = card
                        .tokens
                        .get(1)
                        .ok_or_else(|| syntax(head, ".subckt requires a name"))?;
                    let name = ident(name_tok)?.to_string();
                    if subckts.contains_key(&name) {
                        return Err(NetlistError::Duplicate {
                            what: "subckt".into(),
                            name,
                            line: name_tok.line,
                        }
                        .into());
                    }
                    let mut ports = Vec::new();
                    for t in &card.tokens[2..] {
                        let p = ident(t)?.to_string();
                        if ports.contains(&p) {
                            return Err(syntax(t, format!("duplicate port `{}`", p)));
                        }
                        ports.push(p);
                    }
                    current = Some(SubcktDef { name, ports, devices: vec![] });
                }
                "ends" => {
                    let def = current.take().ok_or_else(|| syntax(head, ".ends without .subckt"))?;
                    if let Some(t) = card.tokens.get(1) {
                        if t.text != def.name {
                            return Err(syntax(
                                t,
                                format!(".ends `{}` does not close `{}`", t.text, def.name),
                            ));
                        }
                    }
                    subckts.insert(def.name.clone(), def);
                }
                "global" => {
                    for t in &card.tokens[1..] {
                        globals.insert(ident(t)?.to_string());
                    }
                }
                "end" => ended = true,
                _ => return Err(syntax(head, format!("unsupported directive `{}`", head.text))),
            }
            continue;
        }
        let scope = current.as_mut().unwrap_or(&mut top);
        let dev = parse_device(card, &mut pending)?;
        if scope.devices.iter().any(|d| d.name == dev.name) {
            return Err(NetlistError::Duplicate {
                what: "device".into(),
                name: dev.name,
                line: head.line,
            }
            .into());
        }
        scope.devices.push(dev);
    }
    if let Some(def) = current {
        return Err(NetlistError::Syntax {
            line: cards.last().map_or(1, |c| c.tokens[0].line),
            col: 1,
            msg: format!("missing .ends for `{}`", def.name),
        }
        .into());
    }

    for p in &pending {
        let target = subckts.get(&p.target).ok_or_else(|| NetlistError::Unresolved {
            name: p.target.clone(),
            line: p.line,
            col: p.col,
        })?;
        if target.ports.len() != p.arity {
            return Err(NetlistError::Arity {
                device: p.device.clone(),
                subckt: p.target.clone(),
                expected: target.ports.len(),
                found: p.arity,
                line: p.line,
            }
            .into());
        }
    }
    check_recursion(&subckts)?;

    let has_top = !top.devices.is_empty();
    let top_name = if has_top {
        TOP_NAME.to_string()
    } else {
        let instantiated: BTreeSet<&str> = subckts
            .values()
            .flat_map(|s| s.devices.iter().filter_map(|d| d.subckt.as_deref()))
            .collect();
        subckts
            .keys()
            .rev()
            .find(|k| !instantiated.contains(k.as_str()))
            .cloned()
            .ok_or(NetlistError::Empty)?
    };
    if has_top {
        subckts.insert(TOP_NAME.into(), top);
    }
    Ok(Design { subckts, top: top_name, global_nets: globals })
}

fn parse_device(
    card: &Card<'_>,
    pending: &mut Vec<PendingInstance>,
) -> Result<Device> {
    let head = &card.tokens[0];
    let name = ident(head)?.to_string();
    let first = name.chars().next().unwrap().to_ascii_uppercase();
    let toks = &card.tokens;
    match first {
        'M' => {
            if toks.len() < 6 {
                return Err(syntax(head, "MOS card needs 4 nets and a model"));
            }
            let mut terminals = Vec::with_capacity(4);
            for (role, t) in [TerminalRole::D, TerminalRole::G, TerminalRole::S, TerminalRole::B]
                .into_iter()
                .zip(&toks[1..5])
            {
                terminals.push((role, ident(t)?.to_string()));
            }
            let kind = match toks[5].text.to_ascii_lowercase().as_str() {
                "nmos" => DeviceKind::Nmos,
                "pmos" => DeviceKind::Pmos,
                _ => return Err(syntax(&toks[5], format!("unknown MOS model `{}`", toks[5].text))),
            };
            let mut params = BTreeMap::new();
            for t in &toks[6..] {
                let (k, v) = parse_kv(t)?;
                params.insert(k, v);
            }
            Ok(Device { name, kind, terminals, params, subckt: None })
        }
        'R' | 'C' | 'L' => {
            let kind = match first {
                'R' => DeviceKind::Res,
                'C' => DeviceKind::Cap,
                _ => DeviceKind::Ind,
            };
            if toks.len() < 4 {
                return Err(syntax(head, "two-terminal card needs 2 nets and a value"));
            }
            let terminals = vec![
                (TerminalRole::Pos, ident(&toks[1])?.to_string()),
                (TerminalRole::Neg, ident(&toks[2])?.to_string()),
            ];
            let mut params = BTreeMap::new();
            let key = kind.value_key().unwrap();
            let v = parse_value(toks[3].text).map_err(|m| syntax(&toks[3], m))?;
            params.insert(key.to_string(), v);
            for t in &toks[4..] {
                let (k, v) = parse_kv(t)?;
                params.insert(k, v);
            }
            Ok(Device { name, kind, terminals, params, subckt: None })
        }
        'X' => {
            if toks.len() < 2 {
                return Err(syntax(head, "instance card needs a subckt name"));
            }
            let target_tok = toks.last().unwrap();
            let target = ident(target_tok)?.to_string();
            let mut terminals = Vec::new();
            for (i, t) in toks[1..toks.len() - 1].iter().enumerate() {
                if t.text.contains('=') {
                    return Err(syntax(t, "instance parameters are not supported"));
                }
                terminals.push((TerminalRole::Port(i), ident(t)?.to_string()));
            }
            pending.push(PendingInstance {
                device: name.clone(),
                target: target.clone(),
                arity: terminals.len(),
                line: target_tok.line,
                col: target_tok.col,
            });
            Ok(Device {
                name,
                kind: DeviceKind::Subckt,
                terminals,
                params: BTreeMap::new(),
                subckt: Some(target),
            })
        }
        _ => Err(syntax(head, format!("unknown card type `{}`", head.text))),
    }
}

fn check_recursion(subckts: &IndexMap<String, SubcktDef>) -> Result<()> {
    // Three-colour DFS over the instantiation graph.
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    fn dfs<'a>(
        d: &'a IndexMap<String, SubcktDef>,
        n: &'a str,
        state: &mut BTreeMap<&'a str, u8>,
    ) -> Result<()> {
        match state.get(n) {
            Some(1) => return Err(NetlistError::Recursive { name: n.to_string() }.into()),
            Some(2) => return Ok(()),
            _ => {}
        }
        state.insert(n, 1);
        if let Some(s) = d.get(n) {
            for dev in &s.devices {
                if let Some(c) = dev.subckt.as_deref() {
                    dfs(d, c, state)?;
                }
            }
        }
        state.insert(n, 2);
        Ok(())
    }
    for name in subckts.keys() {
        dfs(subckts, name, &mut state)?;
    }
    Ok(())
}

/// Supply and ground nets: explicit overrides, `.global` nets, and the usual
/// naming conventions (`vdd*`, `vss*`, `gnd*`, `vcc*`, `avdd*`, `avss*`, `0`).
pub fn identify_supply_nets(design: &Design, overrides: &[String]) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = overrides.iter().cloned().collect();
    out.extend(design.global_nets.iter().cloned());
    for s in design.subckts.values() {
        for n in s.nets() {
            if is_supply_name(&n) {
                out.insert(n);
            }
        }
    }
    if out.is_empty() {
        warn!("no supply or ground nets identified; symmetry search will traverse every net");
    }
    out
}

pub fn is_supply_name(net: &str) -> bool {
    let l = net.to_ascii_lowercase();
    l == "0"
        || ["vdd", "vss", "gnd", "vcc", "avdd", "avss"]
            .iter()
            .any(|p| l.starts_with(p))
}
