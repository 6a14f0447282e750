//! Constraint records, the versioned JSON document, and the post-hoc verifier.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Approx { score: f64 },
}

impl fmt::Display for MatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchKind::Exact => f.write_str("exact"),
            MatchKind::Approx { score } => write!(f, "approx({score})"),
        }
    }
}

/// Match between two members of an array, by member index.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct MemberMatch {
    pub i: usize,
    pub j: usize,
    #[serde(flatten)]
    pub kind: MatchKind,
}

#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Constraint {
    SymmetricPair {
        scope: String,
        a: String,
        b: String,
        axis: u32,
    },
    SelfSymmetric {
        scope: String,
        block: String,
        axis: u32,
    },
    SymmetricNets {
        scope: String,
        net_a: String,
        net_b: String,
        axis: u32,
    },
    ArrayGroup {
        scope: String,
        name: String,
        root: Vec<String>,
        /// Element names of each repeated structure.
        members: Vec<Vec<String>>,
        matches: Vec<MemberMatch>,
    },
    MatchBlocks {
        scope: String,
        a: String,
        b: String,
        #[serde(rename = "match")]
        kind: MatchKind,
    },
    CommonCentroid {
        scope: String,
        block: String,
        devices: Vec<String>,
    },
}

impl Constraint {
    pub fn scope(&self) -> &str {
        match self {
            Constraint::SymmetricPair { scope, .. }
            | Constraint::SelfSymmetric { scope, .. }
            | Constraint::SymmetricNets { scope, .. }
            | Constraint::ArrayGroup { scope, .. }
            | Constraint::MatchBlocks { scope, .. }
            | Constraint::CommonCentroid { scope, .. } => scope,
        }
    }

    pub fn axis(&self) -> Option<u32> {
        match self {
            Constraint::SymmetricPair { axis, .. }
            | Constraint::SelfSymmetric { axis, .. }
            | Constraint::SymmetricNets { axis, .. } => Some(*axis),
            _ => None,
        }
    }

    /// Same record with axis ids cleared; used to compare findings of
    /// different probes.
    pub fn without_axis(&self) -> Constraint {
        let mut c = self.clone();
        match &mut c {
            Constraint::SymmetricPair { axis, .. }
            | Constraint::SelfSymmetric { axis, .. }
            | Constraint::SymmetricNets { axis, .. } => *axis = 0,
            _ => {}
        }
        c
    }

    /// Put unordered fields in canonical order.
    pub fn canonical(mut self) -> Constraint {
        match &mut self {
            Constraint::SymmetricPair { a, b, .. } | Constraint::MatchBlocks { a, b, .. } => {
                if b < a {
                    std::mem::swap(a, b);
                }
            }
            Constraint::SymmetricNets { net_a, net_b, .. } => {
                if net_b < net_a {
                    std::mem::swap(net_a, net_b);
                }
            }
            Constraint::ArrayGroup { root, members, matches, .. } => {
                root.sort();
                for m in members.iter_mut() {
                    m.sort();
                }
                let mut idx: Vec<usize> = (0..members.len()).collect();
                idx.sort_by(|&x, &y| members[x].cmp(&members[y]));
                let mut pos = vec![0; idx.len()];
                for (new, &old) in idx.iter().enumerate() {
                    pos[old] = new;
                }
                *members = idx.iter().map(|&i| members[i].clone()).collect();
                for m in matches.iter_mut() {
                    let (i, j) = (pos[m.i], pos[m.j]);
                    m.i = i.min(j);
                    m.j = i.max(j);
                }
                matches.sort_by_key(|x| (x.i, x.j));
                matches.dedup_by(|x, y| x.i == y.i && x.j == y.j);
            }
            Constraint::CommonCentroid { devices, .. } => devices.sort(),
            Constraint::SelfSymmetric { .. } => {}
        }
        self
    }

    fn rank(&self) -> u8 {
        match self {
            Constraint::ArrayGroup { .. } => 0,
            Constraint::SymmetricPair { .. } => 1,
            Constraint::SelfSymmetric { .. } => 2,
            Constraint::SymmetricNets { .. } => 3,
            Constraint::MatchBlocks { .. } => 4,
            Constraint::CommonCentroid { .. } => 5,
        }
    }

    fn sort_key(&self) -> (String, u8, String) {
        (self.scope().to_string(), self.rank(), serde_json::to_string(self).unwrap_or_default())
    }
}

/// Symmetry axis; `parent` links nested axes (array members).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Axis {
    pub id: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent: Option<u32>,
    pub scope: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub version: u32,
    pub constraints: Vec<Constraint>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub axes: Vec<Axis>,
}

impl ConstraintSet {
    pub fn new() -> Self {
        ConstraintSet { version: SCHEMA_VERSION, constraints: Vec::new(), axes: Vec::new() }
    }

    pub fn push(&mut self, c: Constraint) {
        self.constraints.push(c);
    }

    /// Sort and deduplicate.
    pub fn canonicalize(&mut self) {
        let mut cs: Vec<Constraint> = self.constraints.drain(..).map(Constraint::canonical).collect();
        cs.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()).then(a.partial_cmp(b).unwrap_or(Ordering::Equal)));
        cs.dedup();
        self.constraints = cs;
        self.axes.sort();
        self.axes.dedup();
    }

    pub fn to_json(&self) -> String {
        let mut c = self.clone();
        c.canonicalize();
        serde_json::to_string(&c).expect("constraint set serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        let mut c = self.clone();
        c.canonicalize();
        serde_json::to_string_pretty(&c).expect("constraint set serializes")
    }

    pub fn from_json(text: &str) -> Result<ConstraintSet> {
        let c: ConstraintSet = serde_json::from_str(text)?;
        if c.version != SCHEMA_VERSION {
            return Err(crate::error::Error::Model(format!(
                "constraint schema version {} unsupported (expected {SCHEMA_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    pub fn in_scope<'a>(&'a self, scope: &'a str) -> impl Iterator<Item = &'a Constraint> + 'a {
        self.constraints.iter().filter(move |c| c.scope() == scope)
    }
}

/// Per-constraint outcome of [`verify`](crate::symmetry::verify).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Consistent,
    Inconsistent { reason: String },
    Stale { missing: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyEntry {
    pub constraint: Constraint,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub entries: Vec<VerifyEntry>,
}

impl VerifyReport {
    pub fn inconsistent(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e.verdict, Verdict::Inconsistent { .. })).count()
    }

    pub fn stale(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e.verdict, Verdict::Stale { .. })).count()
    }

    /// 0 when clean, 2 on any inconsistency, 3 on stale references only.
    pub fn exit_code(&self) -> i32 {
        if self.inconsistent() > 0 {
            2
        } else if self.stale() > 0 {
            3
        } else {
            0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(a: &str, b: &str) -> Constraint {
        Constraint::SymmetricPair { scope: "s".into(), a: a.into(), b: b.into(), axis: 1 }
    }

    #[test]
    fn empty_set_json() {
        assert_eq!(ConstraintSet::new().to_json(), r#"{"version":1,"constraints":[]}"#);
    }

    #[test]
    fn duplicates_collapse() {
        let mut s = ConstraintSet::new();
        s.push(pair("R1", "R2"));
        s.push(pair("R2", "R1"));
        s.canonicalize();
        assert_eq!(s.constraints, vec![pair("R1", "R2")]);
    }

    #[test]
    fn round_trip() {
        let mut s = ConstraintSet::new();
        s.push(pair("C1", "C2"));
        s.push(Constraint::ArrayGroup {
            scope: "s".into(),
            name: "Array1".into(),
            root: vec!["n".into()],
            members: vec![vec!["M2".into()], vec!["M1".into()]],
            matches: vec![MemberMatch { i: 0, j: 1, kind: MatchKind::Approx { score: 0.75 } }],
        });
        s.push(Constraint::MatchBlocks {
            scope: "s".into(),
            a: "X2".into(),
            b: "X1".into(),
            kind: MatchKind::Exact,
        });
        s.axes.push(Axis { id: 1, parent: None, scope: "s".into() });
        let text = s.to_json();
        let back = ConstraintSet::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        s.canonicalize();
        assert_eq!(back, s);
    }

    #[test]
    fn exit_codes() {
        let mut r = VerifyReport::default();
        assert_eq!(r.exit_code(), 0);
        r.entries.push(VerifyEntry { constraint: pair("a", "b"), verdict: Verdict::Stale { missing: vec!["a".into()] } });
        assert_eq!(r.exit_code(), 3);
        r.entries.push(VerifyEntry {
            constraint: pair("a", "b"),
            verdict: Verdict::Inconsistent { reason: "x".into() },
        });
        assert_eq!(r.exit_code(), 2);
    }
}
