//! SWC neuron morphology files.
//!
//! Each data line holds seven whitespace-separated fields
//! `id tag x y z radius parent`; `#` starts a comment line and a parent of
//! `-1` marks a root. Coordinates use the continuous voxel frame in which
//! voxel `i` spans `[i, i + 1)`.

use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::cmp::Reverse;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::points::{PointSet, PredPoint};

pub const ROOT_PARENT: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwcNode {
    pub id: i64,
    /// Structure label; unknown codes are kept as-is.
    pub tag: i64,
    pub center: [f64; 3],
    pub radius: f64,
    pub parent: i64,
}

impl SwcNode {
    pub fn new(id: i64, tag: i64, center: [f64; 3], radius: f64, parent: i64) -> Self {
        SwcNode {
            id,
            tag,
            center,
            radius,
            parent,
        }
    }

    pub fn is_root(&self) -> bool {
        self.parent == ROOT_PARENT
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NonPositiveId { id: i64 },
    DuplicateId { id: i64 },
    NegativeRadius { id: i64 },
    NonFinite { id: i64 },
    SelfParent { id: i64 },
    DanglingParent { id: i64, parent: i64 },
    /// Ids on a parent cycle, smallest first.
    Cycle { ids: Vec<i64> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveId { id } => write!(f, "node {id}: id must be >= 1"),
            Violation::DuplicateId { id } => write!(f, "node {id}: duplicate id"),
            Violation::NegativeRadius { id } => write!(f, "node {id}: negative radius"),
            Violation::NonFinite { id } => write!(f, "node {id}: non-finite coordinate or radius"),
            Violation::SelfParent { id } => write!(f, "node {id}: is its own parent"),
            Violation::DanglingParent { id, parent } => {
                write!(f, "node {id}: parent {parent} does not exist")
            }
            Violation::Cycle { ids } => write!(f, "parent cycle through nodes {ids:?}"),
        }
    }
}

/// Every invariant violation found in a node list; empty iff valid.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SwcError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid forest:\n{0}")]
    Structure(ValidationReport),
}

/// Checks all forest invariants on an arbitrary node list.
pub fn validate(nodes: &[SwcNode]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut index: HashMap<i64, usize> = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if n.id < 1 {
            violations.push(Violation::NonPositiveId { id: n.id });
        }
        if index.insert(n.id, i).is_some() {
            violations.push(Violation::DuplicateId { id: n.id });
        }
        if !(n.center.iter().all(|c| c.is_finite()) && n.radius.is_finite()) {
            violations.push(Violation::NonFinite { id: n.id });
        } else if n.radius < 0.0 {
            violations.push(Violation::NegativeRadius { id: n.id });
        }
    }
    for n in nodes {
        if n.parent == n.id {
            violations.push(Violation::SelfParent { id: n.id });
        } else if n.parent != ROOT_PARENT && !index.contains_key(&n.parent) {
            violations.push(Violation::DanglingParent {
                id: n.id,
                parent: n.parent,
            });
        }
    }
    // Walk parent chains; 0 = unseen, 1 = on the current path, 2 = done.
    let mut state: HashMap<i64, u8> = HashMap::with_capacity(nodes.len());
    for n in nodes {
        if state.get(&n.id).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut cur = n.id;
        loop {
            match state.get(&cur).copied().unwrap_or(0) {
                2 => break,
                1 => {
                    let start = path.iter().position(|&p| p == cur).expect("cycle node on path");
                    let mut ids: Vec<i64> = path[start..].to_vec();
                    let min_pos = ids.iter().enumerate().min_by_key(|(_, &v)| v).map(|(i, _)| i).unwrap_or(0);
                    ids.rotate_left(min_pos);
                    if ids.len() > 1 {
                        violations.push(Violation::Cycle { ids });
                    }
                    break;
                }
                _ => {
                    state.insert(cur, 1);
                    path.push(cur);
                    let Some(&i) = index.get(&cur) else { break };
                    let parent = nodes[i].parent;
                    if parent == ROOT_PARENT || !index.contains_key(&parent) {
                        break;
                    }
                    cur = parent;
                }
            }
        }
        for p in path {
            state.insert(p, 2);
        }
    }
    ValidationReport { violations }
}

/// A valid set of rooted trees.
#[derive(Clone, Debug, PartialEq)]
pub struct SwcForest {
    nodes: Vec<SwcNode>,
    index: HashMap<i64, usize>,
    children: BTreeMap<i64, Vec<i64>>,
}

impl SwcForest {
    pub fn new(nodes: Vec<SwcNode>) -> Result<Self, SwcError> {
        let report = validate(&nodes);
        if !report.is_valid() {
            return Err(SwcError::Structure(report));
        }
        let index = nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let mut children: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
        for n in &nodes {
            if !n.is_root() {
                children.entry(n.parent).or_default().push(n.id);
            }
        }
        for c in children.values_mut() {
            c.sort_unstable();
        }
        Ok(SwcForest {
            nodes,
            index,
            children,
        })
    }

    pub fn empty() -> Self {
        SwcForest::new(Vec::new()).expect("empty forest is valid")
    }

    pub fn nodes(&self) -> &[SwcNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: i64) -> Option<&SwcNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    /// Child ids of `id`, ascending.
    pub fn children(&self, id: i64) -> &[i64] {
        self.children.get(&id).map_or(&[], |c| c.as_slice())
    }

    pub fn roots(&self) -> impl Iterator<Item = &SwcNode> {
        self.nodes.iter().filter(|n| n.is_root())
    }

    /// Parent-child pairs `(parent, child)`.
    pub fn edges(&self) -> impl Iterator<Item = (&SwcNode, &SwcNode)> {
        self.nodes
            .iter()
            .filter(|n| !n.is_root())
            .map(|n| (&self.nodes[self.index[&n.parent]], n))
    }

    /// Nodes with every parent before its children; ties by ascending id.
    pub fn topological_order(&self) -> Vec<&SwcNode> {
        let mut heap: BinaryHeap<Reverse<i64>> = self.roots().map(|n| Reverse(n.id)).collect();
        let mut out = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = heap.pop() {
            out.push(&self.nodes[self.index[&id]]);
            heap.extend(self.children(id).iter().map(|&c| Reverse(c)));
        }
        out
    }

    /// Applies `f` to every node's center and radius.
    pub fn map_geometry(&self, mut f: impl FnMut([f64; 3], f64) -> ([f64; 3], f64)) -> Self {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let (center, radius) = f(n.center, n.radius);
                SwcNode { center, radius, ..*n }
            })
            .collect();
        SwcForest::new(nodes).expect("geometry changes keep topology")
    }

    /// Disjoint union; ids of `other` are shifted past this forest's ids.
    pub fn union(&self, other: &SwcForest) -> Self {
        let offset = self.nodes.iter().map(|n| n.id).max().unwrap_or(0);
        let mut nodes = self.nodes.clone();
        nodes.extend(other.nodes.iter().map(|n| SwcNode {
            id: n.id + offset,
            parent: if n.is_root() { ROOT_PARENT } else { n.parent + offset },
            ..*n
        }));
        SwcForest::new(nodes).expect("shifted union is valid")
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, name: &str, line: usize) -> Result<T, SwcError> {
    s.parse().map_err(|_| SwcError::Parse {
        line,
        msg: format!("field `{name}` is not numeric: `{s}`"),
    })
}

/// Parses node lines without checking forest invariants.
pub fn parse_nodes(text: &str) -> Result<Vec<SwcNode>, SwcError> {
    let mut nodes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(SwcError::Parse {
                line,
                msg: format!("expected 7 fields, found {}", fields.len()),
            });
        }
        nodes.push(SwcNode {
            id: parse_field(fields[0], "id", line)?,
            tag: parse_field(fields[1], "tag", line)?,
            center: [
                parse_field(fields[2], "x", line)?,
                parse_field(fields[3], "y", line)?,
                parse_field(fields[4], "z", line)?,
            ],
            radius: parse_field(fields[5], "radius", line)?,
            parent: parse_field(fields[6], "parent", line)?,
        });
    }
    Ok(nodes)
}

pub fn parse_swc(text: &str) -> Result<SwcForest, SwcError> {
    SwcForest::new(parse_nodes(text)?)
}

/// Formats the forest parents-first with six decimals per coordinate.
pub fn write_swc(forest: &SwcForest) -> String {
    let mut out = String::from("# id type x y z radius parent\n");
    for n in forest.topological_order() {
        writeln!(
            out,
            "{} {} {:.6} {:.6} {:.6} {:.6} {}",
            n.id, n.tag, n.center[0], n.center[1], n.center[2], n.radius, n.parent
        )
        .expect("writing to a String cannot fail");
    }
    out
}

/// Ground-truth points for the block `[origin, origin + size)³`, normalized
/// by `size`.
pub fn block_ground_truth(forest: &SwcForest, origin: [f64; 3], size: usize) -> PointSet {
    assert!(size > 0, "block size must be positive");
    let s = size as f64;
    let points = forest
        .nodes()
        .iter()
        .filter(|n| (0..3).all(|a| n.center[a] >= origin[a] && n.center[a] < origin[a] + s))
        .map(|n| {
            PredPoint::new(
                [
                    (n.center[0] - origin[0]) / s,
                    (n.center[1] - origin[1]) / s,
                    (n.center[2] - origin[2]) / s,
                ],
                n.radius / s,
                1.0,
            )
        })
        .collect();
    PointSet::ground_truth(points)
}
