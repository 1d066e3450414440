//! Turning predicted point sets into SWC forests.
//!
//! Points above the class threshold are lifted from block-normalized to
//! absolute voxel coordinates, near-duplicates from overlapping blocks are
//! merged, and a Euclidean minimum spanning tree pruned at long jumps gives
//! the tree structure.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::points::{PointSet, PredPoint};
use crate::swc::{SwcForest, SwcNode, ROOT_PARENT};

/// Tag written for reconstructed nodes (SWC "undefined").
pub const NEUTRAL_TAG: i64 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPoint {
    pub center: [f64; 3],
    pub radius: f64,
    pub cls: f64,
    /// Index of the block the point came from (lowest one after merging).
    pub block: usize,
}

/// Points of one block together with the block's placement.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockPoints {
    pub origin: [f64; 3],
    pub size: f64,
    pub points: Vec<PredPoint>,
}

/// Keeps points with `cls >= threshold`.
pub fn filter_points(set: &PointSet, threshold: f64) -> Vec<PredPoint> {
    set.iter().filter(|p| p.cls >= threshold).copied().collect()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum()
}

fn cell_of(p: [f64; 3], cell: f64) -> [i64; 3] {
    p.map(|c| (c / cell).floor() as i64)
}

/// Pairs `(d², i, j)` with `i < j` and distance at most `eps`.
fn close_pairs(points: &[(GlobalPoint, f64)], eps: f64) -> Vec<(f64, usize, usize)> {
    let cell = eps.max(1e-6);
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, (p, _)) in points.iter().enumerate() {
        grid.entry(cell_of(p.center, cell)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let eps2 = eps * eps;
    for (i, (p, _)) in points.iter().enumerate() {
        let c = cell_of(p.center, cell);
        for dz in -1..=1 {
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(bucket) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                        continue;
                    };
                    for &j in bucket {
                        if j > i {
                            let d2 = dist2(p.center, points[j].0.center);
                            if d2 <= eps2 {
                                pairs.push((d2, i, j));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    pairs
}

/// Denormalizes every block's points and merges pairs closer than `eps`
/// voxels: closest pairs first, each point merged at most once per pass,
/// passes repeated until no pair is within `eps`. A merged point takes the
/// cls-weighted mean center and radius and the larger cls.
pub fn merge_blocks(blocks: &[BlockPoints], eps: f64) -> Vec<GlobalPoint> {
    assert!(eps >= 0.0, "merge radius must be >= 0");
    // (point, accumulated weight)
    let mut points: Vec<(GlobalPoint, f64)> = blocks
        .iter()
        .enumerate()
        .flat_map(|(b, bp)| {
            bp.points.iter().map(move |p| {
                let g = GlobalPoint {
                    center: std::array::from_fn(|a| bp.origin[a] + p.center[a] * bp.size),
                    radius: p.radius * bp.size,
                    cls: p.cls,
                    block: b,
                };
                (g, p.cls)
            })
        })
        .collect();
    loop {
        let pairs = close_pairs(&points, eps);
        if pairs.is_empty() {
            break;
        }
        let mut gone = vec![false; points.len()];
        let mut touched = vec![false; points.len()];
        for (_, i, j) in pairs {
            if touched[i] || touched[j] {
                continue;
            }
            let ((a, wa), (b, wb)) = (points[i], points[j]);
            let total = wa + wb;
            let (fa, fb) = if total > 0.0 { (wa / total, wb / total) } else { (0.5, 0.5) };
            points[i] = (
                GlobalPoint {
                    center: std::array::from_fn(|k| fa * a.center[k] + fb * b.center[k]),
                    radius: fa * a.radius + fb * b.radius,
                    cls: a.cls.max(b.cls),
                    block: a.block.min(b.block),
                },
                total,
            );
            touched[i] = true;
            touched[j] = true;
            gone[j] = true;
        }
        let mut k = 0;
        points.retain(|_| {
            k += 1;
            !gone[k - 1]
        });
    }
    points.into_iter().map(|(p, _)| p).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    /// Edges longer than `tau · (r_i + r_j)` are cut.
    pub tau: f64,
    /// Edges longer than this many voxels are always cut.
    pub cap: f64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { tau: 3.0, cap: 30.0 }
    }
}

fn canonical_cmp(a: &GlobalPoint, b: &GlobalPoint) -> std::cmp::Ordering {
    a.center[0]
        .total_cmp(&b.center[0])
        .then(a.center[1].total_cmp(&b.center[1]))
        .then(a.center[2].total_cmp(&b.center[2]))
        .then(a.radius.total_cmp(&b.radius))
        .then(a.cls.total_cmp(&b.cls))
}

/// Dense Prim; returns MST edges `(i, j)`, ties broken by lowest index.
fn prim(points: &[GlobalPoint]) -> Vec<(usize, usize)> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut link = vec![usize::MAX; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    if n == 0 {
        return edges;
    }
    best[0] = 0.0;
    for _ in 0..n {
        let mut u = usize::MAX;
        for v in 0..n {
            if !in_tree[v] && (u == usize::MAX || best[v] < best[u]) {
                u = v;
            }
        }
        in_tree[u] = true;
        if link[u] != usize::MAX {
            edges.push((link[u], u));
        }
        for v in 0..n {
            if !in_tree[v] {
                let d = dist2(points[u].center, points[v].center);
                if d < best[v] {
                    best[v] = d;
                    link[v] = u;
                }
            }
        }
    }
    edges
}

/// Minimum spanning forest over point centers, cut at long edges, one SWC
/// tree per component rooted at its widest point.
///
/// Points are first sorted by `(x, y, z, r, cls)`, which fixes every
/// tie-break (root choice, child order, node ids) independently of the
/// input order. Node ids are assigned breadth-first from 1; trees appear in
/// order of their root.
pub fn build_forest(points: &[GlobalPoint], params: &ForestParams) -> SwcForest {
    assert!(params.tau > 0.0, "tau must be positive");
    let mut pts = points.to_vec();
    pts.sort_by(canonical_cmp);
    let n = pts.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j) in prim(&pts) {
        let len = dist2(pts[i].center, pts[j].center).sqrt();
        let limit = params.cap.min(params.tau * (pts[i].radius + pts[j].radius));
        if len <= limit {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    // components and their roots
    let mut comp = vec![usize::MAX; n];
    let mut roots = Vec::new();
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        let id = roots.len();
        let mut root = s;
        let mut stack = vec![s];
        comp[s] = id;
        while let Some(u) = stack.pop() {
            let better = pts[u].radius > pts[root].radius || (pts[u].radius == pts[root].radius && u < root);
            if better {
                root = u;
            }
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = id;
                    stack.push(v);
                }
            }
        }
        roots.push(root);
    }
    roots.sort_unstable();
    let mut nodes = Vec::with_capacity(n);
    let mut swc_id = vec![0i64; n];
    let mut next = 1;
    for &root in &roots {
        let mut queue = VecDeque::from([(root, usize::MAX)]);
        while let Some((u, parent)) = queue.pop_front() {
            swc_id[u] = next;
            next += 1;
            let parent_id = if parent == usize::MAX { ROOT_PARENT } else { swc_id[parent] };
            nodes.push(SwcNode::new(swc_id[u], NEUTRAL_TAG, pts[u].center, pts[u].radius, parent_id));
            for &v in &adj[u] {
                if v != parent {
                    queue.push_back((v, u));
                }
            }
        }
    }
    SwcForest::new(nodes).expect("spanning forest is a valid SWC forest")
}
