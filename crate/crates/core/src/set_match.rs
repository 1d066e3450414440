//! Matching predicted point sets to ground truth and the resulting loss.
//!
//! Every point is treated as an axis-aligned cube with half-extent `r`, so
//! box regression and generalized IoU apply directly to `(a, b, c, r)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dual::{Dual, Real};
use crate::points::{PointSet, PredPoint};

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cannot match {m} ground-truth points to {n} predictions (need M <= N)")]
    Dimension { m: usize, n: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("cost matrix has {len} entries, expected {rows}x{cols}")]
    Shape { rows: usize, cols: usize, len: usize },
    #[error("loss weight `{name}` must be finite and >= 0, got {value}")]
    Weight { name: &'static str, value: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box3 {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3 {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        debug_assert!((0..3).all(|a| min[a] <= max[a]), "box corners out of order");
        Box3 { min, max }
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }
}

/// Cube centered at the point with half-extent `r`; corners are not clamped.
pub fn point_to_box(p: &PredPoint) -> Box3 {
    Box3::new(p.center.map(|c| c - p.radius), p.center.map(|c| c + p.radius))
}

fn giou_corners<R: Real>(amin: [R; 3], amax: [R; 3], bmin: [R; 3], bmax: [R; 3]) -> R {
    let zero = R::cst(0.0);
    let mut va = R::cst(1.0);
    let mut vb = R::cst(1.0);
    let mut inter = R::cst(1.0);
    let mut hull = R::cst(1.0);
    for k in 0..3 {
        va = va * (amax[k] - amin[k]).max(zero);
        vb = vb * (bmax[k] - bmin[k]).max(zero);
        inter = inter * (amax[k].min(bmax[k]) - amin[k].max(bmin[k])).max(zero);
        hull = hull * (amax[k].max(bmax[k]) - amin[k].min(bmin[k]));
    }
    let union = va + vb - inter;
    if union.val() <= 0.0 || hull.val() <= 0.0 {
        return zero;
    }
    inter / union - (hull - union) / hull
}

/// Generalized IoU; defined as 0 when both boxes have zero volume.
pub fn giou3(a: &Box3, b: &Box3) -> f64 {
    giou_corners(a.min, a.max, b.min, b.max)
}

fn point_giou<R: Real>(g: [R; 4], p: [R; 4]) -> R {
    let lo = |v: [R; 4]| [v[0] - v[3], v[1] - v[3], v[2] - v[3]];
    let hi = |v: [R; 4]| [v[0] + v[3], v[1] + v[3], v[2] + v[3]];
    giou_corners(lo(g), hi(g), lo(p), hi(p))
}

fn l1<R: Real>(g: [R; 4], p: [R; 4]) -> R {
    (0..4).fold(R::cst(0.0), |acc, k| acc + (g[k] - p[k]).abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_cls: f64,
    pub w_box: f64,
    pub w_iou: f64,
    /// Weight of the no-object classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_cls: 1.0,
            w_box: 5.0,
            w_iou: 2.0,
            no_object: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), MatchError> {
        for (name, value) in [
            ("w_cls", self.w_cls),
            ("w_box", self.w_box),
            ("w_iou", self.w_iou),
            ("no_object", self.no_object),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(MatchError::Weight { name, value });
            }
        }
        Ok(())
    }
}

/// Matching cost between a ground-truth point and a prediction.
pub fn point_cost(gt: &PredPoint, pred: &PredPoint, w: &LossWeights) -> f64 {
    let g = gt.geometry();
    let p = pred.geometry();
    -w.w_cls * pred.cls + w.w_box * l1(g, p) + w.w_iou * (1.0 - point_giou(g, p))
}

/// Row-major `rows x cols` matrix of matching costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        if data.len() != rows * cols {
            return Err(MatchError::Shape {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatchError::Shape {
                rows: rows.len(),
                cols,
                len: data.len(),
            });
        }
        CostMatrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective map from ground-truth index to prediction index.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `pairs[i]` is the prediction matched to ground-truth point `i`.
    pub pairs: Vec<usize>,
    pub total: f64,
}

impl Assignment {
    /// Sum of matched costs, accumulated in row order.
    pub fn cost_of(cost: &CostMatrix, pairs: &[usize]) -> f64 {
        pairs.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum()
    }

    /// Inverse map: for each prediction, the ground-truth index if matched.
    pub fn matched_gt(&self, n: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; n];
        for (i, &j) in self.pairs.iter().enumerate() {
            inv[j] = Some(i);
        }
        inv
    }
}

/// Minimum-cost injective assignment of rows to columns.
///
/// Among optimal assignments the lexicographically smallest one (comparing
/// the column of row 0, then row 1, ...) is returned.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    let (m, n) = (cost.rows, cost.cols);
    if m > n {
        return Err(MatchError::Dimension { m, n });
    }
    if let Some(k) = cost.data.iter().position(|v| !v.is_finite()) {
        return Err(MatchError::NonFinite {
            row: k / n,
            col: k % n,
        });
    }
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let (pairs, v) = shortest_augmenting(cost);
    let total = Assignment::cost_of(cost, &pairs);
    let scale = cost.data.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let tol = 1e-9 * scale;
    let lex = lexicographic_optimum(cost, &pairs, &v, tol);
    let lex_total = Assignment::cost_of(cost, &lex);
    if lex_total <= total + tol * m as f64 {
        Ok(Assignment {
            pairs: lex,
            total: lex_total,
        })
    } else {
        Ok(Assignment { pairs, total })
    }
}

/// Rectangular shortest augmenting path method with row and column
/// potentials (1-based internally). Returns the row assignment and the
/// column potentials, which are 0 on unmatched columns and <= 0 elsewhere.
fn shortest_augmenting(cost: &CostMatrix) -> (Vec<usize>, Vec<f64>) {
    let (m, n) = (cost.rows, cost.cols);
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = vec![0; m];
    for j in 1..=n {
        if p[j] != 0 {
            pairs[p[j] - 1] = j - 1;
        }
    }
    (pairs, v[1..].to_vec())
}

/// Walks rows in order, fixing each to its smallest column that still
/// admits a perfect matching on tight edges.
///
/// The problem is padded to `n x n` with zero-cost dummy rows; with the
/// optimal potentials an assignment is optimal iff all its edges are tight
/// (`c[i][j] - u[i] - v[j] == 0`), where dummy rows are tight exactly on
/// columns with `v[j] == 0`.
fn lexicographic_optimum(cost: &CostMatrix, pairs: &[usize], v: &[f64], tol: f64) -> Vec<usize> {
    let (m, n) = (cost.rows, cost.cols);
    // Row potentials from complementary slackness on the current matching.
    let u: Vec<f64> = (0..m).map(|i| cost.get(i, pairs[i]) - v[pairs[i]]).collect();
    let tight = |r: usize, c: usize| -> bool {
        if r < m {
            (cost.get(r, c) - u[r] - v[c]).abs() <= tol
        } else {
            v[c].abs() <= tol
        }
    };
    let mut row_of = vec![usize::MAX; n];
    let mut col_of = vec![usize::MAX; n];
    for (i, &j) in pairs.iter().enumerate() {
        col_of[i] = j;
        row_of[j] = i;
    }
    let mut next_dummy = m;
    for (c, r) in row_of.iter_mut().enumerate() {
        if *r == usize::MAX {
            *r = next_dummy;
            col_of[next_dummy] = c;
            next_dummy += 1;
        }
    }
    let mut locked_col = vec![false; n];
    for i in 0..m {
        for j in 0..n {
            if locked_col[j] || !tight(i, j) {
                continue;
            }
            if col_of[i] == j {
                locked_col[j] = true;
                break;
            }
            // Reassign i -> j; the row holding j must reach i's old column.
            let displaced = row_of[j];
            let freed = col_of[i];
            if let Some(path) = alternating_path(displaced, freed, j, i, &locked_col, &row_of, n, &tight) {
                // path: sequence of (row, new column)
                for &(r, c) in &path {
                    col_of[r] = c;
                    row_of[c] = r;
                }
                col_of[i] = j;
                row_of[j] = i;
                locked_col[j] = true;
                break;
            }
        }
        if !locked_col[col_of[i]] {
            locked_col[col_of[i]] = true;
        }
    }
    (0..m).map(|i| col_of[i]).collect()
}

/// Breadth-first search for an alternating path from `start` (a row that
/// lost its column) to the free column `target`, avoiding locked columns,
/// `skip_col` and `skip_row`. Returns the re-assignments along the path.
#[allow(clippy::too_many_arguments)]
fn alternating_path(
    start: usize,
    target: usize,
    skip_col: usize,
    skip_row: usize,
    locked_col: &[bool],
    row_of: &[usize],
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
) -> Option<Vec<(usize, usize)>> {
    // parent_col[c] = row from which column c was reached
    let mut reached_from = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut seen_row = std::collections::HashSet::from([start]);
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if c == skip_col || locked_col[c] || reached_from[c] != usize::MAX || !tight(r, c) {
                continue;
            }
            reached_from[c] = r;
            if c == target {
                let mut path = Vec::new();
                let mut col = c;
                loop {
                    let row = reached_from[col];
                    path.push((row, col));
                    if row == start {
                        return Some(path);
                    }
                    // row currently holds some column that the previous step takes over
                    col = (0..n).find(|&k| row_of[k] == row).expect("matched row");
                }
            }
            let next = row_of[c];
            if next != skip_row && seen_row.insert(next) {
                queue.push_back(next);
            }
        }
    }
    None
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted classification term over all predictions.
    pub cls: f64,
    /// Weighted L1 term over matched pairs.
    pub boxes: f64,
    /// Weighted `1 − GIoU` term over matched pairs.
    pub giou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetLoss {
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
    /// d(total)/d(a, b, c, r, cls) for every prediction.
    pub grad: Vec<[f64; 5]>,
}

const PROB_FLOOR: f64 = 1e-12;

/// Loss terms for one prediction, given its match (if any).
fn prediction_terms<R: Real>(pred: [R; 5], gt: Option<[f64; 4]>, w: &LossWeights) -> [R; 3] {
    let floor = R::cst(PROB_FLOOR);
    let p = pred[4];
    match gt {
        Some(g) => {
            let g = g.map(R::cst);
            let geo = [pred[0], pred[1], pred[2], pred[3]];
            [
                -(R::cst(w.w_cls) * p.max(floor).ln()),
                R::cst(w.w_box) * l1(g, geo),
                R::cst(w.w_iou) * (R::cst(1.0) - point_giou(g, geo)),
            ]
        }
        None => [
            -(R::cst(w.w_cls * w.no_object) * (R::cst(1.0) - p).max(floor).ln()),
            R::cst(0.0),
            R::cst(0.0),
        ],
    }
}

/// Hungarian matching on [`point_cost`], then the training loss with its
/// exact gradient with respect to every prediction field.
pub fn set_loss(gt: &PointSet, pred: &PointSet, w: &LossWeights) -> Result<SetLoss, MatchError> {
    w.validate()?;
    let (m, n) = (gt.len(), pred.len());
    if m > n {
        return Err(MatchError::Dimension { m, n });
    }
    let mut data = Vec::with_capacity(m * n);
    for g in gt.iter() {
        for p in pred.iter() {
            data.push(point_cost(g, p, w));
        }
    }
    let cost = CostMatrix::new(m, n, data)?;
    let assignment = hungarian(&cost)?;
    let matched = assignment.matched_gt(n);

    let mut breakdown = LossBreakdown::default();
    let mut grad = Vec::with_capacity(n);
    for (j, p) in pred.iter().enumerate() {
        let fields = p.to_array();
        let duals: [Dual; 5] = std::array::from_fn(|k| Dual::var(fields[k], k));
        let g = matched[j].map(|i| gt.points[i].geometry());
        let [c, b, u] = prediction_terms(duals, g, w);
        breakdown.cls += c.v;
        breakdown.boxes += b.v;
        breakdown.giou += u.v;
        grad.push(std::array::from_fn(|k| c.d[k] + b.d[k] + u.d[k]));
    }
    breakdown.total = breakdown.cls + breakdown.boxes + breakdown.giou;
    Ok(SetLoss {
        breakdown,
        assignment,
        grad,
    })
}

/// Training loss for a fixed assignment, without gradients.
pub fn loss_with_assignment(gt: &PointSet, pred: &PointSet, assignment: &Assignment, w: &LossWeights) -> f64 {
    let matched = assignment.matched_gt(pred.len());
    pred.iter()
        .enumerate()
        .map(|(j, p)| {
            let g = matched[j].map(|i| gt.points[i].geometry());
            prediction_terms(p.to_array(), g, w).iter().sum::<f64>()
        })
        .sum()
}
