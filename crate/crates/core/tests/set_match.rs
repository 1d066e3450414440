use nrtr_core::set_match::{
    giou3, hungarian, loss_with_assignment, point_to_box, set_loss, Box3, CostMatrix, LossWeights,
};
use nrtr_core::{PointSet, PredPoint};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exhaustive minimum over injective maps; ties keep the first map found,
/// which in this enumeration order is the lexicographically smallest.
fn brute_force(cost: &[Vec<f64>], n: usize) -> (Vec<usize>, f64) {
    fn rec(cost: &[Vec<f64>], n: usize, row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(Vec<usize>, f64)>) {
        if row == cost.len() {
            let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if best.as_ref().is_none_or(|(_, b)| total < *b) {
                *best = Some((cur.clone(), total));
            }
            return;
        }
        for j in 0..n {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                rec(cost, n, row + 1, used, cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = None;
    rec(cost, n, 0, &mut vec![false; n], &mut Vec::new(), &mut best);
    best.unwrap_or((Vec::new(), 0.0))
}

#[test]
fn hungarian_matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..400 {
        let n = rng.random_range(1..=7);
        let m = rng.random_range(0..=n);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let a = hungarian(&CostMatrix::new(m, n, rows.concat()).unwrap()).unwrap();
        let (pairs, total) = brute_force(&rows, n);
        assert_eq!(a.total, total, "{rows:?}");
        assert_eq!(a.pairs, pairs);
    }
}

#[test]
fn hungarian_breaks_ties_lexicographically() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..400 {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=n);
        let rows: Vec<Vec<f64>> = (0..m).map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect()).collect();
        let a = hungarian(&CostMatrix::new(m, n, rows.concat()).unwrap()).unwrap();
        let (pairs, total) = brute_force(&rows, n);
        assert_eq!(a.total, total, "{rows:?}");
        assert_eq!(a.pairs, pairs, "{rows:?}");
    }
}

fn point(rng: &mut ChaCha8Rng) -> PredPoint {
    PredPoint::new(
        [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
        rng.random_range(0.01..0.1),
        rng.random_range(0.05..0.95),
    )
}

#[test]
fn set_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let w = LossWeights::default();
    let mut checked = 0;
    for _ in 0..20 {
        let m = rng.random_range(0..4);
        let gt: Vec<PredPoint> = (0..m).map(|_| PredPoint { cls: 1.0, ..point(&mut rng) }).collect();
        let pred: Vec<PredPoint> = (0..5).map(|_| point(&mut rng)).collect();
        let gt = PointSet::ground_truth(gt);
        let l = set_loss(&gt, &PointSet::prediction(pred.clone()), &w).unwrap();
        let matched = l.assignment.matched_gt(pred.len());
        let eps = 1e-6;
        for j in 0..pred.len() {
            for k in 0..5 {
                // stay away from L1 and box-overlap kinks
                if let Some(i) = matched[j] {
                    if k < 4 {
                        let g = gt.points[i].geometry();
                        let p = pred[j].geometry();
                        if (g[k] - p[k]).abs() < 1e-3 {
                            continue;
                        }
                    }
                }
                let shift = |d: f64| {
                    let mut q = pred.clone();
                    let mut a = q[j].to_array();
                    a[k] += d;
                    q[j] = PredPoint::from_array(a);
                    loss_with_assignment(&gt, &PointSet::prediction(q), &l.assignment, &w)
                };
                let numeric = (shift(eps) - shift(-eps)) / (2.0 * eps);
                let analytic = l.grad[j][k];
                let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
                assert!(rel < 1e-4, "pred {j} field {k}: {analytic} vs {numeric}");
                checked += 1;
            }
        }
    }
    assert!(checked > 300);
}

#[test]
fn gt_order_does_not_change_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let w = LossWeights::default();
    for _ in 0..20 {
        let gt: Vec<PredPoint> = (0..4).map(|_| PredPoint { cls: 1.0, ..point(&mut rng) }).collect();
        let pred = PointSet::prediction((0..6).map(|_| point(&mut rng)).collect());
        let a = set_loss(&PointSet::ground_truth(gt.clone()), &pred, &w).unwrap();
        let mut rev = gt;
        rev.reverse();
        let b = set_loss(&PointSet::ground_truth(rev), &pred, &w).unwrap();
        assert!((a.breakdown.total - b.breakdown.total).abs() < 1e-12);
    }
}

#[test]
fn prediction_order_does_not_change_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let w = LossWeights::default();
    for _ in 0..20 {
        let gt = PointSet::ground_truth((0..3).map(|_| PredPoint { cls: 1.0, ..point(&mut rng) }).collect());
        let pred: Vec<PredPoint> = (0..6).map(|_| point(&mut rng)).collect();
        let a = set_loss(&gt, &PointSet::prediction(pred.clone()), &w).unwrap();
        let mut rotated = pred;
        rotated.rotate_left(2);
        let b = set_loss(&gt, &PointSet::prediction(rotated), &w).unwrap();
        assert!((a.breakdown.total - b.breakdown.total).abs() < 1e-12);
    }
}

fn arb_box() -> impl Strategy<Value = Box3> {
    (prop::array::uniform3(-1.0f64..1.0), prop::array::uniform3(0.0f64..1.0))
        .prop_map(|(lo, ext)| Box3::new(lo, [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2]]))
}

proptest! {
    #[test]
    fn giou_is_bounded_and_symmetric(a in arb_box(), b in arb_box()) {
        let g = giou3(&a, &b);
        prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
        prop_assert!((g - giou3(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn giou_equals_iou_for_nested_boxes(c in prop::array::uniform3(0.3f64..0.7), r in 0.01f64..0.2, s in 0.0f64..1.0) {
        let outer = point_to_box(&PredPoint::new(c, r, 1.0));
        let inner = point_to_box(&PredPoint::new(c, r * s, 1.0));
        let iou = inner.volume() / outer.volume();
        prop_assert!((giou3(&outer, &inner) - iou).abs() < 1e-9);
    }

    // Center coordinates only: for disjoint cubes, shrinking the radius
    // toward the target can lower GIoU by more than it saves in L1.
    #[test]
    fn moving_toward_gt_does_not_increase_loss(
        gc in prop::array::uniform3(0.2f64..0.8), gr in 0.02f64..0.1,
        pc in prop::array::uniform3(0.2f64..0.8), pr in 0.02f64..0.1,
        cls in 0.1f64..0.9, k in 0usize..3, t in 0.0f64..1.0,
    ) {
        let w = LossWeights::default();
        let gt = PointSet::ground_truth(vec![PredPoint::new(gc, gr, 1.0)]);
        let p = PredPoint::new(pc, pr, cls);
        let before = set_loss(&gt, &PointSet::prediction(vec![p]), &w).unwrap();
        let mut a = p.to_array();
        let g = gt.points[0].geometry();
        a[k] += t * (g[k] - a[k]);
        let moved = PointSet::prediction(vec![PredPoint::from_array(a)]);
        let after = loss_with_assignment(&gt, &moved, &before.assignment, &w);
        prop_assert!(after <= before.breakdown.total + 1e-12);
    }
}
