use nrtr_core::metrics::{confusion, evaluate, scores, Confusion};
use nrtr_core::render::{gen_random_forest, rasterize_mask, Mask, SynthSpec};
use nrtr_core::swc::SwcForest;
use nrtr_core::train::Symmetry;
use proptest::prelude::*;

proptest! {
    #[test]
    fn fscore_matches_count_formula(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000) {
        let c = Confusion { tp, fp, fn_ };
        let s = scores(&c);
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        let direct = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
        prop_assert!((s.fscore - direct).abs() < 1e-12);
        if tp > 0.0 {
            prop_assert!(s.jaccard <= s.fscore + 1e-15);
            prop_assert!(s.jaccard <= s.precision.min(s.recall) + 1e-15);
        }
        for v in [s.precision, s.recall, s.fscore, s.jaccard] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn scores_are_invariant_under_cube_symmetries(s1 in 0u64..500, s2 in 0u64..500, sym in 0usize..48) {
        let dims = [24; 3];
        let spec = |seed| SynthSpec { dims, seed, nodes_per_tree: (4, 10), ..SynthSpec::default() };
        let a = rasterize_mask(&gen_random_forest(&spec(s1)).unwrap(), dims);
        let b = rasterize_mask(&gen_random_forest(&spec(s2)).unwrap(), dims);
        let t = Symmetry::from_id(sym).unwrap();
        let ta = Mask::from_data(dims, t.apply_grid(a.data(), 24));
        let tb = Mask::from_data(dims, t.apply_grid(b.data(), 24));
        prop_assert_eq!(confusion(&a, &b).unwrap(), confusion(&ta, &tb).unwrap());
    }
}

#[test]
fn self_evaluation_is_perfect_and_empty_prediction_is_zero() {
    let dims = [48; 3];
    let gt = gen_random_forest(&SynthSpec { dims, seed: 4, ..SynthSpec::default() }).unwrap();
    let r = evaluate(&gt, &gt, dims);
    assert_eq!((r.scores.precision, r.scores.recall, r.scores.fscore, r.scores.jaccard), (1.0, 1.0, 1.0, 1.0));
    let r = evaluate(&SwcForest::empty(), &gt, dims);
    assert_eq!((r.scores.precision, r.scores.recall, r.scores.fscore, r.scores.jaccard), (0.0, 0.0, 0.0, 0.0));
}

#[test]
fn doubled_radii_keep_full_recall() {
    let dims = [48; 3];
    for seed in 0..5 {
        let gt = gen_random_forest(&SynthSpec { dims, seed, ..SynthSpec::default() }).unwrap();
        let fat = gt.map_geometry(|c, r| (c, 2.0 * r));
        let r = evaluate(&fat, &gt, dims);
        assert_eq!(r.scores.recall, 1.0);
        assert!(r.scores.precision < 1.0);
    }
}
