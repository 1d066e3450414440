use nrtr_core::render::{gen_random_forest, SynthSpec};
use nrtr_core::swc::{block_ground_truth, parse_swc, validate, write_swc, SwcForest, SwcNode, ROOT_PARENT};
use proptest::prelude::*;

/// Valid forests: each node's parent is an earlier node or the root marker.
fn arb_forest() -> impl Strategy<Value = SwcForest> {
    prop::collection::vec(
        (
            prop::array::uniform3(-500.0f64..500.0),
            0.0f64..20.0,
            -2i64..8,
            any::<prop::sample::Index>(),
            prop::bool::weighted(0.15),
        ),
        1..40,
    )
    .prop_map(|rows| {
        let nodes = rows
            .into_iter()
            .enumerate()
            .map(|(i, (c, r, tag, parent, root))| {
                let id = i as i64 * 3 + 1;
                let parent = if i == 0 || root { ROOT_PARENT } else { parent.index(i) as i64 * 3 + 1 };
                SwcNode::new(id, tag, c, r, parent)
            })
            .collect();
        SwcForest::new(nodes).unwrap()
    })
}

fn same_to_printed_precision(a: &SwcForest, b: &SwcForest) -> bool {
    a.len() == b.len()
        && a.nodes().iter().all(|n| {
            let m = b.node(n.id).unwrap();
            m.tag == n.tag
                && m.parent == n.parent
                && (m.radius - n.radius).abs() <= 5e-7
                && (0..3).all(|k| (m.center[k] - n.center[k]).abs() <= 5e-7)
        })
}

proptest! {
    #[test]
    fn write_then_parse_is_identity(f in arb_forest()) {
        let text = write_swc(&f);
        let back = parse_swc(&text).unwrap();
        prop_assert!(same_to_printed_precision(&f, &back));
        prop_assert_eq!(write_swc(&back), text.clone());
        let roots = text.lines().filter(|l| l.ends_with(" -1")).count();
        prop_assert_eq!(roots, f.roots().count());
    }

    #[test]
    fn validate_agrees_with_construction(
        rows in prop::collection::vec((-1i64..12, -2i64..12, -1.0f64..3.0), 0..12)
    ) {
        let nodes: Vec<SwcNode> = rows.iter().map(|&(id, parent, r)| SwcNode::new(id, 3, [0.0; 3], r, parent)).collect();
        let report = validate(&nodes);
        let built = SwcForest::new(nodes);
        prop_assert_eq!(report.is_valid(), built.is_ok());
        if let Ok(f) = built {
            prop_assert!(parse_swc(&write_swc(&f)).is_ok());
        }
    }

    #[test]
    fn disjoint_tiling_partitions_nodes(seed in 0u64..200) {
        let spec = SynthSpec { dims: [96, 96, 96], n_trees: 3, seed, ..SynthSpec::default() };
        let f = gen_random_forest(&spec).unwrap();
        let mut total = 0;
        for z in 0..3 {
            for y in 0..3 {
                for x in 0..3 {
                    let origin = [x as f64 * 32.0, y as f64 * 32.0, z as f64 * 32.0];
                    let set = block_ground_truth(&f, origin, 32);
                    prop_assert!(set.iter().all(|p| p.center.iter().all(|c| (0.0..1.0).contains(c))));
                    total += set.len();
                }
            }
        }
        prop_assert_eq!(total, f.len());
    }
}

#[test]
fn generated_forests_round_trip_exactly() {
    for seed in 0..30 {
        let f = gen_random_forest(&SynthSpec { seed, ..SynthSpec::default() }).unwrap();
        assert!(validate(f.nodes()).is_valid());
        assert_eq!(parse_swc(&write_swc(&f)).unwrap(), f);
    }
}

#[test]
fn dangling_parent_names_the_node() {
    let nodes = vec![SwcNode::new(1, 1, [0.0; 3], 1.0, ROOT_PARENT), SwcNode::new(2, 3, [1.0, 0.0, 0.0], 1.0, 99)];
    let report = validate(&nodes);
    assert_eq!(report.violations.len(), 1);
    assert!(report.to_string().contains("node 2"));
}
