mod common;

use std::sync::OnceLock;

use hamavg::harness::w1_tree_distance;
use hamavg::model::{make_builtin, Builtin, DensitySpec, DriftSpec};
use hamavg::reeb::{build_reeb_graph, ReebGraph};
use hamavg::rng::PathRng;
use hamavg::Rect;
use proptest::prelude::*;

fn h2() -> &'static ReebGraph {
    static G: OnceLock<ReebGraph> = OnceLock::new();
    G.get_or_init(|| {
        let sys = make_builtin(Builtin::H2, DriftSpec::Zero, DensitySpec::Lebesgue, 0.5).unwrap();
        build_reeb_graph(&sys, Rect::square(3.0), 3.0, 128).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn w1_is_a_metric(seed in any::<u64>(), k in 1usize..6, l in 1usize..6, n in 1usize..6) {
        let g = h2();
        let mut rng = PathRng::new(seed, 0);
        let p = common::random_law(g, k, &mut rng);
        let q = common::random_law(g, l, &mut rng);
        let r = common::random_law(g, n, &mut rng);
        let d = |a, b| w1_tree_distance(a, b, g).unwrap();
        prop_assert!(d(&p, &p).abs() < 1e-12);
        prop_assert!((d(&p, &q) - d(&q, &p)).abs() < 1e-12);
        prop_assert!(d(&p, &r) <= d(&p, &q) + d(&q, &r) + 1e-12);
    }

    #[test]
    fn w1_between_point_masses_is_the_distance(seed in any::<u64>()) {
        let g = h2();
        let mut rng = PathRng::new(seed, 1);
        let (x, y) = (common::random_point(g, &mut rng), common::random_point(g, &mut rng));
        let w = w1_tree_distance(&common::marginal(vec![(x, 1.0)]), &common::marginal(vec![(y, 1.0)]), g).unwrap();
        prop_assert!((w - g.distance(x, y)).abs() < 1e-12);
    }

    #[test]
    fn w1_matches_brute_force(seed in any::<u64>(), k in 1usize..4, l in 1usize..4) {
        let g = h2();
        let mut rng = PathRng::new(seed, 2);
        let p = common::random_law(g, k, &mut rng);
        let q = common::random_law(g, l, &mut rng);
        let fast = w1_tree_distance(&p, &q, g).unwrap();
        prop_assert!((fast - common::brute_force_w1(&p, &q, g)).abs() < 1e-12);
    }
}
