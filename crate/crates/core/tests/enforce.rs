use affine_fence::enforce::{enforce_signs, verify_margins, EnforceConfig, EnforceError};
use affine_fence::experiments::random_boxes;
use affine_fence::regions::{ConvexRegion, RegionSet};
use affine_fence::signs::{assign, ensure_unique, propagate_vertices, SignMap, SignMethod};
use affine_fence::trainer::initial_sign_map;
use affine_fence::verifier::certify_region;
use affine_fence::{Network, Regions};
use proptest::prelude::*;

fn max_param_gap(a: &Network, b: &Network) -> f64 {
    a.params().iter().zip(b.params()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn setup(d: usize, hidden: &[usize], n_regions: usize, seed: u64) -> (Network, Regions, SignMap) {
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let net = Network::init(&dims, 0.01, seed).unwrap();
    let regions = random_boxes(n_regions, d, seed ^ 0x5eed).unwrap();
    let map = initial_sign_map(&net, &regions, SignMethod::Majority).unwrap();
    (net, regions, map)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn enforcement_realises_the_map_or_leaves_net_alone(
        d in 1usize..=3,
        hidden in prop::collection::vec(4usize..=16, 1..=3),
        n_regions in 2usize..=4,
        margin in prop_oneof![Just(0.0), Just(0.02)],
        seed in any::<u64>(),
    ) {
        let (net, regions, map) = setup(d, &hidden, n_regions, seed);
        let cfg = EnforceConfig { margin, ..EnforceConfig::default() };
        match enforce_signs(&net, &regions, &map, &cfg) {
            Ok((out, rep)) => {
                let m = verify_margins(&out, &regions, &map, margin).unwrap();
                prop_assert!(m >= -1e-8, "margin {m:e}");
                prop_assert!((rep.min_margin - m).abs() < 1e-15);
                prop_assert!(rep.qp_failures.is_empty());
                // A second pass has nothing left to do.
                let (again, rep2) = enforce_signs(&out, &regions, &map, &cfg).unwrap();
                prop_assert!(rep2.total_shift <= 1e-9, "second shift {:e}", rep2.total_shift);
                prop_assert!(max_param_gap(&again, &out) <= 1e-9);
                if margin > 0.0 {
                    for r in &regions {
                        for v in r.vertices().iter_rows() {
                            prop_assert_eq!(&out.activation_pattern_at(v).unwrap(), map.get(&r.id).unwrap());
                        }
                    }
                }
            }
            Err(EnforceError::Failed(rep)) => prop_assert!(!rep.qp_failures.is_empty()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn parallel_solve_is_identical(seed in any::<u64>(), jobs in 2usize..=4) {
        let (net, regions, map) = setup(2, &[12, 12], 3, seed);
        let seq = enforce_signs(&net, &regions, &map, &EnforceConfig::default());
        let par = enforce_signs(&net, &regions, &map, &EnforceConfig { jobs, ..EnforceConfig::default() });
        match (seq, par) {
            (Ok((a, _)), Ok((b, _))) => prop_assert_eq!(a.params(), b.params()),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "sequential and parallel runs disagree on feasibility"),
        }
    }

    #[test]
    fn sign_assignment_is_deterministic_and_unique(seed in any::<u64>(), method in prop_oneof![Just(SignMethod::Majority), Just(SignMethod::Mean)]) {
        let (net, regions, _) = setup(2, &[8, 8], 4, seed);
        let pre = propagate_vertices(&net, &regions).unwrap();
        let a = ensure_unique(&assign(method, &pre), &pre).unwrap();
        let b = ensure_unique(&assign(method, &pre), &pre).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.all_distinct());
        // Already distinct maps come back unchanged.
        prop_assert_eq!(&ensure_unique(&a, &pre).unwrap(), &a);
    }
}

#[test]
fn duplicated_regions_get_distinct_patterns() {
    let net = Network::init(&[2, 32, 32, 1], 0.01, 3).unwrap();
    let base = random_boxes(8, 2, 9).unwrap();
    let regions: Vec<ConvexRegion<f64>> = (0..64)
        .map(|i| {
            let src = &base.regions()[(i * 5) % 8];
            ConvexRegion::new(format!("copy{i}"), src.vertices().clone()).unwrap()
        })
        .collect();
    let regions = RegionSet::new(regions).unwrap();
    let pre = propagate_vertices(&net, &regions).unwrap();
    let map = ensure_unique(&assign(SignMethod::Majority, &pre), &pre).unwrap();
    let pats: Vec<_> = map.entries().iter().map(|(_, p)| p).collect();
    for i in 0..pats.len() {
        for j in i + 1..pats.len() {
            assert_ne!(pats[i], pats[j], "regions {i} and {j}");
        }
    }
}

#[test]
fn enforced_boxes_certify() {
    let (net, regions, map) = setup(2, &[16, 16], 3, 21);
    let cfg = EnforceConfig { margin: 0.01, ..EnforceConfig::default() };
    let (out, _) = enforce_signs(&net, &regions, &map, &cfg).unwrap();
    for (i, r) in regions.iter().enumerate() {
        let rep = certify_region(&out, r, map.get(&r.id).unwrap(), 2000, i as u64).unwrap();
        assert!(rep.certified(), "{} not certified: {rep:?}", r.id);
        assert!(rep.affine_residual <= 1e-9);
    }
}
