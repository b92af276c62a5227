mod common;

use proptest::prelude::*;

use voltreg::feeder::{emit_feeder, parse_feeder_str};
use voltreg::generator::{generate_feeder, interior_margin, GeneratorSpec, Topology};
use voltreg::grid::build_matrices;

#[test]
fn generated_instances_are_strictly_feasible() {
    for seed in 0..100u64 {
        let n = 5 + (seed as usize * 7) % 46;
        let mut spec = GeneratorSpec::tree(n, 3).with_seed(seed);
        spec.margin = 0.05;
        let g = generate_feeder(&spec).unwrap();
        let model = build_matrices(&g.network).unwrap();
        let m = interior_margin(&model, &g.condition, &g.seed_point);
        assert!(m >= 0.05, "seed {seed}, N = {n}: margin {m}");
    }
}

#[test]
fn paper_preset_shape() {
    let g = generate_feeder(&GeneratorSpec::paper()).unwrap();
    assert_eq!(g.network.bus_count(), 55);
    let model = build_matrices(&g.network).unwrap();
    let d = voltreg::plant::constant_term(&model, &g.condition).unwrap();
    // Without reactive support some bus starts below its band.
    assert!((0..55).any(|k| d[k] < g.condition.v_min[k]));
    let mut children = vec![0; 56];
    for l in g.network.lines() {
        children[l.parent] += 1;
    }
    assert!(children.iter().all(|&c| c <= 3));
}

#[test]
fn spec_strings() {
    let s: GeneratorSpec = "tree,N=12,max_children=2,x=0.1:0.2,margin=0.02".parse().unwrap();
    assert_eq!(s.buses, 12);
    assert_eq!(s.topology, Topology::RandomTree { max_children: 2 });
    assert_eq!(s.margin, 0.02);
    let c: GeneratorSpec = "chain,N=3,x=0.1|0.2".parse().unwrap();
    let g = generate_feeder(&c).unwrap();
    let xs: Vec<f64> = g.network.lines().iter().map(|l| l.x).collect();
    assert_eq!(xs, vec![0.1, 0.2, 0.1]);
    for bad in ["", "ring,N=3", "tree", "chain,N=3,max_children=2", "tree,N=3,foo=1", "tree,N=3,x=0.2:0.1"] {
        assert!(bad.parse::<GeneratorSpec>().is_err(), "{bad}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn emitted_feeders_parse_back(seed in any::<u64>(), n in 1usize..40, mc in 1usize..4) {
        let g = generate_feeder(&GeneratorSpec::tree(n, mc).with_seed(seed)).unwrap();
        let text = emit_feeder(&g.network, &g.condition);
        let (net, cond) = parse_feeder_str(&text).unwrap();
        prop_assert_eq!(&net, &g.network);
        prop_assert_eq!(&cond, &g.condition);
        prop_assert_eq!(emit_feeder(&net, &cond), text);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>(), n in 1usize..30) {
        let spec = GeneratorSpec::tree(n, 3).with_seed(seed);
        prop_assert_eq!(generate_feeder(&spec).unwrap(), generate_feeder(&spec).unwrap());
    }
}

#[test]
fn fixed_chain_reproduces_reference_matrix() {
    let spec: GeneratorSpec = "chain,N=2,r=0.1|0.05,x=0.2|0.1".parse().unwrap();
    let g = generate_feeder(&spec).unwrap();
    let m = build_matrices(&g.network).unwrap();
    let expected = nalgebra::DMatrix::from_row_slice(2, 2, &[0.4, 0.4, 0.4, 0.6]);
    assert!((m.a() - expected).amax() <= 1e-15);
}
