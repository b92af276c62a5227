mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

use voltreg::grid::{build_matrices, voltage_map, Line, RadialNetwork};
use voltreg::plant::{constant_term, OperatingCondition};

use common::{dense_inverse, max_abs, random_network, seeded, shared_path_matrix};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrices_match_shared_path_sums(seed in any::<u64>(), n in 1usize..40) {
        let net = random_network(&mut seeded(seed), n);
        let m = build_matrices(&net).unwrap();
        let a = shared_path_matrix(&net, |l| l.x);
        let b = shared_path_matrix(&net, |l| l.r);
        prop_assert!(max_abs(&(m.a() - &a)) <= 1e-12);
        prop_assert!(max_abs(&(m.b() - &b)) <= 1e-12);
        prop_assert_eq!(m.a(), &m.a().transpose());
    }

    #[test]
    fn analytic_inverse_matches_dense(seed in any::<u64>(), n in 1usize..40) {
        let net = random_network(&mut seeded(seed), n);
        let m = build_matrices(&net).unwrap();
        let prod = m.a() * m.a_inv();
        prop_assert!(max_abs(&(prod - DMatrix::identity(n, n))) <= 1e-9);
        let dense = dense_inverse(m.a());
        let scale = max_abs(&dense).max(1.0);
        prop_assert!(max_abs(&(m.a_inv() - dense)) <= 1e-8 * scale);
    }

    #[test]
    fn inverse_sparsity_follows_tree(seed in any::<u64>(), n in 1usize..40) {
        let net = random_network(&mut seeded(seed), n);
        let m = build_matrices(&net).unwrap();
        for i in 1..=n {
            for j in 1..=n {
                let adjacent = i != j && (net.parent(i) == j || net.parent(j) == i);
                let entry = m.a_inv()[(i - 1, j - 1)];
                if i == j {
                    prop_assert!(entry > 0.0);
                } else if adjacent {
                    prop_assert!(entry < 0.0);
                } else {
                    prop_assert_eq!(entry, 0.0);
                }
            }
            let row = m.a_inv_row(i - 1);
            let mut cols: Vec<usize> = row.off.iter().map(|&(j, _)| j + 1).collect();
            cols.sort_unstable();
            prop_assert_eq!(cols, net.neighbors(i));
        }
    }

    #[test]
    fn spectrum_positive_and_lipschitz_consistent(seed in any::<u64>(), n in 1usize..30) {
        let net = random_network(&mut seeded(seed), n);
        let m = build_matrices(&net).unwrap();
        let eig = m.eigenvalues_a();
        prop_assert!(eig.iter().all(|&l| l > 0.0));
        let l = eig.iter().map(|&x| 2.0 * (x + 1.0 / x)).fold(0.0, f64::max);
        prop_assert!((m.lipschitz() - l).abs() <= 1e-12 * l);
        prop_assert!(m.lipschitz() >= 4.0);
        prop_assert_eq!(m.lambda_max_a(), *eig.last().unwrap());
    }

    #[test]
    fn relabeling_permutes_matrices(seed in any::<u64>(), n in 2usize..25) {
        let mut rng = seeded(seed);
        let net = random_network(&mut rng, n);
        let mut perm: Vec<usize> = (0..=n).collect();
        for i in (2..=n).rev() {
            perm.swap(i, rng.gen_range(1..=i));
        }
        let lines: Vec<Line> = net
            .lines()
            .iter()
            .map(|l| Line::new(perm[l.parent], perm[l.child], l.r, l.x))
            .collect();
        let relabeled = RadialNetwork::new(n, net.v0(), lines).unwrap();
        let (m, mp) = (build_matrices(&net).unwrap(), build_matrices(&relabeled).unwrap());
        for i in 1..=n {
            for j in 1..=n {
                let (pi, pj) = (perm[i] - 1, perm[j] - 1);
                prop_assert_eq!(m.a()[(i - 1, j - 1)], mp.a()[(pi, pj)]);
                prop_assert_eq!(m.b()[(i - 1, j - 1)], mp.b()[(pi, pj)]);
                prop_assert!((m.a_inv()[(i - 1, j - 1)] - mp.a_inv()[(pi, pj)]).abs() <= 1e-12);
            }
        }
        prop_assert!((m.lipschitz() - mp.lipschitz()).abs() <= 1e-9 * m.lipschitz());
    }

    #[test]
    fn voltage_map_is_affine(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = seeded(seed);
        let net = random_network(&mut rng, n);
        let m = build_matrices(&net).unwrap();
        let p = DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.1));
        let qu = DVector::from_fn(n, |_, _| rng.gen_range(-0.1..0.1));
        let cond = OperatingCondition::new(
            p.clone(),
            qu.clone(),
            DVector::from_element(n, 0.9),
            DVector::from_element(n, 1.1),
            DVector::from_element(n, -1.0),
            DVector::from_element(n, 1.0),
        )
        .unwrap();
        let d = constant_term(&m, &cond).unwrap();
        let q = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..0.5));
        let v = voltage_map(&m, &q, &d).unwrap();
        let a = shared_path_matrix(&net, |l| l.x);
        let b = shared_path_matrix(&net, |l| l.r);
        let expected = &a * (&q + &qu) + &b * &p + DVector::from_element(n, 1.0);
        prop_assert!((v - expected).amax() <= 1e-12);
    }
}

#[test]
fn chain_inverse_is_tridiagonal() {
    let xs = [0.1, 0.2, 0.4];
    let lines = (0..3).map(|k| Line::new(k, k + 1, 0.0, xs[k])).collect();
    let net = RadialNetwork::new(3, 1.0, lines).unwrap();
    let m = build_matrices(&net).unwrap();
    let expected = DMatrix::from_row_slice(
        3,
        3,
        &[
            0.5 * (1.0 / 0.1 + 1.0 / 0.2), -0.5 / 0.2, 0.0,
            -0.5 / 0.2, 0.5 * (1.0 / 0.2 + 1.0 / 0.4), -0.5 / 0.4,
            0.0, -0.5 / 0.4, 0.5 / 0.4,
        ],
    );
    assert!(max_abs(&(m.a_inv() - expected)) <= 1e-12);
}
