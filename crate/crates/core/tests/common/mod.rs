#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voltreg::control::ControllerParams;
use voltreg::generator::{generate_feeder, GeneratedFeeder, GeneratorSpec};
use voltreg::grid::{build_matrices, Line, LinearModel, RadialNetwork};
use voltreg::plant::OperatingCondition;

/// Random tree on buses `0..=n` with random labels; bus `k` attaches to a
/// uniformly chosen earlier bus.
pub fn random_network(rng: &mut ChaCha8Rng, n: usize) -> RadialNetwork {
    let mut labels: Vec<usize> = (1..=n).collect();
    for i in (1..n).rev() {
        labels.swap(i, rng.gen_range(0..=i));
    }
    let mut lines = Vec::with_capacity(n);
    for k in 0..n {
        let p = rng.gen_range(0..=k);
        let parent = if p == 0 { 0 } else { labels[p - 1] };
        let r = rng.gen_range(0.0..0.1);
        let x = rng.gen_range(0.01..0.2);
        lines.push(Line::new(parent, labels[k], r, x));
    }
    RadialNetwork::new(n, 1.0, lines).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn path_to_root(net: &RadialNetwork, mut b: usize) -> Vec<usize> {
    let mut path = Vec::new();
    while b != 0 {
        path.push(b);
        b = net.parent(b);
    }
    path
}

/// `2 Σ w(line)` over the lines shared by the feeder paths of `i` and `j`.
pub fn shared_path_matrix(net: &RadialNetwork, w: impl Fn(&Line) -> f64) -> DMatrix<f64> {
    let n = net.bus_count();
    let paths: Vec<Vec<usize>> = (1..=n).map(|b| path_to_root(net, b)).collect();
    DMatrix::from_fn(n, n, |i, j| {
        paths[i]
            .iter()
            .filter(|b| paths[j].contains(b))
            .map(|&b| 2.0 * w(net.feeding_line(b)))
            .sum()
    })
}

pub fn dense_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().try_inverse().unwrap()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc: f64, x| acc.max(x.abs()))
}

/// Instances used for the step-size certificates: small capacity so that
/// the capacity multipliers become active.
pub fn theorem1_spec(n: usize) -> GeneratorSpec {
    format!("tree,N={n},max_children=3,x=0.05:0.15,r=0.025:0.075,load=1.5,margin=0.03,qlim=0.01")
        .parse()
        .unwrap()
}

pub fn theorem1_instance(n: usize, seed: u64) -> (GeneratedFeeder, LinearModel) {
    let g = generate_feeder(&theorem1_spec(n).with_seed(seed)).unwrap();
    let m = build_matrices(&g.network).unwrap();
    (g, m)
}

/// `α = 1/L`, `β = ε / (4 N^{3/2} L)`.
pub fn theorem1_steps(model: &LinearModel, eps: f64) -> (f64, f64) {
    let l = model.lipschitz();
    let n = model.dim() as f64;
    (1.0 / l, eps / (4.0 * n.powf(1.5) * l))
}

pub fn theorem1_vclb(model: &LinearModel, eps: f64) -> ControllerParams {
    let (a, b) = theorem1_steps(model, eps);
    ControllerParams::vclb(a, b)
}

/// Euclidean distance of `(q, v)` to the box product.
pub fn fes_oracle(q: &DVector<f64>, v: &DVector<f64>, c: &OperatingCondition) -> f64 {
    let d = |x: f64, lo: f64, hi: f64| if x < lo { lo - x } else if x > hi { x - hi } else { 0.0 };
    let mut s = 0.0;
    for k in 0..q.len() {
        s += d(q[k], c.q_min[k], c.q_max[k]).powi(2);
        s += d(v[k], c.v_min[k], c.v_max[k]).powi(2);
    }
    s.sqrt()
}

/// Largest capacity violation over buses.
pub fn capacity_violation(q: &[f64], c: &OperatingCondition) -> f64 {
    q.iter()
        .enumerate()
        .map(|(k, &x)| (c.q_min[k] - x).max(x - c.q_max[k]).max(0.0))
        .fold(0.0, f64::max)
}
