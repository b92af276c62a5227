//! Parametric feeder generator producing strictly feasible instances.
//!
//! Loads are drawn first. The seed setpoint `q̂` is the smallest uniform
//! injection that lifts every linear-model voltage to at least
//! `v_min + margin`; any box leaving less than `margin` of slack around
//! `(q̂, v(q̂))` is then widened.
//!
//! Specs are written as comma-separated strings:
//!
//! ```text
//! chain,N=2,x=0.2|0.1,r=0.1|0.05,load=0.4
//! tree,N=20,max_children=3,x=0.02:0.08,r=0.01:0.04,load=1.5,margin=0.02
//! paper
//! ```
//!
//! Impedances are a single value, a `lo:hi` uniform range, or a `|`-separated
//! list assigned to lines in order and cycled.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{build_matrices, GridError, Line, LinearModel, RadialNetwork};
use crate::plant::{constant_term, OperatingCondition, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("invalid generator spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("generated instance failed verification: {0}")]
    Verification(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Topology {
    Chain,
    /// Each new bus attaches to a uniformly chosen earlier bus that still has
    /// fewer than `max_children` children.
    RandomTree { max_children: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Impedance {
    Range(f64, f64),
    List(Vec<f64>),
}

impl Impedance {
    fn draw(&self, line: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Impedance::Range(lo, hi) => lo + (hi - lo) * rng.gen::<f64>(),
            Impedance::List(xs) => xs[line % xs.len()],
        }
    }

    fn parse(s: &str) -> Result<Self, GeneratorError> {
        let num = |t: &str| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| GeneratorError::Spec(format!("invalid number '{t}'")))
        };
        if let Some((lo, hi)) = s.split_once(':') {
            let (lo, hi) = (num(lo)?, num(hi)?);
            if !(lo <= hi) {
                return Err(GeneratorError::Spec(format!("empty range {s}")));
            }
            Ok(Impedance::Range(lo, hi))
        } else {
            Ok(Impedance::List(s.split('|').map(num).collect::<Result<_, _>>()?))
        }
    }
}

impl fmt::Display for Impedance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Impedance::Range(lo, hi) => write!(f, "{lo}:{hi}"),
            Impedance::List(xs) => {
                let parts: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join("|"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub buses: usize,
    pub topology: Topology,
    pub r: Impedance,
    pub x: Impedance,
    /// Total real consumption; bus `k` draws `load / N` times a factor
    /// uniform in `[0.5, 1.5]`.
    pub load: f64,
    /// Minimum slack of the seed point inside every box.
    pub margin: f64,
    /// Default capacity half-width.
    pub q_limit: f64,
    /// Default squared-voltage band.
    pub v_band: (f64, f64),
    pub v0: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn chain(buses: usize) -> Self {
        Self {
            buses,
            topology: Topology::Chain,
            r: Impedance::Range(0.01, 0.05),
            x: Impedance::Range(0.02, 0.1),
            load: 0.5,
            margin: 0.01,
            q_limit: 0.5,
            v_band: (0.95 * 0.95, 1.05 * 1.05),
            v0: 1.0,
            seed: 0,
        }
    }

    pub fn tree(buses: usize, max_children: usize) -> Self {
        Self {
            topology: Topology::RandomTree { max_children },
            ..Self::chain(buses)
        }
    }

    /// A 55-branch-bus radial feeder loaded so that the far end starts below
    /// the voltage band.
    pub fn paper() -> Self {
        Self {
            buses: 55,
            topology: Topology::RandomTree { max_children: 3 },
            r: Impedance::Range(0.015, 0.025),
            x: Impedance::Range(0.03, 0.05),
            load: 3.0,
            margin: 0.01,
            ..Self::chain(55)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::Spec(m));
        if self.buses == 0 {
            return bad("N must be positive".into());
        }
        if let Topology::RandomTree { max_children: 0 } = self.topology {
            return bad("max_children must be positive".into());
        }
        for (name, imp, strict) in [("x", &self.x, true), ("r", &self.r, false)] {
            let vals = match imp {
                Impedance::Range(lo, hi) => vec![*lo, *hi],
                Impedance::List(xs) if xs.is_empty() => return bad(format!("empty {name} list")),
                Impedance::List(xs) => xs.clone(),
            };
            if vals.iter().any(|&v| !v.is_finite() || v < 0.0 || (strict && v <= 0.0)) {
                return bad(format!("{name} values must be {}", if strict { "positive" } else { "non-negative" }));
            }
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad("margin must be non-negative".into());
        }
        if !(self.q_limit >= 0.0 && self.load.is_finite() && self.v0 > 0.0) {
            return bad("q_limit, load and v0 must be finite with q_limit >= 0 and v0 > 0".into());
        }
        if !(self.v_band.0 <= self.v_band.1) {
            return bad("empty voltage band".into());
        }
        Ok(())
    }
}

impl FromStr for GeneratorSpec {
    type Err = GeneratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(',').map(str::trim).filter(|p| !p.is_empty());
        let kind = parts.next().ok_or_else(|| GeneratorError::Spec("empty spec".into()))?;
        let mut spec = match kind {
            "chain" => Self::chain(1),
            "tree" => Self::tree(1, 3),
            "paper" => Self::paper(),
            other => return Err(GeneratorError::Spec(format!("unknown topology '{other}'"))),
        };
        let mut have_n = kind == "paper";
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| GeneratorError::Spec(format!("expected key=value, found '{part}'")))?;
            let num = || {
                v.parse::<f64>()
                    .map_err(|_| GeneratorError::Spec(format!("invalid value '{v}' for '{k}'")))
            };
            let int = || {
                v.parse::<usize>()
                    .map_err(|_| GeneratorError::Spec(format!("invalid value '{v}' for '{k}'")))
            };
            match k {
                "N" | "buses" => {
                    spec.buses = int()?;
                    have_n = true;
                }
                "max_children" => match &mut spec.topology {
                    Topology::RandomTree { max_children } => *max_children = int()?,
                    Topology::Chain => {
                        return Err(GeneratorError::Spec("max_children needs a tree".into()))
                    }
                },
                "x" => spec.x = Impedance::parse(v)?,
                "r" => spec.r = Impedance::parse(v)?,
                "load" => spec.load = num()?,
                "margin" => spec.margin = num()?,
                "qlim" => spec.q_limit = num()?,
                "v0" => spec.v0 = num()?,
                "vband" => {
                    let (lo, hi) = v
                        .split_once(':')
                        .ok_or_else(|| GeneratorError::Spec("vband expects lo:hi".into()))?;
                    let p = |t: &str| {
                        t.parse::<f64>()
                            .map_err(|_| GeneratorError::Spec(format!("invalid vband '{v}'")))
                    };
                    spec.v_band = (p(lo)?, p(hi)?);
                }
                other => return Err(GeneratorError::Spec(format!("unknown key '{other}'"))),
            }
        }
        if !have_n {
            return Err(GeneratorError::Spec("missing N".into()));
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFeeder {
    pub network: RadialNetwork,
    pub condition: OperatingCondition,
    /// Strictly interior reactive setpoint used in the construction.
    pub seed_point: DVector<f64>,
}

/// Smallest slack of `(q, A q + d)` inside the boxes; negative when outside.
pub fn interior_margin(model: &LinearModel, cond: &OperatingCondition, q: &DVector<f64>) -> f64 {
    let d = constant_term(model, cond).expect("dimensions agree");
    let v = model.a() * q + d;
    (0..cond.dim())
        .flat_map(|k| {
            [
                q[k] - cond.q_min[k],
                cond.q_max[k] - q[k],
                v[k] - cond.v_min[k],
                cond.v_max[k] - v[k],
            ]
        })
        .fold(f64::INFINITY, f64::min)
}

pub fn generate_feeder(spec: &GeneratorSpec) -> Result<GeneratedFeeder, GeneratorError> {
    spec.validate()?;
    let n = spec.buses;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Kept apart from the load-fluctuation stream, which uses stream 0.
    rng.set_stream(1);

    let mut child_count = vec![0usize; n + 1];
    let mut lines = Vec::with_capacity(n);
    for child in 1..=n {
        let parent = match spec.topology {
            Topology::Chain => child - 1,
            Topology::RandomTree { max_children } => {
                let open: Vec<usize> = (0..child).filter(|&b| child_count[b] < max_children).collect();
                open[rng.gen_range(0..open.len())]
            }
        };
        child_count[parent] += 1;
        let r = spec.r.draw(child - 1, &mut rng);
        let x = spec.x.draw(child - 1, &mut rng);
        lines.push(Line::new(parent, child, r, x));
    }
    let network = RadialNetwork::new(n, spec.v0, lines)?;
    let model = build_matrices(&network)?;

    let per_bus = spec.load / n as f64;
    let p = DVector::from_fn(n, |_, _| -per_bus * (0.5 + rng.gen::<f64>()));
    let mut cond = OperatingCondition::uniform(n, spec.v_band, (-spec.q_limit, spec.q_limit))?;
    cond.p = p;

    // Seed point: the smallest uniform injection lifting every voltage to
    // v_min + margin (zero when the unregulated voltages already clear it).
    let d = constant_term(&model, &cond)?;
    let row_sums = model.a() * DVector::from_element(n, 1.0);
    let c = (0..n)
        .map(|k| (cond.v_min[k] + spec.margin - d[k]) / row_sums[k])
        .fold(0.0, f64::max);
    let q_hat = DVector::from_element(n, c);
    let v_hat = model.a() * &q_hat + &d;

    // Widen by a hair more than the margin so the check below holds after
    // rounding.
    let m = spec.margin * (1.0 + 1e-9) + 1e-12;
    for k in 0..n {
        cond.q_min[k] = cond.q_min[k].min(q_hat[k] - m);
        cond.q_max[k] = cond.q_max[k].max(q_hat[k] + m);
        cond.v_min[k] = cond.v_min[k].min(v_hat[k] - m);
        cond.v_max[k] = cond.v_max[k].max(v_hat[k] + m);
    }
    cond.validate()?;

    let slack = interior_margin(&model, &cond, &q_hat);
    if !(slack >= spec.margin) {
        return Err(GeneratorError::Verification(format!(
            "seed point slack {slack} below margin {}",
            spec.margin
        )));
    }
    let fes = crate::analysis::feasibility(&q_hat, &(model.a() * &q_hat + &d), &cond);
    if fes != 0.0 {
        return Err(GeneratorError::Verification(format!("seed point fes {fes}")));
    }
    Ok(GeneratedFeeder {
        network,
        condition: cond,
        seed_point: q_hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_chain_spec() {
        let s: GeneratorSpec = "chain,N=2,x=0.2|0.1,r=0.1|0.05,load=0.4".parse().unwrap();
        assert_eq!(s.buses, 2);
        assert_eq!(s.x, Impedance::List(vec![0.2, 0.1]));
        let s: GeneratorSpec = "tree,N=20,max_children=3,x=0.02:0.08".parse().unwrap();
        assert_eq!(s.topology, Topology::RandomTree { max_children: 3 });
        assert_eq!(s.x, Impedance::Range(0.02, 0.08));
        assert!("paper".parse::<GeneratorSpec>().is_ok());
        for bad in ["", "ring,N=3", "chain", "chain,N=3,foo=1", "chain,N=3,max_children=2", "chain,N=2,x=-1"] {
            assert!(bad.parse::<GeneratorSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn chain_reproduces_reference_matrix() {
        let s: GeneratorSpec = "chain,N=2,x=0.2|0.1,r=0.1|0.05".parse().unwrap();
        let g = generate_feeder(&s).unwrap();
        let m = build_matrices(&g.network).unwrap();
        let a = m.a();
        let expect = [[0.4, 0.4], [0.4, 0.6]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((a[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn seed_point_is_strictly_interior() {
        for seed in 0..20 {
            let s = GeneratorSpec::tree(10, 3).with_seed(seed);
            let g = generate_feeder(&s).unwrap();
            let m = build_matrices(&g.network).unwrap();
            assert!(interior_margin(&m, &g.condition, &g.seed_point) >= s.margin);
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let s = GeneratorSpec::paper().with_seed(4);
        assert_eq!(generate_feeder(&s).unwrap(), generate_feeder(&s).unwrap());
        assert_ne!(
            generate_feeder(&s).unwrap(),
            generate_feeder(&s.clone().with_seed(5)).unwrap()
        );
    }
}
