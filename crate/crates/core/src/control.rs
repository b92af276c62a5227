//! Per-bus voltage controllers running in synchronous rounds.
//!
//! Each bus keeps its own voltage multipliers `λ = (λ_lo, λ_hi)`, capacity
//! multipliers `μ = (μ_lo, μ_hi)` and a mirror of every neighbour's `μ`. In a
//! round every bus
//!
//! 1. recovers its setpoint from the duals it holds,
//! 2. injects it (clamped to capacity for [`Variant::VcLbP`]),
//! 3. measures its voltage,
//! 4. broadcasts a two-bit sign message describing its capacity violation,
//! 5. takes a projected gradient step on `λ` and a sign step on `μ` and on
//!    each neighbour mirror.
//!
//! `λ_lo` multiplies `v_min - v`, `λ_hi` multiplies `v - v_max`; `μ_lo`
//! multiplies `q_min - q`, `μ_hi` multiplies `q - q_max`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use thiserror::Error;

use crate::grid::{primal_component, LinearModel};
use crate::plant::{Plant, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("bus {bus}: empty box [{lo}, {hi}]")]
    EmptyBox { bus: usize, lo: f64, hi: f64 },
    #[error("invalid controller parameters: {0}")]
    InvalidParams(String),
    #[error("mirror of bus {neighbor} held by bus {bus} diverged from its owner")]
    MirrorInconsistent { bus: usize, neighbor: usize },
    #[error("invalid 2-bit message code {0}")]
    InvalidMessage(u8),
    #[error("expected {expected} controller states, found {found}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

/// Multipliers of a lower/upper bound pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualPair {
    pub lo: f64,
    pub hi: f64,
}

impl DualPair {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn diff(&self) -> f64 {
        self.lo - self.hi
    }

    fn bits_eq(&self, other: &DualPair) -> bool {
        self.lo.to_bits() == other.lo.to_bits() && self.hi.to_bits() == other.hi.to_bits()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    /// `sign(0) = -1`: touching a bound does not count as a violation.
    pub fn of(x: f64) -> Self {
        if x > 0.0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }
}

/// The two-bit broadcast of one bus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QuantizedMessage {
    /// `sign(q - q_max)`
    pub b_hi: Sign,
    /// `sign(q_min - q)`
    pub b_lo: Sign,
}

impl QuantizedMessage {
    /// Wire code: bit 0 is `(b_hi + 1) / 2`, bit 1 is `(b_lo + 1) / 2`.
    pub fn encode(self) -> u8 {
        let bit = |s: Sign| u8::from(s == Sign::Plus);
        bit(self.b_hi) | (bit(self.b_lo) << 1)
    }

    /// Inverse of [`encode`](Self::encode). Code 3 (both bounds violated) is
    /// impossible for a non-empty box and is rejected.
    pub fn decode(code: u8) -> Result<Self, ControlError> {
        let sign = |b: u8| if b == 1 { Sign::Plus } else { Sign::Minus };
        match code {
            0..=2 => Ok(Self {
                b_hi: sign(code & 1),
                b_lo: sign((code >> 1) & 1),
            }),
            _ => Err(ControlError::InvalidMessage(code)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Sign-quantized capacity multipliers, setpoint injected as computed.
    VcLb,
    /// As `VcLb`, but the injected setpoint is clamped to capacity.
    VcLbP,
    /// Unquantized dual gradient ascent with step `gamma`; neighbours
    /// exchange real-valued multipliers.
    DualBaseline { gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub alpha: f64,
    pub beta: f64,
    /// Bound tightening applied to both boxes.
    pub rho: f64,
    pub variant: Variant,
}

impl ControllerParams {
    pub fn vclb(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            rho: 0.0,
            variant: Variant::VcLb,
        }
    }

    pub fn vclbp(alpha: f64, beta: f64) -> Self {
        Self {
            variant: Variant::VcLbP,
            ..Self::vclb(alpha, beta)
        }
    }

    pub fn baseline(gamma: f64) -> Self {
        Self {
            alpha: gamma,
            beta: gamma,
            rho: 0.0,
            variant: Variant::DualBaseline { gamma },
        }
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self, cond: &crate::plant::OperatingCondition) -> Result<(), ControlError> {
        let positive = |name: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(ControlError::InvalidParams(format!("{name} must be positive, got {x}")))
            }
        };
        match self.variant {
            Variant::DualBaseline { gamma } => positive("gamma", gamma)?,
            _ => {
                positive("alpha", self.alpha)?;
                positive("beta", self.beta)?;
            }
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(ControlError::InvalidParams(format!(
                "rho must be non-negative, got {}",
                self.rho
            )));
        }
        for k in 0..cond.dim() {
            let q_half = (cond.q_max[k] - cond.q_min[k]) / 2.0;
            let v_half = (cond.v_max[k] - cond.v_min[k]) / 2.0;
            if self.rho > 0.0 && !(self.rho < q_half && self.rho < v_half) {
                return Err(ControlError::InvalidParams(format!(
                    "rho = {} empties the box at bus {} (half-widths q {q_half}, v {v_half})",
                    self.rho,
                    k + 1
                )));
            }
        }
        Ok(())
    }
}

/// How communicated bits are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BitMode {
    /// Two bits per bus per round.
    #[default]
    Broadcast,
    /// Two bits per directed neighbour link per round.
    PerLink,
}

impl BitMode {
    pub fn bits_per_round(self, model: &LinearModel) -> u64 {
        let n = model.dim();
        match self {
            BitMode::Broadcast => 2 * n as u64,
            BitMode::PerLink => (0..n).map(|k| 2 * model.neighbors(k).len() as u64).sum(),
        }
    }
}

/// Everything one bus knows.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// 0-based model index (bus `index + 1`).
    pub index: usize,
    pub lambda: DualPair,
    pub mu: DualPair,
    pub mu_mirror: BTreeMap<usize, DualPair>,
    pub q: f64,
    pub q_phy: f64,
    pub a_self: f64,
    pub a_neighbors: Vec<(usize, f64)>,
}

impl ControllerState {
    pub fn new(model: &LinearModel, index: usize) -> Self {
        let row = model.a_inv_row(index);
        Self {
            index,
            lambda: DualPair::default(),
            mu: DualPair::default(),
            mu_mirror: row.off.iter().map(|&(j, _)| (j, DualPair::default())).collect(),
            q: 0.0,
            q_phy: 0.0,
            a_self: row.diag,
            a_neighbors: row.off.clone(),
        }
    }
}

/// All-zero duals at every bus.
pub fn initial_states(model: &LinearModel) -> Vec<ControllerState> {
    (0..model.dim()).map(|k| ControllerState::new(model, k)).collect()
}

/// `q_i = λ_lo - λ_hi + a_ii (μ_lo - μ_hi) + Σ_j a_ij (μ_j,lo - μ_j,hi)`.
pub fn primal_update(state: &ControllerState) -> f64 {
    primal_component(
        state.lambda.diff(),
        state.a_self,
        state.mu.diff(),
        state
            .a_neighbors
            .iter()
            .map(|(j, a)| (*a, state.mu_mirror[j].diff())),
    )
}

pub fn quantize(q: f64, q_min_eff: f64, q_max_eff: f64) -> Result<QuantizedMessage, ControlError> {
    if !(q_min_eff <= q_max_eff) {
        return Err(ControlError::EmptyBox {
            bus: 0,
            lo: q_min_eff,
            hi: q_max_eff,
        });
    }
    Ok(QuantizedMessage {
        b_hi: Sign::of(q - q_max_eff),
        b_lo: Sign::of(q_min_eff - q),
    })
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

pub fn dual_update_lambda(
    lambda: DualPair,
    v: f64,
    v_min_eff: f64,
    v_max_eff: f64,
    alpha: f64,
) -> DualPair {
    DualPair {
        lo: pos(lambda.lo + alpha * (v_min_eff - v)),
        hi: pos(lambda.hi + alpha * (v - v_max_eff)),
    }
}

pub fn dual_update_mu(mu: DualPair, msg: QuantizedMessage, beta: f64) -> DualPair {
    DualPair {
        lo: pos(mu.lo + beta * msg.b_lo.value()),
        hi: pos(mu.hi + beta * msg.b_hi.value()),
    }
}

pub fn project_capacity(q: f64, q_min: f64, q_max: f64) -> Result<f64, ControlError> {
    if !(q_min <= q_max) {
        return Err(ControlError::EmptyBox {
            bus: 0,
            lo: q_min,
            hi: q_max,
        });
    }
    Ok(q.min(q_max).max(q_min))
}

/// What happened during one round: setpoints computed from the duals held at
/// the start of the round, the resulting measurement, and the broadcasts.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTrace {
    pub q: Vec<f64>,
    pub q_phy: Vec<f64>,
    pub v: Vec<f64>,
    /// Empty for the unquantized baseline.
    pub messages: Vec<QuantizedMessage>,
    pub bits: u64,
    pub residual: Option<f64>,
}

/// Steps b through e of a round: setpoints, injection, measurement and the
/// messages each bus would send. Duals are left untouched.
pub fn observe_round(
    states: &[ControllerState],
    plant: &Plant<'_>,
    params: &ControllerParams,
) -> Result<RoundTrace, ControlError> {
    let cond = plant.condition();
    let n = cond.dim();
    if states.len() != n {
        return Err(ControlError::Dimension {
            expected: n,
            found: states.len(),
        });
    }
    let q: Vec<f64> = states.iter().map(primal_update).collect();
    let q_phy = match params.variant {
        Variant::VcLbP => q
            .iter()
            .enumerate()
            .map(|(k, &qk)| {
                project_capacity(qk, cond.q_min[k], cond.q_max[k]).map_err(|_| {
                    ControlError::EmptyBox {
                        bus: k + 1,
                        lo: cond.q_min[k],
                        hi: cond.q_max[k],
                    }
                })
            })
            .collect::<Result<Vec<_>, _>>()?,
        _ => q.clone(),
    };
    let meas = plant.measure(&DVector::from_column_slice(&q_phy))?;
    let messages = match params.variant {
        Variant::DualBaseline { .. } => Vec::new(),
        _ => q
            .iter()
            .enumerate()
            .map(|(k, &qk)| {
                let (lo, hi) = (cond.q_min[k] + params.rho, cond.q_max[k] - params.rho);
                quantize(qk, lo, hi).map_err(|_| ControlError::EmptyBox { bus: k + 1, lo, hi })
            })
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(RoundTrace {
        q,
        q_phy,
        v: meas.v.iter().copied().collect(),
        messages,
        bits: 0,
        residual: meas.residual,
    })
}

/// Step f: every bus updates its own duals and its neighbour mirrors from
/// the round's measurement and messages. Buses are visited in `order`; the
/// result does not depend on it.
pub fn apply_round_ordered(
    states: &[ControllerState],
    round: &RoundTrace,
    cond: &crate::plant::OperatingCondition,
    params: &ControllerParams,
    order: &[usize],
) -> Result<Vec<ControllerState>, ControlError> {
    let rho = params.rho;
    let mut next: Vec<Option<ControllerState>> = vec![None; states.len()];
    // The baseline exchanges real multipliers, so each bus's new μ is needed
    // before mirrors can be refreshed.
    let baseline_mu: Vec<DualPair> = match params.variant {
        Variant::DualBaseline { gamma } => states
            .iter()
            .map(|s| {
                let k = s.index;
                let q = round.q[k];
                DualPair {
                    lo: pos(s.mu.lo + gamma * ((cond.q_min[k] + rho) - q)),
                    hi: pos(s.mu.hi + gamma * (q - (cond.q_max[k] - rho))),
                }
            })
            .collect(),
        _ => Vec::new(),
    };

    for &k in order {
        let s = &states[k];
        let step = match params.variant {
            Variant::DualBaseline { gamma } => gamma,
            _ => params.alpha,
        };
        let lambda = dual_update_lambda(
            s.lambda,
            round.v[k],
            cond.v_min[k] + rho,
            cond.v_max[k] - rho,
            step,
        );
        let (mu, mirror) = match params.variant {
            Variant::DualBaseline { .. } => (
                baseline_mu[k],
                s.mu_mirror
                    .keys()
                    .map(|&j| (j, baseline_mu[j]))
                    .collect::<BTreeMap<_, _>>(),
            ),
            _ => (
                dual_update_mu(s.mu, round.messages[k], params.beta),
                s.mu_mirror
                    .iter()
                    .map(|(&j, &m)| (j, dual_update_mu(m, round.messages[j], params.beta)))
                    .collect(),
            ),
        };
        next[k] = Some(ControllerState {
            lambda,
            mu,
            mu_mirror: mirror,
            q: round.q[k],
            q_phy: round.q_phy[k],
            ..s.clone()
        });
    }

    let next: Vec<ControllerState> = next
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            s.ok_or_else(|| ControlError::InvalidParams(format!("bus {} not scheduled", k + 1)))
        })
        .collect::<Result<_, _>>()?;
    check_mirrors(&next)?;
    Ok(next)
}

/// Verifies that every mirror equals its owner's multiplier bit for bit.
pub fn check_mirrors(states: &[ControllerState]) -> Result<(), ControlError> {
    for s in states {
        for (&j, m) in &s.mu_mirror {
            if !m.bits_eq(&states[j].mu) {
                return Err(ControlError::MirrorInconsistent {
                    bus: s.index + 1,
                    neighbor: j + 1,
                });
            }
        }
    }
    Ok(())
}

/// One synchronous round over every bus.
pub fn step_round(
    states: &[ControllerState],
    plant: &Plant<'_>,
    params: &ControllerParams,
    bit_mode: BitMode,
) -> Result<(Vec<ControllerState>, RoundTrace), ControlError> {
    let order: Vec<usize> = (0..states.len()).collect();
    step_round_ordered(states, plant, params, bit_mode, &order)
}

pub fn step_round_ordered(
    states: &[ControllerState],
    plant: &Plant<'_>,
    params: &ControllerParams,
    bit_mode: BitMode,
    order: &[usize],
) -> Result<(Vec<ControllerState>, RoundTrace), ControlError> {
    let mut round = observe_round(states, plant, params)?;
    round.bits = match params.variant {
        Variant::DualBaseline { .. } => 0,
        _ => bit_mode.bits_per_round(plant.model()),
    };
    let next = apply_round_ordered(states, &round, plant.condition(), params, order)?;
    Ok((next, round))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_matrices, Line, RadialNetwork};
    use crate::plant::{OperatingCondition, PlantKind};

    fn chain3() -> (RadialNetwork, LinearModel) {
        let net = RadialNetwork::new(
            2,
            1.0,
            vec![Line::new(0, 1, 0.1, 0.2), Line::new(1, 2, 0.05, 0.1)],
        )
        .unwrap();
        let m = build_matrices(&net).unwrap();
        (net, m)
    }

    #[test]
    fn primal_update_examples() {
        let (_, m) = chain3();
        let states = initial_states(&m);
        assert_eq!(primal_update(&states[0]), 0.0);

        let net1 = RadialNetwork::new(1, 1.0, vec![Line::new(0, 1, 0.1, 0.2)]).unwrap();
        let m1 = build_matrices(&net1).unwrap();
        let mut s = ControllerState::new(&m1, 0);
        s.lambda = DualPair::new(0.1, 0.0);
        s.mu = DualPair::new(0.2, 0.0);
        assert!((primal_update(&s) - 0.6).abs() < 1e-15);

        // Only μ_2,lo = 0.1: q = A^{-1} e_2 * 0.1 = (-0.5, 0.5).
        let mut states = initial_states(&m);
        states[1].mu = DualPair::new(0.1, 0.0);
        states[0].mu_mirror.insert(1, DualPair::new(0.1, 0.0));
        assert!((primal_update(&states[0]) + 0.5).abs() < 1e-12);
        assert!((primal_update(&states[1]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantize_examples() {
        let up = quantize(0.6, -0.5, 0.5).unwrap();
        assert_eq!((up.b_hi, up.b_lo), (Sign::Plus, Sign::Minus));
        let mid = quantize(0.0, -0.5, 0.5).unwrap();
        assert_eq!((mid.b_hi, mid.b_lo), (Sign::Minus, Sign::Minus));
        let edge = quantize(0.5, -0.5, 0.5).unwrap();
        assert_eq!((edge.b_hi, edge.b_lo), (Sign::Minus, Sign::Minus));
        assert!(matches!(quantize(0.0, 0.1, -0.1), Err(ControlError::EmptyBox { .. })));
    }

    #[test]
    fn wire_codes() {
        let msg = QuantizedMessage { b_hi: Sign::Plus, b_lo: Sign::Minus };
        assert_eq!(msg.encode(), 1);
        assert_eq!(QuantizedMessage { b_hi: Sign::Minus, b_lo: Sign::Plus }.encode(), 2);
        assert_eq!(QuantizedMessage { b_hi: Sign::Minus, b_lo: Sign::Minus }.encode(), 0);
        for code in 0..3u8 {
            assert_eq!(QuantizedMessage::decode(code).unwrap().encode(), code);
        }
        assert!(QuantizedMessage::decode(3).is_err());
    }

    #[test]
    fn lambda_update_examples() {
        let l = dual_update_lambda(DualPair::default(), 1.07, 0.95, 1.05, 0.2);
        assert_eq!(l.lo, 0.0);
        assert!((l.hi - 0.004).abs() < 1e-15);
        let l = dual_update_lambda(DualPair::default(), 1.0, 0.95, 1.05, 0.2);
        assert_eq!(l, DualPair::default());
        let l = dual_update_lambda(DualPair::new(0.01, 0.0), 0.95, 0.95, 1.05, 0.2);
        assert_eq!(l, DualPair::new(0.01, 0.0));
    }

    #[test]
    fn mu_update_examples() {
        let neg = QuantizedMessage { b_hi: Sign::Minus, b_lo: Sign::Minus };
        let hi = QuantizedMessage { b_hi: Sign::Plus, b_lo: Sign::Minus };
        assert_eq!(dual_update_mu(DualPair::default(), neg, 1e-5), DualPair::default());
        assert_eq!(dual_update_mu(DualPair::default(), hi, 1e-5), DualPair::new(0.0, 1e-5));
        let m = dual_update_mu(DualPair::new(0.0, 3e-5), neg, 1e-5);
        assert!((m.hi - 2e-5).abs() < 1e-20 && m.lo == 0.0);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_capacity(0.6, -0.5, 0.5).unwrap(), 0.5);
        assert_eq!(project_capacity(0.3, -0.5, 0.5).unwrap(), 0.3);
        assert_eq!(project_capacity(-0.7, -0.5, 0.5).unwrap(), -0.5);
        assert!(project_capacity(0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn first_round_is_forced_by_initialization() {
        let (net, m) = chain3();
        let mut cond = OperatingCondition::uniform(2, (0.9025, 1.1025), (-0.5, 0.5)).unwrap();
        cond.p = DVector::from_vec(vec![-0.3, -0.4]);
        let plant = Plant::new(PlantKind::Linear, &net, &m, cond.clone()).unwrap();
        let params = ControllerParams::vclb(0.2, 1e-3);
        let states = initial_states(&m);
        let (next, round) = step_round(&states, &plant, &params, BitMode::Broadcast).unwrap();
        assert_eq!(round.q, vec![0.0, 0.0]);
        assert_eq!(round.bits, 4);
        let d = plant.constant_term();
        assert_eq!(round.v, vec![d[0], d[1]]);
        for k in 0..2 {
            assert_eq!(round.messages[k].encode(), 0);
            assert_eq!(next[k].mu, DualPair::default());
            let expect = dual_update_lambda(DualPair::default(), d[k], 0.9025, 1.1025, 0.2);
            assert_eq!(next[k].lambda, expect);
        }
    }

    #[test]
    fn projected_variant_keeps_injection_inside_capacity() {
        let (net, m) = chain3();
        let cond = OperatingCondition::uniform(2, (0.9025, 1.1025), (-0.1, 0.1)).unwrap();
        let plant = Plant::new(PlantKind::Linear, &net, &m, cond).unwrap();
        let params = ControllerParams::vclbp(0.2, 1e-3);
        let mut states = initial_states(&m);
        states[0].lambda = DualPair::new(0.5, 0.0);
        let (_, round) = step_round(&states, &plant, &params, BitMode::Broadcast).unwrap();
        assert!(round.q[0] > 0.1);
        assert_eq!(round.q_phy[0], 0.1);
        assert_eq!(round.messages[0].b_hi, Sign::Plus);
    }

    #[test]
    fn per_link_bits_count_neighbours() {
        let (_, m) = chain3();
        assert_eq!(BitMode::PerLink.bits_per_round(&m), 4);
        assert_eq!(BitMode::Broadcast.bits_per_round(&m), 4);
    }

    #[test]
    fn corrupted_mirror_is_detected() {
        let (_, m) = chain3();
        let mut states = initial_states(&m);
        states[0].mu_mirror.insert(1, DualPair::new(1e-9, 0.0));
        assert_eq!(
            check_mirrors(&states),
            Err(ControlError::MirrorInconsistent { bus: 1, neighbor: 2 })
        );
    }

    #[test]
    fn params_validation() {
        let cond = OperatingCondition::uniform(2, (0.9, 1.1), (-0.5, 0.5)).unwrap();
        assert!(ControllerParams::vclb(0.2, 1e-5).validate(&cond).is_ok());
        assert!(ControllerParams::vclb(0.0, 1e-5).validate(&cond).is_err());
        assert!(ControllerParams::baseline(-1.0).validate(&cond).is_err());
        assert!(ControllerParams::vclb(0.2, 1e-5).with_rho(0.15).validate(&cond).is_err());
        assert!(ControllerParams::vclb(0.2, 1e-5).with_rho(0.02).validate(&cond).is_ok());
    }
}
