//! Physical response of the feeder to a reactive setpoint.
//!
//! Two plants are available: the linear model `v = A q + d` and a nonlinear
//! branch-flow (DistFlow) model solved by backward/forward sweeps. Controllers
//! only ever see the returned voltages.

use nalgebra::DVector;
use thiserror::Error;

use crate::grid::{voltage_map, GridError, LinearModel, RadialNetwork};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("bus {bus}: {quantity} lower bound {lo} exceeds upper bound {hi}")]
    InvertedBounds {
        bus: usize,
        quantity: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("branch-flow sweep did not converge after {sweeps} sweeps (last change {change:e})")]
    NotConverged { sweeps: usize, change: f64 },
    #[error("invalid solver settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Injections and operating limits for one loading condition.
///
/// `p` follows the injection convention: negative values are consumption.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatingCondition {
    pub p: DVector<f64>,
    pub q_u: DVector<f64>,
    pub v_min: DVector<f64>,
    pub v_max: DVector<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
}

impl OperatingCondition {
    pub fn new(
        p: DVector<f64>,
        q_u: DVector<f64>,
        v_min: DVector<f64>,
        v_max: DVector<f64>,
        q_min: DVector<f64>,
        q_max: DVector<f64>,
    ) -> Result<Self, PlantError> {
        let cond = Self {
            p,
            q_u,
            v_min,
            v_max,
            q_min,
            q_max,
        };
        cond.validate()?;
        Ok(cond)
    }

    /// Same limits at every bus and no injections.
    pub fn uniform(n: usize, v_box: (f64, f64), q_box: (f64, f64)) -> Result<Self, PlantError> {
        Self::new(
            DVector::zeros(n),
            DVector::zeros(n),
            DVector::from_element(n, v_box.0),
            DVector::from_element(n, v_box.1),
            DVector::from_element(n, q_box.0),
            DVector::from_element(n, q_box.1),
        )
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        let n = self.p.len();
        let fields: [(&'static str, &DVector<f64>); 6] = [
            ("p", &self.p),
            ("q_u", &self.q_u),
            ("v_min", &self.v_min),
            ("v_max", &self.v_max),
            ("q_min", &self.q_min),
            ("q_max", &self.q_max),
        ];
        for (name, v) in fields {
            if v.len() != n {
                return Err(PlantError::Dimension {
                    what: name,
                    expected: n,
                    found: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(PlantError::NonFinite(name));
            }
        }
        for k in 0..n {
            if self.q_min[k] > self.q_max[k] {
                return Err(PlantError::InvertedBounds {
                    bus: k + 1,
                    quantity: "reactive power",
                    lo: self.q_min[k],
                    hi: self.q_max[k],
                });
            }
            if self.v_min[k] > self.v_max[k] {
                return Err(PlantError::InvertedBounds {
                    bus: k + 1,
                    quantity: "voltage",
                    lo: self.v_min[k],
                    hi: self.v_max[k],
                });
            }
        }
        Ok(())
    }

    /// Both boxes shrunk by `rho` on each side.
    pub fn tightened(&self, rho: f64) -> Result<Self, PlantError> {
        let shift = DVector::from_element(self.dim(), rho);
        Self::new(
            self.p.clone(),
            self.q_u.clone(),
            &self.v_min + &shift,
            &self.v_max - &shift,
            &self.q_min + &shift,
            &self.q_max - &shift,
        )
    }

    /// Real injections multiplied bus-by-bus by `scales`.
    pub fn with_scaled_injections(&self, scales: &[f64]) -> Self {
        let mut out = self.clone();
        for (p, s) in out.p.iter_mut().zip(scales) {
            *p *= s;
        }
        out
    }
}

/// Which physical model answers voltage queries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PlantKind {
    Linear,
    DistFlow { tolerance: f64, max_sweeps: usize },
}

impl PlantKind {
    pub const DEFAULT_TOLERANCE: f64 = 1e-10;
    pub const DEFAULT_MAX_SWEEPS: usize = 100;

    pub fn distflow() -> Self {
        PlantKind::DistFlow {
            tolerance: Self::DEFAULT_TOLERANCE,
            max_sweeps: Self::DEFAULT_MAX_SWEEPS,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        match *self {
            PlantKind::Linear => Ok(()),
            PlantKind::DistFlow {
                tolerance,
                max_sweeps,
            } => {
                if !(tolerance > 0.0 && tolerance.is_finite()) {
                    return Err(PlantError::InvalidSettings(format!(
                        "tolerance must be positive, got {tolerance}"
                    )));
                }
                if max_sweeps == 0 {
                    return Err(PlantError::InvalidSettings(
                        "max_sweeps must be at least 1".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// `d = A q_u + B p + 1 v0`.
pub fn constant_term(
    model: &LinearModel,
    cond: &OperatingCondition,
) -> Result<DVector<f64>, PlantError> {
    let n = model.dim();
    if cond.dim() != n {
        return Err(PlantError::Dimension {
            what: "operating condition",
            expected: n,
            found: cond.dim(),
        });
    }
    Ok(model.a() * &cond.q_u + model.b() * &cond.p + DVector::from_element(n, model.v0()))
}

/// Converged branch-flow state. Flows are indexed by the child bus of each
/// line (`p_flow[k]` is the flow into bus `k + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchFlowSolution {
    pub v: DVector<f64>,
    pub p_flow: Vec<f64>,
    pub q_flow: Vec<f64>,
    pub sweeps: usize,
}

/// Solves the radial branch-flow equations
///
/// ```text
/// P_ij = -p_j + Σ_k P_jk + r_ij ℓ_ij
/// Q_ij = -q_j + Σ_k Q_jk + x_ij ℓ_ij
/// v_j  = v_i - 2(r_ij P_ij + x_ij Q_ij) + (r_ij² + x_ij²) ℓ_ij,   ℓ_ij = (P_ij² + Q_ij²) / v_i
/// ```
///
/// by backward (flow) / forward (voltage) sweeps. With `losses == false` the
/// ℓ terms are dropped and a single sweep reproduces the linear model.
pub fn solve_branch_flow(
    net: &RadialNetwork,
    p_inj: &DVector<f64>,
    q_inj: &DVector<f64>,
    tolerance: f64,
    max_sweeps: usize,
    losses: bool,
) -> Result<BranchFlowSolution, PlantError> {
    let n = net.bus_count();
    for (what, v) in [("p injection", p_inj), ("q injection", q_inj)] {
        if v.len() != n {
            return Err(PlantError::Dimension {
                what,
                expected: n,
                found: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PlantError::NonFinite(what));
        }
    }
    PlantKind::DistFlow {
        tolerance,
        max_sweeps,
    }
    .validate()?;

    let order = net.topological_order();
    // Index 0 is the feeder throughout.
    let mut v = vec![net.v0(); n + 1];
    let mut pf = vec![0.0; n + 1];
    let mut qf = vec![0.0; n + 1];
    let mut change = f64::INFINITY;

    for sweep in 1..=max_sweeps {
        let mut new_p = vec![0.0; n + 1];
        let mut new_q = vec![0.0; n + 1];
        for &b in order.iter().rev() {
            let line = net.feeding_line(b);
            let loss = if losses {
                (pf[b] * pf[b] + qf[b] * qf[b]) / v[net.parent(b)]
            } else {
                0.0
            };
            let mut p = -p_inj[b - 1] + line.r * loss;
            let mut q = -q_inj[b - 1] + line.x * loss;
            for &c in net.children(b) {
                p += new_p[c];
                q += new_q[c];
            }
            new_p[b] = p;
            new_q[b] = q;
        }

        let mut new_v = vec![net.v0(); n + 1];
        for &b in order {
            let line = net.feeding_line(b);
            let vp = new_v[net.parent(b)];
            let (p, q) = (new_p[b], new_q[b]);
            let mut vb = vp - 2.0 * (line.r * p + line.x * q);
            if losses {
                vb += (line.r * line.r + line.x * line.x) * (p * p + q * q) / vp;
            }
            new_v[b] = vb;
        }

        change = (1..=n)
            .map(|b| {
                (new_v[b] - v[b])
                    .abs()
                    .max((new_p[b] - pf[b]).abs())
                    .max((new_q[b] - qf[b]).abs())
            })
            .fold(0.0, f64::max);
        v = new_v;
        pf = new_p;
        qf = new_q;

        if !change.is_finite() || v.iter().any(|&x| !(x > 0.0)) {
            return Err(PlantError::NotConverged { sweeps: sweep, change });
        }
        if change <= tolerance {
            return Ok(BranchFlowSolution {
                v: DVector::from_iterator(n, v[1..].iter().copied()),
                p_flow: pf[1..].to_vec(),
                q_flow: qf[1..].to_vec(),
                sweeps: sweep,
            });
        }
    }
    Err(PlantError::NotConverged {
        sweeps: max_sweeps,
        change,
    })
}

/// Largest absolute residual of the full branch-flow equations at `sol`.
pub fn branch_flow_residual(
    net: &RadialNetwork,
    p_inj: &DVector<f64>,
    q_inj: &DVector<f64>,
    sol: &BranchFlowSolution,
) -> f64 {
    let volt = |b: usize| if b == 0 { net.v0() } else { sol.v[b - 1] };
    let mut worst: f64 = 0.0;
    for b in 1..=net.bus_count() {
        let line = net.feeding_line(b);
        let vp = volt(net.parent(b));
        let (p, q) = (sol.p_flow[b - 1], sol.q_flow[b - 1]);
        let loss = (p * p + q * q) / vp;
        let (mut p_out, mut q_out) = (0.0, 0.0);
        for &c in net.children(b) {
            p_out += sol.p_flow[c - 1];
            q_out += sol.q_flow[c - 1];
        }
        let rp = p - (-p_inj[b - 1] + p_out + line.r * loss);
        let rq = q - (-q_inj[b - 1] + q_out + line.x * loss);
        let rv = volt(b)
            - (vp - 2.0 * (line.r * p + line.x * q) + (line.r * line.r + line.x * line.x) * loss);
        worst = worst.max(rp.abs()).max(rq.abs()).max(rv.abs());
    }
    worst
}

/// Voltages produced by `kind` when the controllable reactive injection is `q`.
pub fn evaluate_voltage(
    kind: PlantKind,
    net: &RadialNetwork,
    model: &LinearModel,
    cond: &OperatingCondition,
    q: &DVector<f64>,
) -> Result<DVector<f64>, PlantError> {
    Plant::new(kind, net, model, cond.clone())?
        .measure(q)
        .map(|m| m.v)
}

/// Max-abs difference between the linear and DistFlow voltages at `q`.
pub fn linearization_gap(
    net: &RadialNetwork,
    model: &LinearModel,
    cond: &OperatingCondition,
    q: &DVector<f64>,
) -> Result<f64, PlantError> {
    let lin = evaluate_voltage(PlantKind::Linear, net, model, cond, q)?;
    let nonlin = evaluate_voltage(PlantKind::distflow(), net, model, cond, q)?;
    Ok((lin - nonlin).abs().max())
}

/// Voltages reported back to the controllers, plus solver diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub v: DVector<f64>,
    /// Branch-flow residual (DistFlow only).
    pub residual: Option<f64>,
}

/// A plant bound to one network and operating condition, with `d` cached.
#[derive(Debug, Clone)]
pub struct Plant<'a> {
    kind: PlantKind,
    net: &'a RadialNetwork,
    model: &'a LinearModel,
    cond: OperatingCondition,
    d: DVector<f64>,
}

impl<'a> Plant<'a> {
    pub fn new(
        kind: PlantKind,
        net: &'a RadialNetwork,
        model: &'a LinearModel,
        cond: OperatingCondition,
    ) -> Result<Self, PlantError> {
        kind.validate()?;
        cond.validate()?;
        if net.bus_count() != model.dim() {
            return Err(PlantError::Dimension {
                what: "network",
                expected: model.dim(),
                found: net.bus_count(),
            });
        }
        let d = constant_term(model, &cond)?;
        Ok(Self {
            kind,
            net,
            model,
            cond,
            d,
        })
    }

    pub fn kind(&self) -> PlantKind {
        self.kind
    }

    pub fn network(&self) -> &'a RadialNetwork {
        self.net
    }

    pub fn model(&self) -> &'a LinearModel {
        self.model
    }

    pub fn condition(&self) -> &OperatingCondition {
        &self.cond
    }

    pub fn constant_term(&self) -> &DVector<f64> {
        &self.d
    }

    pub fn measure(&self, q: &DVector<f64>) -> Result<Measurement, PlantError> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(PlantError::NonFinite("reactive setpoint"));
        }
        match self.kind {
            PlantKind::Linear => Ok(Measurement {
                v: voltage_map(self.model, q, &self.d)?,
                residual: None,
            }),
            PlantKind::DistFlow {
                tolerance,
                max_sweeps,
            } => {
                if q.len() != self.model.dim() {
                    return Err(PlantError::Dimension {
                        what: "reactive setpoint",
                        expected: self.model.dim(),
                        found: q.len(),
                    });
                }
                let q_inj = q + &self.cond.q_u;
                let sol = solve_branch_flow(
                    self.net,
                    &self.cond.p,
                    &q_inj,
                    tolerance,
                    max_sweeps,
                    true,
                )?;
                let residual = branch_flow_residual(self.net, &self.cond.p, &q_inj, &sol);
                Ok(Measurement {
                    v: sol.v,
                    residual: Some(residual),
                })
            }
        }
    }
}
