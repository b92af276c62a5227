//! Scenario driver: static and fluctuating-load runs, certificate monitors,
//! run summaries and trace files.

use std::fmt;
use std::io::{self, BufRead, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::analysis::{
    descent_increment, iteration_bound, solve_dual, termination_bound, Certificates, DualProblem,
    DualVector, StepConditions,
};
use crate::control::{
    initial_states, observe_round, step_round, BitMode, ControlError, ControllerParams,
    ControllerState, RoundTrace, Variant,
};
use crate::grid::{LinearModel, RadialNetwork};
use crate::plant::{OperatingCondition, Plant, PlantError, PlantKind};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Load fluctuation protocol: every interval multiplies the base real
/// injections by scale factors drawn uniformly from `[scale_lo, scale_hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicProtocol {
    pub intervals: usize,
    pub rounds_per_interval: u64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub seed: u64,
    /// One factor shared by all buses instead of one per bus.
    pub global_scale: bool,
    /// Reset the duals at every interval boundary.
    pub cold_start: bool,
}

impl DynamicProtocol {
    pub fn new(intervals: usize, rounds_per_interval: u64, range: (f64, f64), seed: u64) -> Self {
        Self {
            intervals,
            rounds_per_interval,
            scale_lo: range.0,
            scale_hi: range.1,
            seed,
            global_scale: false,
            cold_start: false,
        }
    }

    pub fn total_rounds(&self) -> u64 {
        self.intervals as u64 * self.rounds_per_interval
    }

    pub fn interval_of(&self, t: u64) -> usize {
        ((t / self.rounds_per_interval) as usize).min(self.intervals - 1)
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.intervals == 0 || self.rounds_per_interval == 0 {
            return Err(SimError::InvalidScenario(
                "intervals and rounds per interval must be positive".into(),
            ));
        }
        if !(self.scale_lo.is_finite() && self.scale_hi.is_finite() && self.scale_lo <= self.scale_hi)
        {
            return Err(SimError::InvalidScenario(format!(
                "scale range [{}, {}] is not an interval",
                self.scale_lo, self.scale_hi
            )));
        }
        Ok(())
    }

    /// Per-interval operating conditions. Draws come from a ChaCha8 stream
    /// seeded with `seed` and are consumed in bus order.
    pub fn conditions(&self, base: &OperatingCondition) -> Vec<OperatingCondition> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let width = self.scale_hi - self.scale_lo;
        let n = base.dim();
        (0..self.intervals)
            .map(|_| {
                let scales: Vec<f64> = if self.global_scale {
                    vec![self.scale_lo + width * rng.gen::<f64>(); n]
                } else {
                    (0..n).map(|_| self.scale_lo + width * rng.gen::<f64>()).collect()
                };
                base.with_scaled_injections(&scales)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenarioKind {
    Static { rounds: u64 },
    Dynamic(DynamicProtocol),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub plant: PlantKind,
    pub params: ControllerParams,
    pub bit_mode: BitMode,
    /// Stop after the first record with `fes` at or below this value.
    pub stop_threshold: Option<f64>,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, plant: PlantKind, params: ControllerParams) -> Self {
        Self {
            kind,
            plant,
            params,
            bit_mode: BitMode::Broadcast,
            stop_threshold: None,
        }
    }

    pub fn with_stop_threshold(mut self, threshold: f64) -> Self {
        self.stop_threshold = Some(threshold);
        self
    }
}

/// State of every bus at round `t`, the setpoints derived from it and the
/// resulting measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: u64,
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub q_phy: Vec<f64>,
    pub lambda_lo: Vec<f64>,
    pub lambda_hi: Vec<f64>,
    pub mu_lo: Vec<f64>,
    pub mu_hi: Vec<f64>,
    /// Feasibility of the injected setpoint and measured voltage against the
    /// original boxes.
    pub fes: f64,
    /// Merit function on the linear model and tightened boxes.
    pub merit: f64,
    /// Dual objective on the linear model and tightened boxes.
    pub objective: f64,
    /// Bits sent before this record.
    pub bits: u64,
    pub interval: Option<usize>,
    /// Branch-flow residual of the measurement, when the plant reports one.
    pub residual: Option<f64>,
}

impl TraceRecord {
    pub fn duals(&self) -> DualVector {
        DualVector {
            lambda_lo: DVector::from_column_slice(&self.lambda_lo),
            lambda_hi: DVector::from_column_slice(&self.lambda_hi),
            mu_lo: DVector::from_column_slice(&self.mu_lo),
            mu_hi: DVector::from_column_slice(&self.mu_hi),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationAbort {
    pub round: u64,
    pub reason: String,
    pub mirror_inconsistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub bus_count: usize,
    pub records: Vec<TraceRecord>,
    /// Set when a plant or controller failure stopped the run early.
    pub aborted: Option<SimulationAbort>,
}

impl SimulationTrace {
    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

fn make_record(
    t: u64,
    states: &[ControllerState],
    round: &RoundTrace,
    problem: &DualProblem<'_>,
    original: &OperatingCondition,
    bits: u64,
    interval: Option<usize>,
) -> TraceRecord {
    let z = DualVector::from_states(states);
    let eval = problem.evaluate(&z);
    let q_phy = DVector::from_column_slice(&round.q_phy);
    let v = DVector::from_column_slice(&round.v);
    TraceRecord {
        t,
        v: round.v.clone(),
        q: round.q.clone(),
        q_phy: round.q_phy.clone(),
        lambda_lo: z.lambda_lo.iter().copied().collect(),
        lambda_hi: z.lambda_hi.iter().copied().collect(),
        mu_lo: z.mu_lo.iter().copied().collect(),
        mu_hi: z.mu_hi.iter().copied().collect(),
        fes: crate::analysis::feasibility(&q_phy, &v, original),
        merit: eval.merit,
        objective: eval.objective,
        bits,
        interval,
        residual: round.residual,
    }
}

fn abort_from(round: u64, err: ControlError) -> SimulationAbort {
    SimulationAbort {
        round,
        mirror_inconsistent: matches!(err, ControlError::MirrorInconsistent { .. }),
        reason: err.to_string(),
    }
}

struct Segment<'a> {
    plant: Plant<'a>,
    problem: DualProblem<'a>,
}

fn segment<'a>(
    net: &'a RadialNetwork,
    model: &'a LinearModel,
    cond: &OperatingCondition,
    scenario: &Scenario,
) -> Result<Segment<'a>, SimError> {
    let tightened = cond.tightened(scenario.params.rho)?;
    Ok(Segment {
        plant: Plant::new(scenario.plant, net, model, cond.clone())?,
        problem: DualProblem::new(model, tightened)?,
    })
}

/// Runs rounds `0..rounds` with the condition of round `t` given by
/// `interval_of(t)`, recording `t = 0..=rounds`.
fn run_rounds(
    net: &RadialNetwork,
    model: &LinearModel,
    conditions: &[OperatingCondition],
    scenario: &Scenario,
    rounds: u64,
    interval_of: impl Fn(u64) -> Option<usize>,
    reset_at: impl Fn(u64) -> bool,
) -> Result<SimulationTrace, SimError> {
    scenario.params.validate(&conditions[0])?;
    if rounds == 0 {
        return Err(SimError::InvalidScenario("at least one round is required".into()));
    }
    let segments: Vec<Segment> = conditions
        .iter()
        .map(|c| segment(net, model, c, scenario))
        .collect::<Result<_, _>>()?;
    let bits_per_round = match scenario.params.variant {
        Variant::DualBaseline { .. } => 0,
        _ => scenario.bit_mode.bits_per_round(model),
    };

    let mut trace = SimulationTrace {
        bus_count: model.dim(),
        records: Vec::new(),
        aborted: None,
    };
    let mut states = initial_states(model);
    for t in 0..=rounds {
        if t > 0 && reset_at(t) {
            states = initial_states(model);
        }
        let interval = interval_of(t);
        let seg = &segments[interval.unwrap_or(0)];
        let cond = &conditions[interval.unwrap_or(0)];
        let outcome = if t < rounds {
            step_round(&states, &seg.plant, &scenario.params, scenario.bit_mode)
                .map(|(next, round)| (Some(next), round))
        } else {
            observe_round(&states, &seg.plant, &scenario.params).map(|round| (None, round))
        };
        let (next, round) = match outcome {
            Ok(x) => x,
            Err(err) => {
                trace.aborted = Some(abort_from(t, err));
                return Ok(trace);
            }
        };
        let record = make_record(t, &states, &round, &seg.problem, cond, t * bits_per_round, interval);
        let stop = scenario.stop_threshold.is_some_and(|thr| record.fes <= thr);
        trace.records.push(record);
        if stop {
            break;
        }
        if let Some(next) = next {
            states = next;
        }
    }
    Ok(trace)
}

pub fn run_static(
    net: &RadialNetwork,
    model: &LinearModel,
    cond: &OperatingCondition,
    scenario: &Scenario,
) -> Result<SimulationTrace, SimError> {
    let ScenarioKind::Static { rounds } = scenario.kind else {
        return Err(SimError::InvalidScenario("expected a static scenario".into()));
    };
    run_rounds(
        net,
        model,
        std::slice::from_ref(cond),
        scenario,
        rounds,
        |_| None,
        |_| false,
    )
}

pub fn run_dynamic(
    net: &RadialNetwork,
    model: &LinearModel,
    cond: &OperatingCondition,
    scenario: &Scenario,
) -> Result<SimulationTrace, SimError> {
    let ScenarioKind::Dynamic(protocol) = scenario.kind else {
        return Err(SimError::InvalidScenario("expected a dynamic scenario".into()));
    };
    protocol.validate()?;
    let conditions = protocol.conditions(cond);
    let rpi = protocol.rounds_per_interval;
    run_rounds(
        net,
        model,
        &conditions,
        scenario,
        protocol.total_rounds(),
        |t| Some(protocol.interval_of(t)),
        |t| protocol.cold_start && t % rpi == 0 && t < protocol.total_rounds(),
    )
}

/// Dispatches on the scenario kind.
pub fn run(
    net: &RadialNetwork,
    model: &LinearModel,
    cond: &OperatingCondition,
    scenario: &Scenario,
) -> Result<SimulationTrace, SimError> {
    match scenario.kind {
        ScenarioKind::Static { .. } => run_static(net, model, cond, scenario),
        ScenarioKind::Dynamic(_) => run_dynamic(net, model, cond, scenario),
    }
}

/// The operating condition in force at each interval of a scenario.
pub fn scenario_conditions(cond: &OperatingCondition, kind: &ScenarioKind) -> Vec<OperatingCondition> {
    match kind {
        ScenarioKind::Static { .. } => vec![cond.clone()],
        ScenarioKind::Dynamic(p) => p.conditions(cond),
    }
}

fn box_violation(x: f64, lo: f64, hi: f64) -> f64 {
    (lo - x).max(x - hi).max(0.0)
}

fn voltages_in_band(r: &TraceRecord, cond: &OperatingCondition, tol: f64) -> bool {
    r.v.iter()
        .enumerate()
        .all(|(k, &v)| v >= cond.v_min[k] - tol && v <= cond.v_max[k] + tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSummary {
    pub index: usize,
    pub first_feasible: Option<u64>,
    pub first_in_band: Option<u64>,
    pub final_fes: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub epsilon: f64,
    pub rounds: u64,
    pub final_fes: f64,
    /// First record with `fes ≤ ε` and the bits sent before it.
    pub first_feasible: Option<(u64, u64)>,
    /// Largest `fes` after `first_feasible`.
    pub max_fes_after: Option<f64>,
    /// Records after `first_feasible` with `fes > ε`.
    pub persistence_failures: u64,
    /// First record from which every voltage stays inside its band
    /// (within the band tolerance) until the end of the trace.
    pub voltage_settled: Option<u64>,
    pub max_q_violation: f64,
    pub max_q_phy_violation: f64,
    pub max_q_gap: f64,
    pub final_q_gap: f64,
    pub max_residual: Option<f64>,
    pub final_bits: u64,
    pub intervals: Vec<IntervalSummary>,
    pub aborted: Option<SimulationAbort>,
}

/// Tolerance on squared voltages used when deciding whether a voltage is
/// inside its band.
pub const DEFAULT_BAND_TOLERANCE: f64 = 1e-4;

pub fn summarize(
    trace: &SimulationTrace,
    conditions: &[OperatingCondition],
    epsilon: f64,
    band_tolerance: f64,
) -> Summary {
    let cond_of = |r: &TraceRecord| &conditions[r.interval.unwrap_or(0).min(conditions.len() - 1)];
    let records = &trace.records;
    let first = records.iter().find(|r| r.fes <= epsilon);
    let after: Vec<&TraceRecord> = match first {
        Some(f) => records.iter().filter(|r| r.t > f.t).collect(),
        None => Vec::new(),
    };
    let mut settled = None;
    for r in records.iter().rev() {
        if voltages_in_band(r, cond_of(r), band_tolerance) {
            settled = Some(r.t);
        } else {
            break;
        }
    }
    let cap = |pick: fn(&TraceRecord) -> &Vec<f64>| {
        records
            .iter()
            .flat_map(|r| {
                let c = cond_of(r);
                pick(r)
                    .iter()
                    .enumerate()
                    .map(move |(k, &x)| box_violation(x, c.q_min[k], c.q_max[k]))
            })
            .fold(0.0, f64::max)
    };
    let gap = |r: &TraceRecord| {
        r.q.iter()
            .zip(&r.q_phy)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let mut intervals = Vec::new();
    if records.iter().any(|r| r.interval.is_some()) {
        let count = records.iter().filter_map(|r| r.interval).max().unwrap_or(0) + 1;
        for index in 0..count {
            let inside: Vec<&TraceRecord> =
                records.iter().filter(|r| r.interval == Some(index)).collect();
            intervals.push(IntervalSummary {
                index,
                first_feasible: inside.iter().find(|r| r.fes <= epsilon).map(|r| r.t),
                first_in_band: inside
                    .iter()
                    .find(|r| voltages_in_band(r, cond_of(r), band_tolerance))
                    .map(|r| r.t),
                final_fes: inside.last().map_or(f64::NAN, |r| r.fes),
            });
        }
    }
    let last = records.last();
    Summary {
        epsilon,
        rounds: last.map_or(0, |r| r.t),
        final_fes: last.map_or(f64::NAN, |r| r.fes),
        first_feasible: first.map(|r| (r.t, r.bits)),
        max_fes_after: first.map(|_| after.iter().map(|r| r.fes).fold(0.0, f64::max)),
        persistence_failures: after.iter().filter(|r| r.fes > epsilon).count() as u64,
        voltage_settled: settled,
        max_q_violation: cap(|r| &r.q),
        max_q_phy_violation: cap(|r| &r.q_phy),
        max_q_gap: records.iter().map(gap).fold(0.0, f64::max),
        final_q_gap: last.map_or(0.0, gap),
        max_residual: records.iter().filter_map(|r| r.residual).reduce(f64::max),
        final_bits: last.map_or(0, |r| r.bits),
        intervals,
        aborted: trace.aborted.clone(),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rounds: {}", self.rounds)?;
        writeln!(f, "bits: {}", self.final_bits)?;
        writeln!(f, "final fes: {:.6e}", self.final_fes)?;
        match self.first_feasible {
            Some((t, bits)) => writeln!(f, "fes <= {} at round {t} ({bits} bits)", self.epsilon)?,
            None => writeln!(
                f,
                "fes <= {} not reached (final fes {:.6e})",
                self.epsilon, self.final_fes
            )?,
        }
        if let Some(m) = self.max_fes_after {
            writeln!(
                f,
                "max fes after first reach: {m:.6e} ({} rounds above epsilon)",
                self.persistence_failures
            )?;
        }
        match self.voltage_settled {
            Some(t) => writeln!(f, "voltages inside band from round {t}")?,
            None => writeln!(f, "voltages not settled inside band")?,
        }
        writeln!(f, "max capacity violation of q: {:.6e}", self.max_q_violation)?;
        writeln!(f, "max capacity violation of q_phy: {:.6e}", self.max_q_phy_violation)?;
        writeln!(f, "final |q - q_phy|: {:.6e}", self.final_q_gap)?;
        if let Some(r) = self.max_residual {
            writeln!(f, "max branch-flow residual: {r:.3e}")?;
        }
        for iv in &self.intervals {
            let show = |x: Option<u64>| x.map_or("-".to_string(), |t| t.to_string());
            writeln!(
                f,
                "interval {}: fes reached {} | band reached {} | final fes {:.6e}",
                iv.index,
                show(iv.first_feasible),
                show(iv.first_in_band),
                iv.final_fes
            )?;
        }
        if let Some(a) = &self.aborted {
            writeln!(f, "ABORTED at round {}: {}", a.round, a.reason)?;
        }
        Ok(())
    }
}

/// Outcome of a monitor that inspects individual rounds.
#[derive(Debug, Clone, PartialEq)]
pub enum Monitor {
    NotApplicable(String),
    Checked {
        rounds: u64,
        violations: Vec<u64>,
        /// Smallest observed slack (positive means satisfied).
        min_slack: f64,
    },
}

impl Monitor {
    fn checked() -> Self {
        Monitor::Checked {
            rounds: 0,
            violations: Vec::new(),
            min_slack: f64::INFINITY,
        }
    }

    fn observe(&mut self, t: u64, slack: f64) {
        if let Monitor::Checked {
            rounds,
            violations,
            min_slack,
        } = self
        {
            *rounds += 1;
            *min_slack = min_slack.min(slack);
            if !(slack >= 0.0) {
                violations.push(t);
            }
        }
    }

    pub fn violated(&self) -> bool {
        matches!(self, Monitor::Checked { violations, .. } if !violations.is_empty())
    }
}

impl fmt::Display for Monitor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Monitor::NotApplicable(why) => write!(f, "not applicable ({why})"),
            Monitor::Checked {
                rounds,
                violations,
                min_slack,
            } => {
                let status = if violations.is_empty() { "ok" } else { "VIOLATED" };
                write!(f, "{status}: {rounds} rounds checked")?;
                if min_slack.is_finite() {
                    write!(f, ", min slack {min_slack:.3e}")?;
                }
                if let Some(t) = violations.first() {
                    write!(f, ", {} violations (first at round {t})", violations.len())?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminationCheck {
    pub d_star: f64,
    pub dual_converged: bool,
    pub bound: u64,
    pub first_reach: Option<u64>,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificationReport {
    pub epsilon: f64,
    pub certificates: Certificates,
    pub conditions: StepConditions,
    pub descent: Monitor,
    pub merit_bound: Monitor,
    pub mirror: Monitor,
    pub safety: Monitor,
    pub termination: Option<TerminationCheck>,
    /// First round with `V ≤ ε`.
    pub first_merit_reach: Option<u64>,
    /// Rounds after the first `fes ≤ ε` where `fes` exceeded `ε` again.
    pub persistence_failures: Vec<u64>,
}

impl CertificationReport {
    pub fn violated(&self) -> bool {
        self.descent.violated()
            || self.merit_bound.violated()
            || self.mirror.violated()
            || self.safety.violated()
            || self.termination.as_ref().is_some_and(|c| c.violated)
    }
}

impl fmt::Display for CertificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "certificate report (epsilon = {})", self.epsilon)?;
        writeln!(f, "{}", self.certificates)?;
        let c = &self.conditions;
        writeln!(
            f,
            "step conditions: {} (alpha margin {:.3e}, beta margin {:.3e})",
            if c.satisfied() { "satisfied" } else { "NOT satisfied" },
            c.alpha_margin(),
            c.beta_margin()
        )?;
        writeln!(f, "descent: {}", self.descent)?;
        writeln!(f, "fes <= V: {}", self.merit_bound)?;
        writeln!(f, "mirror consistency: {}", self.mirror)?;
        writeln!(f, "capacity safety: {}", self.safety)?;
        match &self.termination {
            Some(t) => writeln!(
                f,
                "termination: D* = {:.12e}{}, bound {} rounds, V <= epsilon at {}{}",
                t.d_star,
                if t.dual_converged { "" } else { " (unconverged)" },
                t.bound,
                t.first_reach.map_or("-".to_string(), |x| x.to_string()),
                if t.violated { " VIOLATED" } else { "" }
            )?,
            None => writeln!(f, "termination: not applicable")?,
        }
        write!(
            f,
            "persistence: {} rounds with fes > epsilon after first reach",
            self.persistence_failures.len()
        )?;
        if let Some(t) = self.persistence_failures.first() {
            write!(f, " (first at round {t})")?;
        }
        Ok(())
    }
}

/// Absolute slack allowed on the per-round ascent check.
pub const DESCENT_TOLERANCE: f64 = 1e-12;

/// Iteration cap for the centralized dual solve behind the termination
/// check.
pub const DUAL_SOLVE_CAP: u64 = 2_000_000;

/// Re-evaluates the certificates along a trace. Duals are read from the
/// records, so this works for in-memory traces and for traces read back from
/// disk alike.
pub fn certify(
    model: &LinearModel,
    conditions: &[OperatingCondition],
    scenario: &Scenario,
    trace: &SimulationTrace,
    epsilon: f64,
) -> Result<CertificationReport, SimError> {
    let params = &scenario.params;
    let problems: Vec<DualProblem> = conditions
        .iter()
        .map(|c| Ok(DualProblem::new(model, c.tightened(params.rho)?)?))
        .collect::<Result<_, SimError>>()?;
    let problem_of = |r: &TraceRecord| &problems[r.interval.unwrap_or(0).min(problems.len() - 1)];
    let (alpha, beta) = match params.variant {
        Variant::DualBaseline { gamma } => (gamma, gamma),
        _ => (params.alpha, params.beta),
    };
    let conds = StepConditions::new(alpha, beta, epsilon, model);
    let delta = descent_increment(alpha, beta, epsilon, model);
    let is_static = matches!(scenario.kind, ScenarioKind::Static { .. });
    let linear = matches!(scenario.plant, PlantKind::Linear);

    let evals: Vec<_> = trace
        .records
        .iter()
        .map(|r| problem_of(r).evaluate(&r.duals()))
        .collect();

    let mut descent = if !matches!(params.variant, Variant::VcLb) {
        Monitor::NotApplicable("guarantee covers the unprojected quantized controller".into())
    } else if !linear {
        Monitor::NotApplicable("nonlinear plant".into())
    } else if !is_static {
        Monitor::NotApplicable("operating condition changes between intervals".into())
    } else if !conds.satisfied() {
        Monitor::NotApplicable("step sizes outside the guaranteed region".into())
    } else {
        Monitor::checked()
    };
    for (w, e) in trace.records.windows(2).zip(evals.windows(2)) {
        if e[0].merit > epsilon && w[1].t == w[0].t + 1 {
            descent.observe(w[0].t, e[1].objective - e[0].objective - (delta - DESCENT_TOLERANCE));
        }
    }

    let mut merit_bound = Monitor::checked();
    for (r, e) in trace.records.iter().zip(&evals) {
        merit_bound.observe(r.t, e.merit - e.feasibility);
    }

    let mut mirror = match params.variant {
        Variant::DualBaseline { .. } => Monitor::NotApplicable("no quantized mirrors".into()),
        _ => Monitor::checked(),
    };
    if let Some(a) = &trace.aborted {
        mirror.observe(a.round, if a.mirror_inconsistent { -1.0 } else { 0.0 });
    }
    if let Monitor::Checked { rounds, .. } = &mut mirror {
        *rounds = trace.records.len() as u64;
    }

    let mut safety = match params.variant {
        Variant::VcLbP => Monitor::checked(),
        _ => Monitor::NotApplicable("injection is not clamped".into()),
    };
    for r in &trace.records {
        let c = &conditions[r.interval.unwrap_or(0).min(conditions.len() - 1)];
        let worst = r
            .q_phy
            .iter()
            .enumerate()
            .map(|(k, &x)| box_violation(x, c.q_min[k], c.q_max[k]))
            .fold(0.0, f64::max);
        safety.observe(r.t, -worst);
    }

    let first_merit_reach = trace
        .records
        .iter()
        .zip(&evals)
        .find(|(_, e)| e.merit <= epsilon)
        .map(|(r, _)| r.t);

    let termination = if matches!(descent, Monitor::Checked { .. }) && delta > 0.0 {
        let sol = solve_dual(&problems[0], 1e-9, DUAL_SOLVE_CAP);
        let d0 = evals.first().map_or(0.0, |e| e.objective);
        let bound = termination_bound(sol.objective, d0, delta);
        let last_t = trace.records.last().map_or(0, |r| r.t);
        let violated = sol.converged
            && match first_merit_reach {
                Some(t) => t > bound,
                None => last_t >= bound,
            };
        Some(TerminationCheck {
            d_star: sol.objective,
            dual_converged: sol.converged,
            bound,
            first_reach: first_merit_reach,
            violated,
        })
    } else {
        None
    };

    let first_fes = trace.records.iter().find(|r| r.fes <= epsilon).map(|r| r.t);
    let persistence_failures = match first_fes {
        Some(t0) => trace
            .records
            .iter()
            .filter(|r| r.t > t0 && r.fes > epsilon)
            .map(|r| r.t)
            .collect(),
        None => Vec::new(),
    };

    let last = trace.records.last();
    let last_eval = evals.last();
    Ok(CertificationReport {
        epsilon,
        certificates: Certificates {
            fes: last.map_or(f64::NAN, |r| r.fes),
            merit: last_eval.map_or(f64::NAN, |e| e.merit),
            objective: last_eval.map_or(f64::NAN, |e| e.objective),
            delta,
            iteration_bound: iteration_bound(
                model,
                &conditions[0],
                if params.rho > 0.0 { params.rho } else { epsilon },
            ),
            step_alpha: alpha,
            step_beta: beta,
        },
        conditions: conds,
        descent,
        merit_bound,
        mirror,
        safety,
        termination,
        first_merit_reach,
        persistence_failures,
    })
}

/// `%.12g`-style rendering.
pub fn format_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim(&format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn round_sig(x: f64) -> f64 {
    if x.is_finite() {
        format!("{:.11e}", x).parse().expect("round trip")
    } else {
        x
    }
}

pub const CSV_HEADER: &str = "t,bus,v,q,q_phy,lmin,lmax,mmin,mmax,fes,V,D,bits,interval";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    Jsonl,
}

/// One row per round and bus; buses are numbered from 1.
pub fn write_csv(trace: &SimulationTrace, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in &trace.records {
        let interval = r.interval.map_or(String::new(), |i| i.to_string());
        for k in 0..trace.bus_count {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                k + 1,
                format_sig(r.v[k]),
                format_sig(r.q[k]),
                format_sig(r.q_phy[k]),
                format_sig(r.lambda_lo[k]),
                format_sig(r.lambda_hi[k]),
                format_sig(r.mu_lo[k]),
                format_sig(r.mu_hi[k]),
                format_sig(r.fes),
                format_sig(r.merit),
                format_sig(r.objective),
                r.bits,
                interval
            )?;
        }
    }
    Ok(())
}

/// One JSON object per round with per-bus arrays.
pub fn write_jsonl(trace: &SimulationTrace, out: &mut impl Write) -> io::Result<()> {
    let arr = |xs: &[f64]| Value::from(xs.iter().map(|&x| round_sig(x)).collect::<Vec<_>>());
    for r in &trace.records {
        let rec = json!({
            "t": r.t,
            "v": arr(&r.v),
            "q": arr(&r.q),
            "q_phy": arr(&r.q_phy),
            "lmin": arr(&r.lambda_lo),
            "lmax": arr(&r.lambda_hi),
            "mmin": arr(&r.mu_lo),
            "mmax": arr(&r.mu_hi),
            "fes": round_sig(r.fes),
            "V": round_sig(r.merit),
            "D": round_sig(r.objective),
            "bits": r.bits,
            "interval": r.interval,
            "residual": r.residual.map(round_sig),
        });
        serde_json::to_writer(&mut *out, &rec)?;
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_trace(
    trace: &SimulationTrace,
    format: TraceFormat,
    out: &mut impl Write,
) -> io::Result<()> {
    match format {
        TraceFormat::Csv => write_csv(trace, out),
        TraceFormat::Jsonl => write_jsonl(trace, out),
    }
}

fn format_err(line: usize, message: impl Into<String>) -> SimError {
    SimError::TraceFormat {
        line,
        message: message.into(),
    }
}

fn empty_record(t: u64, n: usize) -> TraceRecord {
    TraceRecord {
        t,
        v: vec![0.0; n],
        q: vec![0.0; n],
        q_phy: vec![0.0; n],
        lambda_lo: vec![0.0; n],
        lambda_hi: vec![0.0; n],
        mu_lo: vec![0.0; n],
        mu_hi: vec![0.0; n],
        fes: 0.0,
        merit: 0.0,
        objective: 0.0,
        bits: 0,
        interval: None,
        residual: None,
    }
}

/// Reads a trace written by [`write_csv`] or [`write_jsonl`]; the format is
/// detected from the first line.
pub fn read_trace(input: impl BufRead, bus_count: usize) -> Result<SimulationTrace, SimError> {
    let mut lines = input.lines().enumerate().peekable();
    let mut records: Vec<TraceRecord> = Vec::new();
    let jsonl = match lines.peek() {
        Some((_, Ok(l))) => l.trim_start().starts_with('{'),
        _ => false,
    };
    if !jsonl {
        match lines.next() {
            Some((_, Ok(h))) if h.trim() == CSV_HEADER => {}
            Some((_, Ok(_))) => return Err(format_err(1, "unexpected CSV header")),
            Some((_, Err(e))) => return Err(e.into()),
            None => return Err(format_err(1, "empty trace")),
        }
    }
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if jsonl {
            records.push(parse_json_record(&line, bus_count, lineno)?);
        } else {
            parse_csv_row(&line, bus_count, lineno, &mut records)?;
        }
    }
    for r in &records {
        if r.v.len() != bus_count {
            return Err(format_err(0, format!("round {} has missing buses", r.t)));
        }
    }
    Ok(SimulationTrace {
        bus_count,
        records,
        aborted: None,
    })
}

fn parse_csv_row(
    line: &str,
    n: usize,
    lineno: usize,
    records: &mut Vec<TraceRecord>,
) -> Result<(), SimError> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 14 {
        return Err(format_err(lineno, format!("expected 14 fields, found {}", fields.len())));
    }
    let num = |k: usize| -> Result<f64, SimError> {
        fields[k]
            .parse::<f64>()
            .map_err(|_| format_err(lineno, format!("bad number '{}'", fields[k])))
    };
    let int = |k: usize| -> Result<u64, SimError> {
        fields[k]
            .parse::<u64>()
            .map_err(|_| format_err(lineno, format!("bad integer '{}'", fields[k])))
    };
    let t = int(0)?;
    let bus = int(1)? as usize;
    if bus == 0 || bus > n {
        return Err(format_err(lineno, format!("bus {bus} out of range")));
    }
    if records.last().is_none_or(|r| r.t != t) {
        records.push(empty_record(t, n));
    }
    let r = records.last_mut().expect("record pushed");
    let k = bus - 1;
    r.v[k] = num(2)?;
    r.q[k] = num(3)?;
    r.q_phy[k] = num(4)?;
    r.lambda_lo[k] = num(5)?;
    r.lambda_hi[k] = num(6)?;
    r.mu_lo[k] = num(7)?;
    r.mu_hi[k] = num(8)?;
    r.fes = num(9)?;
    r.merit = num(10)?;
    r.objective = num(11)?;
    r.bits = int(12)?;
    r.interval = if fields[13].is_empty() {
        None
    } else {
        Some(int(13)? as usize)
    };
    Ok(())
}

fn parse_json_record(line: &str, n: usize, lineno: usize) -> Result<TraceRecord, SimError> {
    let v: Value =
        serde_json::from_str(line).map_err(|e| format_err(lineno, e.to_string()))?;
    let num = |key: &str| {
        v[key]
            .as_f64()
            .ok_or_else(|| format_err(lineno, format!("missing number '{key}'")))
    };
    let int = |key: &str| {
        v[key]
            .as_u64()
            .ok_or_else(|| format_err(lineno, format!("missing integer '{key}'")))
    };
    let arr = |key: &str| -> Result<Vec<f64>, SimError> {
        let xs = v[key]
            .as_array()
            .ok_or_else(|| format_err(lineno, format!("missing array '{key}'")))?;
        if xs.len() != n {
            return Err(format_err(lineno, format!("'{key}' has {} entries, expected {n}", xs.len())));
        }
        xs.iter()
            .map(|x| x.as_f64().ok_or_else(|| format_err(lineno, format!("bad entry in '{key}'"))))
            .collect()
    };
    Ok(TraceRecord {
        t: int("t")?,
        v: arr("v")?,
        q: arr("q")?,
        q_phy: arr("q_phy")?,
        lambda_lo: arr("lmin")?,
        lambda_hi: arr("lmax")?,
        mu_lo: arr("mmin")?,
        mu_hi: arr("mmax")?,
        fes: num("fes")?,
        merit: num("V")?,
        objective: num("D")?,
        bits: int("bits")?,
        interval: v["interval"].as_u64().map(|x| x as usize),
        residual: v["residual"].as_f64(),
    })
}
