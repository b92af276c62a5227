//! Python bindings for the `voltreg` crate.
//!
//! ```python
//! import voltreg
//! f = voltreg.Feeder.generate("tree,N=10", seed=1)
//! t = voltreg.simulate(f, theorem1_steps=True, rounds=500)
//! print(t.summary(0.1).final_fes)
//! ```

use nalgebra::DVector;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use voltreg::analysis::{self, DualProblem, DualVector};
use voltreg::control::{BitMode, ControllerParams};
use voltreg::feeder::{emit_feeder, parse_feeder, parse_feeder_str};
use voltreg::generator::{generate_feeder, GeneratorSpec};
use voltreg::grid::{build_matrices, Line, LinearModel, RadialNetwork};
use voltreg::plant::{evaluate_voltage, OperatingCondition, PlantKind};
use voltreg::sim::{self, DynamicProtocol, Scenario, ScenarioKind, SimulationTrace, TraceFormat};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn plant_kind(name: &str) -> PyResult<PlantKind> {
    match name {
        "linear" => Ok(PlantKind::Linear),
        "distflow" => Ok(PlantKind::distflow()),
        other => Err(PyValueError::new_err(format!("unknown plant '{other}'"))),
    }
}

/// A radial feeder together with its linear model and operating condition.
#[pyclass(module = "voltreg", skip_from_py_object)]
#[derive(Clone)]
struct Feeder {
    network: RadialNetwork,
    model: LinearModel,
    condition: OperatingCondition,
}

impl Feeder {
    fn build(network: RadialNetwork, condition: OperatingCondition) -> PyResult<Self> {
        if condition.dim() != network.bus_count() {
            return Err(PyValueError::new_err("condition size does not match the network"));
        }
        let model = build_matrices(&network).map_err(value_err)?;
        Ok(Self {
            network,
            model,
            condition,
        })
    }

    fn problem(&self) -> PyResult<DualProblem<'_>> {
        DualProblem::new(&self.model, self.condition.clone()).map_err(value_err)
    }

    fn duals(&self, z: Vec<f64>) -> PyResult<DualVector> {
        if z.len() != 4 * self.model.dim() {
            return Err(PyValueError::new_err(format!(
                "expected {} dual entries, got {}",
                4 * self.model.dim(),
                z.len()
            )));
        }
        DualVector::from_stacked(&DVector::from_vec(z)).map_err(value_err)
    }
}

#[pymethods]
impl Feeder {
    /// Builds a feeder from `(parent, child, r, x)` lines and per-bus data.
    #[new]
    #[pyo3(signature = (lines, p, q_u, v_min, v_max, q_min, q_max, v0=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lines: Vec<(usize, usize, f64, f64)>,
        p: Vec<f64>,
        q_u: Vec<f64>,
        v_min: Vec<f64>,
        v_max: Vec<f64>,
        q_min: Vec<f64>,
        q_max: Vec<f64>,
        v0: f64,
    ) -> PyResult<Self> {
        let n = lines.len();
        let lines = lines.into_iter().map(|(a, b, r, x)| Line::new(a, b, r, x)).collect();
        let network = RadialNetwork::new(n, v0, lines).map_err(value_err)?;
        let v = DVector::from_vec;
        let condition = OperatingCondition::new(v(p), v(q_u), v(v_min), v(v_max), v(q_min), v(q_max))
            .map_err(value_err)?;
        Self::build(network, condition)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        let (net, cond) = parse_feeder_str(text).map_err(value_err)?;
        Self::build(net, cond)
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (net, cond) = parse_feeder(&path).map_err(value_err)?;
        Self::build(net, cond)
    }

    /// Generates a feeder from a spec string such as `"tree,N=20"` or `"paper"`.
    #[staticmethod]
    #[pyo3(signature = (spec, seed=0))]
    fn generate(spec: &str, seed: u64) -> PyResult<Self> {
        let spec: GeneratorSpec = spec.parse().map_err(value_err)?;
        let g = generate_feeder(&spec.with_seed(seed)).map_err(value_err)?;
        Self::build(g.network, g.condition)
    }

    fn emit(&self) -> String {
        emit_feeder(&self.network, &self.condition)
    }

    #[getter]
    fn bus_count(&self) -> usize {
        self.network.bus_count()
    }

    #[getter]
    fn v0(&self) -> f64 {
        self.network.v0()
    }

    #[getter]
    fn lines(&self) -> Vec<(usize, usize, f64, f64)> {
        self.network.lines().iter().map(|l| (l.parent, l.child, l.r, l.x)).collect()
    }

    #[getter]
    fn lipschitz(&self) -> f64 {
        self.model.lipschitz()
    }

    fn a(&self) -> Vec<Vec<f64>> {
        rows(self.model.a())
    }

    fn b(&self) -> Vec<Vec<f64>> {
        rows(self.model.b())
    }

    fn a_inv(&self) -> Vec<Vec<f64>> {
        rows(self.model.a_inv())
    }

    fn eigenvalues(&self) -> Vec<f64> {
        self.model.eigenvalues_a().to_vec()
    }

    /// Squared voltages at reactive setpoint `q`.
    #[pyo3(signature = (q, plant="distflow"))]
    fn evaluate_voltage(&self, q: Vec<f64>, plant: &str) -> PyResult<Vec<f64>> {
        if q.len() != self.network.bus_count() {
            return Err(PyValueError::new_err("q has the wrong length"));
        }
        evaluate_voltage(
            plant_kind(plant)?,
            &self.network,
            &self.model,
            &self.condition,
            &DVector::from_vec(q),
        )
        .map(|v| v.iter().copied().collect())
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// `∇D(z)` for stacked duals `[λ_lo; λ_hi; μ_lo; μ_hi]`.
    fn dual_gradient(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        let z = self.duals(z)?;
        Ok(self.problem()?.gradient(&z).iter().copied().collect())
    }

    fn dual_objective(&self, z: Vec<f64>) -> PyResult<f64> {
        let z = self.duals(z)?;
        Ok(self.problem()?.objective(&z))
    }

    fn merit(&self, z: Vec<f64>) -> PyResult<f64> {
        let z = self.duals(z)?;
        Ok(self.problem()?.merit(&z))
    }

    fn feasibility(&self, q: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
        let n = self.network.bus_count();
        if q.len() != n || v.len() != n {
            return Err(PyValueError::new_err("q and v need one entry per bus"));
        }
        Ok(analysis::feasibility(&DVector::from_vec(q), &DVector::from_vec(v), &self.condition))
    }

    /// `(alpha, beta)` prescribed for accuracy `epsilon`.
    fn prescribe_steps(&self, epsilon: f64) -> PyResult<(f64, f64)> {
        let s = analysis::prescribe_steps(&self.model, epsilon).map_err(value_err)?;
        Ok((s.alpha, s.beta))
    }

    fn iteration_bound(&self, epsilon: f64) -> u64 {
        analysis::iteration_bound(&self.model, &self.condition, epsilon)
    }

    fn descent_increment(&self, alpha: f64, beta: f64, epsilon: f64) -> f64 {
        analysis::descent_increment(alpha, beta, epsilon, &self.model)
    }

    /// Centralized dual solve; returns `(z, D, V, iterations)`.
    #[pyo3(signature = (tolerance=1e-9, max_iterations=1_000_000))]
    fn solve_dual(&self, tolerance: f64, max_iterations: u64) -> PyResult<(Vec<f64>, f64, f64, u64)> {
        let sol = analysis::solve_dual(&self.problem()?, tolerance, max_iterations);
        Ok((sol.z.stacked().iter().copied().collect(), sol.objective, sol.merit, sol.iterations))
    }

    fn __repr__(&self) -> String {
        format!("Feeder(buses={}, v0={})", self.network.bus_count(), self.network.v0())
    }
}

#[pyclass(module = "voltreg", get_all, skip_from_py_object)]
#[derive(Clone)]
struct Summary {
    rounds: u64,
    final_fes: f64,
    first_feasible: Option<u64>,
    voltage_settled: Option<u64>,
    max_q_phy_violation: f64,
    final_q_gap: f64,
    max_residual: Option<f64>,
    final_bits: u64,
    text: String,
}

#[pymethods]
impl Summary {
    fn __str__(&self) -> String {
        self.text.clone()
    }
}

/// A completed run.
#[pyclass(module = "voltreg")]
struct Trace {
    feeder: Feeder,
    scenario: Scenario,
    trace: SimulationTrace,
}

impl Trace {
    fn column(&self, pick: impl Fn(&sim::TraceRecord) -> f64) -> Vec<f64> {
        self.trace.records.iter().map(pick).collect()
    }

    fn conditions(&self) -> Vec<OperatingCondition> {
        sim::scenario_conditions(&self.feeder.condition, &self.scenario.kind)
    }

    fn render(&self, format: TraceFormat) -> PyResult<String> {
        let mut out = Vec::new();
        sim::write_trace(&self.trace, format, &mut out).map_err(value_err)?;
        String::from_utf8(out).map_err(value_err)
    }
}

#[pymethods]
impl Trace {
    fn __len__(&self) -> usize {
        self.trace.records.len()
    }

    #[getter]
    fn aborted(&self) -> Option<String> {
        self.trace.aborted.as_ref().map(|a| format!("round {}: {}", a.round, a.reason))
    }

    fn fes(&self) -> Vec<f64> {
        self.column(|r| r.fes)
    }

    fn merit(&self) -> Vec<f64> {
        self.column(|r| r.merit)
    }

    fn objective(&self) -> Vec<f64> {
        self.column(|r| r.objective)
    }

    fn bits(&self) -> Vec<u64> {
        self.trace.records.iter().map(|r| r.bits).collect()
    }

    fn v(&self) -> Vec<Vec<f64>> {
        self.trace.records.iter().map(|r| r.v.clone()).collect()
    }

    fn q(&self) -> Vec<Vec<f64>> {
        self.trace.records.iter().map(|r| r.q.clone()).collect()
    }

    fn q_phy(&self) -> Vec<Vec<f64>> {
        self.trace.records.iter().map(|r| r.q_phy.clone()).collect()
    }

    fn to_csv(&self) -> PyResult<String> {
        self.render(TraceFormat::Csv)
    }

    fn to_jsonl(&self) -> PyResult<String> {
        self.render(TraceFormat::Jsonl)
    }

    #[pyo3(signature = (epsilon=0.1, band_tolerance=sim::DEFAULT_BAND_TOLERANCE))]
    fn summary(&self, epsilon: f64, band_tolerance: f64) -> Summary {
        let s = sim::summarize(&self.trace, &self.conditions(), epsilon, band_tolerance);
        Summary {
            rounds: s.rounds,
            final_fes: s.final_fes,
            first_feasible: s.first_feasible.map(|(t, _)| t),
            voltage_settled: s.voltage_settled,
            max_q_phy_violation: s.max_q_phy_violation,
            final_q_gap: s.final_q_gap,
            max_residual: s.max_residual,
            final_bits: s.final_bits,
            text: s.to_string(),
        }
    }

    /// Returns `(violated, report)`.
    #[pyo3(signature = (epsilon=0.1))]
    fn certify(&self, epsilon: f64) -> PyResult<(bool, String)> {
        let report = sim::certify(&self.feeder.model, &self.conditions(), &self.scenario, &self.trace, epsilon)
            .map_err(value_err)?;
        Ok((report.violated(), report.to_string()))
    }
}

/// Runs the controllers on `feeder`.
///
/// `dynamic` is `(intervals, rounds_per_interval, scale_lo, scale_hi)`; when
/// given, `rounds` is ignored and `seed` drives the load draws.
#[pyfunction]
#[pyo3(signature = (
    feeder, controller="vclb", alpha=None, beta=None, gamma=None, rho=0.0, epsilon=0.1,
    theorem1_steps=false, rounds=1000, plant="linear", dynamic=None, seed=0, per_link=false
))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    feeder: &Feeder,
    controller: &str,
    alpha: Option<f64>,
    beta: Option<f64>,
    gamma: Option<f64>,
    rho: f64,
    epsilon: f64,
    theorem1_steps: bool,
    rounds: u64,
    plant: &str,
    dynamic: Option<(usize, u64, f64, f64)>,
    seed: u64,
    per_link: bool,
) -> PyResult<Trace> {
    let steps = || -> PyResult<(f64, f64)> {
        if theorem1_steps {
            feeder.prescribe_steps(epsilon)
        } else {
            match (alpha, beta) {
                (Some(a), Some(b)) => Ok((a, b)),
                _ => Err(PyValueError::new_err("give alpha and beta or theorem1_steps=True")),
            }
        }
    };
    let params = match controller {
        "vclb" => {
            let (a, b) = steps()?;
            ControllerParams::vclb(a, b)
        }
        "vclbp" => {
            let (a, b) = steps()?;
            ControllerParams::vclbp(a, b)
        }
        "baseline" => {
            let g = match (gamma, theorem1_steps) {
                (Some(g), _) => g,
                (None, true) => 1.0 / feeder.model.lipschitz(),
                (None, false) => return Err(PyValueError::new_err("baseline needs gamma")),
            };
            ControllerParams::baseline(g)
        }
        other => return Err(PyValueError::new_err(format!("unknown controller '{other}'"))),
    }
    .with_rho(rho);
    let kind = match dynamic {
        Some((intervals, rpi, lo, hi)) => {
            ScenarioKind::Dynamic(DynamicProtocol::new(intervals, rpi, (lo, hi), seed))
        }
        None => ScenarioKind::Static { rounds },
    };
    let mut scenario = Scenario::new(kind, plant_kind(plant)?, params);
    if per_link {
        scenario.bit_mode = BitMode::PerLink;
    }
    let trace = sim::run(&feeder.network, &feeder.model, &feeder.condition, &scenario)
        .map_err(value_err)?;
    Ok(Trace {
        feeder: feeder.clone(),
        scenario,
        trace,
    })
}

/// The three scalar projection relations as `(scaled_step, sign_step, monotone)`.
#[pyfunction]
fn projection_identities(x: f64, z: f64, beta: f64, a1: f64, a2: f64) -> PyResult<(bool, bool, bool)> {
    let c = analysis::projection_identities(x, z, beta, a1, a2).map_err(value_err)?;
    Ok((c.scaled_step, c.sign_step, c.monotone))
}

#[pymodule]
#[pyo3(name = "voltreg")]
pub fn voltreg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Feeder>()?;
    m.add_class::<Trace>()?;
    m.add_class::<Summary>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(projection_identities, m)?)?;
    Ok(())
}
