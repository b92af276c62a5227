//! Dual-side quantities: the feasibility metric, dual objective and gradient,
//! the merit function `V`, step-size prescriptions and the certificate
//! constants derived from them.
//!
//! Duals are stacked as `z = [λ_lo; λ_hi; μ_lo; μ_hi]` and every stacked
//! vector in this module uses that order.

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::control::ControllerState;
use crate::grid::LinearModel;
use crate::plant::{constant_term, OperatingCondition, PlantError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("epsilon must lie in (0, 1], got {0}")]
    Epsilon(f64),
    #[error("dual vector has length {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("dual vector has a negative component at position {0}")]
    Negative(usize),
    #[error("projection identity precondition violated: a1 = {a1} exceeds |x - [x+z]+| = {bound}")]
    Precondition { a1: f64, bound: f64 },
    #[error(transparent)]
    Plant(#[from] PlantError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualVector {
    pub lambda_lo: DVector<f64>,
    pub lambda_hi: DVector<f64>,
    pub mu_lo: DVector<f64>,
    pub mu_hi: DVector<f64>,
}

impl DualVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            lambda_lo: DVector::zeros(n),
            lambda_hi: DVector::zeros(n),
            mu_lo: DVector::zeros(n),
            mu_hi: DVector::zeros(n),
        }
    }

    pub fn dim(&self) -> usize {
        self.lambda_lo.len()
    }

    pub fn from_stacked(z: &DVector<f64>) -> Result<Self, AnalysisError> {
        if !z.len().is_multiple_of(4) {
            return Err(AnalysisError::Dimension {
                expected: 4 * (z.len() / 4),
                found: z.len(),
            });
        }
        if let Some(k) = z.iter().position(|&x| !(x >= 0.0)) {
            return Err(AnalysisError::Negative(k));
        }
        let n = z.len() / 4;
        let part = |b: usize| DVector::from_iterator(n, z.rows(b * n, n).iter().copied());
        Ok(Self {
            lambda_lo: part(0),
            lambda_hi: part(1),
            mu_lo: part(2),
            mu_hi: part(3),
        })
    }

    pub fn stacked(&self) -> DVector<f64> {
        let n = self.dim();
        let mut z = DVector::zeros(4 * n);
        for (b, part) in self.parts().iter().enumerate() {
            z.rows_mut(b * n, n).copy_from(part);
        }
        z
    }

    fn parts(&self) -> [&DVector<f64>; 4] {
        [&self.lambda_lo, &self.lambda_hi, &self.mu_lo, &self.mu_hi]
    }

    /// Collects the duals owned by each bus.
    pub fn from_states(states: &[ControllerState]) -> Self {
        let n = states.len();
        let col = |f: &dyn Fn(&ControllerState) -> f64| {
            DVector::from_iterator(n, states.iter().map(f))
        };
        Self {
            lambda_lo: col(&|s| s.lambda.lo),
            lambda_hi: col(&|s| s.lambda.hi),
            mu_lo: col(&|s| s.mu.lo),
            mu_hi: col(&|s| s.mu.hi),
        }
    }

    /// `q(z) = λ_lo - λ_hi + A^{-1}(μ_lo - μ_hi)`.
    pub fn primal(&self, model: &LinearModel) -> DVector<f64> {
        model.primal_from_duals(
            self.lambda_lo.as_slice(),
            self.lambda_hi.as_slice(),
            self.mu_lo.as_slice(),
            self.mu_hi.as_slice(),
        )
    }
}

/// Constraint residuals `[v_min - v; v - v_max; q_min - q; q - q_max]`.
pub fn constraint_residuals(
    cond: &OperatingCondition,
    q: &DVector<f64>,
    v: &DVector<f64>,
) -> DVector<f64> {
    let n = cond.dim();
    assert_eq!(q.len(), n, "q dimension");
    assert_eq!(v.len(), n, "v dimension");
    let mut g = DVector::zeros(4 * n);
    for k in 0..n {
        g[k] = cond.v_min[k] - v[k];
        g[n + k] = v[k] - cond.v_max[k];
        g[2 * n + k] = cond.q_min[k] - q[k];
        g[3 * n + k] = q[k] - cond.q_max[k];
    }
    g
}

fn positive_norm(g: &DVector<f64>) -> f64 {
    g.iter().map(|&x| x.max(0.0).powi(2)).sum::<f64>().sqrt()
}

/// Distance of `(q, v)` to the box product.
pub fn feasibility(q: &DVector<f64>, v: &DVector<f64>, cond: &OperatingCondition) -> f64 {
    positive_norm(&constraint_residuals(cond, q, v))
}

/// The dual problem of one operating condition on the linear model.
#[derive(Debug, Clone)]
pub struct DualProblem<'a> {
    model: &'a LinearModel,
    cond: OperatingCondition,
    d: DVector<f64>,
}

impl<'a> DualProblem<'a> {
    pub fn new(model: &'a LinearModel, cond: OperatingCondition) -> Result<Self, AnalysisError> {
        let d = constant_term(model, &cond)?;
        Ok(Self { model, cond, d })
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

    fn check(&self, z: &DualVector) {
        assert_eq!(z.dim(), self.model.dim(), "dual dimension");
    }

    /// `(q(z), A q(z) + d)`.
    pub fn primal(&self, z: &DualVector) -> (DVector<f64>, DVector<f64>) {
        self.check(z);
        let q = z.primal(self.model);
        let v = self.model.a() * &q + &self.d;
        (q, v)
    }

    pub fn gradient(&self, z: &DualVector) -> DVector<f64> {
        let (q, v) = self.primal(z);
        constraint_residuals(&self.cond, &q, &v)
    }

    pub fn objective(&self, z: &DualVector) -> f64 {
        let (q, v) = self.primal(z);
        let g = constraint_residuals(&self.cond, &q, &v);
        0.5 * q.dot(&(self.model.a() * &q)) + z.stacked().dot(&g)
    }

    pub fn merit(&self, z: &DualVector) -> f64 {
        merit_from_gradient(&z.stacked(), &self.gradient(z))
    }

    /// `fes(q(z))` evaluated on the linear model.
    pub fn feasibility(&self, z: &DualVector) -> f64 {
        positive_norm(&self.gradient(z))
    }

    /// `V`, `D` and `fes` at `z` from a single primal recovery.
    pub fn evaluate(&self, z: &DualVector) -> DualEvaluation {
        let (q, v) = self.primal(z);
        let g = constraint_residuals(&self.cond, &q, &v);
        let zs = z.stacked();
        DualEvaluation {
            objective: 0.5 * q.dot(&(self.model.a() * &q)) + zs.dot(&g),
            merit: merit_from_gradient(&zs, &g),
            feasibility: positive_norm(&g),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualEvaluation {
    pub objective: f64,
    pub merit: f64,
    pub feasibility: f64,
}

/// `‖z - [z + g]₊‖`. Each component is evaluated as `|g|` when `z + g ≥ 0`
/// and as `z` otherwise, and components are summed in stacked order, so the
/// result never falls below `‖[g]₊‖` in floating point.
pub fn merit_from_gradient(z: &DVector<f64>, g: &DVector<f64>) -> f64 {
    z.iter()
        .zip(g.iter())
        .map(|(&zi, &gi)| {
            let c = if zi + gi >= 0.0 { gi.abs() } else { zi };
            c * c
        })
        .sum::<f64>()
        .sqrt()
}

pub fn dual_gradient(
    z: &DualVector,
    model: &LinearModel,
    cond: &OperatingCondition,
) -> Result<DVector<f64>, AnalysisError> {
    Ok(DualProblem::new(model, cond.clone())?.gradient(z))
}

pub fn dual_objective(
    z: &DualVector,
    model: &LinearModel,
    cond: &OperatingCondition,
) -> Result<f64, AnalysisError> {
    Ok(DualProblem::new(model, cond.clone())?.objective(z))
}

pub fn merit_v(
    z: &DualVector,
    model: &LinearModel,
    cond: &OperatingCondition,
) -> Result<f64, AnalysisError> {
    Ok(DualProblem::new(model, cond.clone())?.merit(z))
}

/// Admissible step-size region for guaranteed dual ascent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConditions {
    pub alpha: f64,
    pub beta: f64,
    /// `2 / L`
    pub alpha_limit: f64,
    /// `ε / (2 N^{3/2} L)`
    pub beta_limit_linear: f64,
    /// `sqrt(α(1 - Lα/2) ε² / (2NL))`, zero when `α ≥ 2/L`.
    pub beta_limit_root: f64,
}

impl StepConditions {
    pub fn new(alpha: f64, beta: f64, epsilon: f64, model: &LinearModel) -> Self {
        let n = model.dim() as f64;
        let l = model.lipschitz();
        let root = alpha * (1.0 - l * alpha / 2.0) * epsilon * epsilon / (2.0 * n * l);
        Self {
            alpha,
            beta,
            alpha_limit: 2.0 / l,
            beta_limit_linear: epsilon / (2.0 * n.powf(1.5) * l),
            beta_limit_root: if root > 0.0 { root.sqrt() } else { 0.0 },
        }
    }

    pub fn beta_limit(&self) -> f64 {
        self.beta_limit_linear.min(self.beta_limit_root)
    }

    pub fn alpha_margin(&self) -> f64 {
        self.alpha_limit - self.alpha
    }

    pub fn beta_margin(&self) -> f64 {
        self.beta_limit() - self.beta
    }

    pub fn satisfied(&self) -> bool {
        self.alpha > 0.0 && self.beta > 0.0 && self.alpha_margin() > 0.0 && self.beta_margin() > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPrescription {
    pub alpha: f64,
    pub beta: f64,
    pub conditions: StepConditions,
}

/// `α = 1/L`, `β = ε / (4 N^{3/2} L)`.
pub fn prescribe_steps(model: &LinearModel, epsilon: f64) -> Result<StepPrescription, AnalysisError> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(AnalysisError::Epsilon(epsilon));
    }
    let n = model.dim() as f64;
    let l = model.lipschitz();
    let alpha = 1.0 / l;
    let beta = epsilon / (4.0 * n.powf(1.5) * l);
    Ok(StepPrescription {
        alpha,
        beta,
        conditions: StepConditions::new(alpha, beta, epsilon, model),
    })
}

/// Guaranteed per-round ascent of `D` while `V > ε`:
/// `min{(α - Lα²/2)ε²/2 - NLβ², εβLN/(2N^{3/2}L) - β²LN}`.
pub fn descent_increment(alpha: f64, beta: f64, epsilon: f64, model: &LinearModel) -> f64 {
    let n = model.dim() as f64;
    let l = model.lipschitz();
    let first = (alpha - l * alpha * alpha / 2.0) * epsilon * epsilon / 2.0 - n * l * beta * beta;
    let second = epsilon * beta * l * n / (2.0 * n.powf(1.5) * l) - beta * beta * l * n;
    first.min(second)
}

/// `max_i max(q_min², q_max²)`.
pub fn capacity_bound(cond: &OperatingCondition) -> f64 {
    cond.q_min
        .iter()
        .chain(cond.q_max.iter())
        .map(|x| x * x)
        .fold(0.0, f64::max)
}

/// `16 N³ L Q λ_max(A) / ε²` before rounding up.
pub fn iteration_bound_raw(model: &LinearModel, cond: &OperatingCondition, epsilon: f64) -> f64 {
    let n = model.dim() as f64;
    16.0 * n.powi(3) * model.lipschitz() * capacity_bound(cond) * model.lambda_max_a()
        / (epsilon * epsilon)
}

/// Round cap for reaching `fes ≤ ε` (pass `ρ` as `epsilon` for the
/// tightened problem).
pub fn iteration_bound(model: &LinearModel, cond: &OperatingCondition, epsilon: f64) -> u64 {
    iteration_bound_raw(model, cond, epsilon).ceil().max(1.0) as u64
}

/// `⌈(D* - D(z(0))) / δ⌉`.
pub fn termination_bound(d_star: f64, d_initial: f64, delta: f64) -> u64 {
    ((d_star - d_initial) / delta).ceil().max(0.0) as u64
}

/// The matrix with `∇D(z) = M z + ∇D(0)`.
pub fn build_m(model: &LinearModel) -> DMatrix<f64> {
    let n = model.dim();
    let a = model.a();
    let ai = model.a_inv();
    let id = DMatrix::<f64>::identity(n, n);
    let blocks: [[(&DMatrix<f64>, f64); 4]; 4] = [
        [(a, -1.0), (a, 1.0), (&id, -1.0), (&id, 1.0)],
        [(a, 1.0), (a, -1.0), (&id, 1.0), (&id, -1.0)],
        [(&id, -1.0), (&id, 1.0), (ai, -1.0), (ai, 1.0)],
        [(&id, 1.0), (&id, -1.0), (ai, 1.0), (ai, -1.0)],
    ];
    let mut m = DMatrix::zeros(4 * n, 4 * n);
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, (blk, s)) in row.iter().enumerate() {
            m.view_mut((bi * n, bj * n), (n, n)).copy_from(&(*blk * *s));
        }
    }
    m
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Outcome of the three scalar projection relations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionCheck {
    /// `β|x - [x+z]₊| ≤ |x - [x+βz]₊|`
    pub scaled_step: bool,
    /// `a1 = |x - [x + a1 sign(z)]₊|`
    pub sign_step: bool,
    /// `0 ≤ z([x + a2 z]₊ - x)`
    pub monotone: bool,
}

impl ProjectionCheck {
    pub fn all(&self) -> bool {
        self.scaled_step && self.sign_step && self.monotone
    }
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Checks the scalar projection relations for `x ≥ 0`, `β ∈ [0,1]`,
/// `0 ≤ a1 ≤ |x - [x+z]₊|`, `a2 ≥ 0`. The first two compare rounded
/// projections, so they are accepted within `1e-12·max(1, |x|, |z|)`.
pub fn projection_identities(
    x: f64,
    z: f64,
    beta01: f64,
    a1: f64,
    a2: f64,
) -> Result<ProjectionCheck, AnalysisError> {
    let full = (x - pos(x + z)).abs();
    if !(x >= 0.0 && (0.0..=1.0).contains(&beta01) && a1 >= 0.0 && a2 >= 0.0) || a1 > full {
        return Err(AnalysisError::Precondition { a1, bound: full });
    }
    let tol = 1e-12 * 1f64.max(x.abs()).max(z.abs());
    let sign = if z > 0.0 {
        1.0
    } else if z < 0.0 {
        -1.0
    } else {
        0.0
    };
    Ok(ProjectionCheck {
        scaled_step: beta01 * full <= (x - pos(x + beta01 * z)).abs() + tol,
        sign_step: (a1 - (x - pos(x + a1 * sign)).abs()).abs() <= tol,
        monotone: z * (pos(x + a2 * z) - x) >= 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub z: DualVector,
    pub objective: f64,
    pub merit: f64,
    pub iterations: u64,
    pub converged: bool,
}

/// Centralized projected gradient ascent on `D` with step `1/L`, run until
/// `V ≤ tolerance` or `max_iterations`.
pub fn solve_dual(problem: &DualProblem<'_>, tolerance: f64, max_iterations: u64) -> DualSolution {
    let gamma = 1.0 / problem.model().lipschitz();
    let mut z = DualVector::zeros(problem.model().dim()).stacked();
    let mut iterations = 0;
    loop {
        let zv = DualVector::from_stacked(&z).expect("iterate stays nonnegative");
        let g = problem.gradient(&zv);
        let merit = merit_from_gradient(&z, &g);
        if merit <= tolerance || iterations >= max_iterations {
            return DualSolution {
                objective: problem.objective(&zv),
                z: zv,
                merit,
                iterations,
                converged: merit <= tolerance,
            };
        }
        z.zip_apply(&g, |zi, gi| *zi = pos(*zi + gamma * gi));
        iterations += 1;
    }
}

/// Certificate constants of one instance and step-size pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificates {
    pub fes: f64,
    pub merit: f64,
    pub objective: f64,
    pub delta: f64,
    pub iteration_bound: u64,
    pub step_alpha: f64,
    pub step_beta: f64,
}

impl fmt::Display for Certificates {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fes = {:.6e}", self.fes)?;
        writeln!(f, "V = {:.6e}", self.merit)?;
        writeln!(f, "D = {:.12e}", self.objective)?;
        writeln!(f, "delta = {:.6e}", self.delta)?;
        writeln!(f, "iteration bound = {}", self.iteration_bound)?;
        write!(f, "alpha = {:.6e}, beta = {:.6e}", self.step_alpha, self.step_beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_matrices, Line, RadialNetwork};

    fn single() -> LinearModel {
        let net = RadialNetwork::new(1, 1.0, vec![Line::new(0, 1, 0.1, 0.2)]).unwrap();
        build_matrices(&net).unwrap()
    }

    fn chain3() -> LinearModel {
        let net = RadialNetwork::new(
            2,
            1.0,
            vec![Line::new(0, 1, 0.1, 0.2), Line::new(1, 2, 0.05, 0.1)],
        )
        .unwrap();
        build_matrices(&net).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn box_cond(n: usize) -> OperatingCondition {
        OperatingCondition::uniform(n, (0.95, 1.05), (-0.5, 0.5)).unwrap()
    }

    #[test]
    fn feasibility_examples() {
        let c = box_cond(2);
        assert_eq!(feasibility(&v(&[0.0, 0.1]), &v(&[1.0, 1.0]), &c), 0.0);
        assert!((feasibility(&v(&[0.6, 0.0]), &v(&[1.0, 1.0]), &c) - 0.1).abs() < 1e-12);
        assert!((feasibility(&v(&[0.8, 0.0]), &v(&[1.0, 0.55]), &c) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gradient_at_zero() {
        let m = chain3();
        let mut c = box_cond(2);
        c.p = v(&[-0.2, -0.1]);
        let d = constant_term(&m, &c).unwrap();
        let g = dual_gradient(&DualVector::zeros(2), &m, &c).unwrap();
        let expect = [0.95 - d[0], 0.95 - d[1], d[0] - 1.05, d[1] - 1.05, -0.5, -0.5, -0.5, -0.5];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_single_bus_substitution() {
        let m = single();
        let mut c = box_cond(1);
        c.p = v(&[-0.1]);
        let z = DualVector::from_stacked(&v(&[0.1, 0.0, 0.2, 0.0])).unwrap();
        let g = dual_gradient(&z, &m, &c).unwrap();
        let volt = 0.4 * 0.6 + 0.98;
        let expect = [0.95 - volt, volt - 1.05, -0.5 - 0.6, 0.6 - 0.5];
        for (a, b) in g.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    fn pseudo_random(seed: u64, len: usize, scale: f64) -> DVector<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DVector::from_fn(len, |_, _| scale * rng.gen::<f64>())
    }

    #[test]
    fn objective_zero_and_finite_differences() {
        let m = chain3();
        let mut c = box_cond(2);
        c.p = v(&[-0.3, -0.2]);
        let prob = DualProblem::new(&m, c).unwrap();
        assert_eq!(prob.objective(&DualVector::zeros(2)), 0.0);
        for seed in 0..20 {
            let z = pseudo_random(seed, 8, 0.5).add_scalar(0.01);
            let g = prob.gradient(&DualVector::from_stacked(&z).unwrap());
            let h = 1e-6;
            for k in 0..8 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fd = (prob.objective(&DualVector::from_stacked(&zp).unwrap())
                    - prob.objective(&DualVector::from_stacked(&zm).unwrap()))
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * g[k].abs().max(1.0), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn m_matrix_single_bus() {
        let m = build_m(&single());
        let ev = symmetric_eigenvalues(&m);
        assert!((ev[0] + 5.8).abs() < 1e-12);
        for e in &ev[1..] {
            assert!(e.abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_affine_in_z() {
        let m = chain3();
        let mut c = box_cond(2);
        c.p = v(&[-0.3, -0.2]);
        let prob = DualProblem::new(&m, c).unwrap();
        let mm = build_m(&m);
        let g0 = prob.gradient(&DualVector::zeros(2));
        for seed in 0..10 {
            let z = pseudo_random(seed, 8, 2.0);
            let g = prob.gradient(&DualVector::from_stacked(&z).unwrap());
            let diff = g - &g0 - &mm * &z;
            assert!(diff.amax() < 1e-9);
        }
        assert!((&mm - mm.transpose()).amax() == 0.0);
        let ev = symmetric_eigenvalues(&mm);
        assert!(ev.iter().all(|&e| e < 1e-9));
    }

    #[test]
    fn prescribed_steps_for_chain() {
        let m = chain3();
        let s = prescribe_steps(&m, 0.1).unwrap();
        assert!((s.alpha - 1.0 / m.lipschitz()).abs() < 1e-15);
        assert!((s.alpha - 0.04352).abs() < 1e-4);
        let beta = 0.1 / (4.0 * 2f64.powf(1.5) * m.lipschitz());
        assert!((s.beta - beta).abs() < 1e-18);
        assert!((s.beta - 3.846e-4).abs() < 1e-6);
        assert!(s.conditions.satisfied());
        assert!(prescribe_steps(&m, 0.0).is_err());
        assert!(prescribe_steps(&m, 1.5).is_err());
    }

    #[test]
    fn delta_for_chain() {
        let m = chain3();
        let s = prescribe_steps(&m, 0.1).unwrap();
        let delta = descent_increment(s.alpha, s.beta, 0.1, &m);
        let expect = 0.01 / (16.0 * 4.0 * m.lipschitz());
        assert!((delta - expect).abs() < 1e-18);
        assert!((delta - 6.80e-6).abs() < 1e-8);
    }

    #[test]
    fn delta_vanishes_at_beta_boundary() {
        let m = chain3();
        let eps = 0.1;
        let alpha = 1.0 / m.lipschitz();
        let c = StepConditions::new(alpha, 1e-9, eps, &m);
        let d = descent_increment(alpha, c.beta_limit() * (1.0 - 1e-9), eps, &m);
        assert!(d > 0.0 && d < 1e-12);
    }

    #[test]
    fn iteration_bound_for_chain() {
        let m = chain3();
        let c = box_cond(2);
        let raw = 16.0 * 8.0 * m.lipschitz() * 0.25 * m.lambda_max_a() / 0.01;
        assert_eq!(iteration_bound(&m, &c, 0.1), raw.ceil() as u64);
        assert!((iteration_bound_raw(&m, &c, 0.1) / 67090.0 - 1.0).abs() < 1e-3);
        assert_eq!(iteration_bound(&m, &c, 0.1), 67097);
        let ratio = iteration_bound_raw(&m, &c, 0.1) / iteration_bound_raw(&m, &c, 1.0);
        assert!((ratio - 100.0).abs() < 1e-9);
    }

    #[test]
    fn projection_examples() {
        let c = projection_identities(1.0, -3.0, 0.5, 0.0, 0.0).unwrap();
        assert!(c.all());
        assert!(projection_identities(2.0, 0.0, 0.3, 0.0, 0.7).unwrap().all());
        assert!(projection_identities(2.0, 1.0, 1.0, 0.4, 0.3).unwrap().all());
        assert!(projection_identities(0.0, 1.0, 1.0, 2.0, 0.3).is_err());
    }

    #[test]
    fn solve_dual_matches_single_bus_primal() {
        // min ½·0.4·q² over q ∈ [-0.5, 0.5], 0.4q + d ∈ [0.95, 1.05] with
        // d = 0.9 forces q ≥ 0.125, so D* = 0.2·0.125².
        let m = single();
        let mut c = box_cond(1);
        c.p = v(&[-0.5]);
        let prob = DualProblem::new(&m, c).unwrap();
        assert!((prob.constant_term()[0] - 0.9).abs() < 1e-15);
        let sol = solve_dual(&prob, 1e-10, 1_000_000);
        assert!(sol.converged);
        assert!((sol.objective - 0.2 * 0.125 * 0.125).abs() < 1e-9);
        let (q, _) = prob.primal(&sol.z);
        assert!((q[0] - 0.125).abs() < 1e-8);
    }

    #[test]
    fn merit_dominates_feasibility() {
        let m = chain3();
        let mut c = box_cond(2);
        c.p = v(&[-0.6, -0.4]);
        let prob = DualProblem::new(&m, c).unwrap();
        for seed in 0..200 {
            let z = pseudo_random(seed, 8, 0.3);
            let zv = DualVector::from_stacked(&z).unwrap();
            let e = prob.evaluate(&zv);
            assert!(e.feasibility <= e.merit);
            assert_eq!(e.merit, prob.merit(&zv));
        }
    }
}
