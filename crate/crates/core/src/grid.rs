//! Radial feeder topology and the linearized branch-flow model matrices.
//!
//! Buses are numbered `0..=N` with bus 0 the feeder (substation) bus. All
//! model vectors and matrices are indexed by `bus - 1`, so row `k` of
//! [`LinearModel::a`] belongs to bus `k + 1`.
//!
//! Voltages are squared magnitudes in per-unit throughout.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network must contain at least one branch bus")]
    Empty,
    #[error("expected {expected} edges for {expected} branch buses, found {found}")]
    EdgeCount { expected: usize, found: usize },
    #[error("edge {parent}->{child} references a bus outside 0..={bus_count}")]
    BusOutOfRange {
        parent: usize,
        child: usize,
        bus_count: usize,
    },
    #[error("not a tree: bus {child} has more than one parent")]
    MultipleParents { child: usize },
    #[error("not a tree: bus {bus} is not reachable from the feeder bus (cycle or disconnected)")]
    NotATree { bus: usize },
    #[error("edge {parent}->{child}: reactance must be positive, got {x}")]
    NonPositiveReactance { parent: usize, child: usize, x: f64 },
    #[error("edge {parent}->{child}: resistance must be non-negative, got {r}")]
    NegativeResistance { parent: usize, child: usize, r: f64 },
    #[error("feeder voltage must be positive and finite, got {0}")]
    InvalidFeederVoltage(f64),
    #[error("matrix A is not positive definite (smallest eigenvalue {0})")]
    NotPositiveDefinite(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
}

/// A distribution line from `parent` to `child` with per-unit impedance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub parent: usize,
    pub child: usize,
    pub r: f64,
    pub x: f64,
}

impl Line {
    pub fn new(parent: usize, child: usize, r: f64, x: f64) -> Self {
        Self {
            parent,
            child,
            r,
            x,
        }
    }
}

/// A validated radial (tree) feeder rooted at bus 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialNetwork {
    bus_count: usize,
    v0: f64,
    lines: Vec<Line>,
    /// `parent[b]` for `b in 1..=N`; entry 0 is unused.
    parent: Vec<usize>,
    /// Index into `lines` of the line feeding bus `b`.
    feeding_line: Vec<usize>,
    children: Vec<Vec<usize>>,
    /// Branch buses in breadth-first order from the feeder.
    order: Vec<usize>,
}

impl RadialNetwork {
    pub fn new(bus_count: usize, v0: f64, lines: Vec<Line>) -> Result<Self, GridError> {
        if bus_count == 0 {
            return Err(GridError::Empty);
        }
        if !(v0.is_finite() && v0 > 0.0) {
            return Err(GridError::InvalidFeederVoltage(v0));
        }
        if lines.len() != bus_count {
            return Err(GridError::EdgeCount {
                expected: bus_count,
                found: lines.len(),
            });
        }

        let mut parent = vec![usize::MAX; bus_count + 1];
        let mut feeding_line = vec![usize::MAX; bus_count + 1];
        let mut children = vec![Vec::new(); bus_count + 1];
        for (idx, line) in lines.iter().enumerate() {
            let Line {
                parent: p,
                child: c,
                r,
                x,
            } = *line;
            if p > bus_count || c == 0 || c > bus_count {
                return Err(GridError::BusOutOfRange {
                    parent: p,
                    child: c,
                    bus_count,
                });
            }
            // NaN fails both comparisons and is rejected here as well.
            if !(x > 0.0 && x.is_finite()) {
                return Err(GridError::NonPositiveReactance {
                    parent: p,
                    child: c,
                    x,
                });
            }
            if !(r >= 0.0 && r.is_finite()) {
                return Err(GridError::NegativeResistance {
                    parent: p,
                    child: c,
                    r,
                });
            }
            if parent[c] != usize::MAX {
                return Err(GridError::MultipleParents { child: c });
            }
            parent[c] = p;
            feeding_line[c] = idx;
            children[p].push(c);
        }
        for list in &mut children {
            list.sort_unstable();
        }

        let mut order = Vec::with_capacity(bus_count);
        let mut seen = vec![false; bus_count + 1];
        seen[0] = true;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(b) = queue.pop_front() {
            for &c in &children[b] {
                if !seen[c] {
                    seen[c] = true;
                    order.push(c);
                    queue.push_back(c);
                }
            }
        }
        if let Some(bus) = (1..=bus_count).find(|&b| !seen[b]) {
            return Err(GridError::NotATree { bus });
        }

        Ok(Self {
            bus_count,
            v0,
            lines,
            parent,
            feeding_line,
            children,
            order,
        })
    }

    /// Number of branch buses `N` (the feeder bus is not counted).
    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    /// Squared feeder voltage.
    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Lines in the order they were supplied.
    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus]
    }

    /// The line whose child end is `bus` (`bus >= 1`).
    pub fn feeding_line(&self, bus: usize) -> &Line {
        &self.lines[self.feeding_line[bus]]
    }

    pub fn children(&self, bus: usize) -> &[usize] {
        &self.children[bus]
    }

    /// Branch buses ordered so that every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    /// Neighbours of branch bus `bus` among branch buses (feeder excluded).
    pub fn neighbors(&self, bus: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.children[bus].clone();
        let p = self.parent[bus];
        if p != 0 {
            out.push(p);
        }
        out.sort_unstable();
        out
    }

    /// Sum of `value(line)` along the path from the feeder to `bus`.
    fn path_sums(&self, value: impl Fn(&Line) -> f64) -> Vec<f64> {
        let mut sums = vec![0.0; self.bus_count + 1];
        for &b in &self.order {
            sums[b] = sums[self.parent[b]] + value(self.feeding_line(b));
        }
        sums
    }

    /// Deepest common ancestor of two buses (possibly the feeder).
    fn common_ancestor(&self, depth: &[usize], mut i: usize, mut j: usize) -> usize {
        while depth[i] > depth[j] {
            i = self.parent[i];
        }
        while depth[j] > depth[i] {
            j = self.parent[j];
        }
        while i != j {
            i = self.parent[i];
            j = self.parent[j];
        }
        i
    }

    fn depths(&self) -> Vec<usize> {
        let mut depth = vec![0usize; self.bus_count + 1];
        for &b in &self.order {
            depth[b] = depth[self.parent[b]] + 1;
        }
        depth
    }
}

/// Sparse row `k` of `A^{-1}`: the self coefficient plus one entry per
/// neighbouring branch bus. Indices are 0-based model indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRow {
    pub diag: f64,
    pub off: Vec<(usize, f64)>,
}

/// `v = A q + B p + 1 v0` together with its analytic inverse and the
/// spectral constants used by the controllers and certificates.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    a_inv_rows: Vec<SparseRow>,
    eigenvalues: Vec<f64>,
    lipschitz: f64,
    lambda_max_a: f64,
    neighbors: Vec<Vec<usize>>,
    v0: f64,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn a_inv_row(&self, k: usize) -> &SparseRow {
        &self.a_inv_rows[k]
    }

    /// Eigenvalues of `A` in ascending order.
    pub fn eigenvalues_a(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Lipschitz constant of the dual gradient, `max_i 2(λ_i + 1/λ_i)`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn lambda_max_a(&self) -> f64 {
        self.lambda_max_a
    }

    /// 0-based neighbour indices of model index `k`.
    pub fn neighbors(&self, k: usize) -> &[usize] {
        &self.neighbors[k]
    }

    pub fn v0(&self) -> f64 {
        self.v0
    }

    /// Reactive setpoints recovered from duals,
    /// `q = λ_lo - λ_hi + A^{-1}(μ_lo - μ_hi)`, evaluated through the sparse
    /// rows of `A^{-1}` exactly as each bus computes its own component.
    pub fn primal_from_duals(
        &self,
        lambda_lo: &[f64],
        lambda_hi: &[f64],
        mu_lo: &[f64],
        mu_hi: &[f64],
    ) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|k| {
                let row = &self.a_inv_rows[k];
                primal_component(
                    lambda_lo[k] - lambda_hi[k],
                    row.diag,
                    mu_lo[k] - mu_hi[k],
                    row.off.iter().map(|&(j, a)| (a, mu_lo[j] - mu_hi[j])),
                )
            }),
        )
    }
}

/// One bus's primal update. Shared by the controllers and the analysis code
/// so that both evaluate the same floating-point expression.
pub(crate) fn primal_component(
    lambda_diff: f64,
    a_self: f64,
    mu_diff_self: f64,
    neighbor_terms: impl Iterator<Item = (f64, f64)>,
) -> f64 {
    let mut q = lambda_diff + a_self * mu_diff_self;
    for (a, mu_diff) in neighbor_terms {
        q += a * mu_diff;
    }
    q
}

/// Builds `A`, `B` from shared-path sums and `A^{-1}` from its closed form.
pub fn build_matrices(net: &RadialNetwork) -> Result<LinearModel, GridError> {
    let n = net.bus_count();
    let x_sum = net.path_sums(|l| l.x);
    let r_sum = net.path_sums(|l| l.r);
    let depth = net.depths();

    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let c = net.common_ancestor(&depth, i, j);
            let (ax, br) = (2.0 * x_sum[c], 2.0 * r_sum[c]);
            a[(i - 1, j - 1)] = ax;
            a[(j - 1, i - 1)] = ax;
            b[(i - 1, j - 1)] = br;
            b[(j - 1, i - 1)] = br;
        }
    }

    let mut a_inv = DMatrix::zeros(n, n);
    let mut a_inv_rows = Vec::with_capacity(n);
    let mut neighbors = Vec::with_capacity(n);
    for i in 1..=n {
        let mut diag = 1.0 / net.feeding_line(i).x;
        for &c in net.children(i) {
            diag += 1.0 / net.feeding_line(c).x;
        }
        diag *= 0.5;
        a_inv[(i - 1, i - 1)] = diag;

        let nbrs = net.neighbors(i);
        let off: Vec<(usize, f64)> = nbrs
            .iter()
            .map(|&j| {
                // The line between i and j feeds whichever of them is the child.
                let line = if net.parent(j) == i {
                    net.feeding_line(j)
                } else {
                    net.feeding_line(i)
                };
                (j - 1, -0.5 / line.x)
            })
            .collect();
        for &(j, v) in &off {
            a_inv[(i - 1, j)] = v;
        }
        neighbors.push(nbrs.iter().map(|j| j - 1).collect());
        a_inv_rows.push(SparseRow { diag, off });
    }

    let mut eigenvalues: Vec<f64> = SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
    eigenvalues.sort_by(f64::total_cmp);
    let smallest = eigenvalues[0];
    if !(smallest > 0.0) {
        return Err(GridError::NotPositiveDefinite(smallest));
    }
    let lipschitz = eigenvalues
        .iter()
        .map(|&l| 2.0 * (l + 1.0 / l))
        .fold(f64::NEG_INFINITY, f64::max);
    let lambda_max_a = eigenvalues[n - 1];

    Ok(LinearModel {
        a,
        b,
        a_inv,
        a_inv_rows,
        eigenvalues,
        lipschitz,
        lambda_max_a,
        neighbors,
        v0: net.v0(),
    })
}

/// `v(q) = A q + d`.
pub fn voltage_map(
    model: &LinearModel,
    q: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<DVector<f64>, GridError> {
    let n = model.dim();
    for len in [q.len(), d.len()] {
        if len != n {
            return Err(GridError::Dimension {
                expected: n,
                found: len,
            });
        }
    }
    Ok(model.a() * q + d)
}
