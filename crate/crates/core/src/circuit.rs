//! Lumped RLC network discretized with trapezoidal companion models.
//!
//! Every R, L and C branch becomes a conductance `g_eq` in parallel with a
//! history current source. Branch current is oriented from node `k` to node
//! `m` and always recovered as
//!
//! ```text
//! i_km(t) = g_eq * v_km(t) + h(t)
//! ```
//!
//! so the history term `h` enters the nodal right-hand side as `-h` at `k`
//! and `+h` at `m`, giving `Y v = i - I`. Ideal voltage sources are added as
//! extra unknowns (their currents), which keeps the stamped matrix symmetric.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use thiserror::Error;

/// Sentinel node index for the reference (ground) node.
pub const GROUND: usize = usize::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CircuitError {
    #[error("{kind:?} value must be positive, got {value}")]
    NonPositiveValue { kind: ElementKind, value: f64 },
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("series resistance must be finite and non-negative, got {0}")]
    InvalidSeriesResistance(f64),
    #[error("element connects node {0} to itself")]
    SelfLoop(usize),
    #[error("node {0} has no R, L or C branch attached")]
    IsolatedNode(usize),
    #[error("network has no elements")]
    Empty,
    #[error("nodal matrix is singular")]
    SingularMatrix,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementKind {
    Resistor,
    Inductor,
    Capacitor,
    VoltageSource,
}

/// Two-terminal network element. For voltage sources `value` is the initial
/// source voltage; it is replaced each step through [`NodalSystem::solve_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub kind: ElementKind,
    pub nodes: (usize, usize),
    pub value: f64,
    /// Series resistance lumped into an L or C branch (e.g. `r_c + L_c`).
    pub series_resistance: f64,
}

impl Element {
    pub fn resistor(k: usize, m: usize, ohms: f64) -> Self {
        Self::new(ElementKind::Resistor, k, m, ohms)
    }

    pub fn inductor(k: usize, m: usize, henries: f64) -> Self {
        Self::new(ElementKind::Inductor, k, m, henries)
    }

    pub fn capacitor(k: usize, m: usize, farads: f64) -> Self {
        Self::new(ElementKind::Capacitor, k, m, farads)
    }

    pub fn voltage_source(k: usize, m: usize, volts: f64) -> Self {
        Self::new(ElementKind::VoltageSource, k, m, volts)
    }

    pub fn with_series_resistance(mut self, ohms: f64) -> Self {
        self.series_resistance = ohms;
        self
    }

    fn new(kind: ElementKind, k: usize, m: usize, value: f64) -> Self {
        Self {
            kind,
            nodes: (k, m),
            value,
            series_resistance: 0.0,
        }
    }

    fn validate(&self) -> Result<(), CircuitError> {
        let (k, m) = self.nodes;
        if k == m {
            return Err(CircuitError::SelfLoop(k));
        }
        if self.kind != ElementKind::VoltageSource && !(self.value > 0.0 && self.value.is_finite()) {
            return Err(CircuitError::NonPositiveValue {
                kind: self.kind,
                value: self.value,
            });
        }
        if !(self.series_resistance >= 0.0 && self.series_resistance.is_finite()) {
            return Err(CircuitError::InvalidSeriesResistance(self.series_resistance));
        }
        Ok(())
    }
}

/// Recursion used to advance a branch's history term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HistoryRule {
    /// Purely algebraic branch; history is always zero.
    Algebraic,
    /// Series R-L: `h' = g (v + a i)` with `a = 2L/dt - R`.
    Inductive { a: f64 },
    /// Series R-C: `h' = -g (v + a i)` with `a = dt/(2C) - R`.
    Capacitive { a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompanionBranch {
    pub g_eq: f64,
    pub nodes: (usize, usize),
    pub history: f64,
    pub rule: HistoryRule,
}

impl CompanionBranch {
    /// Branch current `k -> m` for branch voltage `v_km` at the current step.
    #[inline]
    pub fn current(&self, v_branch: f64) -> f64 {
        self.g_eq * v_branch + self.history
    }

    /// Advances the history term from the branch voltage and current solved
    /// at this step, giving the source used at the next step.
    #[inline]
    pub fn update_history(&self, v_branch: f64, i_branch: f64) -> CompanionBranch {
        let history = match self.rule {
            HistoryRule::Algebraic => 0.0,
            HistoryRule::Inductive { a } => self.g_eq * (v_branch + a * i_branch),
            HistoryRule::Capacitive { a } => -self.g_eq * (v_branch + a * i_branch),
        };
        CompanionBranch { history, ..*self }
    }
}

/// Builds the trapezoidal companion of an R, L or C element.
pub fn companion_of(element: &Element, dt: f64) -> Result<CompanionBranch, CircuitError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CircuitError::NonPositiveStep(dt));
    }
    element.validate()?;
    let r = element.series_resistance;
    let (g_eq, rule) = match element.kind {
        ElementKind::Resistor => (1.0 / (element.value + r), HistoryRule::Algebraic),
        ElementKind::Inductor => {
            let z = 2.0 * element.value / dt;
            (1.0 / (r + z), HistoryRule::Inductive { a: z - r })
        }
        ElementKind::Capacitor => {
            let z = dt / (2.0 * element.value);
            (1.0 / (r + z), HistoryRule::Capacitive { a: z - r })
        }
        ElementKind::VoltageSource => {
            return Err(CircuitError::NonPositiveValue {
                kind: element.kind,
                value: element.value,
            })
        }
    };
    Ok(CompanionBranch {
        g_eq,
        nodes: element.nodes,
        history: 0.0,
        rule,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SourceBinding {
    pub nodes: (usize, usize),
}

/// Node voltages plus the current each ideal source delivers into its
/// positive terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalSolution {
    pub voltages: Vec<f64>,
    pub source_currents: Vec<f64>,
}

/// Assembled and factorized network.
#[derive(Debug, Clone)]
pub struct NodalSystem {
    n_nodes: usize,
    dt: f64,
    y: DMatrix<f64>,
    extended: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    branches: Vec<CompanionBranch>,
    sources: Vec<SourceBinding>,
    source_values: Vec<f64>,
}

/// Adds the two-terminal stamp `g` between `k` and `m` (ground rows dropped).
fn stamp(matrix: &mut DMatrix<f64>, (k, m): (usize, usize), g: f64) {
    if k != GROUND {
        matrix[(k, k)] += g;
    }
    if m != GROUND {
        matrix[(m, m)] += g;
    }
    if k != GROUND && m != GROUND {
        matrix[(k, m)] -= g;
        matrix[(m, k)] -= g;
    }
}

/// Assembles `Y` from the elements and factorizes the source-extended system.
pub fn assemble(elements: &[Element], dt: f64) -> Result<NodalSystem, CircuitError> {
    if elements.is_empty() {
        return Err(CircuitError::Empty);
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(CircuitError::NonPositiveStep(dt));
    }
    let n_nodes = elements
        .iter()
        .flat_map(|e| [e.nodes.0, e.nodes.1])
        .filter(|&n| n != GROUND)
        .map(|n| n + 1)
        .max()
        .unwrap_or(0);

    let mut branches = Vec::new();
    let mut sources = Vec::new();
    let mut source_values = Vec::new();
    let mut attached = vec![false; n_nodes];
    for element in elements {
        element.validate()?;
        if element.kind == ElementKind::VoltageSource {
            sources.push(SourceBinding {
                nodes: element.nodes,
            });
            source_values.push(element.value);
            continue;
        }
        let branch = companion_of(element, dt)?;
        for n in [branch.nodes.0, branch.nodes.1] {
            if n != GROUND {
                attached[n] = true;
            }
        }
        branches.push(branch);
    }
    if let Some(node) = attached.iter().position(|&a| !a) {
        return Err(CircuitError::IsolatedNode(node));
    }

    let mut y = DMatrix::zeros(n_nodes, n_nodes);
    for branch in &branches {
        stamp(&mut y, branch.nodes, branch.g_eq);
    }

    let size = n_nodes + sources.len();
    let mut extended = DMatrix::zeros(size, size);
    extended.view_mut((0, 0), (n_nodes, n_nodes)).copy_from(&y);
    for (s, source) in sources.iter().enumerate() {
        let row = n_nodes + s;
        let (k, m) = source.nodes;
        if k != GROUND {
            extended[(k, row)] = 1.0;
            extended[(row, k)] = 1.0;
        }
        if m != GROUND {
            extended[(m, row)] = -1.0;
            extended[(row, m)] = -1.0;
        }
    }

    let lu = extended.clone().lu();
    if !lu.is_invertible() {
        return Err(CircuitError::SingularMatrix);
    }
    // Near-singular pivots show up as non-finite entries of the inverse.
    let probe = lu.solve(&DVector::from_element(size, 1.0));
    if probe.map_or(true, |x| x.iter().any(|v| !v.is_finite())) {
        return Err(CircuitError::SingularMatrix);
    }

    Ok(NodalSystem {
        n_nodes,
        dt,
        y,
        extended,
        lu,
        branches,
        sources,
        source_values,
    })
}

impl NodalSystem {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Nodal admittance matrix (without source rows).
    pub fn admittance(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn branches(&self) -> &[CompanionBranch] {
        &self.branches
    }

    pub fn sources(&self) -> &[SourceBinding] {
        &self.sources
    }

    /// Source voltages given at assembly time.
    pub fn initial_source_values(&self) -> &[f64] {
        &self.source_values
    }

    /// Sets a branch's history as if the previous step ended with the given
    /// branch voltage and current.
    pub fn seed_branch(&mut self, index: usize, v_branch: f64, i_branch: f64) {
        let b = &mut self.branches[index];
        *b = b.update_history(v_branch, i_branch);
    }

    /// Solves `Y v = i - I` together with the source constraints, using the
    /// factorization computed at assembly.
    pub fn solve_step(
        &self,
        injections: &[f64],
        source_values: &[f64],
    ) -> Result<NodalSolution, CircuitError> {
        let rhs = self.rhs(injections, source_values)?;
        let x = self.lu.solve(&rhs).ok_or(CircuitError::SingularMatrix)?;
        Ok(NodalSolution {
            voltages: x.rows(0, self.n_nodes).iter().copied().collect(),
            source_currents: x.rows(self.n_nodes, self.sources.len()).iter().map(|j| -j).collect(),
        })
    }

    /// `max |A x - b| / max |b|` for the extended system at a solution.
    pub fn kcl_residual(
        &self,
        solution: &NodalSolution,
        injections: &[f64],
        source_values: &[f64],
    ) -> Result<f64, CircuitError> {
        let rhs = self.rhs(injections, source_values)?;
        let x = DVector::from_iterator(
            self.n_nodes + self.sources.len(),
            solution
                .voltages
                .iter()
                .copied()
                .chain(solution.source_currents.iter().map(|j| -j)),
        );
        let r = &self.extended * x - &rhs;
        let scale = rhs.amax();
        let abs = r.amax();
        Ok(if scale > 0.0 { abs / scale } else { abs })
    }

    fn rhs(&self, injections: &[f64], source_values: &[f64]) -> Result<DVector<f64>, CircuitError> {
        if injections.len() != self.n_nodes {
            return Err(CircuitError::DimensionMismatch {
                expected: self.n_nodes,
                got: injections.len(),
            });
        }
        if source_values.len() != self.sources.len() {
            return Err(CircuitError::DimensionMismatch {
                expected: self.sources.len(),
                got: source_values.len(),
            });
        }
        let mut rhs = DVector::zeros(self.n_nodes + self.sources.len());
        rhs.rows_mut(0, self.n_nodes).copy_from_slice(injections);
        for b in &self.branches {
            let (k, m) = b.nodes;
            if k != GROUND {
                rhs[k] -= b.history;
            }
            if m != GROUND {
                rhs[m] += b.history;
            }
        }
        rhs.rows_mut(self.n_nodes, self.sources.len())
            .copy_from_slice(source_values);
        Ok(rhs)
    }

    pub fn branch_voltage(&self, index: usize, voltages: &[f64]) -> f64 {
        let (k, m) = self.branches[index].nodes;
        node_voltage(voltages, k) - node_voltage(voltages, m)
    }

    /// Branch currents `k -> m` at the solved step, before histories advance.
    pub fn branch_currents(&self, voltages: &[f64]) -> Vec<f64> {
        (0..self.branches.len())
            .map(|i| self.branches[i].current(self.branch_voltage(i, voltages)))
            .collect()
    }

    /// Advances every branch history with the solved node voltages.
    pub fn advance(&mut self, voltages: &[f64]) {
        for i in 0..self.branches.len() {
            let v = self.branch_voltage(i, voltages);
            let b = &self.branches[i];
            let next = b.update_history(v, b.current(v));
            self.branches[i] = next;
        }
    }
}

#[inline]
fn node_voltage(voltages: &[f64], node: usize) -> f64 {
    if node == GROUND {
        0.0
    } else {
        voltages[node]
    }
}

/// Checks `|a_ij - a_ji| <= rel_tol * max|a|`.
pub fn is_symmetric(matrix: &DMatrix<f64>, rel_tol: f64) -> bool {
    let scale = matrix.amax();
    let n = matrix.nrows();
    matrix.ncols() == n
        && (0..n).all(|i| (0..i).all(|j| (matrix[(i, j)] - matrix[(j, i)]).abs() <= rel_tol * scale))
}

/// Per-unit base quantities for a three-phase system. Instantaneous voltages
/// and currents are normalized by their phase peak values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnitBase {
    pub power_va: f64,
    pub voltage_ll_rms: f64,
    pub frequency_hz: f64,
}

impl PerUnitBase {
    pub fn omega(&self) -> f64 {
        std::f64::consts::TAU * self.frequency_hz
    }

    pub fn impedance(&self) -> f64 {
        self.voltage_ll_rms * self.voltage_ll_rms / self.power_va
    }

    pub fn voltage_peak(&self) -> f64 {
        self.voltage_ll_rms * (2.0_f64 / 3.0).sqrt()
    }

    pub fn current_peak(&self) -> f64 {
        2.0 * self.power_va / (3.0 * self.voltage_peak())
    }

    pub fn ohms(&self, pu: f64) -> f64 {
        pu * self.impedance()
    }

    /// Inductance in henries for a reactance of `pu` at rated frequency.
    pub fn henries(&self, pu: f64) -> f64 {
        pu * self.impedance() / self.omega()
    }

    /// Capacitance in farads for a susceptance of `pu` at rated frequency.
    pub fn farads(&self, pu: f64) -> f64 {
        pu / (self.impedance() * self.omega())
    }
}
