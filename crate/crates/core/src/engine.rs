//! Partitioned EMT loop, scenario events, traces and run comparison.
//!
//! Each step first solves the network over `[t - dt, t]` with the converter
//! voltage the control produced at the previous step, then runs the control
//! chain on the fresh electrical solution.

use std::collections::BTreeMap;
use std::io;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::CircuitError;
use crate::control::{
    angle_diff, control_chain_step, ControlError, Measurements, PllMode, PllStepper, Setpoints,
};
use crate::pinn::PinnError;
use crate::wt4::{init_steady_state, ModelError, Wt4Params, Wt4System};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("mode '{0}' needs surrogate weights")]
    ModeMismatch(PllMode),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Weights(#[from] PinnError),
    #[error("step {step} (t = {t:.6} s): {source}")]
    Control {
        step: usize,
        t: f64,
        #[source]
        source: ControlError,
    },
    #[error("step {step} (t = {t:.6} s): {source}")]
    Network {
        step: usize,
        t: f64,
        #[source]
        source: CircuitError,
    },
    #[error("runs are on different time grids: {0}")]
    GridMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    PStep { to: f64 },
    QStep { to: f64 },
    PRamp { to: f64, duration: f64 },
    VoltageDip { fraction: f64, duration: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub setpoints_initial: [f64; 2],
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub events: Vec<Event>,
    /// Overrides of the benchmark parameters; `dt` above always wins.
    #[serde(default)]
    pub params: Option<Wt4Params>,
}

/// Number of whole steps covering `duration`.
pub fn steps_for(duration: f64, dt: f64) -> usize {
    (duration / dt - 1e-9).ceil().max(0.0) as usize
}

/// Step index nearest to `t`.
pub fn step_index(t: f64, dt: f64) -> usize {
    (t / dt).round().max(0.0) as usize
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let s: Scenario = toml::from_str(text).map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return bad(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.events.windows(2).any(|w| w[1].t < w[0].t) {
            return bad("events must be sorted by time".into());
        }
        for e in &self.events {
            if !(e.t >= 0.0 && e.t <= self.t_end) {
                return bad(format!("event at t = {} outside [0, {}]", e.t, self.t_end));
            }
            match e.kind {
                EventKind::VoltageDip { fraction, duration } => {
                    if !(fraction > 0.0 && fraction <= 1.0) {
                        return bad(format!("dip fraction {fraction} outside (0, 1]"));
                    }
                    if !(duration > 0.0) {
                        return bad(format!("dip duration {duration} must be positive"));
                    }
                }
                EventKind::PRamp { duration, to } => {
                    if !(duration > 0.0 && to.is_finite()) {
                        return bad(format!("ramp duration {duration} must be positive"));
                    }
                }
                EventKind::PStep { to } | EventKind::QStep { to } => {
                    if !to.is_finite() {
                        return bad("setpoint must be finite".into());
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        steps_for(self.t_end, self.dt)
    }

    pub fn params(&self) -> Wt4Params {
        self.params.clone().unwrap_or_default().with_dt(self.dt)
    }

    pub fn initial_setpoints(&self) -> Setpoints {
        Setpoints {
            p: self.setpoints_initial[0],
            q: self.setpoints_initial[1],
        }
    }

    /// Benchmark model at this scenario's initial operating point.
    pub fn system(&self) -> Result<Wt4System, SimError> {
        self.validate()?;
        Ok(init_steady_state(&self.params(), self.initial_setpoints())?)
    }

    /// P 0 -> 0.65 pu at 1.2 s, Q 0 -> 0.25 pu at 2.2 s, 20 % grid dip for
    /// 100 ms at 3 s; 4 s at 100 us.
    pub fn setpoint_and_dip() -> Self {
        Scenario {
            t_end: 4.0,
            dt: 100e-6,
            setpoints_initial: [0.0, 0.0],
            seed: None,
            events: vec![
                Event {
                    t: 1.2,
                    kind: EventKind::PStep { to: 0.65 },
                },
                Event {
                    t: 2.2,
                    kind: EventKind::QStep { to: 0.25 },
                },
                Event {
                    t: 3.0,
                    kind: EventKind::VoltageDip {
                        fraction: 0.2,
                        duration: 0.1,
                    },
                },
            ],
            params: None,
        }
    }

    /// 1 s ramp of P to 1 pu from 2 s, Q step to 0.2 pu at 5 s; 8 s run.
    pub fn ramp_validation() -> Self {
        Scenario {
            t_end: 8.0,
            dt: 100e-6,
            setpoints_initial: [0.0, 0.0],
            seed: None,
            events: vec![
                Event {
                    t: 2.0,
                    kind: EventKind::PRamp {
                        to: 1.0,
                        duration: 1.0,
                    },
                },
                Event {
                    t: 5.0,
                    kind: EventKind::QStep { to: 0.2 },
                },
            ],
            params: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Ramp {
    start: usize,
    steps: usize,
    from: f64,
    to: f64,
}

/// Exogenous inputs that events act on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventState {
    pub setpoints: Setpoints,
    pub grid_magnitude: f64,
    ramp: Option<Ramp>,
    /// First step at which the grid is back at nominal.
    dip_end: Option<usize>,
    dt: f64,
}

impl EventState {
    pub fn new(setpoints: Setpoints, dt: f64) -> Self {
        Self {
            setpoints,
            grid_magnitude: 1.0,
            ramp: None,
            dip_end: None,
            dt,
        }
    }

    /// Applies an event taking effect at step `step`.
    pub fn apply_event(&mut self, event: &EventKind, step: usize) {
        match *event {
            EventKind::PStep { to } => {
                self.ramp = None;
                self.setpoints.p = to;
            }
            EventKind::QStep { to } => self.setpoints.q = to,
            EventKind::PRamp { to, duration } => {
                self.ramp = Some(Ramp {
                    start: step,
                    steps: steps_for(duration, self.dt).max(1),
                    from: self.setpoints.p,
                    to,
                });
            }
            EventKind::VoltageDip { fraction, duration } => {
                self.grid_magnitude = 1.0 - fraction;
                self.dip_end = Some(step + steps_for(duration, self.dt));
            }
        }
    }

    /// Brings time-dependent inputs to step `step`.
    pub fn advance_to(&mut self, step: usize) {
        if let Some(end) = self.dip_end {
            if step >= end {
                self.grid_magnitude = 1.0;
                self.dip_end = None;
            }
        }
        if let Some(r) = self.ramp {
            let progress = ((step - r.start.min(step)) as f64 / r.steps as f64).min(1.0);
            self.setpoints.p = r.from + (r.to - r.from) * progress;
            if progress >= 1.0 {
                self.ramp = None;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Signal {
    VA,
    VB,
    VC,
    IA,
    IB,
    IC,
    IConvA,
    IConvB,
    IConvC,
    ThetaPll,
    OmegaPll,
    Vq,
    Uq,
    P,
    Q,
    EA,
    EB,
    EC,
}

impl Signal {
    pub const ALL: [Signal; 18] = [
        Signal::VA,
        Signal::VB,
        Signal::VC,
        Signal::IA,
        Signal::IB,
        Signal::IC,
        Signal::IConvA,
        Signal::IConvB,
        Signal::IConvC,
        Signal::ThetaPll,
        Signal::OmegaPll,
        Signal::Vq,
        Signal::Uq,
        Signal::P,
        Signal::Q,
        Signal::EA,
        Signal::EB,
        Signal::EC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Signal::VA => "v_a",
            Signal::VB => "v_b",
            Signal::VC => "v_c",
            Signal::IA => "i_a",
            Signal::IB => "i_b",
            Signal::IC => "i_c",
            Signal::IConvA => "i_conv_a",
            Signal::IConvB => "i_conv_b",
            Signal::IConvC => "i_conv_c",
            Signal::ThetaPll => "theta_pll",
            Signal::OmegaPll => "omega_pll",
            Signal::Vq => "v_q",
            Signal::Uq => "u_q",
            Signal::P => "p",
            Signal::Q => "q",
            Signal::EA => "e_a",
            Signal::EB => "e_b",
            Signal::EC => "e_c",
        }
    }

    pub fn from_name(name: &str) -> Option<Signal> {
        Signal::ALL.into_iter().find(|s| s.name() == name)
    }

    fn index(self) -> usize {
        self as usize
    }

    fn is_angle(self) -> bool {
        self == Signal::ThetaPll
    }
}

/// Time-indexed traces; `v_abc`/`i_abc` are PCC voltages and grid-side
/// currents.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces {
    pub time: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl Traces {
    fn with_capacity(n: usize) -> Self {
        Self {
            time: Vec::with_capacity(n),
            columns: (0..Signal::ALL.len()).map(|_| Vec::with_capacity(n)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    pub fn signal(&self, s: Signal) -> &[f64] {
        &self.columns[s.index()]
    }

    #[inline]
    fn push(&mut self, t: f64, row: &[f64; 18]) {
        self.time.push(t);
        for (col, v) in self.columns.iter_mut().zip(row) {
            col.push(*v);
        }
    }

    /// Writes one CSV row per step, time first.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t"];
        header.extend(Signal::ALL.iter().map(|s| s.name()));
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for k in 0..self.len() {
            record.clear();
            record.push(self.time[k].to_string());
            record.extend(self.columns.iter().map(|c| c[k].to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub traces: Traces,
    /// Seconds spent in the stepping loop.
    pub wall_time: f64,
    pub steps: usize,
    pub pll_iterations_total: usize,
    pub mode: PllMode,
    /// Largest relative nodal residual over all steps, when checked.
    pub max_kcl_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub check_kcl: bool,
}

/// Runs a scenario with the given PLL solver and default options.
pub fn simulate(sys: &Wt4System, scenario: &Scenario, stepper: &PllStepper<'_>) -> Result<SimResult, SimError> {
    simulate_with(sys, scenario, stepper, SimOptions::default())
}

/// [`simulate`] taking a mode tag and optional weights.
pub fn simulate_mode(
    sys: &Wt4System,
    scenario: &Scenario,
    mode: PllMode,
    weights: Option<&crate::pinn::MlpParams>,
) -> Result<SimResult, SimError> {
    let stepper = PllStepper::from_mode(mode, weights).ok_or(SimError::ModeMismatch(mode))?;
    simulate(sys, scenario, &stepper)
}

pub fn simulate_with(
    sys: &Wt4System,
    scenario: &Scenario,
    stepper: &PllStepper<'_>,
    options: SimOptions,
) -> Result<SimResult, SimError> {
    scenario.validate()?;
    if (scenario.dt - sys.dt()).abs() > 1e-15 * scenario.dt {
        return Err(SimError::InvalidScenario(format!(
            "scenario dt {} differs from the model's {}",
            scenario.dt,
            sys.dt()
        )));
    }
    if let PllStepper::Pinn(w) = stepper {
        w.check_pll_layout()?;
    }
    let mut run = Runner::new(sys, scenario, stepper)?;
    let n = scenario.n_steps();
    let mut traces = Traces::with_capacity(n + 1);
    traces.push(0.0, &run.initial_row());
    let mut max_kcl: f64 = 0.0;
    let mut iterations = 0;

    let start = Instant::now();
    for k in 1..=n {
        let out = run.step(k, options.check_kcl)?;
        iterations += out.pll_iterations;
        if let Some(r) = out.kcl_residual {
            max_kcl = max_kcl.max(r);
        }
        traces.push(out.t, &out.row);
    }
    let wall_time = start.elapsed().as_secs_f64();

    Ok(SimResult {
        traces,
        wall_time,
        steps: n,
        pll_iterations_total: iterations,
        mode: stepper.mode(),
        max_kcl_residual: options.check_kcl.then_some(max_kcl),
    })
}

struct StepOutput {
    t: f64,
    row: [f64; 18],
    pll_iterations: usize,
    kcl_residual: Option<f64>,
    /// Converter voltage the network used at this step.
    #[allow(dead_code)]
    applied_e: [f64; 3],
}

/// Mutable per-run state.
struct Runner<'a> {
    sys: Wt4System,
    events: &'a [Event],
    next_event: usize,
    inputs: EventState,
    stepper: &'a PllStepper<'a>,
    injections: Vec<f64>,
    sources: Vec<f64>,
}

impl<'a> Runner<'a> {
    fn new(sys: &Wt4System, scenario: &'a Scenario, stepper: &'a PllStepper<'a>) -> Result<Self, SimError> {
        let mut sys = sys.clone();
        sys.lock_for(stepper)?;
        let inputs = EventState::new(sys.equilibrium.setpoints, sys.dt());
        let n_nodes = sys.network.n_nodes();
        let n_sources = sys.network.sources().len();
        Ok(Self {
            sys,
            events: &scenario.events,
            next_event: 0,
            inputs,
            stepper,
            injections: vec![0.0; n_nodes],
            sources: vec![0.0; n_sources],
        })
    }

    fn initial_row(&self) -> [f64; 18] {
        let (v, i, i_conv) = self.sys.initial_measurements();
        let c = &self.sys.control;
        let sp = self.sys.equilibrium.setpoints;
        [
            v[0], v[1], v[2], i[0], i[1], i[2], i_conv[0], i_conv[1], i_conv[2], c.pll.theta, c.pll.omega,
            crate::control::park(v, c.pll.theta)[1], c.u.e_q, sp.p, sp.q, c.u.e_abc[0], c.u.e_abc[1],
            c.u.e_abc[2],
        ]
    }

    fn step(&mut self, k: usize, check_kcl: bool) -> Result<StepOutput, SimError> {
        let dt = self.sys.dt();
        let t = k as f64 * dt;
        self.inputs.advance_to(k);
        while let Some(e) = self.events.get(self.next_event) {
            if step_index(e.t, dt) > k {
                break;
            }
            self.inputs.apply_event(&e.kind, k);
            self.next_event += 1;
        }

        // network over [t - dt, t] with last step's converter voltage
        let grid = self.sys.grid_voltage(t, self.inputs.grid_magnitude);
        let applied_e = self.sys.e_abc;
        for p in 0..3 {
            self.sources[2 * p] = applied_e[p];
            self.sources[2 * p + 1] = grid[p];
        }
        let network_err = |source| SimError::Network { step: k, t, source };
        let sol = self
            .sys
            .network
            .solve_step(&self.injections, &self.sources)
            .map_err(network_err)?;
        let kcl_residual = if check_kcl {
            Some(
                self.sys
                    .network
                    .kcl_residual(&sol, &self.injections, &self.sources)
                    .map_err(network_err)?,
            )
        } else {
            None
        };
        let currents = self.sys.network.branch_currents(&sol.voltages);
        self.sys.network.advance(&sol.voltages);

        let v = &sol.voltages;
        let meas = Measurements {
            v_pcc: [v[1], v[4], v[7]],
            i_conv: [currents[0], currents[3], currents[6]],
            i_grid: [currents[2], currents[5], currents[8]],
        };

        let cp = self.sys.control_params;
        let (control, report) =
            control_chain_step(&self.sys.control, &meas, self.inputs.setpoints, &cp, dt, self.stepper)
                .map_err(|source| SimError::Control { step: k, t, source })?;
        self.sys.control = control;
        self.sys.e_abc = control.u.e_abc;

        let e = control.u.e_abc;
        Ok(StepOutput {
            t,
            row: [
                meas.v_pcc[0],
                meas.v_pcc[1],
                meas.v_pcc[2],
                meas.i_grid[0],
                meas.i_grid[1],
                meas.i_grid[2],
                meas.i_conv[0],
                meas.i_conv[1],
                meas.i_conv[2],
                control.pll.theta,
                control.pll.omega,
                report.v_q,
                control.u.e_q,
                report.p,
                report.q,
                e[0],
                e[1],
                e[2],
            ],
            pll_iterations: report.pll_iterations,
            kcl_residual,
            applied_e,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorNorms {
    pub mean_abs: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: PllMode,
    pub wall_time: f64,
    pub steps: usize,
    pub pll_iterations_total: usize,
}

impl From<&SimResult> for RunSummary {
    fn from(r: &SimResult) -> Self {
        Self {
            mode: r.mode,
            wall_time: r.wall_time,
            steps: r.steps,
            pll_iterations_total: r.pll_iterations_total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub baseline: RunSummary,
    pub candidate: RunSummary,
    /// `baseline.wall_time / candidate.wall_time`.
    pub speedup: f64,
    pub signals: BTreeMap<String, ErrorNorms>,
}

/// Per-signal mean and max absolute error of `b` against `a`. Angles are
/// compared modulo 2pi.
pub fn compare(a: &SimResult, b: &SimResult, signals: &[Signal]) -> Result<Metrics, SimError> {
    let (ta, tb) = (&a.traces.time, &b.traces.time);
    if ta.len() != tb.len() {
        return Err(SimError::GridMismatch(format!("{} vs {} samples", ta.len(), tb.len())));
    }
    if let Some(k) = ta.iter().zip(tb).position(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(SimError::GridMismatch(format!("sample {k}: t = {} vs {}", ta[k], tb[k])));
    }
    let mut out = BTreeMap::new();
    for &s in signals {
        let (xa, xb) = (a.traces.signal(s), b.traces.signal(s));
        let errs = xa.iter().zip(xb).map(|(x, y)| {
            if s.is_angle() {
                angle_diff(*x, *y).abs()
            } else {
                (x - y).abs()
            }
        });
        let (sum, max) = errs.fold((0.0, 0.0_f64), |(s, m), e| (s + e, m.max(e)));
        out.insert(
            s.name().to_string(),
            ErrorNorms {
                mean_abs: if xa.is_empty() { 0.0 } else { sum / xa.len() as f64 },
                max_abs: max,
            },
        );
    }
    Ok(Metrics {
        baseline: a.into(),
        candidate: b.into(),
        speedup: if b.wall_time > 0.0 { a.wall_time / b.wall_time } else { f64::NAN },
        signals: out,
    })
}

/// Signals reported in the hybrid-vs-traditional comparison.
pub const REPORT_SIGNALS: [Signal; 4] = [Signal::IA, Signal::VA, Signal::ThetaPll, Signal::Uq];

pub const RANDOM_T_END: f64 = 2.0;
pub const RANDOM_P_RANGE: (f64, f64) = (0.0, 1.0);
pub const RANDOM_Q_RANGE: (f64, f64) = (-0.3, 0.3);
pub const RANDOM_DIP_RANGE: (f64, f64) = (0.1, 0.3);
pub const RANDOM_DIP_DURATION: (f64, f64) = (0.05, 0.15);

/// Seeded scenarios with 1 to 3 events each, drawn from P steps, Q steps
/// and grid dips, at 100 us.
pub fn random_events(seed: u64, n: usize) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_end = RANDOM_T_END;
    let dt = 100e-6;
    (0..n)
        .map(|_| {
            let p0 = rng.gen_range(RANDOM_P_RANGE.0..=RANDOM_P_RANGE.1);
            let q0 = rng.gen_range(RANDOM_Q_RANGE.0..=RANDOM_Q_RANGE.1);
            let count = rng.gen_range(1..=3);
            let mut events: Vec<Event> = (0..count)
                .map(|_| {
                    // whole steps keep the snapped time equal to the stored one
                    let t = (rng.gen_range(0.2..t_end - 0.3) / dt).round() * dt;
                    let kind = match rng.gen_range(0..3) {
                        0 => EventKind::PStep {
                            to: rng.gen_range(RANDOM_P_RANGE.0..=RANDOM_P_RANGE.1),
                        },
                        1 => EventKind::QStep {
                            to: rng.gen_range(RANDOM_Q_RANGE.0..=RANDOM_Q_RANGE.1),
                        },
                        _ => EventKind::VoltageDip {
                            fraction: rng.gen_range(RANDOM_DIP_RANGE.0..=RANDOM_DIP_RANGE.1),
                            duration: rng.gen_range(RANDOM_DIP_DURATION.0..=RANDOM_DIP_DURATION.1),
                        },
                    };
                    Event { t, kind }
                })
                .collect();
            events.sort_by(|a, b| a.t.total_cmp(&b.t));
            Scenario {
                t_end,
                dt,
                setpoints_initial: [p0, q0],
                seed: Some(seed),
                events,
                params: None,
            }
        })
        .collect()
}
