//! Grid-side converter control: SRF-PLL, cascaded power/current PI loops and
//! the dq transforms between them.
//!
//! All control blocks are discretized with the trapezoidal rule. The PLL is
//! the only nonlinear closed loop (its angle feeds the Park transform that
//! produces its own input), so it can be stepped three ways, see
//! [`PllStepper`].

use std::f64::consts::{FRAC_PI_3, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pinn::{pll_step_pinn, MlpParams, PinnError};

pub type Abc = [f64; 3];

const TWO_PI_3: f64 = 2.0 * FRAC_PI_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("PLL Newton solve did not converge in {iterations} iterations (last |dtheta| = {last_update:e})")]
    NoConvergence { iterations: usize, last_update: f64 },
    #[error(transparent)]
    Pinn(#[from] PinnError),
}

/// Wraps an angle into `[0, 2pi)`.
#[inline]
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Smallest signed difference `a - b` between two angles, in `(-pi, pi]`.
#[inline]
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    if d > std::f64::consts::PI {
        d - TAU
    } else {
        d
    }
}

/// Amplitude-invariant Park transform. A balanced set `A cos(phi - k 2pi/3)`
/// maps to `(A cos(phi - theta), A sin(phi - theta), 0)`.
#[inline]
pub fn park(abc: Abc, theta: f64) -> [f64; 3] {
    let (s0, c0) = theta.sin_cos();
    let (s1, c1) = (theta - TWO_PI_3).sin_cos();
    let (s2, c2) = (theta + TWO_PI_3).sin_cos();
    let [a, b, c] = abc;
    [
        2.0 / 3.0 * (a * c0 + b * c1 + c * c2),
        -2.0 / 3.0 * (a * s0 + b * s1 + c * s2),
        (a + b + c) / 3.0,
    ]
}

#[inline]
pub fn inverse_park(dq0: [f64; 3], theta: f64) -> Abc {
    let [d, q, z] = dq0;
    let phase = |shift: f64| {
        let (s, c) = (theta + shift).sin_cos();
        d * c - q * s + z
    };
    [phase(0.0), phase(-TWO_PI_3), phase(TWO_PI_3)]
}

/// q-axis component only; the PLL's hot path.
#[inline]
fn park_q(abc: Abc, theta: f64) -> (f64, f64) {
    let [d, q, _] = park(abc, theta);
    (q, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiGains {
    pub kp: f64,
    pub ki: f64,
}

impl PiGains {
    pub const fn new(kp: f64, ki: f64) -> Self {
        Self { kp, ki }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PiState {
    pub integ: f64,
    pub prev_error: f64,
    pub limits: Option<(f64, f64)>,
}

impl PiState {
    pub fn with_integral(integ: f64) -> Self {
        Self {
            integ,
            ..Self::default()
        }
    }
}

/// One trapezoidal PI update. When the output saturates the integrator is
/// held at its previous value (clamping anti-windup).
pub fn pi_step(s: &PiState, error: f64, gains: PiGains, dt: f64) -> (f64, PiState) {
    let integ = s.integ + gains.ki * dt * 0.5 * (error + s.prev_error);
    let out = gains.kp * error + integ;
    match s.limits {
        Some((lo, hi)) if out < lo || out > hi => (
            out.clamp(lo, hi),
            PiState {
                prev_error: error,
                ..*s
            },
        ),
        _ => (
            out,
            PiState {
                integ,
                prev_error: error,
                limits: s.limits,
            },
        ),
    }
}

/// Controller parameters in per unit (gains act on pu errors, angles in rad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlParams {
    pub pll: PiGains,
    pub power: PiGains,
    pub current: PiGains,
    /// Rated angular frequency (rad/s).
    pub omega0: f64,
    /// Converter-side filter reactance at rated frequency (pu).
    pub l_c: f64,
}

impl Default for ControlParams {
    fn default() -> Self {
        Self {
            pll: PiGains::new(25.0, 300.0),
            power: PiGains::new(0.5, 30.0),
            current: PiGains::new(0.1, 20.0),
            omega0: TAU * 50.0,
            l_c: 0.1,
        }
    }
}

/// SRF-PLL state. `omega` and `v_q` are the values from the last step; the
/// trapezoidal updates need them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PllState {
    pub theta: f64,
    pub omega_integ: f64,
    pub omega: f64,
    pub v_q: f64,
    pub t: f64,
}

impl PllState {
    /// State at `theta` whose stored `v_q`/`omega` are consistent with the
    /// measured voltage.
    pub fn from_measurement(theta: f64, omega_integ: f64, v_abc: Abc, p: &ControlParams, t: f64) -> Self {
        let theta = wrap_angle(theta);
        let (v_q, _) = park_q(v_abc, theta);
        Self {
            theta,
            omega_integ,
            omega: p.omega0 + p.pll.kp * v_q + omega_integ,
            v_q,
            t,
        }
    }
}

/// Explicit PLL update with the loop opened by a one-step delay: `v_q` is
/// taken in the frame of the previous angle.
pub fn pll_step_delayed(s: &PllState, v_abc_now: Abc, p: &ControlParams, dt: f64) -> PllState {
    let (v_q, _) = park_q(v_abc_now, s.theta);
    let omega_integ = s.omega_integ + p.pll.ki * dt * 0.5 * (v_q + s.v_q);
    let omega = p.omega0 + p.pll.kp * v_q + omega_integ;
    PllState {
        theta: wrap_angle(s.theta + 0.5 * dt * (omega + s.omega)),
        omega_integ,
        omega,
        v_q,
        t: s.t + dt,
    }
}

/// Implicit trapezoidal PLL update with `v_q` evaluated at the new angle,
/// solved by scalar Newton iteration on the angle residual.
///
/// Returns the new state and the number of Newton updates taken.
pub fn pll_step_iterative(
    s: &PllState,
    v_abc_now: Abc,
    p: &ControlParams,
    dt: f64,
    tol: f64,
    max_iter: usize,
) -> Result<(PllState, usize), ControlError> {
    let half = 0.5 * dt;
    let ki_half = p.pll.ki * half;
    // theta_new = base + gain * v_q(theta_new)
    let base = s.theta
        + half * (s.omega + p.omega0 + s.omega_integ + ki_half * s.v_q);
    let gain = half * (p.pll.kp + ki_half);

    let mut theta = s.theta + dt * s.omega;
    let mut last_update = f64::INFINITY;
    for iteration in 1..=max_iter.max(1) {
        let (v_q, v_d) = park_q(v_abc_now, theta);
        let residual = theta - base - gain * v_q;
        // d v_q / d theta = -v_d
        let slope = 1.0 + gain * v_d;
        let update = -residual / slope;
        theta += update;
        last_update = update.abs();
        if last_update <= tol {
            let (v_q, _) = park_q(v_abc_now, theta);
            let omega_integ = s.omega_integ + ki_half * (v_q + s.v_q);
            return Ok((
                PllState {
                    theta: wrap_angle(theta),
                    omega_integ,
                    omega: p.omega0 + p.pll.kp * v_q + omega_integ,
                    v_q,
                    t: s.t + dt,
                },
                iteration,
            ));
        }
        if !theta.is_finite() {
            break;
        }
    }
    Err(ControlError::NoConvergence {
        iterations: max_iter,
        last_update,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PllMode {
    Delayed,
    Iterative,
    Pinn,
}

impl PllMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PllMode::Delayed => "delayed",
            PllMode::Iterative => "iterative",
            PllMode::Pinn => "pinn",
        }
    }
}

impl std::fmt::Display for PllMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PllMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "delayed" => Ok(PllMode::Delayed),
            "iterative" => Ok(PllMode::Iterative),
            "pinn" => Ok(PllMode::Pinn),
            other => Err(format!("unknown PLL mode '{other}'")),
        }
    }
}

pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 50;

/// How the PLL closed loop is solved each step.
#[derive(Debug, Clone, Copy)]
pub enum PllStepper<'a> {
    Delayed,
    Iterative { tol: f64, max_iter: usize },
    Pinn(&'a MlpParams),
}

impl<'a> PllStepper<'a> {
    pub fn iterative() -> Self {
        PllStepper::Iterative {
            tol: NEWTON_TOL,
            max_iter: NEWTON_MAX_ITER,
        }
    }

    /// Builds a stepper from a mode tag; `None` if the pinn mode has no
    /// weights. Other modes ignore `weights`.
    pub fn from_mode(mode: PllMode, weights: Option<&'a MlpParams>) -> Option<Self> {
        match (mode, weights) {
            (PllMode::Delayed, _) => Some(PllStepper::Delayed),
            (PllMode::Iterative, _) => Some(PllStepper::iterative()),
            (PllMode::Pinn, Some(w)) => Some(PllStepper::Pinn(w)),
            (PllMode::Pinn, None) => None,
        }
    }

    pub fn mode(&self) -> PllMode {
        match self {
            PllStepper::Delayed => PllMode::Delayed,
            PllStepper::Iterative { .. } => PllMode::Iterative,
            PllStepper::Pinn(_) => PllMode::Pinn,
        }
    }

    #[inline]
    pub fn step(
        &self,
        s: &PllState,
        v_abc_now: Abc,
        p: &ControlParams,
        dt: f64,
    ) -> Result<(PllState, usize), ControlError> {
        match *self {
            PllStepper::Delayed => Ok((pll_step_delayed(s, v_abc_now, p, dt), 0)),
            PllStepper::Iterative { tol, max_iter } => {
                pll_step_iterative(s, v_abc_now, p, dt, tol, max_iter)
            }
            PllStepper::Pinn(w) => Ok((pll_step_pinn(w, s, v_abc_now, dt)?, 0)),
        }
    }
}

/// Algebraic control outputs recomputed every step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlOutputs {
    pub e_d: f64,
    pub e_q: f64,
    pub e_abc: Abc,
    pub i_d_ref: f64,
    pub i_q_ref: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlState {
    pub pll: PllState,
    pub outer_d: PiState,
    pub outer_q: PiState,
    pub inner_d: PiState,
    pub inner_q: PiState,
    pub u: ControlOutputs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurements {
    /// Phase voltages at the PCC.
    pub v_pcc: Abc,
    /// Converter-side (L_c) currents, flowing out of the converter.
    pub i_conv: Abc,
    /// Grid-side (L_g) currents, flowing into the grid.
    pub i_grid: Abc,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Setpoints {
    pub p: f64,
    pub q: f64,
}

/// Quantities observed during one control step, kept for traces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlReport {
    pub p: f64,
    pub q: f64,
    pub v_d: f64,
    pub v_q: f64,
    pub pll_iterations: usize,
}

/// Instantaneous power injected at the PCC in pu; frame independent.
#[inline]
pub fn pq_from_dq(v: [f64; 3], i: [f64; 3]) -> (f64, f64) {
    (v[0] * i[0] + v[1] * i[1], v[1] * i[0] - v[0] * i[1])
}

/// Runs the control block diagram once: PLL, dq measurements, power loop,
/// current loop with decoupling and feedforward, inverse Park.
pub fn control_chain_step(
    cs: &ControlState,
    meas: &Measurements,
    setpoints: Setpoints,
    p: &ControlParams,
    dt: f64,
    stepper: &PllStepper<'_>,
) -> Result<(ControlState, ControlReport), ControlError> {
    let (pll, pll_iterations) = stepper.step(&cs.pll, meas.v_pcc, p, dt)?;
    let theta = pll.theta;
    let v = park(meas.v_pcc, theta);
    let i_conv = park(meas.i_conv, theta);
    let i_grid = park(meas.i_grid, theta);
    let (p_meas, q_meas) = pq_from_dq(v, i_grid);

    let (i_d_ref, outer_d) = pi_step(&cs.outer_d, setpoints.p - p_meas, p.power, dt);
    // Q = v_q i_d - v_d i_q, so raising Q needs a negative i_q.
    let (q_out, outer_q) = pi_step(&cs.outer_q, setpoints.q - q_meas, p.power, dt);
    let i_q_ref = -q_out;

    let (u_d, inner_d) = pi_step(&cs.inner_d, i_d_ref - i_conv[0], p.current, dt);
    let (u_q, inner_q) = pi_step(&cs.inner_q, i_q_ref - i_conv[1], p.current, dt);
    let x_c = pll.omega / p.omega0 * p.l_c;
    let e_d = v[0] + u_d - x_c * i_conv[1];
    let e_q = v[1] + u_q + x_c * i_conv[0];
    let e_abc = inverse_park([e_d, e_q, 0.0], theta);

    Ok((
        ControlState {
            pll,
            outer_d,
            outer_q,
            inner_d,
            inner_q,
            u: ControlOutputs {
                e_d,
                e_q,
                e_abc,
                i_d_ref,
                i_q_ref,
            },
        },
        ControlReport {
            p: p_meas,
            q: q_meas,
            v_d: v[0],
            v_q: v[1],
            pll_iterations,
        },
    ))
}

/// Balanced positive-sequence set `amplitude * cos(angle - k 2pi/3)`.
#[inline]
pub fn balanced(amplitude: f64, angle: f64) -> Abc {
    [
        amplitude * angle.cos(),
        amplitude * (angle - TWO_PI_3).cos(),
        amplitude * (angle + TWO_PI_3).cos(),
    ]
}
