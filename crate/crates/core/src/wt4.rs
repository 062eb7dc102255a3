//! Type-4 wind turbine benchmark: converter voltage source, LCL filter and
//! stiff grid, all three phases, plus steady-state initialization.
//!
//! Per phase `p` the nodes are `conv = 3p`, `pcc = 3p + 1`, `grid = 3p + 2`:
//!
//! ```text
//! E_conv --(r_c + L_c)-- PCC --(r_Lg + L_g)-- V_grid
//!                         |
//!                    (r_f + C_f)
//!                         |
//!                        gnd
//! ```
//!
//! Everything is in per unit on `(S_b, V_g, f_0)` with instantaneous
//! quantities normalized by phase peak values; reactances and susceptances
//! in pu at `f_0` are turned into pu-seconds by dividing by `omega0`.

use std::f64::consts::{FRAC_PI_3, TAU};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::circuit::{assemble, CircuitError, Element, NodalSystem, PerUnitBase, GROUND};
use crate::control::{
    wrap_angle, Abc, ControlError, ControlOutputs, ControlParams, ControlState, PiGains, PiState,
    PllState, PllStepper, Setpoints,
};

pub const DT_MIN: f64 = 1e-6;
pub const DT_MAX: f64 = 100e-6;

const BRANCH_LC: usize = 0;
const BRANCH_CF: usize = 1;
const BRANCH_LG: usize = 2;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("no equilibrium: {0}")]
    NoEquilibrium(String),
    #[error(transparent)]
    Circuit(#[from] CircuitError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Wt4Params {
    pub s_base_mw: f64,
    pub v_grid_kv: f64,
    pub f0: f64,
    pub r_c: f64,
    pub l_c: f64,
    pub r_f: f64,
    pub c_f: f64,
    pub r_lg: f64,
    pub l_g: f64,
    pub k_pll: [f64; 2],
    pub k_pc: [f64; 2],
    pub k_cc: [f64; 2],
    pub dt: f64,
}

impl Default for Wt4Params {
    fn default() -> Self {
        Self {
            s_base_mw: 100.0,
            v_grid_kv: 100.0,
            f0: 50.0,
            r_c: 0.005,
            l_c: 0.1,
            r_f: 0.0757,
            c_f: 0.00184,
            r_lg: 0.005,
            l_g: 0.1,
            k_pll: [25.0, 300.0],
            k_pc: [0.5, 30.0],
            k_cc: [0.1, 20.0],
            dt: 100e-6,
        }
    }
}

impl Wt4Params {
    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let named = [
            ("s_base_mw", self.s_base_mw),
            ("v_grid_kv", self.v_grid_kv),
            ("f0", self.f0),
            ("r_c", self.r_c),
            ("l_c", self.l_c),
            ("r_f", self.r_f),
            ("c_f", self.c_f),
            ("r_lg", self.r_lg),
            ("l_g", self.l_g),
            ("k_pll.kp", self.k_pll[0]),
            ("k_pll.ki", self.k_pll[1]),
            ("k_pc.kp", self.k_pc[0]),
            ("k_pc.ki", self.k_pc[1]),
            ("k_cc.kp", self.k_cc[0]),
            ("k_cc.ki", self.k_cc[1]),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(ModelError::InvalidParams(format!("{name} must be positive, got {v}")));
        }
        // tolerate decimal round-off at the range ends
        if !(self.dt >= DT_MIN * (1.0 - 1e-9) && self.dt <= DT_MAX * (1.0 + 1e-9)) {
            return Err(ModelError::InvalidParams(format!(
                "dt = {} s outside [{DT_MIN}, {DT_MAX}] s",
                self.dt
            )));
        }
        Ok(())
    }

    pub fn omega0(&self) -> f64 {
        TAU * self.f0
    }

    pub fn base(&self) -> PerUnitBase {
        PerUnitBase {
            power_va: self.s_base_mw * 1e6,
            voltage_ll_rms: self.v_grid_kv * 1e3,
            frequency_hz: self.f0,
        }
    }

    pub fn control_params(&self) -> ControlParams {
        ControlParams {
            pll: PiGains::new(self.k_pll[0], self.k_pll[1]),
            power: PiGains::new(self.k_pc[0], self.k_pc[1]),
            current: PiGains::new(self.k_cc[0], self.k_cc[1]),
            omega0: self.omega0(),
            l_c: self.l_c,
        }
    }

    /// Per-phase network elements for phase `phase`.
    fn phase_elements(&self, phase: usize) -> [Element; 5] {
        let w0 = self.omega0();
        let (conv, pcc, grid) = PhaseNodes::of(phase).tuple();
        [
            Element::inductor(conv, pcc, self.l_c / w0).with_series_resistance(self.r_c),
            Element::capacitor(pcc, GROUND, self.c_f / w0).with_series_resistance(self.r_f),
            Element::inductor(pcc, grid, self.l_g / w0).with_series_resistance(self.r_lg),
            Element::voltage_source(conv, GROUND, 0.0),
            Element::voltage_source(grid, GROUND, 0.0),
        ]
    }

    pub fn elements(&self) -> Vec<Element> {
        (0..3).flat_map(|p| self.phase_elements(p)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseNodes {
    pub converter: usize,
    pub pcc: usize,
    pub grid: usize,
}

impl PhaseNodes {
    pub fn of(phase: usize) -> Self {
        Self {
            converter: 3 * phase,
            pcc: 3 * phase + 1,
            grid: 3 * phase + 2,
        }
    }

    fn tuple(self) -> (usize, usize, usize) {
        (self.converter, self.pcc, self.grid)
    }
}

/// Phase-a phasors (peak pu, angle at t = 0) of the operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equilibrium {
    pub setpoints: Setpoints,
    pub v_conv: Complex64,
    pub v_pcc: Complex64,
    pub v_grid: Complex64,
    pub i_conv: Complex64,
    pub i_filter: Complex64,
    pub i_grid: Complex64,
}

impl Equilibrium {
    /// Phase values of a phasor at time `t`.
    pub fn sample(phasor: Complex64, omega0: f64, t: f64) -> Abc {
        let rot = Complex64::from_polar(1.0, omega0 * t);
        let x = phasor * rot;
        let shift = Complex64::from_polar(1.0, -2.0 * FRAC_PI_3);
        [x.re, (x * shift).re, (x * shift.conj()).re]
    }
}

/// Converter output lands one step late in the network, so the control
/// frame needs the converter phasor one step ahead.
fn step_rotation(omega0: f64, dt: f64) -> Complex64 {
    Complex64::from_polar(1.0, omega0 * dt)
}

/// Frequency warping of trapezoidal L and C at `omega0`.
pub fn trapezoidal_warp(omega0: f64, dt: f64) -> f64 {
    let x = 0.5 * omega0 * dt;
    x.tan() / x
}

/// Solves the LCL phasor power flow for converter injection `(p, q)` at the
/// PCC, with the grid at `1∠0`. Reactances are warped by `warp` so the
/// result is an exact steady state of the discretized network.
pub fn solve_phasors(params: &Wt4Params, setpoints: Setpoints, warp: f64) -> Result<Equilibrium, ModelError> {
    if setpoints.p.abs() > 1.0 || setpoints.q.abs() > 1.0 || !setpoints.p.is_finite() || !setpoints.q.is_finite() {
        return Err(ModelError::NoEquilibrium(format!(
            "setpoints ({}, {}) outside the 1 pu rating",
            setpoints.p, setpoints.q
        )));
    }
    let j = Complex64::i();
    let z_g = params.r_lg + j * warp * params.l_g;
    let z_c = params.r_c + j * warp * params.l_c;
    let z_f = params.r_f - j / (warp * params.c_f);
    let v_grid = Complex64::new(1.0, 0.0);
    let s = Complex64::new(setpoints.p, setpoints.q);

    let mut v_pcc = v_grid;
    let mut converged = false;
    for _ in 0..200 {
        let next = v_grid + z_g * (s / v_pcc).conj();
        let delta = (next - v_pcc).norm();
        v_pcc = next;
        if !v_pcc.norm().is_finite() {
            break;
        }
        if delta <= 1e-15 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(ModelError::NoEquilibrium("PCC voltage iteration did not converge".into()));
    }
    let i_grid = (s / v_pcc).conj();
    let i_filter = v_pcc / z_f;
    let i_conv = i_grid + i_filter;
    Ok(Equilibrium {
        setpoints,
        v_conv: v_pcc + z_c * i_conv,
        v_pcc,
        v_grid,
        i_conv,
        i_filter,
        i_grid,
    })
}

/// Complete benchmark model: network, control state and operating point.
#[derive(Debug, Clone)]
pub struct Wt4System {
    pub network: NodalSystem,
    pub control: ControlState,
    pub params: Wt4Params,
    pub control_params: ControlParams,
    pub equilibrium: Equilibrium,
    /// Converter voltage the network applies at the next step.
    pub e_abc: Abc,
}

/// Builds the three-phase network with zero initial state.
pub fn build(params: &Wt4Params) -> Result<Wt4System, ModelError> {
    params.validate()?;
    let network = assemble(&params.elements(), params.dt)?;
    let control_params = params.control_params();
    let zero = Complex64::new(0.0, 0.0);
    Ok(Wt4System {
        network,
        control: ControlState {
            pll: PllState {
                theta: 0.0,
                omega_integ: 0.0,
                omega: control_params.omega0,
                v_q: 0.0,
                t: 0.0,
            },
            outer_d: PiState::default(),
            outer_q: PiState::default(),
            inner_d: PiState::default(),
            inner_q: PiState::default(),
            u: ControlOutputs::default(),
        },
        params: params.clone(),
        control_params,
        equilibrium: Equilibrium {
            setpoints: Setpoints::default(),
            v_conv: zero,
            v_pcc: zero,
            v_grid: Complex64::new(1.0, 0.0),
            i_conv: zero,
            i_filter: zero,
            i_grid: zero,
        },
        e_abc: [0.0; 3],
    })
}

/// Builds the model at the steady state delivering `setpoints` at the PCC,
/// with network histories, PLL and PI integrators seeded so that the first
/// steps are flat. The PLL is locked for the iterative solver; use
/// [`Wt4System::lock_for`] for the other solvers.
pub fn init_steady_state(params: &Wt4Params, setpoints: Setpoints) -> Result<Wt4System, ModelError> {
    let mut sys = build(params)?;
    let w0 = params.omega0();
    let eq = solve_phasors(params, setpoints, trapezoidal_warp(w0, params.dt))?;
    sys.equilibrium = eq;

    for phase in 0..3 {
        let base = 3 * phase;
        let pick = |x: Complex64| Equilibrium::sample(x, w0, 0.0)[phase];
        sys.network
            .seed_branch(base + BRANCH_LC, pick(eq.v_conv - eq.v_pcc), pick(eq.i_conv));
        sys.network.seed_branch(base + BRANCH_CF, pick(eq.v_pcc), pick(eq.i_filter));
        sys.network
            .seed_branch(base + BRANCH_LG, pick(eq.v_pcc - eq.v_grid), pick(eq.i_grid));
    }
    sys.seed_control(0.0, 0.0)?;
    Ok(sys)
}

impl Wt4System {
    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    pub fn omega0(&self) -> f64 {
        self.control_params.omega0
    }

    /// Grid source phase voltages at `t` for a magnitude factor.
    #[inline]
    pub fn grid_voltage(&self, t: f64, magnitude: f64) -> Abc {
        let v = Equilibrium::sample(self.equilibrium.v_grid, self.omega0(), t);
        [magnitude * v[0], magnitude * v[1], magnitude * v[2]]
    }

    /// Network state at t = 0 for phase quantities: (v_pcc, i_grid, i_conv).
    pub fn initial_measurements(&self) -> (Abc, Abc, Abc) {
        let w0 = self.omega0();
        (
            Equilibrium::sample(self.equilibrium.v_pcc, w0, 0.0),
            Equilibrium::sample(self.equilibrium.i_grid, w0, 0.0),
            Equilibrium::sample(self.equilibrium.i_conv, w0, 0.0),
        )
    }

    /// Seeds the control states for the equilibrium with the PLL frame at
    /// `offset` rad ahead of the PCC voltage angle and integrator `omega_integ`.
    fn seed_control(&mut self, offset: f64, omega_integ: f64) -> Result<(), ModelError> {
        let eq = self.equilibrium;
        let w0 = self.omega0();
        let dt = self.dt();
        let cp = self.control_params;
        let frame = eq.v_pcc.arg() + offset;
        let to_frame = Complex64::from_polar(1.0, -frame);
        let v = eq.v_pcc * to_frame;
        let i_c = eq.i_conv * to_frame;
        let e = eq.v_conv * step_rotation(w0, dt) * to_frame;

        // at either exact lock the q-voltage seen by the last PLL step is zero
        let pll = PllState {
            theta: wrap_angle(frame),
            omega_integ,
            omega: w0,
            v_q: 0.0,
            t: 0.0,
        };
        let x_c = pll.omega / w0 * cp.l_c;

        self.control = ControlState {
            pll,
            outer_d: PiState::with_integral(i_c.re),
            outer_q: PiState::with_integral(-i_c.im),
            inner_d: PiState::with_integral(e.re - v.re + x_c * i_c.im),
            inner_q: PiState::with_integral(e.im - v.im - x_c * i_c.re),
            u: ControlOutputs {
                e_d: e.re,
                e_q: e.im,
                e_abc: Equilibrium::sample(eq.v_conv, w0, dt),
                i_d_ref: i_c.re,
                i_q_ref: i_c.im,
            },
        };
        self.e_abc = self.control.u.e_abc;
        Ok(())
    }

    /// Re-seeds the PLL lock (and the dependent PI integrators) to the fixed
    /// point of the given solver.
    pub fn lock_for(&mut self, stepper: &PllStepper<'_>) -> Result<(), ModelError> {
        match stepper {
            PllStepper::Iterative { .. } => self.seed_control(0.0, 0.0),
            // the delayed loop settles with the old angle aligned to the new voltage
            PllStepper::Delayed => self.seed_control(self.omega0() * self.dt(), 0.0),
            PllStepper::Pinn(_) => {
                let (offset, integ) = self.surrogate_fixed_point(stepper)?;
                self.seed_control(offset, integ)?;
                self.control.pll.omega = self.omega0();
                Ok(())
            }
        }
    }

    /// Finds `(offset, omega_integ)` such that one surrogate step from the
    /// equilibrium advances the angle by exactly `omega0 dt` and leaves the
    /// integrator unchanged.
    fn surrogate_fixed_point(&self, stepper: &PllStepper<'_>) -> Result<(f64, f64), ModelError> {
        let eq = self.equilibrium;
        let w0 = self.omega0();
        let dt = self.dt();
        let cp = self.control_params;
        let v_next = Equilibrium::sample(eq.v_pcc, w0, dt);
        let delta = eq.v_pcc.arg();
        let residual = |x: [f64; 2]| -> Result<[f64; 2], ModelError> {
            let s = PllState {
                theta: wrap_angle(delta + x[0]),
                omega_integ: x[1],
                omega: w0,
                v_q: 0.0,
                t: 0.0,
            };
            let (next, _) = stepper.step(&s, v_next, &cp, dt)?;
            Ok([
                crate::control::angle_diff(next.theta, s.theta) / dt - w0,
                (next.omega_integ - x[1]) / dt,
            ])
        };
        let mut x = [0.0, 0.0];
        for _ in 0..50 {
            let r = residual(x)?;
            if r[0].abs() < 1e-9 && r[1].abs() < 1e-9 {
                return Ok((x[0], x[1]));
            }
            let h = [1e-6, 1e-4];
            let mut jac = [[0.0; 2]; 2];
            for c in 0..2 {
                let mut xp = x;
                xp[c] += h[c];
                let rp = residual(xp)?;
                for r_i in 0..2 {
                    jac[r_i][c] = (rp[r_i] - r[r_i]) / h[c];
                }
            }
            let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
            if det.abs() < 1e-300 || !det.is_finite() {
                break;
            }
            x[0] -= (jac[1][1] * r[0] - jac[0][1] * r[1]) / det;
            x[1] -= (-jac[1][0] * r[0] + jac[0][0] * r[1]) / det;
        }
        Err(ModelError::NoEquilibrium("surrogate PLL has no lock near the operating point".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::is_symmetric;

    #[test]
    fn default_network_is_symmetric() {
        let sys = build(&Wt4Params::default()).unwrap();
        assert_eq!(sys.network.n_nodes(), 9);
        assert_eq!(sys.network.sources().len(), 6);
        assert!(is_symmetric(sys.network.admittance(), 1e-12));
    }

    #[test]
    fn step_outside_supported_range_is_rejected() {
        for dt in [0.5e-6, 150e-6] {
            assert!(matches!(
                build(&Wt4Params::default().with_dt(dt)),
                Err(ModelError::InvalidParams(_))
            ));
        }
        assert!(build(&Wt4Params::default().with_dt(1e-6)).is_ok());
    }

    #[test]
    fn over_rating_has_no_equilibrium() {
        let err = init_steady_state(&Wt4Params::default(), Setpoints { p: 2.0, q: 0.0 }).unwrap_err();
        assert!(matches!(err, ModelError::NoEquilibrium(_)));
    }

    #[test]
    fn zero_transfer_only_charges_the_capacitor() {
        let p = Wt4Params::default();
        let eq = solve_phasors(&p, Setpoints::default(), 1.0).unwrap();
        assert!(eq.i_grid.norm() < 1e-15);
        assert!((eq.v_pcc - eq.v_grid).norm() < 1e-15);
        let i_cap = 1.0 / Complex64::new(p.r_f, -1.0 / p.c_f);
        assert!((eq.i_conv - i_cap).norm() < 1e-15);
        assert!((eq.v_conv - (eq.v_pcc + Complex64::new(p.r_c, p.l_c) * i_cap)).norm() < 1e-15);
    }

    #[test]
    fn phasor_power_balance() {
        let p = Wt4Params::default();
        let eq = solve_phasors(&p, Setpoints { p: 0.65, q: 0.25 }, 1.0).unwrap();
        let s_pcc = eq.v_pcc * eq.i_grid.conj();
        assert!((s_pcc.re - 0.65).abs() < 1e-12 && (s_pcc.im - 0.25).abs() < 1e-12);
        let p_conv = (eq.v_conv * eq.i_conv.conj()).re;
        let losses = p.r_c * eq.i_conv.norm_sqr() + p.r_f * eq.i_filter.norm_sqr() + p.r_lg * eq.i_grid.norm_sqr();
        let p_grid = (eq.v_grid * eq.i_grid.conj()).re;
        assert!((p_conv - losses - p_grid).abs() < 1e-12);
        assert!((p_conv - (p.r_c * eq.i_conv.norm_sqr() + p.r_f * eq.i_filter.norm_sqr()) - 0.65).abs() < 1e-12);
    }

    #[test]
    fn warp_is_second_order() {
        let w = TAU * 50.0;
        let x = 0.5 * w * 1e-4;
        assert!((trapezoidal_warp(w, 1e-4) - 1.0 - x * x / 3.0 - 2.0 * x.powi(4) / 15.0).abs() < 1e-12);
    }
}
