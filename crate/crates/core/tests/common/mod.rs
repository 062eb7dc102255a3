//! Reference models shared by the integration tests. Nothing here calls the
//! simulator's solvers.

#![allow(dead_code)]

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const TWO_PI_3: f64 = 2.0 * PI / 3.0;

/// Current of a series RL driven by `v_peak sin(w t)` from rest.
pub fn series_rl_current(r: f64, l: f64, v_peak: f64, w: f64, t: f64) -> f64 {
    let z = (r * r + (w * l).powi(2)).sqrt();
    let phi = (w * l).atan2(r);
    v_peak / z * ((w * t - phi).sin() + phi.sin() * (-r * t / l).exp())
}

/// Random weights document with the PLL feature layout.
pub fn random_weights_json(seed: u64, hidden: &[usize]) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![7];
    dims.extend_from_slice(hidden);
    dims.push(2);
    let layers: Vec<Value> = dims
        .windows(2)
        .map(|d| {
            let scale = 1.0 / (d[0] as f64).sqrt();
            let w: Vec<f64> = (0..d[0] * d[1]).map(|_| rng.gen_range(-2.0..2.0) * scale).collect();
            let b: Vec<f64> = (0..d[1]).map(|_| rng.gen_range(-0.5..0.5)).collect();
            json!({"rows": d[1], "cols": d[0], "w": w, "b": b})
        })
        .collect();
    let integ: f64 = rng.gen_range(5.0..40.0);
    json!({
        "format_version": 1,
        "activation": "tanh",
        "input_spec": [
            {"name": "dt", "lo": 0.0, "hi": 100e-6},
            {"name": "v_a", "lo": -1.1, "hi": 1.1},
            {"name": "v_b", "lo": -1.1, "hi": 1.1},
            {"name": "v_c", "lo": -1.1, "hi": 1.1},
            {"name": "sin_theta", "lo": -1.0, "hi": 1.0},
            {"name": "cos_theta", "lo": -1.0, "hi": 1.0},
            {"name": "omega_integ", "lo": -integ, "hi": integ},
        ],
        "output_spec": [
            {"name": "theta_rate", "offset": 2.0 * PI * 50.0, "scale": rng.gen_range(10.0..100.0)},
            {"name": "integ_rate", "offset": 0.0, "scale": rng.gen_range(100.0..600.0)},
        ],
        "layers": layers,
    })
}

/// Straightforward evaluation of a weights document: scale, dense layers
/// with tanh everywhere, de-scale.
pub fn reference_rates(doc: &Value, raw: &[f64]) -> Vec<f64> {
    let mut x: Vec<f64> = doc["input_spec"]
        .as_array()
        .unwrap()
        .iter()
        .zip(raw)
        .map(|(s, &v)| {
            let (lo, hi) = (s["lo"].as_f64().unwrap(), s["hi"].as_f64().unwrap());
            -1.0 + 2.0 * (v - lo) / (hi - lo)
        })
        .collect();
    for layer in doc["layers"].as_array().unwrap() {
        let rows = layer["rows"].as_u64().unwrap() as usize;
        let cols = layer["cols"].as_u64().unwrap() as usize;
        let w: Vec<f64> = layer["w"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let b: Vec<f64> = layer["b"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        let mut y = vec![0.0; rows];
        for r in 0..rows {
            let mut z = b[r];
            for c in 0..cols {
                z += w[r * cols + c] * x[c];
            }
            y[r] = z.tanh();
        }
        x = y;
    }
    doc["output_spec"]
        .as_array()
        .unwrap()
        .iter()
        .zip(&x)
        .map(|(o, &y)| o["offset"].as_f64().unwrap() + o["scale"].as_f64().unwrap() * y)
        .collect()
}

pub fn park_dq(x: [f64; 3], theta: f64) -> (f64, f64) {
    let mut d = 0.0;
    let mut q = 0.0;
    for (k, v) in x.iter().enumerate() {
        let a = theta - k as f64 * TWO_PI_3;
        d += v * a.cos();
        q -= v * a.sin();
    }
    (2.0 / 3.0 * d, 2.0 / 3.0 * q)
}

pub fn dq_to_abc(d: f64, q: f64, theta: f64) -> [f64; 3] {
    let f = |k: f64| {
        let a = theta - k * TWO_PI_3;
        d * a.cos() - q * a.sin()
    };
    [f(0.0), f(1.0), f(2.0)]
}

/// Benchmark data in per unit, reactances at rated frequency.
#[derive(Debug, Clone, Copy)]
pub struct Plant {
    pub w0: f64,
    pub r_c: f64,
    pub x_c: f64,
    pub r_f: f64,
    pub b_f: f64,
    pub r_g: f64,
    pub x_g: f64,
    pub pll: (f64, f64),
    pub pc: (f64, f64),
    pub cc: (f64, f64),
}

impl Default for Plant {
    fn default() -> Self {
        Self {
            w0: 2.0 * PI * 50.0,
            r_c: 0.005,
            x_c: 0.1,
            r_f: 0.0757,
            b_f: 0.00184,
            r_g: 0.005,
            x_g: 0.1,
            pll: (25.0, 300.0),
            pc: (0.5, 30.0),
            cc: (0.1, 20.0),
        }
    }
}

/// Exogenous inputs of the continuous model: grid magnitude and (P*, Q*).
pub trait Inputs {
    fn grid_magnitude(&self, t: f64) -> f64;
    fn setpoints(&self, t: f64) -> (f64, f64);
}

/// Continuous-time closed loop: LCL plant, SRF-PLL, power and current PI
/// loops; the converter voltage is applied instantly unless a transport
/// delay is set.
///
/// State: i_c[3], v_cap[3], i_g[3], theta, pll_integ, outer_d, outer_q,
/// inner_d, inner_q.
pub struct Rk4Oracle<'a, I: Inputs> {
    pub plant: Plant,
    pub inputs: &'a I,
    pub x: [f64; 15],
    pub t: f64,
    /// Transport delay on the converter voltage (0 = none); a multiple of
    /// the step used in [`Rk4Oracle::step`].
    delay: f64,
    e_phasor: Complex64,
    e_history: Vec<[f64; 3]>,
    h: f64,
}

pub struct OracleOutputs {
    pub i_g: [f64; 3],
    pub v_pcc: [f64; 3],
    pub theta: f64,
}

impl<'a, I: Inputs> Rk4Oracle<'a, I> {
    /// Sinusoidal steady state at the setpoints in effect at t = 0, grid 1∠0.
    pub fn at_rest(plant: Plant, inputs: &'a I) -> Self {
        Self::at_rest_delayed(plant, inputs, 0.0)
    }

    /// As [`Rk4Oracle::at_rest`], with the converter voltage applied `delay`
    /// seconds after the control computes it. The control then has to lead
    /// the applied voltage by `w0 delay`.
    pub fn at_rest_delayed(plant: Plant, inputs: &'a I, delay: f64) -> Self {
        let (p, q) = inputs.setpoints(0.0);
        let j = Complex64::i();
        let z_g = plant.r_g + j * plant.x_g;
        let z_c = plant.r_c + j * plant.x_c;
        let z_f = plant.r_f - j / plant.b_f;
        let s = Complex64::new(p, q);
        let v_g = Complex64::new(inputs.grid_magnitude(0.0), 0.0);
        let mut v_p = v_g;
        for _ in 0..200 {
            v_p = v_g + z_g * (s / v_p).conj();
        }
        let i_g = (v_p - v_g) / z_g;
        let i_c = i_g + v_p / z_f;
        let e = v_p + z_c * i_c;
        let v_cap = v_p - plant.r_f * (i_c - i_g);

        let theta = v_p.arg();
        let rot = Complex64::from_polar(1.0, -theta);
        let e_ctrl = e * Complex64::from_polar(1.0, plant.w0 * delay);
        let (vd, ic_dq, e_dq) = (v_p * rot, i_c * rot, e_ctrl * rot);
        let abc = |z: Complex64| [z.re, (z * Complex64::from_polar(1.0, -TWO_PI_3)).re, (z * Complex64::from_polar(1.0, TWO_PI_3)).re];
        let (ic, vc, ig) = (abc(i_c), abc(v_cap), abc(i_g));
        let mut x = [0.0; 15];
        x[0..3].copy_from_slice(&ic);
        x[3..6].copy_from_slice(&vc);
        x[6..9].copy_from_slice(&ig);
        x[9] = theta;
        x[10] = 0.0;
        x[11] = ic_dq.re;
        x[12] = -ic_dq.im;
        // e = v + u + j x_c i in the PLL frame at nominal frequency
        x[13] = e_dq.re - vd.re + plant.x_c * ic_dq.im;
        x[14] = e_dq.im - vd.im - plant.x_c * ic_dq.re;
        Self {
            plant,
            inputs,
            x,
            t: 0.0,
            delay,
            e_phasor: e,
            e_history: Vec::new(),
            h: 0.0,
        }
    }

    fn pcc(&self, x: &[f64; 15]) -> [f64; 3] {
        let rf = self.plant.r_f;
        [0, 1, 2].map(|k| x[3 + k] + rf * (x[k] - x[6 + k]))
    }

    pub fn outputs(&self) -> OracleOutputs {
        OracleOutputs {
            i_g: [self.x[6], self.x[7], self.x[8]],
            v_pcc: self.pcc(&self.x),
            theta: self.x[9],
        }
    }

    fn deriv(&self, t: f64, x: &[f64; 15]) -> [f64; 15] {
        let pl = &self.plant;
        let w0 = pl.w0;
        let v = self.pcc(x);
        let ic = [x[0], x[1], x[2]];
        let ig = [x[6], x[7], x[8]];
        let theta = x[9];
        let (vd, vq) = park_dq(v, theta);
        let omega = w0 + pl.pll.0 * vq + x[10];

        let (icd, icq) = park_dq(ic, theta);
        let (igd, igq) = park_dq(ig, theta);
        let p_m = vd * igd + vq * igq;
        let q_m = vq * igd - vd * igq;
        let (ps, qs) = self.inputs.setpoints(t);
        let (ep, eq) = (ps - p_m, qs - q_m);
        let id_ref = pl.pc.0 * ep + x[11];
        let iq_ref = -(pl.pc.0 * eq + x[12]);
        let (ed_err, eq_err) = (id_ref - icd, iq_ref - icq);
        let xc = omega / w0 * pl.x_c;
        let e_d = vd + pl.cc.0 * ed_err + x[13] - xc * icq;
        let e_q = vq + pl.cc.0 * eq_err + x[14] + xc * icd;
        let e = if self.delay > 0.0 {
            self.delayed_e(t - self.delay)
        } else {
            dq_to_abc(e_d, e_q, theta)
        };

        let mag = self.inputs.grid_magnitude(t);
        let mut dx = [0.0; 15];
        for k in 0..3 {
            let vg = mag * (w0 * t - k as f64 * TWO_PI_3).cos();
            // L, C in pu-seconds are x/w0 and b/w0
            dx[k] = (e[k] - v[k] - pl.r_c * ic[k]) * w0 / pl.x_c;
            dx[3 + k] = (ic[k] - ig[k]) * w0 / pl.b_f;
            dx[6 + k] = (v[k] - vg - pl.r_g * ig[k]) * w0 / pl.x_g;
        }
        dx[9] = omega;
        dx[10] = pl.pll.1 * vq;
        dx[11] = pl.pc.1 * ep;
        dx[12] = pl.pc.1 * eq;
        dx[13] = pl.cc.1 * ed_err;
        dx[14] = pl.cc.1 * eq_err;
        dx
    }

    /// Converter voltage the undelayed control law gives for state `x`.
    fn control_e(&self, t: f64, x: &[f64; 15]) -> [f64; 3] {
        self.e_now(t, x)
    }

    fn e_now(&self, t: f64, x: &[f64; 15]) -> [f64; 3] {
        let pl = &self.plant;
        let v = self.pcc(x);
        let theta = x[9];
        let (vd, vq) = park_dq(v, theta);
        let omega = pl.w0 + pl.pll.0 * vq + x[10];
        let (icd, icq) = park_dq([x[0], x[1], x[2]], theta);
        let (igd, igq) = park_dq([x[6], x[7], x[8]], theta);
        let (ps, qs) = self.inputs.setpoints(t);
        let id_ref = pl.pc.0 * (ps - (vd * igd + vq * igq)) + x[11];
        let iq_ref = -(pl.pc.0 * (qs - (vq * igd - vd * igq)) + x[12]);
        let xc = omega / pl.w0 * pl.x_c;
        let e_d = vd + pl.cc.0 * (id_ref - icd) + x[13] - xc * icq;
        let e_q = vq + pl.cc.0 * (iq_ref - icq) + x[14] + xc * icd;
        dq_to_abc(e_d, e_q, theta)
    }

    fn delayed_e(&self, t: f64) -> [f64; 3] {
        if t < 0.0 || self.e_history.is_empty() {
            let z = self.e_phasor * Complex64::from_polar(1.0, self.plant.w0 * t);
            return [z.re, (z * Complex64::from_polar(1.0, -TWO_PI_3)).re, (z * Complex64::from_polar(1.0, TWO_PI_3)).re];
        }
        let s = t / self.h;
        let j = (s.floor() as usize).min(self.e_history.len() - 1);
        let j1 = (j + 1).min(self.e_history.len() - 1);
        let u = s - j as f64;
        let (a, b) = (self.e_history[j], self.e_history[j1]);
        [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * u)
    }

    pub fn step(&mut self, h: f64) {
        if self.delay > 0.0 && self.e_history.is_empty() {
            self.h = h;
            let e0 = self.control_e(0.0, &self.x);
            self.e_history.push(e0);
        }
        let x = self.x;
        let t = self.t;
        let add = |a: &[f64; 15], b: &[f64; 15], s: f64| {
            let mut out = *a;
            for i in 0..15 {
                out[i] += s * b[i];
            }
            out
        };
        let k1 = self.deriv(t, &x);
        let k2 = self.deriv(t + 0.5 * h, &add(&x, &k1, 0.5 * h));
        let k3 = self.deriv(t + 0.5 * h, &add(&x, &k2, 0.5 * h));
        let k4 = self.deriv(t + h, &add(&x, &k3, h));
        for i in 0..15 {
            self.x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        self.t = t + h;
        if self.delay > 0.0 {
            let e = self.control_e(self.t, &self.x);
            self.e_history.push(e);
        }
    }
}

/// Piecewise-linear reconstruction of inputs sampled on a grid of step `dt`.
pub struct SampledInputs {
    pub dt: f64,
    pub magnitude: Vec<f64>,
    pub setpoints: Vec<(f64, f64)>,
}

impl SampledInputs {
    fn lerp<T: Copy>(&self, t: f64, xs: &[T], f: impl Fn(T, T, f64) -> T) -> T {
        let s = t / self.dt;
        let k = (s.floor() as usize).min(xs.len() - 1);
        let k1 = (k + 1).min(xs.len() - 1);
        f(xs[k], xs[k1], s - k as f64)
    }
}

impl Inputs for SampledInputs {
    fn grid_magnitude(&self, t: f64) -> f64 {
        self.lerp(t, &self.magnitude, |a, b, u| a + (b - a) * u)
    }

    fn setpoints(&self, t: f64) -> (f64, f64) {
        self.lerp(t, &self.setpoints, |a, b, u| (a.0 + (b.0 - a.0) * u, a.1 + (b.1 - a.1) * u))
    }
}
