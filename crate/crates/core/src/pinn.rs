//! Explicit neural PLL stepper.
//!
//! A fully connected tanh network maps `(dt, v_abc, sin theta, cos theta,
//! omega_integ)` to the average rates of the PLL states over the step, and
//! the step is taken as `y_t = y_prev + dt * rate`. Input features are
//! affinely scaled to `[-1, 1]` from the domain bounds stored with the
//! weights; outputs are de-scaled with a per-output offset and scale.
//!
//! Weights travel as a JSON document:
//!
//! ```json
//! {"format_version":1,"activation":"tanh",
//!  "input_spec":[{"name":"dt","lo":0.0,"hi":1e-4}, ...],
//!  "output_spec":[{"name":"theta_rate","offset":314.159,"scale":60.0}, ...],
//!  "layers":[{"rows":64,"cols":7,"w":[...row-major...],"b":[...]}, ...]}
//! ```

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{park, wrap_angle, Abc, PllState};

pub const FORMAT_VERSION: u32 = 1;

/// Largest step the reference surrogate is trained for.
pub const DT_MAX: f64 = 100e-6;

/// Feature order expected by [`pll_step_pinn`].
pub const PLL_INPUTS: [&str; 7] = ["dt", "v_a", "v_b", "v_c", "sin_theta", "cos_theta", "omega_integ"];
/// Output order expected by [`pll_step_pinn`].
pub const PLL_OUTPUTS: [&str; 2] = ["theta_rate", "integ_rate"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PinnError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown activation '{0}'")]
    UnknownActivation(String),
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input '{feature}' = {value} outside trained domain [{lo}, {hi}]")]
    DomainViolation {
        feature: String,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("weights do not describe a PLL surrogate: {0}")]
    FeatureMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl FeatureSpec {
    /// Maps `[lo, hi]` onto `[-1, 1]`.
    #[inline]
    pub fn scale(&self, x: f64) -> f64 {
        2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0
    }

    #[inline]
    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSpec {
    pub name: String,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    activation: String,
    input_spec: Vec<FeatureSpec>,
    output_spec: Vec<OutputSpec>,
    layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let uniform = self.hidden.windows(2).all(|w| w[0] == w[1]);
        match self.hidden.first() {
            None => write!(f, "0 hidden"),
            Some(width) if uniform => write!(f, "{} hidden × {}", self.hidden.len(), width),
            Some(_) => write!(f, "{} hidden ({:?})", self.hidden.len(), self.hidden),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub input_spec: Vec<FeatureSpec>,
    pub output_spec: Vec<OutputSpec>,
}

/// Parses and validates a weights document.
pub fn load_weights<R: io::Read>(source: R) -> Result<MlpParams, PinnError> {
    let file: WeightsFile = serde_json::from_reader(source).map_err(|e| PinnError::Parse(e.to_string()))?;
    MlpParams::from_file(file)
}

pub fn load_weights_str(text: &str) -> Result<MlpParams, PinnError> {
    load_weights(text.as_bytes())
}

/// Writes every float as `{:.16e}` (17 significant digits).
struct DecimalFormatter;

impl serde_json::ser::Formatter for DecimalFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

impl MlpParams {
    fn from_file(file: WeightsFile) -> Result<Self, PinnError> {
        if file.format_version != FORMAT_VERSION {
            return Err(PinnError::Parse(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let activation = match file.activation.as_str() {
            "tanh" => Activation::Tanh,
            other => return Err(PinnError::UnknownActivation(other.to_string())),
        };
        let params = MlpParams {
            layers: file.layers,
            activation,
            input_spec: file.input_spec,
            output_spec: file.output_spec,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), PinnError> {
        let shape = |msg: String| Err(PinnError::ShapeMismatch(msg));
        if self.layers.is_empty() {
            return shape("no layers".into());
        }
        let mut expected_cols = self.input_spec.len();
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.rows == 0 || layer.cols == 0 {
                return shape(format!("layer {k} has an empty dimension"));
            }
            if layer.cols != expected_cols {
                return shape(format!(
                    "layer {k} has {} columns but its input has {expected_cols} entries",
                    layer.cols
                ));
            }
            if layer.w.len() != layer.rows * layer.cols {
                return shape(format!(
                    "layer {k} declares {}x{} but has {} weights",
                    layer.rows,
                    layer.cols,
                    layer.w.len()
                ));
            }
            if layer.b.len() != layer.rows {
                return shape(format!("layer {k} has {} rows but {} biases", layer.rows, layer.b.len()));
            }
            if layer.w.iter().chain(&layer.b).any(|x| !x.is_finite()) {
                return Err(PinnError::Parse(format!("layer {k} has non-finite values")));
            }
            expected_cols = layer.rows;
        }
        if expected_cols != self.output_spec.len() {
            return shape(format!(
                "network produces {expected_cols} outputs but output_spec lists {}",
                self.output_spec.len()
            ));
        }
        for f in &self.input_spec {
            if !(f.lo < f.hi && f.lo.is_finite() && f.hi.is_finite()) {
                return Err(PinnError::Parse(format!(
                    "feature '{}' needs finite lo < hi, got [{}, {}]",
                    f.name, f.lo, f.hi
                )));
            }
        }
        for o in &self.output_spec {
            if !(o.offset.is_finite() && o.scale.is_finite()) {
                return Err(PinnError::Parse(format!("output '{}' has non-finite scaling", o.name)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = WeightsFile {
            format_version: FORMAT_VERSION,
            activation: self.activation.as_str().to_string(),
            input_spec: self.input_spec.clone(),
            output_spec: self.output_spec.clone(),
            layers: self.layers.clone(),
        };
        let mut out = Vec::new();
        let mut ser = serde_json::Serializer::with_formatter(&mut out, DecimalFormatter);
        file.serialize(&mut ser).expect("in-memory serialization");
        out.push(b'\n');
        String::from_utf8(out).expect("JSON is UTF-8")
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.input_spec.len(),
            hidden: self.layers[..self.layers.len() - 1].iter().map(|l| l.rows).collect(),
            output_dim: self.layers.last().map_or(0, |l| l.rows),
        }
    }

    /// Multiply-adds per forward evaluation.
    pub fn multiply_adds(&self) -> usize {
        self.layers.iter().map(|l| l.rows * l.cols).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.input_spec.len()
    }

    fn widest(&self) -> usize {
        self.layers.iter().map(|l| l.rows).max().unwrap_or(0).max(self.input_dim())
    }

    /// Evaluates the network on already-scaled inputs. The activation is
    /// applied after every layer, including the output layer.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>, PinnError> {
        if features.len() != self.input_dim() {
            return Err(PinnError::DimensionMismatch {
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        let width = self.widest();
        let mut a = vec![0.0; width];
        let mut b = vec![0.0; width];
        a[..features.len()].copy_from_slice(features);
        let out = self.forward_buffers(&mut a, &mut b);
        Ok(out.to_vec())
    }

    /// Ping-pong evaluation; `a` holds the input on entry. Returns the slice
    /// holding the output.
    #[inline]
    fn forward_buffers<'b>(&self, mut a: &'b mut [f64], mut b: &'b mut [f64]) -> &'b [f64] {
        for layer in &self.layers {
            let input = &a[..layer.cols];
            for (r, out) in b[..layer.rows].iter_mut().enumerate() {
                let row = &layer.w[r * layer.cols..(r + 1) * layer.cols];
                *out = self.activation.apply(layer.b[r] + dot(row, input));
            }
            std::mem::swap(&mut a, &mut b);
        }
        let n = self.layers.last().map_or(0, |l| l.rows);
        &a[..n]
    }

    /// Checks the raw features against their domains and scales them.
    pub fn scale_inputs(&self, raw: &[f64], scaled: &mut [f64]) -> Result<(), PinnError> {
        if raw.len() != self.input_dim() || scaled.len() < raw.len() {
            return Err(PinnError::DimensionMismatch {
                expected: self.input_dim(),
                got: raw.len(),
            });
        }
        for ((spec, &x), s) in self.input_spec.iter().zip(raw).zip(scaled.iter_mut()) {
            if !spec.contains(x) {
                return Err(PinnError::DomainViolation {
                    feature: spec.name.clone(),
                    value: x,
                    lo: spec.lo,
                    hi: spec.hi,
                });
            }
            *s = spec.scale(x);
        }
        Ok(())
    }

    /// Verifies the feature and output names match the PLL surrogate layout.
    pub fn check_pll_layout(&self) -> Result<(), PinnError> {
        let inputs: Vec<&str> = self.input_spec.iter().map(|f| f.name.as_str()).collect();
        let outputs: Vec<&str> = self.output_spec.iter().map(|o| o.name.as_str()).collect();
        if inputs != PLL_INPUTS {
            return Err(PinnError::FeatureMismatch(format!("inputs {inputs:?}, expected {PLL_INPUTS:?}")));
        }
        if outputs != PLL_OUTPUTS {
            return Err(PinnError::FeatureMismatch(format!("outputs {outputs:?}, expected {PLL_OUTPUTS:?}")));
        }
        Ok(())
    }
}

/// Raw (unscaled) feature vector for one PLL step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PinnFeatures {
    pub dt: f64,
    pub v_abc: Abc,
    pub sin_theta: f64,
    pub cos_theta: f64,
    pub omega_integ: f64,
}

impl PinnFeatures {
    pub fn new(s: &PllState, v_abc: Abc, dt: f64) -> Self {
        let (sin_theta, cos_theta) = s.theta.sin_cos();
        Self {
            dt,
            v_abc,
            sin_theta,
            cos_theta,
            omega_integ: s.omega_integ,
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [
            self.dt,
            self.v_abc[0],
            self.v_abc[1],
            self.v_abc[2],
            self.sin_theta,
            self.cos_theta,
            self.omega_integ,
        ]
    }
}

const STACK_WIDTH: usize = 256;

/// Dot product with four independent accumulators.
#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (wc, xc) = (w.chunks_exact(4), x.chunks_exact(4));
    let tail: f64 = wc.remainder().iter().zip(xc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in wc.zip(xc) {
        for k in 0..4 {
            acc[k] += a[k] * b[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Advances the PLL with the surrogate: `y = y_prev + dt * rate(features)`.
pub fn pll_step_pinn(p: &MlpParams, s: &PllState, v_abc_now: Abc, dt: f64) -> Result<PllState, PinnError> {
    if p.input_dim() != PLL_INPUTS.len() || p.output_spec.len() != PLL_OUTPUTS.len() {
        p.check_pll_layout()?;
    }
    let raw = PinnFeatures::new(s, v_abc_now, dt).to_array();
    let width = p.widest();
    let mut stack_a = [0.0; STACK_WIDTH];
    let mut stack_b = [0.0; STACK_WIDTH];
    let (mut heap_a, mut heap_b);
    let (a, b): (&mut [f64], &mut [f64]) = if width <= STACK_WIDTH {
        (&mut stack_a[..], &mut stack_b[..])
    } else {
        heap_a = vec![0.0; width];
        heap_b = vec![0.0; width];
        (&mut heap_a[..], &mut heap_b[..])
    };
    p.scale_inputs(&raw, a)?;
    if dt == 0.0 {
        return Ok(*s);
    }
    let out = p.forward_buffers(a, b);
    let theta_rate = p.output_spec[0].offset + p.output_spec[0].scale * out[0];
    let integ_rate = p.output_spec[1].offset + p.output_spec[1].scale * out[1];
    let theta = wrap_angle(s.theta + dt * theta_rate);
    Ok(PllState {
        theta,
        omega_integ: s.omega_integ + dt * integ_rate,
        omega: theta_rate,
        v_q: park(v_abc_now, theta)[1],
        t: s.t + dt,
    })
}


#[cfg(test)]
mod tests {
    use super::testing::random_pll_params;
    use super::*;
    use crate::control::{balanced, ControlParams};
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"format_version":1,"activation":"tanh",
        "input_spec":[{"name":"x","lo":-1,"hi":1}],
        "output_spec":[{"name":"y","offset":0,"scale":1}],
        "layers":[{"rows":1,"cols":1,"w":[0],"b":[0]}]}"#;

    #[test]
    fn loads_minimal_file() {
        let p = load_weights_str(MINIMAL).unwrap();
        let arch = p.arch();
        assert!(arch.hidden.is_empty());
        assert_eq!(arch.output_dim, 1);
        assert_eq!(p.forward(&[0.3]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_broken_chain() {
        let mut p = random_pll_params(1, &[64, 64], 0.1);
        p.layers[1] = Layer {
            rows: 64,
            cols: 32,
            w: vec![0.0; 64 * 32],
            b: vec![0.0; 64],
        };
        let err = load_weights_str(&p.to_json()).unwrap_err();
        assert!(matches!(err, PinnError::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn rejects_unknown_activation_and_garbage() {
        let text = MINIMAL.replace("tanh", "relu");
        assert_eq!(load_weights_str(&text).unwrap_err(), PinnError::UnknownActivation("relu".into()));
        assert!(matches!(load_weights_str(&MINIMAL[..40]), Err(PinnError::Parse(_))));
        let bad_domain = MINIMAL.replace(r#""lo":-1"#, r#""lo":1"#);
        assert!(matches!(load_weights_str(&bad_domain), Err(PinnError::Parse(_))));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let mut p = random_pll_params(2, &[8, 8], 1.0);
        for l in &mut p.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.0);
        }
        assert_eq!(p.forward(&[0.1; 7]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn nested_tanh_hand_value() {
        let text = r#"{"format_version":1,"activation":"tanh",
            "input_spec":[{"name":"x","lo":-1,"hi":1}],
            "output_spec":[{"name":"y","offset":0,"scale":1}],
            "layers":[{"rows":1,"cols":1,"w":[1],"b":[0]},{"rows":1,"cols":1,"w":[1],"b":[0]}]}"#;
        let p = load_weights_str(text).unwrap();
        let y = p.forward(&[0.5]).unwrap()[0];
        assert!((y - 0.5f64.tanh().tanh()).abs() < 1e-15);
        assert!((y - 0.431_808_180_595).abs() < 1e-11);
    }

    #[test]
    fn forward_dimension_mismatch() {
        let p = random_pll_params(3, &[4], 1.0);
        assert!(matches!(p.forward(&[0.0; 3]), Err(PinnError::DimensionMismatch { expected: 7, got: 3 })));
    }

    #[test]
    fn reference_shape_round_trips_exactly() {
        let p = random_pll_params(4, &[64, 64, 64], 0.3);
        assert_eq!(p.arch().to_string(), "3 hidden × 64");
        let text = p.to_json();
        let back = load_weights_str(&text).unwrap();
        for (a, b) in p.layers.iter().zip(&back.layers) {
            assert!(a.w.iter().zip(&b.w).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.b.iter().zip(&b.b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn flop_count_matches_arch() {
        let p = random_pll_params(5, &[64, 64, 64], 0.3);
        assert_eq!(p.multiply_adds(), 7 * 64 + 64 * 64 + 64 * 64 + 64 * 2);
    }

    #[test]
    fn dt_zero_is_identity() {
        let p = random_pll_params(6, &[16, 16], 2.0);
        let s = PllState {
            theta: 4.2,
            omega_integ: -3.0,
            omega: 320.0,
            v_q: 0.01,
            t: 0.7,
        };
        assert_eq!(pll_step_pinn(&p, &s, balanced(1.0, 0.3), 0.0).unwrap(), s);
    }

    #[test]
    fn over_voltage_is_a_domain_violation() {
        let p = random_pll_params(7, &[16], 1.0);
        let s = PllState::from_measurement(0.0, 0.0, balanced(1.0, 0.0), &ControlParams::default(), 0.0);
        match pll_step_pinn(&p, &s, balanced(1.2, 0.0), 1e-4) {
            Err(PinnError::DomainViolation { feature, value, .. }) => {
                assert_eq!(feature, "v_a");
                assert!((value - 1.2).abs() < 1e-15);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            pll_step_pinn(&p, &s, balanced(1.0, 0.0), 2e-4),
            Err(PinnError::DomainViolation { .. })
        ));
    }

    #[test]
    fn pll_layout_is_checked() {
        let p = load_weights_str(MINIMAL).unwrap();
        let s = PllState::from_measurement(0.0, 0.0, balanced(1.0, 0.0), &ControlParams::default(), 0.0);
        assert!(matches!(pll_step_pinn(&p, &s, balanced(1.0, 0.0), 1e-4), Err(PinnError::FeatureMismatch(_))));
    }

    proptest! {
        #[test]
        fn json_round_trip_is_bit_exact(seed in 0u64..1000, scale in 1e-3..10.0f64) {
            let p = random_pll_params(seed, &[5, 3], scale);
            let back = load_weights_str(&p.to_json()).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn domain_guard_is_total(x in -3.0..3.0f64) {
            let p = random_pll_params(9, &[4], 1.0);
            let spec = &p.input_spec[1];
            let mut raw = [0.0; 7];
            raw[0] = 5e-5;
            raw[1] = x;
            let mut scaled = [0.0; 7];
            let res = p.scale_inputs(&raw, &mut scaled);
            prop_assert_eq!(res.is_ok(), spec.contains(x));
        }
    }
}
