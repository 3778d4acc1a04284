//! Forward diffusion signal models and their parameter Jacobians.
//!
//! Units: b-values in ms/um^2 and diffusivities in um^2/ms, so `b * D` is
//! dimensionless and every parameter sits near unit magnitude (apart from
//! the IVIM pseudo-diffusion coefficient).
//!
//! Parameter vectors are laid out as `[S0, D]` for ADC and
//! `[S0, f, Dp, Dt]` for IVIM. No clamping is applied here.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Adc,
    Ivim,
}

const ADC_NAMES: [&str; 2] = ["S0", "D"];
const IVIM_NAMES: [&str; 4] = ["S0", "f", "Dp", "Dt"];

const ADC_RANGES: [(f64, f64); 2] = [(0.8, 1.2), (0.4, 2.0)];
const IVIM_RANGES: [(f64, f64); 4] = [(0.8, 1.2), (0.1, 0.5), (10.0, 150.0), (0.4, 2.0)];

/// b-values (ms/um^2) of the IVIM acquisition: 0..800 s/mm^2.
pub const IVIM_B_VALUES: [f64; 10] = [0.0, 0.01, 0.02, 0.03, 0.05, 0.08, 0.1, 0.2, 0.4, 0.8];

/// Points per parameter in the simulation grid.
pub const GRID_POINTS: usize = 10;

impl ModelKind {
    pub fn n_params(self) -> usize {
        self.param_names().len()
    }

    /// Puts a parameter vector into the labelling used by the simulator.
    ///
    /// IVIM is symmetric under `(f, Dp, Dt) -> (1 - f, -Dp, Dt + Dp)`: both
    /// describe the same two compartments with the roles swapped. Estimates
    /// with `Dp < 0` are mapped across so that `f` always belongs to the
    /// faster compartment. The signal is unchanged. ADC has no such symmetry.
    pub fn canonicalize(self, params: &mut [f64]) {
        if self == ModelKind::Ivim && params[2] < 0.0 {
            let (f, dp, dt) = (params[1], params[2], params[3]);
            params[1] = 1.0 - f;
            params[2] = -dp;
            params[3] = dt + dp;
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::Adc => &ADC_NAMES,
            ModelKind::Ivim => &IVIM_NAMES,
        }
    }

    /// Physiologically plausible ranges used to simulate ground truth.
    pub fn param_ranges(self) -> &'static [(f64, f64)] {
        match self {
            ModelKind::Adc => &ADC_RANGES,
            ModelKind::Ivim => &IVIM_RANGES,
        }
    }

    pub fn param_index(self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }

    /// Index of the tissue diffusion coefficient (`D` or `Dt`).
    pub fn diffusivity_index(self) -> usize {
        match self {
            ModelKind::Adc => 1,
            ModelKind::Ivim => 3,
        }
    }

    /// Ten equidistant values per parameter, endpoints included.
    pub fn param_grid(self) -> ParamGrid {
        let values = self
            .param_ranges()
            .iter()
            .map(|&(lo, hi)| linspace(lo, hi, GRID_POINTS))
            .collect();
        ParamGrid {
            names: self.param_names().iter().map(|s| s.to_string()).collect(),
            values,
        }
    }

    pub fn default_protocol(self) -> Protocol {
        let b = match self {
            ModelKind::Adc => linspace(0.0, 1.0, 10),
            ModelKind::Ivim => IVIM_B_VALUES.to_vec(),
        };
        Protocol::new(self, b).expect("built-in protocol is valid")
    }

    /// Signal at a single b-value.
    #[inline]
    pub fn signal(self, params: &[f64], b: f64) -> f64 {
        match self {
            ModelKind::Adc => params[0] * (-b * params[1]).exp(),
            ModelKind::Ivim => {
                let (s0, f, dp, dt) = (params[0], params[1], params[2], params[3]);
                s0 * (f * (-b * (dp + dt)).exp() + (1.0 - f) * (-b * dt).exp())
            }
        }
    }

    /// Signal and its gradient with respect to the parameters at one b-value.
    #[inline]
    pub fn signal_and_grad(self, params: &[f64], b: f64, grad: &mut [f64]) -> f64 {
        match self {
            ModelKind::Adc => {
                let e = (-b * params[1]).exp();
                let s = params[0] * e;
                grad[0] = e;
                grad[1] = -b * s;
                s
            }
            ModelKind::Ivim => {
                let (s0, f, dp, dt) = (params[0], params[1], params[2], params[3]);
                let e1 = (-b * (dp + dt)).exp();
                let e2 = (-b * dt).exp();
                let mix = f * e1 + (1.0 - f) * e2;
                let s = s0 * mix;
                grad[0] = mix;
                grad[1] = s0 * (e1 - e2);
                grad[2] = -b * s0 * f * e1;
                grad[3] = -b * s;
                s
            }
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Adc => "adc",
            ModelKind::Ivim => "ivim",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adc" => Ok(ModelKind::Adc),
            "ivim" => Ok(ModelKind::Ivim),
            other => Err(Error::InvalidArgument(format!("unknown model '{other}'"))),
        }
    }
}

/// `n` equally spaced points on `[lo, hi]`; the last point is exactly `hi`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
            v[n - 1] = hi;
            v
        }
    }
}

/// The discrete set of values each parameter may take in simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl ParamGrid {
    /// Position of `value` on the grid of parameter `p`, allowing for
    /// round-off from serialisation.
    pub fn locate(&self, p: usize, value: f64) -> Option<usize> {
        self.values[p].iter().position(|&g| {
            let tol = 1e-9 * g.abs().max(1.0);
            (g - value).abs() <= tol
        })
    }
}

/// Ordered b-values of an acquisition together with the model they feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    model_kind: ModelKind,
    b_values: Vec<f64>,
}

impl Protocol {
    pub fn new(model_kind: ModelKind, b_values: Vec<f64>) -> Result<Self> {
        if b_values.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::InvalidArgument(
                "b-values must be finite and non-negative".into(),
            ));
        }
        if !b_values.contains(&0.0) {
            return Err(Error::InvalidArgument(
                "protocol needs at least one b = 0 measurement".into(),
            ));
        }
        if b_values.len() < model_kind.n_params() {
            return Err(Error::InvalidArgument(format!(
                "{} b-values cannot identify {} parameters",
                b_values.len(),
                model_kind.n_params()
            )));
        }
        Ok(Protocol {
            model_kind,
            b_values,
        })
    }

    pub fn model_kind(&self) -> ModelKind {
        self.model_kind
    }

    pub fn b_values(&self) -> &[f64] {
        &self.b_values
    }

    pub fn len(&self) -> usize {
        self.b_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b_values.is_empty()
    }

    /// Signals for one parameter vector at every b-value, written into `out`.
    pub fn predict_into(&self, params: &[f64], out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(&self.b_values) {
            *o = self.model_kind.signal(params, b);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcParams {
    pub s0: f64,
    pub d: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvimParams {
    pub s0: f64,
    pub f: f64,
    pub dp: f64,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelParams {
    Adc(AdcParams),
    Ivim(IvimParams),
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Adc(_) => ModelKind::Adc,
            ModelParams::Ivim(_) => ModelKind::Ivim,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            ModelParams::Adc(p) => vec![p.s0, p.d],
            ModelParams::Ivim(p) => vec![p.s0, p.f, p.dp, p.dt],
        }
    }

    pub fn from_slice(kind: ModelKind, v: &[f64]) -> Result<Self> {
        if v.len() != kind.n_params() {
            return Err(Error::Shape(format!(
                "{kind} takes {} parameters, got {}",
                kind.n_params(),
                v.len()
            )));
        }
        Ok(match kind {
            ModelKind::Adc => ModelParams::Adc(AdcParams { s0: v[0], d: v[1] }),
            ModelKind::Ivim => ModelParams::Ivim(IvimParams {
                s0: v[0],
                f: v[1],
                dp: v[2],
                dt: v[3],
            }),
        })
    }
}

/// `S0 exp(-b D)`
pub fn adc_signal(params: &AdcParams, b: f64) -> f64 {
    params.s0 * (-b * params.d).exp()
}

/// `S0 (f exp(-b (Dp + Dt)) + (1 - f) exp(-b Dt))`
pub fn ivim_signal(params: &IvimParams, b: f64) -> f64 {
    params.s0 * (params.f * (-b * (params.dp + params.dt)).exp() + (1.0 - params.f) * (-b * params.dt).exp())
}

/// Nz x P matrix of partial derivatives of each predicted signal.
pub fn signal_jacobian(params: &ModelParams, protocol: &Protocol) -> Result<Array2<f64>> {
    let kind = params.kind();
    if kind != protocol.model_kind() {
        return Err(Error::InvalidArgument(format!(
            "{kind} parameters used with a {} protocol",
            protocol.model_kind()
        )));
    }
    let theta = params.to_vec();
    let mut jac = Array2::zeros((protocol.len(), kind.n_params()));
    let mut g = vec![0.0; kind.n_params()];
    for (i, &b) in protocol.b_values().iter().enumerate() {
        kind.signal_and_grad(&theta, b, &mut g);
        jac.row_mut(i).iter_mut().zip(&g).for_each(|(j, v)| *j = *v);
    }
    Ok(jac)
}
