//! Fully connected encoder mapping a voxel's measurements to model
//! parameters, trained self-supervised through the signal model.
//!
//! All weights and biases live in one flat vector. Layer `l` maps
//! `layer_sizes[l]` inputs to `layer_sizes[l + 1]` outputs and stores its
//! row-major `out x in` weight matrix followed by its `out` biases. Hidden
//! layers use ELU (alpha = 1); the output layer is the identity, so the
//! network can emit any real parameter values.

mod adam;
mod backprop;
mod checkpoint;
mod train;

pub use adam::{adam_step, AdamState};
pub use backprop::{backward, batch_loss_value, BatchGradient};
pub use checkpoint::Checkpoint;
pub use train::{select_common_init, train, CommonInit, EpochRecord, TrainConfig, TrainResult};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmodels::ModelKind;

/// Number of hidden layers in the parameter-estimation encoder.
pub const HIDDEN_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
}

#[inline]
pub(crate) fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub(crate) fn elu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Network {
    /// The qMRI encoder: `nz` inputs, three hidden layers of width `nz`,
    /// `n_params` linear outputs. Weights and biases are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with a ChaCha8 stream seeded by
    /// `seed`, layer by layer, weights before biases.
    pub fn for_model(nz: usize, n_params: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![nz; HIDDEN_LAYERS + 1];
        sizes.push(n_params);
        Self::random(sizes, seed)
    }

    pub fn random(layer_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in net.layer_sizes.clone().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer sizes {layer_sizes:?}"
            )));
        }
        let n = param_count(&layer_sizes);
        Ok(Network {
            layer_sizes,
            params: vec![0.0; n],
        })
    }

    pub fn from_parts(layer_sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(layer_sizes)?;
        if params.len() != net.params.len() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for a network with {}",
                params.len(),
                net.params.len()
            )));
        }
        Ok(Network { params, ..net })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.layer_sizes[..=layer])
    }

    /// Row-major `out x in` weights of layer `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let (i, o) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let off = self.layer_offset(layer);
        &self.params[off..off + i * o]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let off = self.layer_offset(layer);
        &mut self.params[off..off + i * o]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (i, o) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        &self.params[off..off + o]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let (i, o) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let off = self.layer_offset(layer) + i * o;
        &mut self.params[off..off + o]
    }

    /// Forward pass for one voxel, keeping pre-activations and layer outputs.
    /// `acts[0]` is the input; `pre[l]` feeds `acts[l + 1]`.
    pub(crate) fn forward_cached(&self, input: &[f64], pre: &mut [Vec<f64>], acts: &mut [Vec<f64>]) {
        acts[0].copy_from_slice(input);
        let last = self.n_layers() - 1;
        let mut off = 0;
        for l in 0..self.n_layers() {
            let (ni, no) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.params[off..off + ni * no];
            let b = &self.params[off + ni * no..off + ni * no + no];
            let (before, after) = acts.split_at_mut(l + 1);
            let x = &before[l];
            let z = &mut pre[l];
            for k in 0..no {
                let row = &w[k * ni..(k + 1) * ni];
                let mut s = b[k];
                for (wi, xi) in row.iter().zip(x.iter()) {
                    s += wi * xi;
                }
                z[k] = s;
            }
            let y = &mut after[0];
            if l == last {
                y.copy_from_slice(z);
            } else {
                for (yk, zk) in y.iter_mut().zip(z.iter()) {
                    *yk = elu(*zk);
                }
            }
            off += ni * no + no;
        }
    }

    pub(crate) fn scratch(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let pre = self.layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        let acts = self.layer_sizes.iter().map(|&n| vec![0.0; n]).collect();
        (pre, acts)
    }

    /// Parameter estimates for every row of `signals`.
    pub fn forward(&self, signals: ArrayView2<f64>) -> Result<Array2<f64>> {
        if signals.ncols() != self.input_width() {
            return Err(Error::Shape(format!(
                "network expects {} inputs per voxel, got {}",
                self.input_width(),
                signals.ncols()
            )));
        }
        let (mut pre, mut acts) = self.scratch();
        let mut out = Array2::zeros((signals.nrows(), self.output_width()));
        let mut buf = vec![0.0; self.input_width()];
        for (row, mut o) in signals.rows().into_iter().zip(out.rows_mut()) {
            buf.iter_mut().zip(row).for_each(|(b, v)| *b = *v);
            self.forward_cached(&buf, &mut pre, &mut acts);
            o.iter_mut()
                .zip(acts.last().expect("output layer"))
                .for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    /// [`Network::forward`] followed by [`ModelKind::canonicalize`] on each row.
    pub fn predict(&self, model_kind: ModelKind, signals: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.output_width() != model_kind.n_params() {
            return Err(Error::Shape(format!(
                "network has {} outputs, {model_kind} needs {}",
                self.output_width(),
                model_kind.n_params()
            )));
        }
        let mut out = self.forward(signals)?;
        for mut row in out.rows_mut() {
            model_kind.canonicalize(row.as_slice_mut().expect("row-major output"));
        }
        Ok(out)
    }
}

/// Mixes a base seed with an index into an independent-looking seed
/// (splitmix64 finaliser).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
