use ndarray::ArrayView2;

use super::{elu_grad, Network};
use crate::error::{Error, Result};
use crate::losses::{nlr_term, nlr_term_value, LossKind};
use crate::sigmodels::Protocol;

/// Batch loss and its gradient with respect to every network parameter, in
/// the same flat layout as [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Reusable buffers for per-voxel forward/backward passes.
pub(crate) struct Workspace {
    pre: Vec<Vec<f64>>,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
    dtheta: Vec<f64>,
    model_grad: Vec<f64>,
    nz: usize,
}

impl Workspace {
    pub(crate) fn new(net: &Network, protocol: &Protocol) -> Self {
        let (pre, acts) = net.scratch();
        let widest = *net.layer_sizes().iter().max().expect("non-empty");
        let p = net.output_width();
        Workspace {
            pre,
            acts,
            delta: vec![0.0; widest],
            delta_prev: vec![0.0; widest],
            dtheta: vec![0.0; p],
            model_grad: vec![0.0; p],
            nz: protocol.len(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LossSpec {
    pub kind: LossKind,
    pub inv_s2: f64,
}

impl LossSpec {
    pub(crate) fn new(kind: LossKind, sigma: f64) -> Result<Self> {
        if kind == LossKind::Nlr && !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "NLR loss needs a positive sigma, got {sigma}"
            )));
        }
        Ok(LossSpec {
            kind,
            inv_s2: 1.0 / (sigma * sigma),
        })
    }
}

/// Loss of one voxel (before batch averaging) from its parameter estimate.
#[inline]
fn voxel_loss(protocol: &Protocol, theta: &[f64], m: &[f64], loss: LossSpec) -> f64 {
    let kind = protocol.model_kind();
    let mut total = 0.0;
    for (&mi, &b) in m.iter().zip(protocol.b_values()) {
        let a = kind.signal(theta, b);
        total += match loss.kind {
            LossKind::Mse => (mi - a) * (mi - a),
            LossKind::Nlr => nlr_term_value(mi, a, loss.inv_s2),
        };
    }
    match loss.kind {
        LossKind::Mse => total / m.len() as f64,
        LossKind::Nlr => total,
    }
}

/// Forward and backward pass for one voxel. Adds `scale * dL_voxel/dparams`
/// into `grad` and returns the voxel's loss.
pub(crate) fn accumulate_voxel(
    net: &Network,
    protocol: &Protocol,
    m: &[f64],
    loss: LossSpec,
    scale: f64,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> f64 {
    let kind = protocol.model_kind();
    net.forward_cached(m, &mut ws.pre, &mut ws.acts);
    let theta = ws.acts.last().expect("output layer");
    let p = theta.len();

    let mut value = 0.0;
    ws.dtheta.iter_mut().for_each(|d| *d = 0.0);
    let mse_scale = 1.0 / ws.nz as f64;
    for (&mi, &b) in m.iter().zip(protocol.b_values()) {
        let a = kind.signal_and_grad(theta, b, &mut ws.model_grad);
        let dl = match loss.kind {
            LossKind::Mse => {
                let r = mi - a;
                value += r * r * mse_scale;
                -2.0 * r * mse_scale
            }
            LossKind::Nlr => {
                let (v, g) = nlr_term(mi, a, loss.inv_s2);
                value += v;
                g
            }
        };
        for (d, g) in ws.dtheta.iter_mut().zip(&ws.model_grad) {
            *d += dl * g;
        }
    }

    // Output layer is linear: its delta is dL/dtheta.
    let sizes = net.layer_sizes();
    ws.delta[..p].copy_from_slice(&ws.dtheta);
    let params = net.params();
    let mut off_end = params.len();
    for l in (0..net.n_layers()).rev() {
        let (ni, no) = (sizes[l], sizes[l + 1]);
        let off = off_end - (ni * no + no);
        let x = &ws.acts[l];
        {
            let (gw, gb) = grad[off..off_end].split_at_mut(ni * no);
            for k in 0..no {
                let dk = ws.delta[k] * scale;
                if dk == 0.0 {
                    continue;
                }
                gb[k] += dk;
                for (g, xi) in gw[k * ni..(k + 1) * ni].iter_mut().zip(x.iter()) {
                    *g += dk * xi;
                }
            }
        }
        if l > 0 {
            let w = &params[off..off + ni * no];
            let z = &ws.pre[l - 1];
            for i in 0..ni {
                let mut s = 0.0;
                for k in 0..no {
                    s += w[k * ni + i] * ws.delta[k];
                }
                ws.delta_prev[i] = s * elu_grad(z[i]);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
        off_end = off;
    }
    value
}

fn check_batch(net: &Network, batch: &ArrayView2<f64>, protocol: &Protocol) -> Result<()> {
    if batch.ncols() != net.input_width() || batch.ncols() != protocol.len() {
        return Err(Error::Shape(format!(
            "batch width {} vs network input {} and protocol length {}",
            batch.ncols(),
            net.input_width(),
            protocol.len()
        )));
    }
    if net.output_width() != protocol.model_kind().n_params() {
        return Err(Error::Shape(format!(
            "network emits {} values but the {} model takes {}",
            net.output_width(),
            protocol.model_kind(),
            protocol.model_kind().n_params()
        )));
    }
    if batch.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Gradient of the amortised batch loss through signal model and network.
/// The measurements are both the network input and the loss target.
pub fn backward(
    net: &Network,
    batch: ArrayView2<f64>,
    protocol: &Protocol,
    loss_kind: LossKind,
    sigma: f64,
) -> Result<BatchGradient> {
    check_batch(net, &batch, protocol)?;
    let loss = LossSpec::new(loss_kind, sigma)?;
    let mut ws = Workspace::new(net, protocol);
    let mut grad = vec![0.0; net.params().len()];
    let scale = 1.0 / batch.nrows() as f64;
    let mut total = 0.0;
    let mut row = vec![0.0; protocol.len()];
    for r in batch.rows() {
        row.iter_mut().zip(r).for_each(|(d, s)| *d = *s);
        total += accumulate_voxel(net, protocol, &row, loss, scale, &mut ws, &mut grad);
    }
    let loss = total * scale;
    check_finite(loss, &grad)?;
    Ok(BatchGradient { loss, grad })
}

pub(crate) fn check_finite(loss: f64, grad: &[f64]) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient(format!("batch loss is {loss}")));
    }
    if let Some((i, v)) = grad.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "gradient entry {i} is {v} (batch loss {loss})"
        )));
    }
    Ok(())
}

/// Amortised loss without gradients.
pub fn batch_loss_value(
    net: &Network,
    batch: ArrayView2<f64>,
    protocol: &Protocol,
    loss_kind: LossKind,
    sigma: f64,
) -> Result<f64> {
    check_batch(net, &batch, protocol)?;
    let loss = LossSpec::new(loss_kind, sigma)?;
    Ok(loss_over_rows(net, batch, protocol, loss))
}

pub(crate) fn loss_over_rows(net: &Network, batch: ArrayView2<f64>, protocol: &Protocol, loss: LossSpec) -> f64 {
    let (mut pre, mut acts) = net.scratch();
    let mut row = vec![0.0; protocol.len()];
    let mut total = 0.0;
    for r in batch.rows() {
        row.iter_mut().zip(r).for_each(|(d, s)| *d = *s);
        net.forward_cached(&row, &mut pre, &mut acts);
        total += voxel_loss(protocol, acts.last().expect("output"), &row, loss);
    }
    total / batch.nrows() as f64
}
