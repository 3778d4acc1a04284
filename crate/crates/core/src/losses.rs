//! Batch training losses with exact gradients with respect to the predicted
//! signals.
//!
//! Both losses are amortised: the per-voxel term is averaged over the `N`
//! voxels of the batch. MSE additionally averages over the `Nz` measurements
//! of a voxel; the Rician negative log-likelihood sums them.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::specfun::{i0e_unchecked, i1e_unchecked, log_i0e_unchecked};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Nlr,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Mse => "mse",
            LossKind::Nlr => "nlr",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "nlr" => Ok(LossKind::Nlr),
            other => Err(Error::InvalidArgument(format!("unknown loss '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValueGrad {
    pub value: f64,
    pub grad_wrt_predictions: Array2<f64>,
}

/// `I1(x) / I0(x)` for `x >= 0`.
pub fn bessel_ratio(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain("bessel_ratio", format!("expected x >= 0, got {x}")));
    }
    Ok(bessel_ratio_unchecked(x))
}

#[inline]
pub(crate) fn bessel_ratio_unchecked(x: f64) -> f64 {
    i1e_unchecked(x) / i0e_unchecked(x)
}

/// Per-measurement negative Rician log-likelihood and its derivative with
/// respect to the prediction `a`.
///
/// With `z = m a / sigma^2` the term is
/// `-ln(m / sigma^2) + (m^2 + a^2) / (2 sigma^2) - ln(i0e(z)) - z`, i.e. the
/// textbook form after substituting `ln I0(z) = ln i0e(z) + |z|` for positive
/// `z`. `i0e` is even but the trailing `- z` is not, so a negative prediction
/// costs `2 m |a| / sigma^2` more than its mirror image.
#[inline]
pub(crate) fn nlr_term(m: f64, a: f64, inv_s2: f64) -> (f64, f64) {
    let z = m * a.abs() * inv_s2;
    let d = m - a;
    let value = -(m * inv_s2).ln() + 0.5 * d * d * inv_s2 - log_i0e_unchecked(z);
    let r = bessel_ratio_unchecked(z);
    let grad = (a - m + a.signum() * m * (1.0 - r)) * inv_s2;
    (value, grad)
}

/// Same as [`nlr_term`] without the gradient.
#[inline]
pub(crate) fn nlr_term_value(m: f64, a: f64, inv_s2: f64) -> f64 {
    let z = m * a.abs() * inv_s2;
    let d = m - a;
    -(m * inv_s2).ln() + 0.5 * d * d * inv_s2 - log_i0e_unchecked(z)
}

fn check_shapes(m: &ArrayView2<f64>, a: &ArrayView2<f64>) -> Result<()> {
    if m.dim() != a.dim() {
        return Err(Error::Shape(format!(
            "measurements {:?} vs predictions {:?}",
            m.dim(),
            a.dim()
        )));
    }
    if m.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

pub fn mse_loss(m: ArrayView2<f64>, a_hat: ArrayView2<f64>) -> Result<LossValueGrad> {
    check_shapes(&m, &a_hat)?;
    let (n, nz) = m.dim();
    let scale = 1.0 / (n * nz) as f64;
    let mut grad = Array2::zeros((n, nz));
    let mut value = 0.0;
    // Row by row so the reduction order is fixed.
    for ((mrow, arow), mut grow) in m.rows().into_iter().zip(a_hat.rows()).zip(grad.rows_mut()) {
        let mut voxel = 0.0;
        for ((&mi, &ai), gi) in mrow.iter().zip(arow).zip(grow.iter_mut()) {
            let r = mi - ai;
            voxel += r * r;
            *gi = -2.0 * r * scale;
        }
        value += voxel;
    }
    Ok(LossValueGrad {
        value: value * scale,
        grad_wrt_predictions: grad,
    })
}

pub fn nlr_loss(m: ArrayView2<f64>, a_hat: ArrayView2<f64>, sigma: f64) -> Result<LossValueGrad> {
    check_shapes(&m, &a_hat)?;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if m.iter().any(|v| v.is_nan()) || a_hat.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN in loss inputs".into()));
    }
    if let Some(bad) = m.iter().find(|&&v| v <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Rician likelihood needs positive measurements, found {bad}"
        )));
    }
    let n = m.nrows();
    let inv_s2 = 1.0 / (sigma * sigma);
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::zeros(m.dim());
    let mut value = 0.0;
    for ((mrow, arow), mut grow) in m.rows().into_iter().zip(a_hat.rows()).zip(grad.rows_mut()) {
        let mut voxel = 0.0;
        for ((&mi, &ai), gi) in mrow.iter().zip(arow).zip(grow.iter_mut()) {
            let (v, g) = nlr_term(mi, ai, inv_s2);
            voxel += v;
            *gi = g * inv_n;
        }
        value += voxel;
    }
    Ok(LossValueGrad {
        value: value * inv_n,
        grad_wrt_predictions: grad,
    })
}

/// Dispatches on `kind`; `sigma` is ignored for MSE.
pub fn batch_loss(
    kind: LossKind,
    m: ArrayView2<f64>,
    a_hat: ArrayView2<f64>,
    sigma: f64,
) -> Result<LossValueGrad> {
    match kind {
        LossKind::Mse => mse_loss(m, a_hat),
        LossKind::Nlr => nlr_loss(m, a_hat, sigma),
    }
}

/// Per-voxel NLR values, handy for checking amortisation.
pub fn nlr_per_voxel(m: ArrayView2<f64>, a_hat: ArrayView2<f64>, sigma: f64) -> Result<Vec<f64>> {
    check_shapes(&m, &a_hat)?;
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut out = vec![0.0; m.nrows()];
    Zip::from(m.rows()).and(a_hat.rows()).and(&mut out).for_each(|mr, ar, o| {
        *o = mr.iter().zip(ar).map(|(&mi, &ai)| nlr_term_value(mi, ai, inv_s2)).sum();
    });
    Ok(out)
}
