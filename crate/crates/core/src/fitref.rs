//! Classical per-voxel estimators used as references for network output.
//!
//! Both estimators start from the best point of a coarse grid (20 values per
//! parameter over the simulation ranges) and refine it with projected
//! gradient descent, Barzilai-Borwein step lengths and Armijo backtracking.
//! Iterates live in coordinates scaled by each parameter's simulation range
//! and are projected onto the box `[0, 2 * upper]`.
//!
//! For IVIM the grid runs over `(f, Dp, Dt)` only. `S0` enters the signal
//! linearly, so at every grid node it is set to its least-squares optimum.

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{nlr_term, nlr_term_value};
use crate::sigmodels::{linspace, ModelKind, ModelParams, Protocol};

pub const FIT_GRID_POINTS: usize = 20;
pub const MAX_ITERATIONS: usize = 5_000;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimator {
    /// Maximum Rician likelihood with known noise level.
    Mle { sigma: f64 },
    /// Least squares: mean squared residual over the protocol.
    Lsq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: ModelParams,
    pub objective: f64,
    pub converged: bool,
    pub iterations: usize,
}

struct Problem<'a> {
    m: &'a [f64],
    protocol: &'a Protocol,
    kind: ModelKind,
    estimator: Estimator,
    inv_s2: f64,
    scale: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(m: &'a [f64], protocol: &'a Protocol, estimator: Estimator) -> Result<Self> {
        if m.len() != protocol.len() {
            return Err(Error::Shape(format!(
                "voxel has {} measurements, protocol {}",
                m.len(),
                protocol.len()
            )));
        }
        if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("measurements must be finite and non-negative".into()));
        }
        let inv_s2 = match estimator {
            Estimator::Mle { sigma } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
                }
                if m.contains(&0.0) {
                    return Err(Error::domain("mle_fit_voxel", "zero magnitude has no Rician log-density"));
                }
                1.0 / (sigma * sigma)
            }
            Estimator::Lsq => 0.0,
        };
        let kind = protocol.model_kind();
        let ranges = kind.param_ranges();
        Ok(Problem {
            m,
            protocol,
            kind,
            estimator,
            inv_s2,
            scale: ranges.iter().map(|(lo, hi)| hi - lo).collect(),
            upper: ranges.iter().map(|(_, hi)| 2.0 * hi).collect(),
        })
    }

    fn value(&self, theta: &[f64]) -> f64 {
        let mut total = 0.0;
        for (&mi, &b) in self.m.iter().zip(self.protocol.b_values()) {
            let a = self.kind.signal(theta, b);
            total += match self.estimator {
                Estimator::Mle { .. } => nlr_term_value(mi, a, self.inv_s2),
                Estimator::Lsq => (mi - a) * (mi - a),
            };
        }
        match self.estimator {
            Estimator::Mle { .. } => total,
            Estimator::Lsq => total / self.m.len() as f64,
        }
    }

    /// Objective and its gradient with respect to `theta`.
    fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let mut jac = [0.0; 4];
        let jac = &mut jac[..theta.len()];
        grad.iter_mut().for_each(|g| *g = 0.0);
        let n = self.m.len() as f64;
        let mut total = 0.0;
        for (&mi, &b) in self.m.iter().zip(self.protocol.b_values()) {
            let a = self.kind.signal_and_grad(theta, b, jac);
            let dl = match self.estimator {
                Estimator::Mle { .. } => {
                    let (v, g) = nlr_term(mi, a, self.inv_s2);
                    total += v;
                    g
                }
                Estimator::Lsq => {
                    total += (mi - a) * (mi - a) / n;
                    -2.0 * (mi - a) / n
                }
            };
            for (g, j) in grad.iter_mut().zip(jac.iter()) {
                *g += dl * j;
            }
        }
        total
    }

    fn project(&self, theta: &mut [f64]) {
        for (t, &hi) in theta.iter_mut().zip(&self.upper) {
            *t = t.clamp(0.0, hi);
        }
    }

    fn grid_start(&self) -> Vec<f64> {
        let ranges = self.kind.param_ranges();
        let axes: Vec<Vec<f64>> = ranges
            .iter()
            .map(|&(lo, hi)| linspace(lo, hi, FIT_GRID_POINTS))
            .collect();
        let mut best = (f64::INFINITY, Vec::new());
        match self.kind {
            ModelKind::Adc => {
                for &s0 in &axes[0] {
                    for &d in &axes[1] {
                        let theta = [s0, d];
                        let v = self.value(&theta);
                        if v < best.0 {
                            best = (v, theta.to_vec());
                        }
                    }
                }
            }
            ModelKind::Ivim => {
                let mut shape = vec![0.0; self.m.len()];
                for &f in &axes[1] {
                    for &dp in &axes[2] {
                        for &dt in &axes[3] {
                            let unit = [1.0, f, dp, dt];
                            self.protocol.predict_into(&unit, &mut shape);
                            let num: f64 = shape.iter().zip(self.m).map(|(g, m)| g * m).sum();
                            let den: f64 = shape.iter().map(|g| g * g).sum();
                            let s0 = (num / den).clamp(0.0, self.upper[0]);
                            let theta = [s0, f, dp, dt];
                            let v = self.value(&theta);
                            if v < best.0 {
                                best = (v, theta.to_vec());
                            }
                        }
                    }
                }
            }
        }
        best.1
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Projected gradient descent from `theta`; returns (params, iterations, converged).
fn refine(problem: &Problem, mut theta: Vec<f64>) -> (Vec<f64>, usize, bool) {
    let p = theta.len();
    let scale = &problem.scale;
    let mut grad = vec![0.0; p];
    let mut f = problem.value_grad(&theta, &mut grad);
    // Gradient in scaled coordinates.
    let mut gu: Vec<f64> = grad.iter().zip(scale).map(|(g, s)| g * s).collect();
    let mut alpha = 1.0 / inf_norm(&gu).max(1e-12);
    let mut trial = vec![0.0; p];
    let mut trial_grad = vec![0.0; p];

    for it in 0..MAX_ITERATIONS {
        // Projected-gradient stationarity with a unit step in scaled space.
        let mut pg: f64 = 0.0;
        for k in 0..p {
            let mut t = theta.clone();
            t[k] -= gu[k] * scale[k];
            problem.project(&mut t);
            pg = pg.max(((t[k] - theta[k]) / scale[k]).abs());
        }
        if pg <= 1e-10 * (1.0 + f.abs()) {
            return (theta, it, true);
        }

        let mut step = alpha;
        let accepted = loop {
            for k in 0..p {
                trial[k] = theta[k] - step * gu[k] * scale[k];
            }
            problem.project(&mut trial);
            let decrease: f64 = (0..p).map(|k| gu[k] * (trial[k] - theta[k]) / scale[k]).sum();
            let ft = problem.value_grad(&trial, &mut trial_grad);
            if ft.is_finite() && ft <= f + ARMIJO_C * decrease {
                break Some(ft);
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some(ft) = accepted else {
            // No descent along the projected gradient: stationary to round-off.
            return (theta, it, pg <= 1e-6 * (1.0 + f.abs()));
        };

        let mut sy = 0.0;
        let mut ss = 0.0;
        for k in 0..p {
            let s = (trial[k] - theta[k]) / scale[k];
            let y = trial_grad[k] * scale[k] - gu[k];
            sy += s * y;
            ss += s * s;
        }
        if ss == 0.0 {
            return (theta, it, true);
        }
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { step * 2.0 };
        let f_prev = f;
        theta.copy_from_slice(&trial);
        f = ft;
        for k in 0..p {
            gu[k] = trial_grad[k] * scale[k];
        }
        if (f_prev - f).abs() <= f64::EPSILON * f.abs().max(f64::MIN_POSITIVE) && ss < 1e-30 {
            return (theta, it + 1, true);
        }
    }
    (theta, MAX_ITERATIONS, false)
}

fn fit_voxel(m: &[f64], protocol: &Protocol, estimator: Estimator) -> Result<FitResult> {
    let problem = Problem::new(m, protocol, estimator)?;
    let start = problem.grid_start();
    let (theta, iterations, converged) = refine(&problem, start);
    Ok(FitResult {
        objective: problem.value(&theta),
        params: ModelParams::from_slice(problem.kind, &theta)?,
        converged,
        iterations,
    })
}

/// Maximum-likelihood fit of one voxel under Rician noise of level `sigma`.
/// The objective is the voxel's summed negative log Rician likelihood.
pub fn mle_fit_voxel(m: &[f64], protocol: &Protocol, sigma: f64) -> Result<FitResult> {
    fit_voxel(m, protocol, Estimator::Mle { sigma })
}

/// Least-squares fit of one voxel. The objective is the mean squared residual.
pub fn lsq_fit_voxel(m: &[f64], protocol: &Protocol) -> Result<FitResult> {
    fit_voxel(m, protocol, Estimator::Lsq)
}

/// Objective of `estimator` at arbitrary parameters.
pub fn fit_objective(m: &[f64], protocol: &Protocol, estimator: Estimator, params: &[f64]) -> Result<f64> {
    let problem = Problem::new(m, protocol, estimator)?;
    if params.len() != problem.kind.n_params() {
        return Err(Error::Shape(format!("expected {} parameters", problem.kind.n_params())));
    }
    Ok(problem.value(params))
}

/// Fits every row of `signals` in parallel. Output order matches input order.
pub fn fit_dataset(signals: ArrayView2<f64>, protocol: &Protocol, estimator: Estimator) -> Result<Vec<FitResult>> {
    let rows: Vec<Vec<f64>> = signals.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter().map(|m| fit_voxel(m, protocol, estimator)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::make_dataset;

    fn noise_free(kind: ModelKind, theta: &[f64]) -> (Protocol, Vec<f64>) {
        let protocol = kind.default_protocol();
        let mut m = vec![0.0; protocol.len()];
        protocol.predict_into(theta, &mut m);
        (protocol, m)
    }

    #[test]
    fn lsq_recovers_noise_free_adc() {
        let truth = [1.07, 1.33];
        let (protocol, m) = noise_free(ModelKind::Adc, &truth);
        let fit = lsq_fit_voxel(&m, &protocol).unwrap();
        let got = fit.params.to_vec();
        assert!(fit.converged);
        for (g, t) in got.iter().zip(&truth) {
            assert!((g - t).abs() < 1e-6 * t, "{got:?}");
        }
    }

    #[test]
    fn mle_recovers_noise_free_adc_with_small_sigma() {
        let truth = [0.93, 0.71];
        let (protocol, m) = noise_free(ModelKind::Adc, &truth);
        let fit = mle_fit_voxel(&m, &protocol, 1e-3).unwrap();
        for (g, t) in fit.params.to_vec().iter().zip(&truth) {
            assert!((g - t).abs() < 1e-4 * t);
        }
    }

    #[test]
    fn objective_matches_recomputed_loss() {
        let ds = make_dataset(ModelKind::Ivim, 10.0, 20, &ModelKind::Ivim.default_protocol(), 5).unwrap();
        for row in ds.signals.rows() {
            let m = row.to_vec();
            for est in [Estimator::Mle { sigma: 0.1 }, Estimator::Lsq] {
                let fit = fit_voxel(&m, &ds.protocol, est).unwrap();
                let again = fit_objective(&m, &ds.protocol, est, &fit.params.to_vec()).unwrap();
                assert!((fit.objective - again).abs() <= 1e-10 * again.abs().max(1.0));
            }
        }
    }

    #[test]
    fn repeated_b0_mle_matches_brute_force() {
        // With every measurement at b = 0 only S0 is identifiable and the fit
        // reduces to a one-dimensional Rician MLE.
        let protocol = Protocol::new(ModelKind::Adc, vec![0.0; 4]).unwrap();
        let m = [0.35, 0.2, 0.41, 0.27];
        let sigma = 0.15;
        let fit = mle_fit_voxel(&m, &protocol, sigma).unwrap();
        let obj = |s0: f64| fit_objective(&m, &protocol, Estimator::Mle { sigma }, &[s0, 1.0]).unwrap();
        let n = 200_000;
        let (lo, hi) = (0.0, 1.0);
        let h = (hi - lo) / n as f64;
        let best = (0..=n)
            .map(|i| lo + i as f64 * h)
            .min_by(|a, b| obj(*a).total_cmp(&obj(*b)))
            .unwrap();
        assert!((fit.params.to_vec()[0] - best).abs() <= 2.0 * h);
    }

    #[test]
    fn estimators_dominate_on_their_own_objective() {
        let sigma = 0.1;
        let ds = make_dataset(ModelKind::Adc, 10.0, 200, &ModelKind::Adc.default_protocol(), 9).unwrap();
        for (row, truth) in ds.signals.rows().into_iter().zip(ds.truth.rows()) {
            let m = row.to_vec();
            let mle = mle_fit_voxel(&m, &ds.protocol, sigma).unwrap();
            let lsq = lsq_fit_voxel(&m, &ds.protocol).unwrap();
            let nlr_at_lsq = fit_objective(&m, &ds.protocol, Estimator::Mle { sigma }, &lsq.params.to_vec()).unwrap();
            let mse_at_mle = fit_objective(&m, &ds.protocol, Estimator::Lsq, &mle.params.to_vec()).unwrap();
            let mse_at_truth = fit_objective(&m, &ds.protocol, Estimator::Lsq, &truth.to_vec()).unwrap();
            assert!(mle.objective <= nlr_at_lsq + 1e-9 * nlr_at_lsq.abs().max(1.0));
            assert!(lsq.objective <= mse_at_mle + 1e-12);
            assert!(lsq.objective <= mse_at_truth + 1e-12);
        }
    }

    #[test]
    fn ivim_fits_stay_in_bounds() {
        let ds = make_dataset(ModelKind::Ivim, 5.0, 50, &ModelKind::Ivim.default_protocol(), 2).unwrap();
        let fits = fit_dataset(ds.signals.view(), &ds.protocol, Estimator::Lsq).unwrap();
        for fit in fits {
            for (v, (_, hi)) in fit.params.to_vec().iter().zip(ModelKind::Ivim.param_ranges()) {
                assert!(*v >= 0.0 && *v <= 2.0 * hi);
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        let protocol = ModelKind::Adc.default_protocol();
        assert!(lsq_fit_voxel(&[1.0; 3], &protocol).is_err());
        assert!(mle_fit_voxel(&[1.0; 10], &protocol, 0.0).is_err());
        assert!(mle_fit_voxel(&[0.0; 10], &protocol, 0.1).is_err());
    }
}
