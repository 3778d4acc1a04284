//! Simulated Rician-noise datasets and background-based noise estimation.
//!
//! Random streams: voxel `j` of a dataset draws from a ChaCha8 generator
//! seeded with the dataset seed and switched to stream `j`. It draws its
//! ground-truth grid indices first, then one complex noise pair per b-value.
//! Generation is therefore identical for any thread count, and
//! [`sample_param_grid`] reproduces the truth of [`make_dataset`] for the
//! same seed.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::sigmodels::{ModelKind, Protocol};

/// Background sample count used for sigma estimation.
pub const DEFAULT_N_BACKGROUND: usize = 10_000;

/// Default split sizes: training, validation and test voxels.
pub const DEFAULT_N_TRAIN: usize = 200_000;
pub const DEFAULT_N_VAL: usize = 1_000;
pub const DEFAULT_N_TEST: usize = 200_000;

/// Reference b=0 amplitude that defines the SNR (`sigma = 1 / snr`).
pub const REFERENCE_AMPLITUDE: f64 = 1.0;

pub(crate) fn voxel_rng(seed: u64, voxel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(voxel);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelDataset {
    pub model_kind: ModelKind,
    pub protocol: Protocol,
    /// N x Nz magnitudes.
    pub signals: Array2<f64>,
    /// N x P ground truth.
    pub truth: Array2<f64>,
    pub snr: f64,
    pub sigma_true: f64,
    pub sigma_estimated: Option<f64>,
    pub seed: u64,
}

impl VoxelDataset {
    pub fn n_voxels(&self) -> usize {
        self.signals.nrows()
    }

    /// Simulates a background region at `sigma_true` and stores the
    /// resulting estimate.
    pub fn estimate_sigma_from_background(&mut self, n_bg: usize, seed: u64) -> Result<f64> {
        let bg = make_background(self.sigma_true, n_bg, seed)?;
        let s = estimate_sigma(&bg)?;
        self.sigma_estimated = Some(s);
        Ok(s)
    }

    /// Subset of voxels `[start, start + n)` as a new dataset.
    pub fn slice(&self, start: usize, n: usize) -> Result<VoxelDataset> {
        if start + n > self.n_voxels() {
            return Err(Error::InvalidArgument(format!(
                "slice {start}..{} out of {} voxels",
                start + n,
                self.n_voxels()
            )));
        }
        let rows = ndarray::s![start..start + n, ..];
        Ok(VoxelDataset {
            signals: self.signals.slice(rows).to_owned(),
            truth: self.truth.slice(rows).to_owned(),
            protocol: self.protocol.clone(),
            ..*self
        })
    }
}

fn draw_truth_row<R: Rng>(kind: ModelKind, grid: &[Vec<f64>], rng: &mut R, out: &mut [f64]) {
    debug_assert_eq!(out.len(), kind.n_params());
    for (o, values) in out.iter_mut().zip(grid) {
        *o = values[rng.random_range(0..values.len())];
    }
}

/// Ground-truth parameters drawn independently and uniformly from each
/// parameter's ten-point grid.
pub fn sample_param_grid(model_kind: ModelKind, n_voxels: usize, seed: u64) -> Result<Array2<f64>> {
    if n_voxels < 1 {
        return Err(Error::InvalidArgument("n_voxels must be at least 1".into()));
    }
    let grid = model_kind.param_grid().values;
    let p = model_kind.n_params();
    let mut truth = Array2::zeros((n_voxels, p));
    truth
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(p)
        .enumerate()
        .for_each(|(j, row)| {
            let mut rng = voxel_rng(seed, j as u64);
            draw_truth_row(model_kind, &grid, &mut rng, row);
        });
    Ok(truth)
}

#[inline]
fn rician_sample<R: Rng>(a: f64, sigma: f64, rng: &mut R) -> f64 {
    let nr: f64 = rng.sample(StandardNormal);
    let ni: f64 = rng.sample(StandardNormal);
    let re = a + sigma * nr;
    let im = sigma * ni;
    re.hypot(im)
}

/// Magnitude of `a + n_R + i n_I` with independent `N(0, sigma^2)` parts.
pub fn add_rician_noise<R: Rng>(a: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if sigma.is_nan() || sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise sd must be non-negative, got {sigma}"
        )));
    }
    if a.is_nan() || a < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "amplitude must be non-negative, got {a}"
        )));
    }
    if sigma == 0.0 {
        return Ok(a);
    }
    Ok(rician_sample(a, sigma, rng))
}

pub fn make_dataset(
    model_kind: ModelKind,
    snr: f64,
    n_voxels: usize,
    protocol: &Protocol,
    seed: u64,
) -> Result<VoxelDataset> {
    if !(snr.is_finite() && snr > 0.0) {
        return Err(Error::InvalidArgument(format!("snr must be positive, got {snr}")));
    }
    if protocol.model_kind() != model_kind {
        return Err(Error::InvalidArgument(format!(
            "{model_kind} dataset requested with a {} protocol",
            protocol.model_kind()
        )));
    }
    if n_voxels < 1 {
        return Err(Error::InvalidArgument("n_voxels must be at least 1".into()));
    }
    let sigma = REFERENCE_AMPLITUDE / snr;
    let grid = model_kind.param_grid().values;
    let (p, nz) = (model_kind.n_params(), protocol.len());
    let mut truth = Array2::zeros((n_voxels, p));
    let mut signals = Array2::zeros((n_voxels, nz));
    truth
        .as_slice_mut()
        .expect("standard layout")
        .par_chunks_mut(p)
        .zip(signals.as_slice_mut().expect("standard layout").par_chunks_mut(nz))
        .enumerate()
        .for_each(|(j, (theta, m))| {
            let mut rng = voxel_rng(seed, j as u64);
            draw_truth_row(model_kind, &grid, &mut rng, theta);
            for (mi, &b) in m.iter_mut().zip(protocol.b_values()) {
                let a = model_kind.signal(theta, b);
                *mi = rician_sample(a, sigma, &mut rng);
            }
        });
    Ok(VoxelDataset {
        model_kind,
        protocol: protocol.clone(),
        signals,
        truth,
        snr,
        sigma_true: sigma,
        sigma_estimated: None,
        seed,
    })
}

/// Noise sd from a signal-free region: `sum(M) / (N sqrt(pi/2))`.
pub fn estimate_sigma(background: &[f64]) -> Result<f64> {
    if background.is_empty() {
        return Err(Error::InvalidArgument("background sample is empty".into()));
    }
    if let Some(bad) = background.iter().find(|&&m| !(m > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "background magnitudes must be positive, found {bad}"
        )));
    }
    let sum: f64 = background.iter().sum();
    Ok(sum / (background.len() as f64 * (0.5 * PI).sqrt()))
}

/// Rayleigh-distributed magnitudes from a region with no signal.
pub fn make_background(sigma: f64, n_bg: usize, seed: u64) -> Result<Vec<f64>> {
    if n_bg < 1 {
        return Err(Error::InvalidArgument("n_bg must be at least 1".into()));
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_bg).map(|_| rician_sample(0.0, sigma, &mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::specfun::expected_rician_magnitude;

    #[test]
    fn noise_free_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(add_rician_noise(0.7, 0.0, &mut rng).unwrap(), 0.7);
        assert!(add_rician_noise(0.7, -0.1, &mut rng).is_err());
    }

    #[test]
    fn rayleigh_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mean: f64 = (0..n).map(|_| add_rician_noise(0.0, 1.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 1.2533).abs() < 0.003, "{mean}");
    }

    #[test]
    fn rician_mean_matches_expected_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| add_rician_noise(1.0, 0.2, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let want = expected_rician_magnitude(1.0, 0.2).unwrap();
        assert!((mean - want).abs() < 3.0 * sd / 1e3, "{mean} vs {want}");
    }

    #[test]
    fn grid_sampling_frequencies() {
        let n = 1_000_000;
        let truth = sample_param_grid(ModelKind::Adc, n, 3).unwrap();
        let grid = ModelKind::Adc.param_grid();
        let mut counts = [[0usize; 10]; 10];
        for row in truth.rows() {
            let a = grid.locate(0, row[0]).unwrap();
            let b = grid.locate(1, row[1]).unwrap();
            counts[a][b] += 1;
        }
        for c in counts.iter().flatten() {
            let freq = *c as f64 / n as f64;
            assert!((freq - 0.01).abs() < 0.001, "{freq}");
        }
        assert!(sample_param_grid(ModelKind::Adc, 0, 3).is_err());
    }

    #[test]
    fn dataset_basics() {
        let protocol = ModelKind::Adc.default_protocol();
        let a = make_dataset(ModelKind::Adc, 10.0, 500, &protocol, 42).unwrap();
        let b = make_dataset(ModelKind::Adc, 10.0, 500, &protocol, 42).unwrap();
        assert_eq!(a.sigma_true, 0.1);
        assert_eq!(a, b);
        assert!(a.signals.iter().all(|&m| m > 0.0));
        assert_eq!(a.truth, sample_param_grid(ModelKind::Adc, 500, 42).unwrap());
        let other = make_dataset(ModelKind::Adc, 10.0, 500, &protocol, 43).unwrap();
        assert_ne!(a.signals, other.signals);

        let ivim = ModelKind::Ivim.default_protocol();
        assert!(make_dataset(ModelKind::Adc, 10.0, 5, &ivim, 1).is_err());
        assert!(make_dataset(ModelKind::Adc, 0.0, 5, &protocol, 1).is_err());
    }

    #[test]
    fn b0_within_three_sigma_at_snr30() {
        let protocol = ModelKind::Adc.default_protocol();
        let ds = make_dataset(ModelKind::Adc, 30.0, 200_000, &protocol, 5).unwrap();
        let s = ds.sigma_true;
        let inside = ds
            .signals
            .column(0)
            .iter()
            .zip(ds.truth.column(0))
            .filter(|(m, s0)| (*m - *s0).abs() <= 3.0 * s)
            .count();
        let frac = inside as f64 / ds.n_voxels() as f64;
        assert!((frac - 0.997).abs() < 0.002, "{frac}");
    }

    #[test]
    fn sigma_estimator() {
        assert!(estimate_sigma(&[]).is_err());
        assert!(estimate_sigma(&[1.0, 0.0]).is_err());
        let c = 0.37;
        let est = estimate_sigma(&[c; 17]).unwrap();
        assert!((est - c / (0.5 * PI).sqrt()).abs() < 1e-15);

        let bg = make_background(0.1, DEFAULT_N_BACKGROUND, 9).unwrap();
        assert_eq!(bg.len(), 10_000);
        assert!(bg.iter().all(|&m| m > 0.0));
        assert!((estimate_sigma(&bg).unwrap() - 0.1).abs() < 0.002);
        let bg = make_background(0.2, DEFAULT_N_BACKGROUND, 10).unwrap();
        assert!((estimate_sigma(&bg).unwrap() - 0.2).abs() < 0.004);
        assert!(make_background(0.2, 0, 10).is_err());
    }
}
