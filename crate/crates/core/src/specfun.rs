//! Special functions behind the Rician distribution.
//!
//! Everything is built on the exponentially scaled modified Bessel functions
//! `i0e(x) = exp(-x) I0(x)` and `i1e(x) = exp(-x) I1(x)`, evaluated from
//! two-branch Chebyshev expansions. Working in scaled form means `log I0(x)`
//! is computed as `ln(i0e(x)) + x`, which never overflows for finite `x`.
//!
//! [`log_i0_hankel`] and [`log_i0_series_lse`] are alternative log-Bessel
//! schemes kept for accuracy comparisons only.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Chebyshev expansion over `[0, split]` and `(split, inf)`.
///
/// The low branch maps `x` to `x/2 - 2`, the high branch to `32/x - 2` and
/// divides by `sqrt(x)`. Both are summed with Clenshaw's recurrence.
#[derive(Debug, Clone, Copy)]
pub struct ChebyshevApproximation {
    pub low_coefficients: &'static [f64],
    pub high_coefficients: &'static [f64],
    pub split_point: f64,
}

impl ChebyshevApproximation {
    #[inline]
    pub fn low_branch(&self, x: f64) -> f64 {
        clenshaw(x.mul_add(0.5, -2.0), self.low_coefficients)
    }

    #[inline]
    pub fn high_branch(&self, x: f64) -> f64 {
        clenshaw(32.0 / x - 2.0, self.high_coefficients) / x.sqrt()
    }
}

// Coefficient tables from the Cephes Math Library (netlib.org/cephes, i0.c
// and i1.c, S. L. Moshier). Ordered highest degree first, as chbevl expects.

/// exp(-x) I0(x) on [0, 8].
const I0E_LOW: [f64; 30] = [
    -4.415_341_646_479_339_5E-18,
    3.330_794_518_822_238_4E-17,
    -2.431_279_846_547_955E-16,
    1.715_391_285_555_133E-15,
    -1.168_533_287_799_345_1E-14,
    7.676_185_498_604_936E-14,
    -4.856_446_783_111_929E-13,
    2.955_052_663_129_64E-12,
    -1.726_826_291_441_556E-11,
    9.675_809_035_373_237E-11,
    -5.189_795_601_635_263E-10,
    2.659_823_724_682_386_6E-9,
    -1.300_025_009_986_248E-8,
    6.046_995_022_541_919E-8,
    -2.670_793_853_940_612E-7,
    1.117_387_539_120_103_7E-6,
    -4.416_738_358_458_750_5E-6,
    1.644_844_807_072_889_6E-5,
    -5.754_195_010_082_104E-5,
    1.885_028_850_958_416_5E-4,
    -5.763_755_745_385_824E-4,
    1.639_475_616_941_335_7E-3,
    -4.324_309_995_050_576E-3,
    1.054_646_039_459_499_8E-2,
    -2.373_741_480_589_947E-2,
    4.930_528_423_967_071E-2,
    -9.490_109_704_804_764E-2,
    1.716_209_015_222_087_7E-1,
    -3.046_826_723_431_984E-1,
    6.767_952_744_094_761E-1,
];

/// exp(-x) sqrt(x) I0(x) on (8, inf), in the variable 32/x - 2.
const I0E_HIGH: [f64; 25] = [
    -7.233_180_487_874_754E-18,
    -4.830_504_485_944_182E-18,
    4.465_621_420_296_76E-17,
    3.461_222_867_697_461E-17,
    -2.827_623_980_516_583_6E-16,
    -3.425_485_619_677_219E-16,
    1.772_560_133_056_526_3E-15,
    3.811_680_669_352_622_4E-15,
    -9.554_846_698_828_307E-15,
    -4.150_569_347_287_222E-14,
    1.540_086_217_521_41E-14,
    3.852_778_382_742_142_6E-13,
    7.180_124_451_383_666E-13,
    -1.794_178_531_506_806_2E-12,
    -1.321_581_184_044_771_3E-11,
    -3.149_916_527_963_241_6E-11,
    1.188_914_710_784_643_9E-11,
    4.940_602_388_224_97E-10,
    3.396_232_025_708_386_5E-9,
    2.266_668_990_498_178E-8,
    2.048_918_589_469_063_8E-7,
    2.891_370_520_834_756_7E-6,
    6.889_758_346_916_825E-5,
    3.369_116_478_255_694_3E-3,
    8.044_904_110_141_088E-1,
];

/// exp(-x) I1(x) / x on [0, 8].
const I1E_LOW: [f64; 29] = [
    2.777_914_112_761_046_4E-18,
    -2.111_421_214_358_166E-17,
    1.553_631_957_736_200_5E-16,
    -1.105_596_947_735_386_2E-15,
    7.600_684_294_735_408E-15,
    -5.042_185_504_727_912E-14,
    3.223_793_365_945_575E-13,
    -1.983_974_397_764_943_6E-12,
    1.173_618_629_889_090_1E-11,
    -6.663_489_723_502_027E-11,
    3.625_590_281_552_117E-10,
    -1.887_249_751_722_829_4E-9,
    9.381_537_386_495_773E-9,
    -4.445_059_128_796_328E-8,
    2.003_294_753_552_135_3E-7,
    -8.568_720_264_695_455E-7,
    3.470_251_308_137_678_5E-6,
    -1.327_316_365_603_943_6E-5,
    4.781_565_107_550_054E-5,
    -1.617_608_158_258_967_4E-4,
    5.122_859_561_685_758E-4,
    -1.513_572_450_631_253_2E-3,
    4.156_422_944_312_888E-3,
    -1.056_408_489_462_619_7E-2,
    2.472_644_903_062_651_6E-2,
    -5.294_598_120_809_499E-2,
    1.026_436_586_898_471E-1,
    -1.764_165_183_578_340_6E-1,
    2.525_871_864_436_336_5E-1,
];

/// exp(-x) sqrt(x) I1(x) on (8, inf), in the variable 32/x - 2.
#[allow(clippy::excessive_precision)]
const I1E_HIGH: [f64; 25] = [
    7.51729631084210481353E-18,
    4.41434832307170791151E-18,
    -4.65030536848935832153E-17,
    -3.20952592199342395980E-17,
    2.96262899764595013876E-16,
    3.30820231092092828324E-16,
    -1.88035477551078244854E-15,
    -3.81440307243700780478E-15,
    1.04202769841288027642E-14,
    4.27244001671195135429E-14,
    -2.10154184277266431302E-14,
    -4.08355111109219731823E-13,
    -7.19855177624590851209E-13,
    2.03562854414708950722E-12,
    1.41258074366137813316E-11,
    3.25260358301548823856E-11,
    -1.89749581235054123450E-11,
    -5.58974346219658380687E-10,
    -3.83538038596423702205E-9,
    -2.63146884688951950684E-8,
    -2.51223623787020892529E-7,
    -3.88256480887769039346E-6,
    -1.10588938762623716291E-4,
    -9.76109749136146840777E-3,
    7.78576235018280120474E-1,
];

pub const I0E_CHEBYSHEV: ChebyshevApproximation = ChebyshevApproximation {
    low_coefficients: &I0E_LOW,
    high_coefficients: &I0E_HIGH,
    split_point: 8.0,
};

/// The low branch of this table approximates `i1e(x) / x`.
pub const I1E_CHEBYSHEV: ChebyshevApproximation = ChebyshevApproximation {
    low_coefficients: &I1E_LOW,
    high_coefficients: &I1E_HIGH,
    split_point: 8.0,
};

/// Clenshaw recurrence for a Chebyshev series in cephes `chbevl` layout.
#[inline]
fn clenshaw(x: f64, coeffs: &[f64]) -> f64 {
    let mut b0 = coeffs[0];
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &c in &coeffs[1..] {
        b2 = b1;
        b1 = b0;
        b0 = x.mul_add(b1, c) - b2;
    }
    0.5 * (b0 - b2)
}

fn check_non_negative(func: &'static str, x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::domain(func, format!("expected x >= 0, got {x}")));
    }
    Ok(())
}

// Unchecked kernels: callers guarantee x >= 0.

#[inline]
pub(crate) fn i0e_unchecked(x: f64) -> f64 {
    if x <= I0E_CHEBYSHEV.split_point {
        I0E_CHEBYSHEV.low_branch(x)
    } else {
        I0E_CHEBYSHEV.high_branch(x)
    }
}

#[inline]
pub(crate) fn i1e_unchecked(x: f64) -> f64 {
    if x <= I1E_CHEBYSHEV.split_point {
        I1E_CHEBYSHEV.low_branch(x) * x
    } else {
        I1E_CHEBYSHEV.high_branch(x)
    }
}

#[inline]
pub(crate) fn log_i0e_unchecked(x: f64) -> f64 {
    i0e_unchecked(x).ln()
}

/// Exponentially scaled modified Bessel function of order zero, `exp(-x) I0(x)`.
pub fn i0e(x: f64) -> Result<f64> {
    check_non_negative("i0e", x)?;
    Ok(i0e_unchecked(x))
}

/// Exponentially scaled modified Bessel function of order one, `exp(-x) I1(x)`.
pub fn i1e(x: f64) -> Result<f64> {
    check_non_negative("i1e", x)?;
    Ok(i1e_unchecked(x))
}

/// `ln I0(x)` computed as `ln(i0e(x)) + x`.
pub fn log_i0(x: f64) -> Result<f64> {
    check_non_negative("log_i0", x)?;
    Ok(log_i0e_unchecked(x) + x)
}

/// Half-order Laguerre function `L_{1/2}(x)` for `x <= 0`.
///
/// Uses `L_{1/2}(x) = exp(x/2) [(1 - x) I0(-x/2) - x I1(-x/2)]`. With
/// `y = -x/2` the exponential prefactor is exactly the scaling of `i0e(y)`
/// and `i1e(y)`, so it cancels before any evaluation happens.
pub fn laguerre_half(x: f64) -> Result<f64> {
    if x.is_nan() || x > 0.0 {
        return Err(Error::domain(
            "laguerre_half",
            format!("expected x <= 0, got {x}"),
        ));
    }
    let y = -0.5 * x;
    Ok((1.0 - x) * i0e_unchecked(y) - x * i1e_unchecked(y))
}

/// Mean of a Rician magnitude with underlying amplitude `a` and noise sd `sigma`.
pub fn expected_rician_magnitude(a: f64, sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::domain(
            "expected_rician_magnitude",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    if a.is_nan() || a < 0.0 {
        return Err(Error::domain(
            "expected_rician_magnitude",
            format!("amplitude must be non-negative, got {a}"),
        ));
    }
    let ratio = a / sigma;
    let lag = laguerre_half(-0.5 * ratio * ratio)?;
    Ok(sigma * (0.5 * PI).sqrt() * lag)
}

/// Natural log of the Rician density `p(m | a, sigma)`.
///
/// The `-(m^2 + a^2)/(2 sigma^2) + m a / sigma^2` part is folded into
/// `-(m - a)^2 / (2 sigma^2)` so nothing large is subtracted from anything large.
pub fn rician_logpdf(m: f64, a: f64, sigma: f64) -> Result<f64> {
    if m.is_nan() || m <= 0.0 {
        return Err(Error::domain(
            "rician_logpdf",
            format!("measurement must be positive, got {m}"),
        ));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::domain(
            "rician_logpdf",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    if a.is_nan() || a < 0.0 {
        return Err(Error::domain(
            "rician_logpdf",
            format!("amplitude must be non-negative, got {a}"),
        ));
    }
    let s2 = sigma * sigma;
    let z = m * a / s2;
    let d = m - a;
    Ok((m / s2).ln() - d * d / (2.0 * s2) + log_i0e_unchecked(z))
}

/// Three-term Hankel expansion of `ln I0(x)`. Undefined at zero.
pub fn log_i0_hankel(x: f64) -> Result<f64> {
    if x.is_nan() || x <= 0.0 {
        return Err(Error::domain(
            "log_i0_hankel",
            format!("asymptotic form needs x > 0, got {x}"),
        ));
    }
    let inv = 1.0 / x;
    Ok(x - 0.5 * (2.0 * PI * x).ln() + (1.0 + inv / 8.0 + 9.0 * inv * inv / 128.0).ln())
}

pub const DEFAULT_SERIES_TERMS: usize = 64;

/// Truncated power series `I0(x) = sum_k (x/2)^{2k} / (k!)^2`, summed in log
/// space with log-sum-exp over the first `n_terms` terms.
pub fn log_i0_series_lse(x: f64, n_terms: usize) -> Result<f64> {
    check_non_negative("log_i0_series_lse", x)?;
    if n_terms == 0 {
        return Err(Error::InvalidArgument(
            "log_i0_series_lse needs at least one term".into(),
        ));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let log_half = (0.5 * x).ln();
    let mut log_fact = 0.0;
    let mut logs = Vec::with_capacity(n_terms);
    for k in 0..n_terms {
        if k > 0 {
            log_fact += (k as f64).ln();
        }
        logs.push(2.0 * k as f64 * log_half - 2.0 * log_fact);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Slow, high-accuracy `ln I0(x)` that shares no code with the Chebyshev
/// path: the convergent power series below 25, the full Hankel asymptotic
/// series (truncated at its smallest term) above.
pub fn log_i0_reference(x: f64) -> Result<f64> {
    check_non_negative("log_i0_reference", x)?;
    if x < 25.0 {
        // Positive terms; compensated summation keeps the relative error at
        // a few ulps.
        let q = 0.25 * x * x;
        let (mut sum, mut comp, mut term) = (1.0f64, 0.0f64, 1.0f64);
        let mut k = 1.0f64;
        loop {
            term *= q / (k * k);
            let t = sum + term;
            if sum.abs() >= term.abs() {
                comp += (sum - t) + term;
            } else {
                comp += (term - t) + sum;
            }
            sum = t;
            if term < 1e-20 * sum {
                break;
            }
            k += 1.0;
        }
        Ok((sum + comp).ln())
    } else {
        let mut sum = 1.0f64;
        let mut term = 1.0f64;
        let mut k = 1.0f64;
        loop {
            let next = term * (2.0 * k - 1.0) * (2.0 * k - 1.0) / (8.0 * x * k);
            if next.abs() >= term.abs() || next.abs() < 1e-20 {
                if next.abs() < term.abs() {
                    sum += next;
                }
                break;
            }
            sum += next;
            term = next;
            k += 1.0;
        }
        Ok(x - 0.5 * (2.0 * PI * x).ln() + sum.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn i0e_values() {
        assert_eq!(i0e(0.0).unwrap(), 1.0);
        assert!((i0e(1.0).unwrap() - 0.465_759_607_593_640_4).abs() < 1e-6);
        let big = 1e6;
        let asym = 1.0 / (2.0 * PI * big).sqrt() * (1.0 + 1.0 / (8.0 * big) + 9.0 / (128.0 * big * big));
        assert_relative_eq!(i0e(big).unwrap(), asym, max_relative = 1e-8);
        assert!(matches!(i0e(-1.0), Err(Error::Domain { .. })));
        assert!(i0e(f64::NAN).is_err());
    }

    #[test]
    fn i1e_values() {
        assert_eq!(i1e(0.0).unwrap(), 0.0);
        assert!((i1e(1.0).unwrap() - 0.207_910_415_349_708_45).abs() < 1e-6);
        let asym = 1.0 / (2.0 * PI * 100.0).sqrt() * (1.0 - 3.0 / 800.0);
        assert_relative_eq!(i1e(100.0).unwrap(), asym, max_relative = 1e-4);
        assert!(i1e(-0.1).is_err());
    }

    #[test]
    fn log_i0_values() {
        assert_eq!(log_i0(0.0).unwrap(), 0.0);
        assert!((log_i0(1.0).unwrap() - 0.235_914_358_507_178_65).abs() < 1e-6);
        // exp(700) overflows nothing, but I0(700) ~ 1e302 is at the edge and
        // i0(750) would be infinite in f64.
        let v = log_i0(700.0).unwrap();
        let hankel = 700.0 - 0.5 * (2.0 * PI * 700.0).ln() + (1.0f64 + 1.0 / 5600.0).ln();
        assert!((v - hankel).abs() < 0.01);
        assert!((v - 695.805_699_998_443_4).abs() < 1e-9);
        assert!(log_i0(750.0).unwrap().is_finite());
        assert!(log_i0(-2.0).is_err());
    }

    #[test]
    fn branches_agree_at_split() {
        // The i1e low branch carries a factor of x.
        for (table, x_factor) in [(I0E_CHEBYSHEV, 1.0), (I1E_CHEBYSHEV, 8.0)] {
            let lo = table.low_branch(8.0) * x_factor;
            let hi = table.high_branch(8.0);
            assert!(((lo - hi) / hi).abs() < 1e-12, "{lo} vs {hi}");
        }
    }

    #[test]
    fn laguerre_values() {
        assert_eq!(laguerre_half(0.0).unwrap(), 1.0);
        assert!((laguerre_half(-50.0).unwrap() - 8.018_841_116_883_91).abs() < 1e-9);
        assert!((laguerre_half(-0.5).unwrap() - 1.235_582_057_558_263).abs() < 1e-12);
        assert!(laguerre_half(0.1).is_err());
        // No overflow far out.
        assert!(laguerre_half(-1e12).unwrap().is_finite());
    }

    #[test]
    fn expected_magnitude_values() {
        let rayleigh = (0.5 * PI).sqrt();
        assert!((expected_rician_magnitude(0.0, 1.0).unwrap() - rayleigh).abs() < 1e-14);
        assert!((expected_rician_magnitude(10.0, 1.0).unwrap() - 10.050_126_936_677_42).abs() < 1e-9);
        assert!((expected_rician_magnitude(1.0, 1.0).unwrap() - 1.548_572_460_551_145_4).abs() < 1e-9);
        assert!(expected_rician_magnitude(1.0, 0.0).is_err());
        assert!(expected_rician_magnitude(1.0, -1.0).is_err());
    }

    #[test]
    fn logpdf_values() {
        assert!((rician_logpdf(1.0, 0.0, 1.0).unwrap() + 0.5).abs() < 1e-15);
        let v = rician_logpdf(100.0, 100.0, 1.0).unwrap();
        assert!((v + 0.918_926_032_579_607_6).abs() < 1e-3);
        assert!(rician_logpdf(0.0, 1.0, 1.0).is_err());
        assert!(rician_logpdf(1.0, 1.0, 0.0).is_err());
        assert!(rician_logpdf(1e6, 1e6, 1e-3).unwrap().is_finite());
    }

    #[test]
    fn comparison_schemes() {
        assert_eq!(log_i0_series_lse(0.0, DEFAULT_SERIES_TERMS).unwrap(), 0.0);
        assert!((log_i0_hankel(50.0).unwrap() - log_i0(50.0).unwrap()).abs() < 1e-6);
        assert!(log_i0_hankel(0.0).is_err());
        let dev = (log_i0_series_lse(200.0, 64).unwrap() - log_i0(200.0).unwrap()).abs();
        // 64 terms cover only the rising flank of the series at x = 200.
        assert!(dev > 1e-2);
        assert!((dev - 17.706_664_719_182_33).abs() < 1e-6);
    }

    #[test]
    fn reference_matches_mpmath_values() {
        // Values from a 40-digit mpmath evaluation.
        let cases = [
            (1.0, 0.235_914_358_507_178_65),
            (100.0, 96.779_732_689_942_58),
            (700.0, 695.805_699_998_443_4),
            (1e4, 9_994.475_903_781_432),
        ];
        for (x, want) in cases {
            assert_relative_eq!(log_i0_reference(x).unwrap(), want, max_relative = 1e-14);
        }
        // Both sides of the switch point.
        for x in [24.999, 25.0, 25.001] {
            assert_relative_eq!(log_i0_reference(x).unwrap(), log_i0(x).unwrap(), max_relative = 1e-13);
        }
    }
}
