//! Modulo arithmetic, the ideal `(R, alpha)` modulo ADC and the tail bounds
//! used to pick rates.
//!
//! The converter maps `x` to `[floor(alpha * x)] mod 2^R`. With a subtractive
//! dither `U ~ Unif[0, 1)` added before the floor and removed after, the
//! channel is exactly `Y = [alpha * x + Z] mod 2^R` with `Z ~ Unif((-1, 0])`
//! independent of the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `x - delta * floor(x / delta)`, always in `[0, delta)`.
///
/// Unchecked: the caller guarantees `delta > 0` and a finite `x`.
#[inline]
pub fn wrap(x: f64, delta: f64) -> f64 {
    let r = x - delta * (x / delta).floor();
    // floor(x / delta) can round up for tiny negative x, leaving r == delta.
    if r >= delta {
        r - delta
    } else if r < 0.0 {
        r + delta
    } else {
        r
    }
}

/// Unchecked centered reduction into `[-delta / 2, delta / 2)`.
#[inline]
pub fn centered_wrap(y: f64, delta: f64) -> f64 {
    let half = 0.5 * delta;
    wrap(y + half, delta) - half
}

fn check_modulus(x: f64, delta: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(invalid(format!("modulo input must be finite, got {x}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(invalid(format!("modulo size must be positive, got {delta}")));
    }
    Ok(())
}

/// `[x] mod delta` in `[0, delta)`.
pub fn mod_reduce(x: f64, delta: f64) -> Result<f64> {
    check_modulus(x, delta)?;
    Ok(wrap(x, delta))
}

/// The representative of `y` modulo `delta` in `[-delta / 2, delta / 2)`.
pub fn centered_mod(y: f64, delta: f64) -> Result<f64> {
    check_modulus(y, delta)?;
    Ok(centered_wrap(y, delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Dither {
    None,
    #[default]
    Subtractive,
}

/// One modulo ADC channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModAdcParams {
    pub rate_bits: f64,
    pub alpha: f64,
    #[serde(default)]
    pub dither: Dither,
}

impl ModAdcParams {
    pub fn new(rate_bits: f64, alpha: f64, dither: Dither) -> Result<Self> {
        let p = Self {
            rate_bits,
            alpha,
            dither,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_bits >= 0.0 && self.rate_bits.is_finite()) {
            return Err(invalid(format!("rate must be >= 0, got {}", self.rate_bits)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// `2^R`, the number of quantizer cells in one fold.
    pub fn modulo_size(&self) -> f64 {
        self.rate_bits.exp2()
    }
}

/// A single converter output together with the dither that produced it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdcSample {
    pub code: f64,
    pub dither_used: f64,
}

impl AdcSample {
    /// `[code - U] mod 2^R`, i.e. `[alpha * x + Z] mod 2^R`.
    pub fn folded(&self, modulo_size: f64) -> f64 {
        wrap(self.code - self.dither_used, modulo_size)
    }
}

pub fn adc_sample<R: Rng + ?Sized>(x: f64, params: &ModAdcParams, rng: &mut R) -> Result<AdcSample> {
    if !x.is_finite() {
        return Err(invalid(format!("converter input must be finite, got {x}")));
    }
    params.validate()?;
    let u = match params.dither {
        Dither::None => 0.0,
        Dither::Subtractive => rng.random::<f64>(),
    };
    let code = wrap((params.alpha * x + u).floor(), params.modulo_size());
    Ok(AdcSample { code, dither_used: u })
}

/// Converter outputs for a whole path, after dither removal, with the unfolded
/// values `V = alpha * x + Z` kept as simulation truth.
#[derive(Debug, Clone, Default)]
pub struct EncodedPath {
    pub folded: Vec<f64>,
    pub unfolded: Vec<f64>,
}

/// Folded channel output and the unfolded truth for one sample at gain `alpha`.
#[inline]
pub(crate) fn encode_one<R: Rng + ?Sized>(x: f64, alpha: f64, delta: f64, dither: Dither, rng: &mut R) -> (f64, f64) {
    let u = match dither {
        Dither::None => 0.0,
        Dither::Subtractive => rng.random::<f64>(),
    };
    let level = (alpha * x + u).floor();
    let code = wrap(level, delta);
    (wrap(code - u, delta), level - u)
}

pub fn encode_path<R: Rng + ?Sized>(xs: &[f64], params: &ModAdcParams, rng: &mut R) -> Result<EncodedPath> {
    params.validate()?;
    if let Some(bad) = xs.iter().find(|x| !x.is_finite()) {
        return Err(invalid(format!("converter input must be finite, got {bad}")));
    }
    let delta = params.modulo_size();
    let mut out = EncodedPath {
        folded: Vec::with_capacity(xs.len()),
        unfolded: Vec::with_capacity(xs.len()),
    };
    for &x in xs {
        let (y, v) = encode_one(x, params.alpha, delta, params.dither, rng);
        out.folded.push(y);
        out.unfolded.push(v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailBoundInput {
    pub sigma_eff_sq: f64,
    pub tau: f64,
}

/// One-sided Chernoff bound `exp(-tau^2 / (2 sigma_eff^2))` on a zero-mean
/// Gaussian + uniform mixture, clamped to 1. Non-positive thresholds give 1.
pub fn chernoff_tail(input: TailBoundInput) -> f64 {
    let TailBoundInput { sigma_eff_sq, tau } = input;
    if tau <= 0.0 {
        return 1.0;
    }
    if sigma_eff_sq <= 0.0 {
        return 0.0;
    }
    (-(tau * tau) / (2.0 * sigma_eff_sq)).exp().min(1.0)
}

/// Two-sided per-sample overload bound `2 exp(-(3/2) 2^(2 delta))` at backoff
/// `delta` bits, clamped to 1.
pub fn overload_bound(delta_bits: f64) -> f64 {
    (2.0 * (-1.5 * (2.0 * delta_bits).exp2()).exp()).min(1.0)
}

/// `R = 1/2 log2(12 sigma_p^2) + delta`.
pub fn rate_for_backoff(sigma_p_sq: f64, delta_bits: f64) -> Result<f64> {
    if !(sigma_p_sq > 0.0) {
        return Err(invalid(format!(
            "prediction error variance must be > 0, got {sigma_p_sq}"
        )));
    }
    Ok(0.5 * (12.0 * sigma_p_sq).log2() + delta_bits)
}

/// Backoff making the union bound over a block of `block_len` samples equal to
/// `target_block_error`: `1/2 log2(-(2/3) ln(eps / (2T)))`.
pub fn backoff_for_block(block_len: u64, target_block_error: f64) -> Result<f64> {
    if block_len == 0 {
        return Err(invalid("block length must be >= 1"));
    }
    if !(target_block_error > 0.0 && target_block_error < 1.0) {
        return Err(invalid(format!(
            "target block error must lie in (0, 1), got {target_block_error}"
        )));
    }
    let per_sample = target_block_error / (2.0 * block_len as f64);
    Ok(0.5 * (-(2.0 / 3.0) * per_sample.ln()).log2())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{trial_rng, StreamTag};
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mod_reduce_examples() {
        assert!(close(mod_reduce(7.3, 4.0).unwrap(), 3.3, 1e-12));
        assert!(close(mod_reduce(-0.5, 4.0).unwrap(), 3.5, 1e-12));
        let lhs = mod_reduce(mod_reduce(5.2, 4.0).unwrap() + 3.1, 4.0).unwrap();
        assert!(close(lhs, 0.3, 1e-12));
        assert!(close(mod_reduce(8.3, 4.0).unwrap(), 0.3, 1e-12));
    }

    #[test]
    fn mod_reduce_rejects_bad_arguments() {
        assert!(mod_reduce(f64::NAN, 4.0).is_err());
        assert!(mod_reduce(f64::INFINITY, 4.0).is_err());
        assert!(mod_reduce(1.0, 0.0).is_err());
        assert!(mod_reduce(1.0, -2.0).is_err());
        assert!(centered_mod(1.0, 0.0).is_err());
    }

    #[test]
    fn wrap_never_returns_the_modulus() {
        let r = wrap(-1e-17, 4.0);
        assert!((0.0..4.0).contains(&r));
    }

    #[test]
    fn centered_mod_examples() {
        assert!(close(centered_mod(3.5, 4.0).unwrap(), -0.5, 1e-12));
        assert!(close(centered_mod(1.2, 4.0).unwrap(), 1.2, 1e-12));
        assert_eq!(centered_mod(2.0, 4.0).unwrap(), -2.0);
    }

    #[test]
    fn adc_sample_examples() {
        let mut rng = trial_rng(0, 0, StreamTag::Dither);
        let p = ModAdcParams::new(2.0, 4.0, Dither::None).unwrap();
        assert_eq!(adc_sample(1.3, &p, &mut rng).unwrap().code, 1.0);
        assert_eq!(adc_sample(-0.1, &p, &mut rng).unwrap().code, 3.0);
    }

    #[test]
    fn dithered_round_trip_without_overload() {
        let mut rng = trial_rng(1, 0, StreamTag::Dither);
        let p = ModAdcParams::new(4.0, 3.0, Dither::Subtractive).unwrap();
        let delta = p.modulo_size();
        for i in 0..2000 {
            let x = -2.3 + 4.6 * (i as f64) / 2000.0;
            let s = adc_sample(x, &p, &mut rng).unwrap();
            let recovered = centered_mod(s.code - s.dither_used, delta).unwrap();
            let z = recovered - p.alpha * x;
            assert!(z > -1.0 - 1e-12 && z <= 1e-12, "z = {z}");
            let exact = (p.alpha * x + s.dither_used).floor() - s.dither_used;
            assert!(close(recovered, exact, 1e-12));
        }
    }

    /// Kolmogorov-Smirnov statistic against Unif((-1, 0]).
    fn ks_uniform_neg(mut z: Vec<f64>) -> f64 {
        z.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = z.len() as f64;
        z.iter()
            .enumerate()
            .map(|(i, &v)| {
                let cdf = (v + 1.0).clamp(0.0, 1.0);
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn subtractive_dither_error_is_uniform_for_fixed_inputs() {
        let p = ModAdcParams::new(3.0, 2.5, Dither::Subtractive).unwrap();
        let delta = p.modulo_size();
        let n = 100_000;
        // critical value at significance 1e-3: sqrt(ln(2 / 1e-3) / 2) / sqrt(n)
        let crit = ((2.0f64 / 1e-3).ln() / 2.0).sqrt() / (n as f64).sqrt();
        for (k, &x) in [0.0, 0.123, -0.77, 1.4].iter().enumerate() {
            let mut rng = trial_rng(9, k as u64, StreamTag::Dither);
            let z: Vec<f64> = (0..n)
                .map(|_| {
                    let s = adc_sample(x, &p, &mut rng).unwrap();
                    centered_mod(s.code - s.dither_used, delta).unwrap() - p.alpha * x
                })
                .collect();
            let d = ks_uniform_neg(z);
            assert!(d < crit, "x = {x}: KS distance {d} >= {crit}");
        }
    }

    #[test]
    fn undithered_error_statistics_are_reported() {
        // Not asserted uniform; only range and a sanity bound on the mean.
        let p = ModAdcParams::new(3.0, 7.3, Dither::None).unwrap();
        let mut rng = trial_rng(2, 0, StreamTag::Source);
        let z: Vec<f64> = (0..10_000)
            .map(|_| {
                let x: f64 = rng.random::<f64>() * 2.0 - 1.0;
                (p.alpha * x).floor() - p.alpha * x
            })
            .collect();
        assert!(z.iter().all(|&v| v > -1.0 && v <= 0.0));
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!((mean + 0.5).abs() < 0.05);
    }

    #[test]
    fn chernoff_examples() {
        let at_sigma = chernoff_tail(TailBoundInput {
            sigma_eff_sq: 2.0,
            tau: 2.0f64.sqrt(),
        });
        assert!(close(at_sigma, (-0.5f64).exp(), 1e-12));
        assert!(close(at_sigma, 0.60653, 1e-5));
        assert_eq!(
            chernoff_tail(TailBoundInput {
                sigma_eff_sq: 1.0,
                tau: 0.0
            }),
            1.0
        );
        assert_eq!(
            chernoff_tail(TailBoundInput {
                sigma_eff_sq: 0.0,
                tau: 0.5
            }),
            0.0
        );

        // delta = 2 with sigma_p^2 = 1/12 gives R = 2 and tau = 2^R / 2.
        let r = rate_for_backoff(1.0 / 12.0, 2.0).unwrap();
        let tau = 0.5 * r.exp2();
        let two_sided = 2.0
            * chernoff_tail(TailBoundInput {
                sigma_eff_sq: 1.0 / 12.0,
                tau,
            });
        assert!(close(two_sided, 2.0 * (-24.0f64).exp(), 1e-20));
        assert!(two_sided < 1e-10);
        assert!(close(overload_bound(2.0), two_sided, 1e-22));
    }

    #[test]
    fn chernoff_dominates_mixture_tails() {
        // Gaussian + two uniforms, unit-free; tail frequency must not exceed the
        // bound by more than 3 standard errors anywhere on the grid.
        let mut rng = trial_rng(3, 0, StreamTag::Noise);
        let normal = rand_distr::Normal::new(0.0, 0.7).unwrap();
        let n = 200_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let g: f64 = rand_distr::Distribution::sample(&normal, &mut rng);
                g + 1.3 * (rng.random::<f64>() - 0.5) + 0.4 * (rng.random::<f64>() - 0.5)
            })
            .collect();
        let var = 0.49 + 1.69 / 12.0 + 0.16 / 12.0;
        for k in 1..=12 {
            let tau = 0.25 * k as f64;
            let freq = samples.iter().filter(|&&s| s > tau).count() as f64 / n as f64;
            let se = (freq * (1.0 - freq) / n as f64).sqrt();
            let bound = chernoff_tail(TailBoundInput { sigma_eff_sq: var, tau });
            assert!(freq <= bound + 3.0 * se, "tau {tau}: {freq} > {bound}");
        }
    }

    #[test]
    fn rate_and_backoff_examples() {
        assert!(close(rate_for_backoff(1.0 / 12.0, 2.0).unwrap(), 2.0, 1e-12));
        assert!(close(rate_for_backoff(64.0 / 12.0, 1.6717).unwrap(), 4.6717, 1e-12));
        assert!(rate_for_backoff(0.0, 1.0).is_err());

        let d = backoff_for_block(1 << 11, 1e-3).unwrap();
        assert!(close(d, 1.6717, 5e-4), "delta = {d}");
        let inv = backoff_for_block(1, 2.0 * (-24.0f64).exp()).unwrap();
        assert!(close(inv, 2.0, 1e-9));
        assert!(backoff_for_block(1 << 12, 1e-3).unwrap() > d);
        assert!(backoff_for_block(10, 1.0).is_err());
        assert!(backoff_for_block(10, 0.0).is_err());
        assert!(backoff_for_block(0, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn distributive_law(x in -1e4f64..1e4, y in -1e4f64..1e4, delta in 0.1f64..64.0) {
            let lhs = wrap(wrap(x, delta) + y, delta);
            let rhs = wrap(x + y, delta);
            let diff = (lhs - rhs).abs();
            // both sides agree up to one round-off-sized fold ambiguity near 0 / delta
            let err = diff.min(delta - diff);
            prop_assert!(err <= 1e-9 * delta.max(x.abs() + y.abs()));
        }

        #[test]
        fn centered_mod_differs_by_multiple(y in -1e5f64..1e5, delta in 0.1f64..64.0) {
            let c = centered_mod(y, delta).unwrap();
            prop_assert!(c >= -delta / 2.0 && c < delta / 2.0);
            let k = (y - c) / delta;
            prop_assert!((k - k.round()).abs() <= 1e-9 * (1.0 + y.abs() / delta));
        }
    }
}
