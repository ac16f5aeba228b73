//! Oversampled conversion: modulo ADC with a flat-design predictor followed
//! by a digital low-pass filter, and the first-order sigma-delta baseline.

use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::modcore::{backoff_for_block, Dither, ModAdcParams};
use crate::predict::{flat_spectrum_predictor, ideal_lpf_gain, LowPass, NoiseModel, DEFAULT_ROLLOFF};
use crate::signals::{flat_band_autocov, SamplePath};
use crate::temporal::{run_stream, Feedback, InitMethod, StreamConfig};

pub const DEFAULT_ORDER: usize = 64;
pub const DEFAULT_SMOOTHER_HALFWIDTH: usize = 22;
pub const DEFAULT_BLOCK_LEN: usize = 1 << 11;

/// Fraction discarded at each block end before scoring, to keep the
/// block-FFT filter's wrap-around out of the error statistics.
pub const EDGE_DISCARD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OversampledConfig {
    pub oversample_ratio: f64,
    pub sigma_sq: f64,
    pub rate_bits: f64,
    pub alpha: f64,
    #[serde(default = "default_order")]
    pub p: usize,
    #[serde(default = "default_halfwidth")]
    pub smoother_halfwidth: usize,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default)]
    pub init: InitMethod,
    #[serde(default)]
    pub dither: Dither,
}

fn default_order() -> usize {
    DEFAULT_ORDER
}

fn default_halfwidth() -> usize {
    DEFAULT_SMOOTHER_HALFWIDTH
}

fn default_block_len() -> usize {
    DEFAULT_BLOCK_LEN
}

/// `alpha^2` such that `1 + 12 alpha^2 L sigma^2 = 2^{2L(R - delta)}`.
fn alpha_for_rate(l: f64, sigma_sq: f64, rate_minus_delta: f64) -> Result<f64> {
    let snr = (2.0 * l * rate_minus_delta).exp2();
    if !(snr > 1.0) {
        return Err(invalid(format!(
            "rate must exceed the backoff, got R - delta = {rate_minus_delta}"
        )));
    }
    Ok(((snr - 1.0) / (12.0 * l * sigma_sq)).sqrt())
}

impl OversampledConfig {
    /// Operating point for rate `R` and backoff `delta`.
    pub fn from_rate(oversample_ratio: f64, sigma_sq: f64, rate_bits: f64, delta_bits: f64) -> Result<Self> {
        check_l_sigma(oversample_ratio, sigma_sq)?;
        let alpha = alpha_for_rate(oversample_ratio, sigma_sq, rate_bits - delta_bits)?;
        Ok(Self {
            oversample_ratio,
            sigma_sq,
            rate_bits,
            alpha,
            p: DEFAULT_ORDER,
            smoother_halfwidth: DEFAULT_SMOOTHER_HALFWIDTH,
            block_len: DEFAULT_BLOCK_LEN,
            init: InitMethod::Genie,
            dither: Dither::Subtractive,
        })
    }

    pub fn validate(&self) -> Result<()> {
        check_l_sigma(self.oversample_ratio, self.sigma_sq)?;
        self.params()?;
        if self.block_len <= self.p {
            return Err(invalid(format!(
                "block length {} must exceed the predictor order {}",
                self.block_len, self.p
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Result<ModAdcParams> {
        ModAdcParams::new(self.rate_bits, self.alpha, self.dither)
    }

    /// `1 + 12 alpha^2 L sigma^2`, the post-filter SNR of the ideal pipeline.
    pub fn theoretical_snr(&self) -> f64 {
        1.0 + 12.0 * self.alpha * self.alpha * self.oversample_ratio * self.sigma_sq
    }

    /// `delta` implied by `R = delta + (1/2L) log2(1 + 12 alpha^2 L sigma^2)`.
    pub fn implied_backoff(&self) -> f64 {
        self.rate_bits - 0.5 * self.theoretical_snr().log2() / self.oversample_ratio
    }
}

fn check_l_sigma(l: f64, sigma_sq: f64) -> Result<()> {
    if !(l >= 1.0 && l.is_finite()) {
        return Err(invalid(format!("oversampling ratio must be >= 1, got {l}")));
    }
    if !(sigma_sq > 0.0 && sigma_sq.is_finite()) {
        return Err(invalid(format!("variance must be > 0, got {sigma_sq}")));
    }
    Ok(())
}

/// Operating point reaching post-filter distortion `target_d` and block error
/// target `eps` over `block_len` samples.
///
/// `alpha` solves `target_d = sigma^2 / (1 + 12 alpha^2 L sigma^2)` in closed
/// form; `delta = backoff_for_block(T, eps)`.
pub fn design_operating_point(
    oversample_ratio: f64,
    sigma_sq: f64,
    target_d: f64,
    block_len: usize,
    eps: f64,
) -> Result<OversampledConfig> {
    check_l_sigma(oversample_ratio, sigma_sq)?;
    if !(target_d > 0.0 && target_d < sigma_sq) {
        return Err(invalid(format!(
            "target distortion must lie in (0, sigma^2), got {target_d}"
        )));
    }
    let delta = backoff_for_block(block_len as u64, eps)?;
    let alpha = ((sigma_sq / target_d - 1.0) / (12.0 * oversample_ratio * sigma_sq)).sqrt();
    let rate_bits = delta + 0.5 * (sigma_sq / target_d).log2() / oversample_ratio;
    Ok(OversampledConfig {
        oversample_ratio,
        sigma_sq,
        rate_bits,
        alpha,
        p: DEFAULT_ORDER,
        smoother_halfwidth: DEFAULT_SMOOTHER_HALFWIDTH,
        block_len,
        init: InitMethod::Genie,
        dither: Dither::Subtractive,
    })
}

/// Theoretical SNR in dB of the ideal pipeline at `R - delta`: `6.02 L (R - delta)`.
pub fn modadc_snr_db(oversample_ratio: f64, rate_minus_delta: f64) -> f64 {
    10.0 * (2.0 * oversample_ratio * rate_minus_delta).exp2().log10()
}

/// `(R, SNR dB)` along `R = delta + (1/2L) log2(SNR)` for the given rates.
pub fn theoretical_rd(oversample_ratio: f64, delta_bits: f64, rates: &[f64]) -> Vec<(f64, f64)> {
    rates
        .iter()
        .map(|&r| (r, modadc_snr_db(oversample_ratio, r - delta_bits)))
        .collect()
}

/// Scoring window `[lo, hi)` of a block of length `n`.
pub fn scored_range(n: usize) -> (usize, usize) {
    let cut = (n as f64 * EDGE_DISCARD).floor() as usize;
    (cut, n - cut)
}

fn windowed_mse(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = scored_range(a.len());
    let s: f64 = (lo..hi).map(|t| (a[t] - b[t]).powi(2)).sum();
    s / (hi - lo).max(1) as f64
}

#[derive(Debug, Clone)]
pub struct OversampledOutcome {
    pub x_lpf: Vec<f64>,
    pub init_error: bool,
    pub block_error: bool,
    pub wrong_samples: usize,
    /// After filtering, over the scored window; only for error-free blocks.
    pub conditional_mse: Option<f64>,
    /// `10 log10(sigma^2 / conditional_mse)`.
    pub snr_db: Option<f64>,
}

/// Encode, decode with the flat-design predictor and apply the Wiener low-pass.
pub fn run_oversampled<R: Rng + ?Sized>(
    path: &SamplePath,
    cfg: &OversampledConfig,
    rng: &mut R,
) -> Result<OversampledOutcome> {
    cfg.validate()?;
    let params = cfg.params()?;
    let noise = NoiseModel::WhiteUniform;
    let filter = flat_spectrum_predictor(cfg.oversample_ratio, cfg.alpha, cfg.sigma_sq, cfg.p, noise)?;
    let cx: Vec<f64> = (0..=cfg.p.max(1) + 1)
        .map(|r| flat_band_autocov(cfg.sigma_sq, cfg.oversample_ratio, r))
        .collect();
    let stream_cfg = StreamConfig {
        params,
        init: cfg.init.clone(),
        feedback: Feedback::Decision,
    };
    let x = path.stream(0);
    let out = run_stream(x, &cx, &filter, &stream_cfg, rng)?;
    let lpf = ideal_lpf_gain(cfg.oversample_ratio, cfg.alpha, cfg.sigma_sq)?;
    let x_lpf = lpf.apply(&out.x_hat);
    let failed = out.block_error || out.init_error;
    let conditional_mse = (!failed).then(|| windowed_mse(&x_lpf, x));
    Ok(OversampledOutcome {
        x_lpf,
        init_error: out.init_error,
        block_error: failed,
        wrong_samples: out.wrong_samples,
        conditional_mse,
        snr_db: conditional_mse.map(|m| 10.0 * (cfg.sigma_sq / m).log10()),
    })
}

/// First-order sigma-delta loop with feedback tap `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmaDeltaConfig {
    pub rate_bits: f64,
    pub shaping_tap: f64,
    pub oversample_ratio: f64,
    pub sigma_sq: f64,
    pub backoff_bits: f64,
}

/// `c* = L sin(pi/L) / pi`, minimizing the in-band power of `1 - c e^{-jw}`.
pub fn optimal_shaping_tap(oversample_ratio: f64) -> f64 {
    oversample_ratio * (PI / oversample_ratio).sin() / PI
}

/// `(1/2pi) int_{|w|<pi/L} |1 - c e^{-jw}|^2 dw = (1 + c^2)/L - 2c sin(pi/L)/pi`.
pub fn inband_noise_factor(oversample_ratio: f64, c: f64) -> f64 {
    (1.0 + c * c) / oversample_ratio - 2.0 * c * (PI / oversample_ratio).sin() / PI
}

impl SigmaDeltaConfig {
    pub fn optimal(oversample_ratio: f64, sigma_sq: f64, rate_bits: f64, backoff_bits: f64) -> Result<Self> {
        let cfg = Self {
            rate_bits,
            shaping_tap: optimal_shaping_tap(oversample_ratio),
            oversample_ratio,
            sigma_sq,
            backoff_bits,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_l_sigma(self.oversample_ratio, self.sigma_sq)?;
        if !(self.shaping_tap.abs() < 2.0) {
            return Err(invalid(format!(
                "shaping tap must satisfy |c| < 2, got {}",
                self.shaping_tap
            )));
        }
        let g = (2.0 * (self.rate_bits - self.backoff_bits)).exp2();
        if !(g > self.shaping_tap * self.shaping_tap) {
            return Err(invalid("rate too small for the loop to be stable at this backoff"));
        }
        Ok(())
    }

    /// Quantizer step `s` with `2^R s = 2^delta sqrt(12 Var(U))` and
    /// `Var(U) = sigma^2 + c^2 s^2 / 12`.
    pub fn step(&self) -> f64 {
        let g = (2.0 * (self.rate_bits - self.backoff_bits)).exp2();
        let c2 = self.shaping_tap * self.shaping_tap;
        (12.0 * self.sigma_sq / (g - c2)).sqrt()
    }

    /// `sigma_q^2 = s^2 / 12`.
    pub fn quantizer_noise(&self) -> f64 {
        self.step().powi(2) / 12.0
    }

    pub fn theoretical_inband_noise(&self) -> f64 {
        self.quantizer_noise() * inband_noise_factor(self.oversample_ratio, self.shaping_tap)
    }

    pub fn theoretical_snr_db(&self) -> f64 {
        10.0 * (self.sigma_sq / self.theoretical_inband_noise()).log10()
    }
}

/// ΣΔ SNR in dB at `R - delta` with the optimal tap.
pub fn sigma_delta_snr_db(oversample_ratio: f64, rate_minus_delta: f64) -> Result<f64> {
    Ok(SigmaDeltaConfig::optimal(oversample_ratio, 1.0, rate_minus_delta, 0.0)?.theoretical_snr_db())
}

#[derive(Debug, Clone)]
pub struct SigmaDeltaOutcome {
    pub x_lpf: Vec<f64>,
    /// Samples where the quantizer saturated.
    pub overloads: usize,
    pub block_error: bool,
    /// Power of the filtered reconstruction error `LPF(x_hat - x)` over the scored window.
    pub inband_noise: f64,
    pub conditional_mse: Option<f64>,
    pub snr_db: Option<f64>,
}

/// Simulate `U_n = X_n - c E_{n-1}`, `Q_n = U_n + E_n` with a subtractively
/// dithered `2^R`-level quantizer, then low-pass the output.
pub fn run_sigma_delta<R: Rng + ?Sized>(
    path: &SamplePath,
    cfg: &SigmaDeltaConfig,
    rng: &mut R,
) -> Result<SigmaDeltaOutcome> {
    cfg.validate()?;
    let x = path.stream(0);
    let s = cfg.step();
    let c = cfg.shaping_tap;
    let levels = cfg.rate_bits.exp2();
    let (lo, hi) = (-(levels / 2.0).floor(), (levels / 2.0).ceil() - 1.0);
    let mut e_prev = 0.0;
    let mut overloads = 0;
    let mut q = Vec::with_capacity(x.len());
    for &xn in x {
        let u = xn - c * e_prev;
        let d: f64 = rng.random();
        let mut idx = (u / s + d).floor();
        if idx < lo || idx > hi {
            overloads += 1;
            idx = idx.clamp(lo, hi);
        }
        let qn = s * (idx + 0.5 - d);
        e_prev = qn - u;
        q.push(qn);
    }
    // A brick wall on a finite block leaks signal far into the window, so the
    // reconstruction gets the rolled-off filter; the noise alone is measured
    // with the brick wall.
    let x_lpf = LowPass::unit(cfg.oversample_ratio, DEFAULT_ROLLOFF).apply(&q);
    let err: Vec<f64> = q.iter().zip(x).map(|(a, b)| a - b).collect();
    let filtered_err = LowPass::unit(cfg.oversample_ratio, 0.0).apply(&err);
    let zeros = vec![0.0; x.len()];
    let inband_noise = windowed_mse(&filtered_err, &zeros);
    let block_error = overloads > 0;
    let conditional_mse = (!block_error).then(|| windowed_mse(&x_lpf, x));
    Ok(SigmaDeltaOutcome {
        x_lpf,
        overloads,
        block_error,
        inband_noise,
        conditional_mse,
        snr_db: conditional_mse.map(|m| 10.0 * (cfg.sigma_sq / m).log10()),
    })
}

/// One row of the SNR-versus-rate comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SnrRow {
    pub rate_minus_delta: f64,
    pub snr_db_modadc_theory: f64,
    pub snr_db_modadc_sim: Option<f64>,
    pub snr_db_sigmadelta: Option<f64>,
    pub input_kind: String,
}

pub fn write_snr_rows<W: Write>(rows: &[SnrRow], mut out: W) -> Result<()> {
    writeln!(out, "# schema=1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "R_minus_delta",
        "snr_db_modadc_theory",
        "snr_db_modadc_sim",
        "snr_db_sigmadelta",
        "input_kind",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.rate_minus_delta.to_string(),
            r.snr_db_modadc_theory.to_string(),
            opt(r.snr_db_modadc_sim),
            opt(r.snr_db_sigmadelta),
            r.input_kind.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modcore::overload_bound;
    use crate::rng::{trial_rng, StreamTag};
    use crate::signals::{gen_gaussian, gen_sinusoid, ProcessModel};

    /// Oracle: golden-section search on a midpoint-rule integral.
    fn numeric_optimal_tap(l: f64) -> (f64, f64) {
        let f = |c: f64| {
            let n = 20_000;
            let edge = PI / l;
            let h = 2.0 * edge / n as f64;
            let s: f64 = (0..n)
                .map(|i| {
                    let w = -edge + (i as f64 + 0.5) * h;
                    (1.0 - c * w.cos()).powi(2) + (c * w.sin()).powi(2)
                })
                .sum();
            s * h / (2.0 * PI)
        };
        let (mut a, mut b) = (0.0, 1.5);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..100 {
            let c1 = b - g * (b - a);
            let c2 = a + g * (b - a);
            if f(c1) < f(c2) {
                b = c2;
            } else {
                a = c1;
            }
        }
        let c = 0.5 * (a + b);
        (c, f(c))
    }

    #[test]
    fn optimal_tap_matches_numeric_minimum() {
        for l in [2.0, 3.0, 4.0, 8.0] {
            let (c, v) = numeric_optimal_tap(l);
            assert!((c - optimal_shaping_tap(l)).abs() < 1e-6, "L={l}");
            assert!((v - inband_noise_factor(l, optimal_shaping_tap(l))).abs() < 1e-8);
        }
        let c3 = optimal_shaping_tap(3.0);
        assert!((c3 - 0.8270).abs() < 5e-5);
        assert!((inband_noise_factor(3.0, c3) - 0.1054).abs() < 5e-5);
        assert!((inband_noise_factor(3.0, 0.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn theoretical_slopes() {
        let pts = theoretical_rd(3.0, 1.6717, &[3.0, 4.0]);
        assert!((pts[1].1 - pts[0].1 - 18.0618).abs() < 1e-3);
        let pts = theoretical_rd(1.0, 0.0, &[1.0, 2.0]);
        assert!((pts[1].1 - pts[0].1 - 6.0206).abs() < 1e-3);
        // one more bit of backoff shifts the curve by one bit
        let a = theoretical_rd(3.0, 1.0, &[4.0])[0].1;
        let b = theoretical_rd(3.0, 2.0, &[5.0])[0].1;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn operating_point_closed_form_matches_fixed_point() {
        let (l, s2) = (3.0, 1.0);
        let target = 1e-4;
        let cfg = design_operating_point(l, s2, target, 2048, 1e-3).unwrap();
        assert!((s2 / cfg.theoretical_snr() - target).abs() < 1e-15);
        assert!((cfg.implied_backoff() - 1.6717).abs() < 5e-4);
        // oracle: iterate alpha <- sqrt((sigma^2/D - 1)/(12 L sigma^2)) from the naive 1/sqrt(12 D)
        let mut alpha = 1.0 / (12.0 * target).sqrt();
        let mut iters = 0;
        loop {
            let d = s2 / (1.0 + 12.0 * alpha * alpha * l * s2);
            let next = alpha * (d / target).sqrt();
            iters += 1;
            if (next - alpha).abs() < 1e-12 * alpha || iters > 50 {
                alpha = next;
                break;
            }
            alpha = next;
        }
        assert!(iters <= 5, "{iters}");
        assert!((alpha - cfg.alpha).abs() < 1e-9 * cfg.alpha);
        assert!(design_operating_point(l, s2, 2.0, 2048, 1e-3).is_err());
    }

    #[test]
    fn rate_slope_in_target_distortion() {
        let a = design_operating_point(3.0, 1.0, 1e-3, 2048, 1e-3).unwrap();
        let b = design_operating_point(3.0, 1.0, 1e-4, 2048, 1e-3).unwrap();
        // 10 dB of SNR costs log2(10) / (2L) bits
        assert!((b.rate_bits - a.rate_bits - 10f64.log2() / 6.0).abs() < 1e-12);
        assert!(overload_bound(2.0) < 7.7e-11);
    }

    #[test]
    fn from_rate_inverts_the_rate_formula() {
        let cfg = OversampledConfig::from_rate(3.0, 2.0, 4.0, 1.6717).unwrap();
        assert!((cfg.implied_backoff() - 1.6717).abs() < 1e-12);
        assert!(OversampledConfig::from_rate(3.0, 2.0, 1.0, 1.6717).is_err());
    }

    #[test]
    fn flat_gaussian_tracks_theory() {
        let cfg = OversampledConfig::from_rate(3.0, 1.0, 3.0, 1.6717).unwrap();
        let model = ProcessModel::FlatBand {
            variance: 1.0,
            oversample_ratio: 3.0,
        };
        let mut mses = Vec::new();
        for trial in 0..40 {
            let mut srng = trial_rng(20, trial, StreamTag::Source);
            let x = gen_gaussian(&model, cfg.block_len, &mut srng).unwrap();
            let mut rng = trial_rng(20, trial, StreamTag::Dither);
            let out = run_oversampled(&x, &cfg, &mut rng).unwrap();
            assert!(!out.block_error);
            mses.push(out.conditional_mse.unwrap());
        }
        let m = mses.iter().sum::<f64>() / mses.len() as f64;
        let got = 10.0 * (1.0 / m).log10();
        let want = 10.0 * cfg.theoretical_snr().log10();
        assert!((got - want).abs() < 1.0, "{got} vs {want}");
    }

    #[test]
    fn sinusoids_do_not_overload() {
        let cfg = OversampledConfig::from_rate(3.0, 1.0, 4.0, 1.6717).unwrap();
        for trial in 0..50 {
            let mut srng = trial_rng(21, trial, StreamTag::Source);
            let s = gen_sinusoid(1.0, 1.0 / 3.0, cfg.block_len, &mut srng).unwrap();
            let mut rng = trial_rng(21, trial, StreamTag::Dither);
            let out = run_oversampled(&s.path, &cfg, &mut rng).unwrap();
            assert!(!out.block_error, "trial {trial} omega {}", s.omega);
        }
    }

    #[test]
    fn sigma_delta_without_shaping_keeps_oversampling_gain() {
        let mut cfg = SigmaDeltaConfig::optimal(3.0, 1.0, 6.0, 1.6717).unwrap();
        cfg.shaping_tap = 0.0;
        let model = ProcessModel::FlatBand {
            variance: 1.0,
            oversample_ratio: 3.0,
        };
        let mut noise = 0.0;
        let trials = 40;
        for trial in 0..trials {
            let mut srng = trial_rng(22, trial, StreamTag::Source);
            let x = gen_gaussian(&model, 4096, &mut srng).unwrap();
            let mut rng = trial_rng(22, trial, StreamTag::Dither);
            let out = run_sigma_delta(&x, &cfg, &mut rng).unwrap();
            assert_eq!(out.overloads, 0);
            noise += out.inband_noise / trials as f64;
        }
        let want = cfg.quantizer_noise() / 3.0;
        assert!((10.0 * (noise / want).log10()).abs() < 0.2, "{noise} vs {want}");
    }

    #[test]
    fn modadc_beats_sigma_delta_above_one_bit() {
        for i in 0..=20 {
            let rho = 1.0 + 0.25 * i as f64;
            assert!(modadc_snr_db(3.0, rho) > sigma_delta_snr_db(3.0, rho).unwrap());
        }
        // and loses at very low rates, where oversampling gain dominates
        assert!(modadc_snr_db(3.0, 0.5) < sigma_delta_snr_db(3.0, 0.5).unwrap());
    }

    #[test]
    fn snr_rows_csv() {
        let rows = vec![SnrRow {
            rate_minus_delta: 1.0,
            snr_db_modadc_theory: 18.0,
            snr_db_modadc_sim: None,
            snr_db_sigmadelta: Some(15.0),
            input_kind: "gaussian".into(),
        }];
        let mut buf = Vec::new();
        write_snr_rows(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# schema=1\nR_minus_delta,snr_db_modadc_theory,snr_db_modadc_sim,snr_db_sigmadelta,input_kind\n1,18,,15,gaussian\n"
        );
    }
}
