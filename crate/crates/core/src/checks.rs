//! The acceptance suite. Each criterion has a config under `configs/` and a
//! check that runs it (plus any oracle) and reports one pass/fail line.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::{run_experiment, sweep, ExperimentConfig, ExperimentResult, Summary};
use crate::iforce::{
    find_a_exhaustive, find_a_lll, if_gram, quad_form, rate_report, ClpDecoder, IfDecoder, IntegerMatrix,
};
use crate::modcore::{encode_one, overload_bound, Dither, ModAdcParams};
use crate::oversample::{inband_noise_factor, modadc_snr_db, optimal_shaping_tap, sigma_delta_snr_db};
use crate::predict::{flat_spectrum_predictor, quantized_autocov, solve_predictor, MatrixPredictorFilter, NoiseModel};
use crate::ringosc::{closed_form_output, simulate_states, AffineFrontend, FCurve, RingOscProfile};
use crate::rng::{trial_rng, StreamTag};
use crate::signals::{autocov_from_model, gen_gaussian, vector_autocov, ProcessModel};
use crate::spacetime::{
    innovation_cov, rate_point, run_vector_stream, slb_vector, LatticeSearch, SpaceTimeDesign, VectorInit, SLB_ORDER,
};
use crate::temporal::{run_stream, Feedback, InitMethod, StreamConfig, WRONG_FOLD_TOL};

/// Named configs, one per criterion.
pub const CONFIGS: [(&str, &str); 13] = [
    ("c01_backoff", include_str!("../../../configs/c01_backoff.toml")),
    (
        "c02_bounds_check",
        include_str!("../../../configs/c02_bounds_check.toml"),
    ),
    ("c03_slb_gap", include_str!("../../../configs/c03_slb_gap.toml")),
    ("c04_flat_design", include_str!("../../../configs/c04_flat_design.toml")),
    ("c05_oversampled", include_str!("../../../configs/c05_oversampled.toml")),
    (
        "c06_universality",
        include_str!("../../../configs/c06_universality.toml"),
    ),
    (
        "c07_sigma_delta_compare",
        include_str!("../../../configs/c07_sigma_delta_compare.toml"),
    ),
    ("c08_spatial", include_str!("../../../configs/c08_spatial.toml")),
    ("c09_clp", include_str!("../../../configs/c09_clp.toml")),
    (
        "c10_ring_equivalence",
        include_str!("../../../configs/c10_ring_equivalence.toml"),
    ),
    ("c11_ringosc", include_str!("../../../configs/c11_ringosc.toml")),
    ("c12_spacetime", include_str!("../../../configs/c12_spacetime.toml")),
    (
        "c13_single_stream",
        include_str!("../../../configs/c13_single_stream.toml"),
    ),
];

/// Criteria cheap enough for `selftest`.
pub const QUICK: [u8; 6] = [1, 3, 4, 10, 12, 13];

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub id: u8,
    pub pass: bool,
    /// One-line result.
    pub headline: String,
    /// Supporting numbers, one per line.
    pub details: Vec<String>,
}

impl CheckReport {
    pub fn line(&self) -> String {
        format!(
            "criterion {}: {} {}",
            self.id,
            if self.pass { "PASS" } else { "FAIL" },
            self.headline
        )
    }
}

pub fn config_text(id: u8) -> Result<&'static str> {
    CONFIGS
        .get((id as usize).wrapping_sub(1))
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Config(format!("no criterion {id}")))
}

pub fn config(id: u8) -> Result<ExperimentConfig> {
    ExperimentConfig::from_toml_str(config_text(id)?)
}

fn base_value(id: u8) -> Result<toml::Value> {
    toml::from_str(config_text(id)?).map_err(|e| Error::Config(e.to_string()))
}

pub fn run_check(id: u8) -> Result<CheckReport> {
    match id {
        1 => check_backoff(),
        2 => check_chernoff(),
        3 => check_slb_gap(),
        4 => check_flat_design(),
        5 => check_oversampled(),
        6 => check_universality(),
        7 => check_sigma_delta(),
        8 => check_integer_forcing(),
        9 => check_clp_dominance(),
        10 => check_ring_equivalence(),
        11 => check_ring_regimes(),
        12 => check_spacetime(),
        13 => check_single_stream(),
        _ => Err(Error::Config(format!("no criterion {id}"))),
    }
}

fn report(id: u8, pass: bool, headline: String, details: Vec<String>) -> Result<CheckReport> {
    Ok(CheckReport {
        id,
        pass,
        headline,
        details,
    })
}

fn floats(v: &[f64]) -> Vec<toml::Value> {
    v.iter().map(|&x| toml::Value::Float(x)).collect()
}

fn slope(x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    (y1 - y0) / (x1 - x0)
}

const BACKOFF_TARGET: f64 = 1.6717;

fn check_backoff() -> Result<CheckReport> {
    let cfg = config(1)?;
    let delta = cfg.design.delta()?;
    let run = run_experiment(&cfg)?;
    let reported = run.summary.get("delta").unwrap_or(f64::NAN);
    let pass = (delta - BACKOFF_TARGET).abs() <= 5e-4 && (reported - delta).abs() < 1e-6;
    report(
        1,
        pass,
        format!("delta(T=2^11, eps=1e-3) = {delta:.5} bits (target 1.6717 +- 0.0005)"),
        vec![format!("harness run reports delta = {reported:.5}")],
    )
}

fn check_chernoff() -> Result<CheckReport> {
    let deltas = [1.0, 1.5, 2.0];
    let s = sweep(&base_value(2)?, "delta", &floats(&deltas))?;
    let mut pass = true;
    let mut details = Vec::new();
    let mut zero_at_top = false;
    for (d, r) in deltas.iter().zip(&s.results) {
        let sm = &r.summary;
        let n = sm.samples as f64;
        let bound = overload_bound(*d);
        let freq = sm.per_sample_overload();
        let limit = bound + 3.0 * (bound * (1.0 - bound) / n).sqrt();
        let ok = freq <= limit && sm.failed_trials == 0;
        pass &= ok;
        if *d == 2.0 {
            zero_at_top = sm.overloads == 0;
        }
        details.push(format!(
            "delta={d}: {} overloads in {} samples, freq {freq:.3e}, bound {bound:.3e}, limit {limit:.3e} [{}]",
            sm.overloads,
            sm.samples,
            if ok { "ok" } else { "exceeds" }
        ));
    }
    pass &= zero_at_top;
    let min_samples = s.results.iter().map(|r| r.summary.samples).min().unwrap_or(0);
    pass &= min_samples >= 10_000_000;
    report(
        2,
        pass,
        format!(
            "overload frequency within bound + 3 SE at delta in {{1, 1.5}}, {} at delta=2 ({min_samples} samples per point)",
            if zero_at_top { "no failures" } else { "failures" }
        ),
        details,
    )
}

/// `1/2 log2(12 sigma_p^2) - R_SLB(D)` for a scalar model at order `p`.
pub fn slb_gap(model: &ProcessModel, p: usize, distortion: f64) -> Result<f64> {
    let cx = autocov_from_model(model, SLB_ORDER.max(p) + 1)?;
    let alpha = (1.0 / (12.0 * distortion)).sqrt();
    let noise = NoiseModel::WhiteUniform;
    let f = solve_predictor(&quantized_autocov(&cx, alpha, noise, p)?, p)?;
    let blocks: Vec<DMatrix<f64>> = cx.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect();
    let r_slb = slb_vector(&innovation_cov(&blocks)?, distortion)?;
    Ok(0.5 * (12.0 * f.error_var).log2() - r_slb)
}

fn check_slb_gap() -> Result<CheckReport> {
    let cfg = config(3)?;
    let p = cfg.design.p;
    let ds = [1e-2, 1e-3, 1e-4];
    let mut pass = true;
    let mut details = Vec::new();
    let mut worst = 0.0f64;
    for rho in [0.5, 0.9, 0.99] {
        let model = ProcessModel::Ar1 { variance: 1.0, rho };
        let gaps: Vec<f64> = ds.iter().map(|&d| slb_gap(&model, p, d)).collect::<Result<_>>()?;
        let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
        let ok = gaps[2] < 0.1 && decreasing;
        worst = worst.max(gaps[2]);
        pass &= ok;
        details.push(format!(
            "rho={rho}: gap at D=1e-2,1e-3,1e-4 = {:.4}, {:.4}, {:.4} bits{}",
            gaps[0],
            gaps[1],
            gaps[2],
            if ok { "" } else { " [violates]" }
        ));
    }
    let run = run_experiment(&cfg)?;
    details.push(format!(
        "config run (rho=0.9, D=1e-4): pe_hat {}, snr {:.2} dB",
        run.summary.pe_hat,
        run.summary.snr_db.unwrap_or(f64::NAN)
    ));
    report(
        3,
        pass,
        format!("gap to the Shannon lower bound decreases in D, worst {worst:.4} bit at D=1e-4 (limit 0.1)"),
        details,
    )
}

/// `12 sigma_p^2 / (1 + 12 alpha^2 L sigma^2)^{1/L}` for the flat-design predictor.
pub fn flat_design_ratio(l: f64, snr_db: f64, p: usize) -> Result<f64> {
    let sigma_sq = 1.0;
    let snr = 10f64.powf(snr_db / 10.0);
    let alpha = ((snr - 1.0) / (12.0 * l * sigma_sq)).sqrt();
    let f = flat_spectrum_predictor(l, alpha, sigma_sq, p, NoiseModel::WhiteUniform)?;
    Ok(12.0 * f.error_var / snr.powf(1.0 / l))
}

fn check_flat_design() -> Result<CheckReport> {
    let p = config(4)?.design.p;
    let mut pass = true;
    let mut details = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for l in [2.0, 3.0, 4.0] {
        let mut row = Vec::new();
        for s in (20..=60).step_by(5) {
            let r = flat_design_ratio(l, s as f64, p)?;
            lo = lo.min(r);
            hi = hi.max(r);
            pass &= (1.0 - 1e-6..=1.05).contains(&r);
            row.push(format!("{s}dB:{r:.4}"));
        }
        details.push(format!("L={l}: {}", row.join(" ")));
    }
    report(
        4,
        pass,
        format!("prediction-error ratio over 20-60 dB spans [{lo:.4}, {hi:.4}] (required [1-1e-6, 1.05])"),
        details,
    )
}

const SIX_DB_PER_BIT: f64 = 6.020_599_913_279_624;

fn check_oversampled() -> Result<CheckReport> {
    let rates = [3.0, 4.0, 5.0, 6.0];
    let cfg = config(5)?;
    let l = match cfg.source {
        ProcessModel::FlatBand { oversample_ratio, .. } => oversample_ratio,
        _ => return Err(Error::Config("c05 needs a flat_band source".into())),
    };
    let s = sweep(&base_value(5)?, "R", &floats(&rates))?;
    let mut pass = true;
    let mut details = Vec::new();
    let mut snrs = Vec::new();
    for (r, res) in rates.iter().zip(&s.results) {
        let sm = &res.summary;
        let snr = sm.snr_db.unwrap_or(f64::NAN);
        let theory = sm.get("snr_db_modadc_theory").unwrap_or(f64::NAN);
        let ok = (snr - theory).abs() <= 1.0 && sm.pe_lo <= 1e-3 && sm.failed_trials == 0;
        pass &= ok;
        snrs.push(snr);
        details.push(format!(
            "R={r}: snr {snr:.2} dB, theory {theory:.2} dB, block errors {}/{} (Wilson [{:.2e}, {:.2e}]){}",
            sm.block_errors,
            sm.trials,
            sm.pe_lo,
            sm.pe_hi,
            if ok { "" } else { " [violates]" }
        ));
    }
    let target = SIX_DB_PER_BIT * l;
    let slopes: Vec<f64> = (1..rates.len())
        .map(|i| slope(rates[i - 1], snrs[i - 1], rates[i], snrs[i]))
        .collect();
    let slopes_ok = slopes.iter().all(|s| (s - target).abs() <= 1.0);
    pass &= slopes_ok;
    details.push(format!(
        "slopes {} dB/bit (target {target:.2} +- 1)",
        slopes.iter().map(|s| format!("{s:.2}")).collect::<Vec<_>>().join(", ")
    ));
    report(
        5,
        pass,
        format!(
            "SNR tracks 10log10(1+12 alpha^2 L sigma^2) within 1 dB, slopes {:.2}..{:.2} dB/bit",
            slopes.iter().copied().fold(f64::INFINITY, f64::min),
            slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        ),
        details,
    )
}

fn check_universality() -> Result<CheckReport> {
    let kinds = ["flat_band", "triangular_band", "two_tone_band"];
    let values: Vec<toml::Value> = kinds.iter().map(|k| toml::Value::String(k.to_string())).collect();
    let s = sweep(&base_value(6)?, "source.kind", &values)?;
    let snrs: Vec<f64> = s.results.iter().map(|r| r.summary.snr_db.unwrap_or(f64::NAN)).collect();
    let spread =
        snrs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - snrs.iter().copied().fold(f64::INFINITY, f64::min);
    let errors: usize = s.results.iter().map(|r| r.summary.block_errors).sum();
    let details = kinds
        .iter()
        .zip(&s.results)
        .map(|(k, r)| {
            format!(
                "{k}: snr {:.3} dB, block errors {}/{}",
                r.summary.snr_db.unwrap_or(f64::NAN),
                r.summary.block_errors,
                r.summary.trials
            )
        })
        .collect();
    report(
        6,
        spread.is_finite() && spread < 0.5,
        format!("conditional SNR spread across three PSD shapes {spread:.3} dB (limit 0.5), {errors} block errors"),
        details,
    )
}

/// Golden-section minimum of a unimodal `f` on `[a, b]`.
pub fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn check_sigma_delta() -> Result<CheckReport> {
    let mut details = Vec::new();
    let mut tap_err = 0.0f64;
    for l in [2.0, 3.0, 4.0, 8.0] {
        let numeric = golden_min(|c| inband_noise_factor(l, c), 0.0, 1.0, 1e-10);
        let closed = optimal_shaping_tap(l);
        tap_err = tap_err.max((numeric - closed).abs());
        details.push(format!("L={l}: c* = {closed:.8}, numeric minimum {numeric:.8}"));
    }
    let mut pass = tap_err <= 1e-6;

    let l = match config(7)?.source {
        ProcessModel::FlatBand { oversample_ratio, .. } => oversample_ratio,
        _ => return Err(Error::Config("c07 needs a flat_band source".into())),
    };
    let rates = [3.0, 4.0, 5.0, 6.0];
    let s = sweep(&base_value(7)?, "R", &floats(&rates))?;
    let mut worst_db = 0.0f64;
    for (r, res) in rates.iter().zip(&s.results) {
        let sm = &res.summary;
        let sim = sm.get("sigmadelta_inband_noise").unwrap_or(f64::NAN);
        let theory = sm.get("sigmadelta_inband_noise_theory").unwrap_or(f64::NAN);
        let err = (10.0 * (sim / theory).log10()).abs();
        worst_db = worst_db.max(err);
        let sd_snr = sm.get("snr_db_sigmadelta").unwrap_or(f64::NAN);
        let mod_theory = sm.get("snr_db_modadc_theory").unwrap_or(f64::NAN);
        pass &= err <= 0.3 && mod_theory > sd_snr;
        details.push(format!(
            "R={r}: sigma-delta in-band noise {sim:.4e} vs {theory:.4e} ({err:.3} dB), snr mod-ADC sim {:.2} / theory {mod_theory:.2}, sigma-delta sim {sd_snr:.2} / theory {:.2} dB, sigma-delta overloads {}",
            sm.snr_db.unwrap_or(f64::NAN),
            sm.get("snr_db_sigmadelta_theory").unwrap_or(f64::NAN),
            sm.get("sigmadelta_overloads").unwrap_or(f64::NAN)
        ));
    }
    pass &= worst_db <= 0.3;
    let mut min_margin = f64::INFINITY;
    for i in 0..=20 {
        let r = 1.0 + 0.25 * i as f64;
        min_margin = min_margin.min(modadc_snr_db(l, r) - sigma_delta_snr_db(l, r)?);
    }
    pass &= min_margin > 0.0;
    details.push(format!(
        "theoretical mod-ADC minus sigma-delta SNR over R-delta in [1, 6]: at least {min_margin:.2} dB"
    ));
    report(
        7,
        pass,
        format!(
            "c* within {tap_err:.1e} of the numeric minimum, in-band noise within {worst_db:.3} dB, mod-ADC ahead by >= {min_margin:.2} dB"
        ),
        details,
    )
}

/// Wishart `G G^T` with a `K x K` standard normal `G`.
pub fn wishart<R: Rng + ?Sized>(k: usize, rng: &mut R) -> DMatrix<f64> {
    let g: DMatrix<f64> = DMatrix::from_fn(k, k, |_, _| StandardNormal.sample(&mut *rng));
    &g * g.transpose()
}

fn gaussian_vector<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let z: nalgebra::DVector<f64> = nalgebra::DVector::from_fn(chol.nrows(), |_, _| StandardNormal.sample(&mut *rng));
    (chol * z).iter().copied().collect()
}

fn cholesky_lower(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let jitter = DMatrix::identity(sigma.nrows(), sigma.nrows()) * (1e-12 * sigma.trace());
    nalgebra::Cholesky::new(sigma + jitter)
        .map(|c| c.l())
        .ok_or_else(|| crate::error::numeric("covariance is not positive definite"))
}

/// Largest `|a_i|` among integer vectors with `a^T G a <= q`.
fn coefficient_bound(gram: &DMatrix<f64>, q: f64) -> Result<i64> {
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| crate::error::numeric("Gram matrix is singular"))?;
    let m = (0..gram.nrows()).map(|i| (q * inv[(i, i)]).sqrt()).fold(0.0, f64::max);
    Ok((m + 1e-9).floor() as i64)
}

fn max_row(gram: &DMatrix<f64>, a: &IntegerMatrix) -> f64 {
    a.rows().iter().map(|r| quad_form(gram, r)).fold(0.0, f64::max)
}

fn decode_matches(vh: &[f64], v: &[f64], modulus: f64) -> bool {
    let tol = WRONG_FOLD_TOL * modulus;
    vh.iter().zip(v).all(|(a, b)| (a - b).abs() <= tol)
}

/// Largest box the exhaustive search accepts for dimension `k`.
fn exact_cap(k: usize) -> i64 {
    ((2e6f64.powf(1.0 / k as f64) - 1.0) / 2.0).floor() as i64
}

fn check_integer_forcing() -> Result<CheckReport> {
    let cfg = config(8)?;
    let seed = cfg.master_seed;
    let d = cfg.adc.distortion.unwrap_or(1e-3);
    let alpha = (1.0 / (12.0 * d)).sqrt();
    let headroom = cfg.design.delta()?;
    let (draws, decodes) = (2000u64, 200usize);
    let mut pass = true;
    let mut details = Vec::new();
    for k in [2usize, 3] {
        let tag = k as u64 * 1_000_000;
        let fails: Vec<usize> = (0..draws)
            .into_par_iter()
            .map(|j| -> Result<usize> {
                let mut rng = trial_rng(seed, tag + j, StreamTag::Ensemble);
                let sigma = wishart(k, &mut rng);
                let a = LatticeSearch::default().find(&if_gram(&sigma, alpha))?;
                let rate = rate_report(&a, &sigma, d)?.r_ifsc + headroom;
                let dec = IfDecoder::new(&a, rate)?;
                let modulus = rate.exp2();
                let chol = cholesky_lower(&sigma)?;
                let mut drng = trial_rng(seed, tag + j, StreamTag::Dither);
                let mut wrong = 0;
                for _ in 0..decodes {
                    let x = gaussian_vector(&chol, &mut drng);
                    let (codes, v): (Vec<f64>, Vec<f64>) = x
                        .iter()
                        .map(|&xi| encode_one(xi, alpha, modulus, Dither::Subtractive, &mut drng))
                        .unzip();
                    if !decode_matches(&dec.decode(&codes), &v, modulus) {
                        wrong += 1;
                    }
                }
                Ok(wrong)
            })
            .collect::<Result<_>>()?;
        let total: usize = fails.iter().sum();
        let n = (draws as usize * decodes) as f64;
        let bound = 2.0 * k as f64 * (-1.5 * (2.0 * headroom).exp2()).exp();
        let limit = bound + 3.0 * (bound * (1.0 - bound) / n).sqrt();
        let ok = (total as f64 / n) <= limit;
        pass &= ok;
        details.push(format!(
            "K={k}: {total} failures in {n} decodes at R = R_IFSC + {headroom} (limit {limit:.2e})"
        ));

        let gaps: Vec<(f64, f64)> = (0..10_000u64)
            .into_par_iter()
            .map(|j| -> Result<(f64, f64)> {
                let mut rng = trial_rng(seed, tag + 100_000 + j, StreamTag::Ensemble);
                let sigma = wishart(k, &mut rng);
                let gram = if_gram(&sigma, alpha);
                let g_lll = rate_report(&find_a_lll(&gram)?, &sigma, d)?.gap;
                let g_ex = rate_report(&find_a_exhaustive(&gram, 4)?, &sigma, d)?.gap;
                Ok((g_lll, g_ex))
            })
            .collect::<Result<_>>()?;
        let min_gap = gaps.iter().map(|g| g.0.min(g.1)).fold(f64::INFINITY, f64::min);
        let ok = min_gap >= -1e-9;
        pass &= ok;
        details.push(format!(
            "K={k}: smallest R_IFSC - R_bench over 10^4 draws {min_gap:.3e} bits"
        ));

        let cmp: Vec<(f64, bool)> = (0..1000u64)
            .into_par_iter()
            .map(|j| -> Result<(f64, bool)> {
                let mut rng = trial_rng(seed, tag + 200_000 + j, StreamTag::Ensemble);
                let sigma = wishart(k, &mut rng);
                let gram = if_gram(&sigma, alpha);
                let lll = find_a_lll(&gram)?;
                let q = max_row(&gram, &lll);
                let b = coefficient_bound(&gram, q)?;
                let cap = exact_cap(k);
                let ex = find_a_exhaustive(&gram, b.clamp(1, cap))?;
                let diff = rate_report(&lll, &sigma, d)?.r_ifsc - rate_report(&ex, &sigma, d)?.r_ifsc;
                Ok((diff, b > cap))
            })
            .collect::<Result<_>>()?;
        let worst = cmp.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
        let equal = cmp.iter().filter(|c| c.0.abs() <= 1e-9).count();
        let capped = cmp.iter().filter(|c| c.1).count();
        let capped_beaten = cmp.iter().filter(|c| c.1 && c.0 < -1e-9).count();
        let ok = worst >= -1e-9;
        pass &= ok;
        details.push(format!(
            "K={k}: R_IFSC(LLL) - R_IFSC(exhaustive) >= {worst:.3e} on 10^3 draws, equal on {equal}/1000, mean LLL excess {:.4} bits; {capped} draws needed a box beyond |a_i| <= {} ({capped_beaten} of them beaten by LLL)",
            cmp.iter().map(|c| c.0).sum::<f64>() / 1000.0,
            exact_cap(k)
        ));
    }
    report(
        8,
        pass,
        "no observed IF failures two bits above R_IFSC, gap >= 0 on all draws, LLL never beats the exhaustive search"
            .into(),
        details,
    )
}

#[derive(Debug, Default, Clone, Copy)]
struct PairCounts {
    both: usize,
    if_only: usize,
    clp_only: usize,
    neither: usize,
    mismatched: usize,
}

impl PairCounts {
    fn merge(mut self, o: Self) -> Self {
        self.both += o.both;
        self.if_only += o.if_only;
        self.clp_only += o.clp_only;
        self.neither += o.neither;
        self.mismatched += o.mismatched;
        self
    }
}

fn check_clp_dominance() -> Result<CheckReport> {
    let cfg = config(9)?;
    let seed = cfg.master_seed;
    let d = cfg.adc.distortion.unwrap_or(1e-3);
    let alpha = (1.0 / (12.0 * d)).sqrt();
    let headroom = cfg.design.delta()?;
    let (draws, decodes) = (500u64, 200usize);
    let mut pass = true;
    let mut details = Vec::new();
    for k in [2usize, 3] {
        let tag = k as u64 * 1_000_000;
        let counts = (0..draws)
            .into_par_iter()
            .map(|j| -> Result<PairCounts> {
                let mut rng = trial_rng(seed, tag + j, StreamTag::Ensemble);
                let sigma = wishart(k, &mut rng);
                let a = LatticeSearch::default().find(&if_gram(&sigma, alpha))?;
                let rate = rate_report(&a, &sigma, d)?.r_ifsc + headroom;
                let ifd = IfDecoder::new(&a, rate)?;
                let clp = ClpDecoder::new(&sigma, alpha, rate)?;
                let modulus = rate.exp2();
                let chol = cholesky_lower(&sigma)?;
                let mut drng = trial_rng(seed, tag + j, StreamTag::Dither);
                let mut c = PairCounts::default();
                for _ in 0..decodes {
                    let x = gaussian_vector(&chol, &mut drng);
                    let (codes, v): (Vec<f64>, Vec<f64>) = x
                        .iter()
                        .map(|&xi| encode_one(xi, alpha, modulus, Dither::Subtractive, &mut drng))
                        .unzip();
                    let vi = ifd.decode(&codes);
                    let vc = clp.decode(&codes);
                    match (decode_matches(&vi, &v, modulus), decode_matches(&vc, &v, modulus)) {
                        (true, true) => {
                            c.both += 1;
                            if !decode_matches(&vi, &vc, modulus) {
                                c.mismatched += 1;
                            }
                        }
                        (true, false) => c.if_only += 1,
                        (false, true) => c.clp_only += 1,
                        (false, false) => c.neither += 1,
                    }
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(PairCounts::default(), PairCounts::merge);
        let ok = counts.if_only == 0 && counts.mismatched == 0;
        pass &= ok;
        let n = draws as usize * decodes;
        details.push(format!(
            "K={k}: {n} paired decodes at R = R_IFSC + {headroom}: both ok {}, CLP only {}, IF only {}, neither {}, output mismatches {}; IF successes {} <= CLP successes {}",
            counts.both,
            counts.clp_only,
            counts.if_only,
            counts.neither,
            counts.mismatched,
            counts.both + counts.if_only,
            counts.both + counts.clp_only
        ));
    }
    report(
        9,
        pass,
        "exact CLP succeeds wherever integer forcing does, identical outputs when both succeed".into(),
        details,
    )
}

fn check_ring_equivalence() -> Result<CheckReport> {
    let volts: Vec<f64> = (0..8).map(f64::from).collect();
    let flat = FCurve::from_table(volts, vec![3.7; 8])?;
    let hand = RingOscProfile::new(5, flat, 1.0)?;
    let fe = AffineFrontend::new(1.0, 0.0, 1.0);
    let hand_codes = simulate_states(&[0.0; 8], &hand, &fe, 0.0)?.codes;
    let hand_cf = closed_form_output(&[0.0; 8], &hand, &fe, 0.0)?.codes;
    let hand_ok = hand_codes.starts_with(&[3, 4, 4, 3]) && hand_codes == hand_cf;

    let cfg = config(10)?;
    let ring = cfg
        .ring
        .as_ref()
        .ok_or_else(|| Error::Config("c10 needs [ring]".into()))?;
    let profile = RingOscProfile::with_default_curve(ring.n_inverters)?;
    let sigma = cfg.source.variance()?.sqrt();
    let fe = AffineFrontend::new(ring.a.unwrap_or(0.7), ring.b.unwrap_or(0.05), sigma);
    let n = cfg.design.block_len;
    let mismatches: Vec<usize> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|j| -> Result<usize> {
            let path = gen_gaussian(&cfg.source, n, &mut trial_rng(cfg.master_seed, j, StreamTag::Source))?;
            let phase = trial_rng(cfg.master_seed, j, StreamTag::Init).random::<f64>();
            let a = simulate_states(path.stream(0), &profile, &fe, phase)?;
            let b = closed_form_output(path.stream(0), &profile, &fe, phase)?;
            Ok(a.codes.iter().zip(&b.codes).filter(|(x, y)| x != y).count()
                + a.counts.iter().zip(&b.counts).filter(|(x, y)| x != y).count())
        })
        .collect::<Result<_>>()?;
    let bad: usize = mismatches.iter().sum();
    report(
        10,
        hand_ok && bad == 0 && cfg.trials >= 20 && n >= 10_000,
        format!(
            "state machine and closed form agree on {} x {n} samples ({bad} mismatches), hand example {:?}",
            cfg.trials,
            &hand_codes[..6]
        ),
        vec![format!("N={}, a={}, b={}", ring.n_inverters, fe.a, fe.b)],
    )
}

fn ring_run(base: &toml::Value, n: usize, overrides: &[(&str, toml::Value)]) -> Result<ExperimentResult> {
    let mut doc = base.clone();
    let set = |doc: &mut toml::Value, section: &str, key: &str, v: toml::Value| -> Result<()> {
        doc.as_table_mut()
            .and_then(|t| t.get_mut(section))
            .and_then(|s| s.as_table_mut())
            .ok_or_else(|| Error::Config(format!("config needs [{section}]")))?
            .insert(key.to_string(), v);
        Ok(())
    };
    set(&mut doc, "ring", "n_inverters", toml::Value::Integer(n as i64))?;
    for (path, v) in overrides {
        match path.split_once('.') {
            Some((section, key)) => set(&mut doc, section, key, v.clone())?,
            None => {
                doc.as_table_mut()
                    .ok_or_else(|| Error::Config("config is not a table".into()))?
                    .insert(path.to_string(), v.clone());
            }
        }
    }
    run_experiment(&ExperimentConfig::from_value(doc)?)
}

fn clean(s: &Summary) -> bool {
    s.block_errors == 0 && s.overloads == 0 && s.failed_trials == 0
}

const RING_SWEEP: [usize; 5] = [5, 9, 17, 33, 65];

fn check_ring_regimes() -> Result<CheckReport> {
    let base = base_value(11)?;
    let l = match config(11)?.source {
        ProcessModel::FlatBand { oversample_ratio, .. } => oversample_ratio,
        _ => return Err(Error::Config("c11 needs a flat_band source".into())),
    };
    let ideal = SIX_DB_PER_BIT * l;
    let mut details = Vec::new();
    let mut rates = Vec::new();
    let mut snrs = Vec::new();
    let mut all_clean = true;
    for n in RING_SWEEP {
        let g = ring_run(&base, n, &[])?;
        let sm = &g.summary;
        let (a, b) = (sm.get("a").unwrap_or(f64::NAN), sm.get("b").unwrap_or(f64::NAN));
        let sin = ring_run(
            &base,
            n,
            &[
                ("input", toml::Value::String("sinusoid".into())),
                ("ring.a", toml::Value::Float(a)),
                ("ring.b", toml::Value::Float(b)),
            ],
        )?;
        let ok = clean(sm) && clean(&sin.summary);
        all_clean &= ok;
        rates.push(sm.rate_bits);
        snrs.push(sm.snr_db.unwrap_or(f64::NAN));
        details.push(format!(
            "N={n} R={:.3}: a={a:.4} b={b:.5} snr {:.2} dB, gaussian errors {}/{}, sinusoid errors {}/{} (snr {:.2} dB)",
            sm.rate_bits,
            sm.snr_db.unwrap_or(f64::NAN),
            sm.block_errors,
            sm.trials,
            sin.summary.block_errors,
            sin.summary.trials,
            sin.summary.snr_db.unwrap_or(f64::NAN)
        ));
    }
    let m = rates.len();
    let low = slope(rates[0], snrs[0], rates[1], snrs[1]);
    let high = slope(rates[m - 2], snrs[m - 2], rates[m - 1], snrs[m - 1]);
    let pass = all_clean && (low - ideal).abs() <= 1.5 && high < ideal / 2.0;
    details.push(format!(
        "slopes {} dB/bit",
        (1..m)
            .map(|i| format!("{:.2}", slope(rates[i - 1], snrs[i - 1], rates[i], snrs[i])))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    let short: Vec<String> = RING_SWEEP
        .iter()
        .map(|&n| {
            ring_run(
                &base,
                n,
                &[
                    ("design.p", toml::Value::Integer(25)),
                    ("design.k", toml::Value::Integer(22)),
                    ("trials", toml::Value::Integer(200)),
                ],
            )
            .map(|r| format!("N={n}:{:.2}", r.summary.snr_db.unwrap_or(f64::NAN)))
            .unwrap_or_else(|e| format!("N={n}:{e}"))
        })
        .collect();
    details.push(format!("reference sweep at p=25, k=22 (dB): {}", short.join(" ")));
    report(
        11,
        pass,
        format!(
            "low-rate slope {low:.2} dB/bit (ideal {ideal:.2} +- 1.5), high-rate slope {high:.2} (< {:.2}), {}",
            ideal / 2.0,
            if all_clean {
                "no overloads"
            } else {
                "overloads observed"
            }
        ),
        details,
    )
}

fn check_spacetime() -> Result<CheckReport> {
    let cfg = config(12)?;
    let p = cfg.design.p;
    let ds = [1e-2, 1e-3, 1e-4];
    let draws = 100u64;
    let rows: Vec<Vec<crate::spacetime::RatePoint>> = (0..draws)
        .into_par_iter()
        .map(|j| -> Result<Vec<_>> {
            let mut rng = trial_rng(cfg.master_seed, j, StreamTag::Ensemble);
            let mut taps = || -> Vec<f64> {
                (0..5)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        10.0 * z
                    })
                    .collect()
            };
            let model = ProcessModel::FilteredNoisePair {
                taps_h: taps(),
                taps_g: taps(),
            };
            let blocks = vector_autocov(&model, SLB_ORDER.max(p) + 1)?;
            ds.iter().map(|&d| rate_point(&blocks, p, d, cfg.adc.lattice)).collect()
        })
        .collect::<Result<_>>()?;
    let tol = 1e-9;
    let order_bad = rows
        .iter()
        .flatten()
        .filter(|pt| !(pt.r_slb <= pt.r_st + tol && pt.r_st <= pt.r_naive + tol))
        .count();
    let gap_err: Vec<f64> = rows
        .iter()
        .map(|r| {
            let pt = r[2];
            (pt.r_st - pt.r_slb - pt.gap_limit).abs()
        })
        .collect();
    let worst = gap_err.iter().copied().fold(0.0, f64::max);
    let mean = |i: usize, f: fn(&crate::spacetime::RatePoint) -> f64| {
        rows.iter().map(|r| f(&r[i])).sum::<f64>() / draws as f64
    };
    let mut details: Vec<String> = ds
        .iter()
        .enumerate()
        .map(|(i, d)| {
            format!(
                "D={d:e}: mean R_SLB {:.3}, R_ST {:.3}, R_naive {:.3}, gap {:.4} (limit formula {:.4})",
                mean(i, |p| p.r_slb),
                mean(i, |p| p.r_st),
                mean(i, |p| p.r_naive),
                mean(i, |p| p.r_st - p.r_slb),
                mean(i, |p| p.gap_limit)
            )
        })
        .collect();
    let run = run_experiment(&cfg)?;
    details.push(format!(
        "config run (fixed taps, D=1e-4): block errors {}/{}, snr {:.2} dB",
        run.summary.block_errors,
        run.summary.trials,
        run.summary.snr_db.unwrap_or(f64::NAN)
    ));
    report(
        12,
        order_bad == 0 && worst <= 0.1,
        format!(
            "R_SLB <= R_ST <= R_naive on all {} points ({order_bad} violations), |gap - limit| at D=1e-4 <= {worst:.4} bit (limit 0.1)",
            draws as usize * ds.len()
        ),
        details,
    )
}

fn check_single_stream() -> Result<CheckReport> {
    let cfg = config(13)?;
    let p = cfg.design.p;
    let alpha = cfg
        .adc
        .alpha
        .ok_or_else(|| Error::Config("c13 needs adc.alpha".into()))?;
    let cx = autocov_from_model(&cfg.source, p + 1)?;
    let noise = NoiseModel::WhiteUniform;
    let f = solve_predictor(&quantized_autocov(&cx, alpha, noise, p)?, p)?.with_mean(noise.mean());
    let rate = 0.5 * (12.0 * f.error_var).log2() + cfg.design.delta()?;
    let params = ModAdcParams::new(rate, alpha, cfg.adc.dither)?;
    let design = SpaceTimeDesign::from_filter(MatrixPredictorFilter::from(&f), cfg.adc.lattice)?;
    let blocks: Vec<DMatrix<f64>> = cx.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect();
    let stream = StreamConfig {
        params,
        init: InitMethod::Genie,
        feedback: Feedback::Decision,
    };
    let mut differing = 0;
    let mut compared = 0;
    for j in 0..cfg.trials as u64 {
        let x = gen_gaussian(
            &cfg.source,
            cfg.design.block_len,
            &mut trial_rng(cfg.master_seed, j, StreamTag::Source),
        )?;
        let s = run_stream(
            x.stream(0),
            &cx,
            &f,
            &stream,
            &mut trial_rng(cfg.master_seed, j, StreamTag::Dither),
        )?;
        let v = run_vector_stream(
            &x,
            &blocks,
            &design,
            &params,
            &VectorInit::Genie,
            Feedback::Decision,
            &mut trial_rng(cfg.master_seed, j, StreamTag::Dither),
        )?;
        compared += s.v_hat.len();
        differing += s
            .v_hat
            .iter()
            .zip(&v.v_hat)
            .filter(|(a, b)| a.to_bits() != b[0].to_bits())
            .count();
        if s.v_hat.len() != v.v_hat.len()
            || s.block_error != v.block_error
            || s.conditional_mse.map(f64::to_bits) != v.conditional_mse.map(f64::to_bits)
        {
            differing += 1;
        }
    }
    report(
        13,
        differing == 0 && compared > 0,
        format!(
            "K=1 space-time decoder matches the temporal decoder bit for bit on {} trials ({differing} differences in {compared} samples)",
            cfg.trials
        ),
        Vec::new(),
    )
}
