//! Experiment configs, Monte Carlo orchestration and CSV output.
//!
//! A config names one experiment, a source model and the converter/design
//! parameters. Trial `j` draws its source, dither and phase from streams
//! seeded by `(master_seed, j, tag)`, so results do not depend on the thread
//! count or scheduling order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::iforce::{if_gram, rate_report, ClpDecoder, IfDecoder, IntegerMatrix};
use crate::modcore::{backoff_for_block, encode_one, overload_bound, Dither, ModAdcParams};
use crate::oversample::{run_oversampled, run_sigma_delta, OversampledConfig, SigmaDeltaConfig};
use crate::predict::{quantized_autocov, quantized_blocks, solve_predictor, NoiseModel, PredictorFilter};
use crate::ringosc::{
    design_bundle, run_ringosc_block, search_ab, AbGrid, AffineFrontend, FCurve, RingOscBundle, RingOscDesign,
    RingOscProfile, DEFAULT_SAMPLE_PERIOD,
};
use crate::rng::{derive_seed, trial_rng, StreamTag};
use crate::signals::{autocov_from_model, gen_gaussian, gen_sinusoid, vector_autocov, ProcessModel, SamplePath};
use crate::spacetime::{
    rate_point, run_vector_stream, st_design, LatticeSearch, SpaceTimeDesign, VectorInit, SLB_ORDER,
};
use crate::temporal::{run_stream, Feedback, InitMethod, StreamConfig, WRONG_FOLD_TOL};

pub const SCHEMA_LINE: &str = "# schema=1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Temporal,
    Spatial,
    Spacetime,
    Oversampled,
    Ringosc,
    SigmaDeltaCompare,
    BoundsCheck,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Temporal => "temporal",
            Self::Spatial => "spatial",
            Self::Spacetime => "spacetime",
            Self::Oversampled => "oversampled",
            Self::Ringosc => "ringosc",
            Self::SigmaDeltaCompare => "sigma_delta_compare",
            Self::BoundsCheck => "bounds_check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    #[default]
    Gaussian,
    /// Power-`sigma^2` sinusoid at a uniformly random in-band frequency.
    Sinusoid,
}

impl InputKind {
    fn name(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::Sinusoid => "sinusoid",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpatialDecoder {
    #[default]
    IntegerForcing,
    Clp,
}

/// Ideal converter parameters. Give `alpha` or `distortion` (`alpha =
/// 1/sqrt(12 D)`), or only `rate_bits` for scalar experiments; a missing rate
/// is set from the design so the backoff equals `design.delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AdcSpec {
    pub rate_bits: Option<f64>,
    pub alpha: Option<f64>,
    pub distortion: Option<f64>,
    #[serde(default)]
    pub dither: Dither,
    #[serde(default)]
    pub init: InitMethod,
    #[serde(default)]
    pub feedback: Feedback,
    #[serde(default)]
    pub lattice: LatticeSearch,
    #[serde(default)]
    pub decoder: SpatialDecoder,
}

fn default_search_blocks() -> usize {
    1000
}

fn default_verify_top() -> usize {
    4
}

fn default_ring_noise() -> NoiseModel {
    NoiseModel::Ma1Uniform
}

/// Ring-oscillator converter. With both `a` and `b` the search is skipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingSpec {
    pub n_inverters: usize,
    /// `volts,hz` table; the synthetic default curve otherwise.
    pub f_curve_csv: Option<PathBuf>,
    pub sample_period: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    #[serde(default)]
    pub grid: AbGrid,
    #[serde(default = "default_search_blocks")]
    pub search_blocks: usize,
    #[serde(default = "default_verify_top")]
    pub verify_top: usize,
    #[serde(default = "default_ring_noise")]
    pub noise: NoiseModel,
}

fn default_p() -> usize {
    64
}

fn default_k() -> usize {
    22
}

fn default_block_len() -> usize {
    1 << 11
}

fn default_eps() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_block_len")]
    pub block_len: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Overrides `backoff_for_block(block_len, eps)`.
    pub delta: Option<f64>,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self {
            p: default_p(),
            k: default_k(),
            block_len: default_block_len(),
            eps: default_eps(),
            delta: None,
        }
    }
}

impl DesignSpec {
    pub fn delta(&self) -> Result<f64> {
        match self.delta {
            Some(d) => Ok(d),
            None => backoff_for_block(self.block_len as u64, self.eps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub source: ProcessModel,
    #[serde(default)]
    pub input: InputKind,
    #[serde(default)]
    pub adc: AdcSpec,
    pub ring: Option<RingSpec>,
    #[serde(default)]
    pub design: DesignSpec,
    pub trials: usize,
    pub master_seed: u64,
    pub output_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(v: toml::Value) -> Result<Self> {
        let cfg: Self = v
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.trials < 1 {
            return bad("trials must be >= 1".into());
        }
        if !(self.design.eps > 0.0 && self.design.eps < 1.0) {
            return bad(format!("eps must lie in (0, 1), got {}", self.design.eps));
        }
        if self.design.block_len <= self.design.p {
            return bad(format!(
                "block_len {} must exceed the predictor order {}",
                self.design.block_len, self.design.p
            ));
        }
        self.source.validate()?;
        let vector = matches!(self.experiment, ExperimentKind::Spatial | ExperimentKind::Spacetime);
        if !vector && self.source.streams() > 1 {
            return bad(format!("{} needs a scalar source", self.experiment.name()));
        }
        if self.experiment == ExperimentKind::Ringosc && self.ring.is_none() {
            return bad("ringosc needs a [ring] section".into());
        }
        if self.experiment != ExperimentKind::Ringosc && self.ring.is_some() {
            return bad("[ring] is only used by ringosc".into());
        }
        Ok(())
    }
}

/// One Monte Carlo trial.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrialRecord {
    pub trial_id: u64,
    /// Set when the trial could not run; such trials are excluded from the statistics.
    pub failure: Option<String>,
    pub block_error: bool,
    /// Wrongly unfolded samples (vectors for multi-stream experiments).
    pub overload_count: usize,
    /// Samples scored for overloads.
    pub samples: usize,
    pub conditional_mse: Option<f64>,
    pub snr_db: Option<f64>,
    pub rate_bits: f64,
    /// Sigma-delta comparison: baseline conditional MSE, in-band noise and overloads.
    pub baseline_mse: Option<f64>,
    pub baseline_noise: Option<f64>,
    pub baseline_overloads: usize,
    pub clip_events: usize,
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let den = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / den;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / den;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub const WILSON_Z: f64 = 1.96;

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub experiment: ExperimentKind,
    pub input: InputKind,
    pub trials: usize,
    pub failed_trials: usize,
    pub block_errors: usize,
    pub pe_hat: f64,
    pub pe_lo: f64,
    pub pe_hi: f64,
    pub overloads: usize,
    pub samples: usize,
    pub mean_mse: Option<f64>,
    pub se_mse: Option<f64>,
    pub snr_db: Option<f64>,
    pub rate_bits: f64,
    pub alpha: Option<f64>,
    /// Experiment-specific columns.
    pub extra: Vec<(String, f64)>,
}

impl Summary {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn per_sample_overload(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.overloads as f64 / self.samples as f64
        }
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = [
            "experiment",
            "input",
            "trials",
            "failed_trials",
            "block_errors",
            "pe_hat",
            "pe_wilson_lo",
            "pe_wilson_hi",
            "overloads",
            "samples",
            "per_sample_overload",
            "mean_mse",
            "se_mse",
            "snr_db",
            "rate_bits",
            "alpha",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend(self.extra.iter().map(|(k, _)| k.clone()));
        h
    }

    fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.experiment.name().to_string(),
            self.input.name().to_string(),
            self.trials.to_string(),
            self.failed_trials.to_string(),
            self.block_errors.to_string(),
            self.pe_hat.to_string(),
            self.pe_lo.to_string(),
            self.pe_hi.to_string(),
            self.overloads.to_string(),
            self.samples.to_string(),
            self.per_sample_overload().to_string(),
            opt(self.mean_mse),
            opt(self.se_mse),
            opt(self.snr_db),
            self.rate_bits.to_string(),
            opt(self.alpha),
        ];
        r.extend(self.extra.iter().map(|(_, v)| v.to_string()));
        r
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn db(sigma_sq: f64, mse: f64) -> f64 {
    10.0 * (sigma_sq / mse).log10()
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub summary: Summary,
    pub trials: Vec<TrialRecord>,
    pub wall_time_ms: Vec<f64>,
}

/// Band-limited models as `(variance, oversampling ratio)`.
fn band_params(model: &ProcessModel) -> Option<(f64, f64)> {
    match *model {
        ProcessModel::FlatBand {
            variance,
            oversample_ratio,
        }
        | ProcessModel::TriangularBand {
            variance,
            oversample_ratio,
        }
        | ProcessModel::TwoToneBand {
            variance,
            oversample_ratio,
        } => Some((variance, oversample_ratio)),
        _ => None,
    }
}

fn gen_input(source: &ProcessModel, input: InputKind, n: usize, seed: u64, j: u64) -> Result<SamplePath> {
    let mut rng = trial_rng(seed, j, StreamTag::Source);
    match input {
        InputKind::Gaussian => gen_gaussian(source, n, &mut rng),
        InputKind::Sinusoid => {
            if source.streams() != 1 {
                return Err(invalid("sinusoidal input needs a scalar source"));
            }
            let (var, frac) = match band_params(source) {
                Some((v, l)) => (v, 1.0 / l),
                None => (source.variance()?, 1.0),
            };
            Ok(gen_sinusoid(var, frac, n, &mut rng)?.path)
        }
    }
}

fn scalar_predictor(cx: &[f64], alpha: f64, p: usize) -> Result<PredictorFilter> {
    let noise = NoiseModel::WhiteUniform;
    Ok(solve_predictor(&quantized_autocov(cx, alpha, noise, p)?, p)?.with_mean(noise.mean()))
}

/// Largest gain whose design rate `1/2 log2(12 sigma_p^2) + delta` is at most `rate`.
fn alpha_for_rate(cx: &[f64], p: usize, rate: f64, delta: f64) -> Result<f64> {
    let need = |a: f64| -> Result<f64> { Ok(0.5 * (12.0 * scalar_predictor(cx, a, p)?.error_var).log2() + delta) };
    let (mut lo, mut hi) = (1e-6f64, 1e8f64);
    if need(lo)? > rate {
        return Err(invalid(format!(
            "rate {rate} is below the backoff floor {:.3}",
            need(lo)?
        )));
    }
    if need(hi)? <= rate {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if need(mid)? <= rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Ok(lo)
}

fn gain_from_spec(adc: &AdcSpec) -> Option<f64> {
    adc.alpha.or(adc.distortion.map(|d| (1.0 / (12.0 * d)).sqrt()))
}

trait Plan: Sync {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord>;
    fn rate_bits(&self) -> f64;
    fn alpha(&self) -> Option<f64>;
    fn variance(&self) -> f64;
    fn extra(&self, _trials: &[TrialRecord]) -> Vec<(String, f64)> {
        Vec::new()
    }
}

struct TemporalPlan {
    source: ProcessModel,
    input: InputKind,
    cx: Vec<f64>,
    filter: PredictorFilter,
    stream: StreamConfig,
    block_len: usize,
    delta_design: f64,
    bounds: bool,
}

impl TemporalPlan {
    fn new(cfg: &ExperimentConfig, bounds: bool) -> Result<Self> {
        let d = &cfg.design;
        let p = d.p;
        let cx = autocov_from_model(&cfg.source, p.max(2 * d.k) + 1)?;
        let delta = d.delta()?;
        let alpha = match (gain_from_spec(&cfg.adc), cfg.adc.rate_bits) {
            (Some(a), _) => a,
            (None, Some(r)) => alpha_for_rate(&cx, p, r, delta)?,
            (None, None) => {
                return Err(Error::Config(
                    "temporal runs need adc.alpha, adc.distortion or adc.rate_bits".into(),
                ))
            }
        };
        let filter = scalar_predictor(&cx, alpha, p)?;
        let rate = match cfg.adc.rate_bits {
            Some(r) => r,
            None => 0.5 * (12.0 * filter.error_var).log2() + delta,
        };
        let (init, feedback) = if bounds {
            (InitMethod::Genie, Feedback::Genie)
        } else {
            (cfg.adc.init.clone(), cfg.adc.feedback)
        };
        Ok(Self {
            source: cfg.source.clone(),
            input: cfg.input,
            cx,
            delta_design: rate - 0.5 * (12.0 * filter.error_var).log2(),
            filter,
            stream: StreamConfig {
                params: ModAdcParams::new(rate, alpha, cfg.adc.dither)?,
                init,
                feedback,
            },
            block_len: d.block_len,
            bounds,
        })
    }
}

impl Plan for TemporalPlan {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord> {
        let path = gen_input(&self.source, self.input, self.block_len, seed, j)?;
        let mut rng = trial_rng(seed, j, StreamTag::Dither);
        let out = run_stream(path.stream(0), &self.cx, &self.filter, &self.stream, &mut rng)?;
        let mse = out.conditional_mse;
        Ok(TrialRecord {
            trial_id: j,
            block_error: out.block_error || out.init_error,
            overload_count: out.wrong_samples,
            samples: self.block_len - out.init_len,
            conditional_mse: mse,
            snr_db: mse.map(|m| db(self.cx[0], m)),
            rate_bits: self.stream.params.rate_bits,
            ..Default::default()
        })
    }

    fn rate_bits(&self) -> f64 {
        self.stream.params.rate_bits
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.stream.params.alpha)
    }

    fn variance(&self) -> f64 {
        self.cx[0]
    }

    fn extra(&self, _: &[TrialRecord]) -> Vec<(String, f64)> {
        let mut e = vec![
            ("sigma_p_sq".to_string(), self.filter.error_var),
            ("delta".to_string(), self.delta_design),
        ];
        if self.bounds {
            e.push(("overload_bound".to_string(), overload_bound(self.delta_design)));
        }
        e
    }
}

struct SpatialPlan {
    source: ProcessModel,
    sigma: DMatrix<f64>,
    a: IntegerMatrix,
    params: ModAdcParams,
    decoder: SpatialDecoder,
    block_len: usize,
    r_ifsc: f64,
    r_bench: f64,
}

impl SpatialPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let sigma = vector_autocov(&cfg.source, 0)?.remove(0);
        let alpha = gain_from_spec(&cfg.adc)
            .ok_or_else(|| Error::Config("spatial runs need adc.alpha or adc.distortion".into()))?;
        let a = cfg.adc.lattice.find(&if_gram(&sigma, alpha))?;
        let rep = rate_report(&a, &sigma, 1.0 / (12.0 * alpha * alpha))?;
        let rate = match cfg.adc.rate_bits {
            Some(r) => r,
            None => rep.r_ifsc + cfg.design.delta()?,
        };
        Ok(Self {
            source: cfg.source.clone(),
            sigma,
            a,
            params: ModAdcParams::new(rate, alpha, cfg.adc.dither)?,
            decoder: cfg.adc.decoder,
            block_len: cfg.design.block_len,
            r_ifsc: rep.r_ifsc,
            r_bench: rep.r_bench,
        })
    }
}

impl Plan for SpatialPlan {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord> {
        let path = gen_input(&self.source, InputKind::Gaussian, self.block_len, seed, j)?;
        let mut rng = trial_rng(seed, j, StreamTag::Dither);
        let k = path.streams();
        let delta = self.params.modulo_size();
        let alpha = self.params.alpha;
        let ifd = IfDecoder::new(&self.a, self.params.rate_bits)?;
        let clp = match self.decoder {
            SpatialDecoder::Clp => Some(ClpDecoder::new(&self.sigma, alpha, self.params.rate_bits)?),
            SpatialDecoder::IntegerForcing => None,
        };
        let tol = WRONG_FOLD_TOL * delta;
        let mut wrong = 0;
        let mut sq = 0.0;
        for t in 0..path.len() {
            let mut codes = Vec::with_capacity(k);
            let mut v = Vec::with_capacity(k);
            for s in 0..k {
                let (y, vt) = encode_one(path.data[s][t], alpha, delta, self.params.dither, &mut rng);
                codes.push(y);
                v.push(vt);
            }
            let vh = match &clp {
                Some(c) => c.decode(&codes),
                None => ifd.decode(&codes),
            };
            if vh.iter().zip(&v).any(|(a, b)| (a - b).abs() > tol) {
                wrong += 1;
            }
            for s in 0..k {
                sq += ((vh[s] + 0.5) / alpha - path.data[s][t]).powi(2);
            }
        }
        let mse = (wrong == 0).then(|| sq / (path.len() * k) as f64);
        Ok(TrialRecord {
            trial_id: j,
            block_error: wrong > 0,
            overload_count: wrong,
            samples: path.len(),
            conditional_mse: mse,
            snr_db: mse.map(|m| db(self.variance(), m)),
            rate_bits: self.params.rate_bits,
            ..Default::default()
        })
    }

    fn rate_bits(&self) -> f64 {
        self.params.rate_bits
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.params.alpha)
    }

    fn variance(&self) -> f64 {
        self.sigma.trace() / self.sigma.nrows() as f64
    }

    fn extra(&self, _: &[TrialRecord]) -> Vec<(String, f64)> {
        vec![
            ("R_IFSC".to_string(), self.r_ifsc),
            ("R_bench".to_string(), self.r_bench),
        ]
    }
}

struct SpaceTimePlan {
    source: ProcessModel,
    blocks_x: Vec<DMatrix<f64>>,
    design: SpaceTimeDesign,
    params: ModAdcParams,
    init: VectorInit,
    feedback: Feedback,
    block_len: usize,
    rates: crate::spacetime::RatePoint,
}

impl SpaceTimePlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let p = cfg.design.p;
        let blocks_x = vector_autocov(&cfg.source, p.max(SLB_ORDER) + 1)?;
        let alpha = gain_from_spec(&cfg.adc)
            .ok_or_else(|| Error::Config("spacetime runs need adc.alpha or adc.distortion".into()))?;
        let design = st_design(&quantized_blocks(&blocks_x[..=p], alpha), p, cfg.adc.lattice)?;
        let rate = match cfg.adc.rate_bits {
            Some(r) => r,
            None => design.rate_st + cfg.design.delta()?,
        };
        let init = match &cfg.adc.init {
            InitMethod::Genie => VectorInit::Genie,
            InitMethod::RampAlpha { backoff_bits, .. } => VectorInit::RampAlpha {
                backoff_bits: *backoff_bits,
            },
            InitMethod::BlockIf { .. } => {
                return Err(Error::Config(
                    "spacetime supports genie and ramp_alpha initialization".into(),
                ))
            }
        };
        let rates = rate_point(&blocks_x, p, 1.0 / (12.0 * alpha * alpha), cfg.adc.lattice)?;
        Ok(Self {
            source: cfg.source.clone(),
            blocks_x,
            design,
            params: ModAdcParams::new(rate, alpha, cfg.adc.dither)?,
            init,
            feedback: cfg.adc.feedback,
            block_len: cfg.design.block_len,
            rates,
        })
    }
}

impl Plan for SpaceTimePlan {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord> {
        let path = gen_input(&self.source, InputKind::Gaussian, self.block_len, seed, j)?;
        let mut rng = trial_rng(seed, j, StreamTag::Dither);
        let out = run_vector_stream(
            &path,
            &self.blocks_x,
            &self.design,
            &self.params,
            &self.init,
            self.feedback,
            &mut rng,
        )?;
        let mse = out.conditional_mse;
        Ok(TrialRecord {
            trial_id: j,
            block_error: out.block_error || out.init_error,
            overload_count: out.wrong_steps,
            samples: self.block_len - out.init_len,
            conditional_mse: mse,
            snr_db: mse.map(|m| db(self.variance(), m)),
            rate_bits: self.params.rate_bits,
            ..Default::default()
        })
    }

    fn rate_bits(&self) -> f64 {
        self.params.rate_bits
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.params.alpha)
    }

    fn variance(&self) -> f64 {
        self.blocks_x[0].trace() / self.blocks_x[0].nrows() as f64
    }

    fn extra(&self, _: &[TrialRecord]) -> Vec<(String, f64)> {
        vec![
            ("D".to_string(), self.rates.distortion),
            ("R_SLB".to_string(), self.rates.r_slb),
            ("R_ST_IFSC".to_string(), self.rates.r_st),
            ("R_naive".to_string(), self.rates.r_naive),
            ("gap_limit".to_string(), self.rates.gap_limit),
        ]
    }
}

struct OversampledPlan {
    source: ProcessModel,
    input: InputKind,
    cfg: OversampledConfig,
    delta: f64,
    sigma_delta: Option<SigmaDeltaConfig>,
}

impl OversampledPlan {
    fn new(cfg: &ExperimentConfig, compare: bool) -> Result<Self> {
        let (var, l) = band_params(&cfg.source)
            .ok_or_else(|| Error::Config("oversampled runs need a band-limited source".into()))?;
        let delta = cfg.design.delta()?;
        let mut oc = match (gain_from_spec(&cfg.adc), cfg.adc.rate_bits) {
            (None, Some(r)) => OversampledConfig::from_rate(l, var, r, delta)?,
            (Some(a), r) => {
                let rate = r.unwrap_or(delta + 0.5 * (1.0 + 12.0 * a * a * l * var).log2() / l);
                let mut c = OversampledConfig::from_rate(l, var, rate, 0.0)?;
                c.alpha = a;
                c
            }
            (None, None) => {
                return Err(Error::Config(
                    "oversampled runs need adc.rate_bits, adc.alpha or adc.distortion".into(),
                ))
            }
        };
        oc.p = cfg.design.p;
        oc.smoother_halfwidth = cfg.design.k;
        oc.block_len = cfg.design.block_len;
        oc.init = cfg.adc.init.clone();
        oc.dither = cfg.adc.dither;
        oc.validate()?;
        let sigma_delta = if compare {
            Some(SigmaDeltaConfig::optimal(l, var, oc.rate_bits, delta)?)
        } else {
            None
        };
        Ok(Self {
            source: cfg.source.clone(),
            input: cfg.input,
            delta: oc.implied_backoff(),
            cfg: oc,
            sigma_delta,
        })
    }
}

impl Plan for OversampledPlan {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord> {
        let path = gen_input(&self.source, self.input, self.cfg.block_len, seed, j)?;
        let mut rng = trial_rng(seed, j, StreamTag::Dither);
        let out = run_oversampled(&path, &self.cfg, &mut rng)?;
        let mut rec = TrialRecord {
            trial_id: j,
            block_error: out.block_error,
            overload_count: out.wrong_samples,
            samples: self.cfg.block_len,
            conditional_mse: out.conditional_mse,
            snr_db: out.snr_db,
            rate_bits: self.cfg.rate_bits,
            ..Default::default()
        };
        if let Some(sd) = &self.sigma_delta {
            let mut rng = trial_rng(seed, j, StreamTag::Noise);
            let b = run_sigma_delta(&path, sd, &mut rng)?;
            rec.baseline_mse = b.conditional_mse;
            rec.baseline_noise = Some(b.inband_noise);
            rec.baseline_overloads = b.overloads;
        }
        Ok(rec)
    }

    fn rate_bits(&self) -> f64 {
        self.cfg.rate_bits
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.cfg.alpha)
    }

    fn variance(&self) -> f64 {
        self.cfg.sigma_sq
    }

    fn extra(&self, trials: &[TrialRecord]) -> Vec<(String, f64)> {
        let mut e = vec![
            ("R_minus_delta".to_string(), self.cfg.rate_bits - self.delta),
            (
                "snr_db_modadc_theory".to_string(),
                10.0 * self.cfg.theoretical_snr().log10(),
            ),
        ];
        if let Some(sd) = &self.sigma_delta {
            let ok: Vec<&TrialRecord> = trials
                .iter()
                .filter(|t| t.failure.is_none() && t.baseline_overloads == 0)
                .collect();
            let n = ok.len().max(1) as f64;
            let mse = ok.iter().filter_map(|t| t.baseline_mse).sum::<f64>() / n;
            let noise = ok.iter().filter_map(|t| t.baseline_noise).sum::<f64>() / n;
            let overloads: usize = trials.iter().map(|t| t.baseline_overloads).sum();
            e.push(("snr_db_sigmadelta".to_string(), db(self.cfg.sigma_sq, mse)));
            e.push(("snr_db_sigmadelta_theory".to_string(), sd.theoretical_snr_db()));
            e.push(("sigmadelta_inband_noise".to_string(), noise));
            e.push((
                "sigmadelta_inband_noise_theory".to_string(),
                sd.theoretical_inband_noise(),
            ));
            e.push(("sigmadelta_overloads".to_string(), overloads as f64));
            e.push(("shaping_tap".to_string(), sd.shaping_tap));
        }
        e
    }
}

struct RingPlan {
    source: ProcessModel,
    input: InputKind,
    profile: RingOscProfile,
    bundle: RingOscBundle,
    block_len: usize,
    sigma_sq: f64,
    search_pe: Option<f64>,
}

impl RingPlan {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let ring = cfg.ring.as_ref().expect("validated");
        let curve = match &ring.f_curve_csv {
            Some(p) => FCurve::load_csv(p)?,
            None => crate::ringosc::default_f_curve(),
        };
        let profile = RingOscProfile::new(
            ring.n_inverters,
            curve,
            ring.sample_period.unwrap_or(DEFAULT_SAMPLE_PERIOD),
        )?;
        let design = RingOscDesign {
            p: cfg.design.p,
            k: cfg.design.k,
            block_len: cfg.design.block_len,
            eps: cfg.design.eps,
            blocks: ring.search_blocks,
            verify_top: ring.verify_top,
            noise: ring.noise,
        };
        let cx = autocov_from_model(&cfg.source, design.p.max(2 * design.k))?;
        let (bundle, search_pe) = match (ring.a, ring.b) {
            (Some(a), Some(b)) => {
                let fe = AffineFrontend::new(a, b, cx[0].sqrt());
                (
                    design_bundle(&cx, &profile, fe, design.p, design.k, design.noise)?,
                    None,
                )
            }
            (None, None) => {
                let seed = derive_seed(cfg.master_seed, 0, StreamTag::Design);
                let out = search_ab(&cfg.source, &profile, &design, &ring.grid, seed)?;
                (out.bundle, out.selected.pe)
            }
            _ => return Err(Error::Config("give both ring.a and ring.b, or neither".into())),
        };
        Ok(Self {
            source: cfg.source.clone(),
            input: cfg.input,
            profile,
            bundle,
            block_len: cfg.design.block_len,
            sigma_sq: cx[0],
            search_pe,
        })
    }
}

impl Plan for RingPlan {
    fn trial(&self, seed: u64, j: u64) -> Result<TrialRecord> {
        use rand::Rng;
        let path = gen_input(&self.source, self.input, self.block_len, seed, j)?;
        let phase = trial_rng(seed, j, StreamTag::Init).random::<f64>();
        let out = run_ringosc_block(path.stream(0), &self.profile, &self.bundle, phase)?;
        let mse = out.conditional_mse;
        Ok(TrialRecord {
            trial_id: j,
            block_error: out.block_error,
            overload_count: out.wrong_samples,
            samples: self.block_len - self.bundle.predictor.order(),
            conditional_mse: mse,
            snr_db: mse.map(|m| db(self.sigma_sq, m)),
            rate_bits: self.profile.rate_bits(),
            clip_events: out.input_clips + out.domain_clips,
            ..Default::default()
        })
    }

    fn rate_bits(&self) -> f64 {
        self.profile.rate_bits()
    }

    fn alpha(&self) -> Option<f64> {
        Some(self.bundle.gain)
    }

    fn variance(&self) -> f64 {
        self.sigma_sq
    }

    fn extra(&self, trials: &[TrialRecord]) -> Vec<(String, f64)> {
        let clips: usize = trials.iter().map(|t| t.clip_events).sum();
        let mut e = vec![
            ("N".to_string(), self.profile.n_inverters as f64),
            ("a".to_string(), self.bundle.frontend.a),
            ("b".to_string(), self.bundle.frontend.b),
            ("delta_eff".to_string(), self.bundle.delta_eff),
            (
                "expected_snr_db".to_string(),
                db(self.sigma_sq, self.bundle.smoother.expected_mse),
            ),
            ("clip_events".to_string(), clips as f64),
        ];
        if let Some(pe) = self.search_pe {
            e.push(("search_pe".to_string(), pe));
        }
        e
    }
}

fn make_plan(cfg: &ExperimentConfig) -> Result<Box<dyn Plan>> {
    Ok(match cfg.experiment {
        ExperimentKind::Temporal => Box::new(TemporalPlan::new(cfg, false)?),
        ExperimentKind::BoundsCheck => Box::new(TemporalPlan::new(cfg, true)?),
        ExperimentKind::Spatial => Box::new(SpatialPlan::new(cfg)?),
        ExperimentKind::Spacetime => Box::new(SpaceTimePlan::new(cfg)?),
        ExperimentKind::Oversampled => Box::new(OversampledPlan::new(cfg, false)?),
        ExperimentKind::SigmaDeltaCompare => Box::new(OversampledPlan::new(cfg, true)?),
        ExperimentKind::Ringosc => Box::new(RingPlan::new(cfg)?),
    })
}

fn summarize(cfg: &ExperimentConfig, plan: &dyn Plan, trials: &[TrialRecord]) -> Summary {
    let ok: Vec<&TrialRecord> = trials.iter().filter(|t| t.failure.is_none()).collect();
    let n = ok.len();
    let errors = ok.iter().filter(|t| t.block_error).count();
    let (pe_lo, pe_hi) = wilson_interval(errors, n, WILSON_Z);
    let mses: Vec<f64> = ok.iter().filter_map(|t| t.conditional_mse).collect();
    let (mean_mse, se_mse) = if mses.is_empty() {
        (None, None)
    } else {
        let m = mses.iter().sum::<f64>() / mses.len() as f64;
        let se = if mses.len() > 1 {
            let v = mses.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (mses.len() - 1) as f64;
            (v / mses.len() as f64).sqrt()
        } else {
            0.0
        };
        (Some(m), Some(se))
    };
    Summary {
        experiment: cfg.experiment,
        input: cfg.input,
        trials: trials.len(),
        failed_trials: trials.len() - n,
        block_errors: errors,
        pe_hat: if n > 0 { errors as f64 / n as f64 } else { 0.0 },
        pe_lo,
        pe_hi,
        overloads: ok.iter().map(|t| t.overload_count).sum(),
        samples: ok.iter().map(|t| t.samples).sum(),
        mean_mse,
        se_mse,
        snr_db: mean_mse.map(|m| db(plan.variance(), m)),
        rate_bits: plan.rate_bits(),
        alpha: plan.alpha(),
        extra: plan.extra(trials),
    }
}

/// Run every trial of `cfg` and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let plan = make_plan(cfg)?;
    let seed = cfg.master_seed;
    let runs: Vec<(TrialRecord, f64)> = (0..cfg.trials as u64)
        .into_par_iter()
        .map(|j| {
            let t0 = Instant::now();
            let rec = plan.trial(seed, j).unwrap_or_else(|e| TrialRecord {
                trial_id: j,
                failure: Some(e.to_string()),
                ..Default::default()
            });
            (rec, t0.elapsed().as_secs_f64() * 1e3)
        })
        .collect();
    let (trials, wall_time_ms): (Vec<TrialRecord>, Vec<f64>) = runs.into_iter().unzip();
    let summary = summarize(cfg, plan.as_ref(), &trials);
    Ok(ExperimentResult {
        summary,
        trials,
        wall_time_ms,
    })
}

pub fn write_trials_csv<W: Write>(trials: &[TrialRecord], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "trial_id",
        "failure",
        "block_error",
        "overload_count",
        "samples",
        "conditional_mse",
        "snr_db",
        "rate_bits",
        "baseline_mse",
        "baseline_noise",
        "baseline_overloads",
        "clip_events",
    ])?;
    for t in trials {
        w.write_record([
            t.trial_id.to_string(),
            t.failure.clone().unwrap_or_default(),
            t.block_error.to_string(),
            t.overload_count.to_string(),
            t.samples.to_string(),
            opt(t.conditional_mse),
            opt(t.snr_db),
            t.rate_bits.to_string(),
            opt(t.baseline_mse),
            opt(t.baseline_noise),
            t.baseline_overloads.to_string(),
            t.clip_events.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(summaries: &[Summary], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    if let Some(first) = summaries.first() {
        w.write_record(first.header())?;
    }
    for s in summaries {
        w.write_record(s.record())?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing_csv<W: Write>(trials: &[TrialRecord], wall: &[f64], mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["trial_id", "wall_time_ms"])?;
    for (t, ms) in trials.iter().zip(wall) {
        w.write_record([t.trial_id.to_string(), format!("{ms:.3}")])?;
    }
    w.flush()?;
    Ok(())
}

/// `trials.csv`, `summary.csv` and `timing.csv` under `dir`. Only the timing
/// file varies between identical runs.
pub fn write_outputs(result: &ExperimentResult, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trials_csv(&result.trials, fs::File::create(dir.join("trials.csv"))?)?;
    write_summary_csv(
        std::slice::from_ref(&result.summary),
        fs::File::create(dir.join("summary.csv"))?,
    )?;
    write_timing_csv(
        &result.trials,
        &result.wall_time_ms,
        fs::File::create(dir.join("timing.csv"))?,
    )?;
    Ok(())
}

/// Short axis names for sweeps.
pub fn resolve_axis(axis: &str) -> &str {
    match axis {
        "R" => "adc.rate_bits",
        "D" => "adc.distortion",
        "alpha" => "adc.alpha",
        "N" => "ring.n_inverters",
        "delta" => "design.delta",
        other => other,
    }
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad axis path {path:?}")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("axis {path:?} crosses a non-table value")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::Config(format!("axis {path:?} crosses a non-table value")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parse one sweep value; bare words become strings.
pub fn parse_axis_value(s: &str) -> toml::Value {
    let doc = format!("v = {s}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(s.to_string())),
        Err(_) => toml::Value::String(s.to_string()),
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: String,
    pub values: Vec<toml::Value>,
    pub results: Vec<ExperimentResult>,
}

impl SweepResult {
    pub fn summaries(&self) -> Vec<&Summary> {
        self.results.iter().map(|r| &r.summary).collect()
    }
}

/// Run `base` once per value of `axis`.
pub fn sweep(base: &toml::Value, axis: &str, values: &[toml::Value]) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let path = resolve_axis(axis).to_string();
    let mut results = Vec::with_capacity(values.len());
    for v in values {
        let mut doc = base.clone();
        set_path(&mut doc, &path, v.clone())?;
        let cfg = ExperimentConfig::from_value(doc)?;
        results.push(run_experiment(&cfg)?);
    }
    Ok(SweepResult {
        axis: path,
        values: values.to_vec(),
        results,
    })
}

fn value_string(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per axis value, keyed by the axis in the first column.
pub fn write_sweep_csv<W: Write>(sweep: &SweepResult, mut out: W) -> Result<()> {
    writeln!(out, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = sweep.results.first() else {
        return Ok(());
    };
    let mut header = vec![sweep.axis.clone()];
    header.extend(first.summary.header());
    w.write_record(&header)?;
    for (v, r) in sweep.values.iter().zip(&sweep.results) {
        let mut rec = vec![value_string(v)];
        rec.extend(r.summary.record());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
