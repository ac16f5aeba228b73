//! Ring-oscillator modulo ADC.
//!
//! A closed loop of `N` (odd) inverters advances one transition at a time at
//! rate `f(V_in)`. Sampling the ring state every `T_s` seconds and differencing
//! gives `Y_n = [T_s f(a + b X_n) + Z_n - Z_{n-1}] mod 2N`, a modulo ADC with
//! `R = log2(2N)` and MA(1) quantization noise.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::modcore::backoff_for_block;
use crate::predict::{design_smoother, solve_predictor, NoiseModel, PredictorFilter, SmootherFilter, SmootherStats};
use crate::rng::{trial_rng, StreamTag};
use crate::signals::{autocov_from_model, gen_gaussian, ProcessModel};
use crate::temporal::TemporalDecoder;

/// Inputs are clipped to `±CLIP_SIGMAS · sigma` before the frontend.
pub const CLIP_SIGMAS: f64 = 6.0;
pub const MIN_CSV_ROWS: usize = 8;

pub const DEFAULT_F_MAX: f64 = 1.0e9;
pub const DEFAULT_V_TH: f64 = 0.3;
pub const DEFAULT_V_KNEE: f64 = 0.4;
pub const DEFAULT_F_FLOOR: f64 = 1.0e3;
pub const DEFAULT_V_MAX: f64 = 1.2;
const DEFAULT_KNOTS: usize = 121;

/// `T_s` for a 100 kHz band sampled at three times Nyquist.
pub const DEFAULT_SAMPLE_PERIOD: f64 = 1.0 / 6.0e5;

pub const DEFAULT_ORDER: usize = 25;
pub const DEFAULT_SMOOTHER_HALFWIDTH: usize = 22;

/// Monotone cubic (Fritsch-Carlson) interpolant of a tabulated `V -> Hz` curve.
#[derive(Debug, Clone, PartialEq)]
pub struct FCurve {
    volts: Vec<f64>,
    hz: Vec<f64>,
    slopes: Vec<f64>,
}

impl FCurve {
    pub fn from_table(volts: Vec<f64>, hz: Vec<f64>) -> Result<Self> {
        if volts.len() != hz.len() || volts.len() < 2 {
            return Err(invalid("f-curve needs at least two (volts, hz) pairs of equal length"));
        }
        if volts.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("f-curve volts must be strictly increasing"));
        }
        if hz.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(invalid("f-curve frequencies must be positive and finite"));
        }
        let slopes = pchip_slopes(&volts, &hz);
        Ok(Self { volts, hz, slopes })
    }

    /// Two-column CSV with header `volts,hz`; `#` lines are comments.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "volts" || &headers[1] != "hz" {
            return Err(invalid(format!("f-curve header must be `volts,hz`, got {headers:?}")));
        }
        let mut volts = Vec::new();
        let mut hz = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| invalid(format!("bad f-curve entry {s:?}: {e}")))
            };
            volts.push(parse(&rec[0])?);
            hz.push(parse(&rec[1])?);
        }
        if volts.len() < MIN_CSV_ROWS {
            return Err(invalid(format!(
                "f-curve table needs >= {MIN_CSV_ROWS} rows, got {}",
                volts.len()
            )));
        }
        Self::from_table(volts, hz)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["volts", "hz"])?;
        for (v, f) in self.volts.iter().zip(&self.hz) {
            w.write_record([v.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.volts[0], *self.volts.last().unwrap())
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.volts, &self.hz)
    }

    fn segment(&self, v: f64) -> usize {
        let i = self.volts.partition_point(|&k| k <= v);
        i.clamp(1, self.volts.len() - 1) - 1
    }

    /// `f(v)`; `v` is clamped to the domain.
    pub fn eval(&self, v: f64) -> f64 {
        let (lo, hi) = self.domain();
        let v = v.clamp(lo, hi);
        let i = self.segment(v);
        let h = self.volts[i + 1] - self.volts[i];
        let t = (v - self.volts[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        h00 * self.hz[i] + h10 * h * self.slopes[i] + h01 * self.hz[i + 1] + h11 * h * self.slopes[i + 1]
    }

    /// Central-difference derivative.
    pub fn derivative(&self, v: f64) -> f64 {
        let (lo, hi) = self.domain();
        let e = 1e-6 * (hi - lo);
        let a = (v - e).max(lo);
        let b = (v + e).min(hi);
        (self.eval(b) - self.eval(a)) / (b - a)
    }
}

fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let d: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    if n == 2 {
        return vec![d[0], d[0]];
    }
    let mut m = vec![0.0; n];
    for i in 1..n - 1 {
        if d[i - 1] * d[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / d[i - 1] + w2 / d[i]);
        }
    }
    m[0] = pchip_end(h[0], h[1], d[0], d[1]);
    m[n - 1] = pchip_end(h[n - 2], h[n - 3], d[n - 2], d[n - 3]);
    m
}

fn pchip_end(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if m * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && m.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        m
    }
}

/// Synthetic saturating inverter curve
/// `f = f_floor + f_max u^2 / (u^2 + V_k^2)`, `u = max(V - V_th, 0)`, on `[0, 1.2]` V.
pub fn default_f_curve() -> FCurve {
    let volts: Vec<f64> = (0..DEFAULT_KNOTS)
        .map(|i| DEFAULT_V_MAX * i as f64 / (DEFAULT_KNOTS - 1) as f64)
        .collect();
    let hz = volts
        .iter()
        .map(|&v| {
            let u = (v - DEFAULT_V_TH).max(0.0);
            DEFAULT_F_FLOOR + DEFAULT_F_MAX * u * u / (u * u + DEFAULT_V_KNEE * DEFAULT_V_KNEE)
        })
        .collect();
    FCurve::from_table(volts, hz).expect("default curve is valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct RingOscProfile {
    pub n_inverters: usize,
    pub f_curve: FCurve,
    pub sample_period: f64,
}

impl RingOscProfile {
    pub fn new(n_inverters: usize, f_curve: FCurve, sample_period: f64) -> Result<Self> {
        let p = Self {
            n_inverters,
            f_curve,
            sample_period,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_default_curve(n_inverters: usize) -> Result<Self> {
        Self::new(n_inverters, default_f_curve(), DEFAULT_SAMPLE_PERIOD)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_inverters < 3 || self.n_inverters % 2 == 0 {
            return Err(invalid(format!(
                "a ring oscillator needs an odd number >= 3 of inverters, got {}",
                self.n_inverters
            )));
        }
        if !(self.sample_period > 0.0 && self.sample_period.is_finite()) {
            return Err(invalid(format!(
                "sample period must be positive, got {}",
                self.sample_period
            )));
        }
        Ok(())
    }

    /// `2N`, the number of distinct ring states.
    pub fn modulus(&self) -> u32 {
        2 * self.n_inverters as u32
    }

    pub fn rate_bits(&self) -> f64 {
        (self.modulus() as f64).log2()
    }
}

/// `V_in = a + b clip(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineFrontend {
    pub a: f64,
    pub b: f64,
    /// Inputs are clipped to `[-clip, clip]`.
    pub clip: f64,
}

impl AffineFrontend {
    pub fn new(a: f64, b: f64, sigma: f64) -> Self {
        Self {
            a,
            b,
            clip: CLIP_SIGMAS * sigma,
        }
    }

    /// Expected events per sample for input `x`, with clip flags.
    fn increment(&self, profile: &RingOscProfile, x: f64) -> (f64, bool, bool) {
        let xc = x.clamp(-self.clip, self.clip);
        let v = self.a + self.b * xc;
        let (lo, hi) = profile.f_curve.domain();
        let domain_clip = v < lo || v > hi;
        (profile.sample_period * profile.f_curve.eval(v), xc != x, domain_clip)
    }

    /// Events per sample as a function of the clipped input, used by the design.
    pub fn events(&self, profile: &RingOscProfile, x: f64) -> f64 {
        self.increment(profile, x).0
    }
}

/// Output of either simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RingOscTrace {
    /// `Y_n` in `0..2N`.
    pub codes: Vec<u32>,
    /// Unfolded counts `V_n = floor(Phi_n) - floor(Phi_{n-1})`.
    pub counts: Vec<i64>,
    /// `Z_n = floor(Phi_n) - Phi_n`.
    pub z: Vec<f64>,
    pub input_clips: usize,
    pub domain_clips: usize,
}

/// Inverter index `I` in `1..=N` and the output bit `B` of inverter 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RingState {
    i: usize,
    b: usize,
}

impl RingState {
    fn start() -> Self {
        Self { i: 1, b: 1 }
    }

    fn q(&self, n: usize) -> usize {
        (self.i - 1) + n * ((self.i + self.b) % 2)
    }

    fn transition(&mut self, n: usize) {
        self.i = self.i % n + 1;
        self.b ^= 1;
    }
}

fn check_phase(initial_phase: f64) -> Result<()> {
    if !(0.0..1.0).contains(&initial_phase) {
        return Err(invalid(format!(
            "initial phase must lie in [0, 1), got {initial_phase}"
        )));
    }
    Ok(())
}

/// Advance the ring one inverter transition at a time.
pub fn simulate_states(
    x: &[f64],
    profile: &RingOscProfile,
    frontend: &AffineFrontend,
    initial_phase: f64,
) -> Result<RingOscTrace> {
    profile.validate()?;
    check_phase(initial_phase)?;
    let n = profile.n_inverters;
    let m = 2 * n;
    let mut state = RingState::start();
    let mut pos = initial_phase;
    let mut trace = RingOscTrace {
        codes: Vec::with_capacity(x.len()),
        counts: Vec::with_capacity(x.len()),
        z: Vec::with_capacity(x.len()),
        input_clips: 0,
        domain_clips: 0,
    };
    for &xn in x {
        let (inc, ic, dc) = frontend.increment(profile, xn);
        trace.input_clips += ic as usize;
        trace.domain_clips += dc as usize;
        let q0 = state.q(n);
        pos += inc;
        let mut events = 0i64;
        while pos >= 1.0 {
            pos -= 1.0;
            state.transition(n);
            events += 1;
        }
        let q1 = state.q(n);
        trace.codes.push(((q1 + m - q0) % m) as u32);
        trace.counts.push(events);
        trace.z.push(-pos);
    }
    Ok(trace)
}

/// Phase accumulator form `Y_n = (floor(Phi_n) - floor(Phi_{n-1})) mod 2N`.
///
/// `Phi` is held as an integer count plus a fraction so that it stays exact
/// for arbitrarily long paths.
pub fn closed_form_output(
    x: &[f64],
    profile: &RingOscProfile,
    frontend: &AffineFrontend,
    initial_phase: f64,
) -> Result<RingOscTrace> {
    profile.validate()?;
    check_phase(initial_phase)?;
    let m = profile.modulus() as i64;
    let mut whole: i64 = 0;
    let mut frac = initial_phase;
    let mut trace = RingOscTrace {
        codes: Vec::with_capacity(x.len()),
        counts: Vec::with_capacity(x.len()),
        z: Vec::with_capacity(x.len()),
        input_clips: 0,
        domain_clips: 0,
    };
    for &xn in x {
        let (inc, ic, dc) = frontend.increment(profile, xn);
        trace.input_clips += ic as usize;
        trace.domain_clips += dc as usize;
        let pos = frac + inc;
        let k = pos.floor();
        frac = pos - k;
        let prev = whole;
        whole += k as i64;
        let v = whole - prev;
        trace.codes.push(v.rem_euclid(m) as u32);
        trace.counts.push(v);
        trace.z.push(-frac);
    }
    Ok(trace)
}

// Gauss-Hermite rule for the standard normal, via Golub-Welsch.
const GH_NODES: usize = 160;
const HERMITE_TERMS: usize = 120;

fn gauss_hermite() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = GH_NODES;
        let mut j = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = (k as f64).sqrt();
            j[(k - 1, k)] = off;
            j[(k, k - 1)] = off;
        }
        let mut nodes: Vec<f64> = SymmetricEigen::new(j).eigenvalues.iter().copied().collect();
        nodes.sort_by(f64::total_cmp);
        // Christoffel weights 1 / sum_k h_k(x)^2; eigenvector components lose
        // the tiny weights of the outer nodes.
        let weights: Vec<f64> = nodes
            .iter()
            .map(|&u| {
                let (mut h_prev, mut h) = (1.0, u);
                let mut s = 1.0 + u * u;
                for k in 1..n - 1 {
                    let next = (u * h - (k as f64).sqrt() * h_prev) / ((k + 1) as f64).sqrt();
                    h_prev = h;
                    h = next;
                    s += h * h;
                }
                1.0 / s
            })
            .collect();
        let total: f64 = weights.iter().sum();
        (nodes, weights.iter().map(|w| w / total).collect())
    })
}

/// `E[g(U)]` for standard normal `U`.
pub fn gaussian_expectation(g: impl Fn(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_hermite();
    nodes.iter().zip(weights).map(|(&u, &w)| w * g(u)).sum()
}

/// Second-order statistics of `g(X)` for a stationary Gaussian `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearStats {
    pub mean: f64,
    /// `Cov(g(X_n), g(X_{n+r}))`, `r = 0..=maxlag`.
    pub autocov: Vec<f64>,
    /// `Cov(X_n, g(X_{n+r}))`, `r = 0..=maxlag`; symmetric in `r`.
    pub cross: Vec<f64>,
}

/// Mehler expansion: with normalized Hermite coefficients `c_k = E[g h_k]`,
/// `Cov(g(X_0), g(X_r)) = sum_k c_k^2 rho_r^k` and `Cov(X_0, g(X_r)) = sigma c_1 rho_r`.
pub fn nonlinear_stats(cx: &[f64], g: impl Fn(f64) -> f64, maxlag: usize) -> Result<NonlinearStats> {
    if cx.len() <= maxlag {
        return Err(invalid(format!(
            "need {} autocovariance lags, got {}",
            maxlag + 1,
            cx.len()
        )));
    }
    if !(cx[0] > 0.0) {
        return Err(invalid("input variance must be positive"));
    }
    let sigma = cx[0].sqrt();
    let (nodes, weights) = gauss_hermite();
    let mut coef = vec![0.0; HERMITE_TERMS + 1];
    let mut mean = 0.0;
    let mut second = 0.0;
    for (&u, &w) in nodes.iter().zip(weights) {
        let gu = g(sigma * u);
        mean += w * gu;
        second += w * gu * gu;
        let (mut h_prev, mut h) = (1.0, u);
        coef[0] += w * gu;
        coef[1] += w * gu * u;
        for k in 1..HERMITE_TERMS {
            let next = (u * h - (k as f64).sqrt() * h_prev) / ((k + 1) as f64).sqrt();
            h_prev = h;
            h = next;
            coef[k + 1] += w * gu * h;
        }
    }
    let var = (second - mean * mean).max(0.0);
    let captured: f64 = coef[1..].iter().map(|c| c * c).sum();
    let tail = (var - captured).max(0.0);
    let autocov = (0..=maxlag)
        .map(|r| {
            if r == 0 {
                return var;
            }
            let rho = (cx[r] / cx[0]).clamp(-1.0, 1.0);
            let mut acc = 0.0;
            let mut pw = 1.0;
            for c in &coef[1..] {
                pw *= rho;
                acc += c * c * pw;
            }
            acc + tail * pw * rho
        })
        .collect();
    let cross = (0..=maxlag).map(|r| cx[r] / sigma * coef[1]).collect();
    Ok(NonlinearStats { mean, autocov, cross })
}

/// Filters and design figures for one `(a, b)`.
#[derive(Debug, Clone)]
pub struct RingOscBundle {
    pub frontend: AffineFrontend,
    pub predictor: PredictorFilter,
    pub smoother: SmootherFilter,
    /// `R - 1/2 log2(12 sigma_p^2)`.
    pub delta_eff: f64,
    /// Linear gain `Cov(X, V) / Var(X)`.
    pub gain: f64,
}

/// Predictor and smoother for `V = T_s f(a + b X) + noise` under the Gaussian
/// input model with autocovariance `cx`.
pub fn design_bundle(
    cx: &[f64],
    profile: &RingOscProfile,
    frontend: AffineFrontend,
    p: usize,
    k: usize,
    noise: NoiseModel,
) -> Result<RingOscBundle> {
    let maxlag = p.max(2 * k);
    let st = nonlinear_stats(cx, |x| frontend.events(profile, x), maxlag)?;
    let cv: Vec<f64> = st
        .autocov
        .iter()
        .enumerate()
        .map(|(r, c)| c + noise.autocov(r))
        .collect();
    let mean_v = st.mean + noise.mean();
    let predictor = solve_predictor(&cv, p)?.with_mean(mean_v);
    let cross = (-(k as i64)..=k as i64)
        .map(|j| st.cross[j.unsigned_abs() as usize])
        .collect();
    let stats = SmootherStats {
        var_x: cx[0],
        cross,
        v_autocov: cv[..=2 * k].to_vec(),
        mean_v,
    };
    let smoother = design_smoother(&stats, k)?;
    let delta_eff = profile.rate_bits() - 0.5 * (12.0 * predictor.error_var).log2();
    Ok(RingOscBundle {
        frontend,
        predictor,
        smoother,
        delta_eff,
        gain: st.cross[0] / cx[0],
    })
}

#[derive(Debug, Clone)]
pub struct RingOscDecoded {
    pub v_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// Temporal decode with modulus `2N`, then smooth.
///
/// `init_counts` are the first `p` true counts, oldest first; those samples
/// are taken as known.
pub fn ringosc_decode(
    codes: &[u32],
    profile: &RingOscProfile,
    bundle: &RingOscBundle,
    init_counts: &[i64],
) -> Result<RingOscDecoded> {
    let p = bundle.predictor.order();
    if init_counts.len() < p || codes.len() < p {
        return Err(invalid(format!("need {p} initial counts and codes")));
    }
    let mut dec = TemporalDecoder::new(&bundle.predictor, profile.modulus() as f64, 1.0)?;
    let init: Vec<f64> = init_counts[..p].iter().map(|&v| v as f64).collect();
    dec.init(&init)?;
    let mut v_hat = init;
    v_hat.reserve(codes.len() - p);
    for &y in &codes[p..] {
        v_hat.push(dec.decode_step(y as f64)?.0);
    }
    let x_hat = bundle.smoother.apply(&v_hat);
    Ok(RingOscDecoded { v_hat, x_hat })
}

#[derive(Debug, Clone)]
pub struct RingOscOutcome {
    pub block_error: bool,
    pub wrong_samples: usize,
    pub first_error: Option<usize>,
    pub input_clips: usize,
    pub domain_clips: usize,
    /// Over `[k, T - k)` where the whole smoother window is inside the block;
    /// only for error-free blocks.
    pub conditional_mse: Option<f64>,
    pub x_hat: Vec<f64>,
}

/// Encode one block through the ring, decode it and score it.
pub fn run_ringosc_block(
    x: &[f64],
    profile: &RingOscProfile,
    bundle: &RingOscBundle,
    initial_phase: f64,
) -> Result<RingOscOutcome> {
    let trace = closed_form_output(x, profile, &bundle.frontend, initial_phase)?;
    let dec = ringosc_decode(&trace.codes, profile, bundle, &trace.counts)?;
    let mut wrong = 0;
    let mut first_error = None;
    for (t, (vh, &v)) in dec.v_hat.iter().zip(&trace.counts).enumerate() {
        if (vh - v as f64).abs() > 0.5 {
            wrong += 1;
            first_error.get_or_insert(t);
        }
    }
    let k = bundle.smoother.half_width;
    let conditional_mse = (wrong == 0 && x.len() > 2 * k).then(|| {
        let s: f64 = (k..x.len() - k).map(|t| (dec.x_hat[t] - x[t]).powi(2)).sum();
        s / (x.len() - 2 * k) as f64
    });
    Ok(RingOscOutcome {
        block_error: wrong > 0,
        wrong_samples: wrong,
        first_error,
        input_clips: trace.input_clips,
        domain_clips: trace.domain_clips,
        conditional_mse,
        x_hat: dec.x_hat,
    })
}

/// Design parameters of the operating-point search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RingOscDesign {
    pub p: usize,
    pub k: usize,
    pub block_len: usize,
    pub eps: f64,
    /// Monte Carlo blocks per verified candidate.
    pub blocks: usize,
    /// Candidates verified by simulation per stage, in order of predicted MSE.
    pub verify_top: usize,
    pub noise: NoiseModel,
}

impl Default for RingOscDesign {
    fn default() -> Self {
        Self {
            p: DEFAULT_ORDER,
            k: DEFAULT_SMOOTHER_HALFWIDTH,
            block_len: 1 << 11,
            eps: 1e-3,
            blocks: 1000,
            verify_top: 4,
            noise: NoiseModel::Ma1Uniform,
        }
    }
}

/// `(a, b)` candidate grid, linear in `a` and log-spaced in `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbGrid {
    pub a_min: f64,
    pub a_max: f64,
    pub a_points: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub b_points: usize,
    pub refine: bool,
}

impl Default for AbGrid {
    fn default() -> Self {
        Self {
            a_min: 0.35,
            a_max: 1.1,
            a_points: 16,
            b_min: 1e-4,
            b_max: 0.2,
            b_points: 24,
            refine: true,
        }
    }
}

impl AbGrid {
    fn validate(&self) -> Result<()> {
        if self.a_points < 1 || self.b_points < 2 {
            return Err(invalid("grid needs >= 1 a point and >= 2 b points"));
        }
        if !(self.a_max >= self.a_min && self.b_min > 0.0 && self.b_max > self.b_min) {
            return Err(invalid("grid bounds must satisfy a_min <= a_max and 0 < b_min < b_max"));
        }
        Ok(())
    }

    fn a_values(&self) -> Vec<f64> {
        if self.a_points == 1 {
            return vec![self.a_min];
        }
        (0..self.a_points)
            .map(|i| self.a_min + (self.a_max - self.a_min) * i as f64 / (self.a_points - 1) as f64)
            .collect()
    }

    fn b_values(&self) -> Vec<f64> {
        let r = (self.b_max / self.b_min).ln();
        (0..self.b_points)
            .map(|i| self.b_min * (r * i as f64 / (self.b_points - 1) as f64).exp())
            .collect()
    }
}

/// One evaluated `(a, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub a: f64,
    pub b: f64,
    pub delta_eff: f64,
    pub expected_mse: f64,
    /// Passes the model-based backoff screen.
    pub screened: bool,
    /// Monte Carlo block error rate, if simulated.
    pub pe: Option<f64>,
    /// Mean conditional MSE over error-free blocks, if simulated.
    pub mse: Option<f64>,
}

impl Candidate {
    pub fn feasible(&self, eps: f64) -> bool {
        matches!((self.pe, self.mse), (Some(pe), Some(_)) if pe < eps)
    }
}

/// Index of the feasible candidate with the smallest measured MSE.
pub fn select_operating_point(candidates: &[Candidate], eps: f64) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible(eps))
        .min_by(|x, y| x.1.mse.unwrap().total_cmp(&y.1.mse.unwrap()))
        .map(|(i, _)| i)
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub bundle: RingOscBundle,
    pub selected: Candidate,
    pub candidates: Vec<Candidate>,
}

/// Monte Carlo `(P_e, conditional MSE)` of one bundle over `blocks` Gaussian
/// blocks. Stops at the first chunk after which `P_e < eps` is impossible.
pub fn simulate_bundle(
    model: &ProcessModel,
    profile: &RingOscProfile,
    bundle: &RingOscBundle,
    design: &RingOscDesign,
    master_seed: u64,
) -> Result<(f64, Option<f64>)> {
    const CHUNK: usize = 64;
    let limit = (design.eps * design.blocks as f64).ceil().max(1.0) as usize;
    let mut errors = 0;
    let mut done = 0;
    let mut mse_sum = 0.0;
    let mut mse_n = 0usize;
    while done < design.blocks {
        let end = (done + CHUNK).min(design.blocks);
        let res: Vec<Result<RingOscOutcome>> = (done..end)
            .into_par_iter()
            .map(|j| {
                let mut rng = trial_rng(master_seed, j as u64, StreamTag::Source);
                let path = gen_gaussian(model, design.block_len, &mut rng)?;
                let phase = trial_rng(master_seed, j as u64, StreamTag::Init).random::<f64>();
                run_ringosc_block(path.stream(0), profile, bundle, phase)
            })
            .collect();
        for r in res {
            let out = r?;
            errors += out.block_error as usize;
            if let Some(m) = out.conditional_mse {
                mse_sum += m;
                mse_n += 1;
            }
        }
        done = end;
        if errors >= limit {
            break;
        }
    }
    let pe = errors as f64 / done as f64;
    Ok((pe, (mse_n > 0).then(|| mse_sum / mse_n as f64)))
}

/// Search `(a, b)` for the smallest-MSE point with `P_e < eps`.
///
/// Every grid point gets model-based filters; points whose backoff falls short
/// of the union-bound requirement are screened out; the `verify_top` best by
/// predicted MSE are simulated. With `refine`, a grid at a quarter of the `a`
/// step and an eighth of the `b` step around the winner, plus eighth steps past
/// the screen boundary at every coarse `a`, is searched the same way.
pub fn search_ab(
    model: &ProcessModel,
    profile: &RingOscProfile,
    design: &RingOscDesign,
    grid: &AbGrid,
    master_seed: u64,
) -> Result<SearchOutcome> {
    grid.validate()?;
    profile.validate()?;
    if model.streams() != 1 {
        return Err(invalid("ring-oscillator search needs a scalar source"));
    }
    let cx = autocov_from_model(model, design.p.max(2 * design.k))?;
    let sigma = cx[0].sqrt();
    let delta_req = backoff_for_block(design.block_len as u64, design.eps)?;

    let mut candidates = Vec::new();
    let mut bundles = Vec::new();
    let a_vals = grid.a_values();
    let b_vals = grid.b_values();
    let points: Vec<(f64, f64)> = a_vals
        .iter()
        .flat_map(|&a| b_vals.iter().map(move |&b| (a, b)))
        .collect();
    evaluate_stage(
        &points,
        &cx,
        sigma,
        delta_req,
        model,
        profile,
        design,
        master_seed,
        &mut candidates,
        &mut bundles,
    )?;

    if grid.refine {
        if let Some(best) = select_operating_point(&candidates, design.eps) {
            let (a0, b0) = (candidates[best].a, candidates[best].b);
            let da = if a_vals.len() > 1 { a_vals[1] - a_vals[0] } else { 0.0 };
            let rb = (b_vals[1] / b_vals[0]).ln();
            let mut fine = Vec::new();
            for i in -2i32..=2 {
                for j in -8i32..=8 {
                    if i == 0 && j == 0 {
                        continue;
                    }
                    fine.push((a0 + da * i as f64 / 4.0, b0 * (rb * j as f64 / 8.0).exp()));
                }
            }
            // The screen boundary in b at every coarse a.
            for &a in &a_vals {
                let edge = candidates
                    .iter()
                    .filter(|c| c.a == a && c.screened)
                    .map(|c| c.b)
                    .fold(f64::NAN, f64::max);
                if edge.is_finite() {
                    fine.extend((1..8).map(|j| (a, edge * (rb * j as f64 / 8.0).exp())));
                }
            }
            evaluate_stage(
                &fine,
                &cx,
                sigma,
                delta_req,
                model,
                profile,
                design,
                master_seed,
                &mut candidates,
                &mut bundles,
            )?;
        }
    }

    match select_operating_point(&candidates, design.eps) {
        Some(i) => {
            let bundle = bundles[i].clone().expect("simulated candidates carry a bundle");
            Ok(SearchOutcome {
                bundle,
                selected: candidates[i].clone(),
                candidates,
            })
        }
        None => {
            let best = candidates
                .iter()
                .filter(|c| c.pe.is_some())
                .min_by(|x, y| x.pe.unwrap().total_cmp(&y.pe.unwrap()));
            Err(Error::Infeasible(match best {
                Some(c) => format!(
                    "N = {}: best candidate a = {:.4}, b = {:.5} has P_e = {:.4} >= {}",
                    profile.n_inverters,
                    c.a,
                    c.b,
                    c.pe.unwrap(),
                    design.eps
                ),
                None => format!(
                    "N = {}: no grid point meets the {delta_req:.3}-bit backoff screen",
                    profile.n_inverters
                ),
            }))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn evaluate_stage(
    points: &[(f64, f64)],
    cx: &[f64],
    sigma: f64,
    delta_req: f64,
    model: &ProcessModel,
    profile: &RingOscProfile,
    design: &RingOscDesign,
    master_seed: u64,
    candidates: &mut Vec<Candidate>,
    bundles: &mut Vec<Option<RingOscBundle>>,
) -> Result<()> {
    let designed: Vec<Option<RingOscBundle>> = points
        .par_iter()
        .map(|&(a, b)| {
            let fe = AffineFrontend::new(a, b, sigma);
            design_bundle(cx, profile, fe, design.p, design.k, design.noise).ok()
        })
        .collect();
    let start = candidates.len();
    for (&(a, b), d) in points.iter().zip(&designed) {
        let (delta_eff, expected_mse) = d.as_ref().map_or((f64::NEG_INFINITY, f64::INFINITY), |d| {
            (d.delta_eff, d.smoother.expected_mse)
        });
        candidates.push(Candidate {
            a,
            b,
            delta_eff,
            expected_mse,
            screened: delta_eff >= delta_req,
            pe: None,
            mse: None,
        });
    }
    bundles.extend(designed);
    let mut order: Vec<usize> = (start..candidates.len()).filter(|&i| candidates[i].screened).collect();
    order.sort_by(|&i, &j| candidates[i].expected_mse.total_cmp(&candidates[j].expected_mse));
    for &i in order.iter().take(design.verify_top) {
        let bundle = bundles[i].as_ref().unwrap();
        let (pe, mse) = simulate_bundle(model, profile, bundle, design, master_seed)?;
        candidates[i].pe = Some(pe);
        candidates[i].mse = mse;
    }
    Ok(())
}

/// One row of the SNR-vs-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RingOscRow {
    pub n_inverters: usize,
    pub rate_bits: f64,
    pub a: f64,
    pub b: f64,
    pub pe: f64,
    pub snr_db: f64,
    pub input_kind: String,
}

pub fn write_ringosc_rows<W: Write>(rows: &[RingOscRow], mut out: W) -> Result<()> {
    writeln!(out, "# schema=1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["N", "R", "a", "b", "P_e", "snr_db", "input_kind"])?;
    for r in rows {
        w.write_record([
            r.n_inverters.to_string(),
            r.rate_bits.to_string(),
            r.a.to_string(),
            r.b.to_string(),
            r.pe.to_string(),
            r.snr_db.to_string(),
            r.input_kind.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn constant_profile(n: usize, events: f64) -> (RingOscProfile, AffineFrontend) {
        let volts: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let hz = vec![events; 8];
        let curve = FCurve::from_table(volts, hz).unwrap();
        (
            RingOscProfile::new(n, curve, 1.0).unwrap(),
            AffineFrontend::new(1.0, 0.0, 1.0),
        )
    }

    #[test]
    fn hand_example() {
        let (p, fe) = constant_profile(5, 3.7);
        let x = vec![0.0; 6];
        let a = simulate_states(&x, &p, &fe, 0.0).unwrap();
        let b = closed_form_output(&x, &p, &fe, 0.0).unwrap();
        assert_eq!(a.codes, vec![3, 4, 4, 3, 4, 4]);
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn integer_rate() {
        let (p, fe) = constant_profile(5, 4.0);
        let t = closed_form_output(&vec![0.0; 20], &p, &fe, 0.0).unwrap();
        assert!(t.codes.iter().all(|&y| y == 4));
        assert!(t.z.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn aliasing() {
        let (p, fe) = constant_profile(3, 13.25);
        let a = simulate_states(&vec![0.0; 8], &p, &fe, 0.0).unwrap();
        let b = closed_form_output(&vec![0.0; 8], &p, &fe, 0.0).unwrap();
        assert_eq!(a, b);
        for (y, v) in a.codes.iter().zip(&a.counts) {
            assert!(*v >= 13);
            assert_eq!(*y as i64, v.rem_euclid(6));
        }
    }

    #[test]
    fn state_cycle() {
        let n = 7;
        let mut s = RingState::start();
        for q in 0..4 * n {
            assert_eq!(s.q(n), q % (2 * n));
            s.transition(n);
        }
    }

    #[test]
    fn even_ring_rejected() {
        assert!(RingOscProfile::with_default_curve(8).is_err());
        assert_eq!(RingOscProfile::with_default_curve(9).unwrap().modulus(), 18);
    }

    #[test]
    fn curve_reproduces_knots_and_is_monotone() {
        let c = default_f_curve();
        let (v, f) = c.knots();
        for (a, b) in v.iter().zip(f) {
            assert_eq!(c.eval(*a), *b);
        }
        let mut prev = 0.0;
        for i in 0..=6000 {
            let y = c.eval(1.2 * i as f64 / 6000.0);
            assert!(y >= prev * (1.0 - 1e-12), "{y} < {prev}");
            prev = y;
        }
    }

    #[test]
    fn csv_round_trip() {
        let c = default_f_curve();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let d = FCurve::from_csv(&buf[..]).unwrap();
        let (v, f) = c.knots();
        for (a, b) in v.iter().zip(f) {
            assert_eq!(d.eval(*a), *b);
        }
        let short = "volts,hz\n0,1\n1,2\n";
        assert!(FCurve::from_csv(short.as_bytes()).is_err());
        let bad = "volts,hz\n0,1\n1,2\n2,3\n3,4\n3,5\n5,6\n6,7\n7,8\n";
        assert!(FCurve::from_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn derivative_matches_closed_form() {
        let c = default_f_curve();
        let vk2 = DEFAULT_V_KNEE * DEFAULT_V_KNEE;
        for &v in &[0.45, 0.6, 0.8, 1.0] {
            let u: f64 = v - DEFAULT_V_TH;
            let exact = DEFAULT_F_MAX * 2.0 * u * vk2 / (u * u + vk2).powi(2);
            assert!((c.derivative(v) - exact).abs() < 2e-3 * exact);
        }
    }

    #[test]
    fn dual_models_agree_on_random_inputs() {
        let p = RingOscProfile::with_default_curve(9).unwrap();
        let fe = AffineFrontend::new(0.6, 0.05, 1.0);
        let mut rng = trial_rng(3, 0, StreamTag::Source);
        let x: Vec<f64> = (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let a = simulate_states(&x, &p, &fe, 0.37).unwrap();
        let b = closed_form_output(&x, &p, &fe, 0.37).unwrap();
        assert_eq!(a, b);
        assert!(a.codes.iter().all(|&y| y < 18));
    }

    #[test]
    fn linearized_channel() {
        let p = RingOscProfile::with_default_curve(9).unwrap();
        let (a, b) = (0.55, 2e-4);
        let fe = AffineFrontend::new(a, b, 1.0);
        let ts = p.sample_period;
        let fa = p.f_curve.eval(a);
        let fp = p.f_curve.derivative(a);
        let mut rng = trial_rng(4, 0, StreamTag::Source);
        let x: Vec<f64> = (0..4000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = closed_form_output(&x, &p, &fe, 0.0).unwrap();
        let mut z_prev = 0.0;
        for (n, &xn) in x.iter().enumerate() {
            let lin = ts * fa + ts * b * fp * xn.clamp(-6.0, 6.0) + t.z[n] - z_prev;
            assert!((lin - t.counts[n] as f64).abs() < 0.01, "sample {n}");
            z_prev = t.z[n];
        }
    }

    #[test]
    fn mehler_stats_match_monte_carlo() {
        let model = ProcessModel::FlatBand {
            variance: 1.0,
            oversample_ratio: 3.0,
        };
        let cx = autocov_from_model(&model, 8).unwrap();
        let g = |x: f64| (1.5 * x.clamp(-4.0, 4.0)).tanh() + 0.3 * x * x;
        let st = nonlinear_stats(&cx, g, 4).unwrap();
        let mut rng = trial_rng(5, 0, StreamTag::Source);
        let path = gen_gaussian(&model, 1 << 20, &mut rng).unwrap();
        let x = path.stream(0);
        let gx: Vec<f64> = x.iter().map(|&v| g(v)).collect();
        let n = gx.len();
        let mean = gx.iter().sum::<f64>() / n as f64;
        assert!((st.mean - mean).abs() < 0.01);
        for r in 0..=4 {
            let c: f64 = (0..n - r).map(|t| (gx[t] - mean) * (gx[t + r] - mean)).sum::<f64>() / (n - r) as f64;
            let xc: f64 = (0..n - r).map(|t| x[t] * (gx[t + r] - mean)).sum::<f64>() / (n - r) as f64;
            assert!(
                (st.autocov[r] - c).abs() < 0.02,
                "autocov lag {r}: {} vs {c}",
                st.autocov[r]
            );
            assert!(
                (st.cross[r] - xc).abs() < 0.02,
                "cross lag {r}: {} vs {xc}",
                st.cross[r]
            );
        }
    }

    #[test]
    fn mehler_is_exact_for_linear_g() {
        let cx = vec![2.0, 1.2, 0.4, -0.1];
        let st = nonlinear_stats(&cx, |x| 3.0 * x + 1.0, 3).unwrap();
        for r in 0..4 {
            assert!((st.autocov[r] - 9.0 * cx[r]).abs() < 1e-9);
            assert!((st.cross[r] - 3.0 * cx[r]).abs() < 1e-9);
        }
        assert!((st.mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_decodes_to_constant() {
        let model = ProcessModel::FlatBand {
            variance: 1.0,
            oversample_ratio: 3.0,
        };
        let cx = autocov_from_model(&model, 50).unwrap();
        let p = RingOscProfile::with_default_curve(9).unwrap();
        let bundle = design_bundle(
            &cx,
            &p,
            AffineFrontend::new(0.55, 0.01, 1.0),
            25,
            22,
            NoiseModel::Ma1Uniform,
        )
        .unwrap();
        let c = 0.4;
        let x = vec![c; 600];
        let out = run_ringosc_block(&x, &p, &bundle, 0.2).unwrap();
        assert!(!out.block_error);
        let inner = &out.x_hat[100..500];
        let m = inner.iter().sum::<f64>() / inner.len() as f64;
        let spread = inner.iter().map(|v| (v - m).abs()).fold(0.0, f64::max);
        assert!((m - c).abs() < 0.05 * c, "mean {m}");
        assert!(spread < 0.05, "spread {spread}");
    }

    #[test]
    fn decode_matches_ideal_channel_in_linear_regime() {
        let model = ProcessModel::FlatBand {
            variance: 1.0,
            oversample_ratio: 3.0,
        };
        let cx = autocov_from_model(&model, 50).unwrap();
        let p = RingOscProfile::with_default_curve(9).unwrap();
        let fe = AffineFrontend::new(0.55, 2e-4, 1.0);
        let bundle = design_bundle(&cx, &p, fe, 25, 22, NoiseModel::Ma1Uniform).unwrap();
        let mut rng = trial_rng(6, 0, StreamTag::Source);
        let x = gen_gaussian(&model, 2048, &mut rng).unwrap();
        let x = x.stream(0);
        let t = closed_form_output(x, &p, &fe, 0.0).unwrap();
        // Same Z, linear map in place of f.
        let ts = p.sample_period;
        let (fa, fp) = (p.f_curve.eval(0.55), p.f_curve.derivative(0.55));
        let m = p.modulus() as f64;
        let mut z_prev = 0.0;
        let mut lin = Vec::new();
        for (n, &xn) in x.iter().enumerate() {
            lin.push(ts * fa + ts * 2e-4 * fp * xn + t.z[n] - z_prev);
            z_prev = t.z[n];
        }
        let codes_lin: Vec<f64> = lin.iter().map(|v| crate::modcore::wrap(*v, m)).collect();
        let mut dec = TemporalDecoder::new(&bundle.predictor, m, 1.0).unwrap();
        dec.init(&lin[..25]).unwrap();
        let ring = ringosc_decode(&t.codes, &p, &bundle, &t.counts).unwrap();
        for n in 25..x.len() {
            let (v, _) = dec.decode_step(codes_lin[n]).unwrap();
            assert!((v - ring.v_hat[n]).abs() < 0.01, "sample {n}");
        }
    }

    #[test]
    fn degenerate_gain_never_selected() {
        let c = |b: f64, pe: f64, mse: f64| Candidate {
            a: 0.6,
            b,
            delta_eff: 3.0,
            expected_mse: mse,
            screened: true,
            pe: Some(pe),
            mse: Some(mse),
        };
        let cands = vec![c(0.0, 0.0, 1.0), c(0.01, 0.0, 0.02), c(0.05, 0.01, 0.001)];
        assert_eq!(select_operating_point(&cands, 1e-3), Some(1));
        assert_eq!(select_operating_point(&cands[..1], 1e-3), Some(0));
        let mut none = cands.clone();
        none.iter_mut().for_each(|c| c.pe = Some(0.5));
        assert_eq!(select_operating_point(&none, 1e-3), None);
    }

    #[test]
    fn zero_gain_design_carries_no_information() {
        let cx = vec![1.0, 0.8, 0.5, 0.2, 0.0, 0.0];
        let p = RingOscProfile::with_default_curve(5).unwrap();
        let b = design_bundle(
            &cx,
            &p,
            AffineFrontend::new(0.6, 0.0, 1.0),
            2,
            2,
            NoiseModel::Ma1Uniform,
        )
        .unwrap();
        assert!((b.smoother.expected_mse - 1.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dual_models_agree(seed in 0u64..1000, n in prop::sample::select(vec![3usize, 5, 9, 17]), phase in 0.0f64..1.0) {
            let p = RingOscProfile::with_default_curve(n).unwrap();
            let fe = AffineFrontend::new(0.7, 0.08, 1.0);
            let mut rng = trial_rng(seed, 1, StreamTag::Source);
            let x: Vec<f64> = (0..200).map(|_| { let s: f64 = StandardNormal.sample(&mut rng); 2.0 * s }).collect();
            let a = simulate_states(&x, &p, &fe, phase).unwrap();
            let b = closed_form_output(&x, &p, &fe, phase).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.codes.iter().all(|&y| y < p.modulus()));
        }

        #[test]
        fn pchip_monotone_on_random_tables(steps in prop::collection::vec((0.01f64..1.0, 0.0f64..5.0), 3..12)) {
            let mut v = vec![0.0];
            let mut f = vec![1.0];
            for (dv, df) in &steps {
                v.push(v.last().unwrap() + dv);
                f.push(f.last().unwrap() + df);
            }
            let c = FCurve::from_table(v.clone(), f).unwrap();
            let hi = *v.last().unwrap();
            let mut prev = c.eval(0.0);
            for i in 1..=500 {
                let y = c.eval(hi * i as f64 / 500.0);
                prop_assert!(y >= prev - 1e-9);
                prev = y;
            }
        }
    }
}
