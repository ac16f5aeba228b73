//! Sample-by-sample decoder for a single modulo ADC stream.
//!
//! Each step predicts the unfolded value from the last `p` recovered values,
//! reduces the fold `W = [Y - prediction] mod 2^R` into the centered interval
//! and adds it back to the prediction. Whenever the prediction error is inside
//! `(-2^R / 2, 2^R / 2)` and the history is correct, the step recovers the true
//! unfolded value.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Error, Result};
use crate::iforce::{find_a_lll, if_gram, IfDecoder};
use crate::linalg::toeplitz;
use crate::modcore::{centered_wrap, encode_one, wrap, ModAdcParams};
use crate::predict::PredictorFilter;

/// Threshold (relative to `2^R`) above which a decoded value counts as a wrong fold.
pub const WRONG_FOLD_TOL: f64 = 1e-6;

/// Sliding window of the last `p` values, stored twice so the window is always
/// one contiguous slice.
#[derive(Debug, Clone)]
pub(crate) struct History<T: Copy> {
    buf: Vec<T>,
    start: usize,
    len: usize,
}

impl<T: Copy + Default> History<T> {
    pub(crate) fn new(len: usize) -> Self {
        Self {
            buf: vec![T::default(); 2 * len],
            start: 0,
            len,
        }
    }

    /// Oldest first.
    #[inline]
    pub(crate) fn window(&self) -> &[T] {
        &self.buf[self.start..self.start + self.len]
    }

    #[inline]
    pub(crate) fn push(&mut self, v: T) {
        if self.len == 0 {
            return;
        }
        self.buf[self.start] = v;
        self.buf[self.start + self.len] = v;
        self.start += 1;
        if self.start == self.len {
            self.start = 0;
        }
    }

    pub(crate) fn fill(&mut self, oldest_first: &[T]) {
        self.start = 0;
        let n = oldest_first.len();
        for (i, &v) in oldest_first[n - self.len..].iter().enumerate() {
            self.buf[i] = v;
            self.buf[i + self.len] = v;
        }
    }
}

/// Decoder state: predictor, modulus and the recovered history.
#[derive(Debug, Clone)]
pub struct TemporalDecoder {
    taps: Vec<f64>,
    mean: f64,
    modulus: f64,
    alpha: f64,
    history: History<f64>,
    initialized: bool,
}

impl TemporalDecoder {
    pub fn new(filter: &PredictorFilter, modulus: f64, alpha: f64) -> Result<Self> {
        if !(modulus > 0.0 && modulus.is_finite()) {
            return Err(invalid(format!("modulo size must be positive, got {modulus}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {alpha}")));
        }
        let p = filter.order();
        Ok(Self {
            taps: filter.taps.clone(),
            mean: filter.mean,
            modulus,
            alpha,
            history: History::new(p),
            initialized: p == 0,
        })
    }

    pub fn for_params(filter: &PredictorFilter, params: &ModAdcParams) -> Result<Self> {
        params.validate()?;
        Self::new(filter, params.modulo_size(), params.alpha)
    }

    pub fn order(&self) -> usize {
        self.taps.len()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Load the history with known values, oldest first. Only the last `p` are kept.
    pub fn init(&mut self, history: &[f64]) -> Result<()> {
        let p = self.order();
        if history.len() < p {
            return Err(invalid(format!("need {p} history values, got {}", history.len())));
        }
        if history.iter().any(|v| !v.is_finite()) {
            return Err(invalid("history values must be finite"));
        }
        if p > 0 {
            self.history.fill(history);
        }
        self.initialized = true;
        Ok(())
    }

    #[inline]
    pub fn predict(&self) -> f64 {
        let w = self.history.window();
        let p = w.len();
        let mut acc = 0.0;
        for i in 0..p {
            acc += self.taps[i] * (w[p - 1 - i] - self.mean);
        }
        self.mean + acc
    }

    #[inline]
    fn unfold(&self, y: f64) -> f64 {
        let pred = self.predict();
        let fold = wrap(y - pred, self.modulus);
        pred + centered_wrap(fold, self.modulus)
    }

    /// Decode one folded sample, returning `(v_hat, x_hat)`.
    pub fn decode_step(&mut self, y: f64) -> Result<(f64, f64)> {
        if !self.initialized {
            return Err(Error::InvalidState("decoder history is not initialized".into()));
        }
        let v = self.unfold(y);
        self.history.push(v);
        Ok((v, (v - self.mean) / self.alpha))
    }

    /// Decode one sample but advance the history with the true value.
    pub fn decode_step_genie(&mut self, y: f64, v_true: f64) -> Result<(f64, f64)> {
        if !self.initialized {
            return Err(Error::InvalidState("decoder history is not initialized".into()));
        }
        let v = self.unfold(y);
        self.history.push(v_true);
        Ok((v, (v - self.mean) / self.alpha))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    /// Recovered values feed the predictor.
    #[default]
    Decision,
    /// True values feed the predictor; isolates per-sample overloads.
    Genie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitMethod {
    /// The first `p` unfolded values are given.
    #[default]
    Genie,
    /// Start at a small gain and grow it until the final gain is reached.
    /// Without an explicit `schedule` the gains are derived from the source
    /// statistics so each step's prediction error meets `backoff_bits`.
    RampAlpha {
        backoff_bits: f64,
        #[serde(default)]
        schedule: Option<Vec<f64>>,
    },
    /// Unfold the first `block_len` samples jointly with integer forcing.
    BlockIf { block_len: usize },
}

/// Relative distance to the final gain at which the ramp jumps to it.
pub const RAMP_SNAP: f64 = 1e-3;

/// Per-step LMMSE predictor over a window of samples taken at varying gains.
struct RampPredictor<'a> {
    cx: &'a [f64],
    window: usize,
}

impl RampPredictor<'_> {
    /// `(weights on past V, C_X[0] - c^T R^{-1} c)` for predicting sample
    /// `n` from `n - window..n` at gains `alphas`, with `c` normalized by the
    /// target gain.
    fn solve(&self, alphas: &[f64], n: usize) -> Result<(Vec<f64>, f64)> {
        let lo = n.saturating_sub(self.window);
        let m = n - lo;
        if m == 0 {
            return Ok((Vec::new(), self.cx[0]));
        }
        let r = DMatrix::from_fn(m, m, |i, j| {
            let (a, b) = (lo + i, lo + j);
            alphas[a] * alphas[b] * self.cx[a.abs_diff(b)] + if i == j { 1.0 / 12.0 } else { 0.0 }
        });
        let c = DVector::from_fn(m, |j, _| alphas[lo + j] * self.cx[n - (lo + j)]);
        let chol = r
            .cholesky()
            .ok_or_else(|| numeric("ramp prediction system is singular"))?;
        let w = chol.solve(&c);
        let ex = self.cx[0] - w.dot(&c);
        Ok((w.iter().copied().collect(), ex.max(0.0)))
    }
}

/// Gains for the ramp phase, ending with the final gain.
///
/// Each gain is the largest value whose LMMSE prediction error variance
/// `alpha^2 e_x + 1/12` stays within `2^{2(R - delta)} / 12`, or within the
/// steady-state error at the final gain when that is larger.
pub fn ramp_schedule(cx: &[f64], params: &ModAdcParams, window: usize, backoff_bits: f64) -> Result<Vec<f64>> {
    params.validate()?;
    if cx.len() <= window.max(1) {
        return Err(invalid(format!("ramp needs {} autocovariance lags", window.max(1) + 1)));
    }
    let budget = (2.0 * (params.rate_bits - backoff_bits)).exp2() / 12.0;
    if budget <= 1.0 / 12.0 {
        return Err(invalid(format!(
            "rate {} leaves no headroom above the quantization noise at backoff {backoff_bits}",
            params.rate_bits
        )));
    }
    let pred = RampPredictor {
        cx,
        window: window.max(1),
    };
    // never ask for less than the steady state can deliver
    let steady = vec![params.alpha; pred.window];
    let (_, ex_ss) = pred.solve(&steady, pred.window)?;
    let budget = budget.max(params.alpha * params.alpha * ex_ss + 1.0 / 12.0);
    let mut alphas: Vec<f64> = Vec::new();
    for n in 0..10_000 {
        let (_, ex) = pred.solve(&alphas, n)?;
        let a = if ex > 0.0 {
            ((budget - 1.0 / 12.0) / ex).sqrt().min(params.alpha)
        } else {
            params.alpha
        };
        // the LMMSE error only approaches the stationary value, so snap once close
        let a = if a >= params.alpha * (1.0 - RAMP_SNAP) {
            params.alpha
        } else {
            a
        };
        alphas.push(a);
        if a >= params.alpha {
            return Ok(alphas);
        }
    }
    Err(numeric("gain ramp did not reach the final gain"))
}

/// Decode a ramp prefix. `alphas[n]` is the gain used for `codes[n]`; the result
/// holds the recovered unfolded values in the same order.
pub fn init_ramp_alpha(
    codes: &[f64],
    alphas: &[f64],
    cx: &[f64],
    mean: f64,
    modulus: f64,
    window: usize,
) -> Result<Vec<f64>> {
    if codes.len() != alphas.len() {
        return Err(invalid("one gain per ramp sample is required"));
    }
    let window = window.max(1);
    if cx.len() <= window {
        return Err(invalid(format!("ramp needs {} autocovariance lags", window + 1)));
    }
    let pred = RampPredictor { cx, window };
    let mut v = Vec::with_capacity(codes.len());
    for (n, &y) in codes.iter().enumerate() {
        let (w, _) = pred.solve(alphas, n)?;
        let lo = n - w.len();
        // weights were solved for c / alpha_n
        let mut acc = 0.0;
        for (j, wj) in w.iter().enumerate() {
            acc += wj * (v[lo + j] - mean);
        }
        let p = mean + alphas[n] * acc;
        let fold = wrap(y - p, modulus);
        v.push(p + centered_wrap(fold, modulus));
    }
    Ok(v)
}

/// Jointly unfold the first `codes.len()` samples by integer forcing on their
/// Toeplitz covariance.
pub fn init_block_if(codes: &[f64], cx: &[f64], params: &ModAdcParams) -> Result<Vec<f64>> {
    let k = codes.len();
    if k == 0 || cx.len() < k {
        return Err(invalid(format!("block of {k} samples needs {k} autocovariance lags")));
    }
    let sigma = toeplitz(cx, k);
    let gram = if_gram(&sigma, params.alpha);
    let a = find_a_lll(&gram)?;
    let dec = IfDecoder::new(&a, params.rate_bits)?;
    Ok(dec.decode(codes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub params: ModAdcParams,
    #[serde(default)]
    pub init: InitMethod,
    #[serde(default)]
    pub feedback: Feedback,
}

#[derive(Debug, Clone, Default)]
pub struct StreamOutcome {
    pub v_hat: Vec<f64>,
    pub x_hat: Vec<f64>,
    pub v_true: Vec<f64>,
    /// Samples consumed by initialization.
    pub init_len: usize,
    pub init_error: bool,
    /// A wrong fold after initialization.
    pub block_error: bool,
    pub wrong_samples: usize,
    pub first_error: Option<usize>,
    /// Mean squared error of `x_hat` after initialization, only for error-free blocks.
    pub conditional_mse: Option<f64>,
}

/// Encode `x` and decode it with `filter`, using `cx` (autocovariance of the
/// source, at least `p + 1` lags) for initialization.
pub fn run_stream<R: Rng + ?Sized>(
    x: &[f64],
    cx: &[f64],
    filter: &PredictorFilter,
    cfg: &StreamConfig,
    rng: &mut R,
) -> Result<StreamOutcome> {
    let params = cfg.params;
    params.validate()?;
    let p = filter.order();
    let delta = params.modulo_size();
    let mean = filter.mean;

    let ramp: Vec<f64> = match &cfg.init {
        InitMethod::RampAlpha { backoff_bits, schedule } => {
            let mut a = match schedule {
                Some(s) => {
                    let mut s: Vec<f64> = s.iter().copied().filter(|&g| g < params.alpha).collect();
                    s.push(params.alpha);
                    s
                }
                None => ramp_schedule(cx, &params, p, *backoff_bits)?,
            };
            // p more samples at the final gain so the handed-over history is homogeneous
            a.extend(std::iter::repeat_n(params.alpha, p));
            a
        }
        _ => Vec::new(),
    };
    if ramp.iter().any(|g| !(*g > 0.0)) {
        return Err(invalid("ramp gains must be positive"));
    }

    let n = x.len();
    let mut y = Vec::with_capacity(n);
    let mut v_true = Vec::with_capacity(n);
    for (t, &xt) in x.iter().enumerate() {
        let a = ramp.get(t).copied().unwrap_or(params.alpha);
        let (yt, vt) = encode_one(xt, a, delta, params.dither, rng);
        y.push(yt);
        v_true.push(vt);
    }

    let (init_v, init_alphas): (Vec<f64>, Vec<f64>) = match &cfg.init {
        InitMethod::Genie => {
            let m = p.min(n);
            (v_true[..m].to_vec(), vec![params.alpha; m])
        }
        InitMethod::RampAlpha { .. } => {
            let m = ramp.len().min(n);
            let v = init_ramp_alpha(&y[..m], &ramp[..m], cx, mean, delta, p)?;
            (v, ramp[..m].to_vec())
        }
        InitMethod::BlockIf { block_len } => {
            if *block_len <= p {
                return Err(invalid(format!("block initialization needs more than p = {p} samples")));
            }
            let m = (*block_len).min(n);
            let v = init_block_if(&y[..m], cx, &params)?;
            (v, vec![params.alpha; m])
        }
    };
    let init_len = init_v.len();
    let tol = WRONG_FOLD_TOL * delta;
    let init_error = init_v.iter().zip(&v_true).any(|(a, b)| (a - b).abs() > tol);

    let mut dec = TemporalDecoder::new(filter, delta, params.alpha)?;
    let mut out = StreamOutcome {
        v_hat: Vec::with_capacity(n),
        x_hat: Vec::with_capacity(n),
        init_len,
        init_error,
        ..Default::default()
    };
    for (v, a) in init_v.iter().zip(&init_alphas) {
        out.v_hat.push(*v);
        out.x_hat.push((v - mean) / a);
    }
    if init_len < n || p == 0 {
        let hist = match cfg.feedback {
            Feedback::Genie => &v_true[..init_len],
            Feedback::Decision => &init_v[..],
        };
        dec.init(hist)?;
    }

    let mut sq = 0.0;
    for t in init_len..n {
        let (v, xh) = match cfg.feedback {
            Feedback::Decision => dec.decode_step(y[t])?,
            Feedback::Genie => dec.decode_step_genie(y[t], v_true[t])?,
        };
        if (v - v_true[t]).abs() > tol {
            out.wrong_samples += 1;
            out.first_error.get_or_insert(t);
        }
        sq += (xh - x[t]) * (xh - x[t]);
        out.v_hat.push(v);
        out.x_hat.push(xh);
    }
    out.block_error = out.wrong_samples > 0;
    if !out.block_error && !out.init_error && n > init_len {
        out.conditional_mse = Some(sq / (n - init_len) as f64);
    }
    out.v_true = v_true;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modcore::{adc_sample, centered_mod, mod_reduce, Dither};
    use crate::predict::{quantized_autocov, solve_predictor, NoiseModel};
    use crate::rng::{trial_rng, StreamTag};
    use crate::signals::{autocov_from_model, gen_gaussian, ProcessModel};

    fn ar1_setup(rho: f64, p: usize) -> (Vec<f64>, PredictorFilter) {
        let model = ProcessModel::Ar1 { variance: 1.0, rho };
        let cx = autocov_from_model(&model, 64).unwrap();
        (
            cx,
            PredictorFilter {
                taps: vec![0.0; p],
                error_var: 0.0,
                mean: -0.5,
            },
        )
    }

    fn design(cx: &[f64], alpha: f64, p: usize) -> PredictorFilter {
        let cv = quantized_autocov(cx, alpha, NoiseModel::WhiteUniform, p).unwrap();
        solve_predictor(&cv, p).unwrap().with_mean(-0.5)
    }

    #[test]
    fn history_window_slides() {
        let mut h = History::<f64>::new(3);
        h.fill(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(h.window(), &[2.0, 3.0, 4.0]);
        h.push(5.0);
        assert_eq!(h.window(), &[3.0, 4.0, 5.0]);
        h.push(6.0);
        h.push(7.0);
        h.push(8.0);
        assert_eq!(h.window(), &[6.0, 7.0, 8.0]);
    }

    #[test]
    fn uninitialized_decoder_is_rejected() {
        let f = PredictorFilter {
            taps: vec![0.5],
            error_var: 1.0,
            mean: -0.5,
        };
        let mut d = TemporalDecoder::new(&f, 8.0, 1.0).unwrap();
        assert!(matches!(d.decode_step(1.0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn zero_order_decoder_is_centered_unwrap_around_the_mean() {
        let f = PredictorFilter {
            taps: vec![],
            error_var: 1.0,
            mean: -0.5,
        };
        let mut d = TemporalDecoder::new(&f, 4.0, 2.0).unwrap();
        for &y in &[0.0, 0.3, 1.49, 1.51, 2.0, 3.9] {
            let (v, _) = d.decode_step(y).unwrap();
            let want = -0.5 + centered_mod(y + 0.5, 4.0).unwrap();
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_single_step() {
        // V^p = -0.5 + 0.9 * (10.0 + 0.5) = 8.95; V = 10.5 differs by 1.55 < 4.
        let f = PredictorFilter {
            taps: vec![0.9],
            error_var: 1.0,
            mean: -0.5,
        };
        let mut d = TemporalDecoder::new(&f, 8.0, 2.0).unwrap();
        d.init(&[10.0]).unwrap();
        assert!((d.predict() - 8.95).abs() < 1e-12);
        let y = mod_reduce(10.5, 8.0).unwrap();
        let (v, x) = d.decode_step(y).unwrap();
        assert_eq!(v, 10.5);
        assert_eq!(x, 5.5);
        // a prediction error past half the modulus folds the wrong way
        let mut d = TemporalDecoder::new(&f, 8.0, 2.0).unwrap();
        d.init(&[10.0]).unwrap();
        let (v, _) = d.decode_step(mod_reduce(13.0, 8.0).unwrap()).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
    }

    #[test]
    fn exact_recovery_with_correct_history() {
        let rho = 0.95;
        let (cx, _) = ar1_setup(rho, 0);
        let p = 4;
        let alpha = 6.0;
        let f = design(&cx, alpha, p);
        let params = ModAdcParams::new(0.5 * (12.0 * f.error_var).log2() + 2.0, alpha, Dither::Subtractive).unwrap();
        let mut rng = trial_rng(1, 0, StreamTag::Source);
        let x = gen_gaussian(&ProcessModel::Ar1 { variance: 1.0, rho }, 5000, &mut rng).unwrap();
        let mut drng = trial_rng(1, 0, StreamTag::Dither);
        let mut d = TemporalDecoder::for_params(&f, &params).unwrap();
        let delta = params.modulo_size();
        let truth: Vec<f64> = x
            .stream(0)
            .iter()
            .map(|&xi| {
                let s = adc_sample(xi, &params, &mut drng).unwrap();
                (params.alpha * xi + s.dither_used).floor() - s.dither_used
            })
            .collect();
        d.init(&truth[..p]).unwrap();
        for &v in &truth[p..] {
            let pred = d.predict();
            let y = mod_reduce(v, delta).unwrap();
            let (vh, _) = d.decode_step(y).unwrap();
            if (v - pred).abs() < 0.5 * delta - 1e-9 {
                assert!((vh - v).abs() <= 1e-12 * (1.0 + v.abs()), "{vh} vs {v}");
            }
        }
    }

    #[test]
    fn constant_input_never_fails() {
        let cx = vec![1e-6; 8];
        let f = design(&[1.0, 1.0, 1.0, 1.0, 1.0], 10.0, 3);
        let cfg = StreamConfig {
            params: ModAdcParams::new(3.0, 10.0, Dither::Subtractive).unwrap(),
            init: InitMethod::Genie,
            feedback: Feedback::Decision,
        };
        for trial in 0..1000 {
            let mut rng = trial_rng(2, trial, StreamTag::Dither);
            let x = vec![0.37; 64];
            let out = run_stream(&x, &cx, &f, &cfg, &mut rng).unwrap();
            assert!(!out.block_error);
            assert!(out.conditional_mse.unwrap() < 1.0 / 100.0);
        }
    }

    #[test]
    fn conditional_mse_matches_quantization_noise() {
        let rho = 0.95;
        let (cx, _) = ar1_setup(rho, 0);
        let p = 3;
        let alpha = 8.0;
        let f = design(&cx, alpha, p);
        let cfg = StreamConfig {
            params: ModAdcParams::new(0.5 * (12.0 * f.error_var).log2() + 2.0, alpha, Dither::Subtractive).unwrap(),
            init: InitMethod::Genie,
            feedback: Feedback::Decision,
        };
        let mut mses = Vec::new();
        for trial in 0..200 {
            let mut srng = trial_rng(3, trial, StreamTag::Source);
            let x = gen_gaussian(&ProcessModel::Ar1 { variance: 1.0, rho }, 2048, &mut srng).unwrap();
            let mut rng = trial_rng(3, trial, StreamTag::Dither);
            let out = run_stream(x.stream(0), &cx, &f, &cfg, &mut rng).unwrap();
            assert!(!out.block_error);
            mses.push(out.conditional_mse.unwrap());
        }
        let m = mses.iter().sum::<f64>() / mses.len() as f64;
        let sd = (mses.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (mses.len() - 1) as f64).sqrt();
        let se = sd / (mses.len() as f64).sqrt();
        let bound = 1.0 / (12.0 * alpha * alpha);
        assert!(m <= bound + 3.0 * se, "{m} vs {bound}");
        assert!((m - bound).abs() < 5.0 * se);
    }

    #[test]
    fn ramp_reaches_final_gain_without_errors() {
        let rho = 0.99;
        let (cx, _) = ar1_setup(rho, 0);
        let p = 4;
        let alpha = 40.0;
        let f = design(&cx, alpha, p);
        let rate = 0.5 * (12.0 * f.error_var).log2() + 1.6717;
        let params = ModAdcParams::new(rate, alpha, Dither::Subtractive).unwrap();
        let sched = ramp_schedule(&cx, &params, p, 1.6717).unwrap();
        assert!(sched.len() <= 12, "{sched:?}");
        assert_eq!(*sched.last().unwrap(), alpha);
        for w in sched.windows(2) {
            assert!(w[1] > w[0]);
        }
        let cfg = StreamConfig {
            params,
            init: InitMethod::RampAlpha {
                backoff_bits: 1.6717,
                schedule: None,
            },
            feedback: Feedback::Decision,
        };
        let mut init_errors = 0;
        for trial in 0..1000 {
            let mut srng = trial_rng(4, trial, StreamTag::Source);
            let x = gen_gaussian(&ProcessModel::Ar1 { variance: 1.0, rho }, 64, &mut srng).unwrap();
            let mut rng = trial_rng(4, trial, StreamTag::Dither);
            let out = run_stream(x.stream(0), &cx, &f, &cfg, &mut rng).unwrap();
            init_errors += out.init_error as usize;
        }
        assert_eq!(init_errors, 0);
    }

    #[test]
    fn ramp_with_final_gain_reachable_at_once_is_one_step() {
        let (cx, _) = ar1_setup(0.5, 0);
        let params = ModAdcParams::new(6.0, 1.0, Dither::Subtractive).unwrap();
        assert_eq!(ramp_schedule(&cx, &params, 2, 2.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn aggressive_ramp_is_detected() {
        let rho = 0.99;
        let (cx, _) = ar1_setup(rho, 0);
        let p = 4;
        let alpha = 40.0;
        let f = design(&cx, alpha, p);
        let rate = 0.5 * (12.0 * f.error_var).log2() + 1.6717;
        let params = ModAdcParams::new(rate, alpha, Dither::Subtractive).unwrap();
        let auto = ramp_schedule(&cx, &params, p, 1.6717).unwrap();
        let sched = vec![auto[0] * 8.0, alpha];
        let cfg = StreamConfig {
            params,
            init: InitMethod::RampAlpha {
                backoff_bits: 1.6717,
                schedule: Some(sched),
            },
            feedback: Feedback::Decision,
        };
        let mut detected = 0;
        for trial in 0..200 {
            let mut srng = trial_rng(5, trial, StreamTag::Source);
            let x = gen_gaussian(&ProcessModel::Ar1 { variance: 1.0, rho }, 64, &mut srng).unwrap();
            let mut rng = trial_rng(5, trial, StreamTag::Dither);
            let out = run_stream(x.stream(0), &cx, &f, &cfg, &mut rng).unwrap();
            detected += out.init_error as usize;
        }
        assert!(detected > 50, "only {detected} of 200 over-aggressive ramps failed");
    }

    #[test]
    fn block_if_init_for_white_input_is_per_sample_unwrap() {
        let mut cx = vec![0.0; 8];
        cx[0] = 1.0;
        let params = ModAdcParams::new(4.0, 2.0, Dither::Subtractive).unwrap();
        let codes = [0.2, 3.7, 15.1, 9.0, 7.99];
        let v = init_block_if(&codes, &cx, &params).unwrap();
        for (vi, y) in v.iter().zip(codes) {
            let want = centered_mod(y + 0.5, 16.0).unwrap() - 0.5;
            assert!((vi - want).abs() < 1e-9);
        }
    }

    #[test]
    fn block_if_and_ramp_agree_when_both_succeed() {
        let rho = 0.99;
        let (cx, _) = ar1_setup(rho, 0);
        let p = 4;
        let alpha = 40.0;
        let f = design(&cx, alpha, p);
        // the block's DC combination needs about 7 bits at this gain
        let rate = 8.0;
        let params = ModAdcParams::new(rate, alpha, Dither::Subtractive).unwrap();
        let mut agree = 0;
        for trial in 0..50 {
            let mut srng = trial_rng(6, trial, StreamTag::Source);
            let x = gen_gaussian(&ProcessModel::Ar1 { variance: 1.0, rho }, 128, &mut srng).unwrap();
            let run = |init: InitMethod| {
                let cfg = StreamConfig {
                    params,
                    init,
                    feedback: Feedback::Decision,
                };
                let mut rng = trial_rng(6, trial, StreamTag::Dither);
                run_stream(x.stream(0), &cx, &f, &cfg, &mut rng).unwrap()
            };
            let a = run(InitMethod::BlockIf { block_len: 16 });
            let b = run(InitMethod::RampAlpha {
                backoff_bits: 1.6717,
                schedule: None,
            });
            if !a.init_error && !a.block_error && !b.init_error && !b.block_error {
                let from = a.init_len.max(b.init_len);
                for t in from..128 {
                    // both histories are the truth, so only rounding separates them
                    assert!((a.v_hat[t] - b.v_hat[t]).abs() < 1e-9);
                    assert!((a.v_hat[t] - a.v_true[t]).abs() < 1e-9);
                }
                agree += 1;
            }
        }
        assert!(agree > 40, "{agree}");
    }
}
