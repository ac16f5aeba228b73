//! Linear MMSE filter design: scalar and matrix predictors, noncausal
//! smoothers and the oversampled pipeline's low-pass filter.
//!
//! Filters are designed on centered statistics. A filter carries the mean of
//! the process it acts on and predicts `mean + sum_i h_i (V_{n-i} - mean)`;
//! for the dithered converter `E[Z] = -1/2`, which is the familiar `+1/2`
//! shift before filtering and `-1/2` after.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Result};
use crate::linalg::{levinson, ridged, spd_solve, symmetrize, toeplitz};
use crate::signals::{autocov_from_model, ProcessModel};

/// Second-order model of the quantization noise seen by the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// iid `Z_n ~ Unif((-1, 0])`.
    #[default]
    WhiteUniform,
    /// `Z_n - Z_{n-1}` with iid uniform `Z_n`, as produced by a ring oscillator.
    Ma1Uniform,
}

impl NoiseModel {
    pub fn autocov(&self, r: usize) -> f64 {
        match (self, r) {
            (Self::WhiteUniform, 0) => 1.0 / 12.0,
            (Self::Ma1Uniform, 0) => 1.0 / 6.0,
            (Self::Ma1Uniform, 1) => -1.0 / 12.0,
            _ => 0.0,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::WhiteUniform => -0.5,
            Self::Ma1Uniform => 0.0,
        }
    }
}

/// `C_V[r] = alpha^2 C_X[r] + C_Z[r]` for `r = 0..=maxlag`.
pub fn quantized_autocov(cx: &[f64], alpha: f64, noise: NoiseModel, maxlag: usize) -> Result<Vec<f64>> {
    if cx.len() <= maxlag {
        return Err(invalid(format!(
            "need {} autocovariance lags, got {}",
            maxlag + 1,
            cx.len()
        )));
    }
    Ok((0..=maxlag).map(|r| alpha * alpha * cx[r] + noise.autocov(r)).collect())
}

/// Scalar p-tap predictor `V^p_n = mean + sum_i taps[i-1] (V_{n-i} - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorFilter {
    pub taps: Vec<f64>,
    /// Mean squared prediction error of these taps under the design statistics.
    pub error_var: f64,
    pub mean: f64,
}

impl PredictorFilter {
    pub fn order(&self) -> usize {
        self.taps.len()
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }

    /// Prediction from a history ordered newest first.
    pub fn predict(&self, history_newest_first: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (h, v) in self.taps.iter().zip(history_newest_first) {
            acc += h * (v - self.mean);
        }
        self.mean + acc
    }

    /// Two-column CSV `index,tap`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "# error_var={}", self.error_var)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "tap"])?;
        for (i, h) in self.taps.iter().enumerate() {
            w.write_record([(i + 1).to_string(), h.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `C[0] - 2 h^T c + h^T T h`, the exact MSE of arbitrary taps.
pub fn prediction_mse(cv: &[f64], taps: &[f64]) -> f64 {
    let p = taps.len();
    let mut mse = cv[0];
    for i in 0..p {
        mse -= 2.0 * taps[i] * cv[i + 1];
        for j in 0..p {
            mse += taps[i] * taps[j] * cv[i.abs_diff(j)];
        }
    }
    mse
}

fn check_autocov(cv: &[f64], p: usize) -> Result<()> {
    if cv.len() <= p {
        return Err(invalid(format!(
            "need {} autocovariance lags for p = {p}, got {}",
            p + 1,
            cv.len()
        )));
    }
    if !(cv[0] > 0.0) || cv.iter().any(|v| !v.is_finite()) {
        return Err(invalid("autocovariance must be finite with C[0] > 0"));
    }
    Ok(())
}

/// Yule-Walker predictor by Levinson-Durbin on the ridge-regularized sequence,
/// falling back to a dense Cholesky solve if the recursion breaks down.
pub fn solve_predictor(cv: &[f64], p: usize) -> Result<PredictorFilter> {
    check_autocov(cv, p)?;
    if p == 0 {
        return Ok(PredictorFilter {
            taps: Vec::new(),
            error_var: cv[0],
            mean: 0.0,
        });
    }
    let mut reg = cv[..=p].to_vec();
    reg[0] += crate::linalg::RIDGE * cv[0];
    let taps = match levinson(&reg, p) {
        Some(t) => t,
        None => dense_taps(cv, p)?,
    };
    let error_var = prediction_mse(cv, &taps).max(0.0);
    Ok(PredictorFilter {
        taps,
        error_var,
        mean: 0.0,
    })
}

fn dense_taps(cv: &[f64], p: usize) -> Result<Vec<f64>> {
    let t = ridged(toeplitz(cv, p), cv[0]);
    let rhs = DVector::from_column_slice(&cv[1..=p]);
    let h = spd_solve(t, &rhs).map_err(|_| numeric(format!("Toeplitz system of order {p} is singular")))?;
    Ok(h.iter().copied().collect())
}

/// Predictor designed as if the input had the flat in-band PSD with the given
/// variance, applied to `alpha X + Z`.
pub fn flat_spectrum_predictor(
    oversample_ratio: f64,
    alpha: f64,
    sigma_sq: f64,
    p: usize,
    noise: NoiseModel,
) -> Result<PredictorFilter> {
    let cx = autocov_from_model(
        &ProcessModel::FlatBand {
            variance: sigma_sq,
            oversample_ratio,
        },
        p,
    )?;
    let cv = quantized_autocov(&cx, alpha, noise, p)?;
    Ok(solve_predictor(&cv, p)?.with_mean(noise.mean()))
}

/// `K x K` matrix predictor `V^p_n = mean + sum_i H_i (V_{n-i} - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixPredictorFilter {
    pub taps: Vec<DMatrix<f64>>,
    pub error_cov: DMatrix<f64>,
    pub mean: f64,
}

impl MatrixPredictorFilter {
    pub fn dim(&self) -> usize {
        self.error_cov.nrows()
    }

    pub fn order(&self) -> usize {
        self.taps.len()
    }

    pub fn with_mean(mut self, mean: f64) -> Self {
        self.mean = mean;
        self
    }
}

/// Multichannel normal equations `sum_i H_i C[j - i] = C[j]`, `j = 1..=p`,
/// with `C[r] = E[V_n V_{n-r}^T]`, assembled and solved as one dense system.
pub fn solve_matrix_predictor(blocks: &[DMatrix<f64>], p: usize) -> Result<MatrixPredictorFilter> {
    if blocks.len() <= p {
        return Err(invalid(format!(
            "need {} covariance blocks for p = {p}, got {}",
            p + 1,
            blocks.len()
        )));
    }
    let k = crate::linalg::check_square(&blocks[0], "covariance block")?;
    if blocks.iter().any(|b| b.nrows() != k || b.ncols() != k) {
        return Err(invalid("covariance blocks must share one size"));
    }
    if p == 0 {
        return Ok(MatrixPredictorFilter {
            taps: Vec::new(),
            error_cov: symmetrize(&blocks[0]),
            mean: 0.0,
        });
    }
    let block = |r: i64| -> DMatrix<f64> {
        if r >= 0 {
            blocks[r as usize].clone()
        } else {
            blocks[(-r) as usize].transpose()
        }
    };
    let n = k * p;
    let mut g = DMatrix::zeros(n, n);
    for i in 0..p {
        for j in 0..p {
            g.view_mut((i * k, j * k), (k, k))
                .copy_from(&block(j as i64 - i as i64));
        }
    }
    let g = ridged(symmetrize(&g), blocks[0].trace() / k as f64);
    let mut rhs = DMatrix::zeros(n, k);
    for j in 0..p {
        rhs.view_mut((j * k, 0), (k, k)).copy_from(&blocks[j + 1].transpose());
    }
    let chol = g
        .cholesky()
        .ok_or_else(|| numeric(format!("block Toeplitz system of order {p} is singular")))?;
    let ht = chol.solve(&rhs);
    let taps: Vec<DMatrix<f64>> = (0..p).map(|i| ht.view((i * k, 0), (k, k)).transpose()).collect();
    let mut err = blocks[0].clone();
    for (i, h) in taps.iter().enumerate() {
        err -= h * blocks[i + 1].transpose();
    }
    Ok(MatrixPredictorFilter {
        taps,
        error_cov: symmetrize(&err),
        mean: 0.0,
    })
}

/// `alpha^2 C_X[r] + (1/12) I [r = 0]`.
pub fn quantized_blocks(blocks_x: &[DMatrix<f64>], alpha: f64) -> Vec<DMatrix<f64>> {
    blocks_x
        .iter()
        .enumerate()
        .map(|(r, c)| {
            let mut v = c * (alpha * alpha);
            if r == 0 {
                for i in 0..v.nrows() {
                    v[(i, i)] += 1.0 / 12.0;
                }
            }
            v
        })
        .collect()
}

/// Joint statistics needed to estimate `X_n` from `V_{n-k..=n+k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherStats {
    pub var_x: f64,
    /// `E[X_n (V_{n+j} - mean)]` for `j = -k..=k`.
    pub cross: Vec<f64>,
    /// `C_V[0..=2k]`.
    pub v_autocov: Vec<f64>,
    pub mean_v: f64,
}

impl SmootherStats {
    /// Statistics of the linear channel `V = alpha X + Z`.
    pub fn linear_channel(cx: &[f64], alpha: f64, noise: NoiseModel, k: usize) -> Result<Self> {
        let v_autocov = quantized_autocov(cx, alpha, noise, 2 * k)?;
        let cross = (-(k as i64)..=k as i64)
            .map(|j| alpha * cx[j.unsigned_abs() as usize])
            .collect();
        Ok(Self {
            var_x: cx[0],
            cross,
            v_autocov,
            mean_v: noise.mean(),
        })
    }

    pub fn half_width(&self) -> usize {
        self.cross.len() / 2
    }
}

/// Noncausal Wiener smoother `X^_n = sum_{j=-k}^{k} g_j (V_{n+j} - mean)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SmootherFilter {
    /// `taps[j + k] = g_j`.
    pub taps: Vec<f64>,
    pub half_width: usize,
    pub expected_mse: f64,
    pub mean_v: f64,
}

impl SmootherFilter {
    /// Apply to a whole path; taps reaching outside the path see the mean.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let k = self.half_width as i64;
        let n = v.len() as i64;
        (0..n)
            .map(|t| {
                let mut acc = 0.0;
                for j in -k..=k {
                    let s = t + j;
                    if s >= 0 && s < n {
                        acc += self.taps[(j + k) as usize] * (v[s as usize] - self.mean_v);
                    }
                }
                acc
            })
            .collect()
    }
}

pub fn design_smoother(stats: &SmootherStats, k: usize) -> Result<SmootherFilter> {
    let m = 2 * k + 1;
    if stats.cross.len() != m || stats.v_autocov.len() < m {
        return Err(invalid(format!(
            "smoother of half-width {k} needs {m} cross terms and {m} autocovariance lags"
        )));
    }
    if !(stats.v_autocov[0] > 0.0) {
        return Err(invalid("V must have positive variance"));
    }
    let t = ridged(toeplitz(&stats.v_autocov, m), stats.v_autocov[0]);
    let c = DVector::from_column_slice(&stats.cross);
    let g = spd_solve(t, &c).map_err(|_| numeric("smoother normal equations are singular"))?;
    let expected_mse = (stats.var_x - g.dot(&c)).max(0.0);
    Ok(SmootherFilter {
        taps: g.iter().copied().collect(),
        half_width: k,
        expected_mse,
        mean_v: stats.mean_v,
    })
}

/// Default width of the cosine transition outside the passband.
pub const DEFAULT_ROLLOFF: f64 = 0.05 * PI;

/// Zero-phase low-pass filter applied to whole blocks in the frequency domain.
///
/// Gain is constant on `|w| <= band_edge` and falls to zero over a raised-cosine
/// transition of width `rolloff` (zero gives a brick wall).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowPass {
    pub gain: f64,
    pub band_edge: f64,
    pub rolloff: f64,
}

impl LowPass {
    pub fn unit(oversample_ratio: f64, rolloff: f64) -> Self {
        Self {
            gain: 1.0,
            band_edge: PI / oversample_ratio,
            rolloff,
        }
    }

    pub fn response(&self, w: f64) -> f64 {
        let a = w.abs();
        if a <= self.band_edge {
            self.gain
        } else if self.rolloff > 0.0 && a < self.band_edge + self.rolloff {
            let t = (a - self.band_edge) / self.rolloff;
            self.gain * 0.5 * (1.0 + (PI * t).cos())
        } else {
            0.0
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut planner = FftPlanner::new();
        planner.plan_fft_forward(n).process(&mut buf);
        for (k, c) in buf.iter_mut().enumerate() {
            let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            *c *= self.response(2.0 * PI * kk / n as f64);
        }
        planner.plan_fft_inverse(n).process(&mut buf);
        buf.iter().map(|c| c.re / n as f64).collect()
    }
}

/// Wiener gain `s / (1 + s)` with `s = 12 alpha^2 L sigma^2` on `|w| < pi/L`.
pub fn ideal_lpf_gain(oversample_ratio: f64, alpha: f64, sigma_sq: f64) -> Result<LowPass> {
    if !(oversample_ratio >= 1.0) {
        return Err(invalid(format!(
            "oversampling ratio must be >= 1, got {oversample_ratio}"
        )));
    }
    let s = 12.0 * alpha * alpha * oversample_ratio * sigma_sq;
    Ok(LowPass {
        gain: s / (1.0 + s),
        band_edge: PI / oversample_ratio,
        rolloff: DEFAULT_ROLLOFF,
    })
}
