//! Stationary Gaussian test processes, sinusoids and the two-stream
//! filtered-noise ensemble.
//!
//! Scalar processes with a spectral description are generated by spectral
//! synthesis: on a grid of `M >= 4 n` frequencies `w_k = 2 pi k / M` the path is
//! `x_t = Re sum_k sqrt(S(w_k) / M) (a_k + i b_k) e^{i w_k t}` with iid standard
//! normal `a_k, b_k`, computed with one FFT. The covariance of the result is the
//! Riemann sum `(1/M) sum_k S(w_k) cos(w_k r)`; band models are renormalized so
//! that this sum equals the nominal variance at lag 0. Explicit autocovariance
//! sequences use circulant embedding, AR(1) processes the exact recursion.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{invalid, numeric, Result};

/// Second-order description of a stationary zero-mean Gaussian source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessModel {
    /// PSD `L sigma^2` on `[-pi/L, pi/L)`, zero elsewhere.
    FlatBand { variance: f64, oversample_ratio: f64 },
    /// In-band PSD falling linearly from the origin to zero at `pi/L`.
    TriangularBand { variance: f64, oversample_ratio: f64 },
    /// Two narrow rectangular bumps at a quarter and three quarters of the band.
    TwoToneBand { variance: f64, oversample_ratio: f64 },
    /// `C[r] = sigma^2 rho^|r|`.
    Ar1 { variance: f64, rho: f64 },
    /// Explicit `C[0..]`; lags past the end are zero.
    AutocovSeq { autocov: Vec<f64> },
    /// PSD samples at `w_k = -pi + 2 pi k / M`, linearly interpolated.
    PsdGrid { psd: Vec<f64> },
    /// `X1 = h * W3 + W1`, `X2 = g * W3 + W2` with unit-variance white `W`.
    FilteredNoisePair { taps_h: Vec<f64>, taps_g: Vec<f64> },
}

/// Number of quadrature intervals for spectral integrals.
pub const QUADRATURE_POINTS: usize = 1 << 14;

const TWO_TONE_WIDTH: f64 = 0.1;

impl ProcessModel {
    pub fn validate(&self) -> Result<()> {
        let band = |variance: f64, l: f64| -> Result<()> {
            if !(variance >= 0.0 && variance.is_finite()) {
                return Err(invalid(format!("variance must be >= 0, got {variance}")));
            }
            if !(l >= 1.0 && l.is_finite()) {
                return Err(invalid(format!("oversampling ratio must be >= 1, got {l}")));
            }
            Ok(())
        };
        match self {
            Self::FlatBand {
                variance,
                oversample_ratio,
            }
            | Self::TriangularBand {
                variance,
                oversample_ratio,
            }
            | Self::TwoToneBand {
                variance,
                oversample_ratio,
            } => band(*variance, *oversample_ratio),
            Self::Ar1 { variance, rho } => {
                if !(*variance >= 0.0 && variance.is_finite()) {
                    return Err(invalid(format!("variance must be >= 0, got {variance}")));
                }
                if !(rho.abs() < 1.0) {
                    return Err(invalid(format!("AR(1) coefficient must satisfy |rho| < 1, got {rho}")));
                }
                Ok(())
            }
            Self::AutocovSeq { autocov } => {
                if autocov.is_empty() || !(autocov[0] >= 0.0) {
                    return Err(invalid("autocovariance needs a non-negative lag-0 value"));
                }
                if autocov.iter().any(|v| !v.is_finite()) {
                    return Err(invalid("autocovariance has non-finite entries"));
                }
                Ok(())
            }
            Self::PsdGrid { psd } => {
                if psd.len() < 2 || psd.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                    return Err(invalid("PSD grid needs >= 2 finite non-negative samples"));
                }
                Ok(())
            }
            Self::FilteredNoisePair { taps_h, taps_g } => {
                if taps_h.is_empty() || taps_g.is_empty() {
                    return Err(invalid("filtered pair needs non-empty tap sequences"));
                }
                if taps_h.iter().chain(taps_g).any(|v| !v.is_finite()) {
                    return Err(invalid("filter taps must be finite"));
                }
                Ok(())
            }
        }
    }

    /// Number of streams.
    pub fn streams(&self) -> usize {
        match self {
            Self::FilteredNoisePair { .. } => 2,
            _ => 1,
        }
    }

    /// Lag-0 variance of a scalar model.
    pub fn variance(&self) -> Result<f64> {
        Ok(autocov_from_model(self, 0)?[0])
    }

    /// `S(e^{jw})` for models with a spectral description.
    pub fn psd_at(&self, w: f64) -> Option<f64> {
        let w = wrap_freq(w);
        match *self {
            Self::FlatBand {
                variance,
                oversample_ratio: l,
            } => Some(if (-PI / l..PI / l).contains(&w) {
                l * variance
            } else {
                0.0
            }),
            Self::TriangularBand {
                variance,
                oversample_ratio: l,
            } => {
                let edge = PI / l;
                Some(if w.abs() < edge {
                    2.0 * l * variance * (1.0 - w.abs() / edge)
                } else {
                    0.0
                })
            }
            Self::TwoToneBand {
                variance,
                oversample_ratio: l,
            } => {
                let edge = PI / l;
                let width = TWO_TONE_WIDTH * edge;
                let height = PI * variance / (2.0 * width);
                let a = w.abs();
                let inside = [0.25, 0.75].iter().any(|c| (a - c * edge).abs() < 0.5 * width);
                Some(if inside { height } else { 0.0 })
            }
            Self::Ar1 { variance, rho } => {
                let denom = 1.0 + rho * rho - 2.0 * rho * w.cos();
                Some(variance * (1.0 - rho * rho) / denom)
            }
            Self::PsdGrid { ref psd } => {
                let m = psd.len();
                let pos = (w + PI) / (2.0 * PI) * m as f64;
                let i0 = pos.floor() as usize % m;
                let frac = pos - pos.floor();
                Some(psd[i0] * (1.0 - frac) + psd[(i0 + 1) % m] * frac)
            }
            Self::AutocovSeq { .. } | Self::FilteredNoisePair { .. } => None,
        }
    }

    /// Support `[0, edge]` of the positive-frequency half of a band model.
    fn band_edge(&self) -> Option<f64> {
        match *self {
            Self::FlatBand { oversample_ratio, .. }
            | Self::TriangularBand { oversample_ratio, .. }
            | Self::TwoToneBand { oversample_ratio, .. } => Some(PI / oversample_ratio),
            _ => None,
        }
    }
}

fn wrap_freq(w: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let r = (w + PI) - two_pi * ((w + PI) / two_pi).floor();
    r - PI
}

/// Closed-form autocovariance of the flat-band model.
pub fn flat_band_autocov(variance: f64, oversample_ratio: f64, r: usize) -> f64 {
    if r == 0 {
        return variance;
    }
    let rf = r as f64;
    oversample_ratio * variance * (PI * rf / oversample_ratio).sin() / (PI * rf)
}

/// `(1/2pi) int S(w) cos(w r) dw` by quadrature.
///
/// Band models integrate over their support with composite Simpson on
/// [`QUADRATURE_POINTS`] intervals, so the band edge is a node; other spectral
/// models use the periodic rectangle rule on the same number of points.
pub fn autocov_quadrature(model: &ProcessModel, maxlag: usize) -> Result<Vec<f64>> {
    model.validate()?;
    if model.psd_at(0.0).is_none() {
        return Err(invalid("model has no spectral description"));
    }
    let n = QUADRATURE_POINTS;
    if let Some(edge) = model.band_edge() {
        let h = edge / n as f64;
        let mut out = Vec::with_capacity(maxlag + 1);
        for r in 0..=maxlag {
            let f = |w: f64| {
                let s = if w >= edge {
                    // right-open support; use the left limit
                    model.psd_at(edge - 1e-12 * edge).unwrap()
                } else {
                    model.psd_at(w).unwrap()
                };
                s * (w * r as f64).cos()
            };
            let mut acc = f(0.0) + f(edge);
            for i in 1..n {
                let w = i as f64 * h;
                acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(w);
            }
            // even PSD: (1/2pi) * 2 * int_0^edge
            out.push(acc * h / 3.0 / PI);
        }
        return Ok(out);
    }
    let mut out = vec![0.0; maxlag + 1];
    for k in 0..n {
        let w = -PI + 2.0 * PI * k as f64 / n as f64;
        let s = model.psd_at(w).unwrap();
        for (r, o) in out.iter_mut().enumerate() {
            *o += s * (w * r as f64).cos();
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Ok(out)
}

/// Autocovariance `C[0..=maxlag]` of a scalar model.
///
/// Flat-band and AR(1) models use their closed forms; other spectral models
/// are integrated with [`autocov_quadrature`].
pub fn autocov_from_model(model: &ProcessModel, maxlag: usize) -> Result<Vec<f64>> {
    model.validate()?;
    match model {
        ProcessModel::FlatBand {
            variance,
            oversample_ratio,
        } => Ok((0..=maxlag)
            .map(|r| flat_band_autocov(*variance, *oversample_ratio, r))
            .collect()),
        ProcessModel::Ar1 { variance, rho } => Ok((0..=maxlag).map(|r| variance * rho.powi(r as i32)).collect()),
        ProcessModel::AutocovSeq { autocov } => {
            Ok((0..=maxlag).map(|r| autocov.get(r).copied().unwrap_or(0.0)).collect())
        }
        ProcessModel::TriangularBand { .. } | ProcessModel::TwoToneBand { .. } | ProcessModel::PsdGrid { .. } => {
            autocov_quadrature(model, maxlag)
        }
        ProcessModel::FilteredNoisePair { .. } => Err(invalid("filtered pair is a vector process; use vector_autocov")),
    }
}

/// `K x T` realization; `data[k]` is stream `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub data: Vec<Vec<f64>>,
    pub sample_period: f64,
}

impl SamplePath {
    pub fn scalar(data: Vec<f64>) -> Self {
        Self {
            data: vec![data],
            sample_period: 1.0,
        }
    }

    pub fn streams(&self) -> usize {
        self.data.len()
    }

    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stream(&self, k: usize) -> &[f64] {
        &self.data[k]
    }

    /// Write one column per stream with a versioned comment header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "# sample_period={}", self.sample_period)?;
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.streams()).map(|k| format!("x{k}")).collect();
        w.write_record(&header)?;
        for t in 0..self.len() {
            w.write_record(self.data.iter().map(|s| s[t].to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `Re FFT(sqrt(weights[k]) (a_k + i b_k))`, first `n` samples.
fn synthesize<R: Rng + ?Sized>(weights: &[f64], n: usize, rng: &mut R) -> Vec<f64> {
    let m = weights.len();
    let mut buf: Vec<Complex64> = weights
        .iter()
        .map(|&wk| {
            let s = wk.max(0.0).sqrt();
            let re = normal(rng);
            let im = normal(rng);
            Complex64::new(s * re, s * im)
        })
        .collect();
    let fft = FftPlanner::new().plan_fft_inverse(m);
    fft.process(&mut buf);
    buf.iter().take(n).map(|c| c.re).collect()
}

fn synthesis_grid(n: usize) -> usize {
    (4 * n.max(1)).next_power_of_two().max(64)
}

/// Draw one realization of a scalar or two-stream model.
pub fn gen_gaussian<R: Rng + ?Sized>(model: &ProcessModel, n_samples: usize, rng: &mut R) -> Result<SamplePath> {
    model.validate()?;
    let data = match model {
        ProcessModel::Ar1 { variance, rho } => {
            let innov = (variance * (1.0 - rho * rho)).sqrt();
            let mut x = Vec::with_capacity(n_samples);
            let mut prev = variance.sqrt() * normal(rng);
            for _ in 0..n_samples {
                x.push(prev);
                prev = rho * prev + innov * normal(rng);
            }
            vec![x]
        }
        ProcessModel::AutocovSeq { autocov } => vec![circulant_embedding(autocov, n_samples, rng)?],
        ProcessModel::FilteredNoisePair { taps_h, taps_g } => {
            let (a, b) = filtered_pair(taps_h, taps_g, n_samples, rng);
            vec![a, b]
        }
        _ => {
            let m = synthesis_grid(n_samples);
            let mut weights: Vec<f64> = (0..m)
                .map(|k| model.psd_at(2.0 * PI * k as f64 / m as f64).unwrap() / m as f64)
                .collect();
            if model.band_edge().is_some() {
                let total: f64 = weights.iter().sum();
                let target = model.variance()?;
                if total > 0.0 {
                    let scale = target / total;
                    weights.iter_mut().for_each(|w| *w *= scale);
                }
            }
            vec![synthesize(&weights, n_samples, rng)]
        }
    };
    Ok(SamplePath {
        data,
        sample_period: 1.0,
    })
}

fn circulant_embedding<R: Rng + ?Sized>(autocov: &[f64], n: usize, rng: &mut R) -> Result<Vec<f64>> {
    let m = (2 * n.max(autocov.len())).next_power_of_two().max(64);
    let mut c = vec![Complex64::new(0.0, 0.0); m];
    for j in 0..=m / 2 {
        let v = autocov.get(j).copied().unwrap_or(0.0);
        c[j].re = v;
        if j > 0 && j < m / 2 {
            c[m - j].re = v;
        }
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut c);
    let floor = -1e-8 * autocov[0].abs().max(f64::MIN_POSITIVE) * m as f64;
    let mut weights = Vec::with_capacity(m);
    for (k, l) in c.iter().enumerate() {
        if l.re < floor {
            return Err(numeric(format!(
                "autocovariance is not positive semidefinite: circulant eigenvalue {} at index {k}",
                l.re
            )));
        }
        weights.push(l.re.max(0.0) / m as f64);
    }
    Ok(synthesize(&weights, n, rng))
}

fn convolve_causal(taps: &[f64], w: &[f64], out_len: usize) -> Vec<f64> {
    // w carries taps.len() - 1 samples of warm-up in front.
    let lead = taps.len() - 1;
    (0..out_len)
        .map(|n| taps.iter().enumerate().map(|(i, h)| h * w[n + lead - i]).sum())
        .collect()
}

fn filtered_pair<R: Rng + ?Sized>(h: &[f64], g: &[f64], n: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let lead = h.len().max(g.len()) - 1;
    let w3: Vec<f64> = (0..n + lead).map(|_| normal(rng)).collect();
    let w1: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let w2: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
    let a = convolve_causal(h, &w3[lead + 1 - h.len()..], n);
    let b = convolve_causal(g, &w3[lead + 1 - g.len()..], n);
    (
        a.iter().zip(&w1).map(|(x, y)| x + y).collect(),
        b.iter().zip(&w2).map(|(x, y)| x + y).collect(),
    )
}

/// A sinusoid of power `sigma^2` at a random in-band frequency.
#[derive(Debug, Clone)]
pub struct Sinusoid {
    pub path: SamplePath,
    pub omega: f64,
    pub phase: f64,
    /// Fewer than one full period fits in the block, so the time-average
    /// power is not close to `sigma^2`.
    pub degenerate: bool,
}

pub fn gen_sinusoid<R: Rng + ?Sized>(
    sigma_sq: f64,
    bandwidth_frac: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<Sinusoid> {
    if !(bandwidth_frac > 0.0 && bandwidth_frac <= 1.0) {
        return Err(invalid(format!(
            "bandwidth fraction must lie in (0, 1], got {bandwidth_frac}"
        )));
    }
    if !(sigma_sq >= 0.0) {
        return Err(invalid(format!("power must be >= 0, got {sigma_sq}")));
    }
    let omega = rng.random::<f64>() * PI * bandwidth_frac;
    let phase = rng.random::<f64>() * 2.0 * PI;
    Ok(sinusoid_at(sigma_sq, omega, phase, n_samples))
}

pub fn sinusoid_at(sigma_sq: f64, omega: f64, phase: f64, n_samples: usize) -> Sinusoid {
    let amp = (2.0 * sigma_sq).sqrt();
    let data = (0..n_samples).map(|n| amp * (omega * n as f64 + phase).cos()).collect();
    Sinusoid {
        path: SamplePath::scalar(data),
        omega,
        phase,
        degenerate: omega * (n_samples as f64) < 2.0 * PI,
    }
}

/// `sum_j a[j + r] b[j]` for signed lag `r` (zero outside the supports).
pub fn tap_correlation(a: &[f64], b: &[f64], r: i64) -> f64 {
    let mut acc = 0.0;
    for (j, bj) in b.iter().enumerate() {
        let i = j as i64 + r;
        if i >= 0 && (i as usize) < a.len() {
            acc += a[i as usize] * bj;
        }
    }
    acc
}

/// Block covariance `C[r]_{lm} = E[X^l_n X^m_{n-r}]` at a signed lag.
pub fn vector_autocov_at(model: &ProcessModel, r: i64) -> Result<DMatrix<f64>> {
    model.validate()?;
    match model {
        ProcessModel::FilteredNoisePair { taps_h, taps_g } => {
            let taps = [taps_h.as_slice(), taps_g.as_slice()];
            Ok(DMatrix::from_fn(2, 2, |l, m| {
                // X^l_n = sum_i t_l[i] W3_{n-i}, so E[X^l_n X^m_{n-r}] = sum_j t_l[j+r] t_m[j]
                let shared = tap_correlation(taps[l], taps[m], r);
                shared + if l == m && r == 0 { 1.0 } else { 0.0 }
            }))
        }
        _ => {
            let c = autocov_from_model(model, r.unsigned_abs() as usize)?;
            Ok(DMatrix::from_element(1, 1, c[r.unsigned_abs() as usize]))
        }
    }
}

/// `C[0..=maxlag]` as `K x K` blocks.
pub fn vector_autocov(model: &ProcessModel, maxlag: usize) -> Result<Vec<DMatrix<f64>>> {
    model.validate()?;
    match model {
        ProcessModel::FilteredNoisePair { .. } => (0..=maxlag as i64).map(|r| vector_autocov_at(model, r)).collect(),
        _ => Ok(autocov_from_model(model, maxlag)?
            .into_iter()
            .map(|c| DMatrix::from_element(1, 1, c))
            .collect()),
    }
}

/// Biased sample autocovariance at lags `0..=maxlag` (mean removed).
pub fn empirical_autocov(x: &[f64], maxlag: usize) -> Vec<f64> {
    empirical_cross_cov(x, x, maxlag)
}

/// `(1/n) sum_t a_t b_{t-r}` for `r = 0..=maxlag` (means not removed).
pub fn empirical_cross_cov(a: &[f64], b: &[f64], maxlag: usize) -> Vec<f64> {
    let n = a.len().min(b.len());
    (0..=maxlag)
        .map(|r| {
            let s: f64 = (r..n).map(|t| a[t] * b[t - r]).sum();
            s / n as f64
        })
        .collect()
}
