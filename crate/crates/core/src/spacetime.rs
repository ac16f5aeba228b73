//! Joint decoder for a vector of modulo ADCs: matrix prediction in time,
//! then integer forcing across streams on the folded prediction error.

use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numeric, Error, Result};
use crate::iforce::{find_a_exhaustive, find_a_lll, quad_form, IntegerMatrix};
use crate::linalg::log2_det_spd;
use crate::modcore::{centered_wrap, encode_one, wrap, ModAdcParams};
use crate::predict::{quantized_blocks, solve_matrix_predictor, MatrixPredictorFilter, PredictorFilter};
use crate::signals::SamplePath;
use crate::temporal::{Feedback, History, RAMP_SNAP, WRONG_FOLD_TOL};

/// Order of the unquantized predictor standing in for the infinite-order limit.
pub const SLB_ORDER: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LatticeSearch {
    Exhaustive { coeff_bound: i64 },
    Lll,
}

impl Default for LatticeSearch {
    fn default() -> Self {
        Self::Exhaustive { coeff_bound: 4 }
    }
}

impl LatticeSearch {
    pub fn find(&self, gram: &DMatrix<f64>) -> Result<IntegerMatrix> {
        match *self {
            Self::Exhaustive { coeff_bound } => find_a_exhaustive(gram, coeff_bound),
            Self::Lll => find_a_lll(gram),
        }
    }
}

impl From<&PredictorFilter> for MatrixPredictorFilter {
    fn from(f: &PredictorFilter) -> Self {
        Self {
            taps: f.taps.iter().map(|&h| DMatrix::from_element(1, 1, h)).collect(),
            error_cov: DMatrix::from_element(1, 1, f.error_var),
            mean: f.mean,
        }
    }
}

/// Matrix predictor, its error covariance `Sigma_p`, and the integer matrix
/// for the prediction error.
#[derive(Debug, Clone)]
pub struct SpaceTimeDesign {
    pub filter: MatrixPredictorFilter,
    pub a: IntegerMatrix,
    /// `max_k 1/2 log2(12 a_k^T Sigma_p a_k)`.
    pub rate_st: f64,
}

impl SpaceTimeDesign {
    pub fn from_filter(filter: MatrixPredictorFilter, search: LatticeSearch) -> Result<Self> {
        let gram = &filter.error_cov * 12.0;
        let a = search.find(&gram)?;
        let rate_st = st_rate(&a, &filter.error_cov);
        Ok(Self { filter, a, rate_st })
    }

    pub fn dim(&self) -> usize {
        self.filter.dim()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        writeln!(out, "# rate_st={}", self.rate_st)?;
        self.a.write_csv(out)
    }
}

/// `max_k 1/2 log2(12 a_k^T Sigma_p a_k)`.
pub fn st_rate(a: &IntegerMatrix, sigma_p: &DMatrix<f64>) -> f64 {
    let q = a.rows().iter().map(|r| quad_form(sigma_p, r)).fold(0.0, f64::max);
    0.5 * (12.0 * q).log2()
}

/// Design from block covariances `C_V[0..=p]` of the quantized vector process.
/// The dithered-converter mean `-1/2` is applied to every stream.
pub fn st_design(blocks_v: &[DMatrix<f64>], p: usize, search: LatticeSearch) -> Result<SpaceTimeDesign> {
    let filter = solve_matrix_predictor(blocks_v, p)?.with_mean(-0.5);
    SpaceTimeDesign::from_filter(filter, search)
}

/// Per-step state of the joint decoder.
#[derive(Debug, Clone)]
pub struct SpaceTimeDecoder {
    k: usize,
    /// `taps[i]` in row-major order, newest lag first.
    taps: Vec<Vec<f64>>,
    mean: f64,
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    modulus: f64,
    alpha: f64,
    history: History<f64>,
    initialized: bool,
    pred: Vec<f64>,
}

impl SpaceTimeDecoder {
    pub fn new(design: &SpaceTimeDesign, params: &ModAdcParams) -> Result<Self> {
        params.validate()?;
        let k = design.dim();
        if design.a.dim() != k {
            return Err(invalid("integer matrix and predictor dimensions differ"));
        }
        let a = design.a.to_f64();
        let a_inv = a
            .clone()
            .try_inverse()
            .ok_or_else(|| invalid("integer matrix is singular"))?;
        if (&a * &a_inv - DMatrix::identity(k, k)).amax() >= 1e-9 {
            return Err(numeric("integer matrix inverse is inaccurate"));
        }
        let p = design.filter.order();
        Ok(Self {
            k,
            taps: design
                .filter
                .taps
                .iter()
                .map(|h| (0..k * k).map(|i| h[(i / k, i % k)]).collect())
                .collect(),
            mean: design.filter.mean,
            a,
            a_inv,
            modulus: params.modulo_size(),
            alpha: params.alpha,
            history: History::new(p * k),
            initialized: p == 0,
            pred: vec![0.0; k],
        })
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn order(&self) -> usize {
        self.taps.len()
    }

    /// Known history, oldest vector first; only the last `p` are kept.
    pub fn init(&mut self, history: &[Vec<f64>]) -> Result<()> {
        let p = self.order();
        if history.len() < p {
            return Err(invalid(format!("need {p} history vectors, got {}", history.len())));
        }
        if history.iter().any(|v| v.len() != self.k) {
            return Err(invalid(format!("history vectors must have {} entries", self.k)));
        }
        let flat: Vec<f64> = history[history.len() - p..].iter().flatten().copied().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(invalid("history values must be finite"));
        }
        if p > 0 {
            self.history.fill(&flat);
        }
        self.initialized = true;
        Ok(())
    }

    fn predict(&mut self) {
        let w = self.history.window();
        let (k, p) = (self.k, self.taps.len());
        for r in 0..k {
            let mut acc = 0.0;
            for i in 0..p {
                let h = &self.taps[i][r * k..(r + 1) * k];
                let past = &w[(p - 1 - i) * k..(p - i) * k];
                for m in 0..k {
                    acc += h[m] * (past[m] - self.mean);
                }
            }
            self.pred[r] = self.mean + acc;
        }
    }

    fn unfold(&mut self, codes: &[f64]) -> Vec<f64> {
        self.predict();
        joint_unfold(&self.pred, codes, &self.a, &self.a_inv, self.modulus)
    }

    fn check(&self, codes: &[f64]) -> Result<()> {
        if !self.initialized {
            return Err(Error::InvalidState("decoder history is not initialized".into()));
        }
        if codes.len() != self.k {
            return Err(invalid(format!("expected {} codes, got {}", self.k, codes.len())));
        }
        Ok(())
    }

    /// Decode one vector of folded samples into `(v_hat, x_hat)`.
    pub fn decode_step(&mut self, codes: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(codes)?;
        let v = self.unfold(codes);
        for &vi in &v {
            self.history.push(vi);
        }
        let x = v.iter().map(|vi| (vi - self.mean) / self.alpha).collect();
        Ok((v, x))
    }

    pub fn decode_step_genie(&mut self, codes: &[f64], v_true: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(codes)?;
        let v = self.unfold(codes);
        for &vi in v_true {
            self.history.push(vi);
        }
        let x = v.iter().map(|vi| (vi - self.mean) / self.alpha).collect();
        Ok((v, x))
    }
}

/// `V^p + A^{-1} centered([A W] mod 2^R)` with `W = [Y - V^p] mod 2^R`.
fn joint_unfold(pred: &[f64], codes: &[f64], a: &DMatrix<f64>, a_inv: &DMatrix<f64>, modulus: f64) -> Vec<f64> {
    let k = pred.len();
    let fold: Vec<f64> = (0..k).map(|m| wrap(codes[m] - pred[m], modulus)).collect();
    let g: Vec<f64> = (0..k)
        .map(|r| {
            let mut s = 0.0;
            for m in 0..k {
                s += a[(r, m)] * fold[m];
            }
            centered_wrap(wrap(s, modulus), modulus)
        })
        .collect();
    (0..k)
        .map(|r| {
            let mut e = 0.0;
            for m in 0..k {
                e += a_inv[(r, m)] * g[m];
            }
            pred[r] + e
        })
        .collect()
}

/// LMMSE prediction of `X_n` (all streams) from a window of past vectors
/// observed at per-step gains.
struct VectorRamp<'a> {
    blocks_x: &'a [DMatrix<f64>],
    window: usize,
}

impl VectorRamp<'_> {
    fn block(&self, r: i64) -> DMatrix<f64> {
        if r >= 0 {
            self.blocks_x[r as usize].clone()
        } else {
            self.blocks_x[(-r) as usize].transpose()
        }
    }

    /// `(W, E_x)`: `X_n ~ W (V_window - mean) / alpha_n`-style weights and the
    /// error covariance of `X_n`. `W` is `K x mK`, oldest vector first.
    fn solve(&self, alphas: &[f64], n: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let k = self.blocks_x[0].nrows();
        let lo = n.saturating_sub(self.window);
        let m = n - lo;
        if m == 0 {
            return Ok((DMatrix::zeros(k, 0), self.blocks_x[0].clone()));
        }
        let mut r = DMatrix::zeros(m * k, m * k);
        for i in 0..m {
            for j in 0..m {
                let (a, b) = (lo + i, lo + j);
                let mut blk = self.block(a as i64 - b as i64) * (alphas[a] * alphas[b]);
                if i == j {
                    for d in 0..k {
                        blk[(d, d)] += 1.0 / 12.0;
                    }
                }
                r.view_mut((i * k, j * k), (k, k)).copy_from(&blk);
            }
        }
        // c[:, j] = E[X_n V_j^T] = alpha_j C[n - j]
        let mut c = DMatrix::zeros(k, m * k);
        for j in 0..m {
            let idx = lo + j;
            c.view_mut((0, j * k), (k, k))
                .copy_from(&(self.block((n - idx) as i64) * alphas[idx]));
        }
        let chol = r
            .cholesky()
            .ok_or_else(|| numeric("ramp prediction system is singular"))?;
        let wt = chol.solve(&c.transpose());
        let w = wt.transpose();
        let ex = &self.blocks_x[0] - &w * c.transpose();
        Ok((w, ex))
    }
}

/// Shared-gain ramp for a vector of converters: at each step the gain is the
/// largest for which every combination `a_k^T E` of the prediction error
/// stays inside the budget (or its steady-state value, if larger).
pub fn vector_ramp_schedule(
    blocks_x: &[DMatrix<f64>],
    a: &IntegerMatrix,
    params: &ModAdcParams,
    window: usize,
    backoff_bits: f64,
) -> Result<Vec<f64>> {
    params.validate()?;
    let window = window.max(1);
    if blocks_x.len() <= window {
        return Err(invalid(format!("ramp needs {} covariance blocks", window + 1)));
    }
    let budget = (2.0 * (params.rate_bits - backoff_bits)).exp2() / 12.0;
    if budget <= 1.0 / 12.0 {
        return Err(invalid("rate leaves no headroom above the quantization noise"));
    }
    let ramp = VectorRamp { blocks_x, window };
    let steady = vec![params.alpha; window];
    let (_, ex_ss) = ramp.solve(&steady, window)?;
    let row_budget: Vec<f64> = a
        .rows()
        .iter()
        .map(|row| {
            let noise = row.iter().map(|v| (v * v) as f64).sum::<f64>() / 12.0;
            budget.max(params.alpha * params.alpha * quad_form(&ex_ss, row) + noise)
        })
        .collect();
    let mut alphas = Vec::new();
    for n in 0..10_000 {
        let (_, ex) = ramp.solve(&alphas, n)?;
        let mut g = params.alpha;
        for (row, b) in a.rows().iter().zip(&row_budget) {
            let noise = row.iter().map(|v| (v * v) as f64).sum::<f64>() / 12.0;
            if noise >= *b {
                return Err(invalid("rate leaves no headroom for the integer combinations"));
            }
            let q = quad_form(&ex, row);
            if q > 0.0 {
                g = g.min(((b - noise) / q).sqrt());
            }
        }
        let g = if g >= params.alpha * (1.0 - RAMP_SNAP) {
            params.alpha
        } else {
            g
        };
        alphas.push(g);
        if g >= params.alpha {
            return Ok(alphas);
        }
    }
    Err(numeric("gain ramp did not reach the final gain"))
}

fn decode_vector_ramp(
    codes: &[Vec<f64>],
    alphas: &[f64],
    blocks_x: &[DMatrix<f64>],
    a: &IntegerMatrix,
    mean: f64,
    modulus: f64,
    window: usize,
) -> Result<Vec<Vec<f64>>> {
    let af = a.to_f64();
    let a_inv = af
        .clone()
        .try_inverse()
        .ok_or_else(|| invalid("integer matrix is singular"))?;
    let ramp = VectorRamp {
        blocks_x,
        window: window.max(1),
    };
    let k = blocks_x[0].nrows();
    let mut v: Vec<Vec<f64>> = Vec::with_capacity(codes.len());
    for (n, y) in codes.iter().enumerate() {
        let (w, _) = ramp.solve(alphas, n)?;
        let lo = n - w.ncols() / k;
        let pred: Vec<f64> = (0..k)
            .map(|r| {
                let mut acc = 0.0;
                for (j, past) in v[lo..n].iter().enumerate() {
                    for m in 0..k {
                        acc += w[(r, j * k + m)] * (past[m] - mean);
                    }
                }
                mean + alphas[n] * acc
            })
            .collect();
        v.push(joint_unfold(&pred, y, &af, &a_inv, modulus));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorInit {
    #[default]
    Genie,
    RampAlpha {
        backoff_bits: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct VectorOutcome {
    /// `v_hat[n][k]`, sample-major.
    pub v_hat: Vec<Vec<f64>>,
    pub v_true: Vec<Vec<f64>>,
    pub init_len: usize,
    pub init_error: bool,
    pub block_error: bool,
    /// Time steps with at least one wrong stream.
    pub wrong_steps: usize,
    pub first_error: Option<usize>,
    /// Mean over streams and post-initialization steps, only without errors.
    pub conditional_mse: Option<f64>,
}

/// Encode every stream of `x` (sample-major, one dither draw per stream per
/// step) and decode jointly.
pub fn run_vector_stream<R: Rng + ?Sized>(
    x: &SamplePath,
    blocks_x: &[DMatrix<f64>],
    design: &SpaceTimeDesign,
    params: &ModAdcParams,
    init: &VectorInit,
    feedback: Feedback,
    rng: &mut R,
) -> Result<VectorOutcome> {
    params.validate()?;
    let k = design.dim();
    if x.streams() != k {
        return Err(invalid(format!("path has {} streams, design has {k}", x.streams())));
    }
    let p = design.filter.order();
    let delta = params.modulo_size();
    let mean = design.filter.mean;
    let n = x.len();

    let ramp: Vec<f64> = match init {
        VectorInit::RampAlpha { backoff_bits } => {
            let mut a = vector_ramp_schedule(blocks_x, &design.a, params, p, *backoff_bits)?;
            a.extend(std::iter::repeat_n(params.alpha, p));
            a
        }
        VectorInit::Genie => Vec::new(),
    };

    let mut codes = Vec::with_capacity(n);
    let mut v_true = Vec::with_capacity(n);
    for t in 0..n {
        let a = ramp.get(t).copied().unwrap_or(params.alpha);
        let mut yt = Vec::with_capacity(k);
        let mut vt = Vec::with_capacity(k);
        for s in 0..k {
            let (y, v) = encode_one(x.data[s][t], a, delta, params.dither, rng);
            yt.push(y);
            vt.push(v);
        }
        codes.push(yt);
        v_true.push(vt);
    }

    let init_v = match init {
        VectorInit::Genie => v_true[..p.min(n)].to_vec(),
        VectorInit::RampAlpha { .. } => {
            let m = ramp.len().min(n);
            decode_vector_ramp(&codes[..m], &ramp[..m], blocks_x, &design.a, mean, delta, p)?
        }
    };
    let init_len = init_v.len();
    let tol = WRONG_FOLD_TOL * delta;
    let wrong = |a: &[f64], b: &[f64]| a.iter().zip(b).any(|(u, v)| (u - v).abs() > tol);
    let init_error = init_v.iter().zip(&v_true).any(|(a, b)| wrong(a, b));

    let mut dec = SpaceTimeDecoder::new(design, params)?;
    let mut out = VectorOutcome {
        init_len,
        init_error,
        ..Default::default()
    };
    out.v_hat.extend(init_v.iter().cloned());
    if init_len < n || p == 0 {
        match feedback {
            Feedback::Genie => dec.init(&v_true[..init_len])?,
            Feedback::Decision => dec.init(&init_v)?,
        }
    }
    let mut sq = 0.0;
    for t in init_len..n {
        let (v, xh) = match feedback {
            Feedback::Decision => dec.decode_step(&codes[t])?,
            Feedback::Genie => dec.decode_step_genie(&codes[t], &v_true[t])?,
        };
        if wrong(&v, &v_true[t]) {
            out.wrong_steps += 1;
            out.first_error.get_or_insert(t);
        }
        for s in 0..k {
            sq += (xh[s] - x.data[s][t]).powi(2);
        }
        out.v_hat.push(v);
    }
    out.block_error = out.wrong_steps > 0;
    if !out.block_error && !out.init_error && n > init_len {
        out.conditional_mse = Some(sq / ((n - init_len) * k) as f64);
    }
    out.v_true = v_true;
    Ok(out)
}

/// `1/2 log2(|Sigma*|^{1/K} / D)`.
pub fn slb_vector(sigma_star: &DMatrix<f64>, distortion: f64) -> Result<f64> {
    let k = crate::linalg::check_square(sigma_star, "innovation covariance")?;
    if !(distortion > 0.0) {
        return Err(invalid(format!("distortion must be > 0, got {distortion}")));
    }
    let ld = log2_det_spd(sigma_star)
        .map_err(|_| invalid("innovation covariance is singular; the process is not regular"))?;
    Ok(0.5 * (ld / k as f64 - distortion.log2()))
}

/// Innovation covariance of the unquantized process, approximated by the
/// order-`SLB_ORDER` prediction error.
pub fn innovation_cov(blocks_x: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    Ok(solve_matrix_predictor(blocks_x, SLB_ORDER)?.error_cov)
}

/// Rate of a plain uniform converter with the same overload criterion,
/// `1/2 log2(12 Var(V)) + delta`.
pub fn naive_rate(var_v: f64, delta_bits: f64) -> Result<f64> {
    if !(var_v > 0.0) {
        return Err(invalid(format!("variance must be > 0, got {var_v}")));
    }
    Ok(0.5 * (12.0 * var_v).log2() + delta_bits)
}

/// `1/2 log2(max_k a_k^T Sigma* a_k / |Sigma*|^{1/K})` for the best `A`, the
/// high-resolution limit of the gap to the lower bound.
pub fn st_gap_limit(sigma_star: &DMatrix<f64>, search: LatticeSearch) -> Result<f64> {
    let k = sigma_star.nrows();
    let a = search.find(sigma_star)?;
    let q = a.rows().iter().map(|r| quad_form(sigma_star, r)).fold(0.0, f64::max);
    Ok(0.5 * (q.log2() - log2_det_spd(sigma_star)? / k as f64))
}

/// One row of the rate-versus-distortion comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub distortion: f64,
    pub r_slb: f64,
    pub r_st: f64,
    pub r_naive: f64,
    pub gap_limit: f64,
}

/// Rates at `D = 1/(12 alpha^2)` for a vector source with covariance blocks
/// `blocks_x` (at least `SLB_ORDER + 1`). The naive rate takes the worst stream
/// and no backoff so all three curves share the overload criterion.
pub fn rate_point(blocks_x: &[DMatrix<f64>], p: usize, distortion: f64, search: LatticeSearch) -> Result<RatePoint> {
    if !(distortion > 0.0) {
        return Err(invalid(format!("distortion must be > 0, got {distortion}")));
    }
    let alpha = (1.0 / (12.0 * distortion)).sqrt();
    let design = st_design(&quantized_blocks(&blocks_x[..=p], alpha), p, search)?;
    let sigma_star = innovation_cov(blocks_x)?;
    let var = blocks_x[0].diagonal().iter().copied().fold(0.0, f64::max);
    Ok(RatePoint {
        distortion,
        r_slb: slb_vector(&sigma_star, distortion)?,
        r_st: design.rate_st,
        r_naive: naive_rate(alpha * alpha * var + 1.0 / 12.0, 0.0)?,
        gap_limit: st_gap_limit(&sigma_star, search)?,
    })
}

pub fn write_rate_points<W: Write>(points: &[RatePoint], mut out: W) -> Result<()> {
    writeln!(out, "# schema=1")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["D", "R_SLB", "R_ST_IFSC", "R_naive", "gap_limit"])?;
    for p in points {
        w.write_record([
            p.distortion.to_string(),
            p.r_slb.to_string(),
            p.r_st.to_string(),
            p.r_naive.to_string(),
            p.gap_limit.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modcore::Dither;
    use crate::predict::{quantized_autocov, solve_predictor, NoiseModel};
    use crate::rng::{trial_rng, StreamTag};
    use crate::signals::{autocov_from_model, gen_gaussian, vector_autocov, ProcessModel};
    use crate::temporal::TemporalDecoder;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar_filter(rho: f64, alpha: f64, p: usize) -> (Vec<f64>, PredictorFilter) {
        let cx = autocov_from_model(&ProcessModel::Ar1 { variance: 1.0, rho }, 80).unwrap();
        let cv = quantized_autocov(&cx, alpha, NoiseModel::WhiteUniform, p).unwrap();
        (cx, solve_predictor(&cv, p).unwrap().with_mean(-0.5))
    }

    fn blockdiag(a: &[f64], b: &[f64]) -> Vec<DMatrix<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| DMatrix::from_row_slice(2, 2, &[*x, 0.0, 0.0, *y]))
            .collect()
    }

    #[test]
    fn scalar_solvers_agree() {
        let (cx, f) = scalar_filter(0.9, 20.0, 6);
        let blocks: Vec<DMatrix<f64>> = quantized_autocov(&cx, 20.0, NoiseModel::WhiteUniform, 6)
            .unwrap()
            .into_iter()
            .map(|c| DMatrix::from_element(1, 1, c))
            .collect();
        let d = st_design(&blocks, 6, LatticeSearch::default()).unwrap();
        assert_eq!(d.a, IntegerMatrix::identity(1));
        for (h, m) in f.taps.iter().zip(&d.filter.taps) {
            assert!((h - m[(0, 0)]).abs() < 1e-9);
        }
        assert!((d.rate_st - 0.5 * (12.0 * f.error_var).log2()).abs() < 1e-9);
    }

    #[test]
    fn single_stream_matches_temporal_bit_for_bit() {
        let alpha = 30.0;
        let (cx, f) = scalar_filter(0.95, alpha, 8);
        let params = ModAdcParams::new(0.5 * (12.0 * f.error_var).log2() + 1.2, alpha, Dither::Subtractive).unwrap();
        let design = SpaceTimeDesign::from_filter(MatrixPredictorFilter::from(&f), LatticeSearch::default()).unwrap();
        let blocks: Vec<DMatrix<f64>> = cx.iter().map(|&c| DMatrix::from_element(1, 1, c)).collect();
        for trial in 0..20 {
            let mut srng = trial_rng(7, trial, StreamTag::Source);
            let x = gen_gaussian(
                &ProcessModel::Ar1 {
                    variance: 1.0,
                    rho: 0.95,
                },
                4096,
                &mut srng,
            )
            .unwrap();
            let mut r1 = trial_rng(7, trial, StreamTag::Dither);
            let mut r2 = trial_rng(7, trial, StreamTag::Dither);
            let vec_out = run_vector_stream(
                &x,
                &blocks,
                &design,
                &params,
                &VectorInit::Genie,
                Feedback::Decision,
                &mut r1,
            )
            .unwrap();
            let enc = crate::modcore::encode_path(x.stream(0), &params, &mut r2).unwrap();
            let mut dec = TemporalDecoder::for_params(&f, &params).unwrap();
            dec.init(&enc.unfolded[..8]).unwrap();
            let mut st = SpaceTimeDecoder::new(&design, &params).unwrap();
            st.init(&enc.unfolded[..8].iter().map(|v| vec![*v]).collect::<Vec<_>>())
                .unwrap();
            for t in 8..4096 {
                let (v1, x1) = dec.decode_step(enc.folded[t]).unwrap();
                let (v2, x2) = st.decode_step(&[enc.folded[t]]).unwrap();
                assert_eq!(v1.to_bits(), v2[0].to_bits());
                assert_eq!(x1.to_bits(), x2[0].to_bits());
                assert_eq!(v1.to_bits(), vec_out.v_hat[t][0].to_bits());
            }
        }
    }

    #[test]
    fn independent_streams_factorize() {
        let alpha = 16.0;
        let ca: Vec<f64> = (0..30).map(|r| 0.9f64.powi(r)).collect();
        let cb: Vec<f64> = (0..30).map(|r| 0.5f64.powi(r) * 2.0).collect();
        let p = 5;
        let blocks_x = blockdiag(&ca, &cb);
        let d = st_design(&quantized_blocks(&blocks_x[..=p], alpha), p, LatticeSearch::default()).unwrap();
        assert_eq!(d.a, IntegerMatrix::identity(2));
        let fa = solve_predictor(&quantized_autocov(&ca, alpha, NoiseModel::WhiteUniform, p).unwrap(), p).unwrap();
        let fb = solve_predictor(&quantized_autocov(&cb, alpha, NoiseModel::WhiteUniform, p).unwrap(), p).unwrap();
        let want = 0.5 * (12.0 * fa.error_var.max(fb.error_var)).log2();
        assert!((d.rate_st - want).abs() < 1e-9);

        // joint decoding equals per-stream decoding
        let params = ModAdcParams::new(want + 1.5, alpha, Dither::Subtractive).unwrap();
        let mut rng = trial_rng(8, 0, StreamTag::Source);
        let xa = gen_gaussian(
            &ProcessModel::Ar1 {
                variance: 1.0,
                rho: 0.9,
            },
            2000,
            &mut rng,
        )
        .unwrap();
        let xb = gen_gaussian(
            &ProcessModel::Ar1 {
                variance: 2.0,
                rho: 0.5,
            },
            2000,
            &mut rng,
        )
        .unwrap();
        let path = SamplePath {
            data: vec![xa.data[0].clone(), xb.data[0].clone()],
            sample_period: 1.0,
        };
        let mut drng = trial_rng(8, 0, StreamTag::Dither);
        let out = run_vector_stream(
            &path,
            &blocks_x,
            &d,
            &params,
            &VectorInit::Genie,
            Feedback::Genie,
            &mut drng,
        )
        .unwrap();
        let fa = fa.with_mean(-0.5);
        let fb = fb.with_mean(-0.5);
        for (s, f) in [(0usize, &fa), (1, &fb)] {
            let mut dec = TemporalDecoder::for_params(f, &params).unwrap();
            let truth: Vec<f64> = out.v_true.iter().map(|v| v[s]).collect();
            let delta = params.modulo_size();
            let folded: Vec<f64> = truth.iter().map(|v| wrap(*v, delta)).collect();
            dec.init(&truth[..p]).unwrap();
            for t in p..2000 {
                let (v, _) = dec.decode_step_genie(folded[t], truth[t]).unwrap();
                assert!((v - out.v_hat[t][s]).abs() < 1e-6, "stream {s} t {t}");
            }
        }
    }

    #[test]
    fn delayed_copies_are_predictable_across_streams() {
        // X^1_n = W_{n-1}, X^2_n = W_{n-2}: each stream white, jointly the
        // second stream is the first one delayed
        let alpha = 10f64.powf(30.0 / 20.0) / 12f64.sqrt();
        let mut blocks = vec![DMatrix::zeros(2, 2); 30];
        blocks[0] = DMatrix::identity(2, 2);
        // C[1] = E[X_n X_{n-1}^T]: X^2_n = W_{n-2} = X^1_{n-1}
        blocks[1][(1, 0)] = 1.0;
        let p = 4;
        let d = st_design(&quantized_blocks(&blocks[..=p], alpha), p, LatticeSearch::default()).unwrap();
        let naive = naive_rate(alpha * alpha + 1.0 / 12.0, 0.0).unwrap();
        let sp = &d.filter.error_cov;
        let per_stream: Vec<f64> = (0..2).map(|k| 0.5 * (12.0 * sp[(k, k)]).log2()).collect();
        assert!(per_stream[1] < naive - 1.0, "{per_stream:?} vs {naive}");
        // the fresh stream carries a new innovation every step
        assert!((d.rate_st - naive).abs() < 0.01);
    }

    #[test]
    fn planted_prediction_error_is_recovered() {
        let filter = MatrixPredictorFilter {
            taps: vec![DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.0, 1.0])],
            error_cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.9, 0.9, 1.0]),
            mean: -0.5,
        };
        let a = IntegerMatrix::from_rows(vec![vec![1, -1], vec![0, 1]]).unwrap();
        let design = SpaceTimeDesign {
            filter,
            a,
            rate_st: 0.0,
        };
        let params = ModAdcParams::new(4.0, 1.0, Dither::Subtractive).unwrap();
        let mut dec = SpaceTimeDecoder::new(&design, &params).unwrap();
        let prev = vec![3.5, -2.5];
        dec.init(std::slice::from_ref(&prev)).unwrap();
        // prediction: -0.5 + [0.5*4 + 0.25*(-2), 1.0*(-2)] = [1.0, -2.5]
        // |e_1| > 8 defeats per-stream unfolding, but e_1 - e_2 and e_2 are small
        let e = [9.5, 6.0];
        let v = [1.0 + e[0], -2.5 + e[1]];
        let codes: Vec<f64> = v.iter().map(|x| wrap(*x, 16.0)).collect();
        let (got, _) = dec.decode_step(&codes).unwrap();
        assert_eq!(got, v.to_vec());

        let ident = SpaceTimeDesign {
            a: IntegerMatrix::identity(2),
            ..design
        };
        let mut dec = SpaceTimeDecoder::new(&ident, &params).unwrap();
        dec.init(std::slice::from_ref(&prev)).unwrap();
        let (got, _) = dec.decode_step(&codes).unwrap();
        assert!((got[0] - v[0]).abs() > 1.0);
    }

    #[test]
    fn uninitialized_decoder_is_an_error() {
        let (_, f) = scalar_filter(0.9, 10.0, 3);
        let d = SpaceTimeDesign::from_filter(MatrixPredictorFilter::from(&f), LatticeSearch::Lll).unwrap();
        let params = ModAdcParams::new(6.0, 10.0, Dither::Subtractive).unwrap();
        let mut dec = SpaceTimeDecoder::new(&d, &params).unwrap();
        assert!(matches!(dec.decode_step(&[1.0]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn scalar_slb_matches_ar1_formula() {
        let rho: f64 = 0.8;
        let blocks: Vec<DMatrix<f64>> = (0..=SLB_ORDER)
            .map(|r| DMatrix::from_element(1, 1, rho.powi(r as i32)))
            .collect();
        let s = innovation_cov(&blocks).unwrap();
        let got = slb_vector(&s, 1e-3).unwrap();
        let want = 0.5 * ((1.0 - rho * rho) / 1e-3).log2();
        assert!((got - want).abs() < 1e-9);
        let ind = DMatrix::from_row_slice(2, 2, &[0.36, 0.0, 0.0, 0.75]);
        let avg = 0.5 * (0.5 * (0.36f64 / 1e-2).log2() + 0.5 * (0.75f64 / 1e-2).log2());
        assert!((slb_vector(&ind, 1e-2).unwrap() - avg).abs() < 1e-12);
        assert!(slb_vector(&DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]), 1e-2).is_err());
    }

    #[test]
    fn naive_rate_identities() {
        assert!((naive_rate(1.0 / 12.0, 1.3).unwrap() - 1.3).abs() < 1e-12);
        let (_, f) = scalar_filter(0.9, 20.0, 4);
        let var_v = 400.0 + 1.0 / 12.0;
        let gain = 0.5 * (var_v / f.error_var).log2();
        let diff = naive_rate(var_v, 0.0).unwrap() - 0.5 * (12.0 * f.error_var).log2();
        assert!((diff - gain).abs() < 1e-12);
        assert!(naive_rate(0.0, 1.0).is_err());
    }

    #[test]
    fn ensemble_rates_are_ordered() {
        let mut rng = trial_rng(9, 0, StreamTag::Ensemble);
        for _ in 0..5 {
            let taps: Vec<f64> = (0..10)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    10.0 * z
                })
                .collect();
            let model = ProcessModel::FilteredNoisePair {
                taps_h: taps[..5].to_vec(),
                taps_g: taps[5..].to_vec(),
            };
            let blocks = vector_autocov(&model, SLB_ORDER).unwrap();
            for d in [1e-2, 1e-3, 1e-4] {
                let pt = rate_point(&blocks, 24, d, LatticeSearch::default()).unwrap();
                assert!(pt.r_slb <= pt.r_st + 1e-9, "{pt:?}");
                assert!(pt.r_st <= pt.r_naive + 1e-9, "{pt:?}");
                assert!(pt.gap_limit >= -1e-12);
            }
        }
    }

    #[test]
    fn vector_ramp_initializes_without_errors() {
        let taps_h = vec![3.0, -2.0, 1.0];
        let taps_g = vec![1.0, 2.5, -1.5];
        let model = ProcessModel::FilteredNoisePair { taps_h, taps_g };
        let blocks = vector_autocov(&model, SLB_ORDER).unwrap();
        let alpha = 20.0;
        let p = 8;
        let d = st_design(&quantized_blocks(&blocks[..=p], alpha), p, LatticeSearch::default()).unwrap();
        let params = ModAdcParams::new(d.rate_st + 2.0, alpha, Dither::Subtractive).unwrap();
        let sched = vector_ramp_schedule(&blocks, &d.a, &params, p, 2.0).unwrap();
        assert!(sched.len() < 20, "{sched:?}");
        let mut init_errors = 0;
        let mut block_errors = 0;
        for trial in 0..200 {
            let mut srng = trial_rng(10, trial, StreamTag::Source);
            let x = gen_gaussian(&model, 256, &mut srng).unwrap();
            let mut drng = trial_rng(10, trial, StreamTag::Dither);
            let init = VectorInit::RampAlpha { backoff_bits: 2.0 };
            let out = run_vector_stream(&x, &blocks, &d, &params, &init, Feedback::Decision, &mut drng).unwrap();
            init_errors += out.init_error as usize;
            block_errors += out.block_error as usize;
        }
        assert_eq!(init_errors, 0);
        assert!(block_errors <= 2, "{block_errors}");
    }

    #[test]
    fn csv_has_schema_line() {
        let pt = RatePoint {
            distortion: 0.01,
            r_slb: 1.0,
            r_st: 1.5,
            r_naive: 3.0,
            gap_limit: 0.2,
        };
        let mut buf = Vec::new();
        write_rate_points(&[pt], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# schema=1\nD,R_SLB,R_ST_IFSC,R_naive,gap_limit\n0.01,"));
    }
}
