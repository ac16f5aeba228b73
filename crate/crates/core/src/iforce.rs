//! Integer-forcing unfolding of correlated modulo-folded vectors.
//!
//! A full-rank integer matrix `A` is chosen so every row combination
//! `a_k^T V` has small variance; each combination is unfolded separately
//! (integer combinations commute with the modulo) and `A^{-1}` maps the
//! unfolded combinations back. Also here: the exhaustive and LLL searches for
//! `A`, the Gaussian closest-lattice-point decoder used as the stronger
//! reference, and the rate/benchmark report.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, numeric, Error, Result};
use crate::linalg::{check_square, log2_det_spd};
use crate::modcore::{centered_wrap, wrap};

/// Full-rank square integer matrix; row `k` is the combination `a_k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntegerMatrix {
    rows: Vec<Vec<i64>>,
    det: i128,
}

impl IntegerMatrix {
    pub fn from_rows(rows: Vec<Vec<i64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(invalid("integer matrix must be non-empty and square"));
        }
        let det = det_bareiss(&rows);
        if det == 0 {
            return Err(invalid("integer matrix is singular"));
        }
        Ok(Self { rows, det })
    }

    pub fn identity(k: usize) -> Self {
        let rows = (0..k).map(|i| (0..k).map(|j| (i == j) as i64).collect()).collect();
        Self { rows, det: 1 }
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<i64>] {
        &self.rows
    }

    pub fn det(&self) -> i128 {
        self.det
    }

    pub fn det_abs(&self) -> u128 {
        self.det.unsigned_abs()
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_fn(k, k, |i, j| self.rows[i][j] as f64)
    }

    /// `U A` for an integer `U` of the same size.
    pub fn left_mul(&self, u: &IntegerMatrix) -> Result<Self> {
        let k = self.dim();
        if u.dim() != k {
            return Err(invalid("dimension mismatch"));
        }
        let rows = (0..k)
            .map(|i| {
                (0..k)
                    .map(|j| (0..k).map(|m| u.rows[i][m] * self.rows[m][j]).sum())
                    .collect()
            })
            .collect();
        Self::from_rows(rows)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "# schema=1")?;
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (0..self.dim()).map(|j| format!("a{j}")).collect();
        w.write_record(&header)?;
        for r in &self.rows {
            w.write_record(r.iter().map(i64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact determinant by fraction-free elimination.
fn det_bareiss(rows: &[Vec<i64>]) -> i128 {
    let n = rows.len();
    let mut m: Vec<Vec<i128>> = rows.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n {
        if m[k][k] == 0 {
            match (k + 1..n).find(|&i| m[i][k] != 0) {
                Some(i) => {
                    m.swap(i, k);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                m[i][j] = (m[i][j] * m[k][k] - m[i][k] * m[k][j]) / prev;
            }
        }
        prev = m[k][k];
    }
    sign * m[n - 1][n - 1]
}

fn rank_i64(rows: &[Vec<i64>]) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let cols = rows[0].len();
    let mut m: Vec<Vec<i128>> = rows.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let mut rank = 0;
    for c in 0..cols {
        let Some(piv) = (rank..m.len()).find(|&i| m[i][c] != 0) else {
            continue;
        };
        m.swap(rank, piv);
        for i in rank + 1..m.len() {
            let f = m[i][c];
            if f == 0 {
                continue;
            }
            let p = m[rank][c];
            for j in 0..cols {
                m[i][j] = m[i][j] * p - m[rank][j] * f;
            }
            let g = m[i].iter().fold(0i128, |g, &v| gcd(g, v.abs()));
            if g > 1 {
                m[i].iter_mut().for_each(|v| *v /= g);
            }
        }
        rank += 1;
    }
    rank
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `a^T Q a`.
pub fn quad_form(q: &DMatrix<f64>, a: &[i64]) -> f64 {
    let k = a.len();
    let mut s = 0.0;
    for i in 0..k {
        if a[i] == 0 {
            continue;
        }
        let mut row = 0.0;
        for j in 0..k {
            row += q[(i, j)] * a[j] as f64;
        }
        s += a[i] as f64 * row;
    }
    s
}

/// `I + 12 alpha^2 Sigma`, the Gram matrix whose row quadratic forms set the
/// per-combination rates.
pub fn if_gram(sigma: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let k = sigma.nrows();
    DMatrix::identity(k, k) + sigma * (12.0 * alpha * alpha)
}

fn check_gram(gram: &DMatrix<f64>) -> Result<usize> {
    let k = check_square(gram, "Gram matrix")?;
    if (gram - gram.transpose()).amax() > 1e-9 * gram.amax().max(1.0) {
        return Err(invalid("Gram matrix must be symmetric"));
    }
    Ok(k)
}

/// Rows sorted by quadratic form, ties by descending lexicographic order so
/// unit vectors come out as the identity.
fn canonical_rows(gram: &DMatrix<f64>, mut rows: Vec<Vec<i64>>) -> Vec<Vec<i64>> {
    rows.sort_by(|a, b| {
        quad_form(gram, a)
            .partial_cmp(&quad_form(gram, b))
            .unwrap()
            .then_with(|| b.cmp(a))
    });
    rows
}

/// Sign-canonical nonzero vectors of `[-bound, bound]^k` (first nonzero entry positive).
fn candidate_vectors(k: usize, bound: i64) -> Vec<Vec<i64>> {
    let side = (2 * bound + 1) as usize;
    let total = side.pow(k as u32);
    let mut out = Vec::with_capacity(total / 2);
    for idx in 0..total {
        let mut rem = idx;
        let v: Vec<i64> = (0..k)
            .map(|_| {
                let d = (rem % side) as i64 - bound;
                rem /= side;
                d
            })
            .collect();
        if let Some(&first) = v.iter().find(|&&d| d != 0) {
            if first > 0 {
                out.push(v);
            }
        }
    }
    out
}

const MAX_TIE_SUBSETS: u64 = 200_000;

fn binomial(n: u64, k: u64) -> u64 {
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Globally optimal `A` over entries in `[-bound, bound]`: minimal largest row
/// quadratic form; ties go to smaller `|det|`, then the lexicographically
/// largest canonically ordered row list.
pub fn find_a_exhaustive(gram: &DMatrix<f64>, coeff_bound: i64) -> Result<IntegerMatrix> {
    let k = check_gram(gram)?;
    if coeff_bound < 1 {
        return Err(invalid("coefficient bound must be >= 1"));
    }
    if ((2 * coeff_bound + 1) as f64).powi(k as i32) > 2e6 {
        return Err(invalid(format!(
            "exhaustive search over [-{coeff_bound}, {coeff_bound}]^{k} is too large"
        )));
    }
    let mut cands: Vec<(f64, Vec<i64>)> = candidate_vectors(k, coeff_bound)
        .into_iter()
        .map(|v| (quad_form(gram, &v), v))
        .collect();
    cands.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then_with(|| b.1.cmp(&a.1)));

    // Bottleneck basis of the linear matroid: greedy in weight order.
    let mut basis: Vec<Vec<i64>> = Vec::with_capacity(k);
    let mut worst = 0.0;
    for (q, v) in &cands {
        basis.push(v.clone());
        if rank_i64(&basis) == basis.len() {
            worst = *q;
            if basis.len() == k {
                break;
            }
        } else {
            basis.pop();
        }
    }
    if basis.len() < k {
        return Err(Error::NumericFailure("no full-rank candidate set".into()));
    }

    let tol = 1e-12 * worst.abs().max(1e-300);
    let ties: Vec<&Vec<i64>> = cands
        .iter()
        .take_while(|(q, _)| *q <= worst + tol)
        .map(|(_, v)| v)
        .collect();
    let mut best = IntegerMatrix::from_rows(canonical_rows(gram, basis))?;
    if binomial(ties.len() as u64, k as u64) <= MAX_TIE_SUBSETS {
        let mut idx: Vec<usize> = (0..k).collect();
        loop {
            let rows: Vec<Vec<i64>> = idx.iter().map(|&i| ties[i].clone()).collect();
            let det = det_bareiss(&rows);
            if det != 0 {
                let rows = canonical_rows(gram, rows);
                let better =
                    det.unsigned_abs() < best.det_abs() || (det.unsigned_abs() == best.det_abs() && rows > best.rows);
                if better {
                    best = IntegerMatrix { rows, det };
                }
            }
            // next k-combination of ties
            let mut i = k;
            loop {
                if i == 0 {
                    return Ok(best);
                }
                i -= 1;
                if idx[i] < ties.len() - k + i {
                    idx[i] += 1;
                    for j in i + 1..k {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }
    Ok(best)
}

/// Lovasz parameter for [`find_a_lll`].
pub const LLL_DELTA: f64 = 0.75;

fn gram_schmidt(b: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let k = b.len();
    let mut bs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut mu = vec![vec![0.0; k]; k];
    let mut norms = vec![0.0; k];
    for i in 0..k {
        let mut v = b[i].clone();
        for j in 0..i {
            let m = dot(&b[i], &bs[j]) / norms[j];
            mu[i][j] = m;
            for (vi, bj) in v.iter_mut().zip(&bs[j]) {
                *vi -= m * bj;
            }
        }
        norms[i] = dot(&v, &v);
        bs.push(v);
    }
    (bs, mu, norms)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LLL-reduced integer combinations for the lattice with Gram matrix `gram`.
///
/// Reduction runs on the rows of the Cholesky factor while the unimodular
/// transform is tracked; its rows, sorted by quadratic form, are returned.
pub fn find_a_lll(gram: &DMatrix<f64>) -> Result<IntegerMatrix> {
    let k = check_gram(gram)?;
    let l = gram
        .clone()
        .cholesky()
        .ok_or_else(|| numeric("Gram matrix is not positive definite"))?
        .l();
    let mut b: Vec<Vec<f64>> = (0..k).map(|i| l.row(i).iter().copied().collect()).collect();
    let mut u: Vec<Vec<i64>> = IntegerMatrix::identity(k).rows;
    let (_, mut mu, mut norms) = gram_schmidt(&b);
    let mut i = 1;
    let mut iterations = 0usize;
    while i < k {
        iterations += 1;
        if iterations > 100_000 {
            return Err(numeric("LLL did not converge"));
        }
        for j in (0..i).rev() {
            let r = mu[i][j].round();
            if r != 0.0 {
                let ri = r as i64;
                for c in 0..k {
                    b[i][c] -= r * b[j][c];
                    u[i][c] -= ri * u[j][c];
                }
                for c in 0..j {
                    mu[i][c] -= r * mu[j][c];
                }
                mu[i][j] -= r;
            }
        }
        if norms[i] >= (LLL_DELTA - mu[i][i - 1] * mu[i][i - 1]) * norms[i - 1] {
            i += 1;
        } else {
            b.swap(i, i - 1);
            u.swap(i, i - 1);
            (_, mu, norms) = gram_schmidt(&b);
            i = (i - 1).max(1);
        }
    }
    IntegerMatrix::from_rows(canonical_rows(gram, u))
}

/// Precomputed integer-forcing unfolder for one `A` and rate.
#[derive(Debug, Clone)]
pub struct IfDecoder {
    a: DMatrix<f64>,
    a_inv: DMatrix<f64>,
    modulus: f64,
}

impl IfDecoder {
    pub fn new(a: &IntegerMatrix, rate_bits: f64) -> Result<Self> {
        if !(rate_bits.is_finite() && rate_bits >= 0.0) {
            return Err(invalid(format!("rate must be >= 0, got {rate_bits}")));
        }
        Self::with_modulus(a, rate_bits.exp2())
    }

    pub fn with_modulus(a: &IntegerMatrix, modulus: f64) -> Result<Self> {
        let af = a.to_f64();
        let k = a.dim();
        let a_inv = af
            .clone()
            .try_inverse()
            .ok_or_else(|| invalid("integer matrix is singular"))?;
        let resid = (&af * &a_inv - DMatrix::identity(k, k)).amax();
        if resid >= 1e-9 {
            return Err(numeric(format!("inverse residual {resid} too large")));
        }
        Ok(Self { a: af, a_inv, modulus })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// `A^{-1} centered([A (Y + 1/2)] mod 2^R) - 1/2`.
    pub fn decode(&self, codes: &[f64]) -> Vec<f64> {
        let k = self.dim();
        let mut g = DVector::zeros(k);
        for r in 0..k {
            let mut s = 0.0;
            for c in 0..k {
                s += self.a[(r, c)] * (codes[c] + 0.5);
            }
            g[r] = centered_wrap(wrap(s, self.modulus), self.modulus);
        }
        (&self.a_inv * g).iter().map(|v| v - 0.5).collect()
    }
}

pub fn if_decode(codes: &[f64], a: &IntegerMatrix, rate_bits: f64) -> Result<Vec<f64>> {
    if codes.len() != a.dim() {
        return Err(invalid(format!("expected {} codes, got {}", a.dim(), codes.len())));
    }
    Ok(IfDecoder::new(a, rate_bits)?.decode(codes))
}

/// Closest-lattice-point decoder under a Gaussian model of `V = alpha X + Z`.
///
/// Finds the integer `b` maximizing the Gaussian likelihood of `Y + 2^R b`
/// with mean `-1/2` and covariance `alpha^2 Sigma + I/12`, by Schnorr-Euchner
/// enumeration on the upper-triangular factor of the precision matrix.
#[derive(Debug, Clone)]
pub struct ClpDecoder {
    upper: DMatrix<f64>,
    modulus: f64,
}

impl ClpDecoder {
    pub fn new(sigma: &DMatrix<f64>, alpha: f64, rate_bits: f64) -> Result<Self> {
        let k = check_square(sigma, "covariance")?;
        let cov = sigma * (alpha * alpha) + DMatrix::identity(k, k) / 12.0;
        let prec = cov.try_inverse().ok_or_else(|| numeric("covariance is singular"))?;
        let prec = crate::linalg::symmetrize(&prec);
        let l = prec
            .cholesky()
            .ok_or_else(|| numeric("precision matrix is not positive definite"))?
            .l();
        Ok(Self {
            upper: l.transpose(),
            modulus: rate_bits.exp2(),
        })
    }

    /// `argmin_b |U (b - c)|` with `c = -(Y + 1/2) / 2^R`.
    fn closest(&self, c: &[f64]) -> Vec<i64> {
        let k = c.len();
        let mut best = vec![0i64; k];
        let mut best_d = f64::INFINITY;
        let mut b = vec![0i64; k];
        self.search(k, c, 0.0, &mut b, &mut best, &mut best_d);
        best
    }

    fn search(&self, level: usize, c: &[f64], dist: f64, b: &mut [i64], best: &mut Vec<i64>, best_d: &mut f64) {
        if level == 0 {
            if dist < *best_d {
                *best_d = dist;
                best.copy_from_slice(b);
            }
            return;
        }
        let i = level - 1;
        let u = &self.upper;
        let k = c.len();
        let mut shift = 0.0;
        for j in i + 1..k {
            shift += u[(i, j)] * (b[j] as f64 - c[j]);
        }
        let rii = u[(i, i)];
        let center = c[i] - shift / rii;
        let z0 = center.round();
        let dir = if center >= z0 { 1.0 } else { -1.0 };
        // Schnorr-Euchner order z0, z0 + dir, z0 - dir, ... has nondecreasing distance.
        for n in 0u64.. {
            let off = if n % 2 == 1 {
                ((n + 1) / 2) as f64
            } else {
                -((n / 2) as f64)
            };
            let cand = z0 + dir * off;
            let d = rii * (cand - center);
            let nd = dist + d * d;
            if nd >= *best_d {
                break;
            }
            b[i] = cand as i64;
            self.search(level - 1, c, nd, b, best, best_d);
        }
    }

    pub fn decode(&self, codes: &[f64]) -> Vec<f64> {
        let c: Vec<f64> = codes.iter().map(|y| -(y + 0.5) / self.modulus).collect();
        let b = self.closest(&c);
        codes
            .iter()
            .zip(&b)
            .map(|(y, bi)| y + self.modulus * *bi as f64)
            .collect()
    }
}

pub fn clp_decode_exact(codes: &[f64], sigma: &DMatrix<f64>, alpha: f64, rate_bits: f64) -> Result<Vec<f64>> {
    if codes.len() != sigma.nrows() {
        return Err(invalid("codes and covariance dimensions differ"));
    }
    Ok(ClpDecoder::new(sigma, alpha, rate_bits)?.decode(codes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfRateReport {
    pub r_ifsc: f64,
    pub r_bench: f64,
    pub gap: f64,
    pub per_row_rates: Vec<f64>,
}

/// Per-row rates `1/2 log2(a_k^T (I + Sigma/D) a_k)`, their maximum and the
/// benchmark `(1/2K) log2 |I + Sigma/D|`.
pub fn rate_report(a: &IntegerMatrix, sigma: &DMatrix<f64>, distortion: f64) -> Result<IfRateReport> {
    let k = check_square(sigma, "covariance")?;
    if a.dim() != k {
        return Err(invalid("A and covariance dimensions differ"));
    }
    if !(distortion > 0.0) {
        return Err(invalid(format!("distortion must be > 0, got {distortion}")));
    }
    let m = DMatrix::identity(k, k) + sigma / distortion;
    let per_row_rates: Vec<f64> = a.rows().iter().map(|r| 0.5 * quad_form(&m, r).log2()).collect();
    let r_ifsc = per_row_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let r_bench = log2_det_spd(&m)? / (2.0 * k as f64);
    Ok(IfRateReport {
        r_ifsc,
        r_bench,
        gap: r_ifsc - r_bench,
        per_row_rates,
    })
}

/// `D = 1 / (12 alpha^2)`.
pub fn distortion_for_alpha(alpha: f64) -> f64 {
    1.0 / (12.0 * alpha * alpha)
}
