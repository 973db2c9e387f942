//! Numerical building blocks shared by every other module: a small dense
//! row-major matrix, vector helpers, the principal branch of Lambert's W,
//! a deterministic top-singular-pair routine and seeded random streams.
//!
//! Randomness uses ChaCha8 (`rand_chacha::ChaCha8Rng`) with an explicit
//! 64-bit seed and a 64-bit stream id. ChaCha output is specified bit for bit,
//! so a given `(seed, stream)` pair yields the same draws on every platform.
//! The generator is fixed for the lifetime of this crate; changing it would
//! invalidate every pinned seed in the test-suite.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the storage. Callers are responsible for keeping the
    /// entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        self.iter_rows().map(|r| dot(r, v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &s) in self.iter_rows().zip(v) {
            axpy(s, r, &mut out);
        }
        out
    }

    /// Matrix with the rows at `idx`, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` under `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::Shape(format!(
                "cannot stack {} columns on {}",
                other.cols, self.cols
            )));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.iter_rows() {
            axpy(1.0, r, &mut m);
        }
        if self.rows > 0 {
            scale(1.0 / self.rows as f64, &mut m);
        }
        m
    }

    /// Per-column `(min, max)`.
    pub fn col_ranges(&self) -> Vec<(f64, f64)> {
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); self.cols];
        for r in self.iter_rows() {
            for (o, &v) in out.iter_mut().zip(r) {
                o.0 = o.0.min(v);
                o.1 = o.1.max(v);
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + alpha·x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn scale(alpha: f64, x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v *= alpha);
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

// ---------------------------------------------------------------------------
// Lambert W
// ---------------------------------------------------------------------------

const INV_E: f64 = 0.367_879_441_171_442_33;

/// Width of the window above the branch point served by the series.
const BRANCH_WINDOW: f64 = 1e-6;

/// Series of W₀ around the branch point in `p = √(2(ex+1))`.
fn branch_series(p: f64) -> f64 {
    const C: [f64; 8] = [
        -1.0,
        1.0,
        -1.0 / 3.0,
        11.0 / 72.0,
        -43.0 / 540.0,
        769.0 / 17280.0,
        -221.0 / 8505.0,
        680_863.0 / 43_545_600.0,
    ];
    C.iter().rev().fold(0.0, |acc, &c| acc * p + c)
}

/// Principal branch `W₀(x)` of Lambert's W function, the solution `w ≥ -1`
/// of `w·eʷ = x`.
///
/// Inputs down to `-1/e - 1e-15` are accepted (and treated as the branch
/// point); anything smaller is a domain error.
pub fn lambert_w0(x: f64) -> Result<f64> {
    if x.is_nan() {
        return Err(Error::Domain("lambert_w0 of NaN".into()));
    }
    if x < -INV_E - 1e-15 {
        return Err(Error::Domain(format!("lambert_w0 undefined for {x} < -1/e")));
    }
    if x == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    let q = x + INV_E;
    if q <= BRANCH_WINDOW {
        let p = (2.0 * std::f64::consts::E * q.max(0.0)).sqrt();
        return Ok(branch_series(p));
    }

    let mut w = if x < -0.25 {
        branch_series((2.0 * std::f64::consts::E * q).sqrt())
    } else if x < 3.0 {
        let l = x.ln_1p();
        l * (1.0 - (1.0 + l).ln() / (2.0 + l))
    } else {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };

    // Halley iteration on f(w) = w·eʷ - x.
    for _ in 0..64 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        if !step.is_finite() {
            break;
        }
        w -= step;
        if step.abs() <= 1e-15 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Shape("solve_spd needs a square system".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if !(d > 0.0) {
                    return Err(Error::Domain("matrix is not positive definite".into()));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l.get(i, k) * y[k]).sum();
        y[i] = (b[i] - s) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l.get(k, i) * x[k]).sum();
        x[i] = (y[i] - s) / l.get(i, i);
    }
    Ok(x)
}

/// Golden-section search for a minimizer of a unimodal `f` on `[lo, hi]`.
/// Returns `(argmin, min)`.
pub fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const R: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - R * (hi - lo);
    let mut d = lo + R * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (hi - lo).abs() <= tol * (1.0 + c.abs()) {
            break;
        }
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - R * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + R * (hi - lo);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

// ---------------------------------------------------------------------------
// Top singular pair
// ---------------------------------------------------------------------------

/// Columns at or below this size go through the Gram-matrix route.
const GRAM_MAX_COLS: usize = 64;
const POWER_ITERS: usize = 200;
const POWER_RTOL: f64 = 1e-12;
const START_SEED: u64 = 0x5eed_0f5e_7e20;

fn start_vector(d: usize) -> Vec<f64> {
    let mut rng = SeededRng::new(START_SEED, d as u64);
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = norm(&v);
    scale(1.0 / n, &mut v);
    v
}

/// Leading right singular vector `v` (unit norm) and singular value `σ` of
/// `m`. The sign of `v` is fixed so that its largest-magnitude entry is
/// positive.
///
/// For narrow matrices (`cols ≤ 64`) the Gram matrix `MᵀM` is formed and
/// repeatedly squared before a short power iteration, which removes the
/// dependence on the spectral gap. Wider matrices use plain power iteration
/// on `MᵀM` (200 iterations or a relative change below 1e-12). Both start
/// from a vector drawn from a fixed internal seed, so the output is
/// deterministic.
pub fn top_singular_vector(m: &Matrix) -> (Vec<f64>, f64) {
    let d = m.cols();
    if d == 0 {
        return (Vec::new(), 0.0);
    }
    let mut e1 = vec![0.0; d];
    e1[0] = 1.0;
    if m.rows() == 0 || m.as_slice().iter().all(|&v| v == 0.0) {
        return (e1, 0.0);
    }

    let mut v = start_vector(d);
    if d <= GRAM_MAX_COLS {
        let gram = gram_matrix(m);
        let mut b = gram.clone();
        // Squaring: b ← b² / ‖b²‖_F, so b → projector onto the top eigenspace.
        for _ in 0..40 {
            let mut sq = square_sym(&b);
            let fro = norm(sq.as_slice());
            if fro == 0.0 || !fro.is_finite() {
                break;
            }
            scale(1.0 / fro, sq.as_mut_slice());
            let delta = dist(sq.as_slice(), b.as_slice());
            b = sq;
            if delta <= 1e-15 {
                break;
            }
        }
        let mut u = b.matvec(&v);
        if norm(&u) < 1e-8 {
            // start vector orthogonal to the top space; fall back to columns of b
            u = (0..d)
                .map(|j| (0..d).map(|i| b.get(i, j)).collect::<Vec<_>>())
                .max_by(|a, c| norm(a).total_cmp(&norm(c)))
                .unwrap_or(e1.clone());
        }
        v = u;
        normalize(&mut v);
        for _ in 0..3 {
            let mut u = gram.matvec(&v);
            if norm(&u) == 0.0 {
                break;
            }
            normalize(&mut u);
            v = u;
        }
    } else {
        let mut prev = 0.0;
        for _ in 0..POWER_ITERS {
            let mv = m.matvec(&v);
            let mut u = m.t_matvec(&mv);
            let lam = norm(&u);
            if lam == 0.0 {
                break;
            }
            scale(1.0 / lam, &mut u);
            v = u;
            if (lam - prev).abs() <= POWER_RTOL * lam {
                break;
            }
            prev = lam;
        }
    }
    fix_sign(&mut v);
    let sigma = norm(&m.matvec(&v));
    (v, sigma)
}

fn normalize(v: &mut [f64]) {
    let n = norm(v);
    if n > 0.0 {
        scale(1.0 / n, v);
    }
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0_f64;
    for &x in v.iter() {
        if x.abs() > best.abs() {
            best = x;
        }
    }
    if best < 0.0 {
        scale(-1.0, v);
    }
}

fn gram_matrix(m: &Matrix) -> Matrix {
    let d = m.cols();
    let mut g = Matrix::zeros(d, d);
    for r in m.iter_rows() {
        for i in 0..d {
            if r[i] == 0.0 {
                continue;
            }
            let gi = g.row_mut(i);
            axpy(r[i], r, gi);
        }
    }
    g
}

fn square_sym(b: &Matrix) -> Matrix {
    let d = b.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let s: f64 = (0..d).map(|k| b.get(i, k) * b.get(k, j)).sum();
            out.set(i, j, s);
            out.set(j, i, s);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Randomness
// ---------------------------------------------------------------------------

/// Seeded ChaCha8 stream. Equal `(seed, stream)` pairs give bit-identical
/// sequences on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen::<u64>()
    }

    /// Fisher–Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }

    /// Uniform direction on the unit sphere in `d` dimensions.
    pub fn unit_vector(&mut self, d: usize) -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| self.normal()).collect();
            let n = norm(&v);
            if n > 1e-300 {
                scale(1.0 / n, &mut v);
                return v;
            }
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-sensitive hash of several integers into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_solve() {
        let a = Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let x = solve_spd(&a, &[2.0, 1.0]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-15 && x[1].abs() < 1e-15);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(solve_spd(&bad, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let (x, fx) = golden_section_min(|t| (t - 0.3) * (t - 0.3) + 2.0, -1.0, 4.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-7);
        assert!((fx - 2.0).abs() < 1e-13);
    }

    #[test]
    fn lambert_fixed_points() {
        assert_eq!(lambert_w0(0.0).unwrap(), 0.0);
        assert!((lambert_w0(std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        assert!((lambert_w0(-INV_E).unwrap() + 1.0).abs() < 1e-15);
        assert!(lambert_w0(-INV_E - 1e-16).is_ok());
        assert!(matches!(lambert_w0(-0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn lambert_at_inverse_e_matches_bisection() {
        // bisection oracle on w·eʷ = 1/e over [0, 1]
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        while hi - lo > 1e-14 {
            let mid = 0.5 * (lo + hi);
            if mid * mid.exp() < INV_E {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let w = lambert_w0(INV_E).unwrap();
        assert!((w - 0.5 * (lo + hi)).abs() < 1e-12);
        assert!((w - 0.27846).abs() < 1e-5);
    }

    #[test]
    fn lambert_near_branch_point() {
        for k in 0..50 {
            let x = -INV_E + 1e-7 * k as f64 / 50.0 + 1e-18;
            let w = lambert_w0(x).unwrap();
            assert!((w * w.exp() - x).abs() <= 1e-12, "x={x}");
        }
    }

    #[test]
    fn singular_pairs_small() {
        let m = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (v, s) = top_singular_vector(&m);
        assert!((s - 3.0).abs() < 1e-12);
        assert!((v[0].abs() - 1.0).abs() < 1e-12);

        let m = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (v, s) = top_singular_vector(&m);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        let r = 0.5f64.sqrt();
        assert!((v[0] - r).abs() < 1e-12 && (v[1] - r).abs() < 1e-12);

        let m = Matrix::zeros(3, 2);
        let (v, s) = top_singular_vector(&m);
        assert_eq!(s, 0.0);
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn power_path_for_wide_matrices() {
        // 2 rows, 80 columns: rank ≤ 2, route through power iteration
        let mut rng = SeededRng::new(3, 0);
        let data: Vec<f64> = (0..160).map(|_| rng.normal()).collect();
        let m = Matrix::new(2, 80, data).unwrap();
        let (v, s) = top_singular_vector(&m);
        // compare with the 2x2 Gram M·Mᵀ eigenvalue
        let a = dot(m.row(0), m.row(0));
        let b = dot(m.row(0), m.row(1));
        let c = dot(m.row(1), m.row(1));
        let lam = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
        assert!((s * s - lam).abs() <= 1e-8 * lam);
        assert!((norm(&v) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn rng_is_reproducible_and_streams_differ() {
        let a: Vec<u64> = {
            let mut r = SeededRng::new(42, 7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = SeededRng::new(42, 7);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = SeededRng::new(42, 8);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }
}
