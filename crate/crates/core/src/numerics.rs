//! Dense vector and matrix primitives, the ball projection, seeded RNG
//! streams and a central-difference gradient oracle.
//!
//! Vectors are plain `f64` slices; [`Mat`] is a row-major dense matrix that
//! rejects non-finite entries when it is built from external data.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting NaN/Inf.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(
                format!("{rows}x{cols} = {} values", rows * cols),
                values.len(),
            ));
        }
        ensure_finite(&values, "matrix")?;
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                values.push(f(i, j));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(
                format!("inner dimension {}", self.cols),
                other.rows,
            ));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.values[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out_row);
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(self.cols, x.len()));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn frobenius_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, s: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        axpy(s, &other.values, &mut self.values);
        Ok(())
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.values[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.values[i * self.cols + j]
    }
}

pub fn ensure_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += a * x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine of the angle between `u` and `v`.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::shape(u.len(), v.len()));
    }
    let nu = norm_sq(u).sqrt();
    let nv = norm_sq(v).sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::Degenerate(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Euclidean projection onto the ball `{x : ‖x‖² ≤ radius_sq}`.
pub fn project(x: &[f64], radius_sq: f64) -> Vec<f64> {
    let mut out = x.to_vec();
    project_in_place(&mut out, radius_sq);
    out
}

pub fn project_in_place(x: &mut [f64], radius_sq: f64) {
    debug_assert!(radius_sq > 0.0);
    let n2 = norm_sq(x);
    if n2 > radius_sq {
        let s = (radius_sq / n2).sqrt();
        x.iter_mut().for_each(|v| *v *= s);
        // rounding can leave the norm a hair above the boundary
        if norm_sq(x) > radius_sq {
            let s = (radius_sq / norm_sq(x)).sqrt() * (1.0 - f64::EPSILON);
            x.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("objective near coordinate {i}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration.
pub fn top_eigenvalue(m: &Mat, iters: usize) -> Result<f64> {
    if m.rows() != m.cols() || m.rows() == 0 {
        return Err(Error::shape(
            "non-empty square matrix",
            format!("{:?}", m.shape()),
        ));
    }
    let n = m.rows();
    // deterministic, non-degenerate start vector
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + (i as f64 * 0.618_033_988_7).fract())
        .collect();
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let w = m.matvec(&v)?;
        let nw = norm_sq(&w).sqrt();
        if nw == 0.0 {
            return Ok(0.0);
        }
        lambda = dot(&v, &w) / norm_sq(&v);
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Ok(lambda)
}

/// What a random stream is used for. Part of the stream key so that two
/// consumers never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Purpose {
    Prototypes = 1,
    Partition = 2,
    Drift = 3,
    Adoption = 4,
    Migration = 5,
    Participation = 6,
    WarmUp = 7,
    EncoderInit = 8,
    EncoderBatch = 9,
    EncoderNoise = 10,
    TaskBatch = 11,
    TaskTrain = 12,
    TestSet = 13,
    ClusterInit = 14,
    Sweep = 15,
    Export = 16,
    Misc = 17,
}

/// Counter-based random stream keyed by `(seed, entity, round, purpose)`.
///
/// The same key always yields the same draw sequence no matter which worker
/// evaluates it or in what order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub entity: u32,
    pub round: u32,
    pub purpose: Purpose,
}

impl RngStream {
    pub fn new(seed: u64, entity: usize, round: usize, purpose: Purpose) -> Self {
        assert!(
            entity < (1 << 24),
            "entity id {entity} exceeds the stream key range"
        );
        Self {
            seed,
            entity: entity as u32,
            round: u32::try_from(round).expect("round index exceeds u32"),
            purpose,
        }
    }

    pub fn stream_id(&self) -> u64 {
        ((self.purpose as u64) << 56) | ((self.entity as u64) << 32) | self.round as u64
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id());
        rng
    }
}
