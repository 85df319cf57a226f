//! Dense kernels, nonlinearities, softmax cross-entropy, the seeded RNG and
//! dropout-mask sampling.
//!
//! Everything is `f64` and row-major. The hot paths used by the recurrent
//! cells (`Matrix::gemv_acc` and friends) accumulate into caller-provided
//! buffers so a forward/backward sweep does not allocate per product.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    ///
    /// Panics on ragged input; meant for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Uniform on `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let r = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.uniform_range(-r, r)).collect();
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out += self · x`. Shapes are debug-asserted; callers validate.
    #[inline]
    pub fn gemv_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o += dot(row, x);
        }
    }

    /// `out += selfᵀ · g`.
    #[inline]
    pub fn gemv_t_acc(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (&gi, row) in g.iter().zip(self.data.chunks_exact(self.cols)) {
            if gi == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
    }

    /// `self += g · xᵀ`.
    #[inline]
    pub fn outer_acc(&mut self, g: &[f64], x: &[f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        let cols = self.cols;
        for (&gi, row) in g.iter().zip(self.data.chunks_exact_mut(cols)) {
            if gi == 0.0 {
                continue;
            }
            for (w, &xj) in row.iter_mut().zip(x) {
                *w += gi * xj;
            }
        }
    }
}

/// Whether a parameter tensor receives weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
}

/// Uniform access to matrix- and vector-shaped parameters.
pub trait Tensor {
    fn shape(&self) -> (usize, usize);
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
}

impl Tensor for Matrix {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl Tensor for Vector {
    fn shape(&self) -> (usize, usize) {
        (self.0.len(), 1)
    }
    fn values(&self) -> &[f64] {
        &self.0
    }
    fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense vector.
#[derive(Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl fmt::Debug for Vector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.0.iter()).finish()
    }
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Inverted-dropout mask: every entry is `0` or `1 / (1 - p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVector {
    data: Vec<f64>,
    drop_prob: f64,
}

impl MaskVector {
    /// The all-ones mask (nothing dropped).
    pub fn identity(len: usize) -> Self {
        MaskVector {
            data: vec![1.0; len],
            drop_prob: 0.0,
        }
    }

    /// A mask that drops everything. Not reachable through sampling for
    /// `p < 1`; useful for probing which paths a mask controls.
    pub fn zeros(len: usize) -> Self {
        MaskVector {
            data: vec![0.0; len],
            drop_prob: 0.0,
        }
    }

    /// Builds a mask from an explicit keep pattern.
    pub fn from_keep(keep: &[bool], drop_prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::InvalidProbability(drop_prob));
        }
        let scale = 1.0 / (1.0 - drop_prob);
        Ok(MaskVector {
            data: keep.iter().map(|&k| if k { scale } else { 0.0 }).collect(),
            drop_prob,
        })
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }

    /// `x ⊙ self`.
    pub fn apply(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.data.len() {
            return Err(shape_err("mask apply", x.len(), self.data.len()));
        }
        Ok(x.iter()
            .zip(&self.data)
            .map(|(a, m)| a * m)
            .collect::<Vec<_>>()
            .into())
    }
}

impl Deref for MaskVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

/// Seeded, counter-based generator (ChaCha8). Same seed and same call
/// sequence give the same stream on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Draws a unit-level Bernoulli mask. Consumes exactly `len` uniforms.
pub fn sample_mask(len: usize, drop_prob: f64, rng: &mut Rng) -> Result<MaskVector> {
    if !(0.0..1.0).contains(&drop_prob) {
        return Err(Error::InvalidProbability(drop_prob));
    }
    let keep = 1.0 / (1.0 - drop_prob);
    let data = (0..len)
        .map(|_| if rng.uniform() < drop_prob { 0.0 } else { keep })
        .collect();
    Ok(MaskVector { data, drop_prob })
}

/// `W·x (+ b)`.
pub fn affine(w: &Matrix, x: &[f64], b: Option<&[f64]>) -> Result<Vector> {
    if w.cols() != x.len() {
        return Err(shape_err(
            "affine",
            format!("W {}x{}", w.rows(), w.cols()),
            format!("x {}", x.len()),
        ));
    }
    let mut out = match b {
        Some(b) if b.len() != w.rows() => {
            return Err(shape_err(
                "affine",
                format!("W {}x{}", w.rows(), w.cols()),
                format!("b {}", b.len()),
            ))
        }
        Some(b) => b.to_vec(),
        None => vec![0.0; w.rows()],
    };
    w.gemv_acc(x, &mut out);
    Ok(out.into())
}

#[inline]
pub fn sigm(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigm,
    Tanh,
    Hadamard,
    Add,
    /// `1 - a`
    SubFromOne,
}

/// Pointwise map. Unary kinds take `b = None`, binary kinds need `b`.
pub fn elementwise(kind: Elementwise, a: &[f64], b: Option<&[f64]>) -> Result<Vector> {
    use Elementwise::*;
    let out: Vec<f64> = match (kind, b) {
        (Sigm, None) => a.iter().map(|&u| sigm(u)).collect(),
        (Tanh, None) => a.iter().map(|u| u.tanh()).collect(),
        (SubFromOne, None) => a.iter().map(|u| 1.0 - u).collect(),
        (Hadamard | Add, Some(b)) => {
            if a.len() != b.len() {
                return Err(shape_err("elementwise", a.len(), b.len()));
            }
            let f = if kind == Hadamard {
                |x: f64, y: f64| x * y
            } else {
                |x: f64, y: f64| x + y
            };
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        }
        (Hadamard | Add, None) => return Err(shape_err("elementwise", a.len(), "missing operand")),
        (_, Some(b)) => return Err(shape_err("elementwise", a.len(), b.len())),
    };
    Ok(out.into())
}

/// Numerically stable softmax with the negative log-likelihood of `target`.
pub fn softmax_xent(logits: &[f64], target: usize) -> Result<(f64, Vector)> {
    if target >= logits.len() {
        return Err(Error::Index {
            what: "logits",
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= sum;
    }
    let loss = sum.ln() - (logits[target] - max);
    Ok((loss, probs.into()))
}

/// Sum of squared entries over a set of weight tensors.
pub fn l2_norm_sq<'a>(weights: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    weights
        .into_iter()
        .map(|w| w.iter().map(|v| v * v).sum::<f64>())
        .sum()
}
