//! Dense row-major matrices and the handful of numerics the forward pass needs.
//!
//! Storage is `f32`. Dot products accumulate in `f64` and round once on store,
//! which keeps cached and recomputed forward passes within `1e-6` of each other.

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("matrix entry {i} is not finite")));
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

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }
}

/// Standard matrix product `a x b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::config(format!(
            "matmul dimension mismatch: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for r in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        accumulate_row(a.row(r), b, &mut acc);
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Ok(Matrix {
        rows: a.rows,
        cols: b.cols,
        data: out,
    })
}

/// Row vector times matrix, `x · m`, with `x.len() == m.rows()`.
///
/// Hot path of the forward pass; shapes are checked at model construction, so
/// a mismatch here is a programming error.
pub fn vecmat(x: &[f32], m: &Matrix) -> Vec<f32> {
    assert_eq!(x.len(), m.rows, "vecmat: vector length vs matrix rows");
    let mut acc = vec![0.0f64; m.cols];
    accumulate_row(x, m, &mut acc);
    acc.into_iter().map(|v| v as f32).collect()
}

/// `x · m + bias`, bias added in the same `f64` accumulator.
pub fn vecmat_bias(x: &[f32], m: &Matrix, bias: &[f32]) -> Vec<f32> {
    assert_eq!(x.len(), m.rows, "vecmat_bias: vector length vs matrix rows");
    assert_eq!(bias.len(), m.cols, "vecmat_bias: bias length vs matrix cols");
    let mut acc: Vec<f64> = bias.iter().map(|&b| b as f64).collect();
    accumulate_row(x, m, &mut acc);
    acc.into_iter().map(|v| v as f32).collect()
}

fn accumulate_row(x: &[f32], m: &Matrix, acc: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let xi = xi as f64;
        for (a, &w) in acc.iter_mut().zip(m.row(i)) {
            *a += xi * w as f64;
        }
    }
}

/// Dot product with `f64` accumulation.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .fold(0.0, |acc, x| acc + x)
}

pub fn l2_norm(x: &[f32]) -> f64 {
    dot(x, x).sqrt()
}

/// A probability vector over the vocabulary.
///
/// Held in `f64`: entropy diagnostics are compared against `1e-9` tolerances,
/// which `f32` probabilities cannot meet for vocabularies that are not a power
/// of two.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    /// Wraps an explicit probability vector. Entries must be in `[0, 1]` and sum to one within `1e-6`.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::input("empty distribution"));
        }
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input("probability outside [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::input(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(len: usize) -> Self {
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f32]) -> Result<TokenDistribution> {
    if logits.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::input("softmax input is not finite"));
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut probs: Vec<f64> = logits.iter().map(|&z| (z as f64 - max).exp()).collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(TokenDistribution { probs })
}

/// In-place softmax used for attention weights.
pub(crate) fn softmax_in_place(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        total += *s;
    }
    scores.iter_mut().for_each(|s| *s /= total);
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
pub fn layer_normalize(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::input(format!(
            "layer_normalize length mismatch: x {}, gain {}, bias {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::input("layer_normalize of an empty vector"));
    }
    Ok(layer_norm_unchecked(x, gain, bias, eps))
}

pub(crate) fn layer_norm_unchecked(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| ((v as f64 - mean) * inv * g as f64 + b as f64) as f32)
        .collect()
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let x = x as f64;
    (0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matmul_identity() {
        let id = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&id, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Matrix::from_rows(&[vec![1.5, -2.0, 3.0], vec![0.25, 7.0, -1.0]]).unwrap();
        let z = Matrix::zeros(3, 4);
        assert_eq!(matmul(&a, &z).unwrap(), Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn softmax_symmetric() {
        let p = softmax(&[0.0; 4]).unwrap();
        for &v in p.probs() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_log_three_offset() {
        for c in [-20.0f32, 0.0, 3.5, 40.0] {
            let p = softmax(&[c, c + 3f32.ln()]).unwrap();
            assert!((p.prob(0) - 0.25).abs() < 1e-6, "c={c}");
            assert!((p.prob(1) - 0.75).abs() < 1e-6, "c={c}");
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p.prob(0) - 1.0).abs() < 1e-12);
        assert!(p.prob(1) < 1e-300 || p.prob(1) == 0.0);
        assert!(p.probs().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let out = layer_normalize(&[2.5; 6], &[1.0; 6], &[0.0; 6], 1e-5).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_plus_minus_one() {
        let out = layer_normalize(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn layer_norm_zero_gain_returns_bias() {
        let out = layer_normalize(&[3.0, -1.0, 8.0], &[0.0; 3], &[0.5, -2.0, 1.0], 1e-5).unwrap();
        assert_eq!(out, vec![0.5, -2.0, 1.0]);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(layer_normalize(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        // torch.nn.functional.gelu(torch.tensor(1.0), approximate="tanh")
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);
        assert!((gelu(-1.0) + 0.158_808).abs() < 1e-5);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(logits in prop::collection::vec(-50.0f32..50.0, 1..64)) {
            let p = softmax(&logits).unwrap();
            let total: f64 = p.probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(p.probs().iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn softmax_shift_invariant(
            raw in prop::collection::vec(-3200i32..3200, 1..64),
            c in -6400i32..6400,
        ) {
            // multiples of 1/64 keep z + c exact in f32
            let logits: Vec<f32> = raw.iter().map(|&r| r as f32 / 64.0).collect();
            let p = softmax(&logits).unwrap();
            let shifted: Vec<f32> = logits.iter().map(|z| z + c as f32 / 64.0).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.probs().iter().zip(q.probs()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn layer_norm_standardizes(x in prop::collection::vec(-10.0f32..10.0, 2..64)) {
            let spread = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max)
                - x.iter().cloned().fold(f32::INFINITY, f32::min);
            prop_assume!(spread > 1e-2);
            let n = x.len();
            let out = layer_normalize(&x, &vec![1.0; n], &vec![0.0; n], 1e-9).unwrap();
            let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() < 1e-4);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
