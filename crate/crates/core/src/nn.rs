//! Small dense-layer helpers shared by the quality head and the crop scorer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gaussian matrix with the given standard deviation.
pub fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

pub fn normal_vector<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Array1<f64> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    Array1::from_shape_simple_fn(len, || normal.sample(rng))
}

/// He-style initialisation for a `fan_in x fan_out` weight.
pub fn he_matrix<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    normal_matrix(fan_in, fan_out, (2.0 / fan_in as f64).sqrt(), rng)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// `x @ w + b` with `b` broadcast over rows.
pub fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b.view().insert_axis(Axis(0))
}

/// Row-wise softmax, max-shifted.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of a row-wise softmax given its output `p` and upstream `dp`.
pub fn softmax_rows_backward(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.raw_dim());
    for ((p_row, dp_row), mut o_row) in p.rows().into_iter().zip(dp.rows()).zip(out.rows_mut()) {
        let inner: f64 = p_row.iter().zip(dp_row.iter()).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in o_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *o = pv * (dv - inner);
        }
    }
    out
}
