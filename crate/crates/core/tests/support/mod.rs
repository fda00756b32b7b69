//! Naive reference implementations and random instance generators shared by
//! the integration tests and the acceptance suite. Oracles use plain nested
//! loops over `Vec`s so they share no code with the library.

#![allow(dead_code)]

pub mod equiv;
pub mod fairness;
pub mod grad;

use ndarray::Array2;
use rand::Rng;
use vqa_core::nn::SeededRng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Array2<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows, cols), |(i, j)| m[i][j])
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..b.len() {
        for j in 0..b[i].len() {
            worst = worst.max((a[[i, j]] - b[i][j]).abs());
        }
    }
    worst
}

pub fn uniform_mat(rng: &mut SeededRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

// ---- graph ----

pub fn oracle_adjacency(m_a: &Mat, m_p: &Mat, sign: f64) -> Mat {
    let n = m_a.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        let mut denom = 0.0;
        for j in 0..n {
            denom += m_a[i][j] * (sign * m_p[i][j]).exp();
        }
        for j in 0..n {
            out[i][j] = m_a[i][j] * (sign * m_p[i][j]).exp() / denom;
        }
    }
    out
}

pub fn oracle_fag_hadamard(a: &Mat, x: &Mat, z: &Mat) -> Mat {
    let (n, d) = (x.len(), x[0].len());
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for k in 0..d {
            let mut s = 0.0;
            for j in 0..n {
                s += a[i][j] * z[j][k] * x[j][k];
            }
            out[i][k] = if s > 0.0 { s } else { 0.0 };
        }
    }
    out
}

pub fn oracle_fag_projection(a: &Mat, x: &Mat, w: &Mat) -> Mat {
    matmul(&matmul(a, x), w)
        .into_iter()
        .map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect())
        .collect()
}

pub fn oracle_attention(xq: &Mat, x: &Mat, m_a: &Mat, m_p: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let q = matmul(xq, wq);
    let k = matmul(x, wk);
    let v = matmul(x, wv);
    let n = x.len();
    let dk = q[0].len() as f64;
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let mut logits = vec![0.0; n];
        for j in 0..n {
            let mut dot = 0.0;
            for t in 0..q[i].len() {
                dot += q[i][t] * k[j][t];
            }
            logits[j] = dot / dk.sqrt() + m_a[i][j] + m_p[i][j];
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for j in 0..n {
            let w = (logits[j] - max).exp() / total;
            for c in 0..v[j].len() {
                out[i][c] += w * v[j][c];
            }
        }
    }
    out
}

// ---- metrics ----

pub fn oracle_plcc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average rank by counting: `1 + #smaller + (#equal - 1) / 2`.
pub fn oracle_ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|&a| {
            let smaller = v.iter().filter(|&&b| b < a).count() as f64;
            let equal = v.iter().filter(|&&b| b == a).count() as f64;
            1.0 + smaller + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn oracle_srocc(x: &[f64], y: &[f64]) -> f64 {
    oracle_plcc(&oracle_ranks(x), &oracle_ranks(y))
}

/// Tau-b by enumerating every pair.
pub fn oracle_krocc(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let (mut conc, mut disc, mut tx, mut ty) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tx += 1.0;
            }
            if dy == 0.0 {
                ty += 1.0;
            }
            if dx != 0.0 && dy != 0.0 {
                if (dx > 0.0) == (dy > 0.0) {
                    conc += 1.0;
                } else {
                    disc += 1.0;
                }
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    (conc - disc) / ((n0 - tx) * (n0 - ty)).sqrt()
}

/// A random pair for correlation tests; values drawn from a small grid so
/// ties are common. Returns `None` if either side is constant.
pub fn random_pair(rng: &mut SeededRng, n: usize) -> Option<(Vec<f64>, Vec<f64>)> {
    let levels = rng.random_range(2..12);
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.5).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|v| {
            if rng.random_bool(0.3) {
                rng.random_range(0..levels) as f64
            } else {
                v * 2.0 + rng.random_range(-3..=3) as f64
            }
        })
        .collect();
    let constant = |v: &[f64]| v.iter().all(|a| *a == v[0]);
    (!constant(&x) && !constant(&y)).then_some((x, y))
}

// ---- gradients ----

/// Floor for the error denominator: a gradient that is exactly zero is only
/// reproduced by central differences up to round-off (~1e-10).
pub const GRAD_SCALE_FLOOR: f64 = 1e-6;

/// `||a - b|| / max(||a|| + ||b||, GRAD_SCALE_FLOOR)`.
pub fn grad_rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale.max(GRAD_SCALE_FLOOR)
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for idx in 0..x.len() {
        let (i, j) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[i, j]];
        probe[[i, j]] = orig + h;
        let plus = f(&probe);
        probe[[i, j]] = orig - h;
        let minus = f(&probe);
        probe[[i, j]] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

pub fn weighted_sum(out: &Array2<f64>, r: &Array2<f64>) -> f64 {
    (out * r).sum()
}

pub fn flat(a: &Array2<f64>) -> Vec<f64> {
    a.iter().copied().collect()
}
