//! Library kernels against the loop oracles. Each function returns the worst
//! absolute difference over `trials` random instances.

use rand::Rng;
use vqa_core::crop::graph::{adjacency, feature_aggregation_gate, graph_self_attention, AttentionParams, Gate};
use vqa_core::metrics::{krocc, plcc, srocc};
use vqa_core::nn::{normal_matrix, seeded_rng};

use super::*;

pub fn adjacency_diff(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=4);
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        let m_a = uniform_mat(&mut rng, n, n, 0.1, 2.0);
        let m_p = uniform_mat(&mut rng, n, n, 0.0, 2.0);
        let lib = adjacency(&m_a, &m_p, sign).unwrap();
        worst = worst.max(max_abs_diff(&lib, &oracle_adjacency(&to_mat(&m_a), &to_mat(&m_p), sign)));
    }
    worst
}

pub fn fag_diff(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let a = uniform_mat(&mut rng, n, n, -1.0, 1.0);
        let x = normal_matrix(n, d, 1.0, &mut rng);
        let diff = if t % 2 == 0 {
            let z = normal_matrix(n, d, 1.0, &mut rng);
            let lib = feature_aggregation_gate(&a, &x, Gate::Hadamard(&z)).unwrap();
            max_abs_diff(&lib, &oracle_fag_hadamard(&to_mat(&a), &to_mat(&x), &to_mat(&z)))
        } else {
            let w = normal_matrix(d, d, 1.0, &mut rng);
            let lib = feature_aggregation_gate(&a, &x, Gate::Projection(&w)).unwrap();
            max_abs_diff(&lib, &oracle_fag_projection(&to_mat(&a), &to_mat(&x), &to_mat(&w)))
        };
        worst = worst.max(diff);
    }
    worst
}

pub fn attention_diff(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=4);
        let xq = normal_matrix(n, d, 1.0, &mut rng);
        let x = normal_matrix(n, d, 1.0, &mut rng);
        let m_a = normal_matrix(n, n, 1.0, &mut rng);
        let m_p = uniform_mat(&mut rng, n, n, 0.0, 3.0);
        let p = AttentionParams {
            q_w: normal_matrix(d, d, 1.0, &mut rng),
            k_w: normal_matrix(d, d, 1.0, &mut rng),
            v_w: normal_matrix(d, d, 1.0, &mut rng),
        };
        let lib = graph_self_attention(&xq, &x, &m_a, &m_p, &p).unwrap();
        let oracle = oracle_attention(
            &to_mat(&xq),
            &to_mat(&x),
            &to_mat(&m_a),
            &to_mat(&m_p),
            &to_mat(&p.q_w),
            &to_mat(&p.k_w),
            &to_mat(&p.v_w),
        );
        worst = worst.max(max_abs_diff(&lib.out, &oracle));
    }
    worst
}

/// Worst `(plcc, srocc, krocc)` differences over random tied pairs, `n <= 50`.
pub fn metric_diffs(seed: u64, trials: usize) -> (f64, f64, f64) {
    let mut rng = seeded_rng(seed);
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    let mut done = 0;
    while done < trials {
        let n = rng.random_range(2..=50);
        let Some((x, y)) = random_pair(&mut rng, n) else { continue };
        worst.0 = worst.0.max((plcc(&x, &y).unwrap() - oracle_plcc(&x, &y)).abs());
        worst.1 = worst.1.max((srocc(&x, &y).unwrap() - oracle_srocc(&x, &y)).abs());
        worst.2 = worst.2.max((krocc(&x, &y).unwrap() - oracle_krocc(&x, &y)).abs());
        done += 1;
    }
    worst
}
