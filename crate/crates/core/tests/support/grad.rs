//! Finite-difference checks of every analytic backward pass. Each function
//! returns the worst relative error over `trials` random instances.

use ndarray::{Array1, Array2};
use rand::Rng;
use vqa_core::crop::graph::{
    adjacency, adjacency_backward, feature_aggregation_gate, feature_aggregation_gate_backward, graph_self_attention,
    graph_self_attention_backward, AttentionParams, Gate,
};
use vqa_core::crop::{CropModelConfig, Detection, FagMode, GraphNodeSet, Rect, S2cNet};
use vqa_core::losses::{loss_and_logit_grad, LossKind};
use vqa_core::nn::{normal_matrix, seeded_rng, SeededRng};
use vqa_core::params::Parameterized;
use vqa_core::quality_model::{decode_frame_scores, decode_frame_scores_backward, ScoreBins, ScoreDistribution};

use super::{flat, grad_rel_error, numeric_grad, uniform_mat, weighted_sum};

const H: f64 = 1e-6;

pub fn fcl(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let bins = ScoreBins::new();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let frames = rng.random_range(1..5);
        let logits = normal_matrix(frames, 100, 1.5, &mut rng);
        let y = rng.random_range(5.0..95.0);
        let sigma = rng.random_range(3.0..20.0);
        for kind in [LossKind::Fcl, LossKind::Mae, LossKind::Bce] {
            let (_, analytic) = loss_and_logit_grad(&logits, y, sigma, &bins, kind).unwrap();
            let numeric = numeric_grad(&logits, H, |l| {
                loss_and_logit_grad(l, y, sigma, &bins, kind).unwrap().0.objective(kind)
            });
            worst = worst.max(grad_rel_error(&flat(&analytic), &numeric));
        }
    }
    worst
}

pub fn decode(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let bins = ScoreBins::new();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let frames = rng.random_range(1..6);
        let probs = uniform_mat(&mut rng, frames, 100, 0.01, 0.99);
        let r: Vec<f64> = (0..frames).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |p: &Array2<f64>| -> f64 {
            let s = decode_frame_scores(&ScoreDistribution::new(p.clone()).unwrap(), &bins).unwrap();
            s.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let dist = ScoreDistribution::new(probs.clone()).unwrap();
        let scores = decode_frame_scores(&dist, &bins).unwrap();
        let analytic = decode_frame_scores_backward(&dist, &bins, &scores, &r);
        worst = worst.max(grad_rel_error(&flat(&analytic), &numeric_grad(&probs, H, f)));
    }
    worst
}

pub fn adjacency_grad(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(2..6);
        let sign = if t % 2 == 0 { 1.0 } else { -1.0 };
        let m_a = uniform_mat(&mut rng, n, n, 0.2, 1.5);
        let m_p = uniform_mat(&mut rng, n, n, 0.0, 1.0);
        let r = uniform_mat(&mut rng, n, n, -1.0, 1.0);
        let a = adjacency(&m_a, &m_p, sign).unwrap();
        let (d_ma, d_mp) = adjacency_backward(&m_a, &m_p, sign, &a, &r);
        let num_ma = numeric_grad(&m_a, H, |m| weighted_sum(&adjacency(m, &m_p, sign).unwrap(), &r));
        let num_mp = numeric_grad(&m_p, H, |m| weighted_sum(&adjacency(&m_a, m, sign).unwrap(), &r));
        worst = worst
            .max(grad_rel_error(&flat(&d_ma), &num_ma))
            .max(grad_rel_error(&flat(&d_mp), &num_mp));
    }
    worst
}

pub fn fag(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let n = rng.random_range(2..6);
        let d = rng.random_range(1..5);
        let a = uniform_mat(&mut rng, n, n, -0.5, 1.0);
        let x = normal_matrix(n, d, 1.0, &mut rng);
        let (gate, proj) = if t % 2 == 0 {
            (normal_matrix(n, d, 1.0, &mut rng), false)
        } else {
            (normal_matrix(d, d, 1.0, &mut rng), true)
        };
        let r = uniform_mat(&mut rng, n, d, -1.0, 1.0);
        let fwd = |a: &Array2<f64>, x: &Array2<f64>, g: &Array2<f64>| {
            let gate = if proj { Gate::Projection(g) } else { Gate::Hadamard(g) };
            weighted_sum(&feature_aggregation_gate(a, x, gate).unwrap(), &r)
        };
        let gate_ref = if proj { Gate::Projection(&gate) } else { Gate::Hadamard(&gate) };
        let g = feature_aggregation_gate_backward(&a, &x, gate_ref, &r);
        let z = gate.clone();
        worst = worst
            .max(grad_rel_error(&flat(&g.a), &numeric_grad(&a, H, |p| fwd(p, &x, &z))))
            .max(grad_rel_error(&flat(&g.x), &numeric_grad(&x, H, |p| fwd(&a, p, &z))))
            .max(grad_rel_error(&flat(&g.gate), &numeric_grad(&z, H, |p| fwd(&a, &x, p))));
    }
    worst
}

pub fn attention(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let n = rng.random_range(2..6);
        let d = rng.random_range(1..5);
        let xq = normal_matrix(n, d, 1.0, &mut rng);
        let x = normal_matrix(n, d, 1.0, &mut rng);
        let m_a = normal_matrix(n, n, 0.5, &mut rng);
        let m_p = normal_matrix(n, n, 0.5, &mut rng);
        let params = AttentionParams {
            q_w: normal_matrix(d, d, 0.7, &mut rng),
            k_w: normal_matrix(d, d, 0.7, &mut rng),
            v_w: normal_matrix(d, d, 0.7, &mut rng),
        };
        let r = uniform_mat(&mut rng, n, d, -1.0, 1.0);
        let out = graph_self_attention(&xq, &x, &m_a, &m_p, &params).unwrap();
        let g = graph_self_attention_backward(&xq, &x, &params, &out.weights, &r);
        let f = |xq: &Array2<f64>, x: &Array2<f64>, ma: &Array2<f64>, mp: &Array2<f64>, p: &AttentionParams| {
            weighted_sum(&graph_self_attention(xq, x, ma, mp, p).unwrap().out, &r)
        };
        let with = |which: usize, w: &Array2<f64>| {
            let mut p = params.clone();
            match which {
                0 => p.q_w = w.clone(),
                1 => p.k_w = w.clone(),
                _ => p.v_w = w.clone(),
            }
            p
        };
        let checks = [
            (flat(&g.x_query), numeric_grad(&xq, H, |v| f(v, &x, &m_a, &m_p, &params))),
            (flat(&g.x), numeric_grad(&x, H, |v| f(&xq, v, &m_a, &m_p, &params))),
            (flat(&g.m_a), numeric_grad(&m_a, H, |v| f(&xq, &x, v, &m_p, &params))),
            (flat(&g.m_p), numeric_grad(&m_p, H, |v| f(&xq, &x, &m_a, v, &params))),
            (flat(&g.params.q_w), numeric_grad(&params.q_w, H, |v| f(&xq, &x, &m_a, &m_p, &with(0, v)))),
            (flat(&g.params.k_w), numeric_grad(&params.k_w, H, |v| f(&xq, &x, &m_a, &m_p, &with(1, v)))),
            (flat(&g.params.v_w), numeric_grad(&params.v_w, H, |v| f(&xq, &x, &m_a, &m_p, &with(2, v)))),
        ];
        for (a, n) in checks {
            worst = worst.max(grad_rel_error(&a, &n));
        }
    }
    worst
}

fn random_rect(rng: &mut SeededRng, w: f64, h: f64) -> Rect {
    let x1 = rng.random_range(0.0..w * 0.7);
    let y1 = rng.random_range(0.0..h * 0.7);
    let x2 = rng.random_range(x1 + 1.0..=w);
    let y2 = rng.random_range(y1 + 1.0..=h);
    Rect::new(x1, y1, x2, y2).unwrap()
}

/// A random crop graph: up to `top_n` objects plus one candidate.
pub fn random_nodes(rng: &mut SeededRng, dim: usize, top_n: usize) -> GraphNodeSet {
    let (w, h) = (rng.random_range(16..64), rng.random_range(16..64));
    let objects: Vec<Detection> = (0..rng.random_range(0..=top_n))
        .map(|_| Detection {
            bbox: random_rect(rng, w as f64, h as f64),
            confidence: rng.random_range(0.0..1.0),
            feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let cand = random_rect(rng, w as f64, h as f64);
    let feature = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    GraphNodeSet::new(&objects, cand, feature, (w, h)).unwrap()
}

/// Gradient of the candidate score with respect to node features and every
/// parameter tensor of the scorer.
pub fn score_candidates(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let dim = rng.random_range(2..6);
        let mut cfg = CropModelConfig::new(dim, 3);
        cfg.hidden_dim = 6;
        cfg.fag_mode = if t % 2 == 0 { FagMode::Hadamard } else { FagMode::Projection };
        cfg.spatial_exp_sign = if t % 4 < 2 { 1 } else { -1 };
        let mut model = S2cNet::new(cfg, &mut rng).unwrap();
        // Make the hidden layer active so the check exercises the whole graph.
        model.mlp.b1 = Array1::from_elem(model.mlp.b1.len(), 0.5);
        let nodes = random_nodes(&mut rng, dim, 3);
        let trace = model.forward(&nodes).unwrap();
        let grads = model.backward(&nodes, &trace, 1.0);

        let num_x = numeric_grad(&nodes.features, H, |x| {
            let mut n = nodes.clone();
            n.features = x.clone();
            model.score(&n).unwrap()
        });
        worst = worst.max(grad_rel_error(&flat(&grads.features), &num_x));

        let analytic: Vec<Vec<f64>> = grads.params.param_slices().iter().map(|s| s.to_vec()).collect();
        for (ti, a) in analytic.iter().enumerate() {
            let numeric: Vec<f64> = (0..a.len())
                .map(|i| vqa_core::gradcheck::central_difference(&mut model, ti, i, H, |m| m.score(&nodes).unwrap()))
                .collect();
            worst = worst.max(grad_rel_error(a, &numeric));
        }
    }
    worst
}
