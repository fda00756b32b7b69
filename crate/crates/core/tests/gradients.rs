mod support;

use support::grad;

const TOL: f64 = 1e-4;

#[test]
fn loss_gradients() {
    let worst = grad::fcl(1, 20);
    assert!(worst < TOL, "{worst}");
}

#[test]
fn decode_gradient() {
    let worst = grad::decode(2, 20);
    assert!(worst < TOL, "{worst}");
}

#[test]
fn adjacency_gradient() {
    let worst = grad::adjacency_grad(3, 20);
    assert!(worst < TOL, "{worst}");
}

#[test]
fn aggregation_gate_gradient() {
    let worst = grad::fag(4, 20);
    assert!(worst < TOL, "{worst}");
}

#[test]
fn attention_gradient() {
    let worst = grad::attention(5, 20);
    assert!(worst < TOL, "{worst}");
}

#[test]
fn candidate_score_gradient() {
    let worst = grad::score_candidates(6, 20);
    assert!(worst < TOL, "{worst}");
}
