mod support;

use support::equiv;

#[test]
fn adjacency_matches_loop_oracle() {
    let worst = equiv::adjacency_diff(11, 1000);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn aggregation_gate_matches_loop_oracle() {
    let worst = equiv::fag_diff(12, 1000);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn attention_matches_loop_oracle() {
    let worst = equiv::attention_diff(13, 1000);
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn correlations_match_pair_counting_oracles() {
    let (p, s, k) = equiv::metric_diffs(14, 1000);
    assert!(p < 1e-9 && s < 1e-9 && k < 1e-9, "plcc {p} srocc {s} krocc {k}");
}
