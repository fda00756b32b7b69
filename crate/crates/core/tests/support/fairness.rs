//! Two videos with the same decoded mean: one with large inter-frame swings,
//! one perfectly flat. When the mean hits the target both losses vanish.

use ndarray::Array2;
use rand::Rng;
use vqa_core::losses::fcl_loss;
use vqa_core::nn::seeded_rng;
use vqa_core::quality_model::{ScoreBins, ScoreDistribution};

/// Per-frame distributions whose decoded scores are exactly `scores`: mass is
/// split between the two bins that bracket `100 * score`.
pub fn distribution_with_scores(scores: &[f64]) -> ScoreDistribution {
    let mut p = Array2::zeros((scores.len(), 100));
    for (f, &v) in scores.iter().enumerate() {
        let pos = v * 100.0;
        let lo = (pos.floor() as usize).min(98);
        let frac = pos - lo as f64;
        p[[f, lo]] = 1.0 - frac;
        p[[f, lo + 1]] = frac;
    }
    ScoreDistribution::new(p).expect("valid probabilities")
}

/// Largest `fcl` over `trials` random targets, across both videos of each pair.
pub fn worst_fcl(seed: u64, trials: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let bins = ScoreBins::new();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        // Keep every frame score inside the representable [0, 0.99].
        let target = rng.random_range(0.25..0.74);
        let swing = rng.random_range(0.05..0.24);
        let frames = 2 * rng.random_range(1..5);
        let varied: Vec<f64> = (0..frames)
            .map(|f| if f % 2 == 0 { target + swing } else { target - swing })
            .collect();
        let flat = vec![target; frames];
        let sigma = rng.random_range(1.0..30.0);
        for scores in [varied, flat] {
            let dist = distribution_with_scores(&scores);
            let loss = fcl_loss(&dist, target * 100.0, sigma, &bins).expect("valid inputs");
            worst = worst.max(loss.fcl.abs());
        }
    }
    worst
}
