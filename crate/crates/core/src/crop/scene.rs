//! Synthetic scenes with one salient object, for training and checking the
//! crop scorer without a real detector.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::detection::{Rect, RegionFeaturizer, StubDetector};
use super::model::{build_node_sets, CropExample};
use crate::error::Result;
use crate::nn::SeededRng;

/// Side of the square salient object in pixels.
pub const SALIENT_SIDE: usize = 6;

#[derive(Debug, Clone)]
pub struct SalientScene {
    /// `[H, W, 3]` in `[0, 1]`.
    pub image: Array3<f32>,
    pub salient: Rect,
    pub distractor: Rect,
    /// The four quadrants, in reading order.
    pub candidates: Vec<Rect>,
}

fn quadrants(side: usize) -> Vec<Rect> {
    let h = (side / 2) as f64;
    let s = side as f64;
    [(0.0, 0.0), (h, 0.0), (0.0, h), (h, h)]
        .iter()
        .map(|&(x, y)| Rect { x1: x, y1: y, x2: (x + h).min(s), y2: (y + h).min(s) })
        .collect()
}

impl SalientScene {
    /// A dim, noisy background with a bright square wholly inside one
    /// quadrant and a faint distractor box elsewhere. `side` must be at least
    /// `2 * SALIENT_SIDE`.
    pub fn generate(side: usize, rng: &mut SeededRng) -> Self {
        assert!(side >= 2 * SALIENT_SIDE, "scene side {side} is too small");
        let half = side / 2;
        let candidates = quadrants(side);
        let q = rng.random_range(0..4);
        let (qx, qy) = ((q % 2) * half, (q / 2) * half);
        let sx = qx + rng.random_range(0..=half - SALIENT_SIDE);
        let sy = qy + rng.random_range(0..=half - SALIENT_SIDE);
        let salient = Rect {
            x1: sx as f64,
            y1: sy as f64,
            x2: (sx + SALIENT_SIDE) as f64,
            y2: (sy + SALIENT_SIDE) as f64,
        };
        let d_side = SALIENT_SIDE - 1;
        let dx = rng.random_range(0..=side - d_side);
        let dy = rng.random_range(0..=side - d_side);
        let distractor = Rect {
            x1: dx as f64,
            y1: dy as f64,
            x2: (dx + d_side) as f64,
            y2: (dy + d_side) as f64,
        };

        let noise = Normal::new(0.0, 0.04).expect("valid std");
        let mut image = Array3::from_shape_fn((side, side, 3), |_| (0.2 + noise.sample(rng)) as f32);
        let bright = [0.95f32, 0.85, 0.3];
        for y in sy..sy + SALIENT_SIDE {
            for x in sx..sx + SALIENT_SIDE {
                for (c, &b) in bright.iter().enumerate() {
                    image[[y, x, c]] = b + noise.sample(rng) as f32;
                }
            }
        }
        image.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self {
            image,
            salient,
            distractor,
            candidates,
        }
    }

    /// Fraction of the salient object inside each candidate.
    pub fn targets(&self) -> Vec<f64> {
        self.candidates
            .iter()
            .map(|c| c.intersection_area(&self.salient) / self.salient.area())
            .collect()
    }

    /// Index of the candidate that contains the salient object.
    pub fn salient_index(&self) -> usize {
        self.candidates
            .iter()
            .position(|c| c.contains(&self.salient))
            .expect("salient object lies inside one quadrant")
    }

    /// Detector that reports the salient box with high confidence and the
    /// distractor with low confidence.
    pub fn detector(&self, featurizer: &RegionFeaturizer) -> StubDetector {
        StubDetector::new(vec![(self.salient, 0.9), (self.distractor, 0.3)], featurizer.clone())
    }

    pub fn example(&self, featurizer: &RegionFeaturizer, top_n: usize) -> Result<CropExample> {
        Ok(CropExample {
            node_sets: build_node_sets(self.image.view(), &self.candidates, &self.detector(featurizer), top_n)?,
            targets: self.targets(),
        })
    }
}
