//! MAE, Gaussian soft labels, per-bin BCE and the frame consistency loss
//! (`fcl = mae * bce`).
//!
//! Scales: decoded frame scores and the MAE target live on `[0, 1]`; the
//! Gaussian labels are centred on the same target expressed on `[0, 100]`.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Result, VqaError};
use crate::quality_model::{decode_frame_scores, decode_frame_scores_backward, ScoreBins, ScoreDistribution, NUM_BINS};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Smallest admissible label width: below it the peak label exceeds 1.
pub fn min_sigma() -> f64 {
    1.0 / (2.0 * PI).sqrt()
}

/// Gaussian labels `d_fi = exp(-(s_i - y)^2 / (2 sigma^2)) / (sigma sqrt(2 pi))`,
/// identical for every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLabelField {
    labels: Array2<f64>,
    sigma: f64,
}

impl GaussianLabelField {
    pub fn labels(&self) -> &Array2<f64> {
        &self.labels
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

pub fn gaussian_labels(y_hundred: f64, sigma: f64, bins: &ScoreBins, frames: usize) -> Result<GaussianLabelField> {
    if !(sigma.is_finite() && sigma > min_sigma()) {
        return Err(VqaError::InvalidArgument(format!(
            "sigma {sigma} must exceed 1/sqrt(2 pi) = {:.6} so labels stay below 1",
            min_sigma()
        )));
    }
    if !y_hundred.is_finite() {
        return Err(VqaError::NonFinite {
            context: "gaussian label centre".into(),
        });
    }
    if frames == 0 {
        return Err(VqaError::Empty("gaussian labels need at least one frame"));
    }
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let row: Vec<f64> = bins
        .values()
        .iter()
        .map(|&s| norm * (-(s - y_hundred).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let labels = Array2::from_shape_fn((frames, bins.len()), |(_, i)| row[i]);
    Ok(GaussianLabelField { labels, sigma })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mae: f64,
    pub bce: f64,
    pub fcl: f64,
}

impl LossBreakdown {
    pub fn new(mae: f64, bce: f64) -> Self {
        Self { mae, bce, fcl: mae * bce }
    }

    pub fn objective(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Fcl => self.fcl,
            LossKind::Mae => self.mae,
            LossKind::Bce => self.bce,
        }
    }

    /// Componentwise mean.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Self {
            mae: items.iter().map(|l| l.mae).sum::<f64>() / n,
            bce: items.iter().map(|l| l.bce).sum::<f64>() / n,
            fcl: items.iter().map(|l| l.fcl).sum::<f64>() / n,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.mae.is_finite() && self.bce.is_finite() && self.fcl.is_finite()
    }
}

/// Training objective; `mae` and `bce` exist for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Fcl,
    Mae,
    Bce,
}

/// `|mean(frame_scores) - y|`.
pub fn mae_loss(frame_scores: &[f64], y_unit: f64) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(VqaError::Empty("mae loss needs at least one frame"));
    }
    if !(0.0..=1.0).contains(&y_unit) {
        return Err(VqaError::InvalidArgument(format!("target {y_unit} is outside [0, 1]")));
    }
    let mean = frame_scores.iter().sum::<f64>() / frame_scores.len() as f64;
    Ok((mean - y_unit).abs())
}

fn check_label_shape(dist: &ScoreDistribution, labels: &GaussianLabelField) -> Result<()> {
    if dist.probs().dim() != labels.labels().dim() {
        return Err(VqaError::shape(
            "bce inputs",
            format!("{:?}", labels.labels().dim()),
            format!("{:?}", dist.probs().dim()),
        ));
    }
    Ok(())
}

/// Mean soft-label binary cross-entropy over all frames and bins.
pub fn bce_loss(dist: &ScoreDistribution, labels: &GaussianLabelField) -> Result<f64> {
    check_label_shape(dist, labels)?;
    let total: f64 = dist
        .probs()
        .iter()
        .zip(labels.labels().iter())
        .map(|(&p, &d)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(d * p.ln() + (1.0 - d) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / dist.probs().len() as f64)
}

/// Frame consistency loss for one video. `y_hundred` is the target on the
/// 0-100 scale; the MAE term compares against `y_hundred / 100`.
pub fn fcl_loss(dist: &ScoreDistribution, y_hundred: f64, sigma: f64, bins: &ScoreBins) -> Result<LossBreakdown> {
    let labels = gaussian_labels(y_hundred, sigma, bins, dist.frames())?;
    let scores = decode_frame_scores(dist, bins)?;
    let mae = mae_loss(&scores, y_hundred / 100.0)?;
    let bce = bce_loss(dist, &labels)?;
    Ok(LossBreakdown::new(mae, bce))
}

/// Loss and its gradient with respect to the head logits `[F, 100]`.
///
/// Both factors of the product are differentiated; at an exact MAE tie the
/// zero subgradient is used.
pub fn loss_and_logit_grad(
    logits: &Array2<f64>,
    y_hundred: f64,
    sigma: f64,
    bins: &ScoreBins,
    kind: LossKind,
) -> Result<(LossBreakdown, Array2<f64>)> {
    ensure_finite(logits.iter(), || "logits".to_string())?;
    if logits.ncols() != NUM_BINS {
        return Err(VqaError::shape("logits", NUM_BINS, logits.ncols()));
    }
    let dist = ScoreDistribution::from_logits(logits)?;
    let labels = gaussian_labels(y_hundred, sigma, bins, dist.frames())?;
    let scores = decode_frame_scores(&dist, bins)?;
    let y_unit = y_hundred / 100.0;
    let mae = mae_loss(&scores, y_unit)?;
    let bce = bce_loss(&dist, &labels)?;
    let loss = LossBreakdown::new(mae, bce);

    let frames = dist.frames();
    let mean = scores.iter().sum::<f64>() / frames as f64;
    let sign = if mean > y_unit {
        1.0
    } else if mean < y_unit {
        -1.0
    } else {
        0.0
    };
    let d_scores = vec![sign / frames as f64; frames];
    let d_mae_probs = decode_frame_scores_backward(&dist, bins, &scores, &d_scores);

    let count = dist.probs().len() as f64;
    let mut d_bce_probs = Array2::zeros(dist.probs().raw_dim());
    ndarray::Zip::from(&mut d_bce_probs)
        .and(dist.probs())
        .and(labels.labels())
        .for_each(|g, &p, &d| {
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                *g = (p - d) / (p * (1.0 - p)) / count;
            }
        });

    let (w_mae, w_bce) = match kind {
        LossKind::Fcl => (bce, mae),
        LossKind::Mae => (1.0, 0.0),
        LossKind::Bce => (0.0, 1.0),
    };
    let mut grad = d_mae_probs * w_mae + d_bce_probs * w_bce;
    grad.zip_mut_with(dist.probs(), |g, &p| *g *= p * (1.0 - p));
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_cases() {
        let frames: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|v| v / 100.0).collect();
        assert!(mae_loss(&frames, 0.02).unwrap() < 1e-15);
        assert_eq!(mae_loss(&[0.5], 0.5).unwrap(), 0.0);
        assert!((mae_loss(&[0.1, 0.3], 0.5).unwrap() - 0.3).abs() < 1e-15);
        assert!(mae_loss(&[], 0.5).is_err());
        assert!(mae_loss(&[0.5], 1.5).is_err());
    }

    #[test]
    fn gaussian_peak_and_shoulder() {
        let g = gaussian_labels(50.0, 10.0, &ScoreBins::new(), 2).unwrap();
        let peak = 1.0 / (10.0 * (2.0 * PI).sqrt());
        assert!((g.labels()[[0, 50]] - peak).abs() < 1e-15);
        assert!((g.labels()[[1, 60]] - 0.024197072451914336).abs() < 1e-12);
        for k in 0..50 {
            assert_eq!(g.labels()[[0, 50 - k]], g.labels()[[0, 50 + k]]);
        }
    }

    #[test]
    fn gaussian_rejects_narrow_sigma() {
        assert!(gaussian_labels(50.0, 0.39, &ScoreBins::new(), 1).is_err());
        assert!(gaussian_labels(50.0, min_sigma(), &ScoreBins::new(), 1).is_err());
        assert!(gaussian_labels(50.0, 0.4, &ScoreBins::new(), 1).is_ok());
    }

    #[test]
    fn gaussian_mass_close_to_one() {
        let g = gaussian_labels(45.0, 8.0, &ScoreBins::new(), 1).unwrap();
        assert!((g.labels().sum() - 1.0).abs() < 0.05);
    }

    #[test]
    fn bce_closed_forms() {
        let bins = ScoreBins::new();
        let half = ScoreDistribution::new(Array2::from_elem((2, 100), 0.5)).unwrap();
        let labels = GaussianLabelField {
            labels: Array2::from_elem((2, 100), 0.5),
            sigma: 1.0,
        };
        assert!((bce_loss(&half, &labels).unwrap() - 2f64.ln()).abs() < 1e-12);

        let ones = ScoreDistribution::new(Array2::ones((1, 100))).unwrap();
        let one_labels = GaussianLabelField {
            labels: Array2::ones((1, 100)),
            sigma: 1.0,
        };
        assert!(bce_loss(&ones, &one_labels).unwrap() < 1e-6);

        let wrong = gaussian_labels(50.0, 10.0, &bins, 3).unwrap();
        assert!(bce_loss(&half, &wrong).is_err());
    }

    #[test]
    fn fcl_is_product() {
        let l = LossBreakdown::new(0.3, 2f64.ln());
        assert!((l.fcl - 0.207944154).abs() < 1e-9);
    }

    #[test]
    fn fcl_zero_when_mean_matches() {
        // two frames: one-hot-ish at 30 and at 50 -> mean 0.40
        let mut p = Array2::zeros((2, 100));
        p[[0, 30]] = 1.0;
        p[[1, 50]] = 1.0;
        let dist = ScoreDistribution::new(p).unwrap();
        let l = fcl_loss(&dist, 40.0, 12.0, &ScoreBins::new()).unwrap();
        assert!(l.mae < 1e-15);
        assert_eq!(l.fcl, l.mae * l.bce);
        assert!(l.bce > 0.0);
    }
}
