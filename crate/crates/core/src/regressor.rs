//! The distribution head bound to a training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VqaError};
use crate::fgm::{Evaluation, Trainable};
use crate::losses::{loss_and_logit_grad, LossBreakdown, LossKind};
use crate::params::{flat, flat_mut, standardize, ParamKind, ParamMeta, Parameterized};
use crate::quality_model::{decode_frame_scores, predict_distribution, predict_video_score, DistributionHead, FrameFeatures, ScoreBins};

/// One training video: frame embeddings and its MOS on the 0..100 scale.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub features: FrameFeatures,
    pub y_hundred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRegressor {
    pub head: DistributionHead,
    pub loss: LossKind,
    /// Label width, fixed once per run.
    pub sigma: f64,
    #[serde(skip)]
    bins: ScoreBins,
}

impl QualityRegressor {
    pub fn new(head: DistributionHead, loss: LossKind, sigma: f64) -> Self {
        Self {
            head,
            loss,
            sigma,
            bins: ScoreBins::new(),
        }
    }

    /// Video score in `[0, 0.99]`.
    pub fn predict(&self, features: &FrameFeatures) -> Result<f64> {
        let dist = predict_distribution(features, &self.head)?;
        predict_video_score(&decode_frame_scores(&dist, &self.bins)?)
    }

    /// Mean loss terms over `items` without computing gradients.
    pub fn loss_on(&self, items: &[TrainItem]) -> Result<LossBreakdown> {
        let parts = items
            .iter()
            .map(|it| {
                let cache = self.head.forward(&it.features)?;
                loss_and_logit_grad(&cache.logits, it.y_hundred, self.sigma, &self.bins, self.loss).map(|(l, _)| l)
            })
            .collect::<Result<Vec<_>>>()?;
        LossBreakdown::mean(&parts).ok_or(VqaError::Empty("loss items"))
    }
}

impl Parameterized for QualityRegressor {
    fn param_meta(&self) -> Vec<ParamMeta> {
        let h = &self.head;
        vec![
            ParamMeta { name: "head.hidden.weight".into(), kind: ParamKind::Weight, len: h.hidden_w.len() },
            ParamMeta { name: "head.hidden.bias".into(), kind: ParamKind::Bias, len: h.hidden_b.len() },
            ParamMeta { name: "head.out.weight".into(), kind: ParamKind::Weight, len: h.out_w.len() },
            ParamMeta { name: "head.out.bias".into(), kind: ParamKind::Bias, len: h.out_b.len() },
        ]
    }

    fn param_slices(&self) -> Vec<&[f64]> {
        let h = &self.head;
        vec![flat(&h.hidden_w), flat(&h.hidden_b), flat(&h.out_w), flat(&h.out_b)]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let h = &mut self.head;
        vec![
            flat_mut(&mut h.hidden_w),
            flat_mut(&mut h.hidden_b),
            flat_mut(&mut h.out_w),
            flat_mut(&mut h.out_b),
        ]
    }
}

impl Trainable for QualityRegressor {
    type Item = TrainItem;

    fn evaluate(&self, batch: &[&TrainItem]) -> Result<Evaluation> {
        if batch.is_empty() {
            return Err(VqaError::Empty("training batch"));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        let mut parts = Vec::with_capacity(batch.len());
        for item in batch {
            let cache = self.head.forward(&item.features)?;
            let (loss, d_logits) = loss_and_logit_grad(&cache.logits, item.y_hundred, self.sigma, &self.bins, self.loss)?;
            let mut g = self.head.backward(&item.features, &cache, &d_logits);
            standardize(&mut g.hidden_w);
            standardize(&mut g.out_w);
            for (acc, part) in grads.iter_mut().zip([flat(&g.hidden_w), flat(&g.hidden_b), flat(&g.out_w), flat(&g.out_b)]) {
                acc.iter_mut().zip(part).for_each(|(a, p)| *a += p * scale);
            }
            parts.push(loss);
        }
        let breakdown = LossBreakdown::mean(&parts).ok_or(VqaError::Empty("training batch"))?;
        Ok(Evaluation {
            loss: breakdown.objective(self.loss),
            breakdown: Some(breakdown),
            grads,
        })
    }
}
