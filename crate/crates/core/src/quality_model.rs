//! Frame-level quality predictor.
//!
//! A [`FeatureProvider`] turns a `[F, H, W, C]` frame stack into `[F, D]`
//! embeddings; the [`DistributionHead`] maps every frame independently to 100
//! per-bin sigmoid probabilities, and [`decode_frame_scores`] turns each row
//! into a scalar score by expected value over the score bins.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array1, Array2, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::data_io::VideoSample;
use crate::error::{ensure_finite, Result, VqaError};
use crate::nn::{self, SeededRng};

/// Number of discrete score levels.
pub const NUM_BINS: usize = 100;

/// The score levels `s_i = i` for `i` in `0..100`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBins {
    values: Vec<f64>,
}

impl ScoreBins {
    pub fn new() -> Self {
        Self {
            values: (0..NUM_BINS).map(|i| i as f64).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Default for ScoreBins {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-frame probabilities over the score bins, shape `[F, 100]`.
///
/// Each entry is an independent Bernoulli probability; rows need not sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDistribution {
    probs: Array2<f64>,
}

impl ScoreDistribution {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (frames, bins) = probs.dim();
        if frames == 0 {
            return Err(VqaError::Empty("score distribution has no frames"));
        }
        if bins != NUM_BINS {
            return Err(VqaError::shape("score distribution", format!("[F, {NUM_BINS}]"), format!("[{frames}, {bins}]")));
        }
        if let Some(((f, i), v)) = probs.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(VqaError::InvalidArgument(format!(
                "probability {v} at frame {f}, bin {i} is outside [0, 1]"
            )));
        }
        Ok(Self { probs })
    }

    /// Elementwise sigmoid over head logits.
    pub fn from_logits(logits: &Array2<f64>) -> Result<Self> {
        ensure_finite(logits.iter(), || "distribution head logits".to_string())?;
        Self::new(logits.mapv(nn::sigmoid))
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }
}

/// `[F, D]` frame embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    embeddings: Array2<f64>,
}

impl FrameFeatures {
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        let (f, d) = embeddings.dim();
        if f == 0 || d == 0 {
            return Err(VqaError::shape("frame features", "[F >= 1, D >= 1]", format!("[{f}, {d}]")));
        }
        for (frame, row) in embeddings.rows().into_iter().enumerate() {
            if !row.iter().all(|v| v.is_finite()) {
                return Err(VqaError::Frame {
                    frame,
                    reason: "non-finite feature value".into(),
                });
            }
        }
        Ok(Self { embeddings })
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn frames(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreScale {
    /// Decoded scores and normalised targets live in `[0, 1]`.
    #[default]
    Unit,
    /// Scores reported on `[0, 100]`.
    Hundred,
}

impl ScoreScale {
    /// Convert a decoded unit-scale score to this scale.
    pub fn from_unit(self, unit: f64) -> f64 {
        match self {
            ScoreScale::Unit => unit,
            ScoreScale::Hundred => unit * 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityModelConfig {
    #[serde(default = "QualityModelConfig::default_provider")]
    pub provider: String,
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub frame_count: usize,
    #[serde(default)]
    pub score_scale: ScoreScale,
}

impl QualityModelConfig {
    fn default_provider() -> String {
        ToyMeanPool::NAME.to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hidden_dim == 0 || self.frame_count == 0 {
            return Err(VqaError::Config(
                "model.embedding_dim, model.hidden_dim and model.frame_count must be positive".into(),
            ));
        }
        Ok(())
    }
}

impl Default for QualityModelConfig {
    fn default() -> Self {
        Self {
            provider: Self::default_provider(),
            embedding_dim: 16,
            hidden_dim: 32,
            frame_count: 8,
            score_scale: ScoreScale::Unit,
        }
    }
}

/// Backbone abstraction: `[F, H, W, C]` frames in, `[F, D]` features out.
pub trait FeatureProvider: Send + Sync {
    fn name(&self) -> &str;

    fn embedding_dim(&self) -> usize;

    fn extract(&self, frames: ArrayView4<'_, f32>) -> Result<Array2<f64>>;
}

/// Built-in provider: per-channel global mean pooling followed by a fixed
/// random projection to `D` dimensions.
#[derive(Debug, Clone)]
pub struct ToyMeanPool {
    projection: Array2<f64>,
}

impl ToyMeanPool {
    pub const NAME: &'static str = "toy-mean-pool";

    pub fn new(channels: usize, embedding_dim: usize, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        Self {
            projection: nn::normal_matrix(channels, embedding_dim, 1.0, &mut rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.projection.nrows()
    }
}

impl FeatureProvider for ToyMeanPool {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn embedding_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, frames: ArrayView4<'_, f32>) -> Result<Array2<f64>> {
        let (f, h, w, c) = frames.dim();
        if c != self.channels() {
            return Err(VqaError::shape("toy-mean-pool channels", self.channels(), c));
        }
        if h == 0 || w == 0 {
            return Err(VqaError::shape("toy-mean-pool frame size", "H, W >= 1", format!("{h}x{w}")));
        }
        let mut pooled = Array2::<f64>::zeros((f, c));
        for (frame, mut row) in frames.outer_iter().zip(pooled.rows_mut()) {
            for px in frame.rows() {
                for (acc, &v) in row.iter_mut().zip(px.iter()) {
                    *acc += v as f64;
                }
            }
            row.mapv_inplace(|s| s / (h * w) as f64);
        }
        Ok(pooled.dot(&self.projection))
    }
}

/// Arguments handed to provider constructors.
#[derive(Debug, Clone, Copy)]
pub struct ProviderParams {
    pub channels: usize,
    pub embedding_dim: usize,
    pub seed: u64,
}

type ProviderCtor = Box<dyn Fn(&ProviderParams) -> Result<Box<dyn FeatureProvider>> + Send + Sync>;

/// Name-keyed provider constructors, so configs can select a backbone by string.
pub struct ProviderRegistry {
    ctors: BTreeMap<String, ProviderCtor>,
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        Self {
            ctors: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut reg = Self::empty();
        reg.register(ToyMeanPool::NAME, |p| {
            Ok(Box::new(ToyMeanPool::new(p.channels, p.embedding_dim, p.seed)) as Box<dyn FeatureProvider>)
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, ctor: F)
    where
        F: Fn(&ProviderParams) -> Result<Box<dyn FeatureProvider>> + Send + Sync + 'static,
    {
        self.ctors.insert(name.to_string(), Box::new(ctor));
    }

    pub fn build(&self, name: &str, params: &ProviderParams) -> Result<Box<dyn FeatureProvider>> {
        let ctor = self.ctors.get(name).ok_or_else(|| VqaError::Provider {
            name: name.to_string(),
            reason: format!("not registered (known: {})", self.names().join(", ")),
        })?;
        ctor(params)
    }

    pub fn names(&self) -> Vec<String> {
        self.ctors.keys().cloned().collect()
    }
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderRegistry").field("names", &self.names()).finish()
    }
}

/// Run the provider over a video's frames and validate the `[F, D]` contract.
pub fn extract_features(video: &VideoSample, provider: &dyn FeatureProvider) -> Result<FrameFeatures> {
    extract_frame_features(video.frames.view(), provider)
}

pub fn extract_frame_features(frames: ArrayView4<'_, f32>, provider: &dyn FeatureProvider) -> Result<FrameFeatures> {
    let f = frames.len_of(Axis(0));
    if f == 0 {
        return Err(VqaError::Empty("video has no sampled frames"));
    }
    let out = provider.extract(frames).map_err(|e| VqaError::Provider {
        name: provider.name().to_string(),
        reason: e.to_string(),
    })?;
    if out.dim() != (f, provider.embedding_dim()) {
        return Err(VqaError::Provider {
            name: provider.name().to_string(),
            reason: format!(
                "returned shape {:?}, expected [{f}, {}]",
                out.dim(),
                provider.embedding_dim()
            ),
        });
    }
    FrameFeatures::new(out)
}

/// Per-frame MLP head: `D -> hidden (ReLU) -> 100 logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionHead {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub hidden_pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub logits: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub hidden_w: Array2<f64>,
    pub hidden_b: Array1<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array1<f64>,
}

impl DistributionHead {
    pub fn new(embedding_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            hidden_w: nn::he_matrix(embedding_dim, hidden_dim, rng),
            hidden_b: Array1::zeros(hidden_dim),
            out_w: nn::normal_matrix(hidden_dim, NUM_BINS, 0.1 / (hidden_dim as f64).sqrt(), rng),
            out_b: Array1::zeros(NUM_BINS),
        }
    }

    /// All-zero head; every output probability is exactly 0.5.
    pub fn zeros(embedding_dim: usize, hidden_dim: usize) -> Self {
        Self {
            hidden_w: Array2::zeros((embedding_dim, hidden_dim)),
            hidden_b: Array1::zeros(hidden_dim),
            out_w: Array2::zeros((hidden_dim, NUM_BINS)),
            out_b: Array1::zeros(NUM_BINS),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.hidden_w.nrows()
    }

    pub fn forward(&self, features: &FrameFeatures) -> Result<HeadCache> {
        if features.dim() != self.embedding_dim() {
            return Err(VqaError::shape("distribution head input", self.embedding_dim(), features.dim()));
        }
        let hidden_pre = nn::affine(features.embeddings(), &self.hidden_w, &self.hidden_b);
        let hidden = hidden_pre.mapv(nn::relu);
        let logits = nn::affine(&hidden, &self.out_w, &self.out_b);
        Ok(HeadCache {
            hidden_pre,
            hidden,
            logits,
        })
    }

    pub fn backward(&self, features: &FrameFeatures, cache: &HeadCache, d_logits: &Array2<f64>) -> HeadGrads {
        let out_w = cache.hidden.t().dot(d_logits);
        let out_b = d_logits.sum_axis(Axis(0));
        let mut d_hidden = d_logits.dot(&self.out_w.t());
        d_hidden.zip_mut_with(&cache.hidden_pre, |g, &pre| {
            if pre <= 0.0 {
                *g = 0.0
            }
        });
        HeadGrads {
            hidden_w: features.embeddings().t().dot(&d_hidden),
            hidden_b: d_hidden.sum_axis(Axis(0)),
            out_w,
            out_b,
        }
    }
}

/// Sigmoid probabilities for every frame and bin.
pub fn predict_distribution(features: &FrameFeatures, head: &DistributionHead) -> Result<ScoreDistribution> {
    let cache = head.forward(features)?;
    ScoreDistribution::from_logits(&cache.logits)
}

/// `y_f = sum_i p_fi * s_i / (sum_i p_fi * 100)` for every frame.
pub fn decode_frame_scores(dist: &ScoreDistribution, bins: &ScoreBins) -> Result<Vec<f64>> {
    if bins.len() != NUM_BINS {
        return Err(VqaError::shape("score bins", NUM_BINS, bins.len()));
    }
    dist.probs()
        .rows()
        .into_iter()
        .enumerate()
        .map(|(frame, row)| {
            let mass: f64 = row.sum();
            if mass <= 0.0 {
                return Err(VqaError::Frame {
                    frame,
                    reason: "zero probability mass; expected score is undefined".into(),
                });
            }
            let weighted: f64 = row.iter().zip(bins.values()).map(|(p, s)| p * s).sum();
            Ok(weighted / (mass * 100.0))
        })
        .collect()
}

/// Vector-Jacobian product of [`decode_frame_scores`]: given upstream
/// `d_scores[f]`, returns `d probs` of shape `[F, 100]`.
///
/// `d y_f / d p_fi = (s_i - 100 y_f) / (100 * sum_i p_fi)`.
pub fn decode_frame_scores_backward(
    dist: &ScoreDistribution,
    bins: &ScoreBins,
    scores: &[f64],
    d_scores: &[f64],
) -> Array2<f64> {
    let mut grad = Array2::zeros(dist.probs().raw_dim());
    for (((row, mut g_row), &y), &dy) in dist
        .probs()
        .rows()
        .into_iter()
        .zip(grad.rows_mut())
        .zip(scores)
        .zip(d_scores)
    {
        let mass: f64 = row.sum();
        for (g, &s) in g_row.iter_mut().zip(bins.values()) {
            *g = dy * (s - 100.0 * y) / (100.0 * mass);
        }
    }
    grad
}

/// Mean of the frame scores.
pub fn predict_video_score(frame_scores: &[f64]) -> Result<f64> {
    if frame_scores.is_empty() {
        return Err(VqaError::Empty("no frame scores"));
    }
    Ok(frame_scores.iter().sum::<f64>() / frame_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array4};

    fn bins() -> ScoreBins {
        ScoreBins::new()
    }

    #[test]
    fn bins_are_identity() {
        let b = bins();
        assert_eq!(b.len(), 100);
        assert!(b.values().iter().enumerate().all(|(i, &v)| v == i as f64));
    }

    #[test]
    fn toy_provider_shape_and_constant_video() {
        let provider = ToyMeanPool::new(3, 5, 11);
        let frames = Array4::<f32>::from_elem((2, 4, 4, 3), 0.25);
        let out = provider.extract(frames.view()).unwrap();
        assert_eq!(out.dim(), (2, 5));
        assert_eq!(out.row(0), out.row(1));
    }

    struct NanAtFrame(usize);

    impl FeatureProvider for NanAtFrame {
        fn name(&self) -> &str {
            "nan"
        }
        fn embedding_dim(&self) -> usize {
            2
        }
        fn extract(&self, frames: ArrayView4<'_, f32>) -> Result<Array2<f64>> {
            let mut out = Array2::zeros((frames.len_of(Axis(0)), 2));
            out[[self.0, 1]] = f64::NAN;
            Ok(out)
        }
    }

    #[test]
    fn nan_provider_names_frame() {
        let frames = Array4::<f32>::zeros((3, 2, 2, 1));
        let err = extract_frame_features(frames.view(), &NanAtFrame(2)).unwrap_err();
        assert!(matches!(err, VqaError::Frame { frame: 2, .. }), "{err}");
    }

    #[test]
    fn registry_builds_builtin_and_rejects_unknown() {
        let reg = ProviderRegistry::with_builtins();
        let p = reg
            .build(ToyMeanPool::NAME, &ProviderParams { channels: 3, embedding_dim: 4, seed: 1 })
            .unwrap();
        assert_eq!(p.embedding_dim(), 4);
        assert!(reg.build("convnext", &ProviderParams { channels: 3, embedding_dim: 4, seed: 1 }).is_err());
    }

    #[test]
    fn zero_head_gives_half() {
        let feats = FrameFeatures::new(Array2::from_elem((3, 4), 0.7)).unwrap();
        let dist = predict_distribution(&feats, &DistributionHead::zeros(4, 6)).unwrap();
        assert_eq!(dist.probs().dim(), (3, 100));
        assert!(dist.probs().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn saturated_logit_bin() {
        let mut head = DistributionHead::zeros(2, 3);
        head.out_b[42] = 40.0;
        let feats = FrameFeatures::new(array![[1.0, -1.0]]).unwrap();
        let dist = predict_distribution(&feats, &head).unwrap();
        assert!(dist.probs()[[0, 42]] > 1.0 - 1e-12);
    }

    #[test]
    fn decode_one_hot_and_uniform() {
        let mut p = Array2::zeros((2, 100));
        p[[0, 50]] = 1.0;
        p.row_mut(1).fill(1.0);
        let scores = decode_frame_scores(&ScoreDistribution::new(p).unwrap(), &bins()).unwrap();
        assert_eq!(scores[0], 0.5);
        assert!((scores[1] - 0.495).abs() < 1e-15);
    }

    #[test]
    fn decode_zero_row_errors() {
        let mut p = Array2::from_elem((3, 100), 0.2);
        p.row_mut(1).fill(0.0);
        let err = decode_frame_scores(&ScoreDistribution::new(p).unwrap(), &bins()).unwrap_err();
        assert!(matches!(err, VqaError::Frame { frame: 1, .. }));
    }

    #[test]
    fn distribution_rejects_out_of_range() {
        assert!(ScoreDistribution::new(Array2::from_elem((1, 100), 1.5)).is_err());
        assert!(ScoreDistribution::new(Array2::from_elem((1, 99), 0.5)).is_err());
        assert!(ScoreDistribution::new(Array2::zeros((0, 100))).is_err());
    }

    #[test]
    fn video_score_is_mean() {
        assert!((predict_video_score(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(predict_video_score(&[0.7]).unwrap(), 0.7);
        assert_eq!(predict_video_score(&[1.0, 2.0, 3.0]).unwrap(), predict_video_score(&[2.0, 2.0, 2.0]).unwrap());
        assert!(predict_video_score(&[]).is_err());
    }

    #[test]
    fn decode_monotone_in_upper_bins() {
        let p = Array2::from_shape_fn((1, 100), |(_, i)| 0.1 + 0.005 * ((i * 37) % 100) as f64 / 1.0);
        let base = ScoreDistribution::new(p.clone()).unwrap();
        let y = decode_frame_scores(&base, &bins()).unwrap()[0];
        let above = (0..100).find(|&i| i as f64 > 100.0 * y).unwrap();
        let mut q = p;
        q[[0, above]] += 0.05;
        let y2 = decode_frame_scores(&ScoreDistribution::new(q).unwrap(), &bins()).unwrap()[0];
        assert!(y2 > y);
    }
}
