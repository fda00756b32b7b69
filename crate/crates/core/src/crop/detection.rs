//! Object detection and region features feeding the crop graph.
//!
//! Detectors are pluggable. [`StubDetector`] returns configured boxes;
//! [`SidecarDetector`] reads boxes, features and confidences produced offline
//! by an external model. Candidate-region features come from the provider's
//! [`RegionFeaturizer`], which pools pixel statistics inside the region and in
//! the discarded border around it.

use std::path::Path;

use ndarray::{s, Array2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqaError};
use crate::nn;

/// Axis-aligned box in pixel coordinates, `x2 > x1`, `y2 > y1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let r = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x2 <= x1 || y2 <= y1 {
            return Err(VqaError::InvalidArgument(format!("degenerate box {:?}", r.to_array())));
        }
        Ok(r)
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn whole(width: usize, height: usize) -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: width as f64,
            y2: height as f64,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width as f64 && self.y2 <= height as f64
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Integer pixel span `(x0, y0, x1, y1)` covered by the box, clamped to the image.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, hi: usize| (v.max(0.0) as usize).min(hi);
        let x0 = clamp(self.x1.floor(), width.saturating_sub(1));
        let y0 = clamp(self.y1.floor(), height.saturating_sub(1));
        let x1 = clamp(self.x2.ceil(), width).max(x0 + 1);
        let y1 = clamp(self.y2.ceil(), height).max(y0 + 1);
        (x0, y0, x1, y1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: Rect,
    pub confidence: f64,
    pub feature: Vec<f64>,
}

/// Toy RoI/RoD pooling: per-channel means inside the box and in the rest of
/// the image, plus the area fraction, projected to `dim` with `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeaturizer {
    projection: Array2<f64>,
    channels: usize,
}

impl RegionFeaturizer {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = nn::seeded_rng(seed);
        let raw = 2 * channels + 2;
        Self {
            projection: nn::normal_matrix(raw, dim, 1.0, &mut rng),
            channels,
        }
    }

    pub fn dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn features(&self, image: ArrayView3<'_, f32>, region: &Rect) -> Result<Vec<f64>> {
        let (h, w, c) = image.dim();
        if c != self.channels {
            return Err(VqaError::shape("region featurizer channels", self.channels, c));
        }
        if !region.within(w, h) {
            return Err(VqaError::InvalidArgument(format!(
                "region {:?} is outside the {w}x{h} image",
                region.to_array()
            )));
        }
        let (x0, y0, x1, y1) = region.pixel_span(w, h);
        let mut total = vec![0.0f64; c];
        let mut inside = vec![0.0f64; c];
        for ((y, x, ch), &v) in image.indexed_iter() {
            total[ch] += v as f64;
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                inside[ch] += v as f64;
            }
        }
        let n_in = ((x1 - x0) * (y1 - y0)) as f64;
        let n_out = (w * h) as f64 - n_in;
        let mut raw = Vec::with_capacity(2 * c + 2);
        raw.extend(inside.iter().map(|s| s / n_in));
        raw.extend(
            total
                .iter()
                .zip(&inside)
                .map(|(t, i)| if n_out > 0.0 { (t - i) / n_out } else { 0.0 }),
        );
        raw.push(n_in / (w * h) as f64);
        raw.push(1.0);
        let raw = ndarray::Array1::from(raw);
        Ok(raw.dot(&self.projection).mapv(f64::tanh).to_vec())
    }
}

/// Object detector plus region feature extractor.
pub trait DetectionProvider: Send + Sync {
    fn name(&self) -> &str;

    fn feature_dim(&self) -> usize;

    /// Detections in arbitrary order.
    fn detect(&self, image: ArrayView3<'_, f32>) -> Result<Vec<Detection>>;

    fn region_feature(&self, image: ArrayView3<'_, f32>, region: &Rect) -> Result<Vec<f64>>;
}

/// Returns a fixed list of `(box, confidence)` pairs for every image.
#[derive(Debug, Clone)]
pub struct StubDetector {
    boxes: Vec<(Rect, f64)>,
    featurizer: RegionFeaturizer,
}

impl StubDetector {
    pub fn new(boxes: Vec<(Rect, f64)>, featurizer: RegionFeaturizer) -> Self {
        Self { boxes, featurizer }
    }
}

impl DetectionProvider for StubDetector {
    fn name(&self) -> &str {
        "stub"
    }

    fn feature_dim(&self) -> usize {
        self.featurizer.dim()
    }

    fn detect(&self, image: ArrayView3<'_, f32>) -> Result<Vec<Detection>> {
        self.boxes
            .iter()
            .map(|&(bbox, confidence)| {
                Ok(Detection {
                    bbox,
                    confidence,
                    feature: self.featurizer.features(image, &bbox)?,
                })
            })
            .collect()
    }

    fn region_feature(&self, image: ArrayView3<'_, f32>, region: &Rect) -> Result<Vec<f64>> {
        self.featurizer.features(image, region)
    }
}

/// On-disk detection sidecar: `{boxes: [[x1,y1,x2,y2]..], features: [[..]..], scores: [..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SidecarFile {
    pub boxes: Vec<[f64; 4]>,
    pub features: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
}

/// Detections precomputed by an external model and stored in a sidecar file.
#[derive(Debug, Clone)]
pub struct SidecarDetector {
    detections: Vec<Detection>,
    featurizer: RegionFeaturizer,
}

impl SidecarDetector {
    pub fn from_file(path: &Path, featurizer: RegionFeaturizer) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
        let file: SidecarFile = serde_json::from_str(&text).map_err(|e| VqaError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_sidecar(file, featurizer)
    }

    pub fn from_sidecar(file: SidecarFile, featurizer: RegionFeaturizer) -> Result<Self> {
        if file.boxes.len() != file.features.len() || file.boxes.len() != file.scores.len() {
            return Err(VqaError::InvalidArgument(format!(
                "sidecar lists disagree: {} boxes, {} features, {} scores",
                file.boxes.len(),
                file.features.len(),
                file.scores.len()
            )));
        }
        let detections = file
            .boxes
            .iter()
            .zip(file.features)
            .zip(&file.scores)
            .map(|((b, feature), &confidence)| {
                if feature.len() != featurizer.dim() {
                    return Err(VqaError::shape("sidecar feature", featurizer.dim(), feature.len()));
                }
                Ok(Detection {
                    bbox: Rect::from_array(*b)?,
                    confidence,
                    feature,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { detections, featurizer })
    }
}

impl DetectionProvider for SidecarDetector {
    fn name(&self) -> &str {
        "sidecar"
    }

    fn feature_dim(&self) -> usize {
        self.featurizer.dim()
    }

    fn detect(&self, _image: ArrayView3<'_, f32>) -> Result<Vec<Detection>> {
        Ok(self.detections.clone())
    }

    fn region_feature(&self, image: ArrayView3<'_, f32>, region: &Rect) -> Result<Vec<f64>> {
        self.featurizer.features(image, region)
    }
}

/// Top `top_n` detections by confidence (stable on ties). With no detections,
/// a single whole-image node stands in.
pub fn detect_objects(image: ArrayView3<'_, f32>, provider: &dyn DetectionProvider, top_n: usize) -> Result<Vec<Detection>> {
    if top_n == 0 {
        return Err(VqaError::InvalidArgument("top_n must be at least 1".into()));
    }
    let (h, w, _) = image.dim();
    let mut dets = provider.detect(image).map_err(|e| VqaError::Provider {
        name: provider.name().to_string(),
        reason: e.to_string(),
    })?;
    for d in &dets {
        if !d.bbox.within(w, h) {
            return Err(VqaError::Provider {
                name: provider.name().to_string(),
                reason: format!("box {:?} exceeds the {w}x{h} image", d.bbox.to_array()),
            });
        }
        if d.feature.len() != provider.feature_dim() || d.feature.iter().any(|v| !v.is_finite()) {
            return Err(VqaError::Provider {
                name: provider.name().to_string(),
                reason: "detection feature has wrong width or non-finite values".into(),
            });
        }
    }
    if dets.is_empty() {
        let whole = Rect::whole(w, h);
        return Ok(vec![Detection {
            bbox: whole,
            confidence: 0.0,
            feature: provider.region_feature(image, &whole)?,
        }]);
    }
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    dets.truncate(top_n);
    Ok(dets)
}

/// Copy the pixels of `region` out of `image`.
pub fn crop_image(image: ArrayView3<'_, f32>, region: &Rect) -> ndarray::Array3<f32> {
    let (h, w, _) = image.dim();
    let (x0, y0, x1, y1) = region.pixel_span(w, h);
    image.slice(s![y0..y1, x0..x1, ..]).to_owned()
}

/// Nearest-neighbour resample of `[H, W, C]` to `[out_h, out_w, C]`.
pub fn resize_nearest(image: ArrayView3<'_, f32>, out_h: usize, out_w: usize) -> ndarray::Array3<f32> {
    let (h, w, c) = image.dim();
    ndarray::Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64).floor() as usize;
        let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64).floor() as usize;
        image[[sy.min(h - 1), sx.min(w - 1), ch]]
    })
}
