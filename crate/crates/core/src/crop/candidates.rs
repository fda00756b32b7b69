use serde::{Deserialize, Serialize};

use crate::crop::detection::Rect;
use crate::error::{Result, VqaError};

/// A candidate region and its aesthetic score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropCandidate {
    pub bbox: Rect,
    pub score: f64,
}

pub const GRID_SCALES: [f64; 3] = [0.6, 0.75, 0.9];

/// Anchor grid: for each scale, boxes of `scale * (W, H)` slid with a stride of
/// one eighth of the image side, in scale-major, row-major order.
pub fn grid_candidates(width: usize, height: usize, scales: &[f64]) -> Result<Vec<Rect>> {
    if width == 0 || height == 0 {
        return Err(VqaError::InvalidArgument("image has zero size".into()));
    }
    let mut out = Vec::new();
    for &scale in scales {
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(VqaError::InvalidArgument(format!("crop scale {scale} must be in (0, 1]")));
        }
        let cw = (scale * width as f64).round().max(1.0);
        let ch = (scale * height as f64).round().max(1.0);
        let sx = (width as f64 / 8.0).max(1.0);
        let sy = (height as f64 / 8.0).max(1.0);
        let positions = |side: f64, crop: f64, stride: f64| -> Vec<f64> {
            let mut v = Vec::new();
            let mut k = 0.0;
            loop {
                let p = (k * stride).round();
                if p + crop > side {
                    break;
                }
                v.push(p);
                k += 1.0;
            }
            v
        };
        for y in positions(height as f64, ch, sy) {
            for x in positions(width as f64, cw, sx) {
                out.push(Rect::new(x, y, x + cw, y + ch)?);
            }
        }
    }
    Ok(out)
}

/// Highest score wins; ties go to the lowest index.
pub fn select_best_crop(scored: &[CropCandidate]) -> Result<(usize, CropCandidate)> {
    let mut best: Option<(usize, CropCandidate)> = None;
    for (i, c) in scored.iter().enumerate() {
        match best {
            Some((_, b)) if c.score <= b.score => {}
            _ => best = Some((i, *c)),
        }
    }
    best.ok_or(VqaError::Empty("no crop candidates"))
}

/// Parse a candidates file: a JSON list of `[x1, y1, x2, y2]`.
pub fn parse_candidates(text: &str) -> Result<Vec<Rect>> {
    let raw: Vec<[f64; 4]> = serde_json::from_str(text)?;
    raw.into_iter().map(Rect::from_array).collect()
}
