//! Correlation metrics between predicted and subjective scores: PLCC (raw
//! Pearson, no logistic remapping), SROCC (average ranks for ties) and KROCC
//! (Kendall tau-b).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_io::DatasetManifest;
use crate::error::{Result, VqaError};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(VqaError::shape("correlation inputs", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(VqaError::InvalidArgument("correlation needs at least two points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(VqaError::NonFinite {
            context: "correlation input".into(),
        });
    }
    for (name, v) in [("x", x), ("y", y)] {
        if v.iter().all(|&a| a == v[0]) {
            return Err(VqaError::InvalidArgument(format!("{name} is constant; correlation is undefined")));
        }
    }
    Ok(())
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    // Welford-style co-moment accumulation.
    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&a, &b)) in x.iter().zip(y).enumerate() {
        let n = (k + 1) as f64;
        let dx = a - mx;
        let dy = b - my;
        mx += dx / n;
        my += dy / n;
        sxx += dx * (a - mx);
        syy += dy * (b - my);
        sxy += dx * (b - my);
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pearson_unchecked(x, y))
}

/// 1-based ranks with ties sharing the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman rank-order correlation: Pearson over average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(pearson_unchecked(&average_ranks(x), &average_ranks(y)))
}

/// Number of tied pairs implied by runs of equal values in a sorted slice.
fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort that returns the number of inversions (discordant swaps).
fn sort_counting_swaps(v: &mut [f64], buf: &mut Vec<f64>) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_counting_swaps(&mut v[..mid], buf) + sort_counting_swaps(&mut v[mid..], buf);
    buf.clear();
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            buf.push(v[j]);
            j += 1;
        } else {
            buf.push(v[i]);
            i += 1;
        }
    }
    buf.extend_from_slice(&v[i..mid]);
    buf.extend_from_slice(&v[j..n]);
    v.copy_from_slice(buf);
    swaps
}

/// Kendall tau-b in O(n log n).
pub fn krocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let tie_x = tied_pairs(&xs);
    let tie_xy = tied_pairs(&pairs);
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = Vec::with_capacity(ys.len());
    let swaps = sort_counting_swaps(&mut ys, &mut buf);
    let tie_y = tied_pairs(&ys);

    let total = n * (n - 1) / 2;
    let numer = total as f64 - tie_x as f64 - tie_y as f64 + tie_xy as f64 - 2.0 * swaps as f64;
    let denom = ((total - tie_x) as f64 * (total - tie_y) as f64).sqrt();
    Ok((numer / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerVideo {
    pub video_id: String,
    pub prediction: f64,
    pub ground_truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srocc: f64,
    pub krocc: f64,
    pub mean: f64,
    pub n: usize,
    pub per_video: Vec<PerVideo>,
}

impl EvalReport {
    /// Metrics over `per_video`, sorted by id so the report is independent of
    /// input order.
    pub fn from_pairs(mut per_video: Vec<PerVideo>) -> Result<Self> {
        per_video.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let pred: Vec<f64> = per_video.iter().map(|p| p.prediction).collect();
        let gt: Vec<f64> = per_video.iter().map(|p| p.ground_truth).collect();
        let plcc = plcc(&pred, &gt)?;
        let srocc = srocc(&pred, &gt)?;
        let krocc = krocc(&pred, &gt)?;
        Ok(Self {
            plcc,
            srocc,
            krocc,
            mean: (plcc + srocc + krocc) / 3.0,
            n: per_video.len(),
            per_video,
        })
    }
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub video_id: String,
    pub score: f64,
}

/// Parse JSON-lines `{video_id, score}`; blank lines are skipped.
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| VqaError::InvalidArgument(format!("predictions line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
    parse_predictions(&text)
}

/// Join predictions with the manifest by id and compute the report.
pub fn evaluate(predictions: &[Prediction], manifest: &DatasetManifest) -> Result<EvalReport> {
    let truth: HashMap<&str, f64> = manifest.entries.iter().map(|e| (e.video_id.as_str(), e.mos)).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in predictions {
        *counts.entry(p.video_id.as_str()).or_default() += 1;
    }
    let duplicate: Vec<String> = counts.iter().filter(|(_, &c)| c > 1).map(|(id, _)| id.to_string()).collect();
    let missing: Vec<String> = counts
        .keys()
        .filter(|id| !truth.contains_key(*id))
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() || !duplicate.is_empty() {
        return Err(VqaError::Join { missing, duplicate });
    }
    let pairs = predictions
        .iter()
        .map(|p| PerVideo {
            video_id: p.video_id.clone(),
            prediction: p.score,
            ground_truth: truth[p.video_id.as_str()],
        })
        .collect();
    EvalReport::from_pairs(pairs)
}
