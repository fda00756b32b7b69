//! Manifests, frame decoding and sampling, and the procedural dataset used by
//! the desk-scale tests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, ArrayView4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VqaError};
use crate::nn;

/// Declared MOS range of a dataset, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MosScale {
    pub min: f64,
    pub max: f64,
}

impl MosScale {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(VqaError::InvalidArgument(format!("invalid MOS range [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, mos: f64) -> bool {
        mos >= self.min && mos <= self.max
    }

    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.min) / (self.max - self.min)
    }

    pub fn from_unit(&self, unit: f64) -> f64 {
        self.min + unit * (self.max - self.min)
    }
}

impl Default for MosScale {
    fn default() -> Self {
        Self { min: 0.0, max: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub path: PathBuf,
    pub mos: f64,
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub scale: MosScale,
}

impl DatasetManifest {
    /// Entries whose split tag equals `split`; untagged entries never match.
    pub fn split(&self, split: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split.as_deref() == Some(split)).collect()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.video_id == id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// CSV text with header `video_id,path,mos,split`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["video_id", "path", "mos", "split"])
            .map_err(|e| VqaError::InvalidArgument(e.to_string()))?;
        for e in &self.entries {
            w.write_record([
                e.video_id.as_str(),
                &e.path.to_string_lossy(),
                &format!("{}", e.mos),
                e.split.as_deref().unwrap_or(""),
            ])
            .map_err(|e| VqaError::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| VqaError::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub scale: MosScale,
    /// Require every `path` to exist (relative paths resolve against the manifest directory).
    pub check_paths: bool,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    video_id: String,
    path: String,
    mos: f64,
    #[serde(default)]
    split: Option<String>,
}

/// Parse and validate a `video_id,path,mos[,split]` CSV manifest.
///
/// Row numbers in errors are 1-based data rows (the header is row 0).
pub fn load_manifest(path: &Path, opts: LoadOptions) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let err = |row: usize, reason: String| VqaError::Manifest {
        path: path.to_path_buf(),
        row,
        reason,
    };

    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| err(0, e.to_string()))?.clone();
    let expected = ["video_id", "path", "mos"];
    if headers.len() < 3 || headers.iter().take(3).ne(expected.iter().copied()) {
        return Err(err(0, format!("header must start with video_id,path,mos (got {headers:?})")));
    }
    if headers.len() > 4 || (headers.len() == 4 && &headers[3] != "split") {
        return Err(err(0, format!("unexpected columns {headers:?}")));
    }

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| err(row, e.to_string()))?;
        if rec.video_id.is_empty() {
            return Err(err(row, "empty video_id".into()));
        }
        if !seen.insert(rec.video_id.clone()) {
            return Err(err(row, format!("duplicate video_id `{}`", rec.video_id)));
        }
        if !rec.mos.is_finite() || !opts.scale.contains(rec.mos) {
            return Err(err(
                row,
                format!("mos {} outside declared range [{}, {}]", rec.mos, opts.scale.min, opts.scale.max),
            ));
        }
        let mut video_path = PathBuf::from(&rec.path);
        if video_path.is_relative() {
            video_path = base.join(video_path);
        }
        if opts.check_paths && !video_path.exists() {
            return Err(err(row, format!("path {} is not readable", video_path.display())));
        }
        entries.push(ManifestEntry {
            video_id: rec.video_id,
            path: video_path,
            mos: rec.mos,
            split: rec.split.filter(|s| !s.is_empty()),
        });
    }
    Ok(DatasetManifest {
        entries,
        scale: opts.scale,
    })
}

/// A video with its sampled frames and the target on every working scale.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    /// `[F, H, W, C]`, values in `[0, 1]`.
    pub frames: Array4<f32>,
    pub mos_raw: f64,
    pub mos_unit: f64,
    pub mos_hundred: f64,
}

impl VideoSample {
    pub fn new(video_id: impl Into<String>, frames: Array4<f32>, mos_raw: f64, scale: &MosScale) -> Self {
        let mos_unit = scale.to_unit(mos_raw);
        Self {
            video_id: video_id.into(),
            frames,
            mos_raw,
            mos_unit,
            mos_hundred: 100.0 * mos_unit,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len_of(Axis(0))
    }
}

/// Frame decoding plug-in: path to `[T, H, W, C]` array with values in `[0, 1]`.
pub trait FrameDecoder: Send + Sync {
    fn decode(&self, path: &Path) -> Result<Array4<f32>>;
}

/// Decodes a single image file as a one-frame clip, or a directory of images
/// (sorted by file name) as a multi-frame clip.
#[derive(Debug, Clone, Copy, Default)]
pub struct ImageFrameDecoder;

impl ImageFrameDecoder {
    fn read_rgb(path: &Path) -> Result<image::RgbImage> {
        image::open(path)
            .map(|img| img.to_rgb8())
            .map_err(|e| VqaError::Decode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

impl FrameDecoder for ImageFrameDecoder {
    fn decode(&self, path: &Path) -> Result<Array4<f32>> {
        let files: Vec<PathBuf> = if path.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| VqaError::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                })
                .collect();
            files.sort();
            files
        } else {
            vec![path.to_path_buf()]
        };
        if files.is_empty() {
            return Err(VqaError::Decode {
                path: path.to_path_buf(),
                reason: "no decodable frames".into(),
            });
        }
        let first = Self::read_rgb(&files[0])?;
        let (w, h) = first.dimensions();
        let mut out = Array4::<f32>::zeros((files.len(), h as usize, w as usize, 3));
        for (t, file) in files.iter().enumerate() {
            let img = if t == 0 { first.clone() } else { Self::read_rgb(file)? };
            if img.dimensions() != (w, h) {
                return Err(VqaError::Decode {
                    path: file.clone(),
                    reason: format!("frame size {:?} differs from first frame {:?}", img.dimensions(), (w, h)),
                });
            }
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    out[[t, y as usize, x as usize, c]] = px[c] as f32 / 255.0;
                }
            }
        }
        Ok(out)
    }
}

/// Write one `[H, W, 3]` frame as an 8-bit PNG.
pub fn write_png(frame: ndarray::ArrayView3<'_, f32>, path: &Path) -> Result<()> {
    let (h, w, c) = frame.dim();
    if c != 3 {
        return Err(VqaError::shape("png frame channels", 3, c));
    }
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (frame[[y as usize, x as usize, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    img.save(path).map_err(|e| VqaError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Uniform frame indices: `round(k (T-1) / (F-1))`, or `[0]` when `F == 1`.
pub fn sample_indices(total: usize, count: usize) -> Result<Vec<usize>> {
    if total == 0 {
        return Err(VqaError::Empty("video has no frames"));
    }
    if count == 0 {
        return Err(VqaError::InvalidArgument("frame count must be at least 1".into()));
    }
    if count == 1 {
        return Ok(vec![0]);
    }
    Ok((0..count)
        .map(|k| {
            let idx = (k as f64 * (total - 1) as f64 / (count - 1) as f64).round() as usize;
            idx.min(total - 1)
        })
        .collect())
}

pub fn sample_frames(video: ArrayView4<'_, f32>, count: usize) -> Result<Array4<f32>> {
    let idx = sample_indices(video.len_of(Axis(0)), count)?;
    Ok(video.select(Axis(0), &idx))
}

/// Standard deviation (population) of the 0-100 targets, used as the
/// Gaussian label width.
pub fn target_sigma(mos_hundred: &[f64]) -> Result<f64> {
    if mos_hundred.len() < 2 {
        return Err(VqaError::InvalidArgument("sigma needs at least two targets".into()));
    }
    let n = mos_hundred.len() as f64;
    let mean = mos_hundred.iter().sum::<f64>() / n;
    Ok((mos_hundred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_test: usize,
    #[serde(default = "SyntheticSpec::default_clip_frames")]
    pub clip_frames: usize,
    #[serde(default = "SyntheticSpec::default_side")]
    pub height: usize,
    #[serde(default = "SyntheticSpec::default_side")]
    pub width: usize,
    /// Largest relative inter-frame quality swing, in `[0, 1]`.
    #[serde(default = "SyntheticSpec::default_spread")]
    pub spread: f64,
    #[serde(default)]
    pub scale: Option<MosScale>,
}

impl SyntheticSpec {
    fn default_clip_frames() -> usize {
        16
    }
    fn default_side() -> usize {
        8
    }
    fn default_spread() -> f64 {
        0.8
    }

    pub fn new(n_train: usize, n_test: usize) -> Self {
        Self {
            n_train,
            n_test,
            clip_frames: Self::default_clip_frames(),
            height: Self::default_side(),
            width: Self::default_side(),
            spread: Self::default_spread(),
            scale: None,
        }
    }

    pub fn mos_scale(&self) -> MosScale {
        self.scale.unwrap_or(MosScale { min: 1.0, max: 5.0 })
    }
}

/// In-memory clip with its planted per-frame qualities.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub video_id: String,
    /// `[T, H, W, 3]`.
    pub frames: Array4<f32>,
    pub frame_quality: Vec<f64>,
    pub mos: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub clips: Vec<SyntheticClip>,
}

impl SyntheticDataset {
    pub fn clip(&self, id: &str) -> Option<&SyntheticClip> {
        self.clips.iter().find(|c| c.video_id == id)
    }

    /// Sampled [`VideoSample`]s for one split.
    pub fn samples(&self, split: &str, frame_count: usize) -> Result<Vec<VideoSample>> {
        self.manifest
            .split(split)
            .into_iter()
            .map(|e| {
                let clip = self.clip(&e.video_id).expect("manifest and clips are built together");
                Ok(VideoSample::new(
                    e.video_id.clone(),
                    sample_frames(clip.frames.view(), frame_count)?,
                    e.mos,
                    &self.manifest.scale,
                ))
            })
            .collect()
    }

    /// Write every clip as a directory of PNG frames plus `manifest.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| VqaError::io(dir, e))?;
        for clip in &self.clips {
            let clip_dir = dir.join(&clip.video_id);
            fs::create_dir_all(&clip_dir).map_err(|e| VqaError::io(&clip_dir, e))?;
            for (t, frame) in clip.frames.outer_iter().enumerate() {
                write_png(frame, &clip_dir.join(format!("frame_{t:04}.png")))?;
            }
        }
        let mut relative = self.manifest.clone();
        for e in &mut relative.entries {
            e.path = PathBuf::from(&e.video_id);
        }
        let manifest_path = dir.join("manifest.csv");
        fs::write(&manifest_path, relative.to_csv()?).map_err(|e| VqaError::io(&manifest_path, e))?;
        Ok(manifest_path)
    }
}

/// Render a clip whose channel 0 brightness encodes per-frame quality; channels
/// 1 and 2 carry per-clip and per-frame nuisance content.
pub fn render_clip<R: Rng + ?Sized>(frame_quality: &[f64], height: usize, width: usize, rng: &mut R) -> Array4<f32> {
    let noise = Normal::new(0.0, 0.05).expect("valid std");
    let clip_tint: f64 = rng.random();
    let mut frames = Array4::<f32>::zeros((frame_quality.len(), height, width, 3));
    for (t, &q) in frame_quality.iter().enumerate() {
        let frame_tint: f64 = rng.random();
        let mut frame = frames.slice_mut(s![t, .., .., ..]);
        for mut px in frame.rows_mut() {
            px[0] = (0.1 + 0.8 * q + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            px[1] = (clip_tint + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            px[2] = (frame_tint + noise.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
    frames
}

/// Zero-mean per-frame offsets with amplitude `amp`, in shuffled order.
fn frame_offsets<R: Rng + ?Sized>(count: usize, amp: f64, rng: &mut R) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    let mut offsets: Vec<f64> = (0..count)
        .map(|k| amp * (2.0 * k as f64 / (count - 1) as f64 - 1.0))
        .collect();
    offsets.shuffle(rng);
    offsets
}

/// Procedural dataset: each clip has latent quality `q ~ U(0, 1)`, per-frame
/// qualities `q + offset` with zero-mean offsets, and `mos = min + q (max - min)`.
/// Clips `0..n_train` are tagged `train`, the rest `test`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    let n = spec.n_train + spec.n_test;
    if n == 0 {
        return Err(VqaError::InvalidArgument("synthetic dataset needs at least one video".into()));
    }
    if spec.clip_frames == 0 || spec.height == 0 || spec.width == 0 {
        return Err(VqaError::InvalidArgument("synthetic clips need positive T, H, W".into()));
    }
    let scale = spec.mos_scale();
    let mut rng = nn::seeded_rng(seed);
    let mut clips = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for k in 0..n {
        let q: f64 = rng.random();
        let amp = spec.spread.clamp(0.0, 1.0) * rng.random::<f64>() * q.min(1.0 - q);
        let frame_quality: Vec<f64> = frame_offsets(spec.clip_frames, amp, &mut rng)
            .into_iter()
            .map(|o| q + o)
            .collect();
        let frames = render_clip(&frame_quality, spec.height, spec.width, &mut rng);
        let video_id = format!("synth_{k:04}");
        let mos = scale.from_unit(q);
        entries.push(ManifestEntry {
            video_id: video_id.clone(),
            path: PathBuf::from(&video_id),
            mos,
            split: Some(if k < spec.n_train { "train" } else { "test" }.to_string()),
        });
        clips.push(SyntheticClip {
            video_id,
            frames,
            frame_quality,
            mos,
        });
    }
    Ok(SyntheticDataset {
        manifest: DatasetManifest { entries, scale },
        clips,
    })
}

/// A varying clip and its constant-quality twin with identical MOS, mirroring
/// the "frames 1, 2, 3 versus 2, 2, 2" situation.
pub fn twin_clips(
    frame_quality: &[f64],
    height: usize,
    width: usize,
    scale: &MosScale,
    seed: u64,
) -> Result<(SyntheticClip, SyntheticClip)> {
    if frame_quality.is_empty() {
        return Err(VqaError::Empty("twin clips need frame qualities"));
    }
    let q = frame_quality.iter().sum::<f64>() / frame_quality.len() as f64;
    let flat = vec![q; frame_quality.len()];
    let mut rng = nn::seeded_rng(seed);
    let mos = scale.from_unit(q);
    let varying = SyntheticClip {
        video_id: "twin_varying".into(),
        frames: render_clip(frame_quality, height, width, &mut rng),
        frame_quality: frame_quality.to_vec(),
        mos,
    };
    let uniform = SyntheticClip {
        video_id: "twin_uniform".into(),
        frames: render_clip(&flat, height, width, &mut rng),
        frame_quality: flat,
        mos,
    };
    Ok((varying, uniform))
}
