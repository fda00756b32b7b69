//! End-to-end runs: data loading, optional cropping, feature extraction,
//! training, evaluation and standalone crop scoring.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{CropConfig, DetectorKind, RunConfig};
use crate::crop::{
    grid_candidates, resize_nearest, score_candidates, select_best_crop, train_crop_head, CropCandidate,
    DetectionProvider, Rect, RegionFeaturizer, S2cNet, SalientScene, SidecarDetector, StubDetector,
};
use crate::data_io::{
    generate_synthetic_dataset, load_manifest, sample_frames, target_sigma, DatasetManifest, FrameDecoder,
    ImageFrameDecoder, LoadOptions, MosScale, VideoSample,
};
use crate::error::{Result, VqaError};
use crate::fgm::{train, StepRecord};
use crate::losses::{min_sigma, LossBreakdown};
use crate::metrics::{evaluate, EvalReport, Prediction};
use crate::nn::seeded_rng;
use crate::optim::Sgd;
use crate::quality_model::{extract_features, FeatureProvider, ProviderParams, ProviderRegistry};
use crate::regressor::{QualityRegressor, TrainItem};

/// Frames are RGB throughout.
pub const CHANNELS: usize = 3;
/// Side of the synthetic scenes the crop scorer is fitted on.
pub const SCENE_SIDE: usize = 32;

// Sub-seeds so that each stage draws from its own stream.
const FEATURE_STREAM: u64 = 0x5eed_0001;
const HEAD_STREAM: u64 = 0x5eed_0002;
const CROP_STREAM: u64 = 0x5eed_0003;
const SHUFFLE_STREAM: u64 = 0x5eed_0004;

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub train: Vec<VideoSample>,
    pub test: Vec<VideoSample>,
    pub scale: MosScale,
}

fn decode_entries(manifest: &DatasetManifest, split: &str, frames: usize) -> Result<Vec<VideoSample>> {
    let decoder = ImageFrameDecoder;
    manifest
        .split(split)
        .into_iter()
        .map(|e| {
            let clip = decoder.decode(&e.path)?;
            Ok(VideoSample::new(
                e.video_id.clone(),
                sample_frames(clip.view(), frames)?,
                e.mos,
                &manifest.scale,
            ))
        })
        .collect()
}

pub fn load_run_manifest(cfg: &RunConfig) -> Result<Option<DatasetManifest>> {
    cfg.data
        .manifest
        .as_ref()
        .map(|m| {
            load_manifest(
                &cfg.resolve(m),
                LoadOptions {
                    scale: cfg.data.mos_scale()?,
                    check_paths: true,
                },
            )
        })
        .transpose()
}

/// Train and test samples for a run, `model.frame_count` frames each.
pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    let frames = cfg.model.frame_count;
    if let Some(spec) = &cfg.data.synthetic {
        let ds = generate_synthetic_dataset(spec, cfg.seed)?;
        return Ok(LoadedData {
            train: ds.samples(&cfg.data.train_split, frames)?,
            test: ds.samples(&cfg.data.test_split, frames)?,
            scale: ds.manifest.scale,
        });
    }
    let manifest = load_run_manifest(cfg)?.expect("validated: manifest or synthetic");
    if manifest.is_empty() {
        return Err(VqaError::Empty("manifest has no videos"));
    }
    Ok(LoadedData {
        train: decode_entries(&manifest, &cfg.data.train_split, frames)?,
        test: decode_entries(&manifest, &cfg.data.test_split, frames)?,
        scale: manifest.scale,
    })
}

/// Fitted crop scorer plus the detector and candidate settings it runs with.
pub struct Cropper {
    pub model: S2cNet,
    pub featurizer: RegionFeaturizer,
    pub config: CropConfig,
}

impl Cropper {
    /// Initialise the scorer from `seed` and fit it on synthetic salient scenes.
    pub fn fit(config: &CropConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let featurizer = RegionFeaturizer::new(CHANNELS, config.node_dim, seed ^ CROP_STREAM);
        let mut rng = seeded_rng(seed.wrapping_add(CROP_STREAM));
        let mut model = S2cNet::new(config.model_config(), &mut rng)?;
        let examples = (0..config.pretrain_scenes)
            .map(|_| SalientScene::generate(SCENE_SIDE, &mut rng).example(&featurizer, config.top_n))
            .collect::<Result<Vec<_>>>()?;
        train_crop_head(&mut model, &examples, &config.pretrain, &mut Sgd)?;
        Ok(Self {
            model,
            featurizer,
            config: config.clone(),
        })
    }

    /// Reuse a previously fitted scorer.
    pub fn from_model(model: S2cNet, config: &CropConfig, seed: u64) -> Self {
        Self {
            model,
            featurizer: RegionFeaturizer::new(CHANNELS, config.node_dim, seed ^ CROP_STREAM),
            config: config.clone(),
        }
    }

    /// Detector for one input; sidecars are looked up as `<sidecar_dir>/<key>.json`.
    pub fn detector(&self, key: &str, base: &Path) -> Result<Box<dyn DetectionProvider>> {
        match self.config.detector {
            DetectorKind::Stub => {
                let boxes = self
                    .config
                    .stub_boxes
                    .iter()
                    .map(|b| Ok((Rect::new(b[0], b[1], b[2], b[3])?, b[4])))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Box::new(StubDetector::new(boxes, self.featurizer.clone())))
            }
            DetectorKind::Sidecar => {
                let dir = self.config.sidecar_dir.as_ref().expect("validated");
                let dir = if dir.is_relative() { base.join(dir) } else { dir.clone() };
                let path = dir.join(format!("{key}.json"));
                Ok(Box::new(SidecarDetector::from_file(&path, self.featurizer.clone())?))
            }
        }
    }

    pub fn best_crop(
        &self,
        image: ArrayView3<'_, f32>,
        candidates: &[Rect],
        detector: &dyn DetectionProvider,
    ) -> Result<CropCandidate> {
        let scored = score_candidates(image, candidates, detector, &self.model)?;
        Ok(select_best_crop(&scored)?.1)
    }

    /// Replace every frame by its best grid crop, resized back to the frame size.
    pub fn crop_frames(&self, frames: &Array4<f32>, detector: &dyn DetectionProvider) -> Result<Array4<f32>> {
        let (_, h, w, _) = frames.dim();
        let candidates = grid_candidates(w, h, &self.config.scales)?;
        let mut out = frames.clone();
        for (src, mut dst) in frames.outer_iter().zip(out.outer_iter_mut()) {
            let best = self.best_crop(src, &candidates, detector)?;
            let patch = crate::crop::crop_image(src, &best.bbox);
            dst.assign(&resize_nearest(patch.view(), h, w));
        }
        Ok(out)
    }
}

/// Provider plus optional cropper: turns a sample into frame features.
pub struct FeatureStage {
    pub provider: Box<dyn FeatureProvider>,
    pub cropper: Option<Cropper>,
    base_dir: PathBuf,
}

impl FeatureStage {
    pub fn new(cfg: &RunConfig, cropper: Option<Cropper>) -> Result<Self> {
        let provider = ProviderRegistry::with_builtins().build(
            &cfg.model.provider,
            &ProviderParams {
                channels: CHANNELS,
                embedding_dim: cfg.model.embedding_dim,
                seed: cfg.seed ^ FEATURE_STREAM,
            },
        )?;
        Ok(Self {
            provider,
            cropper,
            base_dir: cfg.base_dir.clone(),
        })
    }

    pub fn item(&self, sample: &VideoSample) -> Result<TrainItem> {
        let features = match &self.cropper {
            Some(c) => {
                let detector = c.detector(&sample.video_id, &self.base_dir)?;
                let cropped = VideoSample {
                    frames: c.crop_frames(&sample.frames, detector.as_ref())?,
                    ..sample.clone()
                };
                extract_features(&cropped, self.provider.as_ref())?
            }
            None => extract_features(sample, self.provider.as_ref())?,
        };
        Ok(TrainItem {
            features,
            y_hundred: sample.mos_hundred,
        })
    }

    pub fn items(&self, samples: &[VideoSample]) -> Result<Vec<TrainItem>> {
        samples.iter().map(|s| self.item(s)).collect()
    }
}

/// Everything needed to score new videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub step: usize,
    pub mos_scale: MosScale,
    pub regressor: QualityRegressor,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_model: Option<S2cNet>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config.hash() != ck.config_hash {
            log::warn!(
                "checkpoint {} records config hash {} but its config hashes to {}",
                path.display(),
                ck.config_hash,
                ck.config.hash()
            );
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn feature_stage(&self, base_dir: &Path) -> Result<FeatureStage> {
        let mut cfg = self.config.clone();
        cfg.base_dir = base_dir.to_path_buf();
        let cropper = self
            .crop_model
            .clone()
            .map(|m| Cropper::from_model(m, &cfg.crop, cfg.seed));
        FeatureStage::new(&cfg, cropper)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| VqaError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub sigma: f64,
    pub steps: usize,
    pub aborted_steps: usize,
    pub converged: bool,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_report: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub summary: TrainSummary,
    pub log: Vec<StepRecord>,
}

/// Train from a config. `on_step` receives every log record and, when a
/// checkpoint is due, the checkpoint to persist.
pub fn run_training(cfg: &RunConfig, mut on_step: impl FnMut(&StepRecord, Option<&Checkpoint>) -> Result<()>) -> Result<TrainRun> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    if data.train.is_empty() {
        return Err(VqaError::Empty("training split has no videos"));
    }
    let sigma = match cfg.loss.sigma {
        Some(s) => s,
        None => {
            let s = target_sigma(&data.train.iter().map(|v| v.mos_hundred).collect::<Vec<_>>())?;
            if !(s > min_sigma()) {
                return Err(VqaError::Config(format!(
                    "training scores are too concentrated (sigma {s}); set loss.sigma explicitly"
                )));
            }
            s
        }
    };
    let mut resolved = cfg.clone();
    resolved.loss.sigma = Some(sigma);
    let config_hash = resolved.hash();
    log::info!("resolved config hash {config_hash}");

    let cropper = if cfg.crop.enabled {
        Some(Cropper::fit(&cfg.crop, cfg.seed)?)
    } else {
        None
    };
    let stage = FeatureStage::new(cfg, cropper)?;
    let train_items = stage.items(&data.train)?;
    let test_items = stage.items(&data.test)?;

    let mut rng = seeded_rng(cfg.seed.wrapping_add(HEAD_STREAM));
    let head = crate::quality_model::DistributionHead::new(cfg.model.embedding_dim, cfg.model.hidden_dim, &mut rng);
    let mut regressor = QualityRegressor::new(head, cfg.loss.kind, sigma);
    let initial_loss = regressor.loss_on(&train_items)?;

    let crop_model = stage.cropper.as_ref().map(|c| c.model.clone());
    let snapshot = |reg: &QualityRegressor, step: usize| Checkpoint {
        config: resolved.clone(),
        config_hash: config_hash.clone(),
        step,
        mos_scale: data.scale,
        regressor: reg.clone(),
        crop_model: crop_model.clone(),
    };
    let mut sink_error = None;
    let outcome = train(
        &mut regressor,
        &train_items,
        &cfg.train,
        &cfg.fgm,
        cfg.seed.wrapping_add(SHUFFLE_STREAM),
        |record, model| {
            if sink_error.is_some() {
                return;
            }
            let due = cfg
                .output
                .checkpoint_every
                .is_some_and(|k| k > 0 && (record.step + 1) % k == 0);
            let ck = due.then(|| snapshot(model, record.step + 1));
            if let Err(e) = on_step(record, ck.as_ref()) {
                sink_error = Some(e);
            }
        },
    )?;
    if let Some(e) = sink_error {
        return Err(e);
    }
    let final_loss = regressor.loss_on(&train_items)?;
    let checkpoint = snapshot(&regressor, outcome.steps);
    let test_report = if test_items.len() >= 2 {
        let preds = predict_items(&regressor, &data.test, &test_items, &data.scale)?;
        Some(report_against(&preds, &data.test)?)
    } else {
        None
    };
    Ok(TrainRun {
        summary: TrainSummary {
            config_hash,
            sigma,
            steps: outcome.steps,
            aborted_steps: outcome.aborted,
            converged: outcome.converged,
            initial_loss,
            final_loss,
            test_report,
        },
        checkpoint,
        log: outcome.log,
    })
}

fn predict_items(
    reg: &QualityRegressor,
    samples: &[VideoSample],
    items: &[TrainItem],
    scale: &MosScale,
) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .zip(items)
        .map(|(s, it)| {
            Ok(Prediction {
                video_id: s.video_id.clone(),
                score: scale.from_unit(reg.predict(&it.features)?),
            })
        })
        .collect()
}

fn report_against(preds: &[Prediction], samples: &[VideoSample]) -> Result<EvalReport> {
    let per_video = preds
        .iter()
        .zip(samples)
        .map(|(p, s)| crate::metrics::PerVideo {
            video_id: p.video_id.clone(),
            prediction: p.score,
            ground_truth: s.mos_raw,
        })
        .collect();
    EvalReport::from_pairs(per_video)
}

/// Run training and write `config.toml`, `train_log.jsonl`, `checkpoint.json`,
/// periodic `checkpoint_step_<n>.json` and `summary.json` into `output.dir`.
pub fn train_to_dir(cfg: &RunConfig) -> Result<TrainRun> {
    let dir = cfg.resolve(&cfg.output.dir);
    fs::create_dir_all(&dir).map_err(|e| VqaError::io(&dir, e))?;
    let log_path = dir.join("train_log.jsonl");
    let mut log_file = fs::File::create(&log_path).map_err(|e| VqaError::io(&log_path, e))?;
    let run = run_training(cfg, |record, ck| {
        let line = serde_json::to_string(record)?;
        writeln!(log_file, "{line}").map_err(|e| VqaError::io(&log_path, e))?;
        if let Some(ck) = ck {
            ck.save(&dir.join(format!("checkpoint_step_{}.json", ck.step)))?;
        }
        Ok(())
    })?;
    let config_path = dir.join("config.toml");
    fs::write(&config_path, run.checkpoint.config.to_toml()).map_err(|e| VqaError::io(&config_path, e))?;
    run.checkpoint.save(&dir.join("checkpoint.json"))?;
    write_json(&dir.join("summary.json"), &run.summary)?;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub config_hash: String,
    pub config: RunConfig,
    pub predictions: Vec<Prediction>,
    pub report: EvalReport,
}

/// Score every video of `manifest` (optionally one split) with a checkpoint.
pub fn evaluate_checkpoint(ck: &Checkpoint, manifest: &DatasetManifest, split: Option<&str>, base_dir: &Path) -> Result<EvalOutput> {
    let entries: Vec<_> = match split {
        Some(s) => manifest.split(s),
        None => manifest.entries.iter().collect(),
    };
    if entries.is_empty() {
        return Err(VqaError::Empty("no videos to evaluate"));
    }
    let stage = ck.feature_stage(base_dir)?;
    let decoder = ImageFrameDecoder;
    let mut predictions = Vec::with_capacity(entries.len());
    for e in entries {
        let clip = decoder.decode(&e.path)?;
        let sample = VideoSample::new(
            e.video_id.clone(),
            sample_frames(clip.view(), ck.config.model.frame_count)?,
            e.mos,
            &manifest.scale,
        );
        let item = stage.item(&sample)?;
        predictions.push(Prediction {
            video_id: e.video_id.clone(),
            score: manifest.scale.from_unit(ck.regressor.predict(&item.features)?),
        });
    }
    let subset = DatasetManifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| split.is_none() || e.split.as_deref() == split)
            .cloned()
            .collect(),
        scale: manifest.scale,
    };
    let report = evaluate(&predictions, &subset)?;
    Ok(EvalOutput {
        config_hash: ck.config_hash.clone(),
        config: ck.config.clone(),
        predictions,
        report,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateSource {
    Grid,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropMetadata {
    pub input: String,
    pub seed: u64,
    pub candidates: CandidateSource,
    pub spatial_exp_sign: i8,
    pub fag_mode: crate::crop::FagMode,
    pub top_n: usize,
    pub detector: DetectorKind,
    pub config: CropConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameCrop {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropReport {
    pub metadata: CropMetadata,
    pub crops: Vec<FrameCrop>,
}

/// Best crop for every frame of an image or frame directory.
pub fn run_crop(
    input: &Path,
    cropper: &Cropper,
    source: CandidateSource,
    file_candidates: Option<&[Rect]>,
    detector: &dyn DetectionProvider,
    seed: u64,
) -> Result<CropReport> {
    let frames = ImageFrameDecoder.decode(input)?;
    let (_, h, w, _) = frames.dim();
    let candidates = match source {
        CandidateSource::Grid => grid_candidates(w, h, &cropper.config.scales)?,
        CandidateSource::File => {
            let c = file_candidates.unwrap_or(&[]).to_vec();
            if let Some(bad) = c.iter().find(|r| !r.within(w, h)) {
                return Err(VqaError::InvalidArgument(format!(
                    "candidate {:?} exceeds the {w}x{h} input",
                    bad.to_array()
                )));
            }
            c
        }
    };
    if candidates.is_empty() {
        return Err(VqaError::Empty("no crop candidates"));
    }
    let crops = frames
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(frame, img)| {
            let best = cropper.best_crop(img, &candidates, detector)?;
            Ok(FrameCrop {
                frame,
                bbox: best.bbox.to_array(),
                score: best.score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CropReport {
        metadata: CropMetadata {
            input: input.display().to_string(),
            seed,
            candidates: source,
            spatial_exp_sign: cropper.config.spatial_exp_sign,
            fag_mode: cropper.config.fag_mode,
            top_n: cropper.config.top_n,
            detector: cropper.config.detector,
            config: cropper.config.clone(),
        },
        crops,
    })
}
