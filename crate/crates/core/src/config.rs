//! Declarative run configuration (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::crop::{CropModelConfig, CropTrainOptions, FagMode, GRID_SCALES};
use crate::data_io::{MosScale, SyntheticSpec};
use crate::error::{Result, VqaError};
use crate::fgm::{FgmConfig, TrainConfig};
use crate::losses::{min_sigma, LossKind};
use crate::quality_model::QualityModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: QualityModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    pub fgm: FgmConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub crop: CropConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory relative paths resolve against; not part of the document.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Exactly one of `manifest` and `synthetic` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// Raw MOS range of the manifest; synthetic data carries its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mos_range: Option<[f64; 2]>,
    #[serde(default = "DataConfig::default_train_split")]
    pub train_split: String,
    #[serde(default = "DataConfig::default_test_split")]
    pub test_split: String,
}

impl DataConfig {
    fn default_train_split() -> String {
        "train".into()
    }
    fn default_test_split() -> String {
        "test".into()
    }

    pub fn mos_scale(&self) -> Result<MosScale> {
        match (&self.synthetic, self.mos_range) {
            (_, Some([lo, hi])) => MosScale::new(lo, hi),
            (Some(spec), None) => Ok(spec.mos_scale()),
            (None, None) => Ok(MosScale::default()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub kind: LossKind,
    /// Label width on the 0..100 scale; computed from the training split when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    /// Fixed boxes from `crop.stub_boxes` (an empty list means whole-frame only).
    #[default]
    Stub,
    /// One `<video_id>.json` file per video in `crop.sidecar_dir`.
    Sidecar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropConfig {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "CropConfig::default_top_n")]
    pub top_n: usize,
    #[serde(default = "CropConfig::default_sign")]
    pub spatial_exp_sign: i8,
    #[serde(default)]
    pub fag_mode: FagMode,
    #[serde(default = "CropConfig::default_node_dim")]
    pub node_dim: usize,
    #[serde(default = "CropConfig::default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "CropConfig::default_scales")]
    pub scales: Vec<f64>,
    #[serde(default)]
    pub detector: DetectorKind,
    /// `[x1, y1, x2, y2, confidence]` rows for the stub detector.
    #[serde(default)]
    pub stub_boxes: Vec<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_dir: Option<PathBuf>,
    /// Synthetic salient scenes used to fit the scorer before use.
    #[serde(default = "CropConfig::default_pretrain_scenes")]
    pub pretrain_scenes: usize,
    #[serde(default)]
    pub pretrain: CropTrainOptions,
}

impl CropConfig {
    fn default_top_n() -> usize {
        5
    }
    fn default_sign() -> i8 {
        1
    }
    fn default_node_dim() -> usize {
        16
    }
    fn default_hidden_dim() -> usize {
        16
    }
    fn default_scales() -> Vec<f64> {
        GRID_SCALES.to_vec()
    }
    fn default_pretrain_scenes() -> usize {
        50
    }

    pub fn model_config(&self) -> CropModelConfig {
        CropModelConfig {
            hidden_dim: self.hidden_dim,
            fag_mode: self.fag_mode,
            spatial_exp_sign: self.spatial_exp_sign,
            ..CropModelConfig::new(self.node_dim, self.top_n)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(VqaError::Config("crop.scales must be non-empty and within (0, 1]".into()));
        }
        if self.detector == DetectorKind::Sidecar && self.sidecar_dir.is_none() {
            return Err(VqaError::Config("crop.detector = \"sidecar\" needs crop.sidecar_dir".into()));
        }
        if self.pretrain_scenes == 0 {
            return Err(VqaError::Config("crop.pretrain_scenes must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for CropConfig {
    fn default() -> Self {
        toml::from_str("").expect("all crop fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "OutputConfig::default_dir")]
    pub dir: PathBuf,
    /// Write an intermediate checkpoint every this many steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl OutputConfig {
    fn default_dir() -> PathBuf {
        PathBuf::from("run")
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: Self::default_dir(),
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| VqaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative paths inside it resolve against its
    /// directory via [`RunConfig::resolve`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| VqaError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base_dir.join(p)
        } else {
            p.to_path_buf()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data.manifest, &self.data.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(VqaError::Config("set exactly one of data.manifest and data.synthetic".into())),
        }
        self.data.mos_scale()?;
        self.model.validate()?;
        self.fgm.validate()?;
        self.train.validate()?;
        self.crop.validate()?;
        if let Some(sigma) = self.loss.sigma {
            if !(sigma > min_sigma()) {
                return Err(VqaError::Config(format!(
                    "loss.sigma must exceed {:.6}, got {sigma}",
                    min_sigma()
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// SHA-256 of the canonical JSON form (paths as written, not resolved).
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("run config serialises");
        hex::encode(Sha256::digest(&json))
    }
}
