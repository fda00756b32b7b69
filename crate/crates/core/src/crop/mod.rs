//! Graph-attention crop scoring: detections and a candidate window become a
//! small graph whose pooled attention output is scored by an MLP.

pub mod candidates;
pub mod detection;
pub mod graph;
pub mod model;
pub mod scene;

pub use candidates::{grid_candidates, parse_candidates, select_best_crop, CropCandidate, GRID_SCALES};
pub use detection::{
    crop_image, detect_objects, resize_nearest, Detection, DetectionProvider, Rect, RegionFeaturizer, SidecarDetector,
    SidecarFile, StubDetector,
};
pub use graph::{CropGraph, FagMode};
pub use model::{
    build_node_sets, crop_train_loss, score_candidates, train_crop_head, CropExample, CropLoss, CropModelConfig,
    CropTrainOptions, GraphNodeSet, S2cNet,
};
pub use scene::SalientScene;
