//! End-to-end orchestration: configuration, weights, the stub backbone,
//! inference, joint training and the dataset-level tasks.

pub mod config;
pub mod infer;
pub mod model;
pub mod tasks;
pub mod train;
pub mod weights;

pub use config::{AnchorConfig, BackboneConfig, PipelineConfig, TrainerConfig};
pub use infer::{infer_rois, infer_slice, refine_and_restore, RoiCandidate, SliceInference};
pub use model::stub_backbone_forward;
pub use tasks::{
    ablate_k, ablation_csv, cross_validate, evaluate, evaluate_with, load_records, overlay_csv, tune_crf,
    write_overlays, AblationRow, CrfTuning, CrossValidation, Evaluation, MeanSd, OverlayRow,
};
pub use train::{history_csv, train, TrainReport};
pub use weights::PipelineWeights;
