//! Training, evaluation and the experiment suite.

mod ablation;
mod config;
mod guide;
mod metrics;
mod optim;
pub mod report;
mod sweeps;
mod train;

pub use ablation::{
    run_ablation, run_variant, variant_configs, AblationConfig, AblationData, AblationRow,
    CorpusSizes, Variant, VariantOutcome,
};
pub use config::{Stage, TargetKind, TrainConfig};
pub use metrics::{evaluate, predict_corpus, truths, Inference, Metrics};
pub use optim::Adam;
pub use train::{train_stage, EpochLog, TrainData, TrainLog};
pub use guide::{
    guide_optimize, render_blob_scene, run_guide_suite, softplus_inverse, BlobLayout, BlobSceneParams, BlobSlot, GuideRun, GuideStep,
    GuideSuiteConfig, GuidanceConfig, Trajectory, SLOT_WIDTH,
};
pub use sweeps::{
    size_bias_sweep, threshold_sweep, SizeBiasReport, SizeBiasRow, SizeClassRow, ThresholdReport,
    ThresholdRow, DEFAULT_RATIOS, SIZE_BIAS_MAX_COUNT,
};
