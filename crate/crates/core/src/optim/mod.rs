//! Optimiser, training loops and checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod train;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::{checkpoint_bytes, read_checkpoint, read_checkpoint_from, write_checkpoint};
pub use train::{
    class_weights_for, evaluate_accuracy, init_model, training_patches, train_fused_pipeline, train_fusion, train_network, train_network_with,
    train_stage, EpochRecord, FusedModels, FusedTrainConfig, InputSource, PipelineSample, StepRecord, TrainConfig, TrainLog,
    TrainSample,
};
