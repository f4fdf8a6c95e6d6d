//! Long-horizon forecasting with block-wise recursive rollout.
//!
//! A fixed-window forecaster maps `T` past steps to `L` future steps. Direct
//! forecasting (DF) scores a single forward pass truncated to the evaluation
//! horizon `H <= L`; evolutionary forecasting (EF) applies the same model
//! `⌈H/L⌉` times, feeding predictions back as context, so one trained model
//! serves every horizon.
//!
//! Modules:
//! - [`data`]: CSV ingestion, chronological splits, standardization, windows.
//! - [`model`]: naive-seasonal, linear, decomposition-linear and MLP forecasters
//!   with exact segment-restricted gradients.
//! - [`train`]: Adam with early stopping.
//! - [`rollout`]: the block-wise EF rollout.
//! - [`gradient`]: segment-gradient conflict analysis during training.
//! - [`eval`]: metrics, sweeps, win ratios.

pub mod data;
pub mod eval;
pub mod gradient;
pub mod model;
pub mod report;
pub mod rollout;
pub mod train;

pub use data::{
    apply_standardize, chronological_split, fit_standardize, invert_standardize, iter_windows,
    load_csv, window_count, CsvSchema, SeriesFrame, Split, SplitSpec, StandardizeStats,
    WindowSample,
};
pub use eval::{evaluate, sweep, win_ratio, EvalConfig, EvalRecord, Mode, ReportRow};
pub use gradient::{analyze_training, default_partition, GradStats, SegmentPartition};
pub use model::{Checkpoint, Forecaster, ForecasterSpec, ModelKind, ParamVector, SegmentSpec};
pub use rollout::{phase_of, rollout, Phase, RolloutTrace};
pub use train::{train, TrainConfig, TrainHistory};
