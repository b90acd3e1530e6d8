//! S2TX: a multi-scale state-space transformer for multivariate time series
//! forecasting, with its training, ablation, robustness, and runtime-profiling
//! harnesses.
//!
//! The model patches each look-back window at two granularities, runs the
//! coarse patches of all variates through a bidirectional selective-state-space
//! stack to build a cross-variate global context, and lets a per-variate local
//! transformer cross-attend to that context before a linear forecast head.

pub mod attention;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mathx;
pub mod model;
pub mod nn;
pub mod patching;
pub mod profile;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod train_eval;

pub use config::{ExperimentConfig, Variant};
pub use data::{DatasetKind, ForecastBatch, SeriesFrame, SplitSpec};
pub use error::{Error, Result};
pub use model::{Forecast, Forecaster, S2TXModel};
pub use patching::{PatchSpec, PatchTensor, WindowSpec};
pub use tensor::Tensor;
pub use train_eval::MetricReport;
