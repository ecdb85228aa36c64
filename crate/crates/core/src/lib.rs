//! DRAformer: a transformer forecaster whose encoder attends with
//! difference-based distances (a Gaussian kernel over Mahalanobis distance
//! and a Jensen-Shannon divergence attention) and whose decoder consumes a
//! reconstructed input sequence in one shot.
//!
//! Everything runs in `f64` on a small reverse-mode autodiff tape.

// Numeric kernels index several buffers per loop; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod frame;
pub mod gradcheck;
pub mod ida;
pub mod jsa;
pub mod model;
pub mod params;
pub mod recon;
pub mod report;
pub mod series;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, RunSettings, TrainConfig};
pub use data::{load_csv, resample_hourly, CsvOptions};
pub use error::{Error, Result};
pub use frame::TimeSeriesFrame;
pub use model::Draformer;
pub use params::ParamStore;
pub use series::{make_windows, NormStats, Window};
pub use tensor::Tensor;
pub use train::{evaluate, train, MetricsReport, TrainOutcome, Variant};
