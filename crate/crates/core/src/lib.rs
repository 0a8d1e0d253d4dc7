//! Per-sample loss weighting for a primary multi-label task trained jointly
//! with an auxiliary classification task.
//!
//! A small meta net maps each sample's embedding to a weight. Its parameters
//! are learned by differentiating a primary-task validation loss through one
//! SGD step of the base net, which needs second-order derivatives; the
//! [`autodiff`] module provides them.

pub mod autodiff;
pub mod baselines;
pub mod batch;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod meta_engine;
pub mod metrics;
pub mod models;
pub mod synthdata;

pub use autodiff::{Graph, Node, Shape, Tensor};
pub use baselines::{train_mtl, train_stl, BaselineConfig, Mode};
pub use error::{Error, Result};
pub use meta_engine::{train, IterationTrace, RunLog, TrainConfig};
pub use metrics::{f1_report, F1Report};
pub use models::{AuDetector, BaseParams, MetaParams, ModelConfig};
pub use synthdata::{Dataset, TaskSpec};
