//! Losses, metrics, optimizers and the training and evaluation loops.

pub mod loss;
pub mod metrics;
pub mod optim;
mod trainer;

pub use loss::{pgm_loss, seg_loss, total_loss};
pub use metrics::{compute_metrics, roc_curve, roc_thresholds, BinaryMask, MetricCounts, MetricReport, RocPoint};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use trainer::{evaluate, predict, predict_probabilities, train, EpochRecord, LossConfig, TrainOutcome, TrainState, Trainer};
