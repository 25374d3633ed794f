//! Logloss training, optimizers and AUC evaluation.

mod metrics;
mod optim;
mod trainer;

pub use metrics::{auc, logloss, mean_logloss, LOGLOSS_EPS};
pub use optim::{Optimizer, OptimizerConfig};
pub use trainer::{evaluate, predict_all, train, Evaluation, MetricsReport, Precision, TrainConfig};
