//! Optimization, evaluation metrics and the training loop.

pub mod metrics;
pub mod optim;
pub mod trainer;

pub use metrics::{f1_score, BinaryCounts, ClassMetrics, ConfusionCounts, MetricReport};
pub use optim::{adam_step, AdamState, OptimConfig};
pub use trainer::{
    batch_gradients, evaluate, history_csv, parse_history_csv, predict_dataset, train, BatchGradients, EpochEvent,
    EpochRecord, TrainOptions, TrainOutcome, HISTORY_HEADER,
};
