//! Focal loss, momentum SGD, the warm-restart schedule, the training loop and ensembling.

mod ensemble;
mod loss;
mod optim;
mod schedule;
mod trainer;

pub use ensemble::ensemble_predict;
pub use loss::{focal_entry, focal_loss, FocalLossConfig};
pub use optim::{sgd_step, OptimizerState};
pub use schedule::{cosine_warm_restarts, SchedulerState};
pub use trainer::{evaluate, pool_frames, predict_clips, train_loop, History, HistoryRecord, TrainConfig, TrainSetup};

#[cfg(test)]
mod tests;
