//! Losses, mean IoU, the episode runner and threshold training.

pub mod iou;
pub mod loss;
pub mod runner;
pub mod train;

pub use iou::{aggregate, mean_iou, Accumulation, ClassIou, ConfusionCounts, EpisodeMetrics, MetricsReport};
pub use loss::{cross_entropy, LossReport, PROB_CLAMP};
pub use runner::{
    episode_seed, evaluate, evaluate_run, run_episode, run_episode_with, segment, support_loss, EpisodeResult,
    EvalConfig, EvalProtocol, Evaluation, SupportLossPrototypes,
};
pub use train::{
    resume_training, sgd_step, smooth_loss, smooth_loss_and_grad, train_threshold, TrainHyper, TrainStream,
    TrainingCheckpoint,
};
