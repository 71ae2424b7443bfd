//! Losses, optimizer, base training, adaptation strategies and sweeps.

mod adapt;
mod base;
mod example;
mod loss;
mod optim;
mod sweep;

pub use adapt::{
    adapt, best_base_style, evaluate_examples, AdaptConfig, Adaptation, AdaptationResult, StyleChoice,
    Strategy,
};
pub use base::{
    base_examples, mean_loss, stream_segments, train_base, BaseTrainConfig, ContextStage, TrainLog, STREAM_GAP_SECONDS,
};
pub use example::{example_grads, Example};
pub use loss::{loss, loss_and_grad, LossConfig, LossParts};
pub use optim::{AdamW, OptimizerConfig};
pub use sweep::{
    subject_examples, sweep_chunking, sweep_rank, BoundaryTrace, ChunkRow, ChunkSweep, RankSweep, RankSweepConfig, RankTrial, BOUNDARY_FRAMES,
};
