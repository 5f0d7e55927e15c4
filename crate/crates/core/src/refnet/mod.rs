//! Desk-scale trainer: hand-written forward/backward/weight-update passes for
//! a small conv+fc network on a synthetic image task.
//!
//! The passes are plain loop nests over the conv operation space, organized so
//! each output plane is produced independently with a fixed reduction order:
//! the parallel build (rayon over planes) is bit-identical to the sequential
//! one. Zero weights are skipped, which both speeds the trainer up once the
//! initial-weight scaffold has decayed and mirrors the computation sparsity
//! the masks describe.

pub mod dataset;
mod passes;
mod trainer;

pub use passes::{
    avgpool_backward, avgpool_forward, conv_backward, conv_backward_seq, conv_forward,
    conv_forward_seq, relu_backward_inplace, relu_inplace, softmax_cross_entropy,
    weight_update_grad, weight_update_grad_seq,
};
pub use trainer::{
    mask_block_shape, mask_snapshots, ActStats, DensityRow, TrainRun, TrainerConfig,
};

pub use trainer::run_training;
