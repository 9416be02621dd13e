//! Multi-head temporal latent attention (MTLA) with MHA, MQA, GQA and MLA
//! baselines, a small reverse-mode autodiff tape, and a toy decoder for
//! end-to-end training.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod graph;
pub mod masks;
pub mod model;
pub mod mtla;
pub mod numerics;
mod params;
pub mod stack;
pub mod train;
pub mod variants;

pub use autodiff::{
    finite_difference_gradient, forward_record, max_relative_error, Gradients, Tape, Var,
};
pub use checkpoint::{load, save};
pub use config::{AttentionConfig, Variant};
pub use decode::DecodeScratch;
pub use error::{Error, Result};
pub use graph::{Eager, Graph};
pub use masks::{causal_mask, chunk_causal_mask, stride_aware_causal_mask, AdditiveMask, MaskKind};
pub use model::{
    build_model, parameter_count, DecodeState, DecoderConfig, DecoderModel, ModelParams,
};
pub use mtla::{absorb, AbsorbedWeights, MtlaAttention, MtlaCache, MtlaParams};
pub use numerics::{Matrix, Precision, Scalar};
pub use params::{init_weight, ones_row, zeros_row};
pub use stack::{AttentionStack, StackState};
pub use train::{
    accuracy, batch_loss, copy_task_batch, loss_and_gradients, train_copy, train_step, CopyBatch,
    TrainConfig, TrainOutcome, TrainRun,
};
pub use variants::{
    AttentionPath, DenseAttention, DenseKVCache, DenseParams, LatentKVCache, LatentWeights,
    MlaAttention, MlaParams,
};
