//! Decoder-only transformer regressor for remaining useful life.
//!
//! Signal embedding (no positional term) → stacked post-norm layers of causal
//! multi-head attention and a ReLU feed-forward block → mean pooling → a
//! three-layer ReLU MLP. Gradients are computed by hand.

pub mod checkpoint;
pub mod mat;
pub mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use mat::Mat;
pub use model::{attention, embed_signal, forward, mha, Group, Params, PredictorConfig, PredictorModel};
pub use train::{
    finetune, loss_total, train, Dataset, EpochRecord, FreezeMask, TrainConfig, TrainOutcome,
};
