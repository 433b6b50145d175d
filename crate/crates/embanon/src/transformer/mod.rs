//! The privacy transformer model, its training loop, anonymizing inference,
//! and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod train;

pub use checkpoint::{load, save};
pub use config::{ModelError, PrivacyTransformerConfig};
pub use model::{EncoderLayer, ForwardMode, PrivacyTransformer, TargetAssignment};
pub use train::{pair_loss, train, train_step, TrainOptions, TrainReport};
