//! DLRM topology and the hybrid-parallel training step.

mod config;
mod dlrm;
mod interaction;
mod loss;
mod shard;

pub use config::{interaction_width, DlrmConfig, InteractionKind};
pub use dlrm::{Dlrm, Gradients, MiniBatch, PhaseTimes, StepReport, TrainOptions};
pub use interaction::{interaction, interaction_backward};
pub use loss::{bce_loss, BceOutput, BCE_EPS};
pub use shard::{redistribute_backward, redistribute_forward, CommVariant, TableShard};
