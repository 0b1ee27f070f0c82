//! Desk-scale MoE decoder used to execute the mask, padding, adapter,
//! routing and loss semantics end to end.

pub mod config;
pub mod decode;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod moe;
pub mod params;
pub mod tensor;

pub use config::ToyConfig;
pub use decode::DecodeState;
pub use gradcheck::{grad_check, GradCheckReport, GroupError};
pub use loss::{accumulate_normalized_loss, answer_loss, loss_targets, LossPart};
pub use model::{ForwardOutput, Sequence, ToyModel};
pub use moe::{moe_dispatch, RouterTrace, TokenRoute, TraceSummary};
pub use params::{lora_weight_decay_step, ParamGroup, ToyParams};
pub use tensor::{Mat, Real};
