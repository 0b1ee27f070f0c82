//! Multimodal training-sequence machinery.
//!
//! The crate covers the path from a raw multimodal example to a packed,
//! masked and padded training sequence:
//!
//! * [`geometry`] resizes images onto the 28-px merge grid and counts vision tokens.
//! * [`layout`] renders the chat template into a token-level [`SequenceLayout`].
//! * [`packer`] bins examples into fixed-capacity sequences and budgets loss tokens.
//! * [`mask`] compiles the hybrid bidirectional/causal attention mask into blocks.
//! * [`convpad`] plans left-padding and vision duplication for causal convolutions.
//! * [`grounding`] parses and renders point and box coordinate formats.
//! * [`toy`] is a small MoE decoder with vision LoRA used to verify all of the above.
//!
//! Batch work (mask sweeps, per-sequence forward/backward, finite differences)
//! runs through [`Exec`], which uses rayon when the `parallel` feature is on.

pub mod convpad;
pub mod error;
pub mod example;
pub mod exec;
pub mod geometry;
pub mod grounding;
pub mod layout;
pub mod mask;
pub mod packer;
pub mod stages;
pub mod synth;
pub mod tokens;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use example::{ImageSpec, MultimodalExample, Turn};
pub use exec::Exec;
pub use layout::{render_chat_template, LayoutToken, Role, SequenceLayout};
pub use tokens::{SpecialToken, Vocab};
