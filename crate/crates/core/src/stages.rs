//! Published per-stage training parameters.

use crate::geometry::CapSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub name: &'static str,
    pub total_tokens: f64,
    pub loss_tokens: f64,
    pub max_seq_len: usize,
    pub image_cap: CapSchedule,
    /// Conversation-masking and answer-only loss apply from pretraining on.
    pub answer_only_loss: bool,
}

const fn fixed_cap(mp: f64) -> CapSchedule {
    CapSchedule {
        start_mp: mp,
        end_mp: mp,
        ramp_fraction: 0.0,
        n_steps: 1,
    }
}

pub const ALIGNMENT: StageConfig = StageConfig {
    name: "alignment",
    total_tokens: 230e6,
    loss_tokens: 130e6,
    max_seq_len: 800,
    image_cap: fixed_cap(0.3),
    answer_only_loss: false,
};

pub const PRETRAINING: StageConfig = StageConfig {
    name: "pretraining",
    total_tokens: 100e9,
    loss_tokens: 4e9,
    max_seq_len: 16_500,
    image_cap: CapSchedule {
        start_mp: 0.8,
        end_mp: 6.3,
        ramp_fraction: 0.35,
        n_steps: 4,
    },
    answer_only_loss: true,
};

pub const EMBED_EXPANSION: StageConfig = StageConfig {
    name: "embed_expansion",
    total_tokens: 2.4e9,
    loss_tokens: 310e6,
    max_seq_len: 16_500,
    image_cap: fixed_cap(6.3),
    answer_only_loss: true,
};

pub const INSTRUCTION_TUNING: StageConfig = StageConfig {
    name: "instruction_tuning",
    total_tokens: 34e9,
    loss_tokens: 5.2e9,
    max_seq_len: 16_500,
    image_cap: fixed_cap(6.3),
    answer_only_loss: true,
};

pub const STAGES: [StageConfig; 4] = [ALIGNMENT, PRETRAINING, EMBED_EXPANSION, INSTRUCTION_TUNING];

impl StageConfig {
    pub fn loss_fraction(&self) -> f64 {
        self.loss_tokens / self.total_tokens
    }
}
