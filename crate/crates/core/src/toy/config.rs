use serde::{Deserialize, Serialize};

use crate::tokens::Vocab;
use crate::{Error, Result};

/// Shape and initialization settings of the toy decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Vision LoRA rank on expert MLP linears.
    pub r_mlp: usize,
    /// Vision LoRA rank on attention projections.
    pub r_att: usize,
    pub conv_kernel: usize,
    /// Multiplier on `x A B`; alpha/r conventions map onto this.
    pub lora_scale: f64,
    /// Separate router weights for vision tokens.
    pub dual_router: bool,
    pub text_vocab: u32,
    pub vision_codes: u32,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 32,
            n_experts: 4,
            top_k: 2,
            r_mlp: 4,
            r_att: 2,
            conv_kernel: 4,
            lora_scale: 1.0,
            dual_router: false,
            text_vocab: 64,
            vision_codes: 16,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.text_vocab, self.vision_codes)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers and d_ff must be positive");
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return bad("need 1 <= top_k <= n_experts");
        }
        if self.conv_kernel == 0 {
            return bad("conv_kernel must be at least 1");
        }
        if self.text_vocab == 0 || self.vision_codes == 0 {
            return bad("vocabulary sizes must be positive");
        }
        if !self.lora_scale.is_finite() {
            return bad("lora_scale must be finite");
        }
        Ok(())
    }
}
