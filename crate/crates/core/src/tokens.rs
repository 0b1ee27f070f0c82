//! Reserved vocabulary layout.
//!
//! Ids are laid out as `[text | specials | pad | vision codes]`. Vision codes
//! stand in for connector outputs so the toy model can embed vision tokens
//! through the same table as text.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpecialToken {
    Bos,
    ImStart,
    ImEnd,
    VisionStart,
    VisionEnd,
    BoxStart,
    BoxEnd,
    PointStart,
    PointEnd,
    ObjectRefStart,
    ObjectRefEnd,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 11] = [
        SpecialToken::Bos,
        SpecialToken::ImStart,
        SpecialToken::ImEnd,
        SpecialToken::VisionStart,
        SpecialToken::VisionEnd,
        SpecialToken::BoxStart,
        SpecialToken::BoxEnd,
        SpecialToken::PointStart,
        SpecialToken::PointEnd,
        SpecialToken::ObjectRefStart,
        SpecialToken::ObjectRefEnd,
    ];

    pub fn text(self) -> &'static str {
        match self {
            SpecialToken::Bos => "<bos>",
            SpecialToken::ImStart => "<|im_start|>",
            SpecialToken::ImEnd => "<|im_end|>",
            SpecialToken::VisionStart => "<|vision_start|>",
            SpecialToken::VisionEnd => "<|vision_end|>",
            SpecialToken::BoxStart => "<|box_start|>",
            SpecialToken::BoxEnd => "<|box_end|>",
            SpecialToken::PointStart => "<|point_start|>",
            SpecialToken::PointEnd => "<|point_end|>",
            SpecialToken::ObjectRefStart => "<|object_ref_start|>",
            SpecialToken::ObjectRefEnd => "<|object_ref_end|>",
        }
    }

    fn ordinal(self) -> u32 {
        Self::ALL.iter().position(|&t| t == self).unwrap() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub text_size: u32,
    pub vision_codes: u32,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            text_size: 256,
            vision_codes: 64,
        }
    }
}

impl Vocab {
    pub fn new(text_size: u32, vision_codes: u32) -> Self {
        assert!(text_size >= 1 && vision_codes >= 1);
        Vocab {
            text_size,
            vision_codes,
        }
    }

    pub fn special(&self, token: SpecialToken) -> u32 {
        self.text_size + token.ordinal()
    }

    pub fn pad(&self) -> u32 {
        self.text_size + SpecialToken::ALL.len() as u32
    }

    pub fn vision_code(&self, code: u32) -> u32 {
        self.pad() + 1 + code % self.vision_codes
    }

    pub fn size(&self) -> u32 {
        self.pad() + 1 + self.vision_codes
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_size
    }

    pub fn special_of(&self, id: u32) -> Option<SpecialToken> {
        id.checked_sub(self.text_size)
            .and_then(|k| SpecialToken::ALL.get(k as usize).copied())
    }
}
