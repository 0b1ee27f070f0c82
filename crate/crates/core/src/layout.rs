//! Token-level layout of one or more rendered examples.

use serde::{Deserialize, Serialize};

use crate::example::MultimodalExample;
use crate::tokens::{SpecialToken, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Vision,
    Text,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutToken {
    pub role: Role,
    pub token_id: u32,
    /// `None` only for pad tokens.
    pub document: Option<u32>,
    pub image: Option<u32>,
    /// `None` for the shared prefix (BOS, vision brackets and vision tokens).
    pub turn: Option<u32>,
    pub loss: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentInfo {
    pub grounding: bool,
    pub n_turns: u32,
}

/// Tokens of a (possibly packed) sequence. `documents[d]` describes document id `d`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub tokens: Vec<LayoutToken>,
    pub documents: Vec<DocumentInfo>,
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Renders `BOS, (VISION_START, v.., VISION_END)*, q1 a1, IM_START q2 a2, .., IM_END`.
///
/// Loss is carried by answer tokens and the terminal `IM_END` only.
pub fn render_chat_template(example: &MultimodalExample, vision_token_counts: &[usize], vocab: &Vocab) -> Result<SequenceLayout> {
    example.validate()?;
    if vision_token_counts.len() != example.images.len() {
        return Err(Error::VisionCountMismatch {
            expected: example.images.len(),
            got: vision_token_counts.len(),
        });
    }
    if let Some(i) = vision_token_counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroVisionTokens(i));
    }

    let text = |token_id: u32, turn: Option<u32>, loss: bool| LayoutToken {
        role: Role::Text,
        token_id,
        document: Some(0),
        image: None,
        turn,
        loss,
    };
    let total = 2 + vision_token_counts.iter().map(|n| n + 2).sum::<usize>()
        + example.turns.iter().map(|t| t.question.len() + t.answer.len() + 1).sum::<usize>();
    let mut tokens = Vec::with_capacity(total);

    tokens.push(text(vocab.special(SpecialToken::Bos), None, false));
    for (img, &n) in example.images.iter().zip(vision_token_counts) {
        tokens.push(text(vocab.special(SpecialToken::VisionStart), None, false));
        for j in 0..n as u64 {
            tokens.push(LayoutToken {
                role: Role::Vision,
                token_id: vocab.vision_code(splitmix64(img.content_seed ^ splitmix64(j)) as u32),
                document: Some(0),
                image: Some(img.id),
                turn: None,
                loss: false,
            });
        }
        tokens.push(text(vocab.special(SpecialToken::VisionEnd), None, false));
    }
    for (t, turn) in example.turns.iter().enumerate() {
        let t = Some(t as u32);
        if t != Some(0) {
            tokens.push(text(vocab.special(SpecialToken::ImStart), t, false));
        }
        tokens.extend(turn.question.iter().map(|&id| text(id, t, false)));
        tokens.extend(turn.answer.iter().map(|&id| text(id, t, true)));
    }
    let last = Some(example.turns.len() as u32 - 1);
    tokens.push(text(vocab.special(SpecialToken::ImEnd), last, true));

    Ok(SequenceLayout {
        tokens,
        documents: vec![DocumentInfo {
            grounding: example.is_grounding,
            n_turns: example.turns.len() as u32,
        }],
    })
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss_tokens(&self) -> usize {
        self.tokens.iter().filter(|t| t.loss).count()
    }

    pub fn non_pad_len(&self) -> usize {
        self.tokens.iter().filter(|t| t.role != Role::Pad).count()
    }

    pub fn is_vision(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.role == Role::Vision).collect()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }

    /// Appends `other`, renumbering its documents after ours.
    pub fn append(&mut self, other: &SequenceLayout) {
        let base = self.documents.len() as u32;
        self.tokens.extend(other.tokens.iter().map(|t| LayoutToken {
            document: t.document.map(|d| d + base),
            ..*t
        }));
        self.documents.extend_from_slice(&other.documents);
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a SequenceLayout>) -> SequenceLayout {
        let mut out = SequenceLayout::default();
        for p in parts {
            out.append(p);
        }
        out
    }

    /// Token ranges of each document id (documents are contiguous runs).
    pub fn document_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut ranges: Vec<Option<std::ops::Range<usize>>> = vec![None; self.documents.len()];
        for (i, t) in self.tokens.iter().enumerate() {
            if let Some(d) = t.document {
                let r = ranges[d as usize].get_or_insert(i..i + 1);
                r.end = i + 1;
            }
        }
        ranges.into_iter().map(|r| r.unwrap_or(0..0)).collect()
    }

    /// Appends generated text tokens to the last document's final turn, as
    /// they would appear in a full-sequence forward after decoding.
    pub fn with_generated(&self, ids: &[u32]) -> SequenceLayout {
        let mut out = self.clone();
        let last = self
            .tokens
            .iter()
            .rev()
            .find(|t| t.role != Role::Pad)
            .copied()
            .expect("non-empty prefill");
        out.tokens.extend(ids.iter().map(|&id| LayoutToken {
            role: Role::Text,
            token_id: id,
            document: last.document,
            image: None,
            turn: last.turn,
            loss: false,
        }));
        out
    }

    /// Checks the structural invariants; returns a description of the first violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        for (i, t) in self.tokens.iter().enumerate() {
            if t.loss && t.role != Role::Text {
                return Err(format!("token {i}: loss on non-text token"));
            }
            if t.role == Role::Vision && t.image.is_none() {
                return Err(format!("token {i}: vision token without image id"));
            }
            if t.role != Role::Pad && t.document.is_none() {
                return Err(format!("token {i}: missing document id"));
            }
            if let Some(d) = t.document {
                if d as usize >= self.documents.len() {
                    return Err(format!("token {i}: unknown document {d}"));
                }
            }
        }
        let ranges = self.document_ranges();
        for (d, r) in ranges.iter().enumerate() {
            if self.tokens[r.clone()].iter().any(|t| t.document.is_some_and(|x| x as usize != d)) {
                return Err(format!("document {d} is not contiguous"));
            }
        }
        Ok(())
    }
}
