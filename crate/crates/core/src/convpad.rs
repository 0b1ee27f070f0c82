//! Pad planning for short causal convolutions over packed sequences.
//!
//! A width-`k` causal convolution at slot `p` reads slots `p-k+1..=p`. Each
//! document is left-padded with `k-1` pad slots so no window straddles two
//! documents. Before a conversation-masked turn, `k-1` slots are filled with
//! copies of the document's last vision tokens (pads when there are fewer),
//! so the turn's windows see image context but never the previous turn's text.

use serde::{Deserialize, Serialize};

use crate::layout::{Role, SequenceLayout};
use crate::mask::MaskDecisions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Slot {
    Original(usize),
    Pad,
    /// Copy of a vision token; feeds convolutions only and is never an
    /// attention query or key.
    DuplicateOf(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddedLayout {
    pub slots: Vec<Slot>,
    pub kernel: usize,
}

impl PaddedLayout {
    /// No padding at all; the sequence as-is.
    pub fn identity(len: usize, kernel: usize) -> Self {
        PaddedLayout {
            slots: (0..len).map(Slot::Original).collect(),
            kernel,
        }
    }

    /// Slot position of every original token.
    pub fn positions(&self, n_tokens: usize) -> Vec<usize> {
        let mut pos = vec![usize::MAX; n_tokens];
        for (p, s) in self.slots.iter().enumerate() {
            if let Slot::Original(i) = *s {
                pos[i] = p;
            }
        }
        pos
    }

    /// Token whose value a slot carries (`None` for pads).
    pub fn source(&self, slot: usize) -> Option<usize> {
        match self.slots[slot] {
            Slot::Original(i) | Slot::DuplicateOf(i) => Some(i),
            Slot::Pad => None,
        }
    }

    pub fn overhead(&self, n_tokens: usize) -> usize {
        self.slots.len() - n_tokens
    }

    /// `_` pad, `d<i>` duplicate of token i, `<i>` original token i.
    pub fn to_compact_string(&self) -> String {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Original(i) => i.to_string(),
                Slot::Pad => "_".to_string(),
                Slot::DuplicateOf(i) => format!("d{i}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn plan_conv_padding(layout: &SequenceLayout, decisions: &MaskDecisions, kernel: usize) -> PaddedLayout {
    assert!(kernel >= 1, "kernel width must be at least 1");
    let fill = kernel - 1;
    let mut slots = Vec::with_capacity(layout.len() + fill * (layout.documents.len() + 1));
    let mut prev_doc = None;
    let mut prev_turn = None;
    let mut doc_vision: Vec<usize> = Vec::new();
    for (i, t) in layout.tokens.iter().enumerate() {
        if t.role != Role::Pad {
            if t.document != prev_doc {
                slots.extend(std::iter::repeat_n(Slot::Pad, fill));
                doc_vision.clear();
                prev_turn = None;
                prev_doc = t.document;
            }
            if let (Some(turn), Some(doc)) = (t.turn, t.document) {
                let opens_turn = prev_turn != Some(turn);
                if opens_turn && turn > 0 && decisions.is_masked(doc, turn) {
                    let dups = fill.min(doc_vision.len());
                    slots.extend(std::iter::repeat_n(Slot::Pad, fill - dups));
                    slots.extend(doc_vision[doc_vision.len() - dups..].iter().map(|&v| Slot::DuplicateOf(v)));
                }
                prev_turn = Some(turn);
            }
            if t.role == Role::Vision {
                doc_vision.push(i);
            }
        }
        slots.push(Slot::Original(i));
    }
    PaddedLayout { slots, kernel }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// Window at a token reads a token of another document.
    DocumentMix,
    /// Window at a conversation-masked turn reads an earlier turn's text.
    TurnLeak,
    /// A duplicate slot copies a non-vision token or one from another document.
    BadDuplicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub slot: usize,
    pub token: usize,
    pub kind: ViolationKind,
}

/// Scans every width-`padded.kernel` window; an empty result means isolated.
pub fn verify_isolation(padded: &PaddedLayout, layout: &SequenceLayout, decisions: &MaskDecisions) -> Vec<Violation> {
    verify_isolation_with_kernel(padded, layout, decisions, padded.kernel)
}

/// As [`verify_isolation`] but for a convolution of width `kernel`, which may
/// differ from the width the padding was planned for.
pub fn verify_isolation_with_kernel(
    padded: &PaddedLayout,
    layout: &SequenceLayout,
    decisions: &MaskDecisions,
    kernel: usize,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for (p, slot) in padded.slots.iter().enumerate() {
        if let Slot::DuplicateOf(src) = *slot {
            let t = &layout.tokens[src];
            let next_doc = padded.slots[p..].iter().find_map(|s| match s {
                Slot::Original(i) => Some(layout.tokens[*i].document),
                _ => None,
            });
            if t.role != Role::Vision || next_doc != Some(t.document) {
                out.push(Violation {
                    slot: p,
                    token: src,
                    kind: ViolationKind::BadDuplicate,
                });
            }
        }
        let Slot::Original(i) = *slot else { continue };
        let q = &layout.tokens[i];
        let Some(doc) = q.document.filter(|_| q.role != Role::Pad) else {
            continue;
        };
        let masked_turn = q.turn.filter(|&t| t > 0 && decisions.is_masked(doc, t));
        let mut mix = false;
        let mut leak = false;
        for w in p.saturating_sub(kernel - 1)..p {
            let Some(j) = padded.source(w) else { continue };
            let k = &layout.tokens[j];
            if k.role == Role::Pad {
                continue;
            }
            mix |= k.document != Some(doc);
            if let (Some(tq), Some(tk)) = (masked_turn, k.turn) {
                leak |= k.document == Some(doc) && k.role == Role::Text && tk < tq;
            }
        }
        if mix {
            out.push(Violation {
                slot: p,
                token: i,
                kind: ViolationKind::DocumentMix,
            });
        }
        if leak {
            out.push(Violation {
                slot: p,
                token: i,
                kind: ViolationKind::TurnLeak,
            });
        }
    }
    out
}
