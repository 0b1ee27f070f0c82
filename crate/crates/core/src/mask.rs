//! Hybrid attention mask: bidirectional over vision, causal over text,
//! isolated per document, with optional conversation masking between turns.
//!
//! [`allowed`] is the reference predicate. [`compile_block_mask`] produces an
//! equivalent block description whose size depends on the number of
//! role/turn runs rather than on the sequence length.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::layout::{Role, SequenceLayout};
use crate::{Error, Result};

/// Per-(document, turn) conversation-masking decisions for turns after the first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MaskDecisions {
    pub seed: u64,
    pub masked: BTreeMap<(u32, u32), bool>,
}

impl MaskDecisions {
    /// Every non-first turn set to `masked`.
    pub fn uniform(layout: &SequenceLayout, masked: bool) -> Self {
        let mut out = MaskDecisions::default();
        for (d, doc) in layout.documents.iter().enumerate() {
            for t in 1..doc.n_turns {
                out.masked.insert((d as u32, t), masked);
            }
        }
        out
    }

    pub fn is_masked(&self, document: u32, turn: u32) -> bool {
        self.masked.get(&(document, turn)).copied().unwrap_or(false)
    }

    /// True when every non-first turn of every document has a decision.
    pub fn covers(&self, layout: &SequenceLayout) -> bool {
        layout
            .documents
            .iter()
            .enumerate()
            .all(|(d, doc)| (1..doc.n_turns).all(|t| self.masked.contains_key(&(d as u32, t))))
    }

    pub fn masked_fraction(&self) -> f64 {
        if self.masked.is_empty() {
            return 0.0;
        }
        self.masked.values().filter(|&&m| m).count() as f64 / self.masked.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingProbs {
    pub default: f64,
    pub grounding: f64,
}

impl Default for MaskingProbs {
    fn default() -> Self {
        MaskingProbs {
            default: 0.5,
            grounding: 0.7,
        }
    }
}

/// Draws each non-first turn independently.
///
/// Uses ChaCha8 keyed by `seed` with one stream per document id, so a
/// document's decisions do not depend on how many turns other documents have.
pub fn sample_masking_decisions(layout: &SequenceLayout, seed: u64, probs: MaskingProbs) -> MaskDecisions {
    let mut out = MaskDecisions {
        seed,
        masked: BTreeMap::new(),
    };
    for (d, doc) in layout.documents.iter().enumerate() {
        let p = if doc.grounding { probs.grounding } else { probs.default };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(d as u64);
        for t in 1..doc.n_turns {
            let u: f64 = rng.random();
            out.masked.insert((d as u32, t), u < p);
        }
    }
    out
}

/// Reference attention predicate: may query `i` attend key `j`?
pub fn allowed(i: usize, j: usize, layout: &SequenceLayout, decisions: &MaskDecisions) -> Result<bool> {
    let n = layout.len();
    if i >= n || j >= n {
        return Err(Error::IndexOutOfRange { i, j, len: n });
    }
    Ok(allowed_unchecked(i, j, layout, decisions))
}

fn allowed_unchecked(i: usize, j: usize, layout: &SequenceLayout, decisions: &MaskDecisions) -> bool {
    let (q, k) = (&layout.tokens[i], &layout.tokens[j]);
    if q.role == Role::Pad || k.role == Role::Pad || q.document != k.document {
        return false;
    }
    if i == j {
        return true;
    }
    match (q.role, k.role) {
        (Role::Vision, Role::Vision) => true,
        (Role::Text, Role::Vision) | (Role::Vision, Role::Text) => j <= i,
        (Role::Text, Role::Text) => {
            if j > i {
                return false;
            }
            match (q.turn, k.turn) {
                (Some(tq), Some(tk)) if tk < tq => !decisions.is_masked(q.document.unwrap(), tq),
                _ => true,
            }
        }
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockKind {
    BidirectionalVision,
    CausalText,
    TextToVision,
    VisionToPriorText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskBlock {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    pub kind: BlockKind,
    /// Lower-triangular (`key <= query`) instead of full. Only used on
    /// diagonal blocks where `queries == keys`.
    pub causal: bool,
}

impl MaskBlock {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.queries.contains(&i) && self.keys.contains(&j) && (!self.causal || j <= i)
    }

    /// Allowed keys of query row `i` (assumed inside `queries`).
    pub fn row_keys(&self, i: usize) -> Range<usize> {
        if self.causal {
            self.keys.start..(i + 1).min(self.keys.end)
        } else {
            self.keys.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub blocks: Vec<MaskBlock>,
    pub sequence_len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Run {
    start: usize,
    end: usize,
    role: Role,
    turn: Option<u32>,
    document: u32,
}

fn runs(layout: &SequenceLayout) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (i, t) in layout.tokens.iter().enumerate() {
        let Some(document) = t.document.filter(|_| t.role != Role::Pad) else {
            continue;
        };
        match out.last_mut() {
            Some(r) if r.end == i && r.role == t.role && r.turn == t.turn && r.document == document => r.end += 1,
            _ => out.push(Run {
                start: i,
                end: i + 1,
                role: t.role,
                turn: t.turn,
                document,
            }),
        }
    }
    out
}

/// Compiles the predicate into disjoint blocks over (role, turn) runs.
pub fn compile_block_mask(layout: &SequenceLayout, decisions: &MaskDecisions) -> MaskSpec {
    let runs = runs(layout);
    let mut blocks = Vec::new();
    let mut doc_start = 0;
    while doc_start < runs.len() {
        let doc = runs[doc_start].document;
        let doc_end = runs[doc_start..].iter().position(|r| r.document != doc).map_or(runs.len(), |p| doc_start + p);
        let doc_runs = &runs[doc_start..doc_end];
        for (qi, q) in doc_runs.iter().enumerate() {
            for (ki, k) in doc_runs.iter().enumerate() {
                let block = |kind, causal| MaskBlock {
                    queries: q.start..q.end,
                    keys: k.start..k.end,
                    kind,
                    causal,
                };
                match (q.role, k.role) {
                    (Role::Vision, Role::Vision) => blocks.push(block(BlockKind::BidirectionalVision, false)),
                    (Role::Text, Role::Vision) if ki < qi => blocks.push(block(BlockKind::TextToVision, false)),
                    (Role::Vision, Role::Text) if ki < qi => blocks.push(block(BlockKind::VisionToPriorText, false)),
                    (Role::Text, Role::Text) if ki == qi => blocks.push(block(BlockKind::CausalText, true)),
                    (Role::Text, Role::Text) if ki < qi => {
                        let blocked = matches!((q.turn, k.turn), (Some(tq), Some(tk)) if tk < tq && decisions.is_masked(doc, tq));
                        if !blocked {
                            blocks.push(block(BlockKind::CausalText, false));
                        }
                    }
                    _ => {}
                }
            }
        }
        doc_start = doc_end;
    }
    MaskSpec {
        blocks,
        sequence_len: layout.len(),
    }
}

/// Allowed keys per query row in compressed-row form, keys ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowedKeys {
    pub offsets: Vec<usize>,
    pub keys: Vec<u32>,
}

impl AllowedKeys {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.keys[self.offsets[i]..self.offsets[i + 1]]
    }
}

impl MaskSpec {
    pub fn to_dense(&self) -> Vec<bool> {
        let n = self.sequence_len;
        let mut dense = vec![false; n * n];
        for b in &self.blocks {
            for i in b.queries.clone() {
                for j in b.row_keys(i) {
                    dense[i * n + j] = true;
                }
            }
        }
        dense
    }

    pub fn allowed_pairs(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.queries.clone().map(|i| b.row_keys(i).len()).sum::<usize>())
            .sum()
    }

    pub fn allowed_keys(&self) -> AllowedKeys {
        let n = self.sequence_len;
        let mut per_row: Vec<Vec<Range<usize>>> = vec![Vec::new(); n];
        for b in &self.blocks {
            for i in b.queries.clone() {
                let r = b.row_keys(i);
                if !r.is_empty() {
                    per_row[i].push(r);
                }
            }
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut keys = Vec::new();
        offsets.push(0);
        for mut ranges in per_row {
            ranges.sort_by_key(|r| r.start);
            for r in ranges {
                keys.extend(r.start as u32..r.end as u32);
            }
            offsets.push(keys.len());
        }
        AllowedKeys { offsets, keys }
    }

    /// Line-delimited JSON, one block per line.
    pub fn blocks_jsonl(&self) -> String {
        self.blocks.iter().map(|b| serde_json::to_string(b).unwrap() + "\n").collect()
    }
}

/// Dense expansion of the reference predicate, for comparisons.
pub fn dense_predicate(layout: &SequenceLayout, decisions: &MaskDecisions) -> Vec<bool> {
    let n = layout.len();
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = allowed_unchecked(i, j, layout, decisions);
        }
    }
    out
}

/// Keys visible to the `t`-th generated token (0-based) after a prefill:
/// plain causal attention over the prefill and everything generated so far.
pub fn decode_mask_row(prefill: &SequenceLayout, t: usize) -> Range<usize> {
    0..prefill.len() + t + 1
}

/// Binary PGM (P5): 255 where attention is allowed.
pub fn to_pgm(dense: &[bool], n: usize) -> Vec<u8> {
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(dense.iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

/// One character per pair: `#` allowed, `.` blocked. Rows are queries.
pub fn ascii_preview(dense: &[bool], n: usize) -> String {
    let mut s = String::with_capacity(n * (n + 1));
    for i in 0..n {
        s.extend(dense[i * n..(i + 1) * n].iter().map(|&b| if b { '#' } else { '.' }));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::example::{ImageSpec, MultimodalExample, Turn};
    use crate::layout::{render_chat_template, DocumentInfo, LayoutToken};
    use crate::tokens::Vocab;
    use proptest::prelude::*;

    fn example(images: usize, turns: usize, grounding: bool) -> MultimodalExample {
        MultimodalExample {
            images: (0..images).map(|i| ImageSpec::new(56, 56, i as u32)).collect(),
            turns: (0..turns).map(|t| Turn::new(vec![3, 4], vec![5, 6], t as u32)).collect(),
            is_grounding: grounding,
        }
    }

    /// Two packed examples: Example 1 has two images and two turns, Example 2 one image and one turn.
    fn figure_layout() -> SequenceLayout {
        let v = Vocab::default();
        let a = render_chat_template(&example(2, 2, false), &[3, 3], &v).unwrap();
        let b = render_chat_template(&example(1, 1, false), &[3], &v).unwrap();
        SequenceLayout::concat([&a, &b])
    }

    fn find(l: &SequenceLayout, doc: u32, pred: impl Fn(&LayoutToken) -> bool) -> Vec<usize> {
        (0..l.len()).filter(|&i| l.tokens[i].document == Some(doc) && pred(&l.tokens[i])).collect()
    }

    #[test]
    fn figure_pairs() {
        let l = figure_layout();
        let img1 = find(&l, 0, |t| t.image == Some(0) && t.role == Role::Vision);
        let img2 = find(&l, 0, |t| t.image == Some(1) && t.role == Role::Vision);
        let txt1 = find(&l, 0, |t| t.turn == Some(0));
        let txt2 = find(&l, 0, |t| t.turn == Some(1));
        let txt3 = find(&l, 1, |t| t.turn == Some(0));

        let open = MaskDecisions::uniform(&l, false);
        let closed = MaskDecisions::uniform(&l, true);
        // earlier image attends the later one
        assert!(allowed(img1[0], img2[2], &l, &open).unwrap());
        assert!(!allowed(txt3[0], img1[0], &l, &open).unwrap());
        assert!(allowed(txt2[1], txt1[0], &l, &open).unwrap());
        assert!(!allowed(txt2[1], txt1[0], &l, &closed).unwrap());
        // vision stays visible to a masked turn
        assert!(allowed(txt2[1], img1[0], &l, &closed).unwrap());
        assert!(!allowed(img1[0], txt1[0], &l, &open).unwrap());
        assert!(allowed(l.len() - 1, l.len() - 1, &l, &open).unwrap());
        assert!(allowed(l.len(), 0, &l, &open).is_err());

        for d in [&open, &closed] {
            assert_eq!(compile_block_mask(&l, d).to_dense(), dense_predicate(&l, d));
        }
    }

    #[test]
    fn vision_only_is_one_block() {
        let n = 9;
        let l = SequenceLayout {
            tokens: (0..n)
                .map(|_| LayoutToken {
                    role: Role::Vision,
                    token_id: 0,
                    document: Some(0),
                    image: Some(0),
                    turn: None,
                    loss: false,
                })
                .collect(),
            documents: vec![DocumentInfo { grounding: false, n_turns: 0 }],
        };
        let spec = compile_block_mask(&l, &MaskDecisions::default());
        assert_eq!(spec.blocks.len(), 1);
        assert_eq!(spec.blocks[0].queries, 0..n);
        assert_eq!(spec.blocks[0].keys, 0..n);
        assert_eq!(spec.blocks[0].kind, BlockKind::BidirectionalVision);
        assert!(spec.to_dense().iter().all(|&b| b));
    }

    #[test]
    fn sampling_rates_and_determinism() {
        let v = Vocab::default();
        let one = render_chat_template(&example(1, 1, false), &[2], &v).unwrap();
        assert!(sample_masking_decisions(&one, 1, MaskingProbs::default()).masked.is_empty());

        let doc = render_chat_template(&example(0, 101, false), &[], &v).unwrap();
        let gdoc = render_chat_template(&example(0, 101, true), &[], &v).unwrap();
        let many = SequenceLayout::concat(std::iter::repeat_n(&doc, 1000));
        let gmany = SequenceLayout::concat(std::iter::repeat_n(&gdoc, 1000));
        let d = sample_masking_decisions(&many, 42, MaskingProbs::default());
        assert_eq!(d.masked.len(), 100_000);
        assert!(d.covers(&many));
        assert!((d.masked_fraction() - 0.5).abs() < 0.01, "{}", d.masked_fraction());
        let g = sample_masking_decisions(&gmany, 42, MaskingProbs::default());
        assert!((g.masked_fraction() - 0.7).abs() < 0.01, "{}", g.masked_fraction());
        assert_eq!(d, sample_masking_decisions(&many, 42, MaskingProbs::default()));
        assert_ne!(d, sample_masking_decisions(&many, 43, MaskingProbs::default()));
    }

    #[test]
    fn decode_row() {
        let v = Vocab::default();
        let l = render_chat_template(&example(0, 1, false), &[], &v).unwrap();
        let prefill = l.with_generated(&[1; 4]);
        assert_eq!(prefill.len(), 10);
        assert_eq!(decode_mask_row(&prefill, 0), 0..11);
        assert_eq!(decode_mask_row(&prefill, 3), 0..14);
    }

    #[test]
    fn pgm_and_preview() {
        let l = figure_layout();
        let dense = compile_block_mask(&l, &MaskDecisions::default()).to_dense();
        let n = l.len();
        let pgm = to_pgm(&dense, n);
        let header = format!("P5\n{n} {n}\n255\n");
        assert!(pgm.starts_with(header.as_bytes()));
        assert_eq!(pgm.len(), header.len() + n * n);
        let preview = ascii_preview(&dense, n);
        assert_eq!(preview.lines().count(), n);
        assert!(preview.lines().next().unwrap().starts_with('#'));
    }

    fn arb_layout() -> impl Strategy<Value = (SequenceLayout, u64)> {
        let doc = (0usize..3, 1usize..4, 1usize..4, any::<bool>());
        (prop::collection::vec(doc, 1..4), any::<u64>()).prop_map(|(docs, seed)| {
            let v = Vocab::default();
            let parts: Vec<SequenceLayout> = docs
                .iter()
                .map(|&(imgs, turns, n, g)| {
                    let counts = vec![n; imgs];
                    render_chat_template(&example(imgs, turns, g), &counts, &v).unwrap()
                })
                .collect();
            (SequenceLayout::concat(&parts), seed)
        })
    }

    proptest! {
        #[test]
        fn predicate_invariants((l, seed) in arb_layout()) {
            let d = sample_masking_decisions(&l, seed, MaskingProbs::default());
            let n = l.len();
            let dense = dense_predicate(&l, &d);
            prop_assert_eq!(&compile_block_mask(&l, &d).to_dense(), &dense);
            for i in 0..n {
                prop_assert!(dense[i * n + i]);
                for j in 0..n {
                    let (a, b) = (&l.tokens[i], &l.tokens[j]);
                    if a.document != b.document {
                        prop_assert!(!dense[i * n + j]);
                    }
                    if a.role == Role::Vision && b.role == Role::Vision && a.document == b.document {
                        prop_assert!(dense[i * n + j] && dense[j * n + i]);
                    }
                    if a.role == Role::Text && b.role == Role::Text && dense[i * n + j] {
                        prop_assert!(j <= i);
                    }
                }
            }
        }
    }
}
