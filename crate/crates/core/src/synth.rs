//! Random examples and packed layouts for property tests, benchmarks and
//! the verification suite.

use rand::Rng;

use crate::example::MultimodalExample;
use crate::layout::{render_chat_template, SequenceLayout};
use crate::tokens::Vocab;

/// Size limits for generated examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthLimits {
    pub max_images: usize,
    pub max_vision_per_image: usize,
    pub max_turns: usize,
    pub max_question: usize,
    pub max_answer: usize,
    pub grounding_rate: f64,
}

impl Default for SynthLimits {
    fn default() -> Self {
        SynthLimits {
            max_images: 2,
            max_vision_per_image: 6,
            max_turns: 3,
            max_question: 4,
            max_answer: 4,
            grounding_rate: 0.3,
        }
    }
}

/// One rendered example; every turn has a non-empty answer.
pub fn random_example_layout<R: Rng>(rng: &mut R, vocab: &Vocab, limits: &SynthLimits) -> SequenceLayout {
    let n_images = rng.random_range(0..=limits.max_images);
    let n_turns = rng.random_range(1..=limits.max_turns);
    let lens: Vec<(usize, usize)> = (0..n_turns)
        .map(|_| (rng.random_range(0..=limits.max_question), rng.random_range(1..=limits.max_answer)))
        .collect();
    let grounding = rng.random_bool(limits.grounding_rate);
    let ex = MultimodalExample::random(rng, vocab, n_images, &lens, grounding);
    let counts: Vec<usize> = (0..n_images).map(|_| rng.random_range(1..=limits.max_vision_per_image)).collect();
    render_chat_template(&ex, &counts, vocab).expect("generated example is valid")
}

/// Concatenates random examples while they fit in `max_len` tokens; always
/// holds at least one document.
pub fn random_packed_layout<R: Rng>(rng: &mut R, vocab: &Vocab, limits: &SynthLimits, max_len: usize) -> SequenceLayout {
    let mut out = random_example_layout(rng, vocab, limits);
    loop {
        let next = random_example_layout(rng, vocab, limits);
        if out.len() + next.len() > max_len || rng.random_bool(0.2) {
            return out;
        }
        out.append(&next);
    }
}
