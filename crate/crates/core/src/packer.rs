//! First-fit-decreasing sequence packing and loss-token budgeting.

use serde::Serialize;

use crate::layout::SequenceLayout;
use crate::{Error, Result};

pub const DEFAULT_CAPACITY: usize = 16_500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedSequence {
    pub layouts: Vec<SequenceLayout>,
    /// Index of each layout in the `pack` input.
    pub sources: Vec<usize>,
    pub capacity: usize,
    pub used: usize,
}

impl PackedSequence {
    /// Concatenates the documents into a single layout (no trailing pad).
    pub fn flatten(&self) -> SequenceLayout {
        SequenceLayout::concat(&self.layouts)
    }

    pub fn loss_tokens(&self) -> usize {
        self.layouts.iter().map(|l| l.loss_tokens()).sum()
    }

    pub fn utilization(&self) -> f64 {
        self.used as f64 / self.capacity as f64
    }
}

/// Packs layouts into sequences of at most `capacity` tokens.
///
/// Layouts are taken longest first (ties by input index) and each goes into
/// the first open sequence with room.
pub fn pack(examples: &[SequenceLayout], capacity: usize) -> Result<Vec<PackedSequence>> {
    let lens: Vec<usize> = examples.iter().map(|l| l.len()).collect();
    let bins = first_fit_decreasing(&lens, capacity)?;
    Ok(bins
        .into_iter()
        .map(|items| PackedSequence {
            used: items.iter().map(|&i| lens[i]).sum(),
            layouts: items.iter().map(|&i| examples[i].clone()).collect(),
            sources: items,
            capacity,
        })
        .collect())
}

/// Bin assignment by index; the core of [`pack`].
pub fn first_fit_decreasing(lens: &[usize], capacity: usize) -> Result<Vec<Vec<usize>>> {
    if let Some(index) = lens.iter().position(|&l| l > capacity) {
        return Err(Error::ExampleTooLong {
            index,
            len: lens[index],
            capacity,
        });
    }
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by(|&a, &b| lens[b].cmp(&lens[a]).then(a.cmp(&b)));

    let mut bins: Vec<Vec<usize>> = Vec::new();
    let mut free: Vec<usize> = Vec::new();
    for i in order {
        match free.iter().position(|&f| f >= lens[i]) {
            Some(b) => {
                bins[b].push(i);
                free[b] -= lens[i];
            }
            None => {
                bins.push(vec![i]);
                free.push(capacity - lens[i]);
            }
        }
    }
    Ok(bins)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceStats {
    pub documents: usize,
    pub total_tokens: usize,
    pub loss_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossTokenStats {
    pub total_tokens: usize,
    pub loss_tokens: usize,
    pub per_sequence: Vec<SequenceStats>,
}

pub fn loss_token_stats(batch: &[PackedSequence]) -> LossTokenStats {
    let per_sequence: Vec<SequenceStats> = batch
        .iter()
        .map(|s| SequenceStats {
            documents: s.layouts.len(),
            total_tokens: s.layouts.iter().map(|l| l.non_pad_len()).sum(),
            loss_tokens: s.loss_tokens(),
        })
        .collect();
    LossTokenStats {
        total_tokens: per_sequence.iter().map(|s| s.total_tokens).sum(),
        loss_tokens: per_sequence.iter().map(|s| s.loss_tokens).sum(),
        per_sequence,
    }
}

#[derive(Serialize)]
struct SequenceLine {
    sequence: usize,
    documents: usize,
    used: usize,
    capacity: usize,
    utilization_pct: f64,
    loss_tokens: usize,
}

#[derive(Serialize)]
struct Bucket {
    lo: usize,
    hi: usize,
    count: usize,
}

#[derive(Serialize)]
struct SummaryLine {
    sequences: usize,
    documents: usize,
    total_tokens: usize,
    loss_tokens: usize,
    utilization_pct: f64,
    loss_token_histogram: Vec<Bucket>,
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        (num as f64 * 1e4 / den as f64).round() / 100.0
    }
}

/// Line-delimited JSON: one line per sequence, then `{"summary": ...}`.
pub fn packing_report(batch: &[PackedSequence]) -> String {
    let stats = loss_token_stats(batch);
    let mut out = String::new();
    for (i, (s, st)) in batch.iter().zip(&stats.per_sequence).enumerate() {
        let line = SequenceLine {
            sequence: i,
            documents: st.documents,
            used: s.used,
            capacity: s.capacity,
            utilization_pct: pct(s.used, s.capacity),
            loss_tokens: st.loss_tokens,
        };
        out.push_str(&serde_json::to_string(&line).unwrap());
        out.push('\n');
    }

    const BUCKETS: usize = 10;
    let max = stats.per_sequence.iter().map(|s| s.loss_tokens).max().unwrap_or(0);
    let width = max / BUCKETS + 1;
    let mut histogram: Vec<Bucket> = (0..BUCKETS)
        .map(|b| Bucket {
            lo: b * width,
            hi: (b + 1) * width,
            count: 0,
        })
        .collect();
    for s in &stats.per_sequence {
        histogram[s.loss_tokens / width].count += 1;
    }
    let summary = SummaryLine {
        sequences: batch.len(),
        documents: stats.per_sequence.iter().map(|s| s.documents).sum(),
        total_tokens: stats.total_tokens,
        loss_tokens: stats.loss_tokens,
        utilization_pct: pct(stats.total_tokens, batch.iter().map(|s| s.capacity).sum()),
        loss_token_histogram: histogram,
    };
    out.push_str(&serde_json::to_string(&serde_json::json!({ "summary": summary })).unwrap());
    out.push('\n');
    out
}

/// Loss-token target per MoE expert per update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertBudget {
    pub target_loss_tokens_per_expert: u64,
    pub n_experts: u64,
    pub top_k: u64,
    pub expected_loss_tokens_per_example: f64,
}

impl ExpertBudget {
    pub fn new(n_experts: u64, top_k: u64, expected_loss_tokens_per_example: f64) -> Self {
        ExpertBudget {
            target_loss_tokens_per_expert: 30_000,
            n_experts,
            top_k,
            expected_loss_tokens_per_example,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_loss_tokens_per_expert == 0 || self.n_experts == 0 || self.top_k == 0 {
            return Err(Error::InvalidBudget("counts must be positive"));
        }
        if self.top_k > self.n_experts {
            return Err(Error::InvalidBudget("top_k exceeds n_experts"));
        }
        if !(self.expected_loss_tokens_per_example > 0.0) {
            return Err(Error::InvalidBudget("expected loss tokens must be positive"));
        }
        Ok(())
    }
}

/// Examples per update so that, under uniform routing, each expert expects
/// at least the target number of loss tokens.
pub fn required_examples_per_update(budget: &ExpertBudget) -> Result<u64> {
    budget.validate()?;
    let need = budget.target_loss_tokens_per_expert as f64 * budget.n_experts as f64;
    let per_example = budget.top_k as f64 * budget.expected_loss_tokens_per_example;
    Ok((need / per_example).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{LayoutToken, Role};
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layout(len: usize, loss: usize) -> SequenceLayout {
        let tokens = (0..len)
            .map(|i| LayoutToken {
                role: Role::Text,
                token_id: 0,
                document: Some(0),
                image: None,
                turn: Some(0),
                loss: i >= len - loss,
            })
            .collect();
        SequenceLayout {
            tokens,
            documents: vec![crate::layout::DocumentInfo {
                grounding: false,
                n_turns: 1,
            }],
        }
    }

    /// Fewest bins by exhaustive assignment (small instances only).
    fn optimal_bins(lens: &[usize], capacity: usize) -> usize {
        fn go(i: usize, lens: &[usize], cap: usize, loads: &mut Vec<usize>, best: &mut usize) {
            if loads.len() >= *best {
                return;
            }
            if i == lens.len() {
                *best = loads.len();
                return;
            }
            for b in 0..loads.len() {
                if loads[b] + lens[i] <= cap {
                    loads[b] += lens[i];
                    go(i + 1, lens, cap, loads, best);
                    loads[b] -= lens[i];
                }
            }
            loads.push(lens[i]);
            go(i + 1, lens, cap, loads, best);
            loads.pop();
        }
        let mut best = lens.len().max(1) + 1;
        go(0, lens, capacity, &mut Vec::new(), &mut best);
        if lens.is_empty() {
            0
        } else {
            best
        }
    }

    #[test]
    fn spec_instance() {
        let ls: Vec<_> = [16000, 500, 400].iter().map(|&n| layout(n, 1)).collect();
        let packed = pack(&ls, DEFAULT_CAPACITY).unwrap();
        let lens: Vec<Vec<usize>> = packed.iter().map(|p| p.layouts.iter().map(|l| l.len()).collect()).collect();
        assert_eq!(lens, vec![vec![16000, 500], vec![400]]);
        assert_eq!(optimal_bins(&[16000, 500, 400], DEFAULT_CAPACITY), 2);
    }

    #[test]
    fn empty_and_oversized() {
        assert!(pack(&[], DEFAULT_CAPACITY).unwrap().is_empty());
        match pack(&[layout(10, 1), layout(16501, 1)], DEFAULT_CAPACITY) {
            Err(Error::ExampleTooLong { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_simple_and_ratio() {
        let p = pack(&[layout(7, 3), layout(4, 2)], 20).unwrap();
        let s = loss_token_stats(&p);
        assert_eq!(s.loss_tokens, 5);
        assert_eq!(s.total_tokens, 11);

        // 100-token examples with 4 loss tokens each reproduce the 4/100 pretraining ratio
        let corpus: Vec<_> = (0..50).map(|_| layout(100, 4)).collect();
        let s = loss_token_stats(&pack(&corpus, DEFAULT_CAPACITY).unwrap());
        assert_eq!(s.loss_tokens * 100, s.total_tokens * 4);
        assert_eq!(s.loss_tokens as f64 / s.total_tokens as f64, crate::stages::PRETRAINING.loss_fraction());
    }

    #[test]
    fn stats_match_linear_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let corpus: Vec<_> = (0..1000)
            .map(|_| {
                let n = rng.random_range(2..3000);
                layout(n, rng.random_range(1..n))
            })
            .collect();
        let packed = pack(&corpus, DEFAULT_CAPACITY).unwrap();
        let s = loss_token_stats(&packed);
        let (mut total, mut loss) = (0, 0);
        for l in &corpus {
            for t in &l.tokens {
                total += 1;
                loss += t.loss as usize;
            }
        }
        assert_eq!((s.total_tokens, s.loss_tokens), (total, loss));
        assert_eq!(s.per_sequence.iter().map(|p| p.loss_tokens).sum::<usize>(), loss);
    }

    #[test]
    fn report_is_reproducible() {
        let corpus: Vec<_> = [900, 800, 120, 40, 7000].iter().map(|&n| layout(n, 5)).collect();
        let a = packing_report(&pack(&corpus, 8000).unwrap());
        let b = packing_report(&pack(&corpus, 8000).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 3);
        assert!(a.lines().last().unwrap().starts_with("{\"summary\""));
    }

    #[test]
    fn budget_formula() {
        let b = ExpertBudget::new(8, 2, 260.0);
        assert_eq!(required_examples_per_update(&b).unwrap(), 462);
        assert_eq!(required_examples_per_update(&ExpertBudget::new(8, 8, 260.0)).unwrap(), (30000f64 / 260.0).ceil() as u64);
        assert_eq!(required_examples_per_update(&ExpertBudget::new(4, 4, 30000.0)).unwrap(), 1);
        assert!(required_examples_per_update(&ExpertBudget::new(2, 3, 1.0)).is_err());
        assert!(required_examples_per_update(&ExpertBudget::new(2, 1, 0.0)).is_err());
    }

    #[test]
    fn budget_matches_uniform_routing_simulation() {
        let b = ExpertBudget::new(8, 2, 260.0);
        let n = required_examples_per_update(&b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut per_expert = [0u64; 8];
        for _ in 0..n * 260 {
            for e in sample(&mut rng, 8, 2) {
                per_expert[e] += 1;
            }
        }
        let mean = per_expert.iter().sum::<u64>() as f64 / 8.0;
        assert!((mean - 30000.0).abs() / 30000.0 < 0.05, "mean {mean}");
        for &c in &per_expert {
            assert!((c as f64 - 30000.0).abs() / 30000.0 < 0.05, "expert count {c}");
        }
    }

    proptest! {
        #[test]
        fn ffd_properties(lens in prop::collection::vec(1usize..100, 0..8)) {
            let cap = 100;
            let bins = first_fit_decreasing(&lens, cap).unwrap();
            let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
            seen.sort();
            prop_assert_eq!(seen, (0..lens.len()).collect::<Vec<_>>());
            for b in &bins {
                prop_assert!(b.iter().map(|&i| lens[i]).sum::<usize>() <= cap);
            }
            prop_assert!(bins.len() <= optimal_bins(&lens, cap) + 1);

            let mut rev = lens.clone();
            rev.reverse();
            let shape = |ls: &[usize], bs: Vec<Vec<usize>>| -> Vec<Vec<usize>> {
                bs.into_iter().map(|b| b.into_iter().map(|i| ls[i]).collect()).collect()
            };
            prop_assert_eq!(shape(&lens, bins), shape(&rev, first_fit_decreasing(&rev, cap).unwrap()));
        }
    }
}
