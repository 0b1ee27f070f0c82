//! Answer-only cross-entropy and its batch normalization.

use crate::layout::SequenceLayout;
use crate::{Error, Result};

use super::moe::softmax;
use super::tensor::{Mat, Real};

/// Un-normalized loss of one sequence or microbatch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPart<T> {
    pub loss_sum: T,
    pub count: usize,
}

impl<T: Real> LossPart<T> {
    pub fn merge(self, other: Self) -> Self {
        LossPart {
            loss_sum: self.loss_sum + other.loss_sum,
            count: self.count + other.count,
        }
    }
}

/// Next-token target at each position: position `p` predicts token `p + 1`
/// when that token carries loss.
pub fn loss_targets(layout: &SequenceLayout) -> Vec<Option<u32>> {
    let t = &layout.tokens;
    (0..t.len())
        .map(|p| t.get(p + 1).filter(|n| n.loss && n.document == t[p].document).map(|n| n.token_id))
        .collect()
}

pub fn cross_entropy<T: Real>(logits: &[T], target: u32) -> T {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<T>().ln();
    lse - logits[target as usize]
}

pub fn answer_loss<T: Real>(logits: &Mat<T>, layout: &SequenceLayout) -> Result<LossPart<T>> {
    if logits.rows != layout.len() {
        return Err(Error::Shape(format!("{} logit rows for {} tokens", logits.rows, layout.len())));
    }
    let mut part = LossPart {
        loss_sum: T::zero(),
        count: 0,
    };
    for (p, t) in loss_targets(layout).into_iter().enumerate() {
        if let Some(t) = t {
            part.loss_sum += cross_entropy(logits.row(p), t);
            part.count += 1;
        }
    }
    if part.count == 0 {
        return Err(Error::NoLossTokens);
    }
    Ok(part)
}

/// `sum(loss_sum) / sum(count)` across microbatches.
pub fn accumulate_normalized_loss<T: Real>(parts: &[LossPart<T>]) -> Result<T> {
    let total: usize = parts.iter().map(|p| p.count).sum();
    if total == 0 {
        return Err(Error::NoLossTokens);
    }
    let sum: T = parts.iter().map(|p| p.loss_sum).sum();
    Ok(sum / T::c(total as f64))
}

/// Gradient of `weight * cross_entropy` with respect to the logits.
pub(crate) fn cross_entropy_grad<T: Real>(logits: &[T], target: u32, weight: T) -> Vec<T> {
    let mut g: Vec<T> = softmax(logits).into_iter().map(|p| p * weight).collect();
    g[target as usize] -= weight;
    g
}
