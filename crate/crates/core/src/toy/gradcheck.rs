//! Central finite-difference check of the hand-written backward pass.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::exec::Exec;
use crate::{Error, Result};

use super::model::{Sequence, ToyModel};
use super::params::ParamGroup;

/// Router logit gap below which top-k selection counts as tied.
pub const TIE_MARGIN: f64 = 1e-3;

/// Denominator floor for the relative error. Central differences at
/// `eps = 1e-5` carry about 1e-10 of absolute noise, so gradients below this
/// size are effectively compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-4;

const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupError {
    pub params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub loss: f64,
    pub groups: BTreeMap<&'static str, GroupError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.values().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Fails with [`Error::RouterTie`] when any token's top-k choice sits within
/// [`TIE_MARGIN`] of flipping.
pub fn check_router_ties(model: &ToyModel<f64>, batch: &[Sequence]) -> Result<()> {
    for seq in batch {
        let out = model.forward(seq)?;
        for (layer, trace) in out.traces.iter().enumerate() {
            for (token, route) in trace.tokens.iter().enumerate() {
                if route.selection_margin().is_some_and(|m| m < TIE_MARGIN) {
                    return Err(Error::RouterTie { layer, token });
                }
            }
        }
    }
    Ok(())
}

/// Compares the analytic gradient of the normalized batch loss against
/// central differences, parameter by parameter.
pub fn grad_check(model: &ToyModel<f64>, batch: &[Sequence], eps: f64, exec: Exec) -> Result<GradCheckReport> {
    check_router_ties(model, batch)?;
    let (loss, grad) = model.batch_loss_and_grad(batch, exec)?;
    let n = model.params.flat_len();
    let chunks = n.div_ceil(CHUNK);
    let numeric = exec.map_range(chunks, |c| {
        let mut probe = model.clone();
        (c * CHUNK..((c + 1) * CHUNK).min(n))
            .map(|idx| {
                let (_, v) = probe.params.flat_get(idx);
                probe.params.flat_set(idx, v + eps);
                let up = probe.batch_loss(batch);
                probe.params.flat_set(idx, v - eps);
                let down = probe.batch_loss(batch);
                probe.params.flat_set(idx, v);
                Ok((up? - down?) / (2.0 * eps))
            })
            .collect::<Result<Vec<f64>>>()
    });
    let mut groups: BTreeMap<ParamGroup, GroupError> = BTreeMap::new();
    let mut idx = 0;
    for chunk in numeric {
        for num in chunk? {
            let (group, ana) = grad.flat_get(idx);
            let e = groups.entry(group).or_insert(GroupError {
                params: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                max_abs_grad: 0.0,
            });
            e.params += 1;
            e.max_rel_error = e.max_rel_error.max(relative_error(ana, num));
            e.max_abs_error = e.max_abs_error.max((ana - num).abs());
            e.max_abs_grad = e.max_abs_grad.max(ana.abs());
            idx += 1;
        }
    }
    Ok(GradCheckReport {
        eps,
        loss,
        groups: groups.into_iter().map(|(g, e)| (g.name(), e)).collect(),
    })
}
