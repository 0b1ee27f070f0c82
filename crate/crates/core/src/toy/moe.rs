//! Top-k expert routing and dispatch.
//!
//! Gating is softmax over all experts, keep the top-k probabilities, then
//! renormalize them to sum to one. In dual-router mode vision tokens are
//! scored by their own router weights with identical mechanics.

use serde::Serialize;

use super::params::LayerParams;
use super::tensor::{Mat, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute<T> {
    pub vision: bool,
    pub logits: Vec<T>,
    /// Softmax over all experts.
    pub probs: Vec<T>,
    /// Selected experts, highest score first.
    pub experts: Vec<usize>,
    /// Renormalized gates aligned with `experts`.
    pub gates: Vec<T>,
}

impl<T: Real> TokenRoute<T> {
    pub fn entropy(&self) -> T {
        -self.probs.iter().filter(|&&p| p > T::zero()).map(|&p| p * p.ln()).sum::<T>()
    }

    /// Logit gap between the last selected and the best unselected expert.
    pub fn selection_margin(&self) -> Option<T> {
        let k = self.experts.len();
        if k == self.logits.len() {
            return None;
        }
        let kth = self.logits[self.experts[k - 1]];
        let best_out = (0..self.logits.len())
            .filter(|e| !self.experts.contains(e))
            .map(|e| self.logits[e])
            .fold(T::neg_infinity(), T::max);
        Some(kth - best_out)
    }
}

pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Routes one token given its router logits.
pub fn route_logits<T: Real>(logits: Vec<T>, top_k: usize, vision: bool) -> TokenRoute<T> {
    let probs = softmax(&logits);
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k);
    let total: T = order.iter().map(|&e| probs[e]).sum();
    let gates = order.iter().map(|&e| probs[e] / total).collect();
    TokenRoute {
        vision,
        logits,
        probs,
        experts: order,
        gates,
    }
}

/// Per-token, per-layer routing record.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RouterTrace<T> {
    pub tokens: Vec<TokenRoute<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModalityStats {
    pub tokens: usize,
    pub mean_entropy: f64,
    /// Tokens dispatched to each expert.
    pub load: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSummary {
    pub text: ModalityStats,
    pub vision: ModalityStats,
}

impl<T: Real> RouterTrace<T> {
    pub fn summary(&self, n_experts: usize) -> TraceSummary {
        let stats = |vision: bool| {
            let toks: Vec<&TokenRoute<T>> = self.tokens.iter().filter(|t| t.vision == vision).collect();
            let mut load = vec![0; n_experts];
            for t in &toks {
                for &e in &t.experts {
                    load[e] += 1;
                }
            }
            let mean_entropy = if toks.is_empty() {
                0.0
            } else {
                toks.iter().map(|t| t.entropy().to_f64().unwrap()).sum::<f64>() / toks.len() as f64
            };
            ModalityStats {
                tokens: toks.len(),
                mean_entropy,
                load,
            }
        };
        TraceSummary {
            text: stats(false),
            vision: stats(true),
        }
    }
}

/// Activations of one selected expert for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertActs<T> {
    pub hpre: Vec<T>,
    pub hact: Vec<T>,
    pub y: Vec<T>,
}

pub(crate) fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub(crate) fn silu_grad<T: Real>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// Routes and mixes one token. Returns the route, expert activations and the
/// gate-weighted expert output.
pub fn moe_row<T: Real>(layer: &LayerParams<T>, x: &[T], vision: bool, top_k: usize, lora_scale: T) -> (TokenRoute<T>, Vec<ExpertActs<T>>, Vec<T>) {
    let router = layer.router_for(vision);
    let mut logits = vec![T::zero(); router.cols];
    router.vec_mul(x, &mut logits);
    let route = route_logits(logits, top_k, vision);
    let d = x.len();
    let mut out = vec![T::zero(); d];
    let mut acts = Vec::with_capacity(top_k);
    for (&e, &g) in route.experts.iter().zip(&route.gates) {
        let ex = &layer.experts[e];
        let mut hpre = vec![T::zero(); ex.w1.w.cols];
        ex.w1.forward_row(x, vision, lora_scale, &mut hpre);
        let hact: Vec<T> = hpre.iter().map(|&h| silu(h)).collect();
        let mut y = vec![T::zero(); d];
        ex.w2.forward_row(&hact, vision, lora_scale, &mut y);
        for (o, &yv) in out.iter_mut().zip(&y) {
            *o += g * yv;
        }
        acts.push(ExpertActs { hpre, hact, y });
    }
    (route, acts, out)
}

/// Dispatches every row of `x` through the layer's experts.
pub fn moe_dispatch<T: Real>(layer: &LayerParams<T>, x: &Mat<T>, is_vision: &[bool], top_k: usize, lora_scale: T) -> (RouterTrace<T>, Mat<T>) {
    let mut out = Mat::zeros(x.rows, x.cols);
    let mut trace = RouterTrace::default();
    for i in 0..x.rows {
        let (route, _, y) = moe_row(layer, x.row(i), is_vision[i], top_k, lora_scale);
        out.row_mut(i).copy_from_slice(&y);
        trace.tokens.push(route);
    }
    (trace, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::config::ToyConfig;
    use crate::toy::params::ToyParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(cfg: &ToyConfig) -> LayerParams<f64> {
        let mut p = ToyParams::<f64>::init(cfg);
        p.randomize_lora_b(0.2, 9);
        p.layers.swap_remove(0)
    }

    /// Naive reference: argsort each token's router scores, take k, renormalize, mix.
    fn reference_dispatch(layer: &LayerParams<f64>, x: &Mat<f64>, vis: &[bool], k: usize, scale: f64) -> (Vec<Vec<usize>>, Mat<f64>) {
        let mut chosen = Vec::new();
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let r = layer.router_for(vis[i]);
            let scores: Vec<f64> = (0..r.cols).map(|e| (0..r.rows).map(|a| x.row(i)[a] * r.row(a)[e]).sum()).collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let p: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
            idx.truncate(k);
            let tot: f64 = idx.iter().map(|&e| p[e]).sum();
            for &e in &idx {
                let ex = &layer.experts[e];
                let dense = |lin: &crate::toy::params::Linear<f64>, v: &[f64]| -> Vec<f64> {
                    (0..lin.w.cols)
                        .map(|c| {
                            let mut s: f64 = (0..lin.w.rows).map(|a| v[a] * lin.w.row(a)[c]).sum();
                            if let (true, Some(l)) = (vis[i], &lin.lora) {
                                for q in 0..l.a.cols {
                                    let t: f64 = (0..l.a.rows).map(|a| v[a] * l.a.row(a)[q]).sum();
                                    s += scale * t * l.b.row(q)[c];
                                }
                            }
                            s
                        })
                        .collect()
                };
                let h: Vec<f64> = dense(&ex.w1, x.row(i)).into_iter().map(|v| v / (1.0 + (-v).exp())).collect();
                let y = dense(&ex.w2, &h);
                for (o, yv) in out.row_mut(i).iter_mut().zip(y) {
                    *o += p[e] / tot * yv;
                }
            }
            chosen.push(idx);
        }
        (chosen, out)
    }

    #[test]
    fn dispatch_matches_reference() {
        for dual in [false, true] {
            let cfg = ToyConfig {
                dual_router: dual,
                ..ToyConfig::default()
            };
            let l = layer(&cfg);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let x = Mat::<f64>::randn(64, cfg.d_model, 1.0, &mut rng);
            let vis: Vec<bool> = (0..64).map(|_| rng.random()).collect();
            let (trace, out) = moe_dispatch(&l, &x, &vis, 2, 1.0);
            let (chosen, expected) = reference_dispatch(&l, &x, &vis, 2, 1.0);
            for i in 0..64 {
                assert_eq!(trace.tokens[i].experts, chosen[i]);
                let s: f64 = trace.tokens[i].gates.iter().sum();
                assert!((s - 1.0).abs() < 1e-14);
                assert!(trace.tokens[i].gates.iter().all(|&g| g >= 0.0));
            }
            for (a, b) in out.data.iter().zip(&expected.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_router_has_maximal_entropy() {
        let cfg = ToyConfig::default();
        let mut l = layer(&cfg);
        l.router.data.iter_mut().for_each(|v| *v = 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::<f64>::randn(10, cfg.d_model, 1.0, &mut rng);
        let (trace, _) = moe_dispatch(&l, &x, &[false; 10], 2, 1.0);
        let ln_e = (cfg.n_experts as f64).ln();
        for t in &trace.tokens {
            assert!((t.entropy() - ln_e).abs() < 1e-12);
        }
        assert!((trace.summary(cfg.n_experts).text.mean_entropy - ln_e).abs() < 1e-12);
    }

    #[test]
    fn full_top_k_is_softmax_mixture() {
        let cfg = ToyConfig::default();
        let l = layer(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::<f64>::randn(8, cfg.d_model, 1.0, &mut rng);
        let vis = [true, false, true, false, true, false, true, false];
        let (trace, out) = moe_dispatch(&l, &x, &vis, cfg.n_experts, 1.0);
        for i in 0..8 {
            let t = &trace.tokens[i];
            let mut mix = vec![0.0; cfg.d_model];
            for e in 0..cfg.n_experts {
                let (_, acts, _) = moe_row(&l, x.row(i), vis[i], cfg.n_experts, 1.0);
                let slot = t.experts.iter().position(|&s| s == e).unwrap();
                for (m, y) in mix.iter_mut().zip(&acts[slot].y) {
                    *m += t.probs[e] * y;
                }
            }
            for (a, b) in out.row(i).iter().zip(&mix) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
