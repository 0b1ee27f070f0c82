use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ToyConfig;
use super::tensor::{Mat, Real};

/// Parameter groups reported separately by the gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ParamGroup {
    Embed,
    Head,
    AttnProj,
    Conv,
    LoraAttA,
    LoraAttB,
    Router,
    Expert,
    LoraMlpA,
    LoraMlpB,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Embed => "embed",
            ParamGroup::Head => "head",
            ParamGroup::AttnProj => "attn_proj",
            ParamGroup::Conv => "conv",
            ParamGroup::LoraAttA => "lora_att_a",
            ParamGroup::LoraAttB => "lora_att_b",
            ParamGroup::Router => "router",
            ParamGroup::Expert => "expert",
            ParamGroup::LoraMlpA => "lora_mlp_a",
            ParamGroup::LoraMlpB => "lora_mlp_b",
        }
    }

    pub fn is_lora(self) -> bool {
        matches!(self, ParamGroup::LoraAttA | ParamGroup::LoraAttB | ParamGroup::LoraMlpA | ParamGroup::LoraMlpB)
    }
}

/// Low-rank vision adapter: `x (W + s A B)` on vision rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora<T> {
    /// `d_in x r`
    pub a: Mat<T>,
    /// `r x d_out`, zero at initialization.
    pub b: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `d_in x d_out`
    pub w: Mat<T>,
    pub lora: Option<Lora<T>>,
}

impl<T: Real> Linear<T> {
    fn init(d_in: usize, d_out: usize, rank: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Linear {
            w: Mat::randn(d_in, d_out, std, rng),
            lora: (rank > 0).then(|| Lora {
                a: Mat::randn(d_in, rank, std, rng),
                b: Mat::zeros(rank, d_out),
            }),
        }
    }

    /// `out = x W`, plus `scale * (x A) B` when `vision` and an adapter exists.
    pub fn forward_row(&self, x: &[T], vision: bool, scale: T, out: &mut [T]) {
        self.w.vec_mul(x, out);
        if let (true, Some(l)) = (vision, &self.lora) {
            let mut t = vec![T::zero(); l.a.cols];
            l.a.vec_mul(x, &mut t);
            t.iter_mut().for_each(|v| *v *= scale);
            let mut delta = vec![T::zero(); out.len()];
            l.b.vec_mul(&t, &mut delta);
            for (o, d) in out.iter_mut().zip(delta) {
                *o += d;
            }
        }
    }

    /// Accumulates weight gradients into `grad` and the input gradient into `dx`.
    pub fn backward_row(&self, grad: &mut Linear<T>, x: &[T], dy: &[T], vision: bool, scale: T, dx: &mut [T]) {
        grad.w.outer_acc(x, dy, T::one());
        self.w.mul_vec_acc(dy, dx);
        if let (true, Some(l), Some(gl)) = (vision, &self.lora, grad.lora.as_mut()) {
            let r = l.a.cols;
            let mut t = vec![T::zero(); r];
            l.a.vec_mul(x, &mut t);
            gl.b.outer_acc(&t, dy, scale);
            let mut dt = vec![T::zero(); r];
            l.b.mul_vec_acc(dy, &mut dt);
            dt.iter_mut().for_each(|v| *v *= scale);
            gl.a.outer_acc(x, &dt, T::one());
            l.a.mul_vec_acc(&dt, dx);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    /// `kernel x d`; row `s` multiplies the slot `s` positions back.
    pub conv_q: Mat<T>,
    pub conv_k: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<T> {
    pub w1: Linear<T>,
    pub w2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn: AttnParams<T>,
    /// `d x E`; shared by both modalities unless `router_vision` is set.
    pub router: Mat<T>,
    pub router_vision: Option<Mat<T>>,
    pub experts: Vec<ExpertParams<T>>,
}

impl<T> LayerParams<T> {
    pub fn router_for(&self, vision: bool) -> &Mat<T> {
        match (vision, &self.router_vision) {
            (true, Some(r)) => r,
            _ => &self.router,
        }
    }

    pub fn router_for_mut(&mut self, vision: bool) -> &mut Mat<T> {
        match (vision, &mut self.router_vision) {
            (true, Some(r)) => r,
            _ => &mut self.router,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams<T> {
    /// `vocab x d`; vision codes share the table with text.
    pub embed: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    /// `d x vocab`
    pub head: Mat<T>,
}

fn push_linear<'a, T>(out: &mut Vec<(ParamGroup, &'a Mat<T>)>, l: &'a Linear<T>, base: ParamGroup, att: bool) {
    out.push((base, &l.w));
    if let Some(lo) = &l.lora {
        let (ga, gb) = if att {
            (ParamGroup::LoraAttA, ParamGroup::LoraAttB)
        } else {
            (ParamGroup::LoraMlpA, ParamGroup::LoraMlpB)
        };
        out.push((ga, &lo.a));
        out.push((gb, &lo.b));
    }
}

fn push_linear_mut<'a, T>(out: &mut Vec<(ParamGroup, &'a mut Mat<T>)>, l: &'a mut Linear<T>, base: ParamGroup, att: bool) {
    out.push((base, &mut l.w));
    if let Some(lo) = &mut l.lora {
        let (ga, gb) = if att {
            (ParamGroup::LoraAttA, ParamGroup::LoraAttB)
        } else {
            (ParamGroup::LoraMlpA, ParamGroup::LoraMlpB)
        };
        out.push((ga, &mut lo.a));
        out.push((gb, &mut lo.b));
    }
}

impl<T: Real> ToyParams<T> {
    /// Random base weights, random LoRA `A`, zero LoRA `B`.
    pub fn init(cfg: &ToyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let vocab = cfg.vocab().size() as usize;
        let embed = Mat::randn(vocab, d, 1.0, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| {
                let attn = AttnParams {
                    wq: Linear::init(d, d, cfg.r_att, &mut rng),
                    wk: Linear::init(d, d, cfg.r_att, &mut rng),
                    wv: Linear::init(d, d, cfg.r_att, &mut rng),
                    wo: Linear::init(d, d, cfg.r_att, &mut rng),
                    conv_q: Mat::randn(cfg.conv_kernel, d, 0.5, &mut rng),
                    conv_k: Mat::randn(cfg.conv_kernel, d, 0.5, &mut rng),
                };
                let rstd = 1.0 / (d as f64).sqrt();
                let router = Mat::randn(d, cfg.n_experts, rstd, &mut rng);
                let router_vision = cfg.dual_router.then(|| Mat::randn(d, cfg.n_experts, rstd, &mut rng));
                let experts = (0..cfg.n_experts)
                    .map(|_| ExpertParams {
                        w1: Linear::init(d, cfg.d_ff, cfg.r_mlp, &mut rng),
                        w2: Linear::init(cfg.d_ff, d, cfg.r_mlp, &mut rng),
                    })
                    .collect();
                LayerParams {
                    attn,
                    router,
                    router_vision,
                    experts,
                }
            })
            .collect();
        let head = Mat::randn(d, vocab, 1.0 / (d as f64).sqrt(), &mut rng);
        ToyParams { embed, layers, head }
    }

    pub fn tensors(&self) -> Vec<(ParamGroup, &Mat<T>)> {
        let mut out = vec![(ParamGroup::Embed, &self.embed)];
        for l in &self.layers {
            let a = &l.attn;
            for lin in [&a.wq, &a.wk, &a.wv, &a.wo] {
                push_linear(&mut out, lin, ParamGroup::AttnProj, true);
            }
            out.push((ParamGroup::Conv, &a.conv_q));
            out.push((ParamGroup::Conv, &a.conv_k));
            out.push((ParamGroup::Router, &l.router));
            if let Some(r) = &l.router_vision {
                out.push((ParamGroup::Router, r));
            }
            for e in &l.experts {
                push_linear(&mut out, &e.w1, ParamGroup::Expert, false);
                push_linear(&mut out, &e.w2, ParamGroup::Expert, false);
            }
        }
        out.push((ParamGroup::Head, &self.head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(ParamGroup, &mut Mat<T>)> {
        let mut out = vec![(ParamGroup::Embed, &mut self.embed)];
        for l in &mut self.layers {
            let a = &mut l.attn;
            for lin in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
                push_linear_mut(&mut out, lin, ParamGroup::AttnProj, true);
            }
            out.push((ParamGroup::Conv, &mut a.conv_q));
            out.push((ParamGroup::Conv, &mut a.conv_k));
            out.push((ParamGroup::Router, &mut l.router));
            if let Some(r) = &mut l.router_vision {
                out.push((ParamGroup::Router, r));
            }
            for e in &mut l.experts {
                push_linear_mut(&mut out, &mut e.w1, ParamGroup::Expert, false);
                push_linear_mut(&mut out, &mut e.w2, ParamGroup::Expert, false);
            }
        }
        out.push((ParamGroup::Head, &mut self.head));
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn count_group(&self, group: ParamGroup) -> usize {
        self.tensors().iter().filter(|(g, _)| *g == group).map(|(_, t)| t.data.len()).sum()
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: T, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b);
        }
    }

    /// Same base weights with every adapter removed.
    pub fn without_lora(&self) -> Self {
        let mut p = self.clone();
        for l in &mut p.layers {
            let a = &mut l.attn;
            for lin in [&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo] {
                lin.lora = None;
            }
            for e in &mut l.experts {
                e.w1.lora = None;
                e.w2.lora = None;
            }
        }
        p
    }

    pub fn lora_norm(&self) -> T {
        self.tensors()
            .iter()
            .filter(|(g, _)| g.is_lora())
            .map(|(_, t)| t.data.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn base_norm(&self) -> T {
        self.tensors()
            .iter()
            .filter(|(g, _)| !g.is_lora())
            .map(|(_, t)| t.data.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    /// Fills every LoRA `B` with noise, as after some training.
    pub fn randomize_lora_b(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (g, t) in self.tensors_mut() {
            if matches!(g, ParamGroup::LoraAttB | ParamGroup::LoraMlpB) {
                *t = Mat::randn(t.rows, t.cols, std, &mut rng);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ToyParams<U> {
        let lin = |l: &Linear<T>| Linear {
            w: l.w.cast(),
            lora: l.lora.as_ref().map(|lo| Lora {
                a: lo.a.cast(),
                b: lo.b.cast(),
            }),
        };
        ToyParams {
            embed: self.embed.cast(),
            head: self.head.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn: AttnParams {
                        wq: lin(&l.attn.wq),
                        wk: lin(&l.attn.wk),
                        wv: lin(&l.attn.wv),
                        wo: lin(&l.attn.wo),
                        conv_q: l.attn.conv_q.cast(),
                        conv_k: l.attn.conv_k.cast(),
                    },
                    router: l.router.cast(),
                    router_vision: l.router_vision.as_ref().map(|r| r.cast()),
                    experts: l
                        .experts
                        .iter()
                        .map(|e| ExpertParams {
                            w1: lin(&e.w1),
                            w2: lin(&e.w2),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn flat_len(&self) -> usize {
        self.count()
    }

    fn locate(&self, mut idx: usize) -> (usize, usize) {
        for (t, (_, m)) in self.tensors().iter().enumerate() {
            if idx < m.data.len() {
                return (t, idx);
            }
            idx -= m.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_get(&self, idx: usize) -> (ParamGroup, T) {
        let (t, i) = self.locate(idx);
        let (g, m) = self.tensors()[t];
        (g, m.data[i])
    }

    pub fn flat_set(&mut self, idx: usize, v: T) {
        let (t, i) = self.locate(idx);
        self.tensors_mut()[t].1.data[i] = v;
    }
}

/// Decoupled decay on adapter factors only: `A, B <- (1 - lambda) A, B`.
pub fn lora_weight_decay_step<T: Real>(params: &mut ToyParams<T>, lambda: T) {
    let keep = T::one() - lambda;
    for (g, t) in params.tensors_mut() {
        if g.is_lora() {
            t.scale(keep);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b_factors_start_at_zero() {
        let p = ToyParams::<f64>::init(&ToyConfig::default());
        for (g, t) in p.tensors() {
            if matches!(g, ParamGroup::LoraAttB | ParamGroup::LoraMlpB) {
                assert!(t.data.iter().all(|&v| v == 0.0));
            }
            if matches!(g, ParamGroup::LoraAttA | ParamGroup::LoraMlpA) {
                assert!(t.data.iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn parameter_count_is_linear_in_ranks() {
        let count = |r_mlp, r_att| {
            ToyParams::<f64>::init(&ToyConfig {
                r_mlp,
                r_att,
                ..ToyConfig::default()
            })
            .count()
        };
        let c = ToyConfig::default();
        let base = count(0, 0);
        let per_att = c.n_layers * 4 * (c.d_model + c.d_model);
        let per_mlp = c.n_layers * c.n_experts * ((c.d_model + c.d_ff) + (c.d_ff + c.d_model));
        for r in 0..6 {
            assert_eq!(count(0, r), base + r * per_att);
            assert_eq!(count(r, 0), base + r * per_mlp);
            assert_eq!(count(r, r), base + r * (per_att + per_mlp));
        }
    }

    #[test]
    fn decay_touches_only_adapters() {
        let mut p = ToyParams::<f64>::init(&ToyConfig::default());
        p.randomize_lora_b(0.1, 3);
        let (lora0, base0) = (p.lora_norm(), p.base_norm());
        let before = p.clone();
        lora_weight_decay_step(&mut p, 0.0);
        assert_eq!(p, before);
        for _ in 0..100 {
            lora_weight_decay_step(&mut p, 0.01);
        }
        assert!((p.lora_norm() / lora0 - 0.99f64.powi(100)).abs() < 1e-12);
        assert_eq!(p.base_norm(), base0);
        lora_weight_decay_step(&mut p, 1.0);
        assert_eq!(p.lora_norm(), 0.0);
    }

    #[test]
    fn flat_access_round_trips() {
        let mut p = ToyParams::<f64>::init(&ToyConfig::default());
        let n = p.flat_len();
        let (g, v) = p.flat_get(n - 1);
        assert_eq!(g, ParamGroup::Head);
        p.flat_set(n - 1, v + 1.0);
        assert_eq!(p.flat_get(n - 1).1, v + 1.0);
        assert_eq!(p.flat_get(0).0, ParamGroup::Embed);
    }
}
