//! Forward and backward passes of the toy decoder.
//!
//! Each layer: vision-aware projections, depthwise causal convolution of the
//! query/key streams over the padded slot layout, masked multi-head
//! attention over the compiled mask, output projection, residual, then a
//! top-k MoE MLP with residual. A linear head produces logits.

use crate::convpad::{plan_conv_padding, PaddedLayout, Slot};
use crate::exec::Exec;
use crate::layout::{Role, SequenceLayout};
use crate::mask::{compile_block_mask, AllowedKeys, MaskDecisions, MaskSpec};
use crate::{Error, Result};

use super::config::ToyConfig;
use super::loss::{answer_loss, cross_entropy_grad, loss_targets, LossPart};
use super::moe::{moe_row, silu_grad, ExpertActs, RouterTrace, TokenRoute};
use super::params::{LayerParams, ToyParams};
use super::tensor::{Mat, Real};

/// A layout together with its compiled mask and conv padding plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub layout: SequenceLayout,
    pub mask: MaskSpec,
    pub padded: PaddedLayout,
}

impl Sequence {
    pub fn prepare(layout: SequenceLayout, decisions: &MaskDecisions, kernel: usize) -> Self {
        let mask = compile_block_mask(&layout, decisions);
        let padded = plan_conv_padding(&layout, decisions, kernel);
        Sequence { layout, mask, padded }
    }
}

pub(crate) trait Rows<T> {
    fn row_at(&self, i: usize) -> &[T];
}

impl<T: Real> Rows<T> for Mat<T> {
    fn row_at(&self, i: usize) -> &[T] {
        self.row(i)
    }
}

impl<T> Rows<T> for Vec<Vec<T>> {
    fn row_at(&self, i: usize) -> &[T] {
        &self[i]
    }
}

/// `out = sum_s filter[s] * value(p - s)`; pads contribute nothing.
pub(crate) fn conv_row<T: Real, R: Rows<T>>(filter: &Mat<T>, p: usize, src: &[Option<usize>], values: &R, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    for s in 0..filter.rows.min(p + 1) {
        if let Some(j) = src[p - s] {
            for ((o, &f), &v) in out.iter_mut().zip(filter.row(s)).zip(values.row_at(j)) {
                *o += f * v;
            }
        }
    }
}

/// Multi-head attention of one query over `keys`. Returns the output and the
/// per-head probabilities laid out as `[head][key]`.
pub(crate) fn attend_row<T: Real, R: Rows<T>>(q: &[T], keys: &[u32], k: &R, v: &R, n_heads: usize) -> (Vec<T>, Vec<T>) {
    let d = q.len();
    let hd = d / n_heads;
    let inv = T::one() / T::c(hd as f64).sqrt();
    let mut out = vec![T::zero(); d];
    let mut probs = vec![T::zero(); n_heads * keys.len()];
    if keys.is_empty() {
        return (out, probs);
    }
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = &q[cols.clone()];
        let p = &mut probs[h * keys.len()..(h + 1) * keys.len()];
        for (pj, &j) in p.iter_mut().zip(keys) {
            *pj = qh.iter().zip(&k.row_at(j as usize)[cols.clone()]).map(|(&a, &b)| a * b).sum::<T>() * inv;
        }
        let m = p.iter().copied().fold(T::neg_infinity(), T::max);
        p.iter_mut().for_each(|s| *s = (*s - m).exp());
        let z: T = p.iter().copied().sum();
        p.iter_mut().for_each(|s| *s /= z);
        for (&pj, &j) in p.iter().zip(keys) {
            for (o, &vv) in out[cols.clone()].iter_mut().zip(&v.row_at(j as usize)[cols.clone()]) {
                *o += pj * vv;
            }
        }
    }
    (out, probs)
}

pub(crate) struct Geometry {
    pub vision: Vec<bool>,
    pub keys: AllowedKeys,
    pub pos: Vec<usize>,
    /// Token feeding each slot, `None` for pads and pad-role tokens.
    pub src: Vec<Option<usize>>,
}

impl Geometry {
    pub(crate) fn new(seq: &Sequence, vocab_size: usize) -> Result<Self> {
        let n = seq.layout.len();
        if seq.mask.sequence_len != n {
            return Err(Error::Shape(format!("mask covers {} tokens, layout has {n}", seq.mask.sequence_len)));
        }
        if n == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if let Some(t) = seq.layout.tokens.iter().find(|t| t.token_id as usize >= vocab_size) {
            return Err(Error::Shape(format!("token id {} outside vocabulary of {vocab_size}", t.token_id)));
        }
        let mut seen = vec![0u32; n];
        for s in &seq.padded.slots {
            match *s {
                Slot::Original(i) | Slot::DuplicateOf(i) if i >= n => {
                    return Err(Error::Shape(format!("padding plan references token {i} of {n}")));
                }
                Slot::Original(i) => seen[i] += 1,
                _ => {}
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Shape("padding plan must hold every token exactly once".into()));
        }
        let roles: Vec<Role> = seq.layout.tokens.iter().map(|t| t.role).collect();
        let src = (0..seq.padded.slots.len())
            .map(|p| seq.padded.source(p).filter(|&i| roles[i] != Role::Pad))
            .collect();
        Ok(Geometry {
            vision: seq.layout.is_vision(),
            keys: seq.mask.allowed_keys(),
            pos: seq.padded.positions(n),
            src,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<T> {
    pub x: Mat<T>,
    pub qp: Mat<T>,
    pub kp: Mat<T>,
    pub q: Mat<T>,
    pub k: Mat<T>,
    pub v: Mat<T>,
    pub(crate) probs: Vec<Vec<T>>,
    pub o: Mat<T>,
    pub x1: Mat<T>,
    /// Gate-weighted expert output.
    pub m: Mat<T>,
    pub(crate) routes: Vec<TokenRoute<T>>,
    pub(crate) acts: Vec<Vec<ExpertActs<T>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    pub logits: Mat<T>,
    /// Residual stream after the embedding and after every layer.
    pub hidden: Vec<Mat<T>>,
    pub traces: Vec<RouterTrace<T>>,
    pub caches: Vec<LayerCache<T>>,
}

impl<T: Real> ForwardOutput<T> {
    /// Every intermediate value computed at token `i`, concatenated.
    pub fn activations_at(&self, i: usize) -> Vec<T> {
        let mut out = Vec::new();
        for c in &self.caches {
            for m in [&c.x, &c.qp, &c.kp, &c.q, &c.k, &c.v, &c.o, &c.x1, &c.m] {
                out.extend_from_slice(m.row(i));
            }
        }
        for h in &self.hidden {
            out.extend_from_slice(h.row(i));
        }
        out.extend_from_slice(self.logits.row(i));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel<T> {
    pub cfg: ToyConfig,
    pub params: ToyParams<T>,
}

impl<T: Real> ToyModel<T> {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ToyParams::init(&cfg);
        Ok(ToyModel { cfg, params })
    }

    pub fn with_params(&self, params: ToyParams<T>) -> Self {
        ToyModel {
            cfg: self.cfg.clone(),
            params,
        }
    }

    pub(crate) fn scale(&self) -> T {
        T::c(self.cfg.lora_scale)
    }

    pub fn embed(&self, layout: &SequenceLayout) -> Result<Mat<T>> {
        let d = self.cfg.d_model;
        let mut x = Mat::zeros(layout.len(), d);
        for (i, t) in layout.tokens.iter().enumerate() {
            if t.token_id as usize >= self.params.embed.rows {
                return Err(Error::Shape(format!("token id {} outside vocabulary of {}", t.token_id, self.params.embed.rows)));
            }
            x.row_mut(i).copy_from_slice(self.params.embed.row(t.token_id as usize));
        }
        Ok(x)
    }

    pub fn forward(&self, seq: &Sequence) -> Result<ForwardOutput<T>> {
        let x = self.embed(&seq.layout)?;
        self.forward_from_embeddings(seq, x)
    }

    /// Forward pass from an explicit input embedding matrix.
    pub fn forward_from_embeddings(&self, seq: &Sequence, x0: Mat<T>) -> Result<ForwardOutput<T>> {
        let geo = Geometry::new(seq, self.params.embed.rows)?;
        if x0.rows != seq.layout.len() || x0.cols != self.cfg.d_model {
            return Err(Error::Shape(format!("embeddings are {}x{}", x0.rows, x0.cols)));
        }
        let mut hidden = vec![x0];
        let mut caches = Vec::with_capacity(self.params.layers.len());
        let mut traces = Vec::with_capacity(self.params.layers.len());
        for layer in &self.params.layers {
            let cache = self.layer_forward(layer, &geo, hidden.last().unwrap());
            let mut x2 = cache.x1.clone();
            x2.axpy(T::one(), &cache.m);
            traces.push(RouterTrace {
                tokens: cache.routes.clone(),
            });
            hidden.push(x2);
            caches.push(cache);
        }
        let logits = self.head(hidden.last().unwrap());
        Ok(ForwardOutput {
            logits,
            hidden,
            traces,
            caches,
        })
    }

    fn head(&self, x: &Mat<T>) -> Mat<T> {
        let mut logits = Mat::zeros(x.rows, self.params.head.cols);
        for i in 0..x.rows {
            self.params.head.vec_mul(x.row(i), logits.row_mut(i));
        }
        logits
    }

    fn layer_forward(&self, layer: &LayerParams<T>, geo: &Geometry, x: &Mat<T>) -> LayerCache<T> {
        let (n, d) = (x.rows, x.cols);
        let s = self.scale();
        let a = &layer.attn;
        let mut qp = Mat::zeros(n, d);
        let mut kp = Mat::zeros(n, d);
        let mut v = Mat::zeros(n, d);
        for i in 0..n {
            let vis = geo.vision[i];
            a.wq.forward_row(x.row(i), vis, s, qp.row_mut(i));
            a.wk.forward_row(x.row(i), vis, s, kp.row_mut(i));
            a.wv.forward_row(x.row(i), vis, s, v.row_mut(i));
        }
        let mut q = Mat::zeros(n, d);
        let mut k = Mat::zeros(n, d);
        for i in 0..n {
            conv_row(&a.conv_q, geo.pos[i], &geo.src, &qp, q.row_mut(i));
            conv_row(&a.conv_k, geo.pos[i], &geo.src, &kp, k.row_mut(i));
        }
        let mut o = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let (oi, pi) = attend_row(q.row(i), geo.keys.row(i), &k, &v, self.cfg.n_heads);
            o.row_mut(i).copy_from_slice(&oi);
            probs.push(pi);
        }
        let mut x1 = x.clone();
        let mut tmp = vec![T::zero(); d];
        for i in 0..n {
            a.wo.forward_row(o.row(i), geo.vision[i], s, &mut tmp);
            for (r, &t) in x1.row_mut(i).iter_mut().zip(&tmp) {
                *r += t;
            }
        }
        let mut routes = Vec::with_capacity(n);
        let mut acts = Vec::with_capacity(n);
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let (route, act, mi) = moe_row(layer, x1.row(i), geo.vision[i], self.cfg.top_k, s);
            m.row_mut(i).copy_from_slice(&mi);
            routes.push(route);
            acts.push(act);
        }
        LayerCache {
            x: x.clone(),
            qp,
            kp,
            q,
            k,
            v,
            probs,
            o,
            x1,
            m,
            routes,
            acts,
        }
    }

    /// Answer-token loss of one sequence: `(sum, count)`, not divided.
    pub fn sequence_loss(&self, seq: &Sequence) -> Result<LossPart<T>> {
        let out = self.forward(seq)?;
        answer_loss(&out.logits, &seq.layout)
    }

    /// Gradient of `loss_sum * weight` for one sequence.
    pub fn sequence_grad(&self, seq: &Sequence, weight: T) -> Result<(LossPart<T>, ToyParams<T>)> {
        let out = self.forward(seq)?;
        let part = answer_loss(&out.logits, &seq.layout)?;
        let targets = loss_targets(&seq.layout);
        let mut dlogits = Mat::zeros(out.logits.rows, out.logits.cols);
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                dlogits.row_mut(i).copy_from_slice(&cross_entropy_grad(out.logits.row(i), t, weight));
            }
        }
        let geo = Geometry::new(seq, self.params.embed.rows)?;
        let grad = self.backward(seq, &geo, &out, &dlogits);
        Ok((part, grad))
    }

    /// Normalized answer loss of a batch and its gradient; sequences run
    /// independently under `exec` and reduce in order.
    pub fn batch_loss_and_grad(&self, batch: &[Sequence], exec: Exec) -> Result<(T, ToyParams<T>)> {
        let total: usize = batch.iter().map(|s| loss_targets(&s.layout).iter().flatten().count()).sum();
        if total == 0 {
            return Err(Error::NoLossTokens);
        }
        let w = T::one() / T::c(total as f64);
        let parts = exec.map(batch, |s| self.sequence_grad(s, w));
        let mut grad = self.params.zeros_like();
        let mut loss = T::zero();
        for p in parts {
            let (part, g) = p?;
            loss += part.loss_sum;
            grad.axpy(T::one(), &g);
        }
        Ok((loss * w, grad))
    }

    /// Normalized answer loss of a batch: `sum(loss) / sum(count)`.
    pub fn batch_loss(&self, batch: &[Sequence]) -> Result<T> {
        let parts = batch.iter().map(|s| self.sequence_loss(s)).collect::<Result<Vec<_>>>()?;
        super::loss::accumulate_normalized_loss(&parts)
    }

    fn backward(&self, seq: &Sequence, geo: &Geometry, out: &ForwardOutput<T>, dlogits: &Mat<T>) -> ToyParams<T> {
        let p = &self.params;
        let mut g = p.zeros_like();
        let s = self.scale();
        let d = self.cfg.d_model;
        let n = dlogits.rows;
        let last = out.hidden.last().unwrap();
        let mut dx = Mat::zeros(n, d);
        for i in 0..n {
            g.head.outer_acc(last.row(i), dlogits.row(i), T::one());
            p.head.mul_vec_acc(dlogits.row(i), dx.row_mut(i));
        }
        for (l, layer) in p.layers.iter().enumerate().rev() {
            let c = &out.caches[l];
            let gl = &mut g.layers[l];
            // MoE block: x2 = x1 + sum_e g_e y_e(x1)
            let mut dx1 = dx.clone();
            for i in 0..n {
                let vis = geo.vision[i];
                let route = &c.routes[i];
                let dy = dx.row(i);
                let mut dgate = Vec::with_capacity(route.experts.len());
                let dxi = dx1.row_mut(i);
                for ((&e, &gate), act) in route.experts.iter().zip(&route.gates).zip(&c.acts[i]) {
                    dgate.push(dy.iter().zip(&act.y).map(|(&a, &b)| a * b).sum::<T>());
                    let dye: Vec<T> = dy.iter().map(|&v| v * gate).collect();
                    let ex = &layer.experts[e];
                    let gex = &mut gl.experts[e];
                    let mut dh = vec![T::zero(); act.hact.len()];
                    ex.w2.backward_row(&mut gex.w2, &act.hact, &dye, vis, s, &mut dh);
                    for (dv, &h) in dh.iter_mut().zip(&act.hpre) {
                        *dv *= silu_grad(h);
                    }
                    ex.w1.backward_row(&mut gex.w1, c.x1.row(i), &dh, vis, s, dxi);
                }
                let total: T = route.experts.iter().map(|&e| route.probs[e]).sum();
                let mix: T = route.gates.iter().zip(&dgate).map(|(&a, &b)| a * b).sum();
                let mut dprob = vec![T::zero(); route.probs.len()];
                for (&e, &dg) in route.experts.iter().zip(&dgate) {
                    dprob[e] = (dg - mix) / total;
                }
                let pd: T = route.probs.iter().zip(&dprob).map(|(&a, &b)| a * b).sum();
                let dlogit: Vec<T> = route.probs.iter().zip(&dprob).map(|(&pe, &dp)| pe * (dp - pd)).collect();
                gl.router_for_mut(vis).outer_acc(c.x1.row(i), &dlogit, T::one());
                layer.router_for(vis).mul_vec_acc(&dlogit, dxi);
            }
            // Attention block: x1 = x + wo(attn(conv(q), conv(k), v))
            let a = &layer.attn;
            let ga = &mut gl.attn;
            let mut dxa = dx1.clone();
            let mut do_ = Mat::zeros(n, d);
            for i in 0..n {
                a.wo.backward_row(&mut ga.wo, c.o.row(i), dx1.row(i), geo.vision[i], s, do_.row_mut(i));
            }
            let nh = self.cfg.n_heads;
            let hd = d / nh;
            let inv = T::one() / T::c(hd as f64).sqrt();
            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            for i in 0..n {
                let keys = geo.keys.row(i);
                if keys.is_empty() {
                    continue;
                }
                for h in 0..nh {
                    let cols = h * hd..(h + 1) * hd;
                    let pr = &c.probs[i][h * keys.len()..(h + 1) * keys.len()];
                    let doh = &do_.row(i)[cols.clone()];
                    let dp: Vec<T> = keys
                        .iter()
                        .map(|&j| doh.iter().zip(&c.v.row(j as usize)[cols.clone()]).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let pdp: T = pr.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                    for ((&j, &pj), &dpj) in keys.iter().zip(pr).zip(&dp) {
                        let j = j as usize;
                        let ds = pj * (dpj - pdp) * inv;
                        for col in cols.clone() {
                            dv.data[j * d + col] += pj * doh[col - h * hd];
                            dq.data[i * d + col] += ds * c.k.data[j * d + col];
                            dk.data[j * d + col] += ds * c.q.data[i * d + col];
                        }
                    }
                }
            }
            let mut dqp = Mat::zeros(n, d);
            let mut dkp = Mat::zeros(n, d);
            for i in 0..n {
                let pos = geo.pos[i];
                for sh in 0..a.conv_q.rows.min(pos + 1) {
                    if let Some(j) = geo.src[pos - sh] {
                        for col in 0..d {
                            let gq = dq.data[i * d + col];
                            let gk = dk.data[i * d + col];
                            ga.conv_q.data[sh * d + col] += gq * c.qp.data[j * d + col];
                            ga.conv_k.data[sh * d + col] += gk * c.kp.data[j * d + col];
                            dqp.data[j * d + col] += a.conv_q.data[sh * d + col] * gq;
                            dkp.data[j * d + col] += a.conv_k.data[sh * d + col] * gk;
                        }
                    }
                }
            }
            for i in 0..n {
                let vis = geo.vision[i];
                let xi = c.x.row(i);
                let dxi = dxa.row_mut(i);
                a.wq.backward_row(&mut ga.wq, xi, dqp.row(i), vis, s, dxi);
                a.wk.backward_row(&mut ga.wk, xi, dkp.row(i), vis, s, dxi);
                a.wv.backward_row(&mut ga.wv, xi, dv.row(i), vis, s, dxi);
            }
            dx = dxa;
        }
        for (i, t) in seq.layout.tokens.iter().enumerate() {
            let row = g.embed.row_mut(t.token_id as usize);
            for (e, &v) in row.iter_mut().zip(dx.row(i)) {
                *e += v;
            }
        }
        g
    }
}
