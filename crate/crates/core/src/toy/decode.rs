//! Incremental decoding after a hybrid-mask prefill.
//!
//! Generated tokens attend causally to everything before them and extend the
//! slot layout by one slot each. Row computations are shared with the full
//! forward pass so both paths produce the same numbers.

use crate::mask::decode_mask_row;
use crate::{Error, Result};

use super::model::{attend_row, conv_row, ForwardOutput, Geometry, Sequence, ToyModel};
use super::moe::moe_row;
use super::tensor::Real;

#[derive(Debug, Clone)]
struct LayerState<T> {
    qp: Vec<Vec<T>>,
    kp: Vec<Vec<T>>,
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    prefill: crate::layout::SequenceLayout,
    src: Vec<Option<usize>>,
    layers: Vec<LayerState<T>>,
    generated: usize,
}

impl<T> DecodeState<T> {
    pub fn len(&self) -> usize {
        self.prefill.len() + self.generated
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T: Real> ToyModel<T> {
    pub fn prefill(&self, seq: &Sequence) -> Result<(ForwardOutput<T>, DecodeState<T>)> {
        let out = self.forward(seq)?;
        let geo = Geometry::new(seq, self.params.embed.rows)?;
        let rows = |m: &super::tensor::Mat<T>| (0..m.rows).map(|i| m.row(i).to_vec()).collect();
        let layers = out
            .caches
            .iter()
            .map(|c| LayerState {
                qp: rows(&c.qp),
                kp: rows(&c.kp),
                k: rows(&c.k),
                v: rows(&c.v),
            })
            .collect();
        let state = DecodeState {
            prefill: seq.layout.clone(),
            src: geo.src,
            layers,
            generated: 0,
        };
        Ok((out, state))
    }

    /// Feeds one generated text token; returns its logits.
    pub fn decode_step(&self, state: &mut DecodeState<T>, token_id: u32) -> Result<Vec<T>> {
        if token_id as usize >= self.params.embed.rows {
            return Err(Error::Shape(format!("token id {token_id} outside vocabulary")));
        }
        let keys: Vec<u32> = decode_mask_row(&state.prefill, state.generated).map(|j| j as u32).collect();
        let n = state.len();
        let slot = state.src.len();
        state.src.push(Some(n));
        let s = self.scale();
        let d = self.cfg.d_model;
        let mut x = self.params.embed.row(token_id as usize).to_vec();
        for (layer, st) in self.params.layers.iter().zip(&mut state.layers) {
            let a = &layer.attn;
            let mut qp = vec![T::zero(); d];
            let mut kp = vec![T::zero(); d];
            let mut v = vec![T::zero(); d];
            a.wq.forward_row(&x, false, s, &mut qp);
            a.wk.forward_row(&x, false, s, &mut kp);
            a.wv.forward_row(&x, false, s, &mut v);
            st.qp.push(qp);
            st.kp.push(kp);
            st.v.push(v);
            let mut q = vec![T::zero(); d];
            let mut k = vec![T::zero(); d];
            conv_row(&a.conv_q, slot, &state.src, &st.qp, &mut q);
            conv_row(&a.conv_k, slot, &state.src, &st.kp, &mut k);
            st.k.push(k);
            let (o, _) = attend_row(&q, &keys, &st.k, &st.v, self.cfg.n_heads);
            let mut tmp = vec![T::zero(); d];
            a.wo.forward_row(&o, false, s, &mut tmp);
            let mut x1 = x.clone();
            for (r, &t) in x1.iter_mut().zip(&tmp) {
                *r += t;
            }
            let (_, _, m) = moe_row(layer, &x1, false, self.cfg.top_k, s);
            for (r, &mv) in x1.iter_mut().zip(&m) {
                *r += T::one() * mv;
            }
            x = x1;
        }
        state.generated += 1;
        let mut logits = vec![T::zero(); self.params.head.cols];
        self.params.head.vec_mul(&x, &mut logits);
        Ok(logits)
    }
}
