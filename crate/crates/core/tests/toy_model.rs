use mmseq::layout::{Role, SequenceLayout};
use mmseq::mask::{sample_masking_decisions, MaskDecisions, MaskingProbs};
use mmseq::synth::{random_example_layout, random_packed_layout, SynthLimits};
use mmseq::toy::gradcheck::{grad_check, relative_error};
use mmseq::toy::moe::moe_row;
use mmseq::toy::{accumulate_normalized_loss, LossPart, Mat, ParamGroup, Sequence, ToyConfig, ToyModel};
use mmseq::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(cfg: ToyConfig) -> ToyModel<f64> {
    ToyModel::new(cfg).unwrap()
}

fn mixed_sequence(rng: &mut ChaCha8Rng, cfg: &ToyConfig, max_len: usize) -> Sequence {
    loop {
        let layout = random_packed_layout(rng, &cfg.vocab(), &SynthLimits::default(), max_len);
        if layout.is_vision().iter().any(|&v| v) {
            let dec = sample_masking_decisions(&layout, rng.random(), MaskingProbs::default());
            return Sequence::prepare(layout, &dec, cfg.conv_kernel);
        }
    }
}

#[test]
fn zero_adapters_match_base_model_exactly() {
    let cfg = ToyConfig::default();
    let m = model(cfg.clone());
    let base = m.with_params(m.params.without_lora());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let seq = mixed_sequence(&mut rng, &cfg, 60);
        assert_eq!(m.forward(&seq).unwrap().logits, base.forward(&seq).unwrap().logits);
    }
}

#[test]
fn single_token_reduces_to_value_and_mlp_path() {
    let cfg = ToyConfig::default();
    let mut m = model(cfg.clone());
    m.params.randomize_lora_b(0.3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let full = random_example_layout(&mut rng, &cfg.vocab(), &SynthLimits::default());
    let one = SequenceLayout {
        tokens: full.tokens[..1].to_vec(),
        documents: full.documents.clone(),
    };
    let seq = Sequence::prepare(one.clone(), &MaskDecisions::uniform(&one, false), cfg.conv_kernel);
    let out = m.forward(&seq).unwrap();
    let s = cfg.lora_scale;
    let mut x = m.params.embed.row(one.tokens[0].token_id as usize).to_vec();
    for (l, layer) in m.params.layers.iter().enumerate() {
        let c = &out.caches[l];
        assert_eq!(c.o.row(0), c.v.row(0));
        let mut v = vec![0.0; cfg.d_model];
        layer.attn.wv.forward_row(&x, false, s, &mut v);
        let mut a = vec![0.0; cfg.d_model];
        layer.attn.wo.forward_row(&v, false, s, &mut a);
        let x1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let (_, _, y) = moe_row(layer, &x1, false, cfg.top_k, s);
        x = x1.iter().zip(&y).map(|(p, q)| p + q).collect();
    }
    let mut logits = vec![0.0; m.params.head.cols];
    m.params.head.vec_mul(&x, &mut logits);
    for (a, b) in logits.iter().zip(out.logits.row(0)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn disallowed_keys_receive_no_attention() {
    let cfg = ToyConfig {
        n_layers: 1,
        conv_kernel: 1,
        ..ToyConfig::default()
    };
    let m = model(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let seq = mixed_sequence(&mut rng, &cfg, 50);
        let dense = seq.mask.to_dense();
        let n = seq.layout.len();
        let x0 = m.embed(&seq.layout).unwrap();
        let base = m.forward_from_embeddings(&seq, x0.clone()).unwrap();
        let j = rng.random_range(0..n);
        let mut x = x0;
        x.row_mut(j).iter_mut().for_each(|v| *v += 0.5);
        let pert = m.forward_from_embeddings(&seq, x).unwrap();
        for i in 0..n {
            if !dense[i * n + j] {
                assert_eq!(base.caches[0].o.row(i), pert.caches[0].o.row(i), "row {i} key {j}");
            }
        }
    }
}

#[test]
fn adapter_gradients_at_zero_init() {
    let cfg = ToyConfig::default();
    let m = model(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch: Vec<Sequence> = (0..3).map(|_| mixed_sequence(&mut rng, &cfg, 60)).collect();
    let (_, grad) = m.batch_loss_and_grad(&batch, Exec::Sequential).unwrap();
    for (g, t) in grad.tensors() {
        match g {
            ParamGroup::LoraAttA | ParamGroup::LoraMlpA => assert!(t.data.iter().all(|&v| v == 0.0)),
            _ => {}
        }
    }
    let b_norm: f64 = grad
        .tensors()
        .iter()
        .filter(|(g, _)| matches!(g, ParamGroup::LoraAttB | ParamGroup::LoraMlpB))
        .map(|(_, t)| t.frobenius())
        .sum();
    assert!(b_norm > 0.0);
}

#[test]
fn vision_adapters_never_touch_text_only_sequences() {
    let cfg = ToyConfig::default();
    let mut m = model(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch: Vec<Sequence> = (0..2).map(|_| mixed_sequence(&mut rng, &cfg, 60)).collect();
    for _ in 0..10 {
        let (_, g) = m.batch_loss_and_grad(&batch, Exec::default()).unwrap();
        m.params.axpy(-0.5, &g);
    }
    assert!(m.params.lora_norm() > 0.0);
    let base = m.with_params(m.params.without_lora());
    let limits = SynthLimits {
        max_images: 0,
        ..SynthLimits::default()
    };
    for _ in 0..5 {
        let layout = random_packed_layout(&mut rng, &cfg.vocab(), &limits, 60);
        assert!(layout.tokens.iter().all(|t| t.role != Role::Vision));
        let seq = Sequence::prepare(layout.clone(), &MaskDecisions::uniform(&layout, false), cfg.conv_kernel);
        assert_eq!(m.forward(&seq).unwrap().logits, base.forward(&seq).unwrap().logits);
    }
}

#[test]
fn loss_is_invariant_to_microbatch_partition() {
    let cfg = ToyConfig::default();
    let m = model(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let batch: Vec<Sequence> = (0..6).map(|_| mixed_sequence(&mut rng, &cfg, 80)).collect();
    let parts: Vec<LossPart<f64>> = batch.iter().map(|s| m.sequence_loss(s).unwrap()).collect();
    let by = |groups: &[&[usize]]| {
        let micro: Vec<LossPart<f64>> = groups
            .iter()
            .map(|g| g.iter().map(|&i| parts[i]).reduce(LossPart::merge).unwrap())
            .collect();
        accumulate_normalized_loss(&micro).unwrap()
    };
    let whole = by(&[&[0, 1, 2, 3, 4, 5]]);
    let uneven = by(&[&[4, 1], &[0, 5, 2], &[3]]);
    let singles = by(&[&[5], &[4], &[3], &[2], &[1], &[0]]);
    assert!((whole - uneven).abs() < 1e-12);
    assert!((whole - singles).abs() < 1e-12);
    let batch_loss = m.batch_loss(&batch).unwrap();
    assert!((whole - batch_loss).abs() < 1e-12);
}

#[test]
fn decode_matches_full_forward() {
    let cfg = ToyConfig {
        conv_kernel: 3,
        ..ToyConfig::default()
    };
    let mut m = model(cfg.clone());
    m.params.randomize_lora_b(0.3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let prefill = random_example_layout(&mut rng, &cfg.vocab(), &SynthLimits::default());
        let seq = Sequence::prepare(prefill.clone(), &MaskDecisions::uniform(&prefill, false), cfg.conv_kernel);
        let (out, mut state) = m.prefill(&seq).unwrap();
        let mut last = out.logits.row(prefill.len() - 1).to_vec();
        let mut generated = Vec::new();
        let mut step_logits = Vec::new();
        for _ in 0..6 {
            let next = (0..cfg.text_vocab).max_by(|&a, &b| last[a as usize].total_cmp(&last[b as usize])).unwrap();
            generated.push(next);
            last = m.decode_step(&mut state, next).unwrap();
            step_logits.push(last.clone());
        }
        let full_layout = prefill.with_generated(&generated);
        let full = Sequence::prepare(full_layout.clone(), &MaskDecisions::uniform(&full_layout, false), cfg.conv_kernel);
        let logits = m.forward(&full).unwrap().logits;
        for (t, row) in step_logits.iter().enumerate() {
            for (a, b) in row.iter().zip(logits.row(prefill.len() + t)) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn dual_router_traces_are_independent_per_modality() {
    let cfg = ToyConfig {
        dual_router: true,
        ..ToyConfig::default()
    };
    let m = model(cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seq = mixed_sequence(&mut rng, &cfg, 80);
    let base = m.forward(&seq).unwrap();
    let mut p = m.params.clone();
    let rv = p.layers[0].router_vision.as_mut().unwrap();
    *rv = Mat::randn(rv.rows, rv.cols, 1.0, &mut rng);
    let pert = m.with_params(p).forward(&seq).unwrap();
    let mut vision_changed = false;
    for (a, b) in base.traces[0].tokens.iter().zip(&pert.traces[0].tokens) {
        if a.vision {
            vision_changed |= a.logits != b.logits;
        } else {
            assert_eq!(a, b);
        }
    }
    assert!(vision_changed);
    let summary = base.traces[0].summary(cfg.n_experts);
    let vis = seq.layout.is_vision();
    assert_eq!(summary.vision.tokens, vis.iter().filter(|&&v| v).count());
    assert_eq!(summary.text.tokens, vis.len() - summary.vision.tokens);
    assert_eq!(summary.vision.load.iter().sum::<usize>(), summary.vision.tokens * cfg.top_k);
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ToyConfig {
        conv_kernel: 2,
        n_layers: 1,
        ..ToyConfig::default()
    };
    let mut m = model(cfg.clone());
    m.params.randomize_lora_b(0.3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<Sequence> = (0..2).map(|_| mixed_sequence(&mut rng, &cfg, 30)).collect();
    let report = grad_check(&m, &batch, 1e-5, Exec::default()).unwrap();
    for (name, g) in &report.groups {
        assert!(g.max_rel_error < 1e-5, "{name}: {g:?}");
    }
    assert_eq!(relative_error(0.0, 0.0), 0.0);
}
