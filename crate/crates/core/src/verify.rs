//! End-to-end checks of the sequence machinery, shared by the acceptance
//! test target and the `verify` command.
//!
//! Every check is deterministic for a given seed and reports one JSON object.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::example::MultimodalExample;
use crate::exec::Exec;
use crate::geometry::{resize_to_patch_grid, vision_token_count, ResolutionCap};
use crate::grounding::{
    convert_scale, parse_box, parse_point_tokens, parse_xml_points, render_box, render_point_tokens, render_xml_points, BoundingBox, Point,
    PointSet, Scale,
};
use crate::layout::{render_chat_template, Role, SequenceLayout};
use crate::mask::{compile_block_mask, dense_predicate, sample_masking_decisions, MaskDecisions, MaskingProbs};
use crate::packer::{first_fit_decreasing, pack, packing_report};
use crate::synth::{random_example_layout, random_packed_layout, SynthLimits};
use crate::tokens::Vocab;
use crate::toy::gradcheck::{grad_check, GradCheckReport, TIE_MARGIN};
use crate::toy::{accumulate_normalized_loss, LossPart, Mat, Sequence, ToyConfig, ToyModel};
use crate::{Error, ImageSpec, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: &'static str,
    pub passed: bool,
    pub detail: Value,
}

impl CheckOutcome {
    fn new(check: &'static str, passed: bool, detail: Value) -> Self {
        CheckOutcome { check, passed, detail }
    }

    fn failed(check: &'static str, e: Error) -> Self {
        CheckOutcome::new(check, false, json!({ "error": e.to_string() }))
    }

    pub fn to_json_line(&self) -> String {
        let mut obj = json!({ "check": self.check, "passed": self.passed });
        if let (Value::Object(o), Value::Object(d)) = (&mut obj, &self.detail) {
            o.extend(d.clone());
        }
        serde_json::to_string(&obj).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Width the convolution padding plan is built for.
    pub kernel: usize,
    /// Toy model; its `conv_kernel` is the width actually applied.
    pub toy: ToyConfig,
    pub probs: MaskingProbs,
    pub capacity: usize,
    pub exec: Exec,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        let toy = ToyConfig::default();
        VerifyOptions {
            seed: 0,
            kernel: toy.conv_kernel,
            toy,
            probs: MaskingProbs::default(),
            capacity: crate::packer::DEFAULT_CAPACITY,
            exec: Exec::default(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Renders examples with vision-token counts from the resize rule at `cap`.
pub fn render_examples(examples: &[MultimodalExample], vocab: &Vocab, cap: ResolutionCap) -> Result<Vec<SequenceLayout>> {
    examples
        .iter()
        .map(|ex| {
            let counts = ex
                .images
                .iter()
                .map(|img| Ok(vision_token_count(&resize_to_patch_grid(img, cap)?)))
                .collect::<Result<Vec<_>>>()?;
            render_chat_template(ex, &counts, vocab)
        })
        .collect()
}

/// Compiled block mask vs the reference predicate on every pair.
pub fn mask_oracle(corpus: &[SequenceLayout], n_random: usize, max_len: usize, opts: &VerifyOptions) -> CheckOutcome {
    let vocab = opts.toy.vocab();
    let limits = SynthLimits {
        max_images: 3,
        max_vision_per_image: 24,
        max_turns: 4,
        max_question: 12,
        max_answer: 12,
        grounding_rate: 0.5,
    };
    let check = |layout: &SequenceLayout, seed: u64| {
        let dec = sample_masking_decisions(layout, seed, opts.probs);
        let compiled = compile_block_mask(layout, &dec).to_dense();
        let reference = dense_predicate(layout, &dec);
        let mismatches = compiled.iter().zip(&reference).filter(|(a, b)| a != b).count();
        (layout.len(), mismatches)
    };
    let mut results = opts.exec.map_range(n_random, |i| {
        let mut rng = rng_for(opts.seed, i as u64);
        let layout = random_packed_layout(&mut rng, &vocab, &limits, max_len);
        check(&layout, rng.random())
    });
    let packed_corpus: Vec<SequenceLayout> = match pack(corpus, max_len.max(1)) {
        Ok(bins) => bins.iter().map(|b| b.flatten()).collect(),
        Err(_) => corpus.to_vec(),
    };
    results.extend(opts.exec.map(&packed_corpus, |l| check(l, opts.seed)));
    let mismatches: usize = results.iter().map(|r| r.1).sum();
    let pairs: usize = results.iter().map(|r| r.0 * r.0).sum();
    CheckOutcome::new(
        "mask_oracle",
        mismatches == 0,
        json!({ "layouts": results.len(), "max_len": results.iter().map(|r| r.0).max().unwrap_or(0), "pairs": pairs, "mismatches": mismatches }),
    )
}

/// Vision-token counts of large square images at the stage caps.
pub fn token_anchors() -> CheckOutcome {
    let mut rows = Vec::new();
    let mut ok = true;
    for (mp, expected, band) in [(0.8, 961usize, (950usize, 1100usize)), (6.3, 7921, (7800, 8100))] {
        for side in [3000u32, 4000, 8192] {
            let img = ImageSpec::new(side, side, 0);
            let tokens = resize_to_patch_grid(&img, ResolutionCap::mp(mp)).map(|g| vision_token_count(&g)).unwrap_or(0);
            ok &= tokens == expected && (band.0..=band.1).contains(&tokens);
            rows.push(json!({ "cap_mp": mp, "side_px": side, "tokens": tokens, "expected": expected }));
        }
    }
    CheckOutcome::new("token_anchors", ok, json!({ "cases": rows }))
}

fn two_documents(rng: &mut ChaCha8Rng, vocab: &Vocab, pool: &[SequenceLayout]) -> SequenceLayout {
    let limits = SynthLimits::default();
    let pick = |rng: &mut ChaCha8Rng| {
        if !pool.is_empty() && rng.random_bool(0.5) {
            pool[rng.random_range(0..pool.len())].clone()
        } else {
            random_example_layout(rng, vocab, &limits)
        }
    };
    let mut a = pick(rng);
    let b = pick(rng);
    a.append(&b);
    a
}

fn isolation_pairs(opts: &VerifyOptions) -> Vec<(usize, usize)> {
    if opts.kernel == opts.toy.conv_kernel {
        let ks: BTreeSet<usize> = [1, 2, 4, opts.kernel].into_iter().collect();
        ks.into_iter().map(|k| (k, k)).collect()
    } else {
        vec![(opts.kernel, opts.toy.conv_kernel)]
    }
}

/// Impulse test: perturbing one token of a document leaves every activation
/// of the other document bit-for-bit unchanged.
pub fn document_isolation(corpus: &[SequenceLayout], instances: usize, opts: &VerifyOptions) -> CheckOutcome {
    let vocab = opts.toy.vocab();
    let pool: Vec<SequenceLayout> = corpus.iter().filter(|l| l.len() <= 200).cloned().collect();
    let pairs = isolation_pairs(opts);
    let runs = opts.exec.map_range(instances * pairs.len(), |idx| -> Result<(bool, bool)> {
        let (planned, applied) = pairs[idx % pairs.len()];
        let mut rng = rng_for(opts.seed ^ 0x150, idx as u64);
        let layout = two_documents(&mut rng, &vocab, &pool);
        let dec = sample_masking_decisions(&layout, rng.random(), opts.probs);
        let seq = Sequence::prepare(layout, &dec, planned);
        let mut model = ToyModel::<f64>::new(ToyConfig {
            conv_kernel: applied,
            seed: rng.random(),
            ..opts.toy.clone()
        })?;
        model.params.randomize_lora_b(0.3, rng.random());
        let ranges = seq.layout.document_ranges();
        let src = rng.random_range(0..2);
        let target = &ranges[src];
        let i = rng.random_range(target.clone());
        let x0 = model.embed(&seq.layout)?;
        let base = model.forward_from_embeddings(&seq, x0.clone())?;
        let mut x = x0;
        for v in x.row_mut(i) {
            *v += rng.random_range(0.5..1.5);
        }
        let pert = model.forward_from_embeddings(&seq, x)?;
        let isolated = ranges[1 - src].clone().all(|j| base.activations_at(j) == pert.activations_at(j));
        let moved = base.activations_at(i) != pert.activations_at(i);
        Ok((isolated, moved))
    });
    let mut leaks = 0;
    let mut inert = 0;
    for r in runs {
        match r {
            Ok((iso, moved)) => {
                leaks += usize::from(!iso);
                inert += usize::from(!moved);
            }
            Err(e) => return CheckOutcome::failed("document_isolation", e),
        }
    }
    let kernels: Vec<Value> = pairs.iter().map(|&(p, a)| json!({ "planned": p, "applied": a })).collect();
    CheckOutcome::new(
        "document_isolation",
        leaks == 0 && inert == 0,
        json!({ "instances": instances * pairs.len(), "kernels": kernels, "leaking_instances": leaks, "inert_perturbations": inert }),
    )
}

fn multi_turn_document(rng: &mut ChaCha8Rng, vocab: &Vocab) -> SequenceLayout {
    let n_images = rng.random_range(1..=2);
    let n_turns = rng.random_range(2..=3);
    let lens: Vec<(usize, usize)> = (0..n_turns).map(|_| (rng.random_range(1..=4), rng.random_range(1..=4))).collect();
    let grounding = rng.random_bool(0.5);
    let ex = MultimodalExample::random(rng, vocab, n_images, &lens, grounding);
    let counts: Vec<usize> = (0..n_images).map(|_| rng.random_range(1..=5)).collect();
    render_chat_template(&ex, &counts, vocab).expect("valid example")
}

/// With the second turn masked, perturbing first-turn text leaves the
/// second turn's logits unchanged; without masking some logit moves.
pub fn conversation_leakage(instances: usize, opts: &VerifyOptions) -> CheckOutcome {
    let vocab = opts.toy.vocab();
    let runs = opts.exec.map_range(instances, |idx| -> Result<(bool, bool)> {
        let mut rng = rng_for(opts.seed ^ 0x1ea, idx as u64);
        let layout = multi_turn_document(&mut rng, &vocab);
        let mut model = ToyModel::<f64>::new(ToyConfig {
            seed: rng.random(),
            ..opts.toy.clone()
        })?;
        model.params.randomize_lora_b(0.3, rng.random());
        let first: Vec<usize> = (0..layout.len()).filter(|&i| layout.tokens[i].turn == Some(0) && layout.tokens[i].role == Role::Text).collect();
        let second: Vec<usize> = (0..layout.len()).filter(|&i| layout.tokens[i].turn == Some(1)).collect();
        let mut x0 = model.embed(&layout)?;
        let base_x = x0.clone();
        for &i in &first {
            for v in x0.row_mut(i) {
                *v += rng.random_range(0.5..1.5);
            }
        }
        let changed = |dec: &MaskDecisions| -> Result<bool> {
            let seq = Sequence::prepare(layout.clone(), dec, opts.kernel);
            let a = model.forward_from_embeddings(&seq, base_x.clone())?.logits;
            let b = model.forward_from_embeddings(&seq, x0.clone())?.logits;
            Ok(second.iter().any(|&i| a.row(i) != b.row(i)))
        };
        let mut masked = MaskDecisions::uniform(&layout, false);
        masked.masked.insert((0, 1), true);
        Ok((!changed(&masked)?, changed(&MaskDecisions::uniform(&layout, false))?))
    });
    let (mut leaks, mut inert) = (0, 0);
    for r in runs {
        match r {
            Ok((sealed, control)) => {
                leaks += usize::from(!sealed);
                inert += usize::from(!control);
            }
            Err(e) => return CheckOutcome::failed("conversation_leakage", e),
        }
    }
    CheckOutcome::new(
        "conversation_leakage",
        leaks == 0 && inert == 0,
        json!({ "instances": instances, "leaking_instances": leaks, "unmasked_controls_without_change": inert }),
    )
}

/// Configuration of the finite-difference check.
pub fn gradcheck_config(seed: u64) -> ToyConfig {
    ToyConfig {
        d_model: 16,
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        r_mlp: 4,
        r_att: 2,
        conv_kernel: 2,
        seed,
        ..ToyConfig::default()
    }
}

/// A single `len`-token sequence holding both vision and text tokens.
pub fn mixed_sequence(rng: &mut ChaCha8Rng, vocab: &Vocab, len: usize, kernel: usize, probs: MaskingProbs) -> Sequence {
    let limits = SynthLimits {
        max_images: 2,
        max_vision_per_image: 4,
        max_turns: 2,
        max_question: 3,
        max_answer: 3,
        grounding_rate: 0.5,
    };
    loop {
        let layout = random_packed_layout(rng, vocab, &limits, len);
        if layout.len() == len && layout.is_vision().iter().any(|&v| v) && layout.loss_tokens() > 0 {
            let dec = sample_masking_decisions(&layout, rng.random(), probs);
            return Sequence::prepare(layout, &dec, kernel);
        }
    }
}

/// Gradient check of `cfg` on a 24-token mixed sequence. Adapter `B`
/// factors are randomized so the `A` gradients are non-trivial; on a router
/// tie the sequence is redrawn. Returns the attempt used and the report.
pub fn run_gradcheck(cfg: &ToyConfig, seed: u64, eps: f64, exec: Exec) -> Result<(u64, GradCheckReport)> {
    let mut last_err = None;
    for attempt in 0..16u64 {
        let mut rng = rng_for(seed ^ 0x9c, attempt);
        let seq = mixed_sequence(&mut rng, &cfg.vocab(), 24, cfg.conv_kernel, MaskingProbs::default());
        let mut model = ToyModel::<f64>::new(ToyConfig {
            seed: cfg.seed.wrapping_add(attempt),
            ..cfg.clone()
        })?;
        model.params.randomize_lora_b(0.3, rng.random());
        match grad_check(&model, std::slice::from_ref(&seq), eps, exec) {
            Ok(report) => return Ok((attempt, report)),
            Err(e @ Error::RouterTie { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap())
}

/// Analytic gradients against central differences at the reference size.
pub fn gradcheck(seed: u64, eps: f64, tolerance: f64, exec: Exec) -> CheckOutcome {
    match run_gradcheck(&gradcheck_config(seed), seed, eps, exec) {
        Ok((attempt, report)) => CheckOutcome::new(
            "gradcheck",
            report.groups.values().all(|g| g.max_rel_error < tolerance),
            json!({ "attempt": attempt, "tokens": 24, "eps": eps, "tolerance": tolerance, "tie_margin": TIE_MARGIN, "max_rel_error": report.max_rel_error(), "groups": report.groups }),
        ),
        Err(e) => CheckOutcome::failed("gradcheck", e),
    }
}

/// Zero-initialized adapters change nothing; after training, text-only
/// sequences still take the base pathway exactly.
pub fn lora_zero_init(opts: &VerifyOptions) -> CheckOutcome {
    let run = || -> Result<Value> {
        let cfg = ToyConfig {
            seed: opts.seed,
            ..opts.toy.clone()
        };
        let mut model = ToyModel::<f64>::new(cfg.clone())?;
        let vocab = cfg.vocab();
        let mut rng = rng_for(opts.seed ^ 0x10a, 0);
        let batch: Vec<Sequence> = (0..4).map(|_| mixed_sequence(&mut rng, &vocab, 40, cfg.conv_kernel, opts.probs)).collect();
        let base = model.with_params(model.params.without_lora());
        let mut init_equal = true;
        for s in &batch {
            init_equal &= model.forward(s)?.logits == base.forward(s)?.logits;
        }
        for _ in 0..10 {
            let (_, g) = model.batch_loss_and_grad(&batch, opts.exec)?;
            model.params.axpy(-0.5, &g);
        }
        let trained_base = model.with_params(model.params.without_lora());
        let text_only = SynthLimits {
            max_images: 0,
            ..SynthLimits::default()
        };
        let mut text_equal = true;
        for _ in 0..8 {
            let layout = random_packed_layout(&mut rng, &vocab, &text_only, 60);
            let dec = sample_masking_decisions(&layout, rng.random(), opts.probs);
            let s = Sequence::prepare(layout, &dec, cfg.conv_kernel);
            text_equal &= model.forward(&s)?.logits == trained_base.forward(&s)?.logits;
        }
        let vision_differs = model.forward(&batch[0])?.logits != trained_base.forward(&batch[0])?.logits;
        Ok(json!({
            "init_bitwise_equal": init_equal,
            "trained_steps": 10,
            "adapter_norm": model.params.lora_norm(),
            "text_only_bitwise_equal": text_equal,
            "vision_sequence_differs": vision_differs,
        }))
    };
    match run() {
        Ok(d) => {
            let ok = d["init_bitwise_equal"] == true && d["text_only_bitwise_equal"] == true && d["vision_sequence_differs"] == true;
            CheckOutcome::new("lora_zero_init", ok, d)
        }
        Err(e) => CheckOutcome::failed("lora_zero_init", e),
    }
}

/// Three microbatch partitions of one batch give the same normalized loss.
pub fn loss_partition(opts: &VerifyOptions) -> CheckOutcome {
    let run = || -> Result<Value> {
        let model = ToyModel::<f64>::new(ToyConfig {
            seed: opts.seed,
            ..opts.toy.clone()
        })?;
        let vocab = model.cfg.vocab();
        let mut rng = rng_for(opts.seed ^ 0x105, 0);
        let batch: Vec<Sequence> = (0..8)
            .map(|_| {
                let layout = random_packed_layout(&mut rng, &vocab, &SynthLimits::default(), 80);
                let dec = sample_masking_decisions(&layout, rng.random(), opts.probs);
                Sequence::prepare(layout, &dec, opts.toy.conv_kernel)
            })
            .collect();
        let parts: Vec<LossPart<f64>> = opts.exec.map(&batch, |s| model.sequence_loss(s)).into_iter().collect::<Result<_>>()?;
        let partitions: [Vec<Vec<usize>>; 3] = [
            vec![(0..8).collect()],
            vec![vec![6, 1, 3], vec![0], vec![7, 2, 5, 4]],
            (0..8).rev().map(|i| vec![i]).collect(),
        ];
        let losses = partitions
            .iter()
            .map(|p| {
                let micro: Vec<LossPart<f64>> = p.iter().map(|g| g.iter().map(|&i| parts[i]).reduce(LossPart::merge).unwrap()).collect();
                accumulate_normalized_loss(&micro)
            })
            .collect::<Result<Vec<f64>>>()?;
        let spread = losses.iter().copied().fold(f64::MIN, f64::max) - losses.iter().copied().fold(f64::MAX, f64::min);
        let tokens: usize = parts.iter().map(|p| p.count).sum();
        Ok(json!({ "losses": losses, "max_abs_diff": spread, "loss_tokens": tokens }))
    };
    match run() {
        Ok(d) => CheckOutcome::new("loss_partition", d["max_abs_diff"].as_f64().unwrap() < 1e-12, d),
        Err(e) => CheckOutcome::failed("loss_partition", e),
    }
}

/// Fewest bins by enumerating every set partition of the items.
fn exhaustive_min_bins(lens: &[usize], capacity: usize) -> usize {
    fn go(i: usize, lens: &[usize], cap: usize, loads: &mut Vec<usize>, best: &mut usize) {
        if i == lens.len() {
            *best = (*best).min(loads.len());
            return;
        }
        for b in 0..loads.len() {
            loads[b] += lens[i];
            if loads[b] <= cap {
                go(i + 1, lens, cap, loads, best);
            }
            loads[b] -= lens[i];
        }
        loads.push(lens[i]);
        go(i + 1, lens, cap, loads, best);
        loads.pop();
    }
    let mut best = usize::MAX;
    go(0, lens, capacity, &mut Vec::new(), &mut best);
    if lens.is_empty() {
        0
    } else {
        best
    }
}

/// FFD against the exhaustive optimum, plus report reproducibility.
pub fn packing(corpus: &[SequenceLayout], instances: usize, opts: &VerifyOptions) -> CheckOutcome {
    let cap = opts.capacity;
    let runs = opts.exec.map_range(instances, |i| -> Result<(bool, bool, usize, usize)> {
        let mut rng = rng_for(opts.seed ^ 0xffd, i as u64);
        let n = rng.random_range(1..=8);
        let lens: Vec<usize> = (0..n).map(|_| rng.random_range(1..=cap)).collect();
        let bins = first_fit_decreasing(&lens, cap)?;
        let within = bins.iter().all(|b| b.iter().map(|&j| lens[j]).sum::<usize>() <= cap);
        let mut seen: Vec<usize> = bins.iter().flatten().copied().collect();
        seen.sort_unstable();
        let complete = seen == (0..n).collect::<Vec<_>>();
        let opt = exhaustive_min_bins(&lens, cap);
        Ok((within && complete, bins.len() <= opt + 1, bins.len(), opt))
    });
    let mut over = 0;
    let mut worse = 0;
    let mut excess = 0;
    for r in runs {
        match r {
            Ok((fits, near, got, opt)) => {
                over += usize::from(!fits);
                worse += usize::from(!near);
                excess += got - opt;
            }
            Err(e) => return CheckOutcome::failed("packing", e),
        }
    }
    let report = |seed: u64| -> Result<String> {
        let mut rng = rng_for(seed, 0xbeef);
        let vocab = opts.toy.vocab();
        let mut layouts = corpus.to_vec();
        layouts.extend((0..64).map(|_| random_example_layout(&mut rng, &vocab, &SynthLimits::default())));
        let cap = layouts.iter().map(|l| l.len()).max().unwrap_or(1).max(cap.min(256));
        Ok(packing_report(&pack(&layouts, cap)?))
    };
    let reproducible = match (report(opts.seed), report(opts.seed)) {
        (Ok(a), Ok(b)) => a == b,
        (Err(e), _) | (_, Err(e)) => return CheckOutcome::failed("packing", e),
    };
    CheckOutcome::new(
        "packing",
        over == 0 && worse == 0 && reproducible,
        json!({ "instances": instances, "capacity": cap, "over_capacity": over, "worse_than_optimal_plus_one": worse, "total_extra_bins": excess, "report_reproducible": reproducible }),
    )
}

/// Empirical conversation-mask rates per document kind.
pub fn mask_calibration(turns_per_kind: usize, opts: &VerifyOptions) -> CheckOutcome {
    let vocab = opts.toy.vocab();
    let mut rows = Vec::new();
    let mut ok = true;
    for (grounding, p) in [(false, opts.probs.default), (true, opts.probs.grounding)] {
        let mut rng = rng_for(opts.seed ^ 0xca1, u64::from(grounding));
        let doc = |rng: &mut ChaCha8Rng| {
            let ex = MultimodalExample::random(rng, &vocab, 0, &[(0, 1); 11], grounding);
            render_chat_template(&ex, &[], &vocab).unwrap()
        };
        let layout = SequenceLayout::concat(&(0..100).map(|_| doc(&mut rng)).collect::<Vec<_>>());
        let per_draw = 100 * 10;
        let draws = turns_per_kind.div_ceil(per_draw);
        let masked: usize = opts
            .exec
            .map_range(draws, |i| {
                let dec = sample_masking_decisions(&layout, opts.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), opts.probs);
                dec.masked.values().filter(|&&m| m).count()
            })
            .into_iter()
            .sum();
        let total = draws * per_draw;
        let rate = masked as f64 / total as f64;
        ok &= (rate - p).abs() <= 0.01;
        rows.push(json!({ "grounding": grounding, "turns": total, "rate": rate, "target": p }));
    }
    CheckOutcome::new("mask_calibration", ok, json!({ "kinds": rows }))
}

fn random_label(rng: &mut ChaCha8Rng, markup_safe: bool) -> String {
    const XML_ALPHABET: &[char] = &['a', 'b', 'z', 'Q', ' ', '&', '<', '>', '"', '\'', '0', '-', '|', 'é'];
    let n = rng.random_range(0..8);
    let mut s: String = (0..n).map(|_| XML_ALPHABET[rng.random_range(0..XML_ALPHABET.len())]).collect();
    if markup_safe {
        while s.contains("<|") || s.contains("|>") {
            s = s.replace("<|", "<").replace("|>", ">");
        }
    }
    s
}

fn random_points(rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..rng.random_range(1..=6))
        .map(|_| Point {
            x: rng.random_range(0..=1000),
            y: rng.random_range(0..=1000),
        })
        .collect()
}

/// Render/parse round-trips, scale bijectivity and canonical forms.
pub fn grounding_roundtrip(cases: usize, seed: u64) -> CheckOutcome {
    let mut rng = rng_for(seed ^ 0x960, 0);
    let mut failures: Vec<String> = Vec::new();
    let mut note = |kind: &str, i: usize, ok: bool| {
        if !ok && failures.len() < 10 {
            failures.push(format!("{kind} case {i}"));
        }
        ok
    };
    let mut counts = [0usize; 3];
    for i in 0..cases {
        let xml = PointSet {
            points: random_points(&mut rng),
            scale: Scale::Percent100,
            label: Some(random_label(&mut rng, false)),
        };
        let ok = render_xml_points(&xml).and_then(|s| Ok((parse_xml_points(&s)?, s))).is_ok_and(|(p, s)| p == xml && render_xml_points(&p).is_ok_and(|t| t == s));
        counts[0] += usize::from(note("xml", i, ok));

        let label = rng.random_bool(0.5).then(|| random_label(&mut rng, true));
        let tokens = PointSet {
            points: random_points(&mut rng),
            scale: Scale::Permille1000,
            label,
        };
        let ok = render_point_tokens(&tokens).and_then(|s| Ok((parse_point_tokens(&s)?, s))).is_ok_and(|(p, s)| p == tokens && render_point_tokens(&p).is_ok_and(|t| t == s));
        counts[1] += usize::from(note("point_tokens", i, ok));

        let (a, b) = (rng.random_range(0..=1000u16), rng.random_range(0..=1000u16));
        let (c, d) = (rng.random_range(0..=1000u16), rng.random_range(0..=1000u16));
        let bx = BoundingBox {
            x1: a.min(b),
            x2: a.max(b),
            y1: c.min(d),
            y2: c.max(d),
            label: rng.random_bool(0.5).then(|| random_label(&mut rng, true)),
        };
        let ok = render_box(&bx).and_then(|s| Ok((parse_box(&s)?, s))).is_ok_and(|(p, s)| p == bx && render_box(&p).is_ok_and(|t| t == s));
        counts[2] += usize::from(note("box", i, ok));
    }

    let mut forward = BTreeSet::new();
    let mut bijective = true;
    for v in 0..=1000u16 {
        let pm = PointSet {
            points: vec![Point { x: v, y: 1000 - v }],
            scale: Scale::Permille1000,
            label: None,
        };
        let pct = convert_scale(&pm);
        let back = convert_scale(&pct);
        bijective &= back == pm && pct.scale == Scale::Percent100 && (Scale::Percent100.value(pct.points[0].x) * 10.0 - f64::from(v)).abs() < 1e-9;
        forward.insert(render_xml_points(&PointSet { label: Some(String::new()), ..pct }).unwrap_or_default());
    }
    bijective &= forward.len() == 1001;

    let canonical = [
        (
            r#"<points x1="10.5" y1="20.0" alt="cat">cat</points>"#,
            parse_xml_points(r#"<points x1="10.5" y1="20.0" alt="cat">cat</points>"#).and_then(|p| render_xml_points(&p)),
        ),
        (
            "<|point_start|>(105, 200)<|point_end|>",
            render_point_tokens(&PointSet {
                points: vec![Point { x: 105, y: 200 }],
                scale: Scale::Permille1000,
                label: None,
            }),
        ),
        (
            "<|box_start|>[100, 200, 300, 400]<|box_end|>",
            parse_box("<|box_start|>[100, 200, 300, 400]<|box_end|>").and_then(|b| render_box(&b)),
        ),
    ];
    let canonical_ok = canonical.iter().all(|(want, got)| got.as_deref().is_ok_and(|g| g == *want));
    let shift_ok = PointSet::from_percent(&[(10.5, 20.0)], None).is_ok_and(|p| convert_scale(&p).points == vec![Point { x: 105, y: 200 }]);
    let ok = counts.iter().all(|&c| c == cases) && bijective && canonical_ok && shift_ok;
    CheckOutcome::new(
        "grounding_roundtrip",
        ok,
        json!({
            "cases_per_format": cases,
            "xml_ok": counts[0],
            "point_tokens_ok": counts[1],
            "box_ok": counts[2],
            "scale_bijective_over": 1001,
            "scale_bijective": bijective,
            "canonical_forms": canonical_ok && shift_ok,
            "failures": failures,
        }),
    )
}

/// Greedy incremental decode against a full forward of the extended sequence.
pub fn decode_consistency(instances: usize, steps: usize, opts: &VerifyOptions) -> CheckOutcome {
    let vocab = opts.toy.vocab();
    let runs = opts.exec.map_range(instances, |idx| -> Result<f64> {
        let mut rng = rng_for(opts.seed ^ 0xdec, idx as u64);
        let mut model = ToyModel::<f64>::new(ToyConfig {
            seed: rng.random(),
            ..opts.toy.clone()
        })?;
        model.params.randomize_lora_b(0.3, rng.random());
        let prefill = random_example_layout(&mut rng, &vocab, &SynthLimits::default());
        let no_mask = MaskDecisions::uniform(&prefill, false);
        let seq = Sequence::prepare(prefill.clone(), &no_mask, model.cfg.conv_kernel);
        let (out, mut state) = model.prefill(&seq)?;
        let mut last = out.logits.row(prefill.len() - 1).to_vec();
        let mut generated = Vec::with_capacity(steps);
        let mut step_logits = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = (0..vocab.text_size).max_by(|&a, &b| last[a as usize].total_cmp(&last[b as usize])).unwrap();
            generated.push(next);
            last = model.decode_step(&mut state, next)?;
            step_logits.push(last.clone());
        }
        let full_layout = prefill.with_generated(&generated);
        let full = Sequence::prepare(full_layout.clone(), &MaskDecisions::uniform(&full_layout, false), model.cfg.conv_kernel);
        let logits = model.forward(&full)?.logits;
        let mut max_diff: f64 = 0.0;
        for (t, row) in step_logits.iter().enumerate() {
            for (a, b) in row.iter().zip(logits.row(prefill.len() + t)) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        Ok(max_diff)
    });
    let mut max_diff: f64 = 0.0;
    for r in runs {
        match r {
            Ok(d) => max_diff = max_diff.max(d),
            Err(e) => return CheckOutcome::failed("decode_consistency", e),
        }
    }
    CheckOutcome::new(
        "decode_consistency",
        max_diff <= 1e-10,
        json!({ "instances": instances, "steps": steps, "max_abs_diff": max_diff, "tolerance": 1e-10 }),
    )
}

/// Uniform routers reach maximal entropy per modality; dual routers keep
/// the two modalities' traces independent.
pub fn router_entropy(opts: &VerifyOptions) -> CheckOutcome {
    let run = || -> Result<Value> {
        let vocab = opts.toy.vocab();
        let mut rng = rng_for(opts.seed ^ 0xe17, 0);
        let seq = mixed_sequence(&mut rng, &vocab, 48, opts.toy.conv_kernel, opts.probs);
        let ln_e = (opts.toy.n_experts as f64).ln();
        let mut worst: f64 = 0.0;
        for dual in [false, true] {
            let mut model = ToyModel::<f64>::new(ToyConfig {
                dual_router: dual,
                seed: opts.seed,
                ..opts.toy.clone()
            })?;
            for l in &mut model.params.layers {
                l.router.data.iter_mut().for_each(|v| *v = 0.0);
                if let Some(r) = &mut l.router_vision {
                    r.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let out = model.forward(&seq)?;
            for t in &out.traces {
                let s = t.summary(opts.toy.n_experts);
                worst = worst.max((s.text.mean_entropy - ln_e).abs()).max((s.vision.mean_entropy - ln_e).abs());
            }
        }
        let model = ToyModel::<f64>::new(ToyConfig {
            dual_router: true,
            seed: opts.seed,
            ..opts.toy.clone()
        })?;
        let base = model.forward(&seq)?;
        let mut p = model.params.clone();
        let rv = p.layers[0].router_vision.as_mut().expect("dual router");
        *rv = Mat::randn(rv.rows, rv.cols, 1.0, &mut rng);
        let pert = model.with_params(p).forward(&seq)?;
        let (mut text_same, mut vision_moved) = (true, false);
        for (a, b) in base.traces[0].tokens.iter().zip(&pert.traces[0].tokens) {
            if a.vision {
                vision_moved |= a.logits != b.logits;
            } else {
                text_same &= a == b;
            }
        }
        Ok(json!({ "ln_experts": ln_e, "max_entropy_error": worst, "dual_text_trace_unchanged": text_same, "dual_vision_trace_moved": vision_moved }))
    };
    match run() {
        Ok(d) => {
            let ok = d["max_entropy_error"].as_f64().unwrap() <= 1e-12 && d["dual_text_trace_unchanged"] == true && d["dual_vision_trace_moved"] == true;
            CheckOutcome::new("router_entropy", ok, d)
        }
        Err(e) => CheckOutcome::failed("router_entropy", e),
    }
}

/// Every check at full size, in a fixed order.
pub fn run_suite(corpus: &[MultimodalExample], opts: &VerifyOptions) -> Result<Vec<CheckOutcome>> {
    opts.toy.validate()?;
    if opts.kernel == 0 {
        return Err(Error::Config("kernel must be at least 1".into()));
    }
    let layouts = render_examples(corpus, &opts.toy.vocab(), ResolutionCap::mp(0.8))?;
    Ok(vec![
        mask_oracle(&layouts, 1000, 512, opts),
        token_anchors(),
        document_isolation(&layouts, 100, opts),
        conversation_leakage(100, opts),
        gradcheck(opts.seed, 1e-5, 1e-5, opts.exec),
        lora_zero_init(opts),
        loss_partition(opts),
        packing(&layouts, 200, opts),
        mask_calibration(100_000, opts),
        grounding_roundtrip(1000, opts.seed),
        decode_consistency(20, 8, opts),
        router_entropy(opts),
    ])
}
