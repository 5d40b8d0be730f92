//! Acceptance gate. Ten criteria, run in order, one PASS/FAIL line each;
//! the test fails if any criterion fails. Headline numbers from large
//! models are out of reach at this scale, so the gate checks exact
//! contracts (gradients, identities, oracles, determinism) plus trend
//! reproduction on synthetic corpora.
//!
//! Run with: cargo test --test acceptance -- --nocapture

use adapterlab::adapters::{fuse, lora_forward, merge_into_base, AdapterSpec, HloraBlock, LoraBlock};
use adapterlab::corpus::{build_preference_pairs, ControlAttribute, MacsumRecord, PromptStyle};
use adapterlab::judge::{judge, JudgeError, JudgeRequest, MockTransport};
use adapterlab::metrics::{
    coverage, density, extract_fragments, overlap_precision, rouge, Fragment, TokenizedText,
};
use adapterlab::model::{encode_prompt, encode_response, ModelConfig, TinyLm};
use adapterlab::objectives::{dpo_loss, sft_loss, AdamState, DpoExample, SftExample};
use adapterlab::report::read_metrics_csv;
use adapterlab::tensor::{finite_diff_check, random_param, Prng, Tape, Tensor};
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

#[test]
fn acceptance() {
    let criteria: &[(&str, fn())] = &[
        ("1 gradient correctness (autograd ops + SFT/DPO losses, 20 seeds)", c1_gradients),
        ("2 adapter zero-init leaves logits bit-identical", c2_zero_init),
        ("3 merge/fusion equivalence + weights (1,0) identity", c3_merge_fusion),
        ("4 hierarchical adapter contract", c4_hlora),
        ("5 preference-loss identities", c5_dpo),
        ("6 metric oracles", c6_metrics),
        ("7 trend reproduction on synthetic corpora", c7_trends),
        ("8 preference pair construction", c8_pairs),
        ("9 judge client against the mock", c9_judge),
        ("10 manifest determinism", c10_determinism),
    ];
    let quiet_hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failures = Vec::new();
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run);
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(()) => println!("PASS  {name}  ({secs:.1}s)"),
            Err(payload) => {
                let what = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL  {name}  ({secs:.1}s)\n      {what}");
                failures.push(*name);
            }
        }
    }
    std::panic::set_hook(quiet_hook);
    assert!(failures.is_empty(), "failed criteria: {failures:#?}");
}

fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { dim: 16, n_layers: 1, n_heads: 2, context_len: 64, seed, ..ModelConfig::default() }
}

/// Random lowercase text for prompt/response fodder.
fn random_text(prng: &mut Prng, len: usize) -> String {
    (0..len).map(|_| (b'a' + prng.gen_range(6) as u8) as char).collect()
}

fn warm_block(n: usize, m: usize, rank: usize, alpha: f64, prng: &mut Prng) -> LoraBlock {
    let a = Tensor::gaussian(rank, m, 0.1, prng);
    let b = Tensor::gaussian(n, rank, 0.1, prng);
    LoraBlock::from_parts(a, b, alpha, false).expect("shapes agree")
}

fn attach_warm(model: &mut TinyLm, point: &str, rank: usize, prng: &mut Prng) {
    let (n, m) = {
        let layer = model.point(point).expect("point exists");
        (layer.w.rows(), layer.w.cols())
    };
    let block = warm_block(n, m, rank, 2.0, prng);
    model.attach(point, AdapterSpec::Lora(block)).expect("attach");
}

fn logits_bits(model: &TinyLm, ids: &[usize]) -> Vec<u64> {
    let tape = Tape::disabled();
    let logits = model.forward(&tape, ids).expect("forward");
    logits.to_vec().iter().map(|v| v.to_bits()).collect()
}

// 1. Finite differences against every op and the full losses: h=1e-5,
// max relative error < 1e-4, 20 seeds each, under 30 seconds.
fn c1_gradients() {
    let start = Instant::now();
    let step = 1e-5;
    let tol = 1e-4;

    type OpCase = (&'static str, fn(&mut Prng) -> (Box<dyn Fn(&Tape) -> Result<Tensor, adapterlab::tensor::TensorError>>, Vec<Tensor>));
    // Every op reduces to a scalar through a fixed random weighting so all
    // entries influence the loss.
    fn weigh(prng: &mut Prng, rows: usize, cols: usize) -> Tensor {
        let t = random_param(rows, cols, prng);
        t.set_requires_grad(false);
        t
    }
    // Keeps elementwise inputs away from the relu kink so the central
    // difference stays two-sided.
    fn away_from_zero(t: &Tensor) {
        t.update_data(|d| {
            for v in d.iter_mut() {
                *v += if *v >= 0.0 { 0.25 } else { -0.25 };
            }
        });
    }

    let cases: Vec<OpCase> = vec![
        ("matmul", |prng| {
            let a = random_param(3, 4, prng);
            let b = random_param(4, 2, prng);
            let c = weigh(prng, 3, 2);
            let (fa, fb, fc) = (a.clone(), b.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.matmul(&fa, &fb)?, &fc)?)), vec![a, b])
        }),
        ("add", |prng| {
            let a = random_param(3, 3, prng);
            let b = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fb, fc) = (a.clone(), b.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.add(&fa, &fb)?, &fc)?)), vec![a, b])
        }),
        ("sub", |prng| {
            let a = random_param(3, 3, prng);
            let b = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fb, fc) = (a.clone(), b.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.sub(&fa, &fb)?, &fc)?)), vec![a, b])
        }),
        ("mul", |prng| {
            let a = random_param(3, 3, prng);
            let b = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fb, fc) = (a.clone(), b.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.mul(&fa, &fb)?, &fc)?)), vec![a, b])
        }),
        ("scale", |prng| {
            let a = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.scale(&fa, -1.7)?, &fc)?)), vec![a])
        }),
        ("sigmoid", |prng| {
            let a = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.sigmoid(&fa)?, &fc)?)), vec![a])
        }),
        ("relu", |prng| {
            let a = random_param(3, 3, prng);
            away_from_zero(&a);
            let c = weigh(prng, 3, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.relu(&fa)?, &fc)?)), vec![a])
        }),
        ("neg_log_sigmoid", |prng| {
            let a = random_param(3, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.neg_log_sigmoid(&fa)?, &fc)?)), vec![a])
        }),
        ("sum", |prng| {
            let a = random_param(4, 3, prng);
            let fa = a.clone();
            (Box::new(move |t: &Tape| t.sum(&fa)), vec![a])
        }),
        ("transpose", |prng| {
            let a = random_param(3, 4, prng);
            let c = weigh(prng, 4, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.transpose(&fa)?, &fc)?)), vec![a])
        }),
        ("log_softmax_rows", |prng| {
            let a = random_param(4, 5, prng);
            let c = weigh(prng, 4, 5);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.log_softmax_rows(&fa)?, &fc)?)), vec![a])
        }),
        ("causal_softmax_rows", |prng| {
            let a = random_param(4, 4, prng);
            let c = weigh(prng, 4, 4);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.causal_softmax_rows(&fa)?, &fc)?)), vec![a])
        }),
        ("rms_norm_cols", |prng| {
            let a = random_param(5, 3, prng);
            let c = weigh(prng, 5, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.rms_norm_cols(&fa, 1e-6)?, &fc)?)), vec![a])
        }),
        ("gather_nll", |prng| {
            let a = random_param(4, 6, prng);
            let fa = a.clone();
            (
                Box::new(move |t: &Tape| {
                    let logp = t.log_softmax_rows(&fa)?;
                    t.gather_nll(&logp, &[1, 3, 0, 5], &[true, false, true, true])
                }),
                vec![a],
            )
        }),
        ("gather_cols", |prng| {
            let a = random_param(5, 7, prng);
            let c = weigh(prng, 5, 4);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.gather_cols(&fa, &[2, 0, 6, 6])?, &fc)?)), vec![a])
        }),
        ("slice_rows", |prng| {
            let a = random_param(6, 3, prng);
            let c = weigh(prng, 3, 3);
            let (fa, fc) = (a.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.slice_rows(&fa, 1, 3)?, &fc)?)), vec![a])
        }),
        ("concat_rows", |prng| {
            let a = random_param(2, 3, prng);
            let b = random_param(3, 3, prng);
            let c = weigh(prng, 5, 3);
            let (fa, fb, fc) = (a.clone(), b.clone(), c.clone());
            (Box::new(move |t: &Tape| t.sum(&t.mul(&t.concat_rows(&[&fa, &fb])?, &fc)?)), vec![a, b])
        }),
    ];

    for (name, build) in &cases {
        for seed in 0..20u64 {
            let mut prng = Prng::new(9_000 + seed);
            let (f, params) = build(&mut prng);
            let report = finite_diff_check(|t| f(t), &params, step, tol).expect("check runs");
            assert!(
                report.passed(),
                "op {name} seed {seed}: max rel err {} over {} elements",
                report.max_rel_err,
                report.checked
            );
        }
    }

    for seed in 0..20u64 {
        let mut prng = Prng::new(70_000 + seed);
        let mut model = TinyLm::new(tiny_config(seed)).expect("model");
        attach_warm(&mut model, "layer0.attn.q", 2, &mut prng);
        attach_warm(&mut model, "layer0.attn.v", 2, &mut prng);
        let batch: Vec<SftExample> = (0..2)
            .map(|_| SftExample {
                prompt: encode_prompt(&random_text(&mut prng, 4)),
                response: encode_response(&random_text(&mut prng, 5)),
            })
            .collect();
        let params = model.trainable_params();
        let report =
            finite_diff_check(|t| sft_loss(t, &model, &batch), &params, step, tol).expect("fd");
        assert!(report.passed(), "sft seed {seed}: max rel err {}", report.max_rel_err);

        let reference = model.clone_base();
        let pairs: Vec<DpoExample> = (0..2)
            .map(|_| DpoExample {
                prompt: encode_prompt(&random_text(&mut prng, 4)),
                chosen: encode_response(&random_text(&mut prng, 5)),
                rejected: encode_response(&random_text(&mut prng, 3)),
            })
            .collect();
        let report = finite_diff_check(
            |t| dpo_loss(t, &model, &reference, &pairs, 0.2).map(|o| o.loss),
            &params,
            step,
            tol,
        )
        .expect("fd");
        assert!(report.passed(), "dpo seed {seed}: max rel err {}", report.max_rel_err);
    }

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "gradient checks took {elapsed:.1}s, budget is 30s");
}

// 2. Fresh adapters and zero-weight fusion terms change nothing, exactly.
fn c2_zero_init() {
    let start = Instant::now();
    let mut prng = Prng::new(42);
    let config = ModelConfig { dim: 32, n_layers: 2, n_heads: 2, context_len: 64, seed: 3, ..ModelConfig::default() };
    let mut model = TinyLm::new(config).expect("model");
    let ids = encode_prompt("aa bb cc dd");

    let clean = logits_bits(&model, &ids);

    for point in model.attachment_points() {
        let (n, m) = {
            let layer = model.point(&point).expect("point");
            (layer.w.rows(), layer.w.cols())
        };
        let block = LoraBlock::init(n, m, 4, 16.0, &mut prng).expect("init");
        model.attach(&point, AdapterSpec::Lora(block)).expect("attach");
    }
    assert_eq!(clean, logits_bits(&model, &ids), "fresh low-rank blocks must be inert");
    model.detach_all();

    // A grown second stage starts at zero: the hierarchical forward must
    // reproduce the plain block's logits bit for bit.
    let warm = warm_block(32, 32, 4, 8.0, &mut prng);
    model.attach("layer0.attn.q", AdapterSpec::Lora(warm.deep_clone())).expect("attach");
    let with_lora = logits_bits(&model, &ids);
    model.detach_all();
    let grown = HloraBlock::grow(warm, 2, 4.0, &mut prng).expect("grow");
    model.attach("layer0.attn.q", AdapterSpec::Hlora(grown)).expect("attach");
    assert_eq!(with_lora, logits_bits(&model, &ids), "zero-init second stage must be inert");
    model.detach_all();

    // Fusing in a second adapter at weight zero adds nothing.
    let a = warm_block(32, 32, 4, 8.0, &mut prng);
    let b = warm_block(32, 32, 3, 6.0, &mut prng);
    let lone = fuse(&[(&a, 0.7)]).expect("fuse");
    model.attach("layer0.attn.q", AdapterSpec::Delta(lone)).expect("attach");
    let lone_bits = logits_bits(&model, &ids);
    model.detach_all();
    let padded = fuse(&[(&a, 0.7), (&b, 0.0)]).expect("fuse");
    model.attach("layer0.attn.q", AdapterSpec::Delta(padded)).expect("attach");
    assert_eq!(lone_bits, logits_bits(&model, &ids), "zero-weight fusion term must be inert");

    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "zero-init checks took {elapsed:.1}s, budget is 5s");
}

// 3. Merged weights equal the runtime adapter path everywhere, and the
// command pipeline reproduces a lone adapter through weights (1,0).
fn c3_merge_fusion() {
    let mut prng = Prng::new(300);
    let off = Tape::disabled();
    for case in 0..100 {
        let n = 8 + prng.gen_range(57);
        let m = 8 + prng.gen_range(57);
        let rank = 1 + prng.gen_range(8);
        let k = 1 + prng.gen_range(4);
        let w = Tensor::gaussian(n, m, 0.5, &mut prng);
        let block = warm_block(n, m, rank, 1.0 + prng.next_f64() * 3.0, &mut prng);
        let x = Tensor::gaussian(m, k, 1.0, &mut prng);

        let merged = merge_into_base(&w, &block).expect("merge");
        let direct = off.matmul(&merged, &x).expect("matmul");
        let routed = lora_forward(&off, &block, &w, &x).expect("lora forward");
        let d = direct.to_vec();
        let r = routed.to_vec();
        let max_diff = d
            .iter()
            .zip(&r)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-10, "case {case} ({n}x{m} rank {rank}): diff {max_diff}");
    }

    // End-to-end: fuse with weights (1,0), then evaluate; the report must
    // match the first adapter's, metric for metric.
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();
    run_ok(root, &["synth", "--task", "length_control", "--n", "12", "--seed", "5", "--out", "corpus.jsonl"]);
    std::fs::write(root.join("a.toml"), pipe_config("fid-a", 3)).expect("write");
    std::fs::write(root.join("b.toml"), pipe_config("fid-b", 4)).expect("write");
    run_ok(root, &["train", "--config", "a.toml"]);
    run_ok(root, &["train", "--config", "b.toml"]);
    run_ok(root, &["fuse", "--adapters", "fid-a.adapter.adapter,fid-b.adapter.adapter", "--weights", "1.0,0.0", "--out", "fused.adapter"]);
    run_ok(root, &["eval", "--config", "a.toml", "--adapter", "fid-a.adapter.adapter", "--data", "corpus.jsonl", "--out", "solo.csv", "--format", "csv"]);
    run_ok(root, &["eval", "--config", "a.toml", "--adapter", "fused.adapter", "--data", "corpus.jsonl", "--out", "fused.csv", "--format", "csv"]);
    let solo = std::fs::read(root.join("solo.csv")).expect("read");
    let fused = std::fs::read(root.join("fused.csv")).expect("read");
    assert_eq!(solo, fused, "weights (1,0) fusion must be metric-identical to adapter 1");
}

// 4. Second stage: lower rank enforced, starts where stage one stopped,
// never touches stage-one bytes, and the default scales are both 0.5.
fn c4_hlora() {
    let mut prng = Prng::new(400);

    let base = LoraBlock::init(16, 16, 4, 8.0, &mut prng).expect("init");
    assert!(HloraBlock::grow(base, 4, 4.0, &mut prng).is_err(), "rank2 must be < rank1");

    let defaults = LoraBlock::init(64, 64, 32, 16.0, &mut prng).expect("init");
    assert_eq!(defaults.scaling(), 0.5);
    let grown = HloraBlock::grow(defaults, 16, 8.0, &mut prng).expect("grow");
    assert_eq!(grown.scaling2(), 0.5);

    let mut model = TinyLm::new(tiny_config(9)).expect("model");
    let warm = warm_block(16, 16, 4, 8.0, &mut prng);
    let frozen_a: Vec<u64> = warm.a.to_vec().iter().map(|v| v.to_bits()).collect();
    let frozen_b: Vec<u64> = warm.b.to_vec().iter().map(|v| v.to_bits()).collect();
    let batch: Vec<SftExample> = (0..2)
        .map(|i| SftExample {
            prompt: encode_prompt(if i == 0 { "abc" } else { "de" }),
            response: encode_response(if i == 0 { "fgh" } else { "ij" }),
        })
        .collect();

    model.attach("layer0.attn.q", AdapterSpec::Lora(warm.deep_clone())).expect("attach");
    let stage1_loss = sft_loss(&Tape::disabled(), &model, &batch).expect("loss").item().expect("scalar");
    model.detach_all();

    let grown = HloraBlock::grow(warm, 2, 1.0, &mut prng).expect("grow");
    model.attach("layer0.attn.q", AdapterSpec::Hlora(grown)).expect("attach");
    let step0_loss = sft_loss(&Tape::disabled(), &model, &batch).expect("loss").item().expect("scalar");
    assert!(
        (stage1_loss - step0_loss).abs() <= 1e-12,
        "step-0 loss {step0_loss} vs frozen stage-1 loss {stage1_loss}"
    );

    let params = model.trainable_params();
    assert!(!params.is_empty(), "second stage must be trainable");
    let mut adam = AdamState::new(&params);
    for _ in 0..100 {
        let tape = Tape::new();
        let loss = sft_loss(&tape, &model, &batch).expect("loss");
        tape.backward(&loss).expect("backward");
        adam.step(&params, 1e-3).expect("step");
    }
    let spec = model.detach("layer0.attn.q").expect("detach");
    let AdapterSpec::Hlora(block) = spec else { panic!("hierarchical spec came back") };
    let after_a: Vec<u64> = block.base.a.to_vec().iter().map(|v| v.to_bits()).collect();
    let after_b: Vec<u64> = block.base.b.to_vec().iter().map(|v| v.to_bits()).collect();
    assert_eq!(frozen_a, after_a, "stage-1 A bytes changed during stage 2");
    assert_eq!(frozen_b, after_b, "stage-1 B bytes changed during stage 2");
}

// 5. Preference loss: ln 2 at policy == reference on any batch; one
// optimizer step raises the margin on a fixed batch.
fn c5_dpo() {
    let ln2 = std::f64::consts::LN_2;
    for seed in 0..3u64 {
        let mut prng = Prng::new(500 + seed);
        let model = TinyLm::new(tiny_config(seed)).expect("model");
        let reference = model.clone_base();
        let batch: Vec<DpoExample> = (0..3)
            .map(|_| DpoExample {
                prompt: encode_prompt(&random_text(&mut prng, 4)),
                chosen: encode_response(&random_text(&mut prng, 6)),
                rejected: encode_response(&random_text(&mut prng, 4)),
            })
            .collect();
        let out = dpo_loss(&Tape::disabled(), &model, &reference, &batch, 0.1).expect("loss");
        let loss = out.loss.item().expect("scalar");
        assert!((loss - ln2).abs() < 1e-9, "seed {seed}: loss {loss} vs ln2 {ln2}");
        assert!(out.margins.iter().all(|&m| m == 0.0), "margins must vanish at policy == reference");
    }

    let mut prng = Prng::new(501);
    let mut model = TinyLm::new(tiny_config(77)).expect("model");
    attach_warm(&mut model, "layer0.attn.q", 2, &mut prng);
    let reference = model.clone_base();
    let batch = vec![
        DpoExample {
            prompt: encode_prompt("sum"),
            chosen: encode_response("good one"),
            rejected: encode_response("bad"),
        },
        DpoExample {
            prompt: encode_prompt("art"),
            chosen: encode_response("fine"),
            rejected: encode_response("poor"),
        },
    ];
    let before = dpo_loss(&Tape::disabled(), &model, &reference, &batch, 0.5)
        .expect("loss")
        .mean_margin();
    let params = model.trainable_params();
    let mut adam = AdamState::new(&params);
    let tape = Tape::new();
    let out = dpo_loss(&tape, &model, &reference, &batch, 0.5).expect("loss");
    tape.backward(&out.loss).expect("backward");
    adam.step(&params, 1e-2).expect("step");
    let after = dpo_loss(&Tape::disabled(), &model, &reference, &batch, 0.5)
        .expect("loss")
        .mean_margin();
    assert!(after > before, "margin must rise after one step: {before} -> {after}");
}

fn oracle_fragments(article: &[String], summary: &[String]) -> Vec<Fragment> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < summary.len() {
        let mut found = None;
        'search: for len in (1..=summary.len() - i).rev() {
            if len > article.len() {
                continue;
            }
            for j in 0..=article.len() - len {
                if summary[i..i + len] == article[j..j + len] {
                    found = Some(Fragment { summary_start: i, article_start: j, len });
                    break 'search;
                }
            }
        }
        match found {
            Some(f) => {
                i += f.len;
                out.push(f);
            }
            None => i += 1,
        }
    }
    out
}

fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            table[i][j] = if a[i - 1] == b[j - 1] {
                table[i - 1][j - 1] + 1
            } else {
                table[i - 1][j].max(table[i][j - 1])
            };
        }
    }
    table[a.len()][b.len()]
}

fn words(text: &str) -> TokenizedText {
    TokenizedText { tokens: text.split_whitespace().map(str::to_string).collect() }
}

// 6. Greedy fragments vs brute force, LCS vs the full table, and the
// worked examples to 1e-12.
fn c6_metrics() {
    let mut prng = Prng::new(600);
    let vocab = ["a", "b", "c", "d"];
    for trial in 0..1000 {
        let a_len = 1 + prng.gen_range(12);
        let s_len = 1 + prng.gen_range(8);
        let article: Vec<String> =
            (0..a_len).map(|_| vocab[prng.gen_range(vocab.len())].to_string()).collect();
        let summary: Vec<String> =
            (0..s_len).map(|_| vocab[prng.gen_range(vocab.len())].to_string()).collect();
        let fast = extract_fragments(
            &TokenizedText { tokens: article.clone() },
            &TokenizedText { tokens: summary.clone() },
        );
        assert_eq!(fast.fragments, oracle_fragments(&article, &summary), "trial {trial}");
    }

    for trial in 0..500 {
        let ref_len = 1 + prng.gen_range(12);
        let hyp_len = prng.gen_range(12);
        let reference: Vec<String> =
            (0..ref_len).map(|_| vocab[prng.gen_range(vocab.len())].to_string()).collect();
        let hypothesis: Vec<String> =
            (0..hyp_len).map(|_| vocab[prng.gen_range(vocab.len())].to_string()).collect();
        let lcs = lcs_table(&reference, &hypothesis) as f64;
        let expected = if hypothesis.is_empty() {
            0.0
        } else {
            let p = lcs / hypothesis.len() as f64;
            let r = lcs / reference.len() as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        let got = rouge(
            &TokenizedText { tokens: reference.clone() },
            &TokenizedText { tokens: hypothesis.clone() },
        )
        .expect("rouge")
        .rouge_l;
        assert_eq!(got, expected, "trial {trial}: {reference:?} / {hypothesis:?}");
    }

    let article = words("a b c d e");
    let summary = words("a b c x d e");
    let set = extract_fragments(&article, &summary);
    let cov = coverage(&set, &summary).expect("coverage");
    let den = density(&set, &summary).expect("density");
    assert!((cov - 5.0 / 6.0).abs() < 1e-12, "coverage {cov}");
    assert!((den - 13.0 / 6.0).abs() < 1e-12, "density {den}");

    let overlap = overlap_precision(&words("a b c d"), &words("a b c x")).expect("overlap");
    assert!((overlap - 7.0 / 12.0).abs() < 1e-12, "overlap {overlap}");

    let scores = rouge(&words("the cat sat"), &words("the cat")).expect("rouge");
    assert!((scores.rouge1 - 0.8).abs() < 1e-12, "rouge1 {}", scores.rouge1);
}

const TREND_LEN_CONFIG: &str = r#"
id = "trend-len"
seed = 11

[model]
dim = 32
n_layers = 2
n_heads = 4
context_len = 256

[adapter]
rank = 16
alpha = 16.0
rank2 = 8
alpha2 = 8.0
attach = ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2", "lm_head"]

[training]
regime = "joint"
batch_size = 6

[[training.stages]]
data = "corpus.jsonl"
steps = 700
lr = 5e-3

[eval]
max_new_tokens = 120
"#;

// 7. The qualitative findings hold on synthetic corpora: instructed
// length orders the generated lengths, and copy instructions order the
// extractive density. Trends, not exact values.
fn c7_trends() {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();

    run_ok(root, &["synth", "--task", "length_control", "--n", "12", "--seed", "11", "--out", "corpus.jsonl"]);
    std::fs::write(root.join("len.toml"), TREND_LEN_CONFIG).expect("write");
    let start = Instant::now();
    run_ok(root, &["train", "--config", "len.toml"]);
    let train_secs = start.elapsed().as_secs_f64();
    assert!(train_secs < 300.0, "length training took {train_secs:.0}s, budget is 300s");
    run_ok(root, &["eval", "--config", "len.toml", "--adapter", "trend-len.adapter.adapter", "--data", "corpus.jsonl", "--out", "len.csv", "--format", "csv"]);

    let reports = read_metrics_csv(&root.join("len.csv")).expect("csv");
    let mean = |bucket: &str| {
        reports
            .iter()
            .find(|r| r.bucket == bucket)
            .unwrap_or_else(|| panic!("bucket {bucket} missing"))
            .mean_length
    };
    let (short, normal, long) = (mean("short"), mean("normal"), mean("long"));
    assert!(
        short < normal && normal < long,
        "lengths must order: short {short} normal {normal} long {long}"
    );
    assert!(normal - short >= 2.0, "short/normal gap {:.2} < 2 tokens", normal - short);
    assert!(long - normal >= 2.0, "normal/long gap {:.2} < 2 tokens", long - normal);

    run_ok(root, &["synth", "--task", "copy_control", "--n", "8", "--seed", "11", "--out", "copy.jsonl"]);
    let copy_config = TREND_LEN_CONFIG
        .replace("id = \"trend-len\"", "id = \"trend-copy\"")
        .replace("data = \"corpus.jsonl\"", "data = \"copy.jsonl\"")
        .replace("steps = 700", "steps = 500");
    std::fs::write(root.join("copy.toml"), copy_config).expect("write");
    run_ok(root, &["train", "--config", "copy.toml"]);
    run_ok(root, &["eval", "--config", "copy.toml", "--adapter", "trend-copy.adapter.adapter", "--data", "copy.jsonl", "--out", "copy.csv", "--format", "csv"]);

    let reports = read_metrics_csv(&root.join("copy.csv")).expect("csv");
    let dens = |bucket: &str| {
        reports
            .iter()
            .find(|r| r.bucket == bucket)
            .unwrap_or_else(|| panic!("bucket {bucket} missing"))
            .density
            .unwrap_or_else(|| panic!("density undefined for {bucket}"))
    };
    let (full, normal) = (dens("full"), dens("normal"));
    assert!(full > normal, "density must order: full {full} vs normal {normal}");
}

fn control_record(id: &str, kind: &str, value: &str, source: &str, summary: &str) -> MacsumRecord {
    MacsumRecord {
        id: id.into(),
        source: source.into(),
        attributes: vec![ControlAttribute::parse(kind, value).expect("valid attribute")],
        summary: summary.into(),
    }
}

// 8. Group construction counts and the instruction template, byte for
// byte.
fn c8_pairs() {
    let source = "The council met on Tuesday to vote on the bridge budget.";
    let records = vec![
        control_record("r1", "length", "short", source, "Council voted."),
        control_record("r2", "length", "normal", source, "The council voted on the budget."),
        control_record(
            "r3",
            "length",
            "long",
            source,
            "The council met on Tuesday and voted on the bridge budget.",
        ),
    ];
    let build = build_preference_pairs(&records, PromptStyle::Instruct).expect("pairs");
    assert_eq!(build.pairs.len(), 6, "3 values -> 6 ordered pairs");

    let rain = "Rain fell for nine days in the delta.";
    let spec_records = vec![
        control_record("s1", "specificity", "normal", rain, "It rained a lot."),
        control_record("s2", "specificity", "high", rain, "Rain fell for nine days."),
    ];
    let build2 = build_preference_pairs(&spec_records, PromptStyle::Instruct).expect("pairs");
    assert_eq!(build2.pairs.len(), 2, "2 values -> 2 ordered pairs");

    let short_pair = build
        .pairs
        .iter()
        .find(|p| p.instructed == "short")
        .expect("a short-instructed pair exists");
    let expected = "You are an honest and to the point assistant, please follow the instruction \
        and answer to the point. Please do not provide any irrelevant information or add any \
        extra words than that is necessary to answer the question. Write a summary of the source \
        text. The summary should be short in length. The length is defined in terms of number of \
        words used in the summary. The source text is given below. The council met on Tuesday to \
        vote on the bridge budget.";
    assert_eq!(short_pair.prompt, expected, "instructed prompt must match the template exactly");
}

// 9. Judge protocol against canned replies; the suite never opens a
// network connection.
fn c9_judge() {
    let request = JudgeRequest::new(
        "The council met on Tuesday.".into(),
        vec!["council".into()],
        "The council met.".into(),
    );

    let mut mock = MockTransport::new(vec!["3".into(), "5".into(), "4".into()]);
    let verdict = judge(&request, &mut mock).expect("verdict");
    assert_eq!(verdict.scores, vec![3, 5, 4]);
    assert_eq!(verdict.mean, 4.0);
    let expected_std = (2.0f64 / 3.0).sqrt();
    assert!((verdict.std - expected_std).abs() < 1e-9, "std {} vs {expected_std}", verdict.std);
    assert_eq!(format!("{:.4}", verdict.std), "0.8165");

    // Retry recovery: junk burns one attempt, the next reply parses.
    let mut flaky = MockTransport::new(vec!["I'd say 4".into(), "4".into()]);
    let mut req = request.clone();
    req.samples = 1;
    req.max_retries = 1;
    let verdict = judge(&req, &mut flaky).expect("verdict");
    assert_eq!(verdict.scores, vec![4]);
    assert_eq!(verdict.failures, 0);

    // Nothing ever parses: the judge reports itself unavailable.
    let mut hopeless = MockTransport::new(vec!["great!".into()]);
    let err = judge(&request, &mut hopeless).expect_err("unavailable");
    assert!(matches!(err, JudgeError::Unavailable { .. }));

    // Identical inputs produce identical request bytes, run after run.
    let mut first = MockTransport::new(vec!["4".into()]);
    let mut second = MockTransport::new(vec!["4".into()]);
    judge(&request, &mut first).expect("verdict");
    judge(&request, &mut second).expect("verdict");
    assert!(!first.sent_bodies.is_empty());
    assert_eq!(first.sent_bodies, second.sent_bodies);
}

// 10. One manifest, one result: byte-identical artifacts across fresh
// runs and across re-runs in place.
fn c10_determinism() {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    for root in [a.path(), b.path()] {
        run_ok(root, &["synth", "--task", "length_control", "--n", "12", "--seed", "5", "--out", "corpus.jsonl"]);
        std::fs::write(root.join("exp.toml"), pipe_config("det", 3)).expect("write");
        run_ok(root, &["train", "--config", "exp.toml"]);
        run_ok(root, &["eval", "--config", "exp.toml", "--adapter", "det.adapter.adapter", "--data", "corpus.jsonl", "--out", "eval.csv", "--format", "csv"]);
        run_ok(root, &["report", "--inputs", "eval.csv", "--labels", "det", "--format", "csv", "--out", "report.csv"]);
    }
    for name in [
        "corpus.jsonl",
        "corpus.manifest.json",
        "det.adapter.adapter",
        "det.losses.csv",
        "det.manifest.json",
        "eval.csv",
        "report.csv",
    ] {
        let left = std::fs::read(a.path().join(name)).expect("read");
        let right = std::fs::read(b.path().join(name)).expect("read");
        assert_eq!(left, right, "{name} differs between identical runs");
    }

    // Re-running in place reproduces the same bytes too.
    let before = std::fs::read(a.path().join("det.adapter.adapter")).expect("read");
    run_ok(a.path(), &["train", "--config", "exp.toml"]);
    let after = std::fs::read(a.path().join("det.adapter.adapter")).expect("read");
    assert_eq!(before, after, "re-running the manifest must be idempotent");
}

fn pipe_config(id: &str, seed: u64) -> String {
    format!(
        r#"
id = "{id}"
seed = {seed}

[model]
dim = 16
n_layers = 1
n_heads = 2
context_len = 256

[adapter]
rank = 2
alpha = 1.0
rank2 = 1
alpha2 = 0.5
attach = ["attn.q"]

[training]
regime = "joint"
batch_size = 2

[[training.stages]]
data = "corpus.jsonl"
steps = 3
lr = 1e-3

[eval]
max_new_tokens = 8
"#
    )
}

fn run_ok(out_dir: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_alab"))
        .arg("--out-dir")
        .arg(out_dir)
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "alab {args:?} failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}
