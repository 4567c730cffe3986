//! One test per acceptance criterion; each prints a single `[criterion N] PASS|FAIL`
//! line. Criteria run one at a time so the wall-clock limits are measured alone.

mod common;

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_decode, brute_iou};
use eamat_core::checkpoint::encode_checkpoint;
use eamat_core::cqa::CqaLayer;
use eamat_core::experiments::{prepare_data, run_variant, RunOutcome};
use eamat_core::gradcheck::{random_tensor, run_suite};
use eamat_core::graph::Graph;
use eamat_core::metrics::{random_baseline, temporal_iou, MetricReport, Span};
use eamat_core::nn::{BlockConfig, BlockKind, MultiScaleLstm, ProjectionKind, TransformerBlock};
use eamat_core::query::{QueryEncoder, WordClass};
use eamat_core::synth::generate_split;
use eamat_core::train::{sample_loss, train};
use eamat_core::{
    decode_boundaries, Lexicon, Model, ParamStore, QuerySample, RunConfig, Split, SyntheticSplits, Tensor, TrainOptions,
    Vocabulary, DEFAULT_THRESHOLDS,
};

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, pass: bool, detail: String) {
    println!("[criterion {n}] {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let clock = Instant::now();
    let results = run_suite(7).unwrap();
    let elapsed = clock.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.to_string()).collect();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    report(
        1,
        failed.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "{} cases, worst rel err {worst:.2e} (< 1e-4), {:.1}s (< 60s){}",
            results.len(),
            elapsed.as_secs_f64(),
            if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
        ),
    );
}

#[test]
fn criterion_2_decode_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut cases = 0;
    for t in [1usize, 2, 3, 8, 64] {
        for k in 0..1000 {
            // every fourth case draws from a coarse grid so exact ties occur
            let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..t)
                    .map(|_| if k % 4 == 0 { rng.random_range(0..3) as f64 } else { rng.random_range(-5.0..5.0) })
                    .collect()
            };
            let (s, e) = (draw(&mut rng), draw(&mut rng));
            let p = decode_boundaries(&s, &e, None).unwrap();
            let (bs, be, bv) = brute_decode(&p.start_probs, &p.end_probs);
            if (p.start, p.end) != (bs, be) || p.score != bv {
                mismatches += 1;
            }
            cases += 1;
        }
    }
    report(2, mismatches == 0, format!("{cases} cases over T in {{1,2,3,8,64}}, {mismatches} mismatches"));
}

#[test]
fn criterion_3_structural_invariants() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut notes = Vec::new();

    // attention row-stochasticity
    let mut worst_row: f64 = 0.0;
    for kind in [BlockKind::STANDARD, BlockKind::LSTM_TRANSFORMER] {
        let mut ps = ParamStore::new();
        let block = TransformerBlock::new(&mut ps, "b", &BlockConfig::new(8, 2, 2, kind), &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random_tensor(&mut rng, &[7, 8], -2.0, 2.0));
        for w in block.self_attention(&mut g, &ps, x, None).unwrap().weights {
            for t in 0..7 {
                worst_row = worst_row.max((g.value(w).row(t).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let rows_ok = worst_row <= 1e-9;
    notes.push(format!("attention rows {worst_row:.1e}"));

    // multi-scale LSTM Jacobian sparsity at T=6, S=3
    let (t_len, d, scales) = (6, 6, 3);
    let mut ps = ParamStore::new();
    let ms = MultiScaleLstm::new(&mut ps, "ms", d, d, scales, false, &mut rng).unwrap();
    let x = random_tensor(&mut rng, &[t_len, d], -1.0, 1.0);
    let mut sparsity_ok = true;
    for t in 0..t_len {
        for col in 0..d {
            let stride = col / (d / scales) + 1;
            let mut g = Graph::new();
            let xv = g.variable(x.clone());
            let y = ms.forward(&mut g, &ps, xv).unwrap();
            let r = g.slice(y, 0, t, 1).unwrap();
            let c = g.slice(r, 1, col, 1).unwrap();
            let out = g.sum(c);
            g.backward(out).unwrap();
            let grad = g.grad(xv).unwrap();
            for u in 0..t_len {
                let depends = u <= t && u % stride == t % stride;
                let touched = grad[u * d..(u + 1) * d].iter().any(|&v| v != 0.0);
                sparsity_ok &= touched == depends;
            }
        }
    }
    notes.push(format!("lstm jacobian pattern {}", if sparsity_ok { "exact" } else { "violated" }));

    // entity pre-fusion permutation equivariance
    let cfg = common::small_config();
    let model = Model::new(&cfg).unwrap();
    let video = random_tensor(&mut rng, &[5, cfg.d_v], -1.0, 1.0);
    let perm = [3, 0, 4, 1, 2];
    let run = |v: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(v.clone());
        let p = model.frame_proj.forward(&mut g, &model.params, x).unwrap();
        let y = model.entity.early.forward(&mut g, &model.params, p).unwrap();
        g.value(y).clone()
    };
    let lhs = run(&video.permute_rows(&perm));
    let rhs = run(&video).permute_rows(&perm);
    let perm_err = lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let perm_ok = perm_err <= 1e-9;
    notes.push(format!("permutation {perm_err:.1e}"));

    // query mask algebra
    let vocab = Vocabulary::from_lexicon(Lexicon::shipped());
    let mut ps = ParamStore::new();
    let enc = QueryEncoder::new(&mut ps, vocab.len(), 8, &BlockConfig::new(8, 2, 1, BlockKind::STANDARD), &mut rng).unwrap();
    let q = QuerySample::tagged("a person slowly closes the old window", vocab.lexicon()).unwrap();
    let mut g = Graph::new();
    let f = enc.encode(&mut g, &ps, &vocab, &q).unwrap();
    let mask_ok = q.classes.iter().enumerate().all(|(i, c)| match c {
        WordClass::Entity => g.value(f.motion).row(i).iter().all(|&v| v == 0.0),
        WordClass::Motion => g.value(f.entity).row(i).iter().all(|&v| v == 0.0),
        WordClass::Other => g.value(f.entity).row(i) == g.value(f.full).row(i),
    });
    notes.push(format!("mask algebra {}", if mask_ok { "exact" } else { "violated" }));

    report(3, rows_ok && sparsity_ok && perm_ok && mask_ok, notes.join(", "));
}

#[test]
fn criterion_4_cqa_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ps = ParamStore::new();
    let cqa = CqaLayer::new(&mut ps, "cqa", 2, &mut rng);
    let stacked: Vec<f64> = (0..4).flat_map(|_| [1.0, 0.0, 0.0, 1.0]).collect();
    *ps.value_mut(cqa.fuse.weight) = Tensor::matrix(8, 2, stacked).unwrap();
    let l3 = 3f64.ln();
    let mut g = Graph::new();
    let fv = g.constant(Tensor::identity(2));
    let fq = g.constant(Tensor::from_rows(&[&[l3, 0.0], &[0.0, 0.0]]).unwrap());
    let parts = cqa.forward_parts(&mut g, &ps, fv, fq, None).unwrap();
    // hand derivation in tests/invariants.rs::cqa_two_by_two_by_hand
    let expected: [(eamat_core::Var, [f64; 4]); 5] = [
        (parts.row_norm, [0.75, 0.25, 0.5, 0.5]),
        (parts.col_norm, [0.75, 0.5, 0.25, 0.5]),
        (parts.video_to_query, [0.75 * l3, 0.0, 0.5 * l3, 0.0]),
        (parts.query_to_video, [11.0 / 16.0, 5.0 / 16.0, 5.0 / 8.0, 3.0 / 8.0]),
        (parts.output, [1.0 + 1.5 * l3 + 11.0 / 16.0, 0.0, 0.5 * l3, 1.375]),
    ];
    let err = expected
        .iter()
        .flat_map(|(v, want)| g.value(*v).data().iter().zip(want).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    report(4, err <= 1e-9, format!("max abs error {err:.1e} (<= 1e-9)"));
}

#[test]
fn criterion_5_metric_oracle() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let mut span = || {
            let (a, b) = (rng.random_range(0..64), rng.random_range(0..64));
            (a.min(b), a.max(b))
        };
        let (a, b) = (span(), span());
        let ours = temporal_iou(Span::new(a.0, a.1).unwrap(), Span::new(b.0, b.1).unwrap()).unwrap();
        worst = worst.max((ours - brute_iou(a, b)).abs());
    }
    // IoU exactly 0.5, 0.3 and 0.7 must not count at their own threshold
    let exact = [((0, 0), (0, 1), 0.5), ((0, 2), (0, 9), 0.3), ((0, 6), (0, 9), 0.7)];
    let mut strict_ok = true;
    for (p, t, mu) in exact {
        let r = MetricReport::from_spans(&[Span::new(p.0, p.1).unwrap()], &[Span::new(t.0, t.1).unwrap()], &[mu]).unwrap();
        strict_ok &= r.miou == mu && r.recall == vec![0.0];
    }
    report(
        5,
        worst < 1e-15 && strict_ok,
        format!("10000 random pairs, max |diff| {worst:.1e}; strict threshold {}", if strict_ok { "holds" } else { "violated" }),
    );
}

#[test]
fn criterion_6_overfit_one() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    cfg.steps = 200;
    let sample = generate_split(&cfg.gen_config(), &Lexicon::shipped(), Split::Train, 1).unwrap().remove(0);
    let clock = Instant::now();
    let mut model = Model::new(&cfg).unwrap();
    let initial = sample_loss(&model, &sample).unwrap();
    train(&mut model, std::slice::from_ref(&sample), &[], &TrainOptions::default()).unwrap();
    let last = sample_loss(&model, &sample).unwrap();
    let p = model.predict(&sample).unwrap();
    let iou = temporal_iou(Span::new(p.boundary.start, p.boundary.end).unwrap(), Span::new(sample.start, sample.end).unwrap()).unwrap();
    let elapsed = clock.elapsed();
    report(
        6,
        last < 0.1 * initial && iou == 1.0 && elapsed < Duration::from_secs(120),
        format!(
            "loss {initial:.4} -> {last:.4} ({:.1}% of initial, < 10%), IoU {iou}, {:.1}s (< 120s)",
            100.0 * last / initial,
            elapsed.as_secs_f64()
        ),
    );
}

struct DeskRun {
    cfg: RunConfig,
    data: SyntheticSplits,
    outcome: RunOutcome,
    elapsed: Duration,
}

/// The desk-configuration run shared by criteria 7 and 8.
fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = RunConfig::default();
        assert_eq!((cfg.train_samples, cfg.test_samples, cfg.steps), (1000, 200, 2000));
        let clock = Instant::now();
        let data = prepare_data(&cfg).unwrap();
        let outcome = run_variant(&cfg, &data, &TrainOptions::default()).unwrap();
        DeskRun {
            cfg,
            data,
            outcome,
            elapsed: clock.elapsed(),
        }
    })
}

#[test]
fn criterion_7_learning_sanity() {
    let _g = serial();
    let run = desk_run();
    let baseline = random_baseline(&run.data.test, 200, run.cfg.seed, &DEFAULT_THRESHOLDS).unwrap();
    let test = &run.outcome.test;
    let r05 = test.recall_at(0.5).unwrap();
    report(
        7,
        test.miou >= 2.0 * baseline.miou && r05 >= 0.5 && run.elapsed < Duration::from_secs(900),
        format!(
            "test mIoU {:.4} vs random baseline {:.4} (needs >= 2x), R@1,IoU=0.5 {r05:.3} (>= 0.5), {:.0}s (< 900s)",
            test.miou,
            baseline.miou,
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_8_ablation_ordering() {
    let _g = serial();
    let run = desk_run();
    let mut fc = run.cfg.clone();
    fc.motion_block = BlockKind::Transformer(ProjectionKind::Linear);
    let fc_outcome = run_variant(&fc, &run.data, &TrainOptions::default()).unwrap();
    let (ours, base) = (run.outcome.test.miou, fc_outcome.test.miou);
    report(8, ours >= base, format!("full model mIoU {ours:.4} vs FC Trans {base:.4} (needs >=)"));
}

#[test]
fn criterion_9_determinism() {
    let _g = serial();
    let mut cfg = RunConfig::default();
    cfg.steps = 30;
    cfg.train_samples = 20;
    cfg.val_samples = 10;
    cfg.test_samples = 10;
    let once = || {
        let data = prepare_data(&cfg).unwrap();
        let out = run_variant(&cfg, &data, &TrainOptions::default()).unwrap();
        (encode_checkpoint(&out.model.config, &out.model.params), out.training.to_csv())
    };
    let (ck_a, rep_a) = once();
    let (ck_b, rep_b) = once();
    report(
        9,
        ck_a == ck_b && rep_a == rep_b,
        format!("checkpoints {} bytes identical: {}, reports identical: {}", ck_a.len(), ck_a == ck_b, rep_a == rep_b),
    );
}
