mod common;

use std::path::Path;

use proptest::prelude::*;

use common::{brute_decode, brute_iou, naive_softmax};
use eamat_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use eamat_core::dataset::{format_dataset, parse_dataset};
use eamat_core::graph::Graph;
use eamat_core::loss::{boundary_loss, inner_loss, TargetLabels};
use eamat_core::metrics::{temporal_iou, MetricReport, Span};
use eamat_core::motion::{best_pair, decode_boundaries};
use eamat_core::synth::{generate_split, PLANTED_NOISE_CLIP};
use eamat_core::{Lexicon, Model, RunConfig, Split, Tensor, DEFAULT_THRESHOLDS};

fn scores(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, 1..=max_len)
}

fn span(max: usize) -> impl Strategy<Value = (usize, usize)> {
    (0..max, 0..max).prop_map(|(a, b)| (a.min(b), a.max(b)))
}

proptest! {
    #[test]
    fn decode_matches_exhaustive_search((s, e) in (1usize..=64).prop_flat_map(|t| (
        prop::collection::vec(-6.0f64..6.0, t),
        prop::collection::vec(-6.0f64..6.0, t),
    ))) {
        let p = decode_boundaries(&s, &e, None).unwrap();
        let (bs, be, bv) = brute_decode(&p.start_probs, &p.end_probs);
        prop_assert_eq!((p.start, p.end), (bs, be));
        prop_assert_eq!(p.score, bv);
        prop_assert_eq!(p.score, p.start_probs[p.start] * p.end_probs[p.end]);
        prop_assert!(p.start <= p.end && p.end < s.len());
        prop_assert!((p.start_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decode_handles_quantized_ties(s in prop::collection::vec(0u8..3, 1..12), e in prop::collection::vec(0u8..3, 1..12)) {
        let n = s.len().min(e.len());
        let ps: Vec<f64> = s[..n].iter().map(|&v| v as f64).collect();
        let pe: Vec<f64> = e[..n].iter().map(|&v| v as f64).collect();
        let (a, b, v) = best_pair(&ps, &pe);
        let (x, y, w) = brute_decode(&ps, &pe);
        prop_assert_eq!((a, b), (x, y));
        prop_assert_eq!(v, w);
    }

    #[test]
    fn start_shift_leaves_decode_unchanged(
        s in prop::collection::vec(-48i32..48, 1..32),
        e in prop::collection::vec(-48i32..48, 32),
        shift in -50i32..50,
    ) {
        // dyadic scores and an integer shift keep `x - max` exact, so the softmax is
        // bit-identical and so is the decoded pair
        let s: Vec<f64> = s.iter().map(|&v| v as f64 / 8.0).collect();
        let e: Vec<f64> = e[..s.len()].iter().map(|&v| v as f64 / 8.0).collect();
        let shifted: Vec<f64> = s.iter().map(|v| v + shift as f64).collect();
        let a = decode_boundaries(&s, &e, None).unwrap();
        let b = decode_boundaries(&shifted, &e, None).unwrap();
        prop_assert_eq!((a.start, a.end), (b.start, b.end));
        prop_assert_eq!(a.start_probs, b.start_probs);
    }

    #[test]
    fn max_span_is_respected(s in scores(24), limit in 1usize..6) {
        let e: Vec<f64> = s.iter().map(|v| -v).collect();
        let p = decode_boundaries(&s, &e, Some(limit)).unwrap();
        prop_assert!(p.end - p.start < limit);
        let mut best = (0, 0, f64::NEG_INFINITY);
        for a in 0..s.len() {
            for b in a..s.len().min(a + limit) {
                let v = p.start_probs[a] * p.end_probs[b];
                if v > best.2 {
                    best = (a, b, v);
                }
            }
        }
        prop_assert_eq!((p.start, p.end), (best.0, best.1));
    }

    #[test]
    fn softmax_matches_naive(x in scores(16)) {
        let ours = eamat_core::tensor::softmax(&x);
        for (a, b) in ours.iter().zip(naive_softmax(&x)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_matches_frame_count(a in span(40), b in span(40)) {
        let ours = temporal_iou(Span::new(a.0, a.1).unwrap(), Span::new(b.0, b.1).unwrap()).unwrap();
        prop_assert!((ours - brute_iou(a, b)).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ours));
        let sym = temporal_iou(Span::new(b.0, b.1).unwrap(), Span::new(a.0, a.1).unwrap()).unwrap();
        prop_assert_eq!(ours, sym);
    }

    #[test]
    fn recall_is_monotone_in_threshold(ious in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let r = MetricReport::from_ious(&ious, &DEFAULT_THRESHOLDS).unwrap();
        prop_assert!(r.recall.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(r.recall.iter().chain([&r.miou]).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn losses_are_finite_and_nonnegative(
        (s, e, p, a, b) in (2usize..12).prop_flat_map(|t| (
            prop::collection::vec(-30.0f64..30.0, t),
            prop::collection::vec(-30.0f64..30.0, t),
            prop::collection::vec(0.0f64..=1.0, t),
            0..t,
            0..t,
        ))
    ) {
        let t = s.len();
        let (lo, hi) = (a.min(b), a.max(b));
        let labels = TargetLabels::new(lo, hi, t).unwrap();
        let targets = labels.inner_targets();
        prop_assert_eq!(targets.iter().filter(|&&y| y == 1.0).count(), hi - lo + 1);
        let mut g = Graph::new();
        let sv = g.variable(Tensor::vector(s).unwrap());
        let ev = g.variable(Tensor::vector(e).unwrap());
        let pv = g.variable(Tensor::vector(p).unwrap());
        let bl = boundary_loss(&mut g, sv, ev, lo, hi).unwrap();
        let il = inner_loss(&mut g, pv, &targets).unwrap();
        let total = g.add(bl, il).unwrap();
        let v = g.value(total).item();
        prop_assert!(v.is_finite() && v >= 0.0);
        g.backward(total).unwrap();
        prop_assert!(g.grad(pv).unwrap().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn transpose_is_an_involution(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| ((i as u64 ^ seed) % 97) as f64).collect();
        let t = Tensor::matrix(rows, cols, data).unwrap();
        prop_assert_eq!(t.transpose().unwrap().transpose().unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generated_samples_respect_their_contract(seed in any::<u64>(), noise in 0.0f64..=0.1) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.noise = noise;
        let gen = cfg.gen_config();
        for s in generate_split(&gen, &Lexicon::shipped(), Split::Train, 8).unwrap() {
            let m = s.meta.as_ref().unwrap();
            prop_assert!(s.start <= s.end && s.end < s.frames());
            prop_assert!(m.region_start <= s.start && s.end <= m.region_end);
            prop_assert!((gen.t_min..=gen.t_max).contains(&s.frames()));
            // only the two step edges of the motion channel jump by more than 3σ
            let ch = m.motion_channel;
            for t in 1..s.frames() {
                let jump = (s.video.at(t, ch) - s.video.at(t - 1, ch)).abs();
                let edge = t == s.start || t == s.end + 1;
                if noise > 0.0 {
                    prop_assert_eq!(jump > 3.0 * noise, edge, "t = {}", t);
                }
            }
            // planted channels stay within the clip around their level
            for &c in &m.entity_channels {
                for t in 0..s.frames() {
                    let level = if (m.region_start..=m.region_end).contains(&t) { 1.0 } else { 0.0 };
                    prop_assert!((s.video.at(t, c) - level).abs() <= PLANTED_NOISE_CLIP * noise + 1e-12);
                }
            }
        }
    }

    #[test]
    fn dataset_text_roundtrip(seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        let samples = generate_split(&cfg.gen_config(), &Lexicon::shipped(), Split::Val, 3).unwrap();
        let text = format_dataset(&samples, Some(&cfg.gen_config()));
        prop_assert_eq!(parse_dataset(&text, Path::new("mem")).unwrap(), samples);
    }

    #[test]
    fn config_text_roundtrip(d in prop::sample::select(vec![12usize, 24, 60]), lr in 1e-6f64..1e-2, l2 in 0.0f64..20.0, seed in any::<u64>()) {
        let mut cfg = RunConfig::default();
        cfg.d = d;
        cfg.lr = lr;
        cfg.lambda2 = l2;
        cfg.seed = seed;
        let back = RunConfig::from_text(&cfg.to_text(), Path::new("echo")).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoint_roundtrip_preserves_predictions(seed in any::<u64>()) {
        let mut cfg = common::small_config();
        cfg.seed = seed;
        let model = Model::new(&cfg).unwrap();
        let bytes = encode_checkpoint(&model.config, &model.params);
        let restored = decode_checkpoint(&bytes, Path::new("mem")).unwrap().into_model().unwrap();
        let sample = &generate_split(&cfg.gen_config(), &Lexicon::shipped(), Split::Test, 1).unwrap()[0];
        prop_assert_eq!(model.predict(sample).unwrap(), restored.predict(sample).unwrap());
    }
}
