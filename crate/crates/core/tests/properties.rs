use std::io::Cursor;

use hazloc::data::{parse_jsonl, AnnotatedSample, LoadOptions, Vocabulary};
use hazloc::localization::PixelPoint;
use hazloc::metrics::{bleu4, bleu4_multi, rouge_l, rouge_n, Smoothing};
use hazloc::model::{nucleus, SamplingParams};
use hazloc::optim::{adamw_step, lr_at, AdamWConfig, AdamWState, ScheduleConfig};
use hazloc::training::{Checkpoint, CheckpointMeta};
use hazloc::{Tape, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-5.0f32..5.0, rows * cols)
        .prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn tokens() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..6, 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(x in matrix(3, 5), c in -20.0f64..20.0) {
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.softmax(v, 1).unwrap();
        let shifted = tape.add_scalar(v, c);
        let s2 = tape.softmax(shifted, 1).unwrap();
        for r in 0..3 {
            let row = &tape.value(s)[r * 5..(r + 1) * 5];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
        for (a, b) in tape.value(s).iter().zip(tape.value(s2)) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fan_out_gradient_is_sum_of_uses(x in matrix(2, 3), w in matrix(2, 3)) {
        let grad_of = |uses: &[bool]| {
            let mut tape = Tape::new();
            let v = tape.leaf(&x.clone().with_requires_grad(true));
            let wc = tape.constant(&w);
            let mut root = None;
            if uses[0] {
                let a = tape.mul(v, wc).unwrap();
                root = Some(tape.sum(a));
            }
            if uses[1] {
                let sq = tape.mul(v, v).unwrap();
                let b = tape.sum(sq);
                root = Some(match root { Some(r) => tape.add(r, b).unwrap(), None => b });
            }
            tape.backward(root.unwrap()).unwrap().get_or_zeros(v)
        };
        let both = grad_of(&[true, true]);
        let first = grad_of(&[true, false]);
        let second = grad_of(&[false, true]);
        for i in 0..6 {
            prop_assert!((both[i] - first[i] - second[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_by_identity_is_exact(a in matrix(3, 4)) {
        prop_assert!(a.matmul(&Tensor::eye(4)).unwrap().bit_eq(&a));
    }

    #[test]
    fn text_metrics_are_bounded_and_relabeling_invariant(c in tokens(), r in tokens(), shift in 1u8..50) {
        let relabel = |t: &[u8]| t.iter().map(|x| x.wrapping_mul(3).wrapping_add(shift)).collect::<Vec<u8>>();
        let (c2, r2) = (relabel(&c), relabel(&r));
        for n in [1, 2] {
            let s = rouge_n(&c, &r, n).unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(s, rouge_n(&c2, &r2, n).unwrap());
        }
        let l = rouge_l(&c, &r);
        prop_assert!((0.0..=1.0).contains(&l));
        prop_assert_eq!(l, rouge_l(&c2, &r2));
        if !r.is_empty() {
            let b = bleu4(&c, &r).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert_eq!(b, bleu4(&c2, &r2).unwrap());
        }
    }

    #[test]
    fn perfect_bigram_overlap_implies_perfect_lcs(c in tokens(), r in tokens()) {
        if rouge_n(&c, &r, 2).unwrap() == 1.0 && c.len() == r.len() {
            prop_assert_eq!(rouge_l(&c, &r), 1.0);
        }
    }

    #[test]
    fn smoothing_is_inert_on_positive_counts(r in prop::collection::vec(0u8..4, 4..10), cut in 0usize..3) {
        let c = &r[cut..];
        if c.len() >= 4 {
            let plain = bleu4_multi(c, &[&r], Smoothing::None).unwrap();
            let smooth = bleu4_multi(c, &[&r], Smoothing::HalfCount).unwrap();
            prop_assert!(plain > 0.0);
            prop_assert_eq!(plain, smooth);
        }
    }

    #[test]
    fn decay_displacement_independent_of_gradient(theta in -3.0f32..3.0, g in -5.0f64..5.0, lr in 1e-4f64..0.1) {
        let step = |grad: f64, wd: f64| {
            let mut p = Tensor::scalar(theta);
            let mut st = AdamWState::new([&p]);
            let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
            adamw_step(&mut [&mut p], &[vec![grad]], &mut st, &cfg, lr).unwrap();
            prop_assert!(st.v[0].data()[0] >= 0.0);
            Ok(p.data()[0] as f64)
        };
        let decay = |grad: f64| -> Result<f64, TestCaseError> { Ok(step(grad, 0.01)? - step(grad, 0.0)?) };
        let expected = -lr * 0.01 * theta as f64;
        prop_assert!((decay(g)? - expected).abs() < 1e-6);
        prop_assert!((decay(10.0 * g)? - expected).abs() < 1e-6);
    }

    #[test]
    fn schedule_bounded_and_decaying(base in 1e-5f64..1e-2, frac in 0.0f64..1.0, w in 0usize..50, extra in 1usize..200) {
        let s = ScheduleConfig::new(base, base * frac, w, w + extra).unwrap();
        let mut prev = f64::INFINITY;
        for t in 0..=s.total_steps {
            let lr = lr_at(&s, t).unwrap();
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            if t >= w {
                prop_assert!(lr <= prev + 1e-18);
                prev = lr;
            }
        }
    }

    #[test]
    fn greedy_nucleus_keeps_only_the_argmax(logits in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let kept = nucleus(&logits, &SamplingParams::GREEDY).unwrap();
        let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(kept.len(), 1);
        prop_assert_eq!(logits[kept[0].0], best);
    }

    #[test]
    fn nucleus_mass_reaches_top_p(logits in prop::collection::vec(-5.0f64..5.0, 2..20), p in 0.05f64..1.0) {
        let kept = nucleus(&logits, &SamplingParams::new(p, 1.0).unwrap()).unwrap();
        let total: f64 = kept.iter().map(|k| k.1).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(kept.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn vocabulary_round_trips_known_text(words in prop::collection::vec("[a-z]{1,6}", 1..8)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(&[text.as_str()]);
        let ids = vocab.tokenize(&text);
        prop_assert_eq!(vocab.detokenize(&ids), text);
        prop_assert_eq!(Vocabulary::from_text(&vocab.to_text()).unwrap(), vocab);
    }

    #[test]
    fn records_round_trip(
        pixels in prop::collection::vec(0u16..=1000, 16),
        x in 0.0f64..4.0,
        y in 0.0f64..4.0,
        caption in "[a-z]{1,8}( [a-z]{1,8}){0,5}",
        cat in prop::option::of(prop::sample::select(vec!["predictable", "unpredictable"])),
    ) {
        let image = Tensor::new(&[1, 4, 4], pixels.iter().map(|&p| p as f32 / 1000.0).collect()).unwrap();
        let mut s = AnnotatedSample::new(image, PixelPoint::new(x, y), caption).unwrap();
        s.category = cat.map(String::from);
        let r = parse_jsonl(Cursor::new(s.to_json_line()), &LoadOptions::default()).unwrap();
        prop_assert!(r.rejections.is_empty());
        prop_assert_eq!(&r.samples[0], &s);
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_reject_truncation(
        dims in prop::collection::vec(1usize..4, 1..3),
        step in any::<u64>(),
        cut in 0.0f64..1.0,
    ) {
        let n: usize = dims.iter().product();
        let t = Tensor::from_fn(&dims, |i| i as f32 * 0.5 - 1.0).unwrap();
        let ckpt = Checkpoint {
            params: vec![("w".into(), t.clone()), ("b".into(), Tensor::zeros(&[n]))],
            moments: vec![("w.m".into(), t.clone()), ("w.v".into(), t)],
            meta: CheckpointMeta { step, epoch: 2, seed: 7 },
        };
        let bytes = ckpt.to_bytes();
        prop_assert_eq!(&Checkpoint::from_bytes(&bytes).unwrap(), &ckpt);
        let keep = ((bytes.len() - 1) as f64 * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        prop_assert!(Checkpoint::from_bytes(&longer).is_err());
    }
}
