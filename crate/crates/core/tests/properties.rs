//! Invariants checked over generated inputs.

mod common;

use proptest::collection::vec;
use proptest::prelude::*;

use mtlgraph::checkpoint;
use mtlgraph::data::{gen_synthetic_tasks, SynthSpec};
use mtlgraph::heads::crf;
use mtlgraph::interpret::{export_alpha_topk, format_weight, from_jsonl, parse_attn_tsv, to_jsonl, write_attn_tsv, ExportRows, AttentionExport};
use mtlgraph::message::MessageTrace;
use mtlgraph::tensor::{log_sum_exp, softmax};
use mtlgraph::train::metrics::{bio_spans, span_prf};
use mtlgraph::{CommMode, Tensor};

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    vec(-4.0f64..4.0, rows * cols).prop_map(move |d| Tensor::new(rows, cols, d).unwrap())
}

fn crf_instance() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=5, 1usize..=4).prop_flat_map(|(t, l)| (tensor(t, l), tensor(l + 2, l + 2)))
}

fn stochastic_rows(max_cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1..=max_cols).prop_flat_map(|n| vec(vec(-6.0f64..6.0, n), 1..6))
        .prop_map(|rows| rows.iter().map(|r| softmax(r)).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_shift_invariance(xs in vec(-50.0f64..50.0, 1..10), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-9);
        let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(log_sum_exp(&xs) >= top);
        prop_assert!(log_sum_exp(&xs) <= top + (xs.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn softmax_is_a_distribution_with_the_same_argmax(xs in vec(-700.0f64..700.0, 1..10)) {
        let p = softmax(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0 && v.is_finite()));
        let argmax = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
        prop_assert_eq!(p[argmax(&xs)], p[argmax(&p)]);
    }

    #[test]
    fn crf_partition_bounds_every_path((em, tr) in crf_instance()) {
        let log_z = crf::log_partition(&em, &tr).unwrap();
        let (path, best) = crf::viterbi(&em, &tr).unwrap();
        prop_assert!(best <= log_z + 1e-12);
        prop_assert!((crf::path_score(&em, &tr, &path).unwrap() - best).abs() < 1e-12);
        let nll = crf::nll(&em, &tr, &path).unwrap();
        prop_assert!(nll >= -1e-12);
        let m = crf::marginals(&em, &tr).unwrap();
        for t in 0..em.rows() {
            prop_assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn crf_emission_shift_is_invisible((em, tr) in crf_instance(), c in -3.0f64..3.0, step in 0usize..5) {
        // Adding a constant to every tag at one step shifts all path scores equally.
        let t = step % em.rows();
        let mut shifted = em.clone();
        for y in 0..em.cols() {
            shifted.set(t, y, em.get(t, y) + c);
        }
        let (p1, s1) = crf::viterbi(&em, &tr).unwrap();
        let (p2, s2) = crf::viterbi(&shifted, &tr).unwrap();
        prop_assert!((s2 - s1 - c).abs() < 1e-9);
        prop_assert!((crf::log_partition(&shifted, &tr).unwrap() - crf::log_partition(&em, &tr).unwrap() - c).abs() < 1e-9);
        // Paths may differ only if the original maximum was (numerically) tied.
        if p1 != p2 {
            let alt = crf::path_score(&em, &tr, &p2).unwrap();
            prop_assert!((alt - s1).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_is_a_prefix_of_the_full_ranking(rows in stochastic_rows(6), k in 1usize..6) {
        let n = rows[0].len();
        let trace = MessageTrace {
            task: n,
            mode: CommMode::Cg,
            sources: (0..n).collect(),
            tokens: (0..rows.len()).map(|i| format!("w{i}")).collect(),
            rows,
        };
        let k = k.min(n);
        let full = export_alpha_topk(&trace, n).unwrap();
        let top = export_alpha_topk(&trace, k).unwrap();
        let (ExportRows::Ranked(f), ExportRows::Ranked(t)) = (&full.rows, &top.rows) else { unreachable!() };
        for (fr, tr) in f.iter().zip(t) {
            prop_assert_eq!(&fr[..k], &tr[..]);
            prop_assert!(fr.windows(2).all(|w| w[0].1 >= w[1].1));
        }
        prop_assert!(full.max_row_deviation() < 1e-12);
        prop_assert_eq!(from_jsonl(&to_jsonl(&[full.clone()])).unwrap(), vec![full]);
    }

    #[test]
    fn attention_tsv_round_trip(rows in stochastic_rows(5)) {
        let n = rows.len();
        let square: Vec<Vec<f64>> = (0..n).map(|i| {
            let mut r = softmax(&rows[i].iter().cycle().take(n).cloned().collect::<Vec<_>>());
            r.truncate(n);
            r
        }).collect();
        let export = AttentionExport {
            task: 0,
            mode: CommMode::Sg,
            tokens: (0..n).map(|i| format!("t{i}")).collect(),
            rows: ExportRows::Matrix(square.clone()),
        };
        let text = write_attn_tsv(&[export.clone(), export.clone()]).unwrap();
        let back = parse_attn_tsv(&text, 0).unwrap();
        prop_assert_eq!(back.len(), 2);
        let ExportRows::Matrix(m) = &back[1].rows else { unreachable!() };
        for (a, b) in m.iter().flatten().zip(square.iter().flatten()) {
            prop_assert!((a - b).abs() <= 5e-6 * b.abs(), "{} vs {}", a, b);
        }
    }

    #[test]
    fn weight_formatting_keeps_six_digits(v in 1e-12f64..1.0) {
        let s = format_weight(v);
        let back: f64 = s.parse().unwrap();
        prop_assert!((back - v).abs() <= 5e-6 * v, "{} -> {}", v, s);
    }

    #[test]
    fn bio_spans_are_disjoint_and_self_scoring(tags in vec(0usize..5, 0..12)) {
        let names = ["O", "B-X", "I-X", "B-Y", "I-Y"];
        let seq: Vec<&str> = tags.iter().map(|&t| names[t]).collect();
        let spans = bio_spans(&seq);
        for w in spans.windows(2) {
            prop_assert!(w[0].1 < w[1].0);
        }
        if !spans.is_empty() {
            let prf = span_prf(&spans, &spans);
            prop_assert!((prf.f1 - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in 0u64..1000, mode in prop_oneof![Just(CommMode::Single), Just(CommMode::Cg), Just(CommMode::Sg)], shared in any::<bool>()) {
        let spec = SynthSpec { tasks: 2, train: 30, dev: 0, test: 0, shared_patterns: 4, private_patterns: 2, filler_vocab: 6, ..SynthSpec::default() };
        let (_, vocab, data) = common::synth(&spec, seed);
        let data = if mode == CommMode::Single { common::select(&data, &[0]) } else { data };
        let cfg = mtlgraph::train::TrainConfig { shared_attention: shared, seed, ..common::config(mode, 3, 1, seed) };
        let m = common::model(&cfg, &vocab, &data);
        let bytes = checkpoint::encode(&m, "h");
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back.model.params, &m.params);
        prop_assert_eq!(checkpoint::encode(&back.model, "h"), bytes);
    }

    #[test]
    fn synthetic_generation_is_a_function_of_the_seed(seed in 0u64..1000) {
        let spec = SynthSpec { train: 10, dev: 3, test: 3, ..SynthSpec::default() };
        prop_assert_eq!(gen_synthetic_tasks(&spec, seed).unwrap(), gen_synthetic_tasks(&spec, seed).unwrap());
    }
}
