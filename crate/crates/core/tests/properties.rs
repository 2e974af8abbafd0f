//! Property tests for the spec invariants that hold over all inputs.

use ecgtext_core::autodiff::Graph;
use ecgtext_core::eval::{auroc, bleu, recall_at_k};
use ecgtext_core::synth;
use ecgtext_core::tensor::Tensor;
use ecgtext_core::text::{detokenize, normalize, tokenize};
use proptest::prelude::*;

fn finite_vec(max_mag: f64, len: core::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-max_mag..max_mag, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(xs in finite_vec(1000.0, 2..24)) {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::vector(xs)).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        let sum: f64 = v.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn logsumexp_within_max_and_max_plus_ln_n(xs in finite_vec(500.0, 1..16)) {
        let n = xs.len() as f64;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::vector(xs)).unwrap();
        let l = g.item(g.logsumexp(x, 0).unwrap()).unwrap();
        prop_assert!(l >= max - 1e-9);
        prop_assert!(l <= max + n.ln() + 1e-9);
    }

    #[test]
    fn cosine_invariant_under_positive_rescale(
        a in finite_vec(10.0, 3..8),
        k in 0.001f64..100.0,
    ) {
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-6);
        let b: Vec<f64> = a.iter().enumerate().map(|(i, v)| v + (i as f64) * 0.25 + 0.5).collect();
        let bn: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(bn > 1e-6);
        let g: Graph<f64> = Graph::new();
        let av = g.leaf(Tensor::vector(a.clone())).unwrap();
        let bv = g.leaf(Tensor::vector(b)).unwrap();
        let c1 = g.item(g.cosine_sim(av, bv).unwrap()).unwrap();
        let ka = g.scale(av, k).unwrap();
        let c2 = g.item(g.cosine_sim(ka, bv).unwrap()).unwrap();
        prop_assert!((c1 - c2).abs() < 1e-9);
    }

    #[test]
    fn auroc_equals_brute_force_pair_counting(
        scores in prop::collection::vec(0..10i32, 4..50),
        flips in prop::collection::vec(any::<bool>(), 4..50),
    ) {
        let n = scores.len().min(flips.len());
        let scores: Vec<f64> = scores[..n].iter().map(|&s| s as f64 / 10.0).collect();
        let labels: Vec<bool> = flips[..n].to_vec();
        let n_pos = labels.iter().filter(|&&l| l).count();
        prop_assume!(n_pos > 0 && n_pos < n);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            if !labels[i] { continue; }
            for j in 0..n {
                if labels[j] { continue; }
                den += 1.0;
                num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
            }
        }
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), num / den);
    }

    #[test]
    fn recall_at_k_monotone_in_k(seed in 0u64..1000) {
        use ecgtext_core::rng::{self, RngExt};
        let mut r = rng::stream(seed, "prop-recall");
        let n = 3 + r.below(20);
        let q: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| r.normal() as f32).collect()).collect();
        let c: Vec<Vec<f32>> = (0..n).map(|_| (0..6).map(|_| r.normal() as f32).collect()).collect();
        let ks: Vec<usize> = (1..=n).collect();
        let rec = recall_at_k(&q, &c, &ks).unwrap();
        for w in rec.windows(2) {
            prop_assert!(w[0] <= w[1] + 1e-12);
        }
        prop_assert!((rec[n - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_higher_order_not_above_unigram(
        cand in prop::collection::vec(6usize..12, 4..10),
        refr in prop::collection::vec(6usize..12, 4..10),
    ) {
        let b1 = bleu(&cand, &[&refr[..]], 1);
        let b4 = bleu(&cand, &[&refr[..]], 4);
        // higher-order precisions only remove matches on these same-length-ish inputs
        prop_assert!(b4 <= b1 + 1e-9);
    }
}

#[test]
fn tokenizer_round_trip_over_seeded_templates() {
    use ecgtext_core::rng::{self, RngExt};
    let vocab = synth::build_vocab();
    let texts = synth::all_template_texts();
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, "roundtrip");
        let k = 1 + r.below(3);
        let mut raw = String::new();
        for _ in 0..k {
            raw.push_str(r.pick(&texts));
            raw.push(' ');
        }
        let report = tokenize(&raw, &vocab);
        assert_eq!(detokenize(&report, &vocab), normalize(&raw), "seed {seed}");
    }
}
