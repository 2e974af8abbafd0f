//! End-to-end verification helpers shared by the test suites.

use alloc::vec::Vec;

use crate::autodiff::gradcheck::{grad_check, GradCheckReport};
use crate::autodiff::{Graph, Var, IGNORE_INDEX, NEG_MASK};
use crate::error::Result;
use crate::losses::{total_loss_batch, LossParts};
use crate::model::{Model, ModelConfig};
use crate::nn::Fwd;
use crate::rng::{self, RngExt};
use crate::synth::{self, Code, Pair, SynthParams};
use crate::tensor::Tensor;

/// The tiny end-to-end configuration: D=16, one layer everywhere, batch 3,
/// two beat tokens, two sentences per report, short two-second records.
pub fn tiny_batch(seed: u64) -> Result<Vec<Pair>> {
    let vocab = synth::build_vocab();
    let params = SynthParams { duration_s: 2, ..SynthParams::default() };
    let codes = [[Code::Norm], [Code::Afib], [Code::Ste]];
    let mut out = Vec::new();
    for (i, c) in codes.iter().enumerate() {
        let record = synth::synth_ecg(c, &params, seed * 31 + i as u64)?;
        let report = synth::synth_report(c, &vocab, seed * 37 + i as u64)?;
        out.push(Pair { record, report });
    }
    Ok(out)
}

fn rand_tensor(shape: &[usize], seed: u64, tag: &str) -> Tensor<f64> {
    let mut r = rng::stream(seed, tag);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| r.range(-1.5, 1.5)).collect()).expect("shape")
}

fn weighted_sum(g: &Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape_of(v);
    let w = rand_tensor(&shape, seed ^ 0xdead_beef, "probe");
    let m = g.mul_mask(v, w)?;
    g.sum_all(m)
}

/// Central-difference check of every autodiff primitive, `seeds` random
/// draws each. Returns (primitive name, max relative error over seeds).
#[allow(clippy::too_many_lines)]
pub fn primitive_grad_checks(seeds: u64, samples: usize) -> Result<Vec<(&'static str, f64)>> {
    type Builder = fn(&Graph<f64>, &[Var], u64) -> Result<Var>;
    let cases: Vec<(&'static str, fn(u64) -> Vec<Tensor<f64>>, Builder)> = alloc::vec![
        (
            "add/sub/mul/scale",
            (|s| alloc::vec![rand_tensor(&[3, 4], s, "a"), rand_tensor(&[3, 4], s, "b")])
                as fn(u64) -> Vec<Tensor<f64>>,
            (|g, vs, s| {
                let sum = g.add(vs[0], vs[1])?;
                let dif = g.sub(vs[0], vs[1])?;
                let prod = g.mul(sum, dif)?;
                weighted_sum(g, g.scale(prod, 0.7)?, s)
            }) as Builder,
        ),
        (
            "exp/gelu",
            |s| alloc::vec![rand_tensor(&[2, 5], s, "x")],
            |g, vs, s| {
                let e = g.exp(vs[0])?;
                weighted_sum(g, g.gelu(e)?, s)
            },
        ),
        (
            "matmul",
            |s| {
                alloc::vec![
                    rand_tensor(&[3, 4], s, "a"),
                    rand_tensor(&[4, 2], s, "b"),
                    rand_tensor(&[5, 4], s, "c")
                ]
            },
            |g, vs, s| {
                let mm = g.matmul(vs[0], vs[1])?;
                let nt = g.matmul_nt(vs[0], vs[2])?;
                let l1 = weighted_sum(g, mm, s)?;
                let l2 = weighted_sum(g, nt, s.wrapping_add(1))?;
                g.add(l1, l2)
            },
        ),
        (
            "transpose",
            |s| alloc::vec![rand_tensor(&[3, 5], s, "x")],
            |g, vs, s| weighted_sum(g, g.transpose(vs[0])?, s),
        ),
        (
            "conv1d",
            |s| {
                alloc::vec![
                    rand_tensor(&[2, 17], s, "x"),
                    rand_tensor(&[3, 2, 5], s, "w"),
                    rand_tensor(&[3], s, "b")
                ]
            },
            |g, vs, s| weighted_sum(g, g.conv1d(vs[0], vs[1], vs[2], 3, 2, 1)?, s),
        ),
        (
            "group_norm",
            |s| {
                alloc::vec![
                    rand_tensor(&[4, 6], s, "x"),
                    rand_tensor(&[4], s, "g"),
                    rand_tensor(&[4], s, "b")
                ]
            },
            |g, vs, s| weighted_sum(g, g.group_norm(vs[0], vs[1], vs[2], 2, 1e-5)?, s),
        ),
        (
            "layer_norm",
            |s| {
                alloc::vec![
                    rand_tensor(&[3, 8], s, "x"),
                    rand_tensor(&[8], s, "g"),
                    rand_tensor(&[8], s, "b")
                ]
            },
            |g, vs, s| weighted_sum(g, g.layer_norm(vs[0], vs[1], vs[2], 1e-5)?, s),
        ),
        (
            "embedding_lookup",
            |s| alloc::vec![rand_tensor(&[6, 4], s, "t")],
            |g, vs, s| weighted_sum(g, g.row_gather(vs[0], &[2, 0, 2, 5])?, s),
        ),
        (
            "slice/concat",
            |s| alloc::vec![rand_tensor(&[4, 6], s, "x"), rand_tensor(&[4, 3], s, "y")],
            |g, vs, s| {
                let rs = g.row_slice(vs[0], 1, 3)?;
                let cs = g.col_slice(vs[0], 2, 5)?;
                let cc = g.concat_cols(&[cs, vs[1]])?;
                let l1 = weighted_sum(g, rs, s)?;
                let l2 = weighted_sum(g, cc, s.wrapping_add(2))?;
                g.add(l1, l2)
            },
        ),
        (
            "stack",
            |s| alloc::vec![rand_tensor(&[5], s, "v1"), rand_tensor(&[5], s, "v2")],
            |g, vs, s| {
                let m = g.stack_rows(&[vs[0], vs[1], vs[0]])?;
                let d1 = g.dot(vs[0], vs[1])?;
                let d2 = g.sum_all(vs[1])?;
                let sv = g.stack_scalars(&[d1, d2])?;
                let l1 = weighted_sum(g, m, s)?;
                let l2 = weighted_sum(g, sv, s.wrapping_add(3))?;
                g.add(l1, l2)
            },
        ),
        (
            "mean/sum reductions",
            |s| alloc::vec![rand_tensor(&[4, 3], s, "x")],
            |g, vs, s| {
                let mr = g.mean_rows(vs[0])?;
                let l1 = weighted_sum(g, mr, s)?;
                let l2 = g.mean_all(vs[0])?;
                let l3 = g.scale(g.sum_all(vs[0])?, 0.25)?;
                g.add(g.add(l1, l2)?, l3)
            },
        ),
        (
            "softmax/logsumexp",
            |s| alloc::vec![rand_tensor(&[3, 5], s, "x"), rand_tensor(&[7], s, "v")],
            |g, vs, s| {
                let sm = g.softmax_rows(vs[0])?;
                let lr = g.logsumexp_rows(vs[0])?;
                let la = g.logsumexp_all(vs[1])?;
                let l1 = weighted_sum(g, sm, s)?;
                let l2 = weighted_sum(g, lr, s.wrapping_add(4))?;
                g.add(g.add(l1, l2)?, la)
            },
        ),
        (
            "masked attention (causal and full)",
            |s| alloc::vec![rand_tensor(&[4, 4], s, "scores")],
            |g, vs, s| {
                let mut m = Tensor::zeros(alloc::vec![4, 4]);
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        m.data_mut()[i * 4 + j] = NEG_MASK;
                    }
                }
                let masked = g.add_mask(vs[0], &m)?;
                let full = g.softmax_rows(vs[0])?;
                let causal = g.softmax_rows(masked)?;
                let l1 = weighted_sum(g, causal, s)?;
                let l2 = weighted_sum(g, full, s.wrapping_add(5))?;
                g.add(l1, l2)
            },
        ),
        (
            "row_normalize/cosine",
            |s| {
                let mut a = rand_tensor(&[3, 4], s, "a");
                a.data_mut()[0] += 2.0;
                let mut u = rand_tensor(&[4], s, "u");
                u.data_mut()[0] += 2.0;
                let mut v = rand_tensor(&[4], s, "v");
                v.data_mut()[1] += 2.0;
                alloc::vec![a, u, v]
            },
            |g, vs, s| {
                let n = g.row_l2_normalize(vs[0])?;
                let c = g.cosine_sim(vs[1], vs[2])?;
                let l1 = weighted_sum(g, n, s)?;
                g.add(l1, c)
            },
        ),
        (
            "cross_entropy",
            |s| alloc::vec![rand_tensor(&[4, 6], s, "logits")],
            |g, vs, _| g.cross_entropy_logits(vs[0], &[1, IGNORE_INDEX, 5, 0], true),
        ),
        (
            "bce_logits",
            |s| alloc::vec![rand_tensor(&[3, 4], s, "logits")],
            |g, vs, s| {
                let mut r = rng::stream(s, "targets");
                let y = Tensor::from_vec(
                    alloc::vec![3, 4],
                    (0..12).map(|_| f64::from(u8::from(r.uniform() < 0.5))).collect(),
                )
                .expect("shape");
                g.bce_logits(vs[0], y)
            },
        ),
        (
            "broadcast/scalar_mul/pick",
            |s| {
                alloc::vec![
                    rand_tensor(&[3, 4], s, "x"),
                    rand_tensor(&[4], s, "bias"),
                    rand_tensor(&[], s, "s"),
                    rand_tensor(&[6], s, "v")
                ]
            },
            |g, vs, s| {
                let b = g.add_row_broadcast(vs[0], vs[1])?;
                let m = g.mul_scalar_var(b, vs[2])?;
                let p0 = g.pick(vs[3], 0)?;
                let p3 = g.pick(vs[3], 3)?;
                let st = g.stack_scalars(&[p0, p3])?;
                let l1 = weighted_sum(g, m, s)?;
                let l2 = g.logsumexp_all(st)?;
                g.add(l1, l2)
            },
        ),
    ];

    let mut out = Vec::with_capacity(cases.len());
    for (name, params_for, build) in cases {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let params = params_for(seed);
            let rep = grad_check(|g, vs| build(g, vs, seed), &params, 1e-5, samples, seed)?;
            if rep.max_rel_err > worst {
                worst = rep.max_rel_err;
            }
        }
        out.push((name, worst));
    }
    Ok(out)
}

/// Central-difference check of the full weighted objective on the tiny
/// configuration, at 64-bit. `samples` bounds the coordinates checked per
/// parameter tensor.
pub fn full_objective_grad_check(samples: usize, seed: u64) -> Result<GradCheckReport> {
    let vocab = synth::build_vocab();
    let mut cfg = ModelConfig::tiny(vocab.size());
    cfg.beat_tokens = 2;
    let model: Model<f64> = Model::init(&cfg, seed)?;
    let batch = tiny_batch(seed)?;
    let batch_refs: Vec<&Pair> = batch.iter().collect();
    let tensors: Vec<Tensor<f64>> =
        model.params.entries().iter().map(|e| e.value.clone()).collect();
    grad_check(
        |g, vs| {
            let f = Fwd::eval(g, vs);
            Ok(total_loss_batch(&model, &f, &batch_refs, LossParts::all())?.total)
        },
        &tensors,
        1e-5,
        samples,
        seed,
    )
}
