//! Acceptance suite: nine end-to-end criteria, one pass/fail line each.
//!
//! Heavy artifacts (the 2000-pair corpus and its three seeded training
//! runs, the 64-pair overfit run) are built once and shared between
//! criteria through OnceLocks. Tests are named a1..a9 so the default
//! alphabetical order builds artifacts in a sensible sequence.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use ecgtext_cli::commands::{cmd_eval, cmd_pretrain, cmd_synth, EvalArgs, PretrainArgs, SynthArgs};
use ecgtext_cli::corpus_io::read_corpus;
use ecgtext_core::eval::{self, recall_at_k, PromptTable};
use ecgtext_core::losses::LossParts;
use ecgtext_core::model::{Model, ModelConfig, TrainConfig};
use ecgtext_core::rng::{self, RngExt};
use ecgtext_core::synth::{build_vocab, make_corpus, Corpus, CorpusSpec};
use ecgtext_core::train::{pretrain, StepRecord, TrainSink};
use ecgtext_core::verify::{full_objective_grad_check, primitive_grad_checks};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ecgtext-acceptance-{}", std::process::id())).join(name);
    let _ = std::fs::create_dir_all(&dir);
    dir
}

fn pass(line: &str) {
    println!("{line}: PASS");
}

// ── Shared artifacts ─────────────────────────────────────────────────

const CORPUS_SEED: u64 = 100;
const RUN_SEEDS: [u64; 3] = [1, 2, 3];
const RUN_EPOCHS: usize = 3;

fn corpus_2000_dir() -> &'static PathBuf {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = scratch("corpus2000");
        cmd_synth(&SynthArgs {
            n: 2000,
            classes: "NORM,AFIB,LBBB,STE".into(),
            seed: CORPUS_SEED,
            out: dir.clone(),
            corrupt_nan: 0.0,
            corrupt_short: 0.0,
        })
        .expect("synth");
        dir
    })
}

struct FullRun {
    seed: u64,
    run_dir: PathBuf,
    eval_dir: PathBuf,
    zero_shot_auroc: f64,
    pretrain_csv: Vec<u8>,
    eval_csv: Vec<u8>,
}

struct FullRuns {
    runs: Vec<FullRun>,
    wall_s: f64,
}

fn run_full(seed: u64, tag: &str) -> FullRun {
    let corpus_dir = corpus_2000_dir().clone();
    let run_dir = scratch(&format!("run-{tag}-{seed}"));
    cmd_pretrain(&PretrainArgs {
        corpus: corpus_dir.clone(),
        out: run_dir.clone(),
        config: None,
        seed: Some(seed),
        epochs: Some(RUN_EPOCHS),
        batch_size: None,
        max_steps: None,
        mlm_init: None,
        losses: None,
        freeze_text: false,
    })
    .expect("pretrain");
    let eval_dir = scratch(&format!("eval-{tag}-{seed}"));
    cmd_eval(&EvalArgs {
        task: "zeroshot".into(),
        ckpt: run_dir.join("checkpoints/best.bin"),
        corpus: corpus_dir,
        out: eval_dir.clone(),
        ratios: String::new(),
        mapping: None,
        target_corpus: None,
        pairs: 0,
        max_len: 40,
        seed,
        ensemble: false,
        export_embeddings: false,
    })
    .expect("eval");
    let eval_csv = std::fs::read(eval_dir.join("results.csv")).unwrap();
    let text = String::from_utf8_lossy(&eval_csv).to_string();
    let auroc = text
        .lines()
        .find(|l| l.starts_with("zeroshot,macro_auroc,"))
        .and_then(|l| l.split(',').nth(2))
        .and_then(|v| v.parse::<f64>().ok())
        .expect("macro auroc row");
    FullRun {
        seed,
        run_dir: run_dir.clone(),
        eval_dir,
        zero_shot_auroc: auroc,
        pretrain_csv: std::fs::read(run_dir.join("results.csv")).unwrap(),
        eval_csv,
    }
}

fn full_runs() -> &'static FullRuns {
    static RUNS: OnceLock<FullRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let runs: Vec<FullRun> = RUN_SEEDS.iter().map(|&s| run_full(s, "a3")).collect();
        FullRuns { runs, wall_s: t0.elapsed().as_secs_f64() }
    })
}

struct Overfit {
    corpus: Corpus,
    model: Model<f32>,
    early_mean: f64,
    late_mean: f64,
    wall_s: f64,
}

fn overfit_run() -> &'static Overfit {
    static RUN: OnceLock<Overfit> = OnceLock::new();
    RUN.get_or_init(|| {
        // n = 80 gives the 64-pair training split
        let corpus = make_corpus(&CorpusSpec::default_mix(80, 8)).expect("corpus");
        assert_eq!(corpus.train.len(), 64);
        let vocab = build_vocab();
        let mc = ModelConfig::desk(vocab.size());
        let tc = TrainConfig {
            seed: 2,
            max_steps: Some(300),
            max_epochs: 100,
            patience: 100, // the criterion pins 300 steps; disable early stop
            ..TrainConfig::default()
        };
        struct Capture(Vec<f64>);
        impl TrainSink for Capture {
            fn on_step(&mut self, r: &StepRecord) {
                self.0.push(r.loss.total);
            }
        }
        let mut sink = Capture(Vec::new());
        let t0 = Instant::now();
        let out = pretrain(&corpus, &mc, &tc, LossParts::all(), None, &mut sink).expect("overfit");
        let wall_s = t0.elapsed().as_secs_f64();
        assert_eq!(out.steps, 300);
        let early_mean = sink.0[..5].iter().sum::<f64>() / 5.0;
        let late_mean = sink.0[295..].iter().sum::<f64>() / 5.0;
        // the overfit criteria concern the state after 300 steps, not the
        // best-validation snapshot
        let mut model = out.model;
        model.params = out.final_params;
        Overfit { corpus, model, early_mean, late_mean, wall_s }
    })
}

// ── Criteria ─────────────────────────────────────────────────────────

#[test]
fn a1_gradient_integrity() {
    let t0 = Instant::now();
    let prims = primitive_grad_checks(3, 16).expect("primitive checks");
    for (name, err) in &prims {
        assert!(*err <= 1e-5, "A1: primitive {name} rel err {err:.3e}");
    }
    let full = full_objective_grad_check(3, 0).expect("full objective check");
    assert!(full.max_rel_err <= 1e-5, "A1: full objective rel err {:.3e}", full.max_rel_err);
    let dt = t0.elapsed().as_secs_f64();
    assert!(dt < 120.0, "A1: runtime {dt:.1}s exceeds 2 min");
    pass(&format!(
        "A1 gradient integrity ({} primitives <= 1e-5, full objective {:.2e}, {dt:.0}s)",
        prims.len(),
        full.max_rel_err
    ));
}

#[test]
fn a2_overfit_loss_drop_and_retrieval() {
    let run = overfit_run();
    let drop = 1.0 - run.late_mean / run.early_mean;
    assert!(
        drop >= 0.70,
        "A2: loss dropped {:.1}% (early {:.3} -> late {:.3})",
        drop * 100.0,
        run.early_mean,
        run.late_mean
    );
    assert!(run.wall_s < 300.0, "A2: runtime {:.0}s exceeds 5 min", run.wall_s);

    // in-train retrieval: global cosine R@1 over the 64 pairs. Several
    // training pairs carry bitwise-identical report texts (template reuse),
    // so a retrieval counts as a hit when the top-ranked report's token ids
    // equal the partner's — ranking an identical text first IS retrieving
    // the right report.
    let mut xs = Vec::new();
    let mut ts = Vec::new();
    for p in &run.corpus.train {
        let b = run.model.embed_pair(&p.record, &p.report).expect("embed");
        xs.push(b.x_g.into_data());
        ts.push(b.t_g.into_data());
    }
    let cos = |a: &[f32], b: &[f32]| {
        let (mut d, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in a.iter().zip(b) {
            d += x as f64 * y as f64;
            na += x as f64 * x as f64;
            nb += y as f64 * y as f64;
        }
        d / (na.sqrt() * nb.sqrt())
    };
    let mut hits = 0usize;
    for (i, x) in xs.iter().enumerate() {
        let mut best = 0usize;
        let mut best_sim = f64::MIN;
        for (k, t) in ts.iter().enumerate() {
            let s = cos(x, t);
            if s > best_sim {
                best_sim = s;
                best = k;
            }
        }
        if run.corpus.train[best].report.token_ids == run.corpus.train[i].report.token_ids {
            hits += 1;
        }
    }
    let r1 = hits as f64 / xs.len() as f64;
    assert!(r1 >= 0.90, "A2: in-train R@1 {r1:.3} below 0.90");
    pass(&format!(
        "A2 overfit sanity (loss drop {:.0}%, R@1 {:.2}, {:.0}s)",
        drop * 100.0,
        r1,
        run.wall_s
    ));
}

#[test]
fn a2b_caption_overfit() {
    let run = overfit_run();
    let mut exact = 0usize;
    for p in &run.corpus.train {
        let gen = eval::generate_report(&run.model, &p.record, 40).expect("decode");
        if gen == p.report.token_ids[1..] {
            exact += 1;
        }
    }
    let frac = exact as f64 / run.corpus.train.len() as f64;
    assert!(frac >= 0.50, "A2b: only {exact}/64 training reports reproduced exactly");
    pass(&format!("A2b caption overfit ({exact}/64 reports exact)"));
}

#[test]
fn a3_zero_shot_learning_signal() {
    let runs = full_runs();
    let mean: f64 =
        runs.runs.iter().map(|r| r.zero_shot_auroc).sum::<f64>() / runs.runs.len() as f64;
    assert!(mean >= 0.85, "A3: 3-seed mean zero-shot macro AUROC {mean:.4} below 0.85");
    assert!(runs.wall_s < 900.0, "A3: runtime {:.0}s exceeds 15 min", runs.wall_s);
    let per_seed: Vec<String> =
        runs.runs.iter().map(|r| format!("seed {} {:.4}", r.seed, r.zero_shot_auroc)).collect();
    pass(&format!(
        "A3 zero-shot signal (mean {mean:.4}; {}; {:.0}s)",
        per_seed.join(", "),
        runs.wall_s
    ));
}

#[test]
fn a4_ablation_direction() {
    let full_mean: f64 = {
        let runs = full_runs();
        runs.runs.iter().map(|r| r.zero_shot_auroc).sum::<f64>() / runs.runs.len() as f64
    };
    let corpus_dir = corpus_2000_dir().clone();
    let corpus = read_corpus(&corpus_dir).expect("corpus");
    let vocab = build_vocab();
    let mc = ModelConfig::desk(vocab.size());
    let table = PromptTable::default_for(&corpus.classes);

    let ablate_mean = |parts: LossParts, tag: &str| -> f64 {
        let mut sum = 0.0;
        for &seed in &RUN_SEEDS {
            let tc = TrainConfig { seed, max_epochs: RUN_EPOCHS, ..TrainConfig::default() };
            let out = pretrain(&corpus, &mc, &tc, parts, None, &mut ecgtext_core::train::NullSink)
                .unwrap_or_else(|e| panic!("ablate {tag} seed {seed}: {e}"));
            let (auc, _) =
                eval::zero_shot_macro_auroc(&out.model, &corpus.test, &table, &corpus.vocab)
                    .expect("zeroshot");
            sum += auc;
        }
        sum / RUN_SEEDS.len() as f64
    };

    let g_only = ablate_mean(LossParts { global: true, lm: false, local: false }, "g");
    let lm_only = ablate_mean(LossParts { global: false, lm: true, local: false }, "lm");

    assert!(
        full_mean >= g_only - 0.01,
        "A4: full {full_mean:.4} worse than global-only {g_only:.4} by more than 1 point"
    );
    assert!(g_only >= lm_only, "A4: global-only {g_only:.4} below lm-only {lm_only:.4}");
    pass(&format!(
        "A4 ablation direction (full {full_mean:.4} vs g-only {g_only:.4} vs lm-only {lm_only:.4})"
    ));
}

#[test]
fn a5_oracle_equivalence() {
    // compact brute-force oracles, independent of the graph engine
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb)
    };
    let mut r = rng::stream(5, "a5");
    let rand_mat = |r: &mut rng::ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| r.range(-1.0, 1.0)).collect()).collect()
    };
    let beats = rand_mat(&mut r, 3, 6);
    let sents = rand_mat(&mut r, 2, 6);
    let (tau1, tau2) = (0.25, 0.1);

    // alpha / b_hat / Z oracles
    let alpha: Vec<Vec<f64>> = sents
        .iter()
        .map(|s| {
            let w: Vec<f64> = beats.iter().map(|b| (cos(s, b) / tau1).exp()).collect();
            let sum: f64 = w.iter().sum();
            w.into_iter().map(|x| x / sum).collect()
        })
        .collect();
    let b_hat: Vec<Vec<f64>> = alpha
        .iter()
        .map(|arow| {
            let mut out = vec![0.0; 6];
            for (a, b) in arow.iter().zip(&beats) {
                for (o, &v) in out.iter_mut().zip(b) {
                    *o += a * v;
                }
            }
            out
        })
        .collect();
    let z_oracle =
        tau2 * sents.iter().zip(&b_hat).map(|(s, bh)| (cos(bh, s) / tau2).exp()).sum::<f64>().ln();

    // graph at 32-bit against the 64-bit oracle (1e-5), and at 64-bit (1e-9)
    let check = |tol32: f64, tol64: f64| {
        use ecgtext_core::autodiff::Graph;
        use ecgtext_core::tensor::Tensor;
        let to64 = |m: &Vec<Vec<f64>>| {
            Tensor::matrix(m.len(), m[0].len(), m.iter().flatten().copied().collect()).unwrap()
        };
        let to32 = |m: &Vec<Vec<f64>>| {
            Tensor::matrix(m.len(), m[0].len(), m.iter().flatten().map(|&v| v as f32).collect())
                .unwrap()
        };
        let g64: Graph<f64> = Graph::new();
        let b64 = g64.leaf(to64(&beats)).unwrap();
        let s64 = g64.leaf(to64(&sents)).unwrap();
        let t64 = ecgtext_core::losses::beat_sentence_attention(&g64, b64, s64, tau1, false).unwrap();
        let av = g64.value(t64.alpha);
        for (l, arow) in alpha.iter().enumerate() {
            for (j, &a) in arow.iter().enumerate() {
                assert!((av.at(l, j) - a).abs() < tol64, "A5: alpha[{l}][{j}]");
            }
        }
        let bv = g64.value(t64.b_hat);
        for (l, brow) in b_hat.iter().enumerate() {
            for (j, &b) in brow.iter().enumerate() {
                assert!((bv.at(l, j) - b).abs() < tol64, "A5: b_hat[{l}][{j}]");
            }
        }
        let z64 = ecgtext_core::losses::pair_similarity(&g64, t64.b_hat, s64, tau2).unwrap();
        assert!((g64.item(z64).unwrap() - z_oracle).abs() < tol64, "A5: Z at 64-bit");

        let g32: Graph<f32> = Graph::new();
        let b32 = g32.leaf(to32(&beats)).unwrap();
        let s32 = g32.leaf(to32(&sents)).unwrap();
        let t32 = ecgtext_core::losses::beat_sentence_attention(&g32, b32, s32, tau1, false).unwrap();
        let z32 = ecgtext_core::losses::pair_similarity(&g32, t32.b_hat, s32, tau2).unwrap();
        assert!((g32.item(z32).unwrap() as f64 - z_oracle).abs() < tol32, "A5: Z at 32-bit");
    };
    check(1e-5, 1e-9);

    // symmetric contrastive CE oracle (local + global share the form)
    {
        use ecgtext_core::autodiff::Graph;
        use ecgtext_core::tensor::Tensor;
        let z = rand_mat(&mut r, 4, 4);
        let ce_row = |row: &[f64], t: usize| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let logits: Vec<Vec<f64>> =
            z.iter().map(|row| row.iter().map(|v| v / tau2).collect()).collect();
        let mut e2t = 0.0;
        let mut t2e = 0.0;
        for i in 0..4 {
            e2t += ce_row(&logits[i], i) / 4.0;
            let col: Vec<f64> = (0..4).map(|k| logits[k][i]).collect();
            t2e += ce_row(&col, i) / 4.0;
        }
        let oracle = 0.5 * (e2t + t2e);
        let g: Graph<f64> = Graph::new();
        let zv = g
            .leaf(Tensor::matrix(4, 4, z.iter().flatten().copied().collect()).unwrap())
            .unwrap();
        let (loss, _, _) = ecgtext_core::losses::local_contrastive_from_z(&g, zv, tau2).unwrap();
        assert!((g.item(loss).unwrap() - oracle).abs() < 1e-9, "A5: local CE");
    }

    // LM loss oracle
    {
        use ecgtext_core::autodiff::Graph;
        use ecgtext_core::tensor::Tensor;
        let logits = rand_mat(&mut r, 3, 9);
        let targets = [3usize, 6, 8];
        let ce_row = |row: &[f64], t: usize| {
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let oracle: f64 =
            logits.iter().zip(&targets).map(|(row, &t)| ce_row(row, t)).sum::<f64>() / 3.0;
        let g: Graph<f64> = Graph::new();
        let lv = g
            .leaf(Tensor::matrix(3, 9, logits.iter().flatten().copied().collect()).unwrap())
            .unwrap();
        let loss = ecgtext_core::losses::lm_loss(&g, lv, &targets, false).unwrap();
        assert!((g.item(loss).unwrap() - oracle).abs() < 1e-12, "A5: LM loss");
    }

    // AUROC: exact match with brute-force pair counting on n <= 50
    for seed in 0..10u64 {
        let mut rr = rng::stream(seed, "a5-auroc");
        let n = 4 + rr.below(46);
        let scores: Vec<f64> = (0..n).map(|_| (rr.below(8) as f64) / 8.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| rr.uniform() < 0.5).collect();
        let n_pos = labels.iter().filter(|&&l| l).count();
        if n_pos == 0 || n_pos == n {
            continue;
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..n {
            if !labels[i] {
                continue;
            }
            for j in 0..n {
                if labels[j] {
                    continue;
                }
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert_eq!(eval::auroc(&scores, &labels).unwrap(), num / den, "A5: AUROC seed {seed}");
    }

    // BLEU / ROUGE hand values
    assert!((eval::bleu(&[1, 2, 3], &[&[1, 9, 3]], 1) - 2.0 / 3.0).abs() < 1e-12);
    let c = [1usize, 2, 3, 4];
    let refr = [1usize, 3, 2, 4];
    let b2 = 1.44f64;
    let expect = (1.0 + b2) * 0.75 * 0.75 / (0.75 + b2 * 0.75);
    assert!((eval::rouge_l(&c, &refr) - expect).abs() < 1e-12);
    assert!((eval::bleu(&c, &[&c[..]], 4) - 1.0).abs() < 1e-12);

    pass("A5 oracle equivalence (alpha, b_hat, Z, L_local, L_LM, AUROC, BLEU, ROUGE-L)");
}

#[test]
fn a6_linear_probe_ratio_trend() {
    let runs = full_runs();
    let corpus = read_corpus(corpus_2000_dir()).expect("corpus");
    let mut means = [0.0f64; 3];
    let ratios = [0.01, 0.1, 1.0];
    for run in &runs.runs {
        let ckpt =
            ecgtext_cli::checkpoint::load_checkpoint(&run.run_dir.join("checkpoints/best.bin"))
                .expect("ckpt");
        let model = ckpt.build_model().expect("model");
        let train = eval::ProbeData::from_pairs(&model, &corpus.train, &corpus.classes).unwrap();
        let val = eval::ProbeData::from_pairs(&model, &corpus.val, &corpus.classes).unwrap();
        let test = eval::ProbeData::from_pairs(&model, &corpus.test, &corpus.classes).unwrap();
        for (i, &ratio) in ratios.iter().enumerate() {
            let auc = eval::linear_probe(&train, &val, &test, ratio, run.seed).unwrap();
            means[i] += auc / runs.runs.len() as f64;
        }
    }
    assert!(
        means[1] >= means[0] - 0.02,
        "A6: AUROC(10%) {:.4} not within 0.02 of AUROC(1%) {:.4}",
        means[1],
        means[0]
    );
    assert!(
        means[2] >= means[1] - 0.02,
        "A6: AUROC(100%) {:.4} not within 0.02 of AUROC(10%) {:.4}",
        means[2],
        means[1]
    );
    pass(&format!(
        "A6 probe ratio trend (1% {:.4} -> 10% {:.4} -> 100% {:.4})",
        means[0], means[1], means[2]
    ));
}

#[test]
fn a7_hyperparameter_fidelity() {
    let vocab = build_vocab();
    // built-in defaults
    let mc = ModelConfig::desk(vocab.size());
    let tc = TrainConfig::default();
    // and the same values after a round trip through the config loader
    let loaded = ecgtext_cli::runspec::load_config(vocab.size(), None).expect("defaults");
    for (name, got, want) in [
        ("tau1", mc.tau1, 0.25),
        ("tau2", mc.tau2, 0.1),
        ("lambda_lm", mc.lambda_lm, 2.0),
        ("lambda_local", mc.lambda_local, 0.2),
        ("lr", tc.lr, 2e-4),
        ("weight_decay", tc.weight_decay, 0.2),
        ("patience", tc.patience as f64, 5.0),
        ("loaded tau1", loaded.model.tau1, 0.25),
        ("loaded tau2", loaded.model.tau2, 0.1),
        ("loaded lambda_lm", loaded.model.lambda_lm, 2.0),
        ("loaded lambda_local", loaded.model.lambda_local, 0.2),
        ("loaded lr", loaded.train.lr, 2e-4),
        ("loaded weight_decay", loaded.train.weight_decay, 0.2),
        ("loaded patience", loaded.train.patience as f64, 5.0),
    ] {
        assert_eq!(got, want, "A7: {name} = {got}, expected {want}");
    }
    pass("A7 hyperparameter fidelity (tau1 0.25, tau2 0.1, lambda 2/0.2, lr 2e-4, wd 0.2, patience 5)");
}

#[test]
fn a8_determinism_byte_for_byte() {
    let runs = full_runs();
    let first = &runs.runs[0];
    let rerun = run_full(first.seed, "a8-rerun");
    assert_eq!(
        first.pretrain_csv, rerun.pretrain_csv,
        "A8: pretrain results.csv differs between identical runs"
    );
    assert_eq!(
        first.eval_csv, rerun.eval_csv,
        "A8: eval results.csv differs between identical runs"
    );
    // metrics logs carry no timestamps either; they must match too
    let m1 = std::fs::read(first.run_dir.join("metrics.jsonl")).unwrap();
    let m2 = std::fs::read(rerun.run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(m1, m2, "A8: metrics.jsonl differs between identical runs");
    assert_eq!(first.zero_shot_auroc, rerun.zero_shot_auroc);
    pass("A8 determinism (identical results.csv and metrics.jsonl bytes)");
}

#[test]
fn a9_retrieval_monotonicity_and_null() {
    // monotone on arbitrary random inputs
    for seed in 0..5u64 {
        let mut r = rng::stream(seed, "a9-mono");
        let n = 3 + r.below(30);
        let q: Vec<Vec<f32>> =
            (0..n).map(|_| (0..8).map(|_| r.normal() as f32).collect()).collect();
        let c: Vec<Vec<f32>> =
            (0..n).map(|_| (0..8).map(|_| r.normal() as f32).collect()).collect();
        let ks: Vec<usize> = vec![1, 5.min(n), 10.min(n)];
        let rec = recall_at_k(&q, &c, &ks).unwrap();
        assert!(rec[0] <= rec[1] + 1e-12 && rec[1] <= rec[2] + 1e-12, "A9: monotonicity");
    }
    // null band: 100 random patients, 5 seeds, R@1 in [0, 0.05]
    let mut worst: f64 = 0.0;
    for seed in 0..5u64 {
        let mut r = rng::stream(seed, "a9-null");
        let q: Vec<Vec<f32>> =
            (0..100).map(|_| (0..16).map(|_| r.normal() as f32).collect()).collect();
        let c: Vec<Vec<f32>> =
            (0..100).map(|_| (0..16).map(|_| r.normal() as f32).collect()).collect();
        let rec = recall_at_k(&q, &c, &[1]).unwrap();
        worst = worst.max(rec[0]);
    }
    assert!(worst <= 0.05, "A9: random-embedding R@1 {worst} outside null band");
    pass(&format!("A9 retrieval monotonicity and null (worst null R@1 {worst:.3})"));
}
