//! Subcommand implementations.

use std::path::{Path, PathBuf};

use ecgtext_core::eval::{
    self, generate_report, patient_recall, zero_shot_macro_auroc, zero_shot_scores, EvalResult,
    LabelMapping, PromptTable,
};
use ecgtext_core::losses::LossParts;
use ecgtext_core::synth::{self, make_corpus, make_patient_pairs, Corpus, CorpusSpec};
use ecgtext_core::train::{pretrain, text_mlm_pretrain};

use crate::checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint};
use crate::corpus_io::{parse_class_mix, read_corpus, write_corpus};
use crate::error::{CliError, CliResult};
use crate::logs::{write_embeddings_csv, write_results_jsonl, JsonlSink, ResultsCsv};
use crate::runspec::{load_config, ManifestWriter, RunConfig};

pub struct SynthArgs {
    pub n: usize,
    pub classes: String,
    pub seed: u64,
    pub out: PathBuf,
    pub corrupt_nan: f64,
    pub corrupt_short: f64,
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let class_mix = parse_class_mix(&args.classes)?;
    let spec = CorpusSpec {
        n: args.n,
        class_mix: class_mix.clone(),
        seed: args.seed,
        params: synth::SynthParams::default(),
        corrupt_nan_fraction: args.corrupt_nan,
        corrupt_short_fraction: args.corrupt_short,
    };
    let manifest = ManifestWriter::start(
        &args.out,
        "synth",
        vec![
            format!("--n {}", args.n),
            format!("--classes {}", args.classes),
            format!("--seed {}", args.seed),
        ],
        args.seed,
        serde_json::json!({
            "n": args.n,
            "classes": args.classes,
            "corrupt_nan": args.corrupt_nan,
            "corrupt_short": args.corrupt_short,
        }),
        String::new(),
        vec!["corpus_manifest.json".into(), "train/".into(), "val/".into(), "test/".into()],
    )?;
    let corpus = make_corpus(&spec)?;
    write_corpus(&args.out, &corpus, &class_mix, args.n)?;
    manifest.finish()?;
    println!(
        "corpus: {} train / {} val / {} test -> {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        args.out.display()
    );
    Ok(())
}

pub struct PretrainArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    pub mlm_init: Option<PathBuf>,
    pub losses: Option<String>,
    pub freeze_text: bool,
}

pub fn parse_losses(spec: &str) -> CliResult<LossParts> {
    let mut parts = LossParts { global: false, lm: false, local: false };
    for item in spec.split(',').filter(|s| !s.is_empty()) {
        match item.trim() {
            "g" | "global" => parts.global = true,
            "lm" => parts.lm = true,
            "local" => parts.local = true,
            other => return Err(CliError::usage(format!("unknown loss `{other}`"))),
        }
    }
    if !(parts.global || parts.lm || parts.local) {
        return Err(CliError::usage("at least one loss must be enabled"));
    }
    Ok(parts)
}

fn resolve_run_config(args_config: Option<&Path>, corpus: &Corpus) -> CliResult<RunConfig> {
    let mut cfg = load_config(corpus.vocab.size(), args_config)?;
    // the corpus dictates the input geometry
    cfg.model.vocab_size = corpus.vocab.size();
    cfg.model.leads = corpus.params.leads;
    Ok(cfg)
}

#[allow(clippy::too_many_lines)]
pub fn cmd_pretrain(args: &PretrainArgs) -> CliResult<()> {
    let corpus = read_corpus(&args.corpus)?;
    let mut cfg = resolve_run_config(args.config.as_deref(), &corpus)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    if args.freeze_text {
        cfg.model.freeze_text_encoder = true;
    }
    let parts = match &args.losses {
        Some(spec) => parse_losses(spec)?,
        None => LossParts::all(),
    };
    cfg.model.validate().map_err(CliError::from)?;
    cfg.train.validate().map_err(CliError::from)?;

    let hash = config_hash(&cfg.model);
    let manifest = ManifestWriter::start(
        &args.out,
        "pretrain",
        vec![format!("--corpus {}", args.corpus.display())],
        cfg.train.seed,
        serde_json::to_value(&cfg)?,
        hash.clone(),
        vec!["metrics.jsonl".into(), "checkpoints/best.bin".into(), "results.csv".into()],
    )?;

    let mlm_params = match &args.mlm_init {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::data(format!(
                    "--mlm-init checkpoint not found: {}",
                    path.display()
                )));
            }
            let ckpt = load_checkpoint(path)?;
            Some(ckpt.params)
        }
        None => None,
    };

    let mut sink = JsonlSink::create(&args.out.join("metrics.jsonl"))?;
    let outcome = pretrain(&corpus, &cfg.model, &cfg.train, parts, mlm_params.as_ref(), &mut sink)?;
    sink.finish()?;

    let ckpt = Checkpoint::from_model(
        &outcome.model,
        Some(&outcome.opt),
        outcome.steps,
        outcome.best_epoch as u32,
        outcome.best_val,
        cfg.train.seed,
    );
    save_checkpoint(&args.out.join("checkpoints/best.bin"), &ckpt)?;

    let mut csv = ResultsCsv::new();
    csv.push(EvalResult {
        task: "pretrain".into(),
        metric: "best_val_auroc".into(),
        value: outcome.best_val,
        n: corpus.val.len(),
        seed: cfg.train.seed,
        config_hash: hash.clone(),
    });
    csv.push(EvalResult {
        task: "pretrain".into(),
        metric: "steps".into(),
        value: outcome.steps as f64,
        n: corpus.train.len(),
        seed: cfg.train.seed,
        config_hash: hash,
    });
    csv.write(&args.out.join("results.csv"))?;
    manifest.finish()?;
    println!(
        "pretrain: {} steps, best val AUROC {:.4} (epoch {})",
        outcome.steps, outcome.best_val, outcome.best_epoch
    );
    Ok(())
}

pub struct MlmArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
}

pub fn cmd_mlm_pretrain(args: &MlmArgs) -> CliResult<()> {
    let corpus = read_corpus(&args.corpus)?;
    let mut cfg = resolve_run_config(args.config.as_deref(), &corpus)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    let hash = config_hash(&cfg.model);
    let manifest = ManifestWriter::start(
        &args.out,
        "mlm-pretrain",
        vec![format!("--corpus {}", args.corpus.display())],
        cfg.train.seed,
        serde_json::to_value(&cfg)?,
        hash,
        vec!["metrics.jsonl".into(), "checkpoints/mlm.bin".into()],
    )?;
    let reports: Vec<_> = corpus.train.iter().map(|p| p.report.clone()).collect();
    let mut sink = JsonlSink::create(&args.out.join("metrics.jsonl"))?;
    let outcome = text_mlm_pretrain(&reports, &cfg.model, &cfg.train, &mut sink)?;
    sink.finish()?;
    let ckpt = Checkpoint::from_model(
        &outcome.model,
        None,
        outcome.steps,
        0,
        outcome.final_loss,
        cfg.train.seed,
    );
    save_checkpoint(&args.out.join("checkpoints/mlm.bin"), &ckpt)?;
    manifest.finish()?;
    println!("mlm-pretrain: {} steps, final loss {:.4}", outcome.steps, outcome.final_loss);
    Ok(())
}

pub struct EvalArgs {
    pub task: String,
    pub ckpt: PathBuf,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub ratios: String,
    pub mapping: Option<PathBuf>,
    pub target_corpus: Option<PathBuf>,
    pub pairs: usize,
    pub max_len: usize,
    pub seed: u64,
    pub ensemble: bool,
    pub export_embeddings: bool,
}

#[allow(clippy::too_many_lines)]
pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = ckpt.build_model()?;
    let corpus = read_corpus(&args.corpus)?;
    let hash = ckpt.config_hash.clone();
    let manifest = ManifestWriter::start(
        &args.out,
        &format!("eval-{}", args.task),
        vec![
            format!("--ckpt {}", args.ckpt.display()),
            format!("--corpus {}", args.corpus.display()),
        ],
        args.seed,
        serde_json::to_value(&ckpt.config)?,
        hash.clone(),
        vec!["results.csv".into(), "results.jsonl".into()],
    )?;

    let mut csv = ResultsCsv::new();
    let row = |task: &str, metric: &str, value: f64, n: usize| EvalResult {
        task: task.into(),
        metric: metric.into(),
        value,
        n,
        seed: args.seed,
        config_hash: hash.clone(),
    };

    match args.task.as_str() {
        "zeroshot" => {
            let table = if args.ensemble {
                PromptTable::ensemble_for(&corpus.classes)
            } else {
                PromptTable::default_for(&corpus.classes)
            };
            let (macro_auc, skipped) =
                zero_shot_macro_auroc(&model, &corpus.test, &table, &corpus.vocab)?;
            for c in &skipped {
                eprintln!("note: class {c} skipped (single-class labels in split)");
            }
            csv.push(row("zeroshot", "macro_auroc", macro_auc, corpus.test.len()));
            // per-class rows
            let records: Vec<&_> = corpus.test.iter().map(|p| &p.record).collect();
            let scores = zero_shot_scores(&model, &records, &table, &corpus.vocab)?;
            for (ci, c) in table.classes().iter().enumerate() {
                let s: Vec<f64> = scores.iter().map(|r| r[ci]).collect();
                let l: Vec<bool> =
                    corpus.test.iter().map(|p| p.record.labels.contains(c)).collect();
                if let Ok(v) = eval::auroc(&s, &l) {
                    csv.push(row("zeroshot", &format!("auroc_{c}"), v, corpus.test.len()));
                }
            }
            if args.export_embeddings {
                let mut rows = Vec::new();
                for p in &corpus.test {
                    let (x_g, _, _) = model.embed_record(&p.record)?;
                    rows.push((
                        p.record.id.clone(),
                        p.record.label_strings(),
                        x_g.into_data(),
                    ));
                }
                write_embeddings_csv(&args.out.join("embeddings.csv"), &rows)?;
            }
        }
        "probe" => {
            let ratios: Vec<f64> = args
                .ratios
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| CliError::usage(format!("bad ratio `{s}`"))))
                .collect::<CliResult<_>>()?;
            let train = eval::ProbeData::from_pairs(&model, &corpus.train, &corpus.classes)?;
            let val = eval::ProbeData::from_pairs(&model, &corpus.val, &corpus.classes)?;
            let test = eval::ProbeData::from_pairs(&model, &corpus.test, &corpus.classes)?;
            for &ratio in &ratios {
                let auc = eval::linear_probe(&train, &val, &test, ratio, args.seed)?;
                csv.push(row("probe", &format!("auroc_ratio_{ratio}"), auc, corpus.test.len()));
            }
        }
        "transfer" => {
            let mapping_path = args
                .mapping
                .as_ref()
                .ok_or_else(|| CliError::usage("--task transfer requires --mapping FILE"))?;
            let mapping: LabelMapping = serde_json::from_str(
                &std::fs::read_to_string(mapping_path)
                    .map_err(|e| CliError::data(format!("{}: {e}", mapping_path.display())))?,
            )?;
            let target = match &args.target_corpus {
                Some(dir) => read_corpus(dir)?,
                None => return Err(CliError::usage("--task transfer requires --target-corpus DIR")),
            };
            let (auc, skipped) = eval::transfer_zero_shot(
                &model,
                &target.test,
                &corpus.classes,
                &mapping,
                &corpus.vocab,
            )?;
            for c in &skipped {
                eprintln!("note: class {c} skipped in transfer macro");
            }
            csv.push(row("transfer", "macro_auroc", auc, target.test.len()));
        }
        "retrieval" => {
            let mix: Vec<(Vec<synth::Code>, f64)> = corpus
                .classes
                .iter()
                .map(|&c| (vec![c], 1.0 / corpus.classes.len() as f64))
                .collect();
            let pairs = make_patient_pairs(args.pairs, &mix, &corpus.params, args.seed)?;
            let ks = [1usize, 5, 10];
            let recalls = patient_recall(&model, &pairs, &ks)?;
            for (k, r) in ks.iter().zip(&recalls) {
                csv.push(row("retrieval", &format!("recall_at_{k}"), *r, pairs.len()));
            }
        }
        "caption" => {
            let mut b1 = 0.0;
            let mut b4 = 0.0;
            let mut rl = 0.0;
            let mut exact = 0usize;
            for p in &corpus.test {
                let gen = generate_report(&model, &p.record, args.max_len)?;
                let gen_words: Vec<usize> = gen
                    .iter()
                    .copied()
                    .filter(|&t| !ecgtext_core::text::Vocab::is_special(t))
                    .collect();
                let ref_words = p.report.word_ids();
                b1 += eval::bleu(&gen_words, &[&ref_words], 1);
                b4 += eval::bleu(&gen_words, &[&ref_words], 4);
                rl += eval::rouge_l(&gen_words, &ref_words);
                if gen_words == ref_words {
                    exact += 1;
                }
            }
            let n = corpus.test.len();
            csv.push(row("caption", "bleu1", b1 / n as f64, n));
            csv.push(row("caption", "bleu4", b4 / n as f64, n));
            csv.push(row("caption", "rouge_l", rl / n as f64, n));
            csv.push(row("caption", "exact_match", exact as f64 / n as f64, n));
        }
        other => return Err(CliError::usage(format!("unknown eval task `{other}`"))),
    }

    csv.write(&args.out.join("results.csv"))?;
    write_results_jsonl(&args.out.join("results.jsonl"), csv.rows())?;
    manifest.finish()?;
    for r in csv.rows() {
        println!("{} {} = {}", r.task, r.metric, r.value);
    }
    Ok(())
}

pub struct AblateArgs {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub losses: String,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<u64>,
}

/// Train with a loss subset, then run zero-shot on the test split.
pub fn cmd_ablate(args: &AblateArgs) -> CliResult<()> {
    let parts = parse_losses(&args.losses)?;
    let corpus = read_corpus(&args.corpus)?;
    let mut cfg = resolve_run_config(args.config.as_deref(), &corpus)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if args.max_steps.is_some() {
        cfg.train.max_steps = args.max_steps;
    }
    let hash = config_hash(&cfg.model);
    let manifest = ManifestWriter::start(
        &args.out,
        "ablate",
        vec![format!("--losses {}", args.losses)],
        cfg.train.seed,
        serde_json::to_value(&cfg)?,
        hash.clone(),
        vec!["metrics.jsonl".into(), "results.csv".into()],
    )?;
    let mut sink = JsonlSink::create(&args.out.join("metrics.jsonl"))?;
    let outcome = pretrain(&corpus, &cfg.model, &cfg.train, parts, None, &mut sink)?;
    sink.finish()?;

    let table = PromptTable::default_for(&corpus.classes);
    let (auc, _) = zero_shot_macro_auroc(&outcome.model, &corpus.test, &table, &corpus.vocab)?;
    let task = format!("ablate-{}", args.losses.replace(',', "+"));
    let mut csv = ResultsCsv::new();
    csv.push(EvalResult {
        task: task.clone(),
        metric: "zeroshot_macro_auroc".into(),
        value: auc,
        n: corpus.test.len(),
        seed: cfg.train.seed,
        config_hash: hash,
    });
    csv.write(&args.out.join("results.csv"))?;
    let ckpt = Checkpoint::from_model(
        &outcome.model,
        Some(&outcome.opt),
        outcome.steps,
        outcome.best_epoch as u32,
        outcome.best_val,
        cfg.train.seed,
    );
    save_checkpoint(&args.out.join("checkpoints/best.bin"), &ckpt)?;
    manifest.finish()?;
    println!("{task}: zero-shot macro AUROC {auc:.4}");
    Ok(())
}
