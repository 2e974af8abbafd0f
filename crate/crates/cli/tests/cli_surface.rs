//! Black-box tests of the command-line surface: flags, exit codes, file
//! layout, and determinism of outputs.

use std::path::{Path, PathBuf};
use std::process::Command;

use ecgtext_cli::checkpoint::{save_checkpoint, Checkpoint};
use ecgtext_cli::corpus_io::{read_corpus, tree_hash};
use ecgtext_core::eval::{zero_shot_macro_auroc, PromptTable};
use ecgtext_core::model::{Model, ModelConfig};
use ecgtext_core::synth::{build_vocab, make_corpus, CorpusSpec};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ecgtext"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ecgtext-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn synth(dir: &Path, n: usize, seed: u64) {
    let st = bin()
        .args(["synth", "--n", &n.to_string(), "--seed", &seed.to_string()])
        .arg("--out")
        .arg(dir)
        .status()
        .unwrap();
    assert!(st.success());
}

#[test]
fn default_synth_gives_2000_pairs_split_80_10_10() {
    let dir = tmp("synth-default");
    let st = bin().args(["synth", "--seed", "0"]).arg("--out").arg(&dir).status().unwrap();
    assert!(st.success());
    let corpus = read_corpus(&dir).unwrap();
    assert_eq!(corpus.train.len(), 1600);
    assert_eq!(corpus.val.len(), 200);
    assert_eq!(corpus.test.len(), 200);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn repeated_seed_reproduces_identical_corpus_trees() {
    let (d1, d2) = (tmp("seed-a"), tmp("seed-b"));
    synth(&d1, 30, 7);
    synth(&d2, 30, 7);
    // the run manifest carries wall-clock time; everything else must match
    for sub in ["train", "val", "test"] {
        assert_eq!(
            tree_hash(&d1.join(sub)).unwrap(),
            tree_hash(&d2.join(sub)).unwrap(),
            "split {sub}"
        );
    }
    assert_eq!(
        std::fs::read(d1.join("corpus_manifest.json")).unwrap(),
        std::fs::read(d2.join("corpus_manifest.json")).unwrap()
    );
    let _ = std::fs::remove_dir_all(&d1);
    let _ = std::fs::remove_dir_all(&d2);
}

#[test]
fn invalid_class_mix_exits_2_with_message() {
    let out = bin()
        .args(["synth", "--classes", "NORM:0.5,AFIB:0.2", "--out", "/tmp/never-created"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("sum"), "stderr: {stderr}");
}

#[test]
fn unknown_class_exits_2() {
    let out = bin()
        .args(["synth", "--classes", "BOGUS", "--out", "/tmp/never-created-2"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_metrics_log_has_one_line_per_step_plus_epoch_summaries() {
    let corpus_dir = tmp("pt-corpus");
    synth(&corpus_dir, 40, 3);
    let run = tmp("pt-run");
    let st = bin()
        .args(["pretrain", "--seed", "1", "--epochs", "2"])
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(&run)
        .status()
        .unwrap();
    assert!(st.success());
    let log = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    // 32 train pairs, batch 16 -> 2 steps/epoch, 2 epochs -> 4 steps + 2 epochs
    let steps = lines.iter().filter(|l| l.contains("\"kind\":\"step\"")).count();
    let epochs = lines.iter().filter(|l| l.contains("\"kind\":\"epoch\"")).count();
    assert_eq!(steps, 4);
    assert_eq!(epochs, 2);
    assert_eq!(lines.len(), steps + epochs);
    assert!(run.join("checkpoints/best.bin").exists());
    assert!(run.join("manifest.json").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["wall_clock_s"].as_f64().unwrap() > 0.0);
    let _ = std::fs::remove_dir_all(&corpus_dir);
    let _ = std::fs::remove_dir_all(&run);
}

#[test]
fn zeroshot_on_untrained_checkpoint_is_near_chance() {
    // null check over 5 seeds: random-weight models must score close to 0.5
    let corpus = make_corpus(&CorpusSpec::default_mix(200, 17)).unwrap();
    let vocab = build_vocab();
    let table = PromptTable::default_for(&corpus.classes);
    let mut mean = 0.0;
    for seed in 0..5 {
        let model: Model<f32> = Model::init(&ModelConfig::desk(vocab.size()), seed).unwrap();
        let (auc, _) = zero_shot_macro_auroc(&model, &corpus.test, &table, &vocab).unwrap();
        mean += auc / 5.0;
    }
    assert!((0.35..=0.65).contains(&mean), "null zero-shot mean {mean}");
}

#[test]
fn eval_zeroshot_binary_emits_results_and_embeddings() {
    let corpus_dir = tmp("ev-corpus");
    synth(&corpus_dir, 40, 5);
    // untrained checkpoint written directly
    let corpus = read_corpus(&corpus_dir).unwrap();
    let model: Model<f32> = Model::init(&ModelConfig::desk(corpus.vocab.size()), 0).unwrap();
    let ckpt_path = tmp("ev-ckpt").join("random.bin");
    save_checkpoint(&ckpt_path, &Checkpoint::from_model(&model, None, 0, 0, f64::NAN, 0)).unwrap();

    let out_dir = tmp("ev-out");
    let st = bin()
        .args(["eval", "--task", "zeroshot", "--export-embeddings"])
        .arg("--ckpt")
        .arg(&ckpt_path)
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(csv.starts_with("task,metric,value,n,seed,config_hash"));
    assert!(csv.contains("zeroshot,macro_auroc"));
    assert!(out_dir.join("results.jsonl").exists());
    let emb = std::fs::read_to_string(out_dir.join("embeddings.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + corpus.test.len());
    for d in [corpus_dir, ckpt_path.parent().unwrap().to_path_buf(), out_dir] {
        let _ = std::fs::remove_dir_all(d);
    }
}

#[test]
fn probe_emits_one_row_per_ratio() {
    let corpus_dir = tmp("probe-corpus");
    synth(&corpus_dir, 60, 6);
    let corpus = read_corpus(&corpus_dir).unwrap();
    let model: Model<f32> = Model::init(&ModelConfig::desk(corpus.vocab.size()), 1).unwrap();
    let ckpt_path = tmp("probe-ckpt").join("random.bin");
    save_checkpoint(&ckpt_path, &Checkpoint::from_model(&model, None, 0, 0, f64::NAN, 1)).unwrap();
    let out_dir = tmp("probe-out");
    let st = bin()
        .args(["eval", "--task", "probe", "--ratios", "0.01,0.1,1.0"])
        .arg("--ckpt")
        .arg(&ckpt_path)
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let probe_rows = csv.lines().filter(|l| l.starts_with("probe,")).count();
    assert_eq!(probe_rows, 3);
    for d in [corpus_dir, ckpt_path.parent().unwrap().to_path_buf(), out_dir] {
        let _ = std::fs::remove_dir_all(d);
    }
}

#[test]
fn transfer_without_mapping_exits_2() {
    let corpus_dir = tmp("tr-corpus");
    synth(&corpus_dir, 40, 8);
    let corpus = read_corpus(&corpus_dir).unwrap();
    let model: Model<f32> = Model::init(&ModelConfig::desk(corpus.vocab.size()), 2).unwrap();
    let ckpt_path = tmp("tr-ckpt").join("random.bin");
    save_checkpoint(&ckpt_path, &Checkpoint::from_model(&model, None, 0, 0, f64::NAN, 2)).unwrap();
    let out = bin()
        .args(["eval", "--task", "transfer"])
        .arg("--ckpt")
        .arg(&ckpt_path)
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(tmp("tr-out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mapping"));
    let _ = std::fs::remove_dir_all(&corpus_dir);
    let _ = std::fs::remove_dir_all(ckpt_path.parent().unwrap());
}

#[test]
fn mlm_init_missing_checkpoint_exits_3() {
    let corpus_dir = tmp("mlm-corpus");
    synth(&corpus_dir, 40, 9);
    let out = bin()
        .args(["pretrain", "--max-steps", "2", "--mlm-init", "/tmp/does-not-exist.bin"])
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(tmp("mlm-out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let _ = std::fs::remove_dir_all(&corpus_dir);
}

#[test]
fn missing_corpus_is_data_error() {
    let out = bin()
        .args(["pretrain", "--corpus", "/tmp/definitely-missing-corpus", "--out", "/tmp/x-run"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_eval_task_exits_2() {
    let corpus_dir = tmp("task-corpus");
    synth(&corpus_dir, 40, 10);
    let corpus = read_corpus(&corpus_dir).unwrap();
    let model: Model<f32> = Model::init(&ModelConfig::desk(corpus.vocab.size()), 3).unwrap();
    let ckpt_path = tmp("task-ckpt").join("random.bin");
    save_checkpoint(&ckpt_path, &Checkpoint::from_model(&model, None, 0, 0, f64::NAN, 3)).unwrap();
    let out = bin()
        .args(["eval", "--task", "nonsense"])
        .arg("--ckpt")
        .arg(&ckpt_path)
        .arg("--corpus")
        .arg(&corpus_dir)
        .arg("--out")
        .arg(tmp("task-out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&corpus_dir);
    let _ = std::fs::remove_dir_all(ckpt_path.parent().unwrap());
}
