//! Command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ecgtext_cli::commands::{
    cmd_ablate, cmd_eval, cmd_mlm_pretrain, cmd_pretrain, cmd_synth, AblateArgs, EvalArgs, MlmArgs,
    PretrainArgs, SynthArgs,
};

#[derive(Parser)]
#[command(
    name = "ecgtext",
    version,
    about = "Multi-scale ECG-text pretraining on synthetic corpora: corpus synthesis, training, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a paired ECG/report corpus.
    Synth {
        /// Number of pairs before the 80/10/10 split.
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// Class mix, e.g. "NORM,AFIB,LBBB,STE" or "NORM:0.4,AFIB:0.6".
        #[arg(long, default_value = "NORM,AFIB,LBBB,STE")]
        classes: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of records corrupted with a NaN sample (filter tests).
        #[arg(long, default_value_t = 0.0)]
        corrupt_nan: f64,
        /// Fraction of reports truncated below four tokens (filter tests).
        #[arg(long, default_value_t = 0.0)]
        corrupt_short: f64,
    },
    /// Train the multimodal objective on a corpus.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON config file overriding the built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Hard cap on optimizer steps.
        #[arg(long)]
        max_steps: Option<u64>,
        /// Initialize the text encoder from an MLM checkpoint.
        #[arg(long)]
        mlm_init: Option<PathBuf>,
        /// Keep the text encoder frozen during multimodal training.
        #[arg(long, default_value_t = false)]
        freeze_text: bool,
    },
    /// Text-only masked-language-model pre-stage.
    MlmPretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Run a downstream evaluation task against a checkpoint.
    Eval {
        /// zeroshot | probe | transfer | retrieval | caption
        #[arg(long)]
        task: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probe training-data ratios.
        #[arg(long, default_value = "0.01,0.1,1.0")]
        ratios: String,
        /// Label mapping JSON for transfer evaluation.
        #[arg(long)]
        mapping: Option<PathBuf>,
        /// Target corpus for transfer evaluation.
        #[arg(long)]
        target_corpus: Option<PathBuf>,
        /// Patient count for retrieval.
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Maximum generated report length.
        #[arg(long, default_value_t = 40)]
        max_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Average prompt ensembles instead of a single prompt per class.
        #[arg(long, default_value_t = false)]
        ensemble: bool,
        /// Export per-record global embeddings to embeddings.csv.
        #[arg(long, default_value_t = false)]
        export_embeddings: bool,
    },
    /// Train with a loss subset and report zero-shot AUROC.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Subset of {g, lm, local}, e.g. "g" or "g,lm,local".
        #[arg(long)]
        losses: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth { n, classes, seed, out, corrupt_nan, corrupt_short } => cmd_synth(&SynthArgs {
            n,
            classes,
            seed,
            out,
            corrupt_nan,
            corrupt_short,
        }),
        Cmd::Pretrain {
            corpus,
            out,
            config,
            seed,
            epochs,
            batch_size,
            max_steps,
            mlm_init,
            freeze_text,
        } => cmd_pretrain(&PretrainArgs {
            corpus,
            out,
            config,
            seed,
            epochs,
            batch_size,
            max_steps,
            mlm_init,
            losses: None,
            freeze_text,
        }),
        Cmd::MlmPretrain { corpus, out, config, seed, epochs, max_steps } => {
            cmd_mlm_pretrain(&MlmArgs { corpus, out, config, seed, epochs, max_steps })
        }
        Cmd::Eval {
            task,
            ckpt,
            corpus,
            out,
            ratios,
            mapping,
            target_corpus,
            pairs,
            max_len,
            seed,
            ensemble,
            export_embeddings,
        } => cmd_eval(&EvalArgs {
            task,
            ckpt,
            corpus,
            out,
            ratios,
            mapping,
            target_corpus,
            pairs,
            max_len,
            seed,
            ensemble,
            export_embeddings,
        }),
        Cmd::Ablate { corpus, out, losses, config, seed, epochs, max_steps } => {
            cmd_ablate(&AblateArgs { corpus, out, losses, config, seed, epochs, max_steps })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
