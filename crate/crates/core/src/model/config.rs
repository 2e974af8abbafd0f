//! Model and training hyperparameters.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and objective hyperparameters. `desk()` is the tuned
/// small-scale default; `paper_depths()` keeps the published layer counts
/// for structural tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared embedding width D (divisible by `heads`).
    pub dim: usize,
    pub heads: usize,
    /// Input leads; the first conv block's input channels.
    pub leads: usize,
    pub ecg_layers: usize,
    pub text_enc_layers: usize,
    pub text_dec_layers: usize,
    /// Conv feature extractor: one kernel/stride pair per block.
    pub conv_kernels: Vec<usize>,
    pub conv_strides: Vec<usize>,
    /// Positional-encoding conv kernel (stride 1, same padding).
    pub pos_conv_kernel: usize,
    /// Caption context queries L_q.
    pub caption_queries: usize,
    /// Learnable beat tokens N_B.
    pub beat_tokens: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
    /// Beat-sentence attention temperature (fixed).
    pub tau1: f64,
    /// Pair-similarity / local-contrast temperature (fixed).
    pub tau2: f64,
    /// Initial value of the learnable global temperature.
    pub tau_init: f64,
    /// Captioning loss weight.
    pub lambda_lm: f64,
    /// Local contrastive loss weight.
    pub lambda_local: f64,
    /// Sum token NLLs instead of averaging them (length-dependent weighting).
    #[serde(default)]
    pub lm_sum_reduction: bool,
    /// Alternate reading of the attention-weighted summary in which the
    /// sentence embedding is reweighted instead of the beats; kept for
    /// comparison only.
    #[serde(default)]
    pub literal_sentence_weighting: bool,
    /// Keep text-encoder weights fixed during multimodal training.
    #[serde(default)]
    pub freeze_text_encoder: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: minutes-scale CPU training.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            leads: 4,
            ecg_layers: 2,
            text_enc_layers: 2,
            text_dec_layers: 2,
            conv_kernels: alloc::vec![9, 9],
            conv_strides: alloc::vec![4, 4],
            pos_conv_kernel: 9,
            caption_queries: 16,
            beat_tokens: 10,
            vocab_size,
            max_text_len: 64,
            mlp_ratio: 4,
            dropout: 0.1,
            tau1: 0.25,
            tau2: 0.1,
            tau_init: 0.07,
            lambda_lm: 2.0,
            lambda_local: 0.2,
            lm_sum_reduction: false,
            literal_sentence_weighting: false,
            freeze_text_encoder: false,
        }
    }

    /// Published layer counts (width stays configurable); used by structural
    /// shape tests, not for desk training.
    pub fn paper_depths(vocab_size: usize) -> Self {
        ModelConfig {
            ecg_layers: 8,
            text_enc_layers: 12,
            text_dec_layers: 6,
            conv_kernels: alloc::vec![9, 7, 5, 3],
            conv_strides: alloc::vec![4, 2, 2, 2],
            caption_queries: 128,
            beat_tokens: 10,
            ..ModelConfig::desk(vocab_size)
        }
    }

    /// Minimal config for gradient checks: D=16, one layer everywhere.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            dim: 16,
            heads: 2,
            ecg_layers: 1,
            text_enc_layers: 1,
            text_dec_layers: 1,
            conv_kernels: alloc::vec![5],
            conv_strides: alloc::vec![4],
            pos_conv_kernel: 5,
            caption_queries: 4,
            beat_tokens: 2,
            vocab_size,
            max_text_len: 32,
            mlp_ratio: 2,
            dropout: 0.0,
            ..ModelConfig::desk(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim,
                self.heads
            )));
        }
        if self.beat_tokens == 0 || self.caption_queries == 0 {
            return Err(Error::invalid("beat_tokens and caption_queries must be >= 1"));
        }
        if self.tau1 <= 0.0 || self.tau2 <= 0.0 || self.tau_init <= 0.0 {
            return Err(Error::invalid("temperatures must be positive"));
        }
        if self.conv_kernels.len() != self.conv_strides.len() || self.conv_kernels.is_empty() {
            return Err(Error::invalid("conv kernels/strides must be non-empty and equal length"));
        }
        if self.vocab_size == 0 || self.max_text_len < 4 {
            return Err(Error::invalid("vocab_size must be > 0 and max_text_len >= 4"));
        }
        Ok(())
    }

    /// Product of conv strides: tokens per `cumulative_stride` input samples.
    pub fn cumulative_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }
}

/// Optimization-loop hyperparameters. Defaults follow the published
/// protocol: lr 2e-4, weight decay 0.2, cosine schedule, 100 epochs,
/// early stop after 5 epochs without validation improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Hard cap on optimizer steps (None = epochs decide).
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Warmup steps before the cosine decay (0 = none).
    #[serde(default)]
    pub warmup_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            weight_decay: 0.2,
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            max_steps: None,
            warmup_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2 (contrastive losses)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_defaults_match_published_values() {
        let c = ModelConfig::desk(70);
        assert_eq!(c.tau1, 0.25);
        assert_eq!(c.tau2, 0.1);
        assert_eq!(c.lambda_lm, 2.0);
        assert_eq!(c.lambda_local, 0.2);
        let t = TrainConfig::default();
        assert_eq!(t.lr, 2e-4);
        assert_eq!(t.weight_decay, 0.2);
        assert_eq!(t.patience, 5);
        assert_eq!(t.max_epochs, 100);
    }

    #[test]
    fn validation_catches_bad_configs() {
        let mut c = ModelConfig::desk(70);
        c.dim = 30; // not divisible by 4 heads
        assert!(c.validate().is_err());
        let mut c2 = ModelConfig::desk(70);
        c2.tau2 = 0.0;
        assert!(c2.validate().is_err());
        let mut t = TrainConfig::default();
        t.batch_size = 1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn paper_depths_preserved() {
        let c = ModelConfig::paper_depths(70);
        assert_eq!(c.ecg_layers, 8);
        assert_eq!(c.text_enc_layers, 12);
        assert_eq!(c.text_dec_layers, 6);
        assert_eq!(c.conv_kernels.len(), 4);
        assert_eq!(c.caption_queries, 128);
        assert!(c.validate().is_ok());
    }
}
