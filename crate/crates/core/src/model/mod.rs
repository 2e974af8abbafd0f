//! The ECG encoder, text encoder, projectors, and caption decoder.
//!
//! ECG path: conv feature extractor (conv1d, dropout, per-channel group
//! norm, GELU per block) -> conv positional encoding -> pre-norm transformer
//! blocks -> token embeddings E. Two attention poolers read E: one with
//! `caption_queries` tokens for the decoder context, one with `beat_tokens`
//! tokens for the beat embeddings. The global ECG embedding is the mean of
//! the projected beat rows.
//!
//! Text path: token + learned position embeddings -> causal pre-norm blocks.
//! CLS sits at the final position so the causal mask lets it see the whole
//! report; sentence embeddings average word rows per sentence span; the
//! shared text projector maps both to the joint space.

pub mod config;

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    attention_pool, causal_mask, decoder_block, transformer_block, BlockP, ConvP, CrossBlockP,
    Fwd, LinearP, NormP, ParamBuilder, ParamSet, PId, PoolerP,
};
use crate::rng;
use crate::synth::EcgRecord;
use crate::tensor::{Scalar, Tensor};
use crate::text::{specials, TextReport};

pub use config::{ModelConfig, TrainConfig};

/// Parameter ids for every submodule.
#[derive(Clone, Debug)]
pub struct Wiring {
    pub conv_blocks: Vec<(ConvP, NormP)>,
    pub pos_conv: ConvP,
    pub enc_blocks: Vec<BlockP>,
    pub enc_final: NormP,
    pub caption_pooler: PoolerP,
    pub beat_pooler: PoolerP,
    pub tok_emb: PId,
    pub pos_emb: PId,
    pub txt_blocks: Vec<BlockP>,
    pub txt_final: NormP,
    pub proj_e: (LinearP, LinearP),
    pub proj_t: (LinearP, LinearP),
    pub dec_tok_emb: PId,
    pub dec_pos_emb: PId,
    pub dec_blocks: Vec<CrossBlockP>,
    pub dec_final: NormP,
    /// Output bias; the head weight is tied to `dec_tok_emb`.
    pub dec_head_bias: PId,
    /// MLM output bias; the head weight is tied to `tok_emb`.
    pub mlm_head_bias: PId,
    pub log_tau: PId,
}

/// A full model: config, parameters, and the wiring between them.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<T>,
    pub wiring: Wiring,
}

/// ECG-side forward outputs.
pub struct EcgVars {
    /// Token embeddings E, [L_t, D].
    pub e: Var,
    /// Pooled caption context, [L_q, D].
    pub e_tilde: Var,
    /// Beat embeddings before projection, [N_B, D].
    pub b: Var,
    /// Projected beat embeddings, [N_B, D].
    pub b_proj: Var,
    /// Global ECG embedding: mean of b_proj rows, [D].
    pub x_g: Var,
    /// Per-head pooler attention matrices (row-stochastic), for inspection.
    pub beat_attn: Vec<Var>,
    pub caption_attn: Vec<Var>,
}

/// Text-side forward outputs.
pub struct TextVars {
    /// Encoder outputs for every input position (report + trailing CLS).
    pub rows: Var,
    /// CLS output row, [1, D].
    pub cls: Var,
    /// Sentence embeddings (mean word rows per span), [n_sent, D].
    pub s: Var,
    /// Projected sentences, [n_sent, D].
    pub s_proj: Var,
    /// Global text embedding: projected CLS, [1, D].
    pub t_g: Var,
}

pub struct PairVars {
    pub ecg: EcgVars,
    pub text: TextVars,
}

/// Eval-mode embeddings extracted as plain tensors.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    pub e: Tensor<f32>,
    pub e_tilde: Tensor<f32>,
    pub b: Tensor<f32>,
    pub b_proj: Tensor<f32>,
    pub s: Tensor<f32>,
    pub s_proj: Tensor<f32>,
    pub x_g: Tensor<f32>,
    pub t_g: Tensor<f32>,
}

impl<T: Scalar> Model<T> {
    /// Build a randomly initialized model from the `init` stream of `seed`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let mut r = rng::stream(seed, "init");
        let mut b = ParamBuilder::new(&mut params, &mut r);
        let d = cfg.dim;

        let mut conv_blocks = Vec::new();
        let mut c_in = cfg.leads;
        for (i, (&k, _)) in cfg.conv_kernels.iter().zip(&cfg.conv_strides).enumerate() {
            let conv = b.conv(&alloc::format!("ecg.conv{i}"), c_in, d, k);
            let norm = b.group_norm(&alloc::format!("ecg.gn{i}"), d);
            conv_blocks.push((conv, norm));
            c_in = d;
        }
        let pos_conv = b.conv("ecg.pos_conv", d, d, cfg.pos_conv_kernel);
        let enc_blocks =
            (0..cfg.ecg_layers).map(|i| b.block(&alloc::format!("ecg.block{i}"), d, cfg.mlp_ratio)).collect();
        let enc_final = b.layer_norm("ecg.final_ln", d);
        let caption_pooler = b.pooler("ecg.caption_pool", cfg.caption_queries, d);
        let beat_pooler = b.pooler("ecg.beat_pool", cfg.beat_tokens, d);

        let tok_emb = b.embedding("text.tok_emb", cfg.vocab_size, d);
        let pos_emb = b.embedding("text.pos_emb", cfg.max_text_len, d);
        let txt_blocks = (0..cfg.text_enc_layers)
            .map(|i| b.block(&alloc::format!("text.block{i}"), d, cfg.mlp_ratio))
            .collect();
        let txt_final = b.layer_norm("text.final_ln", d);

        let proj_e = (b.linear("proj_e.fc1", d, d), b.linear("proj_e.fc2", d, d));
        let proj_t = (b.linear("proj_t.fc1", d, d), b.linear("proj_t.fc2", d, d));

        let dec_tok_emb = b.embedding("dec.tok_emb", cfg.vocab_size, d);
        let dec_pos_emb = b.embedding("dec.pos_emb", cfg.max_text_len, d);
        let dec_blocks = (0..cfg.text_dec_layers)
            .map(|i| b.cross_block(&alloc::format!("dec.block{i}"), d, cfg.mlp_ratio))
            .collect();
        let dec_final = b.layer_norm("dec.final_ln", d);
        let dec_head_bias = b.set.add("dec.head_bias", Tensor::zeros(alloc::vec![cfg.vocab_size]), false);
        let mlm_head_bias = b.set.add("mlm.head_bias", Tensor::zeros(alloc::vec![cfg.vocab_size]), false);

        let log_tau = b.scalar("loss.log_tau", libm::log(cfg.tau_init), true);

        let wiring = Wiring {
            conv_blocks,
            pos_conv,
            enc_blocks,
            enc_final,
            caption_pooler,
            beat_pooler,
            tok_emb,
            pos_emb,
            txt_blocks,
            txt_final,
            proj_e,
            proj_t,
            dec_tok_emb,
            dec_pos_emb,
            dec_blocks,
            dec_final,
            dec_head_bias,
            mlm_head_bias,
            log_tau,
        };
        Ok(Model { cfg: cfg.clone(), params, wiring })
    }

    /// Names of parameters held fixed during multimodal training.
    pub fn frozen_prefixes(&self) -> Vec<&'static str> {
        if self.cfg.freeze_text_encoder {
            alloc::vec!["text."]
        } else {
            Vec::new()
        }
    }

    /// Conv feature extractor: [leads, samples] -> [L_t, D] where
    /// L_t = samples / prod(strides) (floor).
    pub fn feature_extract(&self, f: &Fwd<'_, T>, signal: Var) -> Result<Var> {
        let len = f.g.shape_of(signal)[1];
        let need = self.cfg.cumulative_stride();
        if len < need {
            return Err(Error::TooShort { needed: need, got: len });
        }
        let mut x = signal;
        for (i, (conv, norm)) in self.wiring.conv_blocks.iter().enumerate() {
            let k = self.cfg.conv_kernels[i];
            let s = self.cfg.conv_strides[i];
            // total padding k-s keeps L_out == floor(L/s)
            let pad = k.saturating_sub(s);
            let pad_l = pad - pad / 2;
            let pad_r = pad / 2;
            x = f.g.conv1d(x, f.var(conv.w), f.var(conv.b), s, pad_l, pad_r)?;
            x = f.dropout(x)?;
            let channels = f.g.shape_of(x)[0];
            x = f.g.group_norm(x, f.var(norm.g), f.var(norm.b), channels, 1e-5)?;
            x = f.g.gelu(x)?;
        }
        f.g.transpose(x)
    }

    /// Positional conv encoding plus the transformer stack: [L_t, D] -> E.
    pub fn encode_features(&self, f: &Fwd<'_, T>, features: Var) -> Result<Var> {
        let g = f.g;
        let k = self.cfg.pos_conv_kernel;
        let xt = g.transpose(features)?;
        let pos = g.conv1d(xt, f.var(self.wiring.pos_conv.w), f.var(self.wiring.pos_conv.b), 1, (k - 1) / 2, (k - 1) / 2)?;
        let pos = g.gelu(pos)?;
        let pos = g.transpose(pos)?;
        let mut x = g.add(features, pos)?;
        for blk in &self.wiring.enc_blocks {
            x = transformer_block(f, blk, x, self.cfg.heads, None)?;
        }
        f.layer_norm(self.wiring.enc_final, x)
    }

    /// Full ECG side: signal matrix -> E, pooled contexts, beats, globals.
    pub fn forward_ecg(&self, f: &Fwd<'_, T>, signal: Var) -> Result<EcgVars> {
        let features = self.feature_extract(f, signal)?;
        let e = self.encode_features(f, features)?;
        let cap = attention_pool(f, &self.wiring.caption_pooler, e, self.cfg.heads)?;
        let beat = attention_pool(f, &self.wiring.beat_pooler, e, self.cfg.heads)?;
        let b_proj = self.project_ecg(f, beat.out)?;
        let x_g = f.g.mean_rows(b_proj)?;
        Ok(EcgVars {
            e,
            e_tilde: cap.out,
            b: beat.out,
            b_proj,
            x_g,
            beat_attn: beat.weights,
            caption_attn: cap.weights,
        })
    }

    pub fn forward_ecg_record(&self, f: &Fwd<'_, T>, record: &EcgRecord) -> Result<EcgVars> {
        let signal = f.g.leaf(record.to_matrix::<T>())?;
        self.forward_ecg(f, signal)
    }

    /// Two-layer MLP projector p_E.
    pub fn project_ecg(&self, f: &Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = f.linear(self.wiring.proj_e.0, x)?;
        let h = f.g.gelu(h)?;
        f.linear(self.wiring.proj_e.1, h)
    }

    /// Two-layer MLP projector p_T.
    pub fn project_text(&self, f: &Fwd<'_, T>, x: Var) -> Result<Var> {
        let h = f.linear(self.wiring.proj_t.0, x)?;
        let h = f.g.gelu(h)?;
        f.linear(self.wiring.proj_t.1, h)
    }

    /// Causal text encoder over raw token ids. Returns all output rows.
    pub fn encode_tokens(&self, f: &Fwd<'_, T>, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.max_text_len {
            return Err(Error::invalid(alloc::format!(
                "text length {} exceeds max_text_len {}",
                ids.len(),
                self.cfg.max_text_len
            )));
        }
        let g = f.g;
        let tok = g.row_gather(f.var(self.wiring.tok_emb), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.row_gather(f.var(self.wiring.pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = causal_mask::<T>(ids.len());
        for blk in &self.wiring.txt_blocks {
            x = transformer_block(f, blk, x, self.cfg.heads, Some(&mask))?;
        }
        f.layer_norm(self.wiring.txt_final, x)
    }

    /// Text side of a pair: encoder rows, CLS, sentence means, projections.
    pub fn forward_text(&self, f: &Fwd<'_, T>, report: &TextReport) -> Result<TextVars> {
        let ids = report.ids_with_cls();
        let rows = self.encode_tokens(f, &ids)?;
        let n = ids.len();
        let cls = f.g.row_slice(rows, n - 1, n)?;
        if report.sentence_spans.is_empty() {
            return Err(Error::Empty { op: "sentence_embed" });
        }
        let mut sents = Vec::with_capacity(report.sentence_spans.len());
        for &(start, end) in &report.sentence_spans {
            if start >= end {
                return Err(Error::Empty { op: "sentence_embed" });
            }
            let span = f.g.row_slice(rows, start, end)?;
            sents.push(f.g.mean_rows(span)?);
        }
        let s = f.g.stack_rows(&sents)?;
        let s_proj = self.project_text(f, s)?;
        let t_g = self.project_text(f, cls)?;
        Ok(TextVars { rows, cls, s, s_proj, t_g })
    }

    pub fn forward_pair(
        &self,
        f: &Fwd<'_, T>,
        record: &EcgRecord,
        report: &TextReport,
    ) -> Result<PairVars> {
        Ok(PairVars {
            ecg: self.forward_ecg_record(f, record)?,
            text: self.forward_text(f, report)?,
        })
    }

    /// Teacher-forced decoder: logits at row i predict prefix token i+1.
    pub fn caption_logits(&self, f: &Fwd<'_, T>, e_tilde: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.first() != Some(&specials::BOS) {
            return Err(Error::invalid("caption prefix must start with BOS"));
        }
        if prefix.len() > self.cfg.max_text_len {
            return Err(Error::invalid(alloc::format!(
                "prefix length {} exceeds max_text_len {}",
                prefix.len(),
                self.cfg.max_text_len
            )));
        }
        let g = f.g;
        let tok = g.row_gather(f.var(self.wiring.dec_tok_emb), prefix)?;
        let positions: Vec<usize> = (0..prefix.len()).collect();
        let pos = g.row_gather(f.var(self.wiring.dec_pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;
        let mask = causal_mask::<T>(prefix.len());
        for blk in &self.wiring.dec_blocks {
            x = decoder_block(f, blk, x, e_tilde, self.cfg.heads, &mask)?;
        }
        let x = f.layer_norm(self.wiring.dec_final, x)?;
        // output head tied to the decoder token embedding
        let logits = g.matmul_nt(x, f.var(self.wiring.dec_tok_emb))?;
        g.add_row_broadcast(logits, f.var(self.wiring.dec_head_bias))
    }

    /// MLM head logits over encoder rows at the masked positions.
    pub fn mlm_logits(&self, f: &Fwd<'_, T>, masked_ids: &[usize], positions: &[usize]) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::Empty { op: "mlm_logits" });
        }
        let rows = self.encode_tokens(f, masked_ids)?;
        let picked = {
            // gather the masked rows via row_slice composition
            let mut parts = Vec::with_capacity(positions.len());
            for &p in positions {
                let r = f.g.row_slice(rows, p, p + 1)?;
                parts.push(r);
            }
            f.g.stack_rows(&parts)?
        };
        let logits = f.g.matmul_nt(picked, f.var(self.wiring.tok_emb))?;
        f.g.add_row_broadcast(logits, f.var(self.wiring.mlm_head_bias))
    }
}

impl Model<f32> {
    /// Eval-mode embeddings for one pair, extracted as tensors.
    pub fn embed_pair(&self, record: &EcgRecord, report: &TextReport) -> Result<EmbeddingBundle> {
        let g: Graph<f32> = Graph::new();
        let vars = self.params.register(&g)?;
        let f = Fwd::eval(&g, &vars);
        let pv = self.forward_pair(&f, record, report)?;
        Ok(EmbeddingBundle {
            e: g.value(pv.ecg.e),
            e_tilde: g.value(pv.ecg.e_tilde),
            b: g.value(pv.ecg.b),
            b_proj: g.value(pv.ecg.b_proj),
            s: g.value(pv.text.s),
            s_proj: g.value(pv.text.s_proj),
            x_g: g.value(pv.ecg.x_g),
            t_g: g.value(pv.text.t_g),
        })
    }

    /// Eval-mode ECG-only globals and beats.
    pub fn embed_record(&self, record: &EcgRecord) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
        let g: Graph<f32> = Graph::new();
        let vars = self.params.register(&g)?;
        let f = Fwd::eval(&g, &vars);
        let ev = self.forward_ecg_record(&f, record)?;
        Ok((g.value(ev.x_g), g.value(ev.b), g.value(ev.e_tilde)))
    }

    /// Eval-mode global text embedding for a report.
    pub fn embed_text_global(&self, report: &TextReport) -> Result<Tensor<f32>> {
        let g: Graph<f32> = Graph::new();
        let vars = self.params.register(&g)?;
        let f = Fwd::eval(&g, &vars);
        let tv = self.forward_text(&f, report)?;
        Ok(g.value(tv.t_g))
    }
}
