//! The three-level objective: token captioning, beat-sentence local
//! alignment, and global contrastive, plus the MLM pre-stage loss.
//!
//! All losses are graph functions so gradients flow through every piece:
//! the beat-sentence attention weights, both projectors, the poolers, and
//! the learnable global temperature. Cross-pair similarities recompute the
//! attention for every (ECG i, report k) combination; ragged sentence
//! counts are handled per pair with no padding.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::model::{EcgVars, Model, TextVars};
use crate::nn::Fwd;
use crate::synth::Pair;
use crate::tensor::Scalar;
use crate::text::specials;

/// Per-step loss components, logged one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_lm: f64,
    pub l_local: f64,
    pub l_local_e2t: f64,
    pub l_local_t2e: f64,
    pub l_g: f64,
    pub l_g_e2t: f64,
    pub l_g_t2e: f64,
    pub total: f64,
    pub tau: f64,
}

/// Beat-sentence attention for one (ECG, report) pair.
pub struct AlignmentVars {
    /// [n_sent, N_B] row-stochastic attention weights.
    pub alpha: Var,
    /// [n_sent, D] attention-weighted beat embeddings.
    pub b_hat: Var,
}

/// Which loss terms to compute (ablations skip the excluded forward work).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossParts {
    pub global: bool,
    pub lm: bool,
    pub local: bool,
}

impl Default for LossParts {
    fn default() -> Self {
        LossParts { global: true, lm: true, local: true }
    }
}

impl LossParts {
    pub fn all() -> Self {
        Self::default()
    }
}

/// Sentence-over-beat attention: alpha[l][j] = softmax_j(cos(S(l), B(j)) / tau1),
/// b_hat[l] = sum_j alpha[l][j] * B(j).
///
/// With `literal_sentence_weighting` the summand uses the sentence embedding
/// instead of the beats (the alternate printed reading); since each alpha row
/// sums to one this collapses b_hat[l] to S(l) and is kept only for
/// comparison runs.
pub fn beat_sentence_attention<T: Scalar>(
    g: &Graph<T>,
    b_proj: Var,
    s_proj: Var,
    tau1: f64,
    literal_sentence_weighting: bool,
) -> Result<AlignmentVars> {
    let sn = g.row_l2_normalize(s_proj)?;
    let bn = g.row_l2_normalize(b_proj)?;
    let cos = g.matmul_nt(sn, bn)?; // [n_sent, N_B]
    let scaled = g.scale(cos, 1.0 / tau1)?;
    let alpha = g.softmax_rows(scaled)?;
    let b_hat = if literal_sentence_weighting {
        let n_b = g.shape_of(b_proj)[0];
        let ones = g.leaf(crate::tensor::Tensor::full(alloc::vec![n_b, 1], T::ONE))?;
        let row_sums = g.matmul(alpha, ones)?; // [n_sent, 1], == 1 up to rounding
        let n_sent = g.shape_of(s_proj)[0];
        let mut rows = Vec::with_capacity(n_sent);
        for l in 0..n_sent {
            let w = g.pick(row_sums, l)?;
            let srow = g.row_slice(s_proj, l, l + 1)?;
            rows.push(g.mul_scalar_var(srow, w)?);
        }
        g.stack_rows(&rows)?
    } else {
        g.matmul(alpha, b_proj)?
    };
    Ok(AlignmentVars { alpha, b_hat })
}

/// Pair similarity: Z = tau2 * log(sum_l exp(cos(b_hat[l], S(l)) / tau2)),
/// computed with a stable logsumexp.
pub fn pair_similarity<T: Scalar>(
    g: &Graph<T>,
    b_hat: Var,
    s_proj: Var,
    tau2: f64,
) -> Result<Var> {
    let bh = g.row_l2_normalize(b_hat)?;
    let sn = g.row_l2_normalize(s_proj)?;
    let prod = g.mul(bh, sn)?;
    let d = g.shape_of(prod)[1];
    let ones = g.leaf(crate::tensor::Tensor::full(alloc::vec![d, 1], T::ONE))?;
    let diag_cos = g.matmul(prod, ones)?; // [n_sent, 1] row-wise cosines
    let scaled = g.scale(diag_cos, 1.0 / tau2)?;
    let lse = g.logsumexp_all(scaled)?;
    g.scale(lse, tau2)
}

/// Symmetric cross-entropy over a [B, B] similarity matrix whose diagonal
/// holds the positives; logits are `z / tau2`.
pub fn local_contrastive_from_z<T: Scalar>(
    g: &Graph<T>,
    z: Var,
    tau2: f64,
) -> Result<(Var, Var, Var)> {
    let b = g.shape_of(z)[0];
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs batch size >= 2"));
    }
    let logits = g.scale(z, 1.0 / tau2)?;
    let targets: Vec<usize> = (0..b).collect();
    let e2t = g.cross_entropy_logits(logits, &targets, true)?;
    let logits_t = g.transpose(logits)?;
    let t2e = g.cross_entropy_logits(logits_t, &targets, true)?;
    let sum = g.add(e2t, t2e)?;
    let loss = g.scale(sum, 0.5)?;
    Ok((loss, e2t, t2e))
}

/// Local contrastive outputs, including the cross-pair traces.
pub struct LocalVars {
    pub loss: Var,
    pub e2t: Var,
    pub t2e: Var,
    /// [B, B] matrix of pair similarities Z(X_i, T_k).
    pub z: Var,
    /// traces[i][k]: attention of report k's sentences over ECG i's beats.
    pub traces: Vec<Vec<AlignmentVars>>,
}

/// Beat-sentence local contrastive loss over a batch. Recomputes the
/// attention for every cross pair (O(B^2 * n_sent * N_B)).
pub fn local_contrastive<T: Scalar>(
    g: &Graph<T>,
    ecgs: &[&EcgVars],
    texts: &[&TextVars],
    tau1: f64,
    tau2: f64,
    literal_sentence_weighting: bool,
) -> Result<LocalVars> {
    let b = ecgs.len();
    if b != texts.len() {
        return Err(Error::shape("local_contrastive", alloc::format!("{b} ECGs vs {} texts", texts.len())));
    }
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs batch size >= 2"));
    }
    let mut traces: Vec<Vec<AlignmentVars>> = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b);
    for ei in ecgs {
        let mut row_scalars = Vec::with_capacity(b);
        let mut row_traces = Vec::with_capacity(b);
        for tk in texts {
            let trace =
                beat_sentence_attention(g, ei.b_proj, tk.s_proj, tau1, literal_sentence_weighting)?;
            let z = pair_similarity(g, trace.b_hat, tk.s_proj, tau2)?;
            row_scalars.push(z);
            row_traces.push(trace);
        }
        rows.push(g.stack_scalars(&row_scalars)?);
        traces.push(row_traces);
    }
    let z = g.stack_rows(&rows)?;
    let (loss, e2t, t2e) = local_contrastive_from_z(g, z, tau2)?;
    Ok(LocalVars { loss, e2t, t2e, z, traces })
}

/// Global contrastive outputs.
pub struct GlobalVars {
    pub loss: Var,
    pub e2t: Var,
    pub t2e: Var,
    /// Current temperature value exp(log_tau), as a graph node.
    pub tau: Var,
}

/// Symmetric InfoNCE over global cosine similarities with a learnable
/// temperature: logits = cos(X_g, T_g) * exp(-log_tau).
pub fn global_contrastive<T: Scalar>(
    g: &Graph<T>,
    x_rows: Var,
    t_rows: Var,
    log_tau: Var,
) -> Result<GlobalVars> {
    let b = g.shape_of(x_rows)[0];
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs batch size >= 2"));
    }
    let xn = g.row_l2_normalize(x_rows)?;
    let tn = g.row_l2_normalize(t_rows)?;
    let cos = g.matmul_nt(xn, tn)?;
    let neg_log_tau = g.scale(log_tau, -1.0)?;
    let inv_tau = g.exp(neg_log_tau)?;
    let logits = g.mul_scalar_var(cos, inv_tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let e2t = g.cross_entropy_logits(logits, &targets, true)?;
    let logits_t = g.transpose(logits)?;
    let t2e = g.cross_entropy_logits(logits_t, &targets, true)?;
    let sum = g.add(e2t, t2e)?;
    let loss = g.scale(sum, 0.5)?;
    let tau = g.exp(log_tau)?;
    Ok(GlobalVars { loss, e2t, t2e, tau })
}

/// Token-level captioning loss from teacher-forced logits. PAD targets are
/// masked out; by default the per-token NLLs are averaged so the loss weight
/// transfers across report lengths (`sum_reduction` restores the summed
/// form).
pub fn lm_loss<T: Scalar>(
    g: &Graph<T>,
    logits: Var,
    targets: &[usize],
    sum_reduction: bool,
) -> Result<Var> {
    let mapped: Vec<usize> =
        targets.iter().map(|&t| if t == specials::PAD { IGNORE_INDEX } else { t }).collect();
    g.cross_entropy_logits(logits, &mapped, !sum_reduction)
}

/// MLM loss: mean NLL of the original tokens at the masked positions.
pub fn mlm_loss<T: Scalar>(g: &Graph<T>, logits: Var, originals: &[usize]) -> Result<Var> {
    if originals.is_empty() {
        return Err(Error::Empty { op: "mlm_loss" });
    }
    g.cross_entropy_logits(logits, originals, true)
}

/// All loss nodes for one batch, ready for `backward` and logging.
pub struct BatchLossVars {
    pub total: Var,
    pub l_lm: Option<Var>,
    pub local: Option<LocalVars>,
    pub global: Option<GlobalVars>,
    pub ecg_vars: Vec<EcgVars>,
    /// Text vars are only computed when a contrastive term needs them.
    pub text_vars: Vec<Option<TextVars>>,
}

/// Forward the full objective over a batch:
/// total = L_g + lambda_lm * L_LM + lambda_local * L_Local,
/// built in exactly that order. Excluded parts contribute a constant zero
/// and skip their forward computation.
pub fn total_loss_batch<T: Scalar>(
    model: &Model<T>,
    f: &Fwd<'_, T>,
    batch: &[&Pair],
    parts: LossParts,
) -> Result<BatchLossVars> {
    let g = f.g;
    if batch.is_empty() {
        return Err(Error::Empty { op: "total_loss_batch" });
    }
    if (parts.global || parts.local) && batch.len() < 2 {
        return Err(Error::invalid("contrastive loss needs batch size >= 2"));
    }

    let mut pairs = Vec::with_capacity(batch.len());
    for p in batch {
        let ecg = model.forward_ecg_record(f, &p.record)?;
        let text = if parts.global || parts.local {
            Some(model.forward_text(f, &p.report)?)
        } else {
            None
        };
        pairs.push((ecg, text));
    }

    // captioning
    let l_lm = if parts.lm {
        let mut per_sample = Vec::with_capacity(batch.len());
        for (p, (ecg, _)) in batch.iter().zip(&pairs) {
            let ids = &p.report.token_ids;
            let prefix = &ids[..ids.len() - 1];
            let targets = &ids[1..];
            let logits = model.caption_logits(f, ecg.e_tilde, prefix)?;
            per_sample.push(lm_loss(g, logits, targets, model.cfg.lm_sum_reduction)?);
        }
        let stacked = g.stack_scalars(&per_sample)?;
        Some(g.mean_all(stacked)?)
    } else {
        None
    };

    // local beat-sentence alignment
    let local = if parts.local {
        let ecg_refs: Vec<&EcgVars> = pairs.iter().map(|(e, _)| e).collect();
        let text_refs: Vec<&TextVars> =
            pairs.iter().map(|(_, t)| t.as_ref().expect("text computed")).collect();
        Some(local_contrastive(
            g,
            &ecg_refs,
            &text_refs,
            model.cfg.tau1,
            model.cfg.tau2,
            model.cfg.literal_sentence_weighting,
        )?)
    } else {
        None
    };

    // global InfoNCE
    let global = if parts.global {
        let x_rows: Vec<Var> = pairs.iter().map(|(e, _)| e.x_g).collect();
        let t_rows: Vec<Var> =
            pairs.iter().map(|(_, t)| t.as_ref().expect("text computed").t_g).collect();
        let x = g.stack_rows(&x_rows)?;
        let t = g.stack_rows(&t_rows)?;
        Some(global_contrastive(g, x, t, f.var(model.wiring.log_tau))?)
    } else {
        None
    };

    let zero = g.scalar(T::ZERO)?;
    let g_term = global.as_ref().map(|gv| gv.loss).unwrap_or(zero);
    let lm_term = match l_lm {
        Some(l) => g.scale(l, model.cfg.lambda_lm)?,
        None => zero,
    };
    let local_term = match &local {
        Some(lv) => g.scale(lv.loss, model.cfg.lambda_local)?,
        None => zero,
    };
    let partial = g.add(g_term, lm_term)?;
    let total = g.add(partial, local_term)?;

    let mut ecg_vars = Vec::with_capacity(pairs.len());
    let mut text_vars = Vec::with_capacity(pairs.len());
    for (e, t) in pairs {
        ecg_vars.push(e);
        text_vars.push(t);
    }
    Ok(BatchLossVars { total, l_lm, local, global, ecg_vars, text_vars })
}

impl BatchLossVars {
    /// Extract logged values; `fallback_tau` is used when the global term
    /// (and with it the temperature node) was skipped.
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>, fallback_tau: f64) -> Result<LossBreakdown> {
        let item = |v: Option<Var>| -> Result<f64> {
            Ok(match v {
                Some(v) => g.item(v)?.to_f64(),
                None => 0.0,
            })
        };
        Ok(LossBreakdown {
            l_lm: item(self.l_lm)?,
            l_local: item(self.local.as_ref().map(|l| l.loss))?,
            l_local_e2t: item(self.local.as_ref().map(|l| l.e2t))?,
            l_local_t2e: item(self.local.as_ref().map(|l| l.t2e))?,
            l_g: item(self.global.as_ref().map(|gv| gv.loss))?,
            l_g_e2t: item(self.global.as_ref().map(|gv| gv.e2t))?,
            l_g_t2e: item(self.global.as_ref().map(|gv| gv.t2e))?,
            total: g.item(self.total)?.to_f64(),
            tau: match &self.global {
                Some(gv) => g.item(gv.tau)?.to_f64(),
                None => fallback_tau,
            },
        })
    }
}
