//! Downstream evaluation: AUROC, zero-shot classification, linear probing,
//! transfer label mapping, patient retrieval, greedy report generation, and
//! the BLEU / ROUGE-L text metrics.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{Fwd, ParamBuilder, ParamSet};
use crate::optim::AdamW;
use crate::rng::{self, RngExt};
use crate::synth::{Code, EcgRecord, Pair};
use crate::tensor::Tensor;
use crate::text::{specials, tokenize, TextReport, Vocab};

/// One metric row for the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

// ── AUROC ────────────────────────────────────────────────────────────

/// Mann-Whitney AUROC with the tie convention: ties contribute one half.
/// Errors when either class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auroc", alloc::format!("{} vs {}", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auroc undefined without both classes"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(core::cmp::Ordering::Equal));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro average over classes; single-class labels are skipped and returned.
pub fn macro_auroc(per_class: &[(Code, Vec<f64>, Vec<bool>)]) -> Result<(f64, Vec<Code>)> {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut skipped = Vec::new();
    for (code, scores, labels) in per_class {
        match auroc(scores, labels) {
            Ok(v) => {
                sum += v;
                n += 1;
            }
            Err(_) => skipped.push(*code),
        }
    }
    if n == 0 {
        return Err(Error::invalid("no class had both positives and negatives"));
    }
    Ok((sum / n as f64, skipped))
}

// ── Zero-shot classification ─────────────────────────────────────────

/// Fixed class prompts; every prompt passes the four-token filter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTable {
    entries: Vec<(Code, Vec<String>)>,
}

impl PromptTable {
    fn base_prompt(code: Code) -> &'static str {
        match code {
            Code::Norm => "normal sinus rhythm normal ecg",
            Code::Afib => "atrial fibrillation irregular rhythm abnormal ecg",
            Code::Lbbb => "left bundle branch block abnormal ecg",
            Code::Ste => "st segment elevation abnormal ecg",
            Code::Tachy => "sinus tachycardia rapid rate abnormal ecg",
            Code::Brady => "sinus bradycardia slow rate abnormal ecg",
            Code::Pvc => "premature ventricular complexes abnormal ecg",
            Code::Lowvolt => "low voltage qrs abnormal ecg",
        }
    }

    /// One prompt per class.
    pub fn default_for(classes: &[Code]) -> Self {
        PromptTable {
            entries: classes
                .iter()
                .map(|&c| (c, alloc::vec![Self::base_prompt(c).to_string()]))
                .collect(),
        }
    }

    /// Ensemble variant: the base prompt plus the class template sentences.
    pub fn ensemble_for(classes: &[Code]) -> Self {
        PromptTable {
            entries: classes
                .iter()
                .map(|&c| {
                    let mut prompts = alloc::vec![Self::base_prompt(c).to_string()];
                    for t in c.templates() {
                        prompts.push(crate::text::normalize(t));
                    }
                    (c, prompts)
                })
                .collect(),
        }
    }

    pub fn classes(&self) -> Vec<Code> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }

    pub fn prompts(&self, code: Code) -> Option<&[String]> {
        self.entries.iter().find(|(c, _)| *c == code).map(|(_, p)| p.as_slice())
    }

    /// Tokenized prompt reports; each must clear the four-token floor.
    pub fn reports(&self, vocab: &Vocab) -> Result<Vec<(Code, Vec<TextReport>)>> {
        self.entries
            .iter()
            .map(|(c, prompts)| {
                let reports: Vec<TextReport> =
                    prompts.iter().map(|p| tokenize(p, vocab)).collect();
                for r in &reports {
                    if r.word_count() < 4 {
                        return Err(Error::invalid(alloc::format!(
                            "prompt for {c} has fewer than four tokens"
                        )));
                    }
                }
                Ok((*c, reports))
            })
            .collect()
    }
}

fn cos_f32(a: &[f32], b: &[f32]) -> f64 {
    let mut d = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        d += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    d / (libm::sqrt(na) * libm::sqrt(nb)).max(1e-12)
}

/// Per-record, per-class cosine scores between the global ECG embedding and
/// the encoded prompts (prompts encoded once per table; ensembles average).
pub fn zero_shot_scores(
    model: &Model<f32>,
    records: &[&EcgRecord],
    table: &PromptTable,
    vocab: &Vocab,
) -> Result<Vec<Vec<f64>>> {
    let prompt_reports = table.reports(vocab)?;
    let mut prompt_globals: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(prompt_reports.len());
    for (_, reports) in &prompt_reports {
        let mut globals = Vec::with_capacity(reports.len());
        for r in reports {
            globals.push(model.embed_text_global(r)?);
        }
        prompt_globals.push(globals);
    }
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let (x_g, _, _) = model.embed_record(rec)?;
        let row: Vec<f64> = prompt_globals
            .iter()
            .map(|globals| {
                globals.iter().map(|t| cos_f32(x_g.data(), t.data())).sum::<f64>()
                    / globals.len() as f64
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}

/// Macro AUROC of zero-shot scores over the given labeled pairs.
pub fn zero_shot_macro_auroc(
    model: &Model<f32>,
    pairs: &[Pair],
    table: &PromptTable,
    vocab: &Vocab,
) -> Result<(f64, Vec<Code>)> {
    let records: Vec<&EcgRecord> = pairs.iter().map(|p| &p.record).collect();
    let scores = zero_shot_scores(model, &records, table, vocab)?;
    let classes = table.classes();
    let per_class: Vec<(Code, Vec<f64>, Vec<bool>)> = classes
        .iter()
        .enumerate()
        .map(|(ci, &c)| {
            let s: Vec<f64> = scores.iter().map(|row| row[ci]).collect();
            let l: Vec<bool> = pairs.iter().map(|p| p.record.labels.contains(&c)).collect();
            (c, s, l)
        })
        .collect();
    macro_auroc(&per_class)
}

// ── Feature extraction and linear probing ────────────────────────────

/// Frozen features for fine-tuning-style tasks: mean over the beat
/// embeddings before the projection layer.
pub fn extract_features(model: &Model<f32>, record: &EcgRecord) -> Result<Vec<f32>> {
    let (_, b, _) = model.embed_record(record)?;
    let (n, d) = (b.rows(), b.cols());
    let mut mean = alloc::vec![0.0f32; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(b.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f32;
    }
    Ok(mean)
}

/// Feature matrix plus multi-hot labels for a split.
pub struct ProbeData {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<Vec<f32>>,
    pub classes: Vec<Code>,
}

impl ProbeData {
    pub fn from_pairs(model: &Model<f32>, pairs: &[Pair], classes: &[Code]) -> Result<Self> {
        let mut features = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            features.push(extract_features(model, &p.record)?);
            labels.push(
                classes
                    .iter()
                    .map(|c| if p.record.labels.contains(c) { 1.0 } else { 0.0 })
                    .collect(),
            );
        }
        Ok(ProbeData { features, labels, classes: classes.to_vec() })
    }
}

/// Stratified subsample of row indices at `ratio`, at least one per group.
pub fn stratified_subsample(labels: &[Vec<f32>], ratio: f64, seed: u64) -> Vec<usize> {
    let mut groups: BTreeMap<Vec<u8>, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        let key: Vec<u8> = l.iter().map(|&v| u8::from(v > 0.5)).collect();
        groups.entry(key).or_default().push(i);
    }
    let mut out = Vec::new();
    for (gi, (_, idxs)) in groups.into_iter().enumerate() {
        let mut r = rng::substream(seed, "probe-subsample", gi as u64);
        let mut shuffled = idxs;
        r.shuffle(&mut shuffled);
        let k = (libm::round(shuffled.len() as f64 * ratio) as usize).max(1).min(shuffled.len());
        out.extend_from_slice(&shuffled[..k]);
    }
    out.sort_unstable();
    out
}

/// Train a linear layer on frozen features with BCE; AdamW lr 1e-3, up to 50
/// epochs, batch min(128, n), early stop on validation macro AUROC with
/// patience 5. Returns the test macro AUROC.
pub fn linear_probe(
    train: &ProbeData,
    val: &ProbeData,
    test: &ProbeData,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    let keep = stratified_subsample(&train.labels, ratio, seed);
    let feats: Vec<&[f32]> = keep.iter().map(|&i| train.features[i].as_slice()).collect();
    let labels: Vec<&[f32]> = keep.iter().map(|&i| train.labels[i].as_slice()).collect();
    if feats.is_empty() {
        return Err(Error::Empty { op: "linear_probe" });
    }
    let d = feats[0].len();
    let n_classes = train.classes.len();

    let mut params: ParamSet<f32> = ParamSet::new();
    let mut init_rng = rng::stream(seed, "probe-init");
    let mut builder = ParamBuilder::new(&mut params, &mut init_rng);
    let lin = builder.linear("probe", d, n_classes);
    let mut opt = AdamW::new(&params);

    let batch = feats.len().min(128);
    let epochs = 50;
    let patience = 5;
    let mut best_val = f64::MIN;
    let mut best_params = params.clone();
    let mut since_best = 0usize;

    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..feats.len()).collect();
        let mut shuffle_rng = rng::substream(seed, "probe-shuffle", epoch as u64);
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let g: Graph<f32> = Graph::new();
            let vars = params.register(&g)?;
            let f = Fwd::eval(&g, &vars);
            let mut xd = Vec::with_capacity(chunk.len() * d);
            let mut yd = Vec::with_capacity(chunk.len() * n_classes);
            for &i in chunk {
                xd.extend_from_slice(feats[i]);
                yd.extend_from_slice(labels[i]);
            }
            let x = g.leaf(Tensor::matrix(chunk.len(), d, xd)?)?;
            let y = Tensor::matrix(chunk.len(), n_classes, yd)?;
            let logits = f.linear(lin, x)?;
            let loss = g.bce_logits(logits, y)?;
            g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = vars.iter().map(|v| g.grad(*v)).collect();
            opt.step(&mut params, &grads, 1e-3, 0.0, |_| false)?;
        }
        let val_score = probe_macro_auroc(&params, lin, val)?;
        if val_score > best_val {
            best_val = val_score;
            best_params = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
    }
    probe_macro_auroc(&best_params, lin, test)
}

fn probe_macro_auroc(params: &ParamSet<f32>, lin: crate::nn::LinearP, data: &ProbeData) -> Result<f64> {
    let w = params.value(lin.w);
    let b = params.value(lin.b);
    let n_classes = data.classes.len();
    let mut per_class: Vec<(Code, Vec<f64>, Vec<bool>)> = data
        .classes
        .iter()
        .map(|&c| (c, Vec::new(), Vec::new()))
        .collect();
    for (x, y) in data.features.iter().zip(&data.labels) {
        for c in 0..n_classes {
            let mut z = b.data()[c] as f64;
            for (j, &xv) in x.iter().enumerate() {
                z += xv as f64 * w.at(j, c) as f64;
            }
            per_class[c].1.push(z);
            per_class[c].2.push(y[c] > 0.5);
        }
    }
    Ok(macro_auroc(&per_class)?.0)
}

// ── Transfer evaluation ──────────────────────────────────────────────

/// Source class -> set of target classes; an empty set excludes the class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelMapping {
    pub map: BTreeMap<String, Vec<String>>,
}

impl LabelMapping {
    pub fn identity(classes: &[Code]) -> Self {
        LabelMapping {
            map: classes
                .iter()
                .map(|c| (c.as_str().to_string(), alloc::vec![c.as_str().to_string()]))
                .collect(),
        }
    }

    pub fn targets_for(&self, source: Code) -> Vec<Code> {
        self.map
            .get(source.as_str())
            .map(|v| v.iter().filter_map(|s| Code::from_str(s)).collect())
            .unwrap_or_default()
    }
}

/// Zero-shot transfer: score mapped source classes against target records,
/// counting a record positive when its labels intersect the mapped set.
/// Unmapped classes are excluded from the macro average.
pub fn transfer_zero_shot(
    model: &Model<f32>,
    target_pairs: &[Pair],
    source_classes: &[Code],
    mapping: &LabelMapping,
    vocab: &Vocab,
) -> Result<(f64, Vec<Code>)> {
    let mapped: Vec<(Code, Vec<Code>)> = source_classes
        .iter()
        .map(|&c| (c, mapping.targets_for(c)))
        .filter(|(_, t)| !t.is_empty())
        .collect();
    if mapped.is_empty() {
        return Err(Error::invalid("transfer mapping leaves no classes to evaluate"));
    }
    let table = PromptTable::default_for(&mapped.iter().map(|(c, _)| *c).collect::<Vec<_>>());
    let records: Vec<&EcgRecord> = target_pairs.iter().map(|p| &p.record).collect();
    let scores = zero_shot_scores(model, &records, &table, vocab)?;
    let per_class: Vec<(Code, Vec<f64>, Vec<bool>)> = mapped
        .iter()
        .enumerate()
        .map(|(ci, (c, targets))| {
            let s: Vec<f64> = scores.iter().map(|row| row[ci]).collect();
            let l: Vec<bool> = target_pairs
                .iter()
                .map(|p| p.record.labels.iter().any(|lbl| targets.contains(lbl)))
                .collect();
            (*c, s, l)
        })
        .collect();
    macro_auroc(&per_class)
}

// ── Patient retrieval ────────────────────────────────────────────────

/// recall@k over same-patient pairs: for each query embedding, rank all
/// candidate embeddings by cosine (ties broken by index order) and check
/// whether the true partner lands in the top k.
pub fn recall_at_k(queries: &[Vec<f32>], candidates: &[Vec<f32>], ks: &[usize]) -> Result<Vec<f64>> {
    if queries.len() != candidates.len() || queries.len() < 2 {
        return Err(Error::invalid("retrieval needs >= 2 aligned query/candidate pairs"));
    }
    let n = queries.len();
    let mut hits = alloc::vec![0usize; ks.len()];
    for (qi, q) in queries.iter().enumerate() {
        let mut sims: Vec<(usize, f64)> =
            candidates.iter().enumerate().map(|(ci, c)| (ci, cos_f32(q, c))).collect();
        sims.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        let rank = sims.iter().position(|&(ci, _)| ci == qi).unwrap() + 1;
        for (i, &k) in ks.iter().enumerate() {
            if rank <= k {
                hits[i] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / n as f64).collect())
}

/// Embed both records of each patient pair and compute recall@k.
pub fn patient_recall(
    model: &Model<f32>,
    pairs: &[(EcgRecord, EcgRecord)],
    ks: &[usize],
) -> Result<Vec<f64>> {
    if pairs.len() < 2 {
        return Err(Error::invalid("patient retrieval needs >= 2 patients"));
    }
    let mut queries = Vec::with_capacity(pairs.len());
    let mut candidates = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let (xa, _, _) = model.embed_record(a)?;
        let (xb, _, _) = model.embed_record(b)?;
        queries.push(xa.into_data());
        candidates.push(xb.into_data());
    }
    recall_at_k(&queries, &candidates, ks)
}

// ── Report generation ────────────────────────────────────────────────

/// Greedy decoding from BOS conditioned on the caption context; stops after
/// EOS or `max_len` tokens. Returns the generated ids (BOS excluded).
pub fn generate_report(model: &Model<f32>, record: &EcgRecord, max_len: usize) -> Result<Vec<usize>> {
    if max_len + 1 > model.cfg.max_text_len {
        return Err(Error::invalid(alloc::format!(
            "max_len {} exceeds max_text_len {}",
            max_len,
            model.cfg.max_text_len
        )));
    }
    let g: Graph<f32> = Graph::new();
    let vars = model.params.register(&g)?;
    let f = Fwd::eval(&g, &vars);
    let ecg = model.forward_ecg_record(&f, record)?;
    let mut prefix = alloc::vec![specials::BOS];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = model.caption_logits(&f, ecg.e_tilde, &prefix)?;
        let v = g.value(logits);
        let last = v.rows() - 1;
        let row = v.row(last);
        // argmax with first-index tie break
        let mut best = 0usize;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        out.push(best);
        prefix.push(best);
        if best == specials::EOS {
            break;
        }
    }
    Ok(out)
}

// ── Text metrics ─────────────────────────────────────────────────────

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut m: BTreeMap<&[usize], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// BLEU-n: brevity penalty times the geometric mean of clipped i-gram
/// precisions for i <= n, with 1e-9 standing in for zero counts.
pub fn bleu(candidate: &[usize], references: &[&[usize]], n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() || n == 0 {
        return 0.0;
    }
    const EPS: f64 = 1e-9;
    let mut log_sum = 0.0;
    for order in 1..=n {
        let cand_counts = ngram_counts(candidate, order);
        let total: usize = cand_counts.values().sum();
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, order).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let p = if total == 0 || clipped == 0 { EPS } else { clipped as f64 / total as f64 };
        log_sum += libm::log(p);
    }
    let c = candidate.len() as f64;
    // closest reference length; ties go to the shorter
    let r = references
        .iter()
        .map(|x| x.len())
        .min_by_key(|&len| ((len as i64 - candidate.len() as i64).abs(), len))
        .unwrap() as f64;
    let bp = if c >= r { 1.0 } else { libm::exp(1.0 - r / c) };
    bp * libm::exp(log_sum / n as f64)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut dp = alloc::vec![0usize; (a.len() + 1) * (b.len() + 1)];
    let w = b.len() + 1;
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i * w + j] = if a[i - 1] == b[j - 1] {
                dp[(i - 1) * w + j - 1] + 1
            } else {
                dp[(i - 1) * w + j].max(dp[i * w + j - 1])
            };
        }
    }
    dp[a.len() * w + b.len()]
}

/// ROUGE-L F-measure from the longest common subsequence, with beta = 1.2
/// weighting toward recall.
pub fn rouge_l(candidate: &[usize], reference: &[usize]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let beta2 = 1.2f64 * 1.2;
    (1.0 + beta2) * p * r / (r + beta2 * p)
}
