//! Synthetic paired ECG/report corpus with controllable abnormalities.
//!
//! Waveforms are sums of per-beat P/QRS/T Gaussian bumps placed at RR
//! intervals derived from the heart rate, plus seeded noise. Each
//! abnormality code perturbs one measurable aspect of the waveform and maps
//! to report template sentences, so the label set is recoverable from both
//! modalities — that alignment is what the training objective must learn.
//!
//! Desk default: 4 leads x 100 Hz x 10 s. Leads beyond the base lead are
//! scaled/phase-shifted copies plus independent noise.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::RngCore;

use crate::error::{Error, Result};
use crate::rng::{self, RngExt};
use crate::tensor::{Scalar, Tensor};
use crate::text::{tokenize, TextReport, Vocab};

/// Abnormality codes. NORM is exclusive; TACHY/BRADY/AFIB conflict on rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Code {
    Norm,
    Afib,
    Lbbb,
    Ste,
    Tachy,
    Brady,
    Pvc,
    Lowvolt,
}

impl Code {
    pub const ALL: [Code; 8] = [
        Code::Norm,
        Code::Afib,
        Code::Lbbb,
        Code::Ste,
        Code::Tachy,
        Code::Brady,
        Code::Pvc,
        Code::Lowvolt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Code::Norm => "NORM",
            Code::Afib => "AFIB",
            Code::Lbbb => "LBBB",
            Code::Ste => "STE",
            Code::Tachy => "TACHY",
            Code::Brady => "BRADY",
            Code::Pvc => "PVC",
            Code::Lowvolt => "LOWVOLT",
        }
    }

    pub fn from_str(s: &str) -> Option<Code> {
        Code::ALL.iter().copied().find(|c| c.as_str() == s)
    }

    /// Report sentences for this code; one is chosen per record.
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Code::Norm => &[
                "Sinus rhythm with normal conduction.",
                "Normal sinus rhythm with regular intervals.",
                "Regular rhythm with normal waveform morphology.",
            ],
            Code::Afib => &[
                "Atrial fibrillation with irregularly irregular rhythm.",
                "Coarse atrial fibrillation with absent p waves.",
                "Irregular rhythm consistent with atrial fibrillation.",
            ],
            Code::Lbbb => &[
                "Left bundle branch block with wide qrs complexes.",
                "Complete left bundle branch block is present.",
                "Wide qrs complexes consistent with left bundle branch block.",
            ],
            Code::Ste => &[
                "Marked st segment elevation in anterior leads.",
                "Acute injury pattern with st segment elevation.",
                "St segment elevation is present.",
            ],
            Code::Tachy => &[
                "Sinus tachycardia with rapid ventricular rate.",
                "Rapid heart rate consistent with sinus tachycardia.",
            ],
            Code::Brady => &[
                "Sinus bradycardia with slow ventricular rate.",
                "Slow heart rate consistent with sinus bradycardia.",
            ],
            Code::Pvc => &[
                "Frequent premature ventricular complexes are present.",
                "Premature ventricular complexes with wide early beats.",
            ],
            Code::Lowvolt => &[
                "Low voltage qrs in limb leads.",
                "Generalized low voltage is present.",
            ],
        }
    }
}

impl core::fmt::Display for Code {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Summary sentences appended to every report.
pub const SUMMARY_NORMAL: &str = "Normal ecg.";
pub const SUMMARY_ABNORMAL: &str = "Abnormal ecg.";

/// All template texts (used to build the shared vocabulary).
pub fn all_template_texts() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    for c in Code::ALL {
        out.extend_from_slice(c.templates());
    }
    out.push(SUMMARY_NORMAL);
    out.push(SUMMARY_ABNORMAL);
    out
}

/// The shared vocabulary every corpus uses: specials + sorted template words.
pub fn build_vocab() -> Vocab {
    Vocab::from_texts(all_template_texts())
}

/// Waveform generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub leads: usize,
    pub sampling_rate_hz: u32,
    pub duration_s: u32,
    /// Per-sample Gaussian noise, millivolts.
    pub noise_sd_mv: f64,
    /// Pin the heart rate instead of sampling it from the code's range.
    pub rate_override: Option<f64>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            leads: 4,
            sampling_rate_hz: 100,
            duration_s: 10,
            noise_sd_mv: 0.02,
            rate_override: None,
        }
    }
}

/// Per-record waveform effect, resolved from the code combination.
#[derive(Clone, Debug)]
pub struct WaveformEffect {
    pub rate_range: (f64, f64),
    /// Relative RR jitter (sigma as a fraction of RR).
    pub rr_jitter: f64,
    pub p_amp_mv: f64,
    pub qrs_width_s: f64,
    pub st_offset_mv: f64,
    pub amp_scale: f64,
    /// Fraction of beats replaced by premature wide complexes.
    pub pvc_fraction: f64,
}

impl Default for WaveformEffect {
    fn default() -> Self {
        WaveformEffect {
            rate_range: (60.0, 80.0),
            rr_jitter: 0.0,
            p_amp_mv: 0.2,
            qrs_width_s: 0.08,
            st_offset_mv: 0.0,
            amp_scale: 1.0,
            pvc_fraction: 0.0,
        }
    }
}

/// Resolve the combined effect for a label set; conflicting combinations
/// (NORM plus anything, or two rate-setting codes) are rejected.
pub fn resolve_effect(codes: &[Code]) -> Result<WaveformEffect> {
    if codes.is_empty() {
        return Err(Error::IncompatibleSpec { detail: "empty code set".to_string() });
    }
    let set: BTreeSet<Code> = codes.iter().copied().collect();
    if set.contains(&Code::Norm) && set.len() > 1 {
        return Err(Error::IncompatibleSpec { detail: "NORM combined with abnormalities".to_string() });
    }
    let rate_setters: Vec<Code> = set
        .iter()
        .copied()
        .filter(|c| matches!(c, Code::Afib | Code::Tachy | Code::Brady))
        .collect();
    if rate_setters.len() > 1 {
        return Err(Error::IncompatibleSpec {
            detail: format!("rate conflict: {rate_setters:?}"),
        });
    }
    let mut e = WaveformEffect::default();
    for c in &set {
        match c {
            Code::Norm => {}
            Code::Afib => {
                e.rate_range = (60.0, 85.0);
                e.rr_jitter = 0.15;
                e.p_amp_mv = 0.0;
            }
            Code::Lbbb => e.qrs_width_s = 0.14,
            Code::Ste => e.st_offset_mv = 0.15,
            Code::Tachy => e.rate_range = (110.0, 140.0),
            Code::Brady => e.rate_range = (40.0, 55.0),
            Code::Pvc => e.pvc_fraction = 0.2,
            Code::Lowvolt => e.amp_scale = 0.4,
        }
    }
    Ok(e)
}

/// A multi-lead recording with its provenance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub patient_id: String,
    /// Lead-major samples: `signal[lead * samples + t]`, millivolts.
    pub signal: Vec<f32>,
    pub leads: usize,
    pub sampling_rate_hz: u32,
    pub duration_s: u32,
    /// Sorted unique abnormality codes.
    pub labels: Vec<Code>,
}

impl EcgRecord {
    pub fn samples(&self) -> usize {
        (self.sampling_rate_hz * self.duration_s) as usize
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        let n = self.samples();
        &self.signal[i * n..(i + 1) * n]
    }

    pub fn has_non_finite(&self) -> bool {
        self.signal.iter().any(|v| !v.is_finite())
    }

    /// Leads-by-samples matrix for the encoder.
    pub fn to_matrix<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            alloc::vec![self.leads, self.samples()],
            self.signal.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("shape")
    }

    pub fn label_strings(&self) -> Vec<String> {
        self.labels.iter().map(|c| c.as_str().to_string()).collect()
    }
}

// Beat geometry constants (seconds / millivolts). The R bump sigma is chosen
// so the width of the region above half the R amplitude equals qrs_width_s.
const P_OFFSET_S: f64 = -0.16;
const P_SIGMA_S: f64 = 0.025;
const T_OFFSET_S: f64 = 0.28;
const T_SIGMA_S: f64 = 0.055;
const T_AMP_MV: f64 = 0.35;
const Q_AMP_MV: f64 = -0.15;
const S_AMP_MV: f64 = -0.2;
const R_AMP_MV: f64 = 1.0;
const ST_CENTER_S: f64 = 0.14;
const ST_SIGMA_S: f64 = 0.05;
const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949; // 2*sqrt(2*ln 2)

const LEAD_SCALES: [f64; 8] = [1.0, 0.6, -0.4, 0.8, 0.5, -0.3, 0.7, 0.9];
const LEAD_SHIFT_S: [f64; 8] = [0.0, 0.01, 0.02, 0.01, 0.02, 0.0, 0.01, 0.02];

fn gauss(t: f64, center: f64, sigma: f64) -> f64 {
    let d = (t - center) / sigma;
    libm::exp(-0.5 * d * d)
}

struct Beat {
    r_time: f64,
    wide: bool,
    with_p: bool,
    amp: f64,
}

/// Beat schedule for one record: R-peak times from 0.25 s up to
/// duration - 0.5 s at RR intervals (with jitter where the effect says so).
fn beat_schedule(effect: &WaveformEffect, rate_bpm: f64, duration: f64, rng: &mut ChaCha8Rng) -> Vec<Beat> {
    let rr = 60.0 / rate_bpm;
    let mut beats = Vec::new();
    let mut r = 0.25;
    let limit = duration - 0.5;
    while r <= limit {
        let is_pvc = effect.pvc_fraction > 0.0 && rng.uniform() < effect.pvc_fraction;
        if is_pvc {
            beats.push(Beat { r_time: r, wide: true, with_p: false, amp: 1.25 });
        } else {
            beats.push(Beat { r_time: r, wide: false, with_p: effect.p_amp_mv > 0.0, amp: 1.0 });
        }
        let mut step = rr;
        if effect.rr_jitter > 0.0 {
            step *= 1.0 + effect.rr_jitter * rng.normal();
        }
        if is_pvc {
            // premature beat arrived early; compensatory pause follows
            step *= 1.15;
        }
        // refractory floor: jittered RR never collapses below 0.6 s
        r += step.max(0.6);
    }
    beats
}

fn base_waveform(
    effect: &WaveformEffect,
    beats: &[Beat],
    n: usize,
    fs: f64,
    t_scale: f64,
    p_scale: f64,
) -> Vec<f64> {
    let mut x = alloc::vec![0.0f64; n];
    let a = effect.amp_scale;
    for b in beats {
        let qrs_w = if b.wide { 0.16 } else { effect.qrs_width_s };
        let r_sigma = qrs_w / FWHM_TO_SIGMA;
        let side_sigma = qrs_w / 6.0;
        let lo = libm::floor((b.r_time - 0.30) * fs).max(0.0) as usize;
        let hi = (libm::ceil((b.r_time + 0.55) * fs) as usize).min(n);
        for (i, xi) in x.iter_mut().enumerate().take(hi).skip(lo) {
            let t = i as f64 / fs;
            let mut v = 0.0;
            if b.with_p {
                v += effect.p_amp_mv * p_scale * gauss(t, b.r_time + P_OFFSET_S, P_SIGMA_S);
            }
            v += Q_AMP_MV * b.amp * gauss(t, b.r_time - qrs_w / 2.0, side_sigma);
            v += R_AMP_MV * b.amp * gauss(t, b.r_time, r_sigma);
            v += S_AMP_MV * b.amp * gauss(t, b.r_time + qrs_w / 2.0, side_sigma);
            v += T_AMP_MV * t_scale * b.amp * gauss(t, b.r_time + T_OFFSET_S, T_SIGMA_S);
            if effect.st_offset_mv != 0.0 {
                v += effect.st_offset_mv * gauss(t, b.r_time + ST_CENTER_S, ST_SIGMA_S);
            }
            *xi += v * a;
        }
    }
    x
}

/// Synthesize one record with separate structure and noise seeds; two records
/// sharing the structure seed differ only in noise (same patient protocol).
pub fn synth_ecg_split_seed(
    codes: &[Code],
    params: &SynthParams,
    structure_seed: u64,
    noise_seed: u64,
) -> Result<EcgRecord> {
    let effect = resolve_effect(codes)?;
    let fs = params.sampling_rate_hz as f64;
    let n = (params.sampling_rate_hz * params.duration_s) as usize;
    let mut srng = rng::stream(structure_seed, "ecg-structure");
    // waveform morphology tracks the rate level: T and P amplitudes scale
    // with the same bin that selects the report template
    let (rate, t_scale, p_scale) = match params.rate_override {
        Some(r) => (r, 1.0, 1.0),
        None => {
            let (bin, rate) = draw_bin_and_rate(&effect, &mut srng);
            (rate, 0.75 + 0.5 * bin as f64, 0.85 + 0.3 * bin as f64)
        }
    };
    let beats = beat_schedule(&effect, rate, params.duration_s as f64, &mut srng);
    let base = base_waveform(&effect, &beats, n, fs, t_scale, p_scale);

    let mut signal = Vec::with_capacity(params.leads * n);
    for lead in 0..params.leads {
        let scale = LEAD_SCALES[lead % LEAD_SCALES.len()];
        let shift = libm::round(LEAD_SHIFT_S[lead % LEAD_SHIFT_S.len()] * fs) as usize;
        let mut nrng = rng::substream(noise_seed, "ecg-noise", lead as u64);
        for t in 0..n {
            let src = t.saturating_sub(shift);
            let v = base[src] * scale + params.noise_sd_mv * nrng.normal();
            signal.push(v as f32);
        }
    }

    let mut labels: Vec<Code> = codes.to_vec();
    labels.sort_unstable();
    labels.dedup();
    Ok(EcgRecord {
        id: format!("s{structure_seed:08x}"),
        patient_id: format!("p{structure_seed:08x}"),
        signal,
        leads: params.leads,
        sampling_rate_hz: params.sampling_rate_hz,
        duration_s: params.duration_s,
        labels,
    })
}

/// Synthesize one record from a single seed.
pub fn synth_ecg(codes: &[Code], params: &SynthParams, seed: u64) -> Result<EcgRecord> {
    synth_ecg_split_seed(codes, params, seed, seed)
}

/// Rate levels per record. The heart rate clusters tightly around one of
/// two evenly spaced centers inside the effect's rate range, and the
/// template choice follows the same level, so the report wording is a
/// deterministic, recoverable function of the waveform.
pub const RATE_BINS: usize = 2;

fn draw_bin_and_rate(effect: &WaveformEffect, rng: &mut ChaCha8Rng) -> (usize, f64) {
    let (lo, hi) = effect.rate_range;
    let span = hi - lo;
    let bin = rng.below(RATE_BINS);
    let center = lo + (bin as f64 + 0.5) * span / RATE_BINS as f64;
    let rate = center + rng.normal() * span / 30.0;
    (bin, rate)
}

/// One template sentence per code (sorted order) plus the summary sentence.
/// The template choice is tied to the rate level drawn from the same
/// structure stream `synth_ecg` uses, so a record and its report describe
/// the same waveform.
pub fn synth_report(codes: &[Code], vocab: &Vocab, structure_seed: u64) -> Result<TextReport> {
    if codes.is_empty() {
        return Err(Error::IncompatibleSpec { detail: "empty code set".to_string() });
    }
    let effect = resolve_effect(codes)?;
    let mut srng = rng::stream(structure_seed, "ecg-structure");
    let (bin, _) = draw_bin_and_rate(&effect, &mut srng);
    synth_report_for_bin(codes, bin, vocab)
}

/// Report for a known rate level (the coupling target of [`synth_report`]).
pub fn synth_report_for_bin(codes: &[Code], bin: usize, vocab: &Vocab) -> Result<TextReport> {
    let mut set: Vec<Code> = codes.to_vec();
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(Error::IncompatibleSpec { detail: "empty code set".to_string() });
    }
    let mut raw = String::new();
    for c in &set {
        let templates = c.templates();
        let t = templates[(bin * templates.len()) / RATE_BINS];
        if !raw.is_empty() {
            raw.push(' ');
        }
        raw.push_str(t);
    }
    raw.push(' ');
    raw.push_str(if set == [Code::Norm] { SUMMARY_NORMAL } else { SUMMARY_ABNORMAL });
    Ok(tokenize(&raw, vocab))
}

/// One ECG/report pair.
#[derive(Clone, Debug)]
pub struct Pair {
    pub record: EcgRecord,
    pub report: TextReport,
}

/// Corpus generation request.
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub n: usize,
    /// Label set -> proportion; proportions must sum to 1.
    pub class_mix: Vec<(Vec<Code>, f64)>,
    pub seed: u64,
    pub params: SynthParams,
    /// Test-only corruption: fraction of records with a NaN sample injected.
    pub corrupt_nan_fraction: f64,
    /// Test-only corruption: fraction of reports truncated below 4 tokens.
    pub corrupt_short_fraction: f64,
}

impl CorpusSpec {
    /// Uniform mix over the four default classes.
    pub fn default_mix(n: usize, seed: u64) -> Self {
        CorpusSpec {
            n,
            class_mix: alloc::vec![
                (alloc::vec![Code::Norm], 0.25),
                (alloc::vec![Code::Afib], 0.25),
                (alloc::vec![Code::Lbbb], 0.25),
                (alloc::vec![Code::Ste], 0.25),
            ],
            seed,
            params: SynthParams::default(),
            corrupt_nan_fraction: 0.0,
            corrupt_short_fraction: 0.0,
        }
    }
}

/// A generated corpus with stratified 80/10/10 splits.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<Pair>,
    pub val: Vec<Pair>,
    pub test: Vec<Pair>,
    pub classes: Vec<Code>,
    pub vocab: Vocab,
    pub seed: u64,
    pub params: SynthParams,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Option<&[Pair]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest-remainder apportionment of n into the mix proportions.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = weights.iter().map(|w| libm::floor(w * n as f64) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut rema: Vec<(usize, f64)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| (i, w * n as f64 - libm::floor(w * n as f64)))
        .collect();
    // largest remainder first; ties go to the earlier class
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[rema[k % rema.len()].0] += 1;
    }
    counts
}

/// Deterministic corpus generation: a pure function of the spec.
pub fn make_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.n == 0 {
        return Err(Error::invalid("corpus size must be >= 1"));
    }
    let total: f64 = spec.class_mix.iter().map(|(_, w)| *w).sum();
    if libm::fabs(total - 1.0) > 1e-9 {
        return Err(Error::invalid(format!("class mix sums to {total}, expected 1")));
    }
    for (codes, _) in &spec.class_mix {
        resolve_effect(codes)?;
    }

    let vocab = build_vocab();
    let weights: Vec<f64> = spec.class_mix.iter().map(|(_, w)| *w).collect();
    let counts = apportion(spec.n, &weights);

    // interleave classes deterministically, then synthesize per record
    let mut assignment: Vec<usize> = Vec::with_capacity(spec.n);
    for (ci, &c) in counts.iter().enumerate() {
        assignment.extend(core::iter::repeat(ci).take(c));
    }
    let mut arng = rng::stream(spec.seed, "corpus-order");
    arng.shuffle(&mut assignment);

    let n_nan = libm::round(spec.corrupt_nan_fraction * spec.n as f64) as usize;
    let n_short = libm::round(spec.corrupt_short_fraction * spec.n as f64) as usize;

    let mut by_class: Vec<Vec<Pair>> = spec.class_mix.iter().map(|_| Vec::new()).collect();
    for (i, &ci) in assignment.iter().enumerate() {
        let codes = &spec.class_mix[ci].0;
        let struct_seed = rng::substream(spec.seed, "record-structure", i as u64).next_u64();
        let noise_seed = rng::substream(spec.seed, "record-noise", i as u64).next_u64();
        let mut record = synth_ecg_split_seed(codes, &spec.params, struct_seed, noise_seed)?;
        record.id = format!("r{i:06}");
        record.patient_id = format!("p{i:06}");
        // report wording couples to the waveform through the shared
        // structure seed (same heart rate, same template bin)
        let mut report = synth_report(codes, &vocab, struct_seed)?;

        if i < n_nan {
            let k = record.signal.len() / 2;
            record.signal[k] = f32::NAN;
        } else if i < n_nan + n_short {
            // keep BOS, one word, EOS: below the four-token floor
            let w = report.token_ids[1];
            report = TextReport {
                token_ids: alloc::vec![crate::text::specials::BOS, w, crate::text::specials::EOS],
                sentence_spans: alloc::vec![(1, 2)],
                raw_text: report.raw_text.clone(),
            };
        }
        by_class[ci].push(Pair { record, report });
    }

    // stratified 80/10/10 split: global val/test sizes are exact, class
    // counts are within one of proportional via largest remainder
    let class_fracs: Vec<f64> = counts.iter().map(|&c| c as f64 / spec.n as f64).collect();
    let val_total = libm::round(spec.n as f64 * 0.1) as usize;
    let val_counts = apportion(val_total, &class_fracs);
    let test_counts = apportion(val_total, &class_fracs);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (ci, mut pairs) in by_class.into_iter().enumerate() {
        let mut srng = rng::substream(spec.seed, "split", ci as u64);
        srng.shuffle(&mut pairs);
        let n_val = val_counts[ci].min(pairs.len());
        let n_test = test_counts[ci].min(pairs.len().saturating_sub(n_val));
        for (j, p) in pairs.into_iter().enumerate() {
            if j < n_val {
                val.push(p);
            } else if j < n_val + n_test {
                test.push(p);
            } else {
                train.push(p);
            }
        }
    }
    // stable order inside each split: by record id
    for split in [&mut train, &mut val, &mut test] {
        split.sort_by(|a, b| a.record.id.cmp(&b.record.id));
    }

    let mut classes: Vec<Code> = spec
        .class_mix
        .iter()
        .flat_map(|(codes, _)| codes.iter().copied())
        .collect();
    classes.sort_unstable();
    classes.dedup();

    Ok(Corpus {
        train,
        val,
        test,
        classes,
        vocab,
        seed: spec.seed,
        params: spec.params.clone(),
    })
}

/// The preprocessing filter: drops pairs with NaN/empty signals, reports
/// shorter than four word tokens, and pairs lacking a report. Order kept.
pub fn filter_pairs(pairs: Vec<Pair>) -> Vec<Pair> {
    pairs
        .into_iter()
        .filter(|p| {
            !p.record.signal.is_empty()
                && !p.record.has_non_finite()
                && !p.report.raw_text.is_empty()
                && p.report.word_count() >= 4
        })
        .collect()
}

/// Two noise-redraws per patient for the identification task.
pub fn make_patient_pairs(
    n_patients: usize,
    class_mix: &[(Vec<Code>, f64)],
    params: &SynthParams,
    seed: u64,
) -> Result<Vec<(EcgRecord, EcgRecord)>> {
    if n_patients < 2 {
        return Err(Error::invalid("patient pairs need at least 2 patients"));
    }
    let weights: Vec<f64> = class_mix.iter().map(|(_, w)| *w).collect();
    let counts = apportion(n_patients, &weights);
    let mut assignment: Vec<usize> = Vec::with_capacity(n_patients);
    for (ci, &c) in counts.iter().enumerate() {
        assignment.extend(core::iter::repeat(ci).take(c));
    }
    let mut arng = rng::stream(seed, "patient-order");
    arng.shuffle(&mut assignment);

    let mut out = Vec::with_capacity(n_patients);
    for (i, &ci) in assignment.iter().enumerate() {
        let codes = &class_mix[ci].0;
        let struct_seed = rng::substream(seed, "patient-structure", i as u64).next_u64();
        let na = rng::substream(seed, "patient-noise-a", i as u64).next_u64();
        let nb = rng::substream(seed, "patient-noise-b", i as u64).next_u64();
        let mut a = synth_ecg_split_seed(codes, params, struct_seed, na)?;
        let mut b = synth_ecg_split_seed(codes, params, struct_seed, nb)?;
        a.id = format!("p{i:05}a");
        b.id = format!("p{i:05}b");
        a.patient_id = format!("p{i:05}");
        b.patient_id = a.patient_id.clone();
        out.push((a, b));
    }
    Ok(out)
}

/// Hand-crafted waveform measurements (base lead), used by the corpus
/// separability check and available for diagnostics.
pub mod features {
    use alloc::vec::Vec;

    /// Indices of R peaks: local maxima above half the global max, at least
    /// 0.25 s apart.
    pub fn detect_r_peaks(x: &[f32], fs: f64) -> Vec<usize> {
        let max = x.iter().cloned().fold(f32::MIN, f32::max);
        let thresh = 0.5 * max;
        let min_gap = (0.25 * fs) as usize;
        let mut peaks: Vec<usize> = Vec::new();
        for i in 1..x.len().saturating_sub(1) {
            if x[i] >= thresh && x[i] >= x[i - 1] && x[i] >= x[i + 1] {
                if let Some(&last) = peaks.last() {
                    if i - last < min_gap {
                        if x[i] > x[last] {
                            *peaks.last_mut().unwrap() = i;
                        }
                        continue;
                    }
                }
                peaks.push(i);
            }
        }
        peaks
    }

    /// Beats per minute from the detected peak count over the duration.
    pub fn rate_bpm(x: &[f32], fs: f64) -> f64 {
        let peaks = detect_r_peaks(x, fs);
        peaks.len() as f64 * 60.0 / (x.len() as f64 / fs)
    }

    /// Mean width (seconds) of the region above half the peak value.
    pub fn qrs_width_s(x: &[f32], fs: f64) -> f64 {
        let peaks = detect_r_peaks(x, fs);
        if peaks.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for &p in &peaks {
            let half = x[p] / 2.0;
            let mut lo = p;
            while lo > 0 && x[lo - 1] >= half {
                lo -= 1;
            }
            let mut hi = p;
            while hi + 1 < x.len() && x[hi + 1] >= half {
                hi += 1;
            }
            total += (hi - lo + 1) as f64 / fs;
        }
        total / peaks.len() as f64
    }

    /// Mean energy in the P window [r-0.20 s, r-0.12 s] per beat.
    pub fn p_band_energy(x: &[f32], fs: f64) -> f64 {
        window_stat(x, fs, -0.20, -0.12, |w| w.iter().map(|&v| (v as f64) * (v as f64)).sum())
    }

    /// Mean signal value in the ST window [r+0.07 s, r+0.16 s].
    pub fn st_offset_mv(x: &[f32], fs: f64) -> f64 {
        window_stat(x, fs, 0.07, 0.16, |w| {
            w.iter().map(|&v| v as f64).sum::<f64>() / w.len().max(1) as f64
        })
    }

    pub fn max_abs_mv(x: &[f32]) -> f64 {
        x.iter().map(|v| v.abs()).fold(0.0f32, f32::max) as f64
    }

    /// Standard deviation of RR intervals over mean RR (irregularity).
    pub fn rr_variability(x: &[f32], fs: f64) -> f64 {
        let peaks = detect_r_peaks(x, fs);
        if peaks.len() < 3 {
            return 0.0;
        }
        let rr: Vec<f64> = peaks.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
        let mean = rr.iter().sum::<f64>() / rr.len() as f64;
        let var = rr.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / rr.len() as f64;
        libm::sqrt(var) / mean
    }

    fn window_stat(x: &[f32], fs: f64, lo_s: f64, hi_s: f64, f: impl Fn(&[f32]) -> f64) -> f64 {
        let peaks = detect_r_peaks(x, fs);
        if peaks.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for &p in &peaks {
            let lo = p as i64 + (lo_s * fs) as i64;
            let hi = p as i64 + (hi_s * fs) as i64;
            if lo < 0 || hi as usize >= x.len() || hi <= lo {
                continue;
            }
            total += f(&x[lo as usize..hi as usize]);
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }

    /// The five-feature vector used by the separability check:
    /// rate, QRS width, P energy, ST offset, max amplitude.
    pub fn feature_vector(x: &[f32], fs: f64) -> [f64; 5] {
        [rate_bpm(x, fs), qrs_width_s(x, fs), p_band_energy(x, fs), st_offset_mv(x, fs), max_abs_mv(x)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn norm_rate_60_gives_exactly_ten_beats() {
        let params = SynthParams { rate_override: Some(60.0), ..SynthParams::default() };
        let rec = synth_ecg(&[Code::Norm], &params, 42).unwrap();
        let peaks = features::detect_r_peaks(rec.lead(0), 100.0);
        assert_eq!(peaks.len(), 10);
    }

    #[test]
    fn afib_p_band_energy_below_ten_percent_of_norm() {
        let params = SynthParams::default();
        let mut afib_e = 0.0;
        let mut norm_e = 0.0;
        for seed in 0..8 {
            let a = synth_ecg(&[Code::Afib], &params, 100 + seed).unwrap();
            let n = synth_ecg(&[Code::Norm], &params, 200 + seed).unwrap();
            afib_e += features::p_band_energy(a.lead(0), 100.0);
            norm_e += features::p_band_energy(n.lead(0), 100.0);
        }
        assert!(afib_e < 0.10 * norm_e, "afib {afib_e} vs norm {norm_e}");
    }

    #[test]
    fn lowvolt_amplitude_at_most_half_of_norm() {
        let params = SynthParams::default();
        let l = synth_ecg(&[Code::Lowvolt], &params, 7).unwrap();
        let n = synth_ecg(&[Code::Norm], &params, 8).unwrap();
        assert!(features::max_abs_mv(l.lead(0)) <= 0.5 * features::max_abs_mv(n.lead(0)));
    }

    #[test]
    fn rate_conflicts_rejected() {
        let params = SynthParams::default();
        assert!(matches!(
            synth_ecg(&[Code::Tachy, Code::Brady], &params, 1),
            Err(Error::IncompatibleSpec { .. })
        ));
        assert!(matches!(
            synth_ecg(&[Code::Norm, Code::Ste], &params, 1),
            Err(Error::IncompatibleSpec { .. })
        ));
        assert!(synth_ecg(&[Code::Afib, Code::Ste], &params, 1).is_ok());
    }

    #[test]
    fn record_shape_invariant() {
        let rec = synth_ecg(&[Code::Norm], &SynthParams::default(), 3).unwrap();
        assert_eq!(rec.samples(), 1000);
        assert_eq!(rec.signal.len(), 4 * 1000);
        assert!(!rec.has_non_finite());
    }

    #[test]
    fn report_has_one_sentence_per_code_plus_summary() {
        let vocab = build_vocab();
        let r = synth_report(&[Code::Norm], &vocab, 5).unwrap();
        assert_eq!(r.sentence_spans.len(), 2);
        assert!(r.raw_text.contains("Normal ecg."));

        let r2 = synth_report(&[Code::Afib, Code::Ste], &vocab, 5).unwrap();
        assert_eq!(r2.sentence_spans.len(), 3);
        assert!(r2.raw_text.contains("Abnormal ecg."));
    }

    #[test]
    fn report_generation_is_deterministic() {
        let vocab = build_vocab();
        let a = synth_report(&[Code::Lbbb], &vocab, 9).unwrap();
        let b = synth_report(&[Code::Lbbb], &vocab, 9).unwrap();
        assert_eq!(a.token_ids, b.token_ids);
    }

    #[test]
    fn no_template_word_is_oov() {
        let vocab = build_vocab();
        for text in all_template_texts() {
            let r = tokenize(text, &vocab);
            for &id in &r.token_ids {
                assert_ne!(id, crate::text::specials::UNK, "OOV in template: {text}");
            }
        }
    }

    #[test]
    fn apportionment_rounds_within_one() {
        // n=10 over 4 equal classes -> {3,3,2,2}
        let counts = apportion(10, &[0.25, 0.25, 0.25, 0.25]);
        let mut sorted = counts.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, alloc::vec![2, 2, 3, 3]);
        assert_eq!(counts.iter().sum::<usize>(), 10);
    }

    #[test]
    fn corpus_splits_and_determinism() {
        let spec = CorpusSpec::default_mix(100, 11);
        let c1 = make_corpus(&spec).unwrap();
        let c2 = make_corpus(&spec).unwrap();
        assert_eq!(c1.train.len(), 80);
        assert_eq!(c1.val.len(), 10);
        assert_eq!(c1.test.len(), 10);
        for (a, b) in c1.train.iter().zip(&c2.train) {
            assert_eq!(a.record.signal, b.record.signal);
            assert_eq!(a.report.token_ids, b.report.token_ids);
        }
    }

    #[test]
    fn generated_pairs_all_pass_filter() {
        let c = make_corpus(&CorpusSpec::default_mix(40, 3)).unwrap();
        let n = c.train.len();
        assert_eq!(filter_pairs(c.train).len(), n);
    }

    #[test]
    fn corruption_flags_create_filterable_pairs() {
        let mut spec = CorpusSpec::default_mix(20, 4);
        spec.corrupt_nan_fraction = 0.1;
        spec.corrupt_short_fraction = 0.1;
        let c = make_corpus(&spec).unwrap();
        let all: Vec<Pair> =
            c.train.into_iter().chain(c.val.into_iter()).chain(c.test.into_iter()).collect();
        let kept = filter_pairs(all);
        assert_eq!(kept.len(), 16);
    }

    #[test]
    fn label_report_consistency() {
        let c = make_corpus(&CorpusSpec::default_mix(40, 6)).unwrap();
        for p in c.train.iter().chain(&c.val).chain(&c.test) {
            for code in Code::ALL {
                let mentioned = code
                    .templates()
                    .iter()
                    .any(|t| p.report.raw_text.contains(t));
                let labeled = p.record.labels.contains(&code);
                assert_eq!(mentioned, labeled, "record {} code {code}", p.record.id);
            }
        }
    }

    #[test]
    fn patient_pairs_share_structure_not_noise() {
        let mix = alloc::vec![(alloc::vec![Code::Norm], 0.5), (alloc::vec![Code::Afib], 0.5)];
        let pairs = make_patient_pairs(6, &mix, &SynthParams::default(), 13).unwrap();
        assert_eq!(pairs.len(), 6);
        for (a, b) in &pairs {
            assert_eq!(a.patient_id, b.patient_id);
            assert_ne!(a.signal, b.signal);
            let pa = features::detect_r_peaks(a.lead(0), 100.0);
            let pb = features::detect_r_peaks(b.lead(0), 100.0);
            assert_eq!(pa.len(), pb.len(), "beat count for {}", a.patient_id);
            for (&ia, &ib) in pa.iter().zip(&pb) {
                assert!(ia.abs_diff(ib) <= 1, "peak moved: {ia} vs {ib}");
            }
        }
    }
}
