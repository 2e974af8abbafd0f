//! Corpus directory format.
//!
//! One directory per split; per record a raw little-endian 32-bit float
//! binary (lead-major) plus a JSON sidecar with id, leads, sampling rate,
//! labels, and the report text. `corpus_manifest.json` lists the records,
//! the vocabulary, and the class mix. Bit-exact across platforms.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ecgtext_core::synth::{self, Code, Corpus, EcgRecord, Pair, SynthParams};
use ecgtext_core::text::tokenize;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CORPUS_MANIFEST: &str = "corpus_manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct RecordSidecar {
    pub id: String,
    pub patient_id: String,
    pub leads: usize,
    pub sampling_rate_hz: u32,
    pub duration_s: u32,
    pub labels: Vec<String>,
    pub report_text: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub n: usize,
    pub class_mix: Vec<(Vec<String>, f64)>,
    pub leads: usize,
    pub sampling_rate_hz: u32,
    pub duration_s: u32,
    pub classes: Vec<String>,
    pub vocabulary: Vec<String>,
    pub splits: SplitIds,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn signal_bytes(record: &EcgRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(record.signal.len() * 4);
    for v in &record.signal {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_split(dir: &Path, pairs: &[Pair]) -> CliResult<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut ids = Vec::with_capacity(pairs.len());
    for p in pairs {
        let rec = &p.record;
        fs::write(dir.join(format!("{}.f32", rec.id)), signal_bytes(rec))?;
        let sidecar = RecordSidecar {
            id: rec.id.clone(),
            patient_id: rec.patient_id.clone(),
            leads: rec.leads,
            sampling_rate_hz: rec.sampling_rate_hz,
            duration_s: rec.duration_s,
            labels: rec.label_strings(),
            report_text: p.report.raw_text.clone(),
        };
        fs::write(dir.join(format!("{}.json", rec.id)), serde_json::to_vec_pretty(&sidecar)?)?;
        ids.push(rec.id.clone());
    }
    Ok(ids)
}

/// Write a corpus (plus its class mix, for the manifest) to a directory.
pub fn write_corpus(dir: &Path, corpus: &Corpus, class_mix: &[(Vec<Code>, f64)], n: usize) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let train = write_split(&dir.join("train"), &corpus.train)?;
    let val = write_split(&dir.join("val"), &corpus.val)?;
    let test = write_split(&dir.join("test"), &corpus.test)?;
    let vocab_words: Vec<String> = (0..corpus.vocab.size())
        .filter_map(|id| corpus.vocab.word(id).map(str::to_string))
        .collect();
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        seed: corpus.seed,
        n,
        class_mix: class_mix
            .iter()
            .map(|(codes, w)| (codes.iter().map(|c| c.as_str().to_string()).collect(), *w))
            .collect(),
        leads: corpus.params.leads,
        sampling_rate_hz: corpus.params.sampling_rate_hz,
        duration_s: corpus.params.duration_s,
        classes: corpus.classes.iter().map(|c| c.as_str().to_string()).collect(),
        vocabulary: vocab_words,
        splits: SplitIds { train, val, test },
    };
    fs::write(dir.join(CORPUS_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

fn read_record(dir: &Path, id: &str) -> CliResult<(EcgRecord, String)> {
    let sidecar: RecordSidecar =
        serde_json::from_slice(&fs::read(dir.join(format!("{id}.json")))?)?;
    let mut raw = Vec::new();
    fs::File::open(dir.join(format!("{id}.f32")))?.read_to_end(&mut raw)?;
    if raw.len() % 4 != 0 {
        return Err(CliError::data(format!("record {id}: truncated signal file")));
    }
    let signal: Vec<f32> =
        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let expected = sidecar.leads * (sidecar.sampling_rate_hz * sidecar.duration_s) as usize;
    if signal.len() != expected {
        return Err(CliError::data(format!(
            "record {id}: {} samples, expected {expected}",
            signal.len()
        )));
    }
    let mut labels = Vec::new();
    for l in &sidecar.labels {
        labels.push(
            Code::from_str(l).ok_or_else(|| CliError::data(format!("record {id}: unknown label {l}")))?,
        );
    }
    labels.sort_unstable();
    Ok((
        EcgRecord {
            id: sidecar.id,
            patient_id: sidecar.patient_id,
            signal,
            leads: sidecar.leads,
            sampling_rate_hz: sidecar.sampling_rate_hz,
            duration_s: sidecar.duration_s,
            labels,
        },
        sidecar.report_text,
    ))
}

fn read_split(dir: &Path, ids: &[String], vocab: &ecgtext_core::text::Vocab) -> CliResult<Vec<Pair>> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (record, report_text) = read_record(dir, id)?;
        let report = tokenize(&report_text, vocab);
        out.push(Pair { record, report });
    }
    Ok(out)
}

/// Read a corpus directory back into memory. The vocabulary must match the
/// built-in template vocabulary (corpora are only compatible with the
/// tokenizer they were written for).
pub fn read_corpus(dir: &Path) -> CliResult<Corpus> {
    let manifest: CorpusManifest = serde_json::from_slice(
        &fs::read(dir.join(CORPUS_MANIFEST))
            .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?,
    )?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(CliError::data(format!(
            "corpus format version {} unsupported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let vocab = synth::build_vocab();
    let on_disk: Vec<&str> = manifest.vocabulary.iter().map(String::as_str).collect();
    let built: Vec<&str> =
        (0..vocab.size()).filter_map(|id| vocab.word(id)).collect();
    if on_disk != built {
        return Err(CliError::data("corpus vocabulary does not match this build's tokenizer"));
    }
    let mut classes = Vec::new();
    for c in &manifest.classes {
        classes.push(
            Code::from_str(c).ok_or_else(|| CliError::data(format!("unknown class {c}")))?,
        );
    }
    let params = SynthParams {
        leads: manifest.leads,
        sampling_rate_hz: manifest.sampling_rate_hz,
        duration_s: manifest.duration_s,
        ..SynthParams::default()
    };
    Ok(Corpus {
        train: read_split(&dir.join("train"), &manifest.splits.train, &vocab)?,
        val: read_split(&dir.join("val"), &manifest.splits.val, &vocab)?,
        test: read_split(&dir.join("test"), &manifest.splits.test, &vocab)?,
        classes,
        vocab,
        seed: manifest.seed,
        params,
    })
}

/// Parse a class-mix flag: entries separated by commas, codes inside an
/// entry joined with '+', optional ':weight' suffix. Uniform when no
/// weights are given.
pub fn parse_class_mix(spec: &str) -> CliResult<Vec<(Vec<Code>, f64)>> {
    let entries: Vec<&str> = spec.split(',').filter(|s| !s.is_empty()).collect();
    if entries.is_empty() {
        return Err(CliError::usage("empty class mix"));
    }
    let mut out = Vec::new();
    let mut weights_given = 0usize;
    for e in &entries {
        let (codes_part, weight) = match e.split_once(':') {
            Some((c, w)) => {
                let w: f64 =
                    w.parse().map_err(|_| CliError::usage(format!("bad weight in `{e}`")))?;
                weights_given += 1;
                (c, w)
            }
            None => (*e, f64::NAN),
        };
        let mut codes = Vec::new();
        for c in codes_part.split('+') {
            codes.push(
                Code::from_str(c.trim())
                    .ok_or_else(|| CliError::usage(format!("unknown class `{c}`")))?,
            );
        }
        out.push((codes, weight));
    }
    if weights_given == 0 {
        let w = 1.0 / out.len() as f64;
        for (_, weight) in out.iter_mut() {
            *weight = w;
        }
    } else if weights_given != out.len() {
        return Err(CliError::usage("either give weights for all classes or for none"));
    }
    let total: f64 = out.iter().map(|(_, w)| *w).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CliError::usage(format!("class mix weights sum to {total}, expected 1")));
    }
    Ok(out)
}

/// Stable content hash of a directory tree (paths + bytes), for determinism
/// checks.
pub fn tree_hash(dir: &Path) -> CliResult<String> {
    use sha2::{Digest, Sha256};
    let mut files: Vec<PathBuf> = Vec::new();
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    walk(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(dir).unwrap_or(&f);
        h.write_all(rel.to_string_lossy().as_bytes())?;
        h.write_all(&fs::read(&f)?)?;
    }
    Ok(hex_string(&h.finalize()))
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecgtext_core::synth::{make_corpus, CorpusSpec};

    #[test]
    fn corpus_round_trips_bit_exactly() {
        let spec = CorpusSpec::default_mix(24, 5);
        let corpus = make_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), &corpus, &spec.class_mix, spec.n).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(back.train.len(), corpus.train.len());
        for (a, b) in corpus.train.iter().zip(&back.train) {
            assert_eq!(a.record.signal, b.record.signal, "signal bits");
            assert_eq!(a.record.labels, b.record.labels);
            assert_eq!(a.report.token_ids, b.report.token_ids);
            assert_eq!(a.report.sentence_spans, b.report.sentence_spans);
        }
        assert_eq!(back.classes, corpus.classes);
    }

    #[test]
    fn same_seed_gives_identical_tree_hashes() {
        let spec = CorpusSpec::default_mix(16, 9);
        let c1 = make_corpus(&spec).unwrap();
        let c2 = make_corpus(&spec).unwrap();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_corpus(d1.path(), &c1, &spec.class_mix, spec.n).unwrap();
        write_corpus(d2.path(), &c2, &spec.class_mix, spec.n).unwrap();
        assert_eq!(tree_hash(d1.path()).unwrap(), tree_hash(d2.path()).unwrap());
    }

    #[test]
    fn class_mix_parsing() {
        let mix = parse_class_mix("NORM,AFIB,LBBB,STE").unwrap();
        assert_eq!(mix.len(), 4);
        assert!((mix[0].1 - 0.25).abs() < 1e-12);

        let weighted = parse_class_mix("NORM:0.5,AFIB+STE:0.5").unwrap();
        assert_eq!(weighted[1].0, vec![Code::Afib, Code::Ste]);

        assert!(parse_class_mix("NORM:0.5,AFIB:0.2").is_err());
        assert!(parse_class_mix("BOGUS").is_err());
        assert!(parse_class_mix("NORM:0.5,AFIB").is_err());
    }
}
