//! Toy whitespace tokenizer over a fixed template vocabulary.
//!
//! Normalization is exactly: lowercase conversion, punctuation removal, and
//! special-character elimination (anything outside `[a-z0-9]` after
//! lowercasing acts as a word separator). Sentence boundaries come from
//! period positions before punctuation is stripped.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::RngCore;

use crate::rng::RngExt;

/// Special token ids occupy the low end of the vocabulary.
pub mod specials {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const CLS: usize = 3;
    pub const MASK: usize = 4;
    pub const UNK: usize = 5;
    pub const COUNT: usize = 6;

    pub fn name(id: usize) -> Option<&'static str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            CLS => Some("<cls>"),
            MASK => Some("<mask>"),
            UNK => Some("<unk>"),
            _ => None,
        }
    }
}

/// Word vocabulary: special tokens followed by sorted unique words.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Build from a set of texts; words are sorted for determinism.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = Vec::new();
        let mut seen = BTreeMap::new();
        for t in texts {
            for w in normalize(t).split_whitespace() {
                if seen.insert(w.to_string(), ()).is_none() {
                    uniq.push(w.to_string());
                }
            }
        }
        uniq.sort_unstable();
        let index = uniq.iter().enumerate().map(|(i, w)| (w.clone(), specials::COUNT + i)).collect();
        Vocab { words: uniq, index }
    }

    pub fn size(&self) -> usize {
        specials::COUNT + self.words.len()
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(specials::UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        id.checked_sub(specials::COUNT).and_then(|i| self.words.get(i)).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < specials::COUNT
    }

    /// Ids of real words (for the MLM random-replacement branch).
    pub fn first_word_id(&self) -> usize {
        specials::COUNT
    }
}

/// Lowercase, strip punctuation and special characters, collapse whitespace.
pub fn normalize(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut last_space = true;
    for ch in raw.chars() {
        let ch = ch.to_ascii_lowercase();
        if ch.is_ascii_lowercase() || ch.is_ascii_digit() {
            out.push(ch);
            last_space = false;
        } else if !last_space {
            out.push(' ');
            last_space = true;
        }
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// A tokenized report: `[BOS, w_1, ..., w_N, EOS]` with sentence spans over
/// the word positions.
#[derive(Clone, Debug, PartialEq)]
pub struct TextReport {
    pub token_ids: Vec<usize>,
    /// Half-open `[start, end)` index ranges into `token_ids`; disjoint,
    /// ordered, covering exactly the non-special tokens.
    pub sentence_spans: Vec<(usize, usize)>,
    pub raw_text: String,
}

impl TextReport {
    pub fn word_count(&self) -> usize {
        self.token_ids.iter().filter(|&&id| !Vocab::is_special(id)).count()
    }

    /// Word token ids in order (no specials).
    pub fn word_ids(&self) -> Vec<usize> {
        self.token_ids.iter().copied().filter(|&id| !Vocab::is_special(id)).collect()
    }

    /// Positions (into token_ids) of non-special tokens.
    pub fn word_positions(&self) -> Vec<usize> {
        self.token_ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| !Vocab::is_special(id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Encoder input: the report with a CLS token appended at the end, so
    /// causal attention lets CLS see the whole sequence.
    pub fn ids_with_cls(&self) -> Vec<usize> {
        let mut ids = self.token_ids.clone();
        ids.push(specials::CLS);
        ids
    }

    pub fn is_empty(&self) -> bool {
        self.word_count() == 0
    }
}

/// Tokenize raw text: sentences split on '.', then normalized per sentence.
/// Out-of-vocabulary words map to UNK.
pub fn tokenize(raw: &str, vocab: &Vocab) -> TextReport {
    let mut token_ids = Vec::new();
    let mut spans = Vec::new();
    token_ids.push(specials::BOS);
    for chunk in raw.split('.') {
        let norm = normalize(chunk);
        if norm.is_empty() {
            continue;
        }
        let start = token_ids.len();
        for w in norm.split_whitespace() {
            token_ids.push(vocab.word_id(w));
        }
        if token_ids.len() > start {
            spans.push((start, token_ids.len()));
        }
    }
    token_ids.push(specials::EOS);
    TextReport { token_ids, sentence_spans: spans, raw_text: raw.to_string() }
}

/// Inverse of tokenize up to normalization: word tokens joined by spaces.
pub fn detokenize(report: &TextReport, vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in &report.token_ids {
        if let Some(w) = vocab.word(id) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(w);
        } else if id == specials::UNK {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str("<unk>");
        }
    }
    out
}

/// BERT-style masking over word tokens: 15% of word positions are selected
/// (at least one); of those, 80% become MASK, 10% a random word token, 10%
/// stay unchanged. Returns the masked ids and the selected positions.
pub fn apply_mlm_mask<R: RngCore>(
    report: &TextReport,
    vocab: &Vocab,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut masked = report.token_ids.clone();
    let word_pos = report.word_positions();
    if word_pos.is_empty() {
        return (masked, Vec::new());
    }
    let k = libm::round((word_pos.len() as f64) * 0.15) as usize;
    let k = k.max(1).min(word_pos.len());
    let chosen: Vec<usize> = {
        let picked = rng.sample_indices(word_pos.len(), k);
        picked.into_iter().map(|i| word_pos[i]).collect()
    };
    let n_words = vocab.size() - specials::COUNT;
    for &pos in &chosen {
        let roll = rng.uniform();
        if roll < 0.8 {
            masked[pos] = specials::MASK;
        } else if roll < 0.9 && n_words > 0 {
            masked[pos] = vocab.first_word_id() + rng.below(n_words);
        }
    }
    (masked, chosen)
}
