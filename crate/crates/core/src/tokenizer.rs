//! Closed-vocabulary word tokenizer with exact character offsets.
//!
//! Text is split on whitespace, and every punctuation character becomes a
//! token of its own. Tokens are lowercased for lookup while offsets keep
//! pointing at the original characters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";

pub const MAX_QUESTION_TOKENS: usize = 128;
pub const MAX_TOTAL_TOKENS: usize = 512;
pub const MAX_SENTENCE_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub const CLS_ID: u32 = 0;
    pub const SEP_ID: u32 = 1;
    pub const PAD_ID: u32 = 2;
    pub const UNK_ID: u32 = 3;

    /// Builds a vocabulary from an id-ordered token list whose first four
    /// entries are the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let specials = [CLS, SEP, PAD, UNK];
        if tokens.len() < 4 || tokens[..4].iter().zip(specials).any(|(a, b)| a != b) {
            return Err(Error::Config("vocab must start with [CLS] [SEP] [PAD] [UNK]".into()));
        }
        let mut token_to_id = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Self { token_to_id, id_to_token: tokens })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Framing tokens; `[UNK]` stands in for real text and is not special.
    pub fn is_special(id: u32) -> bool {
        id < Self::UNK_ID
    }

    /// Canonical file bytes: a JSON array of tokens in id order.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(&self.id_to_token).expect("strings always serialise")
    }

    /// Hex SHA-256 of the canonical file bytes.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_json_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_tokens(tokens)
    }
}

/// A raw token: lowercased text plus its character range in the source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawToken {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Splits text into lowercased words and single punctuation characters.
pub fn pre_tokenize(text: &str) -> Vec<RawToken> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let flush = |word: &mut String, start: usize, end: usize, out: &mut Vec<RawToken>| {
        if !word.is_empty() {
            out.push(RawToken { text: word.to_lowercase(), start, end });
            word.clear();
        }
    };
    let mut count = 0;
    for (i, c) in text.chars().enumerate() {
        count = i + 1;
        if c.is_whitespace() {
            flush(&mut word, word_start, i, &mut out);
        } else if is_punct(c) {
            flush(&mut word, word_start, i, &mut out);
            out.push(RawToken { text: c.to_lowercase().collect(), start: i, end: i + 1 });
        } else {
            if word.is_empty() {
                word_start = i;
            }
            word.push(c);
        }
    }
    flush(&mut word, word_start, count, &mut out);
    out
}

/// Counts tokens over `corpus` and keeps those seen at least `min_count`
/// times, ordered by descending frequency then lexicographically.
pub fn build_vocab<'a>(corpus: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Vocab> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut documents = 0;
    for text in corpus {
        documents += 1;
        for t in pre_tokenize(text) {
            *counts.entry(t.text).or_insert(0) += 1;
        }
    }
    if documents == 0 {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> =
        counts.into_iter().filter(|(t, c)| *c >= min_count.max(1) && !is_reserved(t)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = [CLS, SEP, PAD, UNK].iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

fn is_reserved(token: &str) -> bool {
    [CLS, SEP, PAD, UNK].contains(&token)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<u32>,
    /// Character range of each token in its own source string; `(0, 0)`
    /// for special tokens.
    pub offsets: Vec<(usize, usize)>,
    pub segment_ids: Vec<u8>,
    pub attention_mask: Vec<u8>,
    pub truncated: bool,
}

impl Encoding {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn push(&mut self, id: u32, offset: (usize, usize), segment: u8) {
        self.ids.push(id);
        self.offsets.push(offset);
        self.segment_ids.push(segment);
        self.attention_mask.push(1);
    }

    fn is_content(&self, i: usize) -> bool {
        self.attention_mask[i] == 1 && self.offsets[i].0 != self.offsets[i].1
    }

    /// Positions of non-special tokens in `segment`.
    pub fn segment_positions(&self, segment: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.segment_ids[i] == segment && self.is_content(i)).collect()
    }

    pub fn context_positions(&self) -> Vec<usize> {
        self.segment_positions(1)
    }

    pub fn question_positions(&self) -> Vec<usize> {
        self.segment_positions(0)
    }

    /// Appends padding up to `len` positions.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(Vocab::PAD_ID);
            self.offsets.push((0, 0));
            self.segment_ids.push(0);
            self.attention_mask.push(0);
        }
    }
}

fn frame_question(vocab: &Vocab, question: &str, max_question: usize) -> Encoding {
    let mut enc = Encoding {
        ids: Vec::new(),
        offsets: Vec::new(),
        segment_ids: Vec::new(),
        attention_mask: Vec::new(),
        truncated: false,
    };
    enc.push(Vocab::CLS_ID, (0, 0), 0);
    for t in pre_tokenize(question).into_iter().take(max_question) {
        enc.push(vocab.id(&t.text), (t.start, t.end), 0);
    }
    enc.push(Vocab::SEP_ID, (0, 0), 0);
    enc
}

/// `[CLS] question [SEP] context [SEP]`, cut to `max_total` positions.
pub fn encode_pair(
    vocab: &Vocab,
    question: &str,
    context: &str,
    max_question: usize,
    max_total: usize,
) -> Encoding {
    let mut enc = frame_question(vocab, question, max_question);
    let budget = max_total.saturating_sub(enc.len() + 1);
    let tokens = pre_tokenize(context);
    enc.truncated = tokens.len() > budget;
    for t in tokens.into_iter().take(budget) {
        enc.push(vocab.id(&t.text), (t.start, t.end), 1);
    }
    enc.push(Vocab::SEP_ID, (0, 0), 1);
    enc
}

/// `[CLS] question [SEP] sentence`, the sentence cut to `max_sentence` tokens.
pub fn encode_sentence_pair(
    vocab: &Vocab,
    question: &str,
    sentence: &str,
    max_question: usize,
    max_sentence: usize,
) -> Encoding {
    let mut enc = frame_question(vocab, question, max_question);
    let tokens = pre_tokenize(sentence);
    enc.truncated = tokens.len() > max_sentence;
    for t in tokens.into_iter().take(max_sentence) {
        enc.push(vocab.id(&t.text), (t.start, t.end), 1);
    }
    enc
}

/// Maps a character span of the context onto the first and last context
/// tokens that overlap it (absolute positions in the encoding).
pub fn char_span_to_token_span(enc: &Encoding, span: (usize, usize)) -> Result<(usize, usize)> {
    let (start, end) = span;
    let unmappable = || Error::UnmappableSpan { start, end };
    if start >= end {
        return Err(unmappable());
    }
    let hits: Vec<usize> = enc
        .context_positions()
        .into_iter()
        .filter(|&i| {
            let (a, b) = enc.offsets[i];
            a < end && start < b
        })
        .collect();
    match (hits.first(), hits.last()) {
        (Some(&s), Some(&e)) => Ok((s, e)),
        _ => Err(unmappable()),
    }
}
