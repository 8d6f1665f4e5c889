//! Routed decoding: the multi-span predictor picks a path, then either the
//! span/answer-type heads or the sentence tagger produce the answer.

use serde::{Deserialize, Serialize};

use crate::corpus::{char_slice, Passage, MAX_SENTENCES};
use crate::encoder::encode;
use crate::error::{Error, Result};
use crate::heads::{
    pool, predict_answer_type, predict_multispan, span_logits, tag_sentence, AnswerType, AnswerTypeDistribution,
    SentenceTagDistribution, SpanDistributions,
};
use crate::linalg::Scalar;
use crate::model::Model;
use crate::tokenizer::Encoding;
use crate::training::{encode_question, encode_sentences, Multiplicity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_answer_tokens: usize,
    pub tagger_threshold: f64,
    pub max_sentences: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { max_answer_tokens: 30, tagger_threshold: 0.5, max_sentences: MAX_SENTENCES }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_answer_tokens == 0 || self.max_sentences == 0 {
            return Err(Error::Config("max_answer_tokens and max_sentences must be positive".into()));
        }
        if !(self.tagger_threshold > 0.0 && self.tagger_threshold < 1.0) {
            return Err(Error::Config("tagger_threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerClass {
    Span,
    Yes,
    No,
    Unknown,
    MultiSpan,
}

impl From<AnswerType> for AnswerClass {
    fn from(t: AnswerType) -> Self {
        match t {
            AnswerType::Yes => AnswerClass::Yes,
            AnswerType::No => AnswerClass::No,
            AnswerType::Unknown => AnswerClass::Unknown,
        }
    }
}

/// A character range of the passage and the text it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSpan {
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub kind: AnswerClass,
    pub spans: Vec<TextSpan>,
    pub confidence: f64,
}

impl Answer {
    fn typed(t: AnswerType, confidence: f64) -> Self {
        Self { kind: t.into(), spans: Vec::new(), confidence }
    }
}

/// Best admissible `(i, j)` over context positions with `i ≤ j` and
/// `j − i < max_answer_tokens`, scored by `ln p_start[i] + ln p_end[j]`.
/// Ties keep the smaller `i`, then the smaller `j`.
pub fn best_span<T: Scalar>(dists: &SpanDistributions<T>, enc: &Encoding, max_answer_tokens: usize) -> Option<(usize, usize, f64)> {
    let context = enc.context_positions();
    let mut best: Option<(usize, usize, f64)> = None;
    for (a, &i) in context.iter().enumerate() {
        let start = dists.p_start[i].to_f64().ln();
        for &j in &context[a..] {
            if j - i >= max_answer_tokens {
                break;
            }
            let score = start + dists.p_end[j].to_f64().ln();
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((i, j, score));
            }
        }
    }
    best
}

pub fn decode_single<T: Scalar>(
    dists: &SpanDistributions<T>,
    p_a: &AnswerTypeDistribution<T>,
    enc: &Encoding,
    context: &str,
    cfg: &DecodeConfig,
) -> Answer {
    let typed = || {
        let t = p_a.argmax();
        Answer::typed(t, p_a.p_a[t.index()].to_f64())
    };
    let Some((i, j, score)) = best_span(dists, enc, cfg.max_answer_tokens) else {
        return Answer::typed(AnswerType::Unknown, p_a.p_a[AnswerType::Unknown.index()].to_f64());
    };
    let cls = dists.p_start[0].to_f64().ln() + dists.p_end[0].to_f64().ln();
    if cls >= score {
        return typed();
    }
    let (char_start, char_end) = (enc.offsets[i].0, enc.offsets[j].1);
    let text = char_slice(context, char_start, char_end).unwrap_or_default().to_string();
    Answer { kind: AnswerClass::Span, spans: vec![TextSpan { char_start, char_end, text }], confidence: score.exp() }
}

/// Indices of the sentences the tagger selects at threshold `tau`, falling
/// back to the single most probable sentence.
pub fn select_sentences<T: Scalar>(tags: &[SentenceTagDistribution<T>], tau: f64) -> Vec<usize> {
    let chosen: Vec<usize> = (0..tags.len()).filter(|&i| tags[i].p_t[1].to_f64() >= tau).collect();
    if !chosen.is_empty() || tags.is_empty() {
        return chosen;
    }
    let mut best = 0;
    for i in 1..tags.len() {
        if tags[i].p_t[1] > tags[best].p_t[1] {
            best = i;
        }
    }
    vec![best]
}

pub fn decode_multi<T: Scalar>(
    tags: &[SentenceTagDistribution<T>],
    passage: &Passage,
    cfg: &DecodeConfig,
) -> Result<Answer> {
    if passage.sentences.is_empty() || tags.is_empty() {
        return Err(Error::Degenerate(format!("passage {} has no sentences to tag", passage.id)));
    }
    if tags.len() > passage.sentences.len() || tags.len() > cfg.max_sentences {
        return Err(Error::Consistency(format!(
            "{} tags for {} sentences (limit {})",
            tags.len(),
            passage.sentences.len(),
            cfg.max_sentences
        )));
    }
    let chosen = select_sentences(tags, cfg.tagger_threshold);
    let spans = chosen
        .iter()
        .map(|&i| {
            let (char_start, char_end) = passage.sentence_range(i);
            TextSpan { char_start, char_end, text: passage.sentences[i].text.clone() }
        })
        .collect();
    let confidence = chosen.iter().map(|&i| tags[i].p_t[1].to_f64()).sum::<f64>() / chosen.len() as f64;
    Ok(Answer { kind: AnswerClass::MultiSpan, spans, confidence })
}

/// An answer together with the classifier decisions behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub answer: Answer,
    /// Argmax of the multi-span predictor.
    pub multiplicity: Multiplicity,
    /// Argmax of the answer-type predictor.
    pub answer_type: AnswerType,
    /// Sentences chosen by the tagger; empty on the single-span path.
    pub sentence_ids: Vec<usize>,
    pub p_s: [f64; 2],
    pub warnings: Vec<String>,
}

pub fn answer(model: &Model, passage: &Passage, question: &str, cfg: &DecodeConfig) -> Result<Prediction> {
    if question.trim().is_empty() {
        return Err(Error::Input("question is empty".into()));
    }
    let mut warnings = Vec::new();
    let clipped;
    let passage = if passage.sentences.len() > cfg.max_sentences {
        warnings.push(format!(
            "passage {} has {} sentences; only the first {} are considered",
            passage.id,
            passage.sentences.len(),
            cfg.max_sentences
        ));
        clipped = Passage::from_sentences(passage.id.clone(), passage.sentences[..cfg.max_sentences].to_vec());
        &clipped
    } else {
        passage
    };
    let (params, ecfg) = (&model.params, &model.config.encoder);
    let enc = encode_question(&model.vocab, question, &passage.full_text, ecfg.max_positions);
    if enc.truncated {
        warnings.push(format!("passage {} was truncated to {} tokens", passage.id, enc.len()));
    }
    let h = encode(&params.encoder, ecfg, &enc, false, 0)?;
    let decision = predict_multispan(h.row(0), &params.heads);
    let p_a = predict_answer_type(h.row(0), &params.heads);
    let multiplicity = if decision.is_multi() { Multiplicity::Multi } else { Multiplicity::Single };
    let p_s = [decision.p_s[0] as f64, decision.p_s[1] as f64];

    let (answer, sentence_ids) = match multiplicity {
        Multiplicity::Single => {
            let dists = span_logits(&h, &params.heads, &enc.attention_mask);
            (decode_single(&dists, &p_a, &enc, &passage.full_text, cfg), Vec::new())
        }
        Multiplicity::Multi => {
            let mut tags = Vec::new();
            for s in encode_sentences(&model.vocab, question, passage) {
                let hs = encode(&params.encoder, ecfg, &s, false, 0)?;
                let q = pool(&hs, &s.question_positions())?;
                let sent = pool(&hs, &s.context_positions())?;
                tags.push(tag_sentence(&q, &sent, &params.heads));
            }
            let ids = select_sentences(&tags, cfg.tagger_threshold);
            (decode_multi(&tags, passage, cfg)?, ids)
        }
    };
    Ok(Prediction { answer, multiplicity, answer_type: p_a.argmax(), sentence_ids, p_s, warnings })
}
