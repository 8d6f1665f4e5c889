//! Helpers shared by unit tests.

use std::collections::BTreeMap;

use crate::corpus::{render_sentence, render_time, Passage, SentenceRecord};

/// Relative error between an analytic and a numeric derivative. The
/// denominator is floored at 1e-4 so derivatives that vanish analytically
/// are compared against finite-difference round-off on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4)
}

pub fn sentence(template: &str, minutes: u32, person: &str, value: &str, location: &str) -> SentenceRecord {
    let mut values = BTreeMap::new();
    values.insert("time", render_time(minutes));
    values.insert("person", person.to_string());
    values.insert("location", location.to_string());
    let slot = match template {
        "emotion" => "emotion",
        "utterance" => "utterance",
        _ => "activity",
    };
    values.insert(slot, value.to_string());
    render_sentence(template, minutes, &values).unwrap()
}

/// Two people, five events, two of them in the kitchen before noon.
pub fn morning_passage() -> Passage {
    Passage::from_sentences(
        "demo".into(),
        vec![
            sentence("activity_at", 7 * 60, "Jenny", "drinking a cup of coffee", "kitchen"),
            sentence("activity_tail", 8 * 60, "Bob", "washing the dishes", "kitchen"),
            sentence("emotion", 10 * 60, "Jenny", "happy", "garden"),
            sentence("activity_at", 16 * 60, "Bob", "reading a book on the couch", "living room"),
            sentence("activity_at", 18 * 60, "Jenny", "playing the piano", "living room"),
        ],
    )
}

use crate::corpus::{generate_questions, AnswerKind, GenConfig, QaPair};
use crate::encoder::EncoderConfig;
use crate::model::{Model, ModelConfig};
use crate::tokenizer::{build_vocab, Vocab};

/// A few questions of every answer kind about [`morning_passage`].
pub fn morning_questions() -> Vec<QaPair> {
    let p = morning_passage();
    let cfg = GenConfig { questions_per_passage: 40, ..GenConfig::default() };
    let mut out: Vec<QaPair> = Vec::new();
    for seed in 0..10 {
        for q in generate_questions(&p, seed, &cfg) {
            if !out.iter().any(|o| o.question == q.question) {
                out.push(q);
            }
        }
    }
    out
}

pub fn first_of_kind(qas: &[QaPair], kind: AnswerKind) -> QaPair {
    qas.iter().find(|q| q.answer_kind == kind).cloned().expect("kind present")
}

/// L=1, H=2, d=8 model whose vocabulary covers the morning passage.
pub fn tiny_model(dropout_rate: f64) -> Model {
    let p = morning_passage();
    let qs = morning_questions();
    let texts = std::iter::once(p.full_text.as_str()).chain(qs.iter().map(|q| q.question.as_str()));
    let vocab: Vocab = build_vocab(texts, 1).unwrap();
    let cfg = ModelConfig::new(EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        ffn_dim: 16,
        max_positions: 128,
        vocab_size: vocab.len(),
        dropout_rate,
    });
    Model::new(cfg, vocab, 5).unwrap()
}
