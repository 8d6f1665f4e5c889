//! EM/F1 scoring, classifier precision/recall, and the evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{AnswerKind, Dataset, Passage, QaPair, Split};
use crate::error::{Error, Result};
use crate::heads::AnswerType;
use crate::inference::{answer, Answer, AnswerClass, DecodeConfig, Prediction, TextSpan};
use crate::model::Model;
use crate::tokenizer::pre_tokenize;
use crate::training::Multiplicity;

/// Lowercase, drop punctuation, drop the articles a/an/the, collapse spaces.
pub fn normalize_text(s: &str) -> String {
    let stripped: String = s
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn em_single(pred: &str, gold: &str) -> f64 {
    if normalize_text(pred) == normalize_text(gold) {
        1.0
    } else {
        0.0
    }
}

/// Token-bag F1 after normalisation.
pub fn f1_single(pred: &str, gold: &str) -> f64 {
    let p = normalize_text(pred);
    let g = normalize_text(gold);
    let p: Vec<&str> = p.split_whitespace().collect();
    let g: Vec<&str> = g.split_whitespace().collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Largest side for which the alignment is solved exactly.
pub const EXACT_ALIGNMENT_LIMIT: usize = 8;

/// Best one-to-one alignment total for a score matrix (`rows × cols`).
fn best_alignment(scores: &[Vec<f64>], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transposed = cols > rows;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |r: usize, c: usize| if transposed { scores[c][r] } else { scores[r][c] };
    if m <= EXACT_ALIGNMENT_LIMIT {
        // dp[mask]: best total using exactly the small-side items in `mask`.
        let full = 1usize << m;
        let mut dp = vec![f64::NEG_INFINITY; full];
        dp[0] = 0.0;
        for r in 0..n {
            let prev = dp.clone();
            for mask in 0..full {
                if prev[mask] == f64::NEG_INFINITY {
                    continue;
                }
                for c in 0..m {
                    if mask & (1 << c) == 0 {
                        let next = mask | (1 << c);
                        dp[next] = dp[next].max(prev[mask] + at(r, c));
                    }
                }
            }
        }
        return dp.into_iter().fold(0.0, f64::max);
    }
    let mut pairs: Vec<(f64, usize, usize)> =
        (0..n).flat_map(|r| (0..m).map(move |c| (r, c))).map(|(r, c)| (at(r, c), r, c)).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_r, mut used_c) = (vec![false; n], vec![false; m]);
    let mut total = 0.0;
    for (s, r, c) in pairs {
        if !used_r[r] && !used_c[c] {
            used_r[r] = true;
            used_c[c] = true;
            total += s;
        }
    }
    total
}

/// EM (multiset equality) and alignment F1 for lists of spans.
pub fn multi_span_scores<S: AsRef<str>, G: AsRef<str>>(preds: &[S], golds: &[G]) -> (f64, f64) {
    let mut p: Vec<String> = preds.iter().map(|s| normalize_text(s.as_ref())).collect();
    let mut g: Vec<String> = golds.iter().map(|s| normalize_text(s.as_ref())).collect();
    p.sort();
    g.sort();
    let em = if p == g { 1.0 } else { 0.0 };
    if preds.is_empty() && golds.is_empty() {
        return (em, 1.0);
    }
    let scores: Vec<Vec<f64>> = preds
        .iter()
        .map(|a| golds.iter().map(|b| f1_single(a.as_ref(), b.as_ref())).collect())
        .collect();
    let f1 = best_alignment(&scores, preds.len(), golds.len()) / preds.len().max(golds.len()) as f64;
    (em, f1)
}

/// Precision, recall and F1 for `positive`; zero denominators give 0.
pub fn classifier_prf<L: PartialEq>(pred: &[L], gold: &[L], positive: &L) -> Result<(f64, f64, f64)> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predictions for {} labels", pred.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        match (p == positive, g == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(prf_from_counts(tp, fp, fn_))
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    (precision, recall, f1)
}

/// Anything that can answer a question about a passage.
pub trait Predictor {
    fn predict(&self, passage: &Passage, qa: &QaPair) -> Result<Prediction>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub decode: DecodeConfig,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, passage: &Passage, qa: &QaPair) -> Result<Prediction> {
        answer(self.model, passage, &qa.question, &self.decode)
    }
}

/// Feeds the gold answer back as the prediction.
pub struct GoldOracle;

impl Predictor for GoldOracle {
    fn predict(&self, _passage: &Passage, qa: &QaPair) -> Result<Prediction> {
        let spans: Vec<TextSpan> = qa
            .gold_spans
            .iter()
            .map(|g| TextSpan { char_start: g.char_start, char_end: g.char_end, text: g.text.clone() })
            .collect();
        let (kind, answer_type) = match qa.answer_kind {
            AnswerKind::SingleSpan => (AnswerClass::Span, AnswerType::Unknown),
            AnswerKind::MultiSpan => (AnswerClass::MultiSpan, AnswerType::Unknown),
            AnswerKind::Yes => (AnswerClass::Yes, AnswerType::Yes),
            AnswerKind::No => (AnswerClass::No, AnswerType::No),
            AnswerKind::Unknown => (AnswerClass::Unknown, AnswerType::Unknown),
        };
        let multi = qa.answer_kind == AnswerKind::MultiSpan;
        Ok(Prediction {
            answer: Answer { kind, spans, confidence: 1.0 },
            multiplicity: if multi { Multiplicity::Multi } else { Multiplicity::Single },
            answer_type,
            sentence_ids: if multi { qa.gold_sentence_ids.clone() } else { Vec::new() },
            p_s: if multi { [0.0, 1.0] } else { [1.0, 0.0] },
            warnings: Vec::new(),
        })
    }
}

/// EM and F1 in percent over `n` examples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub em: f64,
    pub f1: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n: usize,
}

impl Prf {
    fn percent((p, r, f): (f64, f64, f64), n: usize) -> Self {
        Self { precision: 100.0 * p, recall: 100.0 * r, f1: 100.0 * f, n }
    }
}

#[derive(Default)]
struct Acc {
    em: f64,
    f1: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, em: f64, f1: f64) {
        self.em += em;
        self.f1 += f1;
        self.n += 1;
    }

    fn cell(&self) -> Cell {
        let mean = |v: f64| if self.n == 0 { 0.0 } else { 100.0 * v / self.n as f64 };
        Cell { em: mean(self.em), f1: mean(self.f1), n: self.n }
    }
}

/// Passage-length bucket edges, in passage tokens; the last is closed and
/// also takes anything longer.
pub const LENGTH_BUCKETS: [(usize, usize); 4] = [(0, 128), (128, 256), (256, 384), (384, 512)];

pub fn length_bucket(tokens: usize) -> String {
    let (lo, hi) = LENGTH_BUCKETS
        .iter()
        .copied()
        .find(|&(lo, hi)| tokens >= lo && tokens < hi)
        .unwrap_or(LENGTH_BUCKETS[3]);
    format!("{lo}-{hi}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub single_span: Cell,
    pub multi_span: Cell,
    pub overall: Cell,
    /// Multi-span questions keyed by gold span count.
    pub by_span_count: BTreeMap<usize, Cell>,
    /// All questions keyed by passage length bucket.
    pub by_passage_length: BTreeMap<String, Cell>,
    pub by_answer_kind: BTreeMap<String, Cell>,
    /// Multi-span predictor, multi as the positive class.
    pub multispan_classifier: Prf,
    /// Answer-type predictor on yes/no/unknown questions, macro-averaged.
    pub answer_type_classifier: Prf,
    /// Tagger sentence choices against gold sentences on multi-span
    /// questions, micro-averaged.
    pub sentence_selection: Prf,
    pub n_examples: usize,
}

fn cells<K: Ord>(m: BTreeMap<K, Acc>) -> BTreeMap<K, Cell> {
    m.into_iter().map(|(k, a)| (k, a.cell())).collect()
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

impl EvalReport {
    /// Report JSON with percentages rounded to one decimal.
    pub fn to_rounded_json(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serialises");
        round_floats(&mut value);
        value
    }
}

fn round_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            *v = serde_json::json!(round1(n.as_f64().unwrap_or(0.0)));
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

fn predicted_texts(answer: &Answer) -> Vec<&str> {
    match answer.kind {
        AnswerClass::Span | AnswerClass::MultiSpan => answer.spans.iter().map(|s| s.text.as_str()).collect(),
        _ => Vec::new(),
    }
}

/// Scores one prediction; returns `(em, f1)` in `[0, 1]`.
pub fn score_prediction(qa: &QaPair, answer: &Answer) -> (f64, f64) {
    let matches = |c: AnswerClass| if answer.kind == c { (1.0, 1.0) } else { (0.0, 0.0) };
    match qa.answer_kind {
        AnswerKind::Yes => matches(AnswerClass::Yes),
        AnswerKind::No => matches(AnswerClass::No),
        AnswerKind::Unknown => matches(AnswerClass::Unknown),
        AnswerKind::SingleSpan => {
            let gold = qa.gold_spans.first().map_or("", |g| g.text.as_str());
            let pred = predicted_texts(answer).join(" ");
            (em_single(&pred, gold), f1_single(&pred, gold))
        }
        AnswerKind::MultiSpan => {
            let golds: Vec<&str> = qa.gold_spans.iter().map(|g| g.text.as_str()).collect();
            multi_span_scores(&predicted_texts(answer), &golds)
        }
    }
}

fn kind_name(kind: AnswerKind) -> &'static str {
    match kind {
        AnswerKind::SingleSpan => "single_span",
        AnswerKind::MultiSpan => "multi_span",
        AnswerKind::Yes => "yes",
        AnswerKind::No => "no",
        AnswerKind::Unknown => "unknown",
    }
}

/// Evaluates `predictor` on one split (or every question when `split` is
/// `None`).
pub fn evaluate(dataset: &Dataset, split: Option<Split>, predictor: &dyn Predictor) -> Result<EvalReport> {
    let passages = dataset.passage_index();
    let (mut single, mut multi, mut overall) = (Acc::default(), Acc::default(), Acc::default());
    let mut by_span_count: BTreeMap<usize, Acc> = BTreeMap::new();
    // Every bucket is reported, even when empty, so the report shape is fixed.
    let mut by_length: BTreeMap<String, Acc> =
        LENGTH_BUCKETS.iter().map(|&(lo, _)| (length_bucket(lo), Acc::default())).collect();
    let mut by_kind: BTreeMap<String, Acc> = BTreeMap::new();
    let (mut ms_pred, mut ms_gold) = (Vec::new(), Vec::new());
    let (mut at_pred, mut at_gold) = (Vec::new(), Vec::new());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut lengths: BTreeMap<&str, usize> = BTreeMap::new();

    let qas = dataset.qapairs.iter().filter(|q| split.is_none() || dataset.split_of(q) == split);
    for qa in qas {
        let passage = passages
            .get(qa.passage_id.as_str())
            .ok_or_else(|| Error::Input(format!("{}: unknown passage {}", qa.id, qa.passage_id)))?;
        let prediction = predictor.predict(passage, qa)?;
        let (em, f1) = score_prediction(qa, &prediction.answer);
        overall.add(em, f1);
        by_kind.entry(kind_name(qa.answer_kind).into()).or_default().add(em, f1);
        let length = *lengths.entry(passage.id.as_str()).or_insert_with(|| pre_tokenize(&passage.full_text).len());
        by_length.entry(length_bucket(length)).or_default().add(em, f1);

        let gold_multi = qa.answer_kind == AnswerKind::MultiSpan;
        ms_pred.push(prediction.multiplicity);
        ms_gold.push(if gold_multi { Multiplicity::Multi } else { Multiplicity::Single });
        if gold_multi {
            multi.add(em, f1);
            by_span_count.entry(qa.gold_spans.len()).or_default().add(em, f1);
            for id in &prediction.sentence_ids {
                if qa.gold_sentence_ids.contains(id) {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
            fn_ += qa.gold_sentence_ids.iter().filter(|id| !prediction.sentence_ids.contains(id)).count();
        } else {
            single.add(em, f1);
        }
        let gold_type = match qa.answer_kind {
            AnswerKind::Yes => Some(AnswerType::Yes),
            AnswerKind::No => Some(AnswerType::No),
            AnswerKind::Unknown => Some(AnswerType::Unknown),
            _ => None,
        };
        if let Some(t) = gold_type {
            at_pred.push(prediction.answer_type);
            at_gold.push(t);
        }
    }

    let mut macro_avg = (0.0, 0.0, 0.0);
    for class in AnswerType::ALL {
        let (p, r, f) = classifier_prf(&at_pred, &at_gold, &class)?;
        macro_avg = (macro_avg.0 + p / 3.0, macro_avg.1 + r / 3.0, macro_avg.2 + f / 3.0);
    }
    Ok(EvalReport {
        single_span: single.cell(),
        multi_span: multi.cell(),
        overall: overall.cell(),
        by_span_count: cells(by_span_count),
        by_passage_length: cells(by_length),
        by_answer_kind: cells(by_kind),
        multispan_classifier: Prf::percent(classifier_prf(&ms_pred, &ms_gold, &Multiplicity::Multi)?, ms_gold.len()),
        answer_type_classifier: Prf::percent(macro_avg, at_gold.len()),
        sentence_selection: Prf::percent(prf_from_counts(tp, fp, fn_), multi.n),
        n_examples: overall.n,
    })
}
