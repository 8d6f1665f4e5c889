//! Re-checks a dataset file record by record.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use crate::corpus::{read_records, split_counts, QaRecord, Record, DATASET_FORMAT_VERSION};
use crate::corpus::{char_slice, AnswerKind, Passage, Split, MAX_SENTENCES};
use crate::error::Result;

/// The first problem found in one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    /// Passage or question id, or `header` / `dataset`.
    pub id: String,
    pub message: String,
}

fn check_passage(p: &Passage) -> std::result::Result<(), String> {
    if p.sentences.is_empty() {
        return Err("passage has no sentences".into());
    }
    if p.sentences.len() > MAX_SENTENCES {
        return Err(format!("{} sentences exceed the limit of {MAX_SENTENCES}", p.sentences.len()));
    }
    let rebuilt = Passage::from_sentences(p.id.clone(), p.sentences.clone());
    if rebuilt.full_text != p.full_text {
        return Err("full_text is not the space-joined sentences".into());
    }
    if rebuilt.sentence_offsets != p.sentence_offsets {
        return Err("sentence_offsets do not match the sentence texts".into());
    }
    for (i, s) in p.sentences.iter().enumerate() {
        if i > 0 && s.timestamp < p.sentences[i - 1].timestamp {
            return Err(format!("sentence {i} is earlier than sentence {}", i - 1));
        }
        for (name, slot) in &s.slots {
            if char_slice(&s.text, slot.char_start, slot.char_end) != Some(slot.value.as_str()) {
                return Err(format!("slot `{name}` of sentence {i} does not cover `{}`", slot.value));
            }
        }
    }
    Ok(())
}

fn check_qa(qa: &QaRecord, passage: Option<&Passage>) -> std::result::Result<(), String> {
    let p = passage.ok_or_else(|| format!("unknown passage {}", qa.passage_id))?;
    if qa.question.trim().is_empty() {
        return Err("empty question".into());
    }
    let spans = qa.gold_spans.len();
    match qa.answer_kind {
        AnswerKind::SingleSpan if spans != 1 => return Err(format!("single_span answer with {spans} spans")),
        AnswerKind::MultiSpan if spans < 2 => return Err(format!("multi_span answer with {spans} spans")),
        AnswerKind::Yes | AnswerKind::No | AnswerKind::Unknown if spans != 0 => {
            return Err(format!("{:?} answer with {spans} spans", qa.answer_kind))
        }
        _ => {}
    }
    let ids = &qa.gold_sentence_ids;
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err("gold_sentence_ids are not strictly increasing".into());
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= p.sentences.len()) {
        return Err(format!("gold sentence {bad} outside the passage"));
    }
    if qa.answer_kind == AnswerKind::MultiSpan && ids.len() < 2 {
        return Err("multi_span answer needs at least two gold sentences".into());
    }
    for g in &qa.gold_spans {
        if g.char_start >= g.char_end {
            return Err(format!("empty gold span ({}, {})", g.char_start, g.char_end));
        }
        if char_slice(&p.full_text, g.char_start, g.char_end) != Some(g.text.as_str()) {
            return Err(format!("gold span ({}, {}) does not cover `{}`", g.char_start, g.char_end, g.text));
        }
        let inside = ids.iter().any(|&i| {
            let (s, e) = p.sentence_range(i);
            s <= g.char_start && g.char_end <= e
        });
        if !inside {
            return Err(format!("gold span `{}` lies outside the gold sentences", g.text));
        }
    }
    Ok(())
}

/// Every invariant violation in the file, at most one per record.
pub fn validate_dataset(path: &Path) -> Result<Vec<Violation>> {
    let records = read_records(path)?;
    let mut violations = Vec::new();
    let mut flag = |line: usize, id: &str, message: String| {
        violations.push(Violation { line, id: id.to_string(), message });
    };

    let mut passages: BTreeMap<String, Passage> = BTreeMap::new();
    let mut headers = 0;
    for (line, record) in &records {
        match record {
            Record::Header(h) => {
                headers += 1;
                if h.version != DATASET_FORMAT_VERSION {
                    flag(*line, "header", format!("unsupported format version {}", h.version));
                } else if let Err(e) = h.config.validate() {
                    flag(*line, "header", e.to_string());
                }
            }
            Record::Passage(p) => {
                if passages.contains_key(&p.id) {
                    flag(*line, &p.id, "duplicate passage id".into());
                    continue;
                }
                if let Err(msg) = check_passage(p) {
                    flag(*line, &p.id, msg);
                }
                // Sentences are the source of truth, so questions are checked
                // against the rebuilt text and one bad passage record does not
                // cascade into its questions.
                passages.insert(p.id.clone(), Passage::from_sentences(p.id.clone(), p.sentences.clone()));
            }
            Record::Qa(_) => {}
        }
    }
    if headers != 1 {
        flag(1, "header", format!("expected one header record, found {headers}"));
    }

    let mut seen = BTreeSet::new();
    let mut split_sizes: BTreeMap<Split, usize> = BTreeMap::new();
    for (line, record) in &records {
        let Record::Qa(qa) = record else { continue };
        if !seen.insert(qa.id.as_str()) {
            flag(*line, &qa.id, "duplicate question id".into());
            continue;
        }
        *split_sizes.entry(qa.split).or_insert(0) += 1;
        if let Err(msg) = check_qa(qa, passages.get(&qa.passage_id)) {
            flag(*line, &qa.id, msg);
        }
    }

    let n = seen.len();
    let (train, val, test) = split_counts(n);
    let size = |s: Split| split_sizes.get(&s).copied().unwrap_or(0);
    let off = |got: usize, want: usize| got.abs_diff(want) > 1;
    if off(size(Split::Train), train) || off(size(Split::Validation), val) || off(size(Split::Test), test) {
        flag(
            records.last().map_or(1, |(l, _)| *l),
            "dataset",
            format!(
                "split sizes {}/{}/{} differ from the 80:12:8 target {train}/{val}/{test}",
                size(Split::Train),
                size(Split::Validation),
                size(Split::Test)
            ),
        );
    }
    Ok(violations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::write_dataset;
    use crate::corpus::{build_dataset, GenConfig};
    use crate::error::Error;
    use crate::rng::Stream;
    use std::fs;

    fn generated(dir: &Path) -> std::path::PathBuf {
        let cfg = GenConfig { n_passages: 20, ..GenConfig::default() };
        let ds = build_dataset(&cfg.catalog, &cfg).unwrap();
        let path = dir.join("d.jsonl");
        write_dataset(&path, &ds, &cfg).unwrap();
        path
    }

    fn rewrite(path: &Path, edit: impl Fn(usize, &mut serde_json::Value) -> bool) -> Vec<String> {
        let text = fs::read_to_string(path).unwrap();
        let mut touched = Vec::new();
        let lines: Vec<String> = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                if edit(i, &mut v) {
                    touched.push(v["id"].as_str().unwrap().to_string());
                }
                serde_json::to_string(&v).unwrap()
            })
            .collect();
        fs::write(path, lines.join("\n") + "\n").unwrap();
        touched
    }

    #[test]
    fn generated_corpus_is_clean() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(validate_dataset(&generated(dir.path())).unwrap(), vec![]);
    }

    #[test]
    fn one_corrupted_offset_names_the_question() {
        let dir = tempfile::tempdir().unwrap();
        let path = generated(dir.path());
        let done = std::cell::Cell::new(false);
        let touched = rewrite(&path, |_, v| {
            let first = !done.get() && v["kind"] == "qa" && v["answer_kind"] == "single_span";
            if first {
                done.set(true);
                let s = v["gold_spans"][0]["char_start"].as_u64().unwrap();
                v["gold_spans"][0]["char_start"] = serde_json::json!(s + 1);
            }
            first
        });
        assert_eq!(touched.len(), 1);
        let found = validate_dataset(&path).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].id, touched[0]);
    }

    #[test]
    fn violations_match_injected_faults() {
        for seed in 0..8 {
            let dir = tempfile::tempdir().unwrap();
            let path = generated(dir.path());
            let mut rng = Stream::new(seed, 0);
            let picks: Vec<bool> = (0..2000).map(|_| rng.chance(0.05)).collect();
            let kinds: Vec<usize> = (0..2000).map(|_| rng.below(4)).collect();
            let touched = rewrite(&path, |i, v| {
                if !picks[i] || v["kind"] == "header" {
                    return false;
                }
                match (v["kind"].as_str().unwrap(), kinds[i]) {
                    ("passage", 0 | 1) => v["sentence_offsets"][0] = serde_json::json!(1),
                    ("passage", _) => v["full_text"] = serde_json::json!("tampered"),
                    ("qa", 0) if v["gold_spans"].as_array().unwrap().is_empty() => {
                        v["gold_sentence_ids"] = serde_json::json!([99])
                    }
                    ("qa", 0) => v["gold_spans"][0]["text"] = serde_json::json!("tampered"),
                    ("qa", 1) => v["question"] = serde_json::json!(" "),
                    ("qa", 2) => v["passage_id"] = serde_json::json!("nowhere"),
                    ("qa", _) => v["gold_sentence_ids"] = serde_json::json!([99]),
                    _ => return false,
                }
                true
            });
            let found = validate_dataset(&path).unwrap();
            let ids: Vec<String> = found.iter().map(|v| v.id.clone()).collect();
            assert_eq!(ids.len(), touched.len(), "seed {seed}: {found:?}");
            for id in &touched {
                assert!(ids.contains(id), "seed {seed}: {id} not reported");
            }
        }
    }

    #[test]
    fn parse_failures_carry_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = generated(dir.path());
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        fs::write(&path, &text).unwrap();
        match validate_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, text.lines().count()),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }
}
