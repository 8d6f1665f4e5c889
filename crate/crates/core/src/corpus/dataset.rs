use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    generate_passage, generate_questions, AnswerKind, Dataset, Family, GenConfig, GoldSpan, Passage,
    QaPair, SlotCatalog, Split,
};
use crate::error::{Error, Result};
use crate::rng::{child_seed, Stream};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// First line of every dataset file: the effective generator config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub config: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub passage_id: String,
    pub question: String,
    pub family: Family,
    pub answer_kind: AnswerKind,
    pub gold_spans: Vec<GoldSpan>,
    pub gold_sentence_ids: Vec<usize>,
    pub split: Split,
}

/// One JSON Lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Record {
    Header(DatasetHeader),
    Passage(Passage),
    Qa(QaRecord),
}

/// Builds the full corpus. Passage `i` uses `child_seed(cfg.seed, i)`; the
/// question-to-split assignment is a shuffle on stream 0 of `cfg.seed`.
pub fn build_dataset(catalog: &SlotCatalog, cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut passages = Vec::with_capacity(cfg.n_passages);
    let mut qapairs = Vec::new();
    for i in 0..cfg.n_passages {
        let seed = child_seed(cfg.seed, i as u64);
        let mut passage = generate_passage(seed, catalog, cfg)?;
        passage.id = format!("p{i:05}");
        qapairs.extend(generate_questions(&passage, child_seed(seed, 0), cfg));
        passages.push(passage);
    }
    let split = assign_splits(&qapairs, cfg.seed);
    Ok(Dataset { passages, qapairs, split })
}

/// Sizes of the 80:12:8 split for `n` questions.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.80).round() as usize;
    let val = ((n as f64 * 0.12).round() as usize).min(n - train);
    (train, val, n - train - val)
}

fn assign_splits(qapairs: &[QaPair], seed: u64) -> BTreeMap<String, Split> {
    let mut order: Vec<usize> = (0..qapairs.len()).collect();
    Stream::new(seed, 0).shuffle(&mut order);
    let (train, val, _) = split_counts(qapairs.len());
    order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Validation
            } else {
                Split::Test
            };
            (qapairs[i].id.clone(), split)
        })
        .collect()
}

/// Counts questions by their first three lowercased whitespace tokens.
pub fn question_prefix_stats(dataset: &Dataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for qa in &dataset.qapairs {
        let prefix: Vec<String> =
            qa.question.split_whitespace().take(3).map(|t| t.to_lowercase()).collect();
        *counts.entry(prefix.join(" ")).or_insert(0) += 1;
    }
    counts
}

/// Serialises the dataset as JSON Lines: header, passages, then questions.
pub fn write_dataset(path: &Path, dataset: &Dataset, config: &GenConfig) -> Result<()> {
    let mut out = Vec::new();
    let header = Record::Header(DatasetHeader { version: DATASET_FORMAT_VERSION, config: config.clone() });
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for p in &dataset.passages {
        serde_json::to_writer(&mut out, &Record::Passage(p.clone()))?;
        out.push(b'\n');
    }
    for qa in &dataset.qapairs {
        let split = dataset
            .split
            .get(&qa.id)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("question {} has no split", qa.id)))?;
        let record = Record::Qa(QaRecord {
            id: qa.id.clone(),
            passage_id: qa.passage_id.clone(),
            question: qa.question.clone(),
            family: qa.family,
            answer_kind: qa.answer_kind,
            gold_spans: qa.gold_spans.clone(),
            gold_sentence_ids: qa.gold_sentence_ids.clone(),
            split,
        });
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Parses every line of a dataset file into records, annotating failures
/// with the file and line number.
pub fn read_records(path: &Path) -> Result<Vec<(usize, Record)>> {
    let file = fs::File::open(path)?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        records.push((i + 1, record));
    }
    Ok(records)
}

pub fn read_dataset(path: &Path) -> Result<(Option<DatasetHeader>, Dataset)> {
    let mut header = None;
    let mut dataset = Dataset::default();
    for (_, record) in read_records(path)? {
        match record {
            Record::Header(h) => header = Some(h),
            Record::Passage(p) => dataset.passages.push(p),
            Record::Qa(r) => {
                dataset.split.insert(r.id.clone(), r.split);
                dataset.qapairs.push(QaPair {
                    id: r.id,
                    passage_id: r.passage_id,
                    question: r.question,
                    family: r.family,
                    answer_kind: r.answer_kind,
                    gold_spans: r.gold_spans,
                    gold_sentence_ids: r.gold_sentence_ids,
                });
            }
        }
    }
    Ok((header, dataset))
}
