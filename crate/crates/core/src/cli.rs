//! Command-line entry point. Machine output goes to stdout or files,
//! diagnostics to stderr.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::{question_prefix_stats, read_dataset, read_records, write_dataset, Record};
use crate::corpus::{build_dataset, AnswerKind, Dataset, Passage, Split};
use crate::error::{Error, Result};
use crate::inference::{answer, DecodeConfig};
use crate::metrics::{evaluate, ModelPredictor};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::{build_vocab, pre_tokenize, Vocab};
use crate::training::{prepare_examples, start_run, supervision_counts, train, LogEvent};
use crate::validate::validate_dataset;

#[derive(Debug, Parser)]
#[command(name = "mseqa", version, about = "Multi-span extractive question answering")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic activity-report corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print corpus statistics as JSON.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Re-check every record of a corpus file; exits 1 on any violation.
    Validate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Continue from a `<out>.last` state file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Decoding settings; defaults to the checkpoint's run config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Answer questions about a passage, one JSON answer per line.
    Ask {
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON Lines file holding passage records.
        #[arg(long)]
        passage_file: PathBuf,
        /// Which passage to use; defaults to the first.
        #[arg(long)]
        passage_id: Option<String>,
        /// Answer one question instead of reading questions from stdin.
        #[arg(long)]
        question: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Validation => Some(Split::Validation),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

/// Runs the CLI and maps the outcome to a process exit code: 0 on success,
/// 1 on user error, 2 on internal error.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::default().effective(),
    }
}

fn load_dataset(path: &Path) -> Result<(Option<crate::corpus::DatasetHeader>, Dataset)> {
    if !path.exists() {
        return Err(Error::Input(format!("data file {} does not exist", path.display())));
    }
    read_dataset(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Input(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenData { config, seed, out } => gen_data(config.as_deref(), seed, &out),
        Command::Stats { data } => stats(&data),
        Command::Validate { data } => validate(&data),
        Command::Train { data, config, out, log, resume } => {
            train_cmd(&data, config.as_deref(), &out, &log, resume.as_deref())
        }
        Command::Eval { data, ckpt, report, split, config } => {
            eval_cmd(&data, &ckpt, &report, split.split(), config.as_deref())
        }
        Command::Ask { ckpt, passage_file, passage_id, question } => {
            ask(&ckpt, &passage_file, passage_id.as_deref(), question.as_deref())
        }
    }
}

fn gen_data(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.data.seed = seed;
    }
    let dataset = build_dataset(&cfg.data.catalog, &cfg.data)?;
    write_dataset(out, &dataset, &cfg.data)?;
    eprintln!(
        "wrote {} passages and {} questions to {}",
        dataset.passages.len(),
        dataset.qapairs.len(),
        out.display()
    );
    Ok(0)
}

fn kind_name(kind: AnswerKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

fn stats(data: &Path) -> Result<i32> {
    let (_, ds) = load_dataset(data)?;
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_split: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_family: BTreeMap<String, usize> = BTreeMap::new();
    let mut span_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for qa in &ds.qapairs {
        *by_kind.entry(kind_name(qa.answer_kind)).or_default() += 1;
        let family = serde_json::to_value(qa.family)?.as_str().unwrap_or_default().to_string();
        *by_family.entry(family).or_default() += 1;
        if let Some(s) = ds.split_of(qa) {
            *by_split.entry(serde_json::to_value(s)?.as_str().unwrap_or_default().to_string()).or_default() += 1;
        }
        if qa.answer_kind == AnswerKind::MultiSpan {
            *span_counts.entry(qa.gold_spans.len()).or_default() += 1;
        }
    }
    let lengths: Vec<usize> = ds.passages.iter().map(|p| pre_tokenize(&p.full_text).len()).collect();
    let sentences: Vec<usize> = ds.passages.iter().map(|p| p.sentences.len()).collect();
    let summary = |v: &[usize]| {
        let n = v.len().max(1) as f64;
        json!({
            "min": v.iter().min(),
            "max": v.iter().max(),
            "mean": v.iter().sum::<usize>() as f64 / n,
        })
    };
    let report = json!({
        "passages": ds.passages.len(),
        "questions": ds.qapairs.len(),
        "by_answer_kind": by_kind,
        "by_split": by_split,
        "by_family": by_family,
        "multi_span_gold_counts": span_counts,
        "passage_tokens": summary(&lengths),
        "passage_sentences": summary(&sentences),
        "question_prefixes": question_prefix_stats(&ds),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(0)
}

fn validate(data: &Path) -> Result<i32> {
    if !data.exists() {
        return Err(Error::Input(format!("data file {} does not exist", data.display())));
    }
    let violations = validate_dataset(data)?;
    let mut out = std::io::stdout().lock();
    for v in &violations {
        writeln!(out, "{}", serde_json::to_string(v)?)?;
    }
    eprintln!("{} violation(s) in {}", violations.len(), data.display());
    Ok(if violations.is_empty() { 0 } else { 1 })
}

/// Vocabulary over every passage plus the training questions.
pub fn corpus_vocab(ds: &Dataset, min_count: usize) -> Result<Vocab> {
    let texts = ds
        .passages
        .iter()
        .map(|p| p.full_text.as_str())
        .chain(ds.qapairs_in(Split::Train).map(|q| q.question.as_str()));
    build_vocab(texts, min_count)
}

fn last_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".last");
    PathBuf::from(name)
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path, log: &Path, resume: Option<&Path>) -> Result<i32> {
    let started = Instant::now();
    let cfg = load_config(config)?;
    let (_, ds) = load_dataset(data)?;

    let (state, best) = match resume {
        Some(path) => {
            let state = load_checkpoint(path)?;
            if state.moments.is_none() || state.progress.is_none() {
                return Err(Error::Input(format!("{} holds no resumable training state", path.display())));
            }
            let best = if out.exists() { Some(load_checkpoint(out)?) } else { None };
            (state, best)
        }
        None => {
            let vocab = corpus_vocab(&ds, cfg.vocab_min_count)?;
            let mut encoder = cfg.encoder.clone();
            encoder.vocab_size = vocab.len();
            let mut effective = cfg.clone();
            effective.encoder = encoder.clone();
            let model = Model::new(ModelConfig::new(encoder), vocab, cfg.training.seed)?;
            (start_run(model, effective.to_value()), None)
        }
    };
    // The run config stored with the state wins on resume.
    let run_cfg: RunConfig = match resume {
        Some(_) => serde_json::from_value(state.run_config.clone())
            .map_err(|e| Error::Compatibility(format!("stored run config: {e}")))?,
        None => cfg,
    };
    let (vocab, max_positions) = (&state.model.vocab, state.model.config.encoder.max_positions);
    let negatives = run_cfg.training.include_single_span_negatives;
    let (train_set, skipped) =
        prepare_examples(&ds, ds.qapairs_in(Split::Train), vocab, max_positions, negatives)?;
    let (val_set, _) = prepare_examples(&ds, ds.qapairs_in(Split::Validation), vocab, max_positions, negatives)?;
    eprintln!(
        "training on {} examples {:?} ({} skipped), validating on {}; {} parameters",
        train_set.len(),
        supervision_counts(&train_set),
        skipped.len(),
        val_set.len(),
        state.model.params.num_parameters()
    );

    let mut log_file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(log)?
    } else {
        fs::File::create(log)?
    };
    let last = last_path(out);
    let best = train(
        state,
        best,
        &train_set,
        &val_set,
        &run_cfg.training,
        &mut |event| {
            writeln!(log_file, "{}", serde_json::to_string(event)?)?;
            if let LogEvent::Epoch { epoch, train, validation, .. } = event {
                let val = validation.map_or("n/a".to_string(), |v| format!("{:.4}", v.total));
                eprintln!(
                    "epoch {} train {:.4} val {} ({:.0}s)",
                    epoch + 1,
                    train.total,
                    val,
                    started.elapsed().as_secs_f64()
                );
            }
            Ok(())
        },
        &mut |end| {
            end.latest.save(&last)?;
            end.best.save(out)?;
            Ok(ControlFlow::Continue(()))
        },
    )?;
    best.save(out)?;
    eprintln!("best checkpoint (epoch {:?}) written to {}", best.progress.and_then(|p| p.best_epoch).map(|e| e + 1), out.display());
    Ok(0)
}

fn decode_config(ckpt: &Checkpoint, config: Option<&Path>) -> Result<DecodeConfig> {
    if let Some(path) = config {
        return Ok(RunConfig::load(path)?.decode);
    }
    match ckpt.run_config.get("decode") {
        Some(v) => {
            let d: DecodeConfig = serde_json::from_value(v.clone()).map_err(|e| Error::Compatibility(e.to_string()))?;
            d.validate()?;
            Ok(d)
        }
        None => Ok(DecodeConfig::default()),
    }
}

fn eval_cmd(data: &Path, ckpt: &Path, report: &Path, split: Option<Split>, config: Option<&Path>) -> Result<i32> {
    let checkpoint = load_checkpoint(ckpt)?;
    let decode = decode_config(&checkpoint, config)?;
    let (_, ds) = load_dataset(data)?;
    let started = Instant::now();
    let predictor = ModelPredictor { model: &checkpoint.model, decode: decode.clone() };
    let r = evaluate(&ds, split, &predictor)?;
    let body = json!({
        "checkpoint": ckpt.display().to_string(),
        "vocab_hash": checkpoint.model.vocab.hash(),
        "split": split.map_or(json!("all"), |s| serde_json::to_value(s).unwrap_or_default()),
        "decode": decode,
        "run_config": checkpoint.run_config,
        "report": r.to_rounded_json(),
    });
    fs::write(report, serde_json::to_string_pretty(&body)? + "\n")?;
    eprintln!(
        "overall EM {:.1} F1 {:.1} | single EM {:.1} F1 {:.1} | multi EM {:.1} F1 {:.1} | {} examples in {:.0}s",
        r.overall.em,
        r.overall.f1,
        r.single_span.em,
        r.single_span.f1,
        r.multi_span.em,
        r.multi_span.f1,
        r.n_examples,
        started.elapsed().as_secs_f64()
    );
    Ok(0)
}

fn read_passages(path: &Path) -> Result<Vec<Passage>> {
    if !path.exists() {
        return Err(Error::Input(format!("passage file {} does not exist", path.display())));
    }
    Ok(read_records(path)?
        .into_iter()
        .filter_map(|(_, r)| match r {
            Record::Passage(p) => Some(p),
            _ => None,
        })
        .collect())
}

fn ask(ckpt: &Path, passage_file: &Path, passage_id: Option<&str>, question: Option<&str>) -> Result<i32> {
    let checkpoint = load_checkpoint(ckpt)?;
    let decode = decode_config(&checkpoint, None)?;
    let passages = read_passages(passage_file)?;
    let passage = match passage_id {
        Some(id) => passages.iter().find(|p| p.id == id),
        None => passages.first(),
    }
    .ok_or_else(|| Error::Input(format!("no matching passage in {}", passage_file.display())))?;

    let respond = |q: &str, out: &mut dyn Write| -> Result<()> {
        let prediction = answer(&checkpoint.model, passage, q, &decode)?;
        for w in &prediction.warnings {
            eprintln!("warning: {w}");
        }
        writeln!(out, "{}", serde_json::to_string(&prediction.answer)?)?;
        Ok(())
    };
    let stdout = std::io::stdout();
    match question {
        Some(q) => respond(q, &mut stdout.lock())?,
        None => {
            for line in std::io::stdin().lock().lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut out = stdout.lock();
                match respond(&line, &mut out) {
                    Ok(()) => {}
                    Err(e) if e.is_user_error() => eprintln!("error: {e}"),
                    Err(e) => return Err(e),
                }
                out.flush()?;
            }
        }
    }
    Ok(0)
}
