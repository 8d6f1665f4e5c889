//! Multitask training: supervision targets, the weighted loss
//! `λq·Lq + λa·La + λs·Ls + λt·Lt`, its gradient, and the AdamW loop.

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Moments, Progress};
use crate::corpus::{AnswerKind, Dataset, Passage, QaPair, MAX_SENTENCES};
use crate::encoder::{backward_into, forward, EncoderCache};
use crate::error::{Error, Result};
use crate::heads::{
    answer_type_logits, cls_heads_backward, masked_softmax, multispan_logits, pool, pool_backward,
    span_backward, span_scores, tagger_backward, tagger_logits, AnswerType, SpanDistributions,
    TaggerCache,
};
use crate::linalg::{softmax, Mat, Scalar};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::rng::{child_seed, Stream};
use crate::tokenizer::{
    char_span_to_token_span, encode_pair, encode_sentence_pair, Encoding, Vocab, MAX_QUESTION_TOKENS,
    MAX_SENTENCE_TOKENS, MAX_TOTAL_TOKENS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr_peak: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub lambda_q: f64,
    pub lambda_a: f64,
    pub lambda_s: f64,
    pub lambda_t: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Also train the tagger on single-span questions, every sentence negative.
    pub include_single_span_negatives: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lr_peak: 4e-5,
            batch_size: 16,
            epochs: 10,
            warmup_fraction: 0.06,
            clip_norm: 1.0,
            lambda_q: 1.0,
            lambda_a: 1.0,
            lambda_s: 1.0,
            lambda_t: 1.0,
            seed: 7,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            include_single_span_negatives: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr_peak > 0.0 && self.clip_norm > 0.0 && self.adam_epsilon > 0.0) {
            return bad("lr_peak, clip_norm and adam_epsilon must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        let lambdas = [self.lambda_q, self.lambda_a, self.lambda_s, self.lambda_t];
        if lambdas.iter().any(|&l| !(l >= 0.0)) || lambdas.iter().all(|&l| l == 0.0) {
            return bad("loss weights must be non-negative with at least one positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Multiplicity {
    Single,
    Multi,
}

impl Multiplicity {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionRecord {
    pub multispan_label: Multiplicity,
    pub answer_type_label: Option<AnswerType>,
    pub start_token: Option<usize>,
    pub end_token: Option<usize>,
    pub sentence_labels: Option<Vec<bool>>,
}

/// Maps corpus gold onto head targets. An `UnmappableSpan` error means the
/// example cannot be supervised (typically truncation) and should be skipped.
pub fn build_supervision(
    qa: &QaPair,
    enc: &Encoding,
    sentence_encs: &[Encoding],
    include_single_span_negatives: bool,
) -> Result<SupervisionRecord> {
    let negatives = (include_single_span_negatives && !sentence_encs.is_empty())
        .then(|| vec![false; sentence_encs.len()]);
    let boolean = |t: AnswerType| SupervisionRecord {
        multispan_label: Multiplicity::Single,
        answer_type_label: Some(t),
        start_token: Some(0),
        end_token: Some(0),
        sentence_labels: negatives.clone(),
    };
    Ok(match qa.answer_kind {
        AnswerKind::Yes => boolean(AnswerType::Yes),
        AnswerKind::No => boolean(AnswerType::No),
        AnswerKind::Unknown => boolean(AnswerType::Unknown),
        AnswerKind::SingleSpan => {
            let gold = qa
                .gold_spans
                .first()
                .ok_or_else(|| Error::Consistency(format!("{}: single-span answer without a span", qa.id)))?;
            let (s, e) = char_span_to_token_span(enc, (gold.char_start, gold.char_end))?;
            SupervisionRecord {
                multispan_label: Multiplicity::Single,
                answer_type_label: None,
                start_token: Some(s),
                end_token: Some(e),
                sentence_labels: negatives,
            }
        }
        AnswerKind::MultiSpan => {
            let labels: Vec<bool> =
                (0..sentence_encs.len()).map(|i| qa.gold_sentence_ids.contains(&i)).collect();
            if labels.iter().filter(|&&l| l).count() < 2 {
                let (start, end) = qa.gold_spans.last().map_or((0, 0), |g| (g.char_start, g.char_end));
                return Err(Error::UnmappableSpan { start, end });
            }
            SupervisionRecord {
                multispan_label: Multiplicity::Multi,
                answer_type_label: None,
                start_token: None,
                end_token: None,
                sentence_labels: Some(labels),
            }
        }
    })
}

/// One supervised question, tokenized and ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub qa_id: String,
    pub encoding: Encoding,
    /// `[CLS] question [SEP] sentence_i`, only when the tagger is supervised.
    pub sentence_encodings: Vec<Encoding>,
    pub supervision: SupervisionRecord,
}

/// Full-context encoding of a question against a passage.
pub fn encode_question(vocab: &Vocab, question: &str, context: &str, max_positions: usize) -> Encoding {
    encode_pair(vocab, question, context, MAX_QUESTION_TOKENS, max_positions.min(MAX_TOTAL_TOKENS))
}

/// Sentence-pair encodings for the first `MAX_SENTENCES` sentences.
pub fn encode_sentences(vocab: &Vocab, question: &str, passage: &Passage) -> Vec<Encoding> {
    passage
        .sentences
        .iter()
        .take(MAX_SENTENCES)
        .map(|s| encode_sentence_pair(vocab, question, &s.text, MAX_QUESTION_TOKENS, MAX_SENTENCE_TOKENS))
        .collect()
}

pub fn prepare_example(
    qa: &QaPair,
    passage: &Passage,
    vocab: &Vocab,
    max_positions: usize,
    include_single_span_negatives: bool,
) -> Result<Example> {
    let encoding = encode_question(vocab, &qa.question, &passage.full_text, max_positions);
    let needs_sentences = qa.answer_kind == AnswerKind::MultiSpan || include_single_span_negatives;
    let sentence_encodings =
        if needs_sentences { encode_sentences(vocab, &qa.question, passage) } else { Vec::new() };
    let supervision = build_supervision(qa, &encoding, &sentence_encodings, include_single_span_negatives)?;
    Ok(Example { qa_id: qa.id.clone(), encoding, sentence_encodings, supervision })
}

/// Prepares every question, returning the examples and the ids skipped
/// because their gold could not be mapped onto tokens.
pub fn prepare_examples<'a>(
    dataset: &Dataset,
    qas: impl IntoIterator<Item = &'a QaPair>,
    vocab: &Vocab,
    max_positions: usize,
    include_single_span_negatives: bool,
) -> Result<(Vec<Example>, Vec<String>)> {
    let passages = dataset.passage_index();
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for qa in qas {
        let passage = passages
            .get(qa.passage_id.as_str())
            .ok_or_else(|| Error::Input(format!("{}: unknown passage {}", qa.id, qa.passage_id)))?;
        match prepare_example(qa, passage, vocab, max_positions, include_single_span_negatives) {
            Ok(ex) => examples.push(ex),
            Err(Error::UnmappableSpan { .. }) => skipped.push(qa.id.clone()),
            Err(e) => return Err(e),
        }
    }
    Ok((examples, skipped))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_q: f64,
    pub l_a: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_q, self.l_a, self.l_s, self.l_t, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for l in items {
            out.l_q += l.l_q;
            out.l_a += l.l_a;
            out.l_s += l.l_s;
            out.l_t += l.l_t;
            out.total += l.total;
        }
        out.l_q /= n;
        out.l_a /= n;
        out.l_s /= n;
        out.l_t /= n;
        out.total /= n;
        out
    }
}

/// Head outputs for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleOutputs<T> {
    pub p_s: [T; 2],
    pub p_a: [T; 3],
    pub spans: Option<SpanDistributions<T>>,
    /// Per-sentence `(not_answer, answer)` probabilities.
    pub tags: Vec<[T; 2]>,
}

fn nll<T: Scalar>(p: T) -> f64 {
    -p.to_f64().ln()
}

pub fn compute_loss<T: Scalar>(out: &ExampleOutputs<T>, sup: &SupervisionRecord, cfg: &TrainingConfig) -> LossBreakdown {
    let l_q = match (&out.spans, sup.start_token, sup.end_token) {
        (Some(d), Some(s), Some(e)) => nll(d.p_start[s]) + nll(d.p_end[e]),
        _ => 0.0,
    };
    let l_a = sup.answer_type_label.map_or(0.0, |t| nll(out.p_a[t.index()]));
    let l_s = nll(out.p_s[sup.multispan_label.index()]);
    let l_t = match &sup.sentence_labels {
        Some(labels) if !labels.is_empty() => {
            let sum: f64 = labels.iter().zip(&out.tags).map(|(&l, t)| nll(t[l as usize])).sum();
            sum / labels.len() as f64
        }
        _ => 0.0,
    };
    let total = cfg.lambda_q * l_q + cfg.lambda_a * l_a + cfg.lambda_s * l_s + cfg.lambda_t * l_t;
    LossBreakdown { l_q, l_a, l_s, l_t, total }
}

struct SentencePass<T> {
    hidden: Mat<T>,
    cache: EncoderCache<T>,
    question: Vec<usize>,
    sentence: Vec<usize>,
    tagger: TaggerCache<T>,
}

/// `p − onehot(label)`, scaled.
fn softmax_grad<T: Scalar>(p: &[T], label: usize, scale: T) -> Vec<T> {
    p.iter()
        .enumerate()
        .map(|(i, &v)| (if i == label { v - T::ONE } else { v }) * scale)
        .collect()
}

/// Runs one example forward and, when `grads` is given, accumulates
/// `weight · ∂total/∂θ` into it. `dropout_seed` switches on train mode.
pub fn example_loss<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    example: &Example,
    tcfg: &TrainingConfig,
    dropout_seed: Option<u64>,
    grads: Option<(&mut ModelParams<T>, T)>,
) -> Result<(LossBreakdown, ExampleOutputs<T>)> {
    let sup = &example.supervision;
    let train_mode = dropout_seed.is_some();
    let seed = dropout_seed.unwrap_or(0);
    let (h, cache) = forward(&params.encoder, &cfg.encoder, &example.encoding, train_mode, child_seed(seed, 0))?;
    let cls = h.row(0);
    let p_s: [T; 2] = softmax(&multispan_logits(cls, &params.heads)).try_into().expect("two classes");
    let p_a: [T; 3] = softmax(&answer_type_logits(cls, &params.heads)).try_into().expect("three classes");
    let span_logits = sup.start_token.is_some().then(|| span_scores(&h, &params.heads));
    let spans = span_logits.as_ref().map(|l| SpanDistributions {
        p_start: masked_softmax(&l.start, &example.encoding.attention_mask),
        p_end: masked_softmax(&l.end, &example.encoding.attention_mask),
    });

    let labels = sup.sentence_labels.as_deref().unwrap_or(&[]);
    let mut passes = Vec::with_capacity(labels.len());
    let mut tags = Vec::with_capacity(labels.len());
    for (i, enc) in example.sentence_encodings.iter().enumerate().take(labels.len()) {
        let (hidden, cache) = forward(&params.encoder, &cfg.encoder, enc, train_mode, child_seed(seed, i as u64 + 1))?;
        let question = enc.question_positions();
        let sentence = enc.context_positions();
        let (logits, tagger) = tagger_logits(&pool(&hidden, &question)?, &pool(&hidden, &sentence)?, &params.heads);
        tags.push(softmax(&logits).try_into().expect("two classes"));
        passes.push(SentencePass { hidden, cache, question, sentence, tagger });
    }

    let outputs = ExampleOutputs { p_s, p_a, spans, tags };
    let loss = compute_loss(&outputs, sup, tcfg);
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss on {}", example.qa_id)));
    }
    let Some((grads, weight)) = grads else {
        return Ok((loss, outputs));
    };

    let mut dh = Mat::zeros(h.rows, h.cols);
    let d_s = softmax_grad(&outputs.p_s, sup.multispan_label.index(), T::of(tcfg.lambda_s) * weight);
    let d_a = match sup.answer_type_label {
        Some(t) => softmax_grad(&outputs.p_a, t.index(), T::of(tcfg.lambda_a) * weight),
        None => vec![T::ZERO; 3],
    };
    let d_cls = cls_heads_backward(
        cls,
        &params.heads,
        &d_s.try_into().expect("two classes"),
        &d_a.try_into().expect("three classes"),
        &mut grads.heads,
    );
    dh.row_mut(0).copy_from_slice(&d_cls);
    if let (Some(l), Some(d), Some(s), Some(e)) = (&span_logits, &outputs.spans, sup.start_token, sup.end_token) {
        let scale = T::of(tcfg.lambda_q) * weight;
        let d_start = softmax_grad(&d.p_start, s, scale);
        let d_end = softmax_grad(&d.p_end, e, scale);
        dh.add_assign(&span_backward(&h, &params.heads, l, &d_start, &d_end, &mut grads.heads));
    }
    backward_into(&params.encoder, &cfg.encoder, &example.encoding, &dh, &cache, &mut grads.encoder)?;

    if !passes.is_empty() {
        let scale = T::of(tcfg.lambda_t / passes.len() as f64) * weight;
        for (i, ((pass, &label), p_t)) in passes.iter().zip(labels).zip(&outputs.tags).enumerate() {
            let d_tag = softmax_grad(p_t, label as usize, scale);
            let (dq, ds) =
                tagger_backward(&params.heads, &pass.tagger, &d_tag.try_into().expect("two classes"), &mut grads.heads);
            let mut dh = Mat::zeros(pass.hidden.rows, pass.hidden.cols);
            pool_backward(&dq, &pass.question, &mut dh);
            pool_backward(&ds, &pass.sentence, &mut dh);
            let enc = &example.sentence_encodings[i];
            backward_into(&params.encoder, &cfg.encoder, enc, &dh, &pass.cache, &mut grads.encoder)?;
        }
    }
    Ok((loss, outputs))
}

/// Linear warmup over the first `⌈warmup_fraction · total⌉` steps, then
/// linear decay to zero at `total`.
pub fn lr_schedule(step: u64, total_steps: u64, cfg: &TrainingConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Input(format!("step {step} beyond total_steps {total_steps}")));
    }
    let warmup = (cfg.warmup_fraction * total_steps as f64).ceil() as u64;
    Ok(if step < warmup {
        cfg.lr_peak * step as f64 / warmup as f64
    } else if step == total_steps {
        0.0
    } else {
        cfg.lr_peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    })
}

/// Rescales `grads` to global L2 norm `max_norm` when it is larger.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ModelParams<T>, max_norm: f64) -> Result<f64> {
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::Divergence("non-finite gradient".into()));
    }
    if norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    Ok(norm)
}

/// Only matrices and embeddings are decayed; biases and norm parameters are not.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with("weight") || name.ends_with("embedding")
}

/// One AdamW update with bias correction; `t` counts updates from 1.
pub fn adamw_update(
    params: &mut ModelParams<f32>,
    grads: &ModelParams<f32>,
    moments: &mut Moments,
    t: u64,
    lr: f64,
    cfg: &TrainingConfig,
) {
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(moments.m.tensors_mut().into_iter().zip(moments.v.tensors_mut()));
    for (((name, p), (_, g)), ((_, m), (_, v))) in tensors {
        let decay = if is_decayed(&name) { cfg.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64;
            let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            let theta = p.data[i] as f64;
            let update = (mi / c1) / ((vi / c2).sqrt() + cfg.adam_epsilon) + decay * theta;
            p.data[i] = (theta - lr * update) as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Seed for the dropout masks of example `index` within update `step`.
pub fn dropout_seed(seed: u64, step: u64, index: usize) -> u64 {
    child_seed(child_seed(child_seed(seed, 3), step), index as u64)
}

/// One optimizer update over `batch`; gradients are the batch mean,
/// accumulated in batch order.
pub fn train_step(
    model: &mut Model,
    moments: &mut Moments,
    batch: &[&Example],
    cfg: &TrainingConfig,
    step: u64,
    total_steps: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty batch".into()));
    }
    let mut grads = ModelParams::<f32>::zeros(&model.config);
    let weight = 1.0 / batch.len() as f32;
    let mut losses = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        let seed = dropout_seed(cfg.seed, step, i);
        let (loss, _) =
            example_loss(&model.params, &model.config, ex, cfg, Some(seed), Some((&mut grads, weight)))?;
        losses.push(loss);
    }
    let grad_norm = clip_gradients(&mut grads, cfg.clip_norm)?;
    let lr = lr_schedule(step, total_steps, cfg)?;
    adamw_update(&mut model.params, &grads, moments, step + 1, lr, cfg);
    if !model.params.all_finite() {
        return Err(Error::Divergence(format!("non-finite parameters after step {step}")));
    }
    Ok(StepReport { loss: LossBreakdown::mean(&losses), lr, grad_norm })
}

/// Order in which training examples are visited in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Stream::new(child_seed(seed, 2), epoch as u64).shuffle(&mut order);
    order
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> u64 {
    n.div_ceil(batch_size) as u64
}

/// Mean loss without dropout or gradients.
pub fn evaluate_loss(model: &Model, examples: &[Example], cfg: &TrainingConfig) -> Result<LossBreakdown> {
    let losses = examples
        .iter()
        .map(|ex| example_loss(&model.params, &model.config, ex, cfg, None, None).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::mean(&losses))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        epoch: usize,
        step: u64,
        lr: f64,
        grad_norm: f64,
        #[serde(flatten)]
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        step: u64,
        train: LossBreakdown,
        validation: Option<LossBreakdown>,
        best_epoch: Option<usize>,
    },
}

/// State handed to the caller after every epoch.
pub struct EpochEnd<'a> {
    /// Resumable state: parameters, moments and progress.
    pub latest: &'a Checkpoint,
    /// Best-validation parameters so far.
    pub best: &'a Checkpoint,
}

/// Starts a run from freshly initialised parameters.
pub fn start_run(model: Model, run_config: serde_json::Value) -> Checkpoint {
    let zeros = ModelParams::zeros(&model.config);
    Checkpoint {
        model,
        run_config,
        progress: None,
        moments: Some(Moments { m: zeros.clone(), v: zeros }),
    }
}

/// Trains from `state` (fresh or resumed) until `cfg.epochs` epochs are done
/// or `on_epoch` breaks. Returns the best-validation checkpoint.
pub fn train(
    mut state: Checkpoint,
    mut best: Option<Checkpoint>,
    train_set: &[Example],
    validation: &[Example],
    cfg: &TrainingConfig,
    log: &mut dyn FnMut(&LogEvent) -> Result<()>,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<ControlFlow<()>>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let per_epoch = steps_per_epoch(train_set.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs as u64;
    let mut progress = state.progress.clone().unwrap_or(Progress {
        epoch: 0,
        step: 0,
        total_steps,
        best_val_loss: None,
        best_epoch: None,
    });
    if progress.total_steps != total_steps || progress.step != progress.epoch as u64 * per_epoch {
        return Err(Error::Compatibility(format!(
            "resume state at step {} of {} does not fit a run of {} steps",
            progress.step, progress.total_steps, total_steps
        )));
    }
    let mut moments = state.moments.take().unwrap_or_else(|| {
        let zeros = ModelParams::zeros(&state.model.config);
        Moments { m: zeros.clone(), v: zeros }
    });

    while progress.epoch < cfg.epochs {
        let epoch = progress.epoch;
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let mut reports = Vec::with_capacity(per_epoch as usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let report = train_step(&mut state.model, &mut moments, &batch, cfg, progress.step, total_steps)?;
            progress.step += 1;
            log(&LogEvent::Step {
                epoch,
                step: progress.step,
                lr: report.lr,
                grad_norm: report.grad_norm,
                loss: report.loss,
            })?;
            reports.push(report.loss);
        }
        progress.epoch += 1;

        let val = if validation.is_empty() { None } else { Some(evaluate_loss(&state.model, validation, cfg)?) };
        // Without a validation split the latest epoch counts as best.
        let improved = match (val, progress.best_val_loss) {
            (Some(v), Some(b)) => v.total < b,
            _ => true,
        };
        if improved {
            progress.best_val_loss = val.map(|v| v.total);
            progress.best_epoch = Some(epoch);
        }
        log(&LogEvent::Epoch {
            epoch,
            step: progress.step,
            train: LossBreakdown::mean(&reports),
            validation: val,
            best_epoch: progress.best_epoch,
        })?;

        state.progress = Some(progress.clone());
        if improved {
            best = Some(Checkpoint {
                model: state.model.clone(),
                run_config: state.run_config.clone(),
                progress: Some(progress.clone()),
                moments: None,
            });
        }
        state.moments = Some(moments);
        let flow = on_epoch(EpochEnd { latest: &state, best: best.as_ref().expect("set after first epoch") })?;
        moments = state.moments.take().expect("restored above");
        if flow.is_break() {
            break;
        }
    }
    best.ok_or_else(|| Error::Input("resumed run had no epochs left and no best checkpoint".into()))
}

/// Per-kind counts of prepared examples, for logging.
pub fn supervision_counts(examples: &[Example]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    for ex in examples {
        let key = match (ex.supervision.multispan_label, ex.supervision.answer_type_label) {
            (Multiplicity::Multi, _) => "multi_span",
            (_, Some(AnswerType::Yes)) => "yes",
            (_, Some(AnswerType::No)) => "no",
            (_, Some(AnswerType::Unknown)) => "unknown",
            (_, None) => "single_span",
        };
        *out.entry(key).or_insert(0) += 1;
    }
    out
}
