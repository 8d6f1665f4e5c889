//! The four prediction heads on top of `H_L`:
//!
//! * multi-span predictor: one linear layer on `h[CLS]`, two classes;
//! * answer-type predictor: one linear layer on `h[CLS]` over Yes/No/Unknown;
//! * span start/end: a per-token two-layer GELU network giving one logit per
//!   position, softmaxed over the sequence with padding masked out;
//! * sentence tagger: a two-layer GELU network over `[h_q : h_sent]`.

use serde::{Deserialize, Serialize};

use crate::encoder::{fill_truncated_normal, INIT_STD};
use crate::error::{Error, Result};
use crate::linalg::{gelu, gelu_grad, matmul, matmul_nt, matmul_tn_acc, softmax, Mat, Scalar};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    /// Inner width of the two-layer heads.
    pub ffn_hidden: usize,
}

impl HeadConfig {
    pub fn for_hidden(hidden: usize) -> Self {
        Self { hidden, ffn_hidden: hidden }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    Yes,
    No,
    Unknown,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::Yes, AnswerType::No, AnswerType::Unknown];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T> {
    pub multispan_weight: Mat<T>,
    pub multispan_bias: Mat<T>,
    pub answer_type_weight: Mat<T>,
    pub answer_type_bias: Mat<T>,
    pub span_start_in_weight: Mat<T>,
    pub span_start_in_bias: Mat<T>,
    pub span_start_out_weight: Mat<T>,
    pub span_start_out_bias: Mat<T>,
    pub span_end_in_weight: Mat<T>,
    pub span_end_in_bias: Mat<T>,
    pub span_end_out_weight: Mat<T>,
    pub span_end_out_bias: Mat<T>,
    pub tagger_in_weight: Mat<T>,
    pub tagger_in_bias: Mat<T>,
    pub tagger_out_weight: Mat<T>,
    pub tagger_out_bias: Mat<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(cfg: &HeadConfig) -> Self {
        let (d, h) = (cfg.hidden, cfg.ffn_hidden);
        Self {
            multispan_weight: Mat::zeros(d, 2),
            multispan_bias: Mat::zeros(1, 2),
            answer_type_weight: Mat::zeros(d, 3),
            answer_type_bias: Mat::zeros(1, 3),
            span_start_in_weight: Mat::zeros(d, h),
            span_start_in_bias: Mat::zeros(1, h),
            span_start_out_weight: Mat::zeros(h, 1),
            span_start_out_bias: Mat::zeros(1, 1),
            span_end_in_weight: Mat::zeros(d, h),
            span_end_in_bias: Mat::zeros(1, h),
            span_end_out_weight: Mat::zeros(h, 1),
            span_end_out_bias: Mat::zeros(1, 1),
            tagger_in_weight: Mat::zeros(2 * d, h),
            tagger_in_bias: Mat::zeros(1, h),
            tagger_out_weight: Mat::zeros(h, 2),
            tagger_out_bias: Mat::zeros(1, 2),
        }
    }

    pub fn init(cfg: &HeadConfig, seed: u64) -> Self {
        let mut params = Self::zeros(cfg);
        let mut rng = Stream::new(seed, 0);
        for (name, t) in params.tensors_mut() {
            if name.ends_with("weight") {
                fill_truncated_normal(t, INIT_STD, &mut rng);
            }
        }
        params
    }

    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        vec![
            ("heads.multispan_weight".into(), &self.multispan_weight),
            ("heads.multispan_bias".into(), &self.multispan_bias),
            ("heads.answer_type_weight".into(), &self.answer_type_weight),
            ("heads.answer_type_bias".into(), &self.answer_type_bias),
            ("heads.span_start_in_weight".into(), &self.span_start_in_weight),
            ("heads.span_start_in_bias".into(), &self.span_start_in_bias),
            ("heads.span_start_out_weight".into(), &self.span_start_out_weight),
            ("heads.span_start_out_bias".into(), &self.span_start_out_bias),
            ("heads.span_end_in_weight".into(), &self.span_end_in_weight),
            ("heads.span_end_in_bias".into(), &self.span_end_in_bias),
            ("heads.span_end_out_weight".into(), &self.span_end_out_weight),
            ("heads.span_end_out_bias".into(), &self.span_end_out_bias),
            ("heads.tagger_in_weight".into(), &self.tagger_in_weight),
            ("heads.tagger_in_bias".into(), &self.tagger_in_bias),
            ("heads.tagger_out_weight".into(), &self.tagger_out_weight),
            ("heads.tagger_out_bias".into(), &self.tagger_out_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        vec![
            ("heads.multispan_weight".into(), &mut self.multispan_weight),
            ("heads.multispan_bias".into(), &mut self.multispan_bias),
            ("heads.answer_type_weight".into(), &mut self.answer_type_weight),
            ("heads.answer_type_bias".into(), &mut self.answer_type_bias),
            ("heads.span_start_in_weight".into(), &mut self.span_start_in_weight),
            ("heads.span_start_in_bias".into(), &mut self.span_start_in_bias),
            ("heads.span_start_out_weight".into(), &mut self.span_start_out_weight),
            ("heads.span_start_out_bias".into(), &mut self.span_start_out_bias),
            ("heads.span_end_in_weight".into(), &mut self.span_end_in_weight),
            ("heads.span_end_in_bias".into(), &mut self.span_end_in_bias),
            ("heads.span_end_out_weight".into(), &mut self.span_end_out_weight),
            ("heads.span_end_out_bias".into(), &mut self.span_end_out_bias),
            ("heads.tagger_in_weight".into(), &mut self.tagger_in_weight),
            ("heads.tagger_in_bias".into(), &mut self.tagger_in_bias),
            ("heads.tagger_out_weight".into(), &mut self.tagger_out_weight),
            ("heads.tagger_out_bias".into(), &mut self.tagger_out_bias),
        ]
    }
}

/// Probability of (single, multi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiSpanDecision<T> {
    pub p_s: [T; 2],
}

impl<T: Scalar> MultiSpanDecision<T> {
    pub fn is_multi(&self) -> bool {
        self.p_s[1] > self.p_s[0]
    }
}

/// Probability over (Yes, No, Unknown).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerTypeDistribution<T> {
    pub p_a: [T; 3],
}

impl<T: Scalar> AnswerTypeDistribution<T> {
    /// Most probable class; ties go to the earlier class.
    pub fn argmax(&self) -> AnswerType {
        let mut best = 0;
        for i in 1..3 {
            if self.p_a[i] > self.p_a[best] {
                best = i;
            }
        }
        AnswerType::from_index(best)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistributions<T> {
    pub p_start: Vec<T>,
    pub p_end: Vec<T>,
}

/// Probability of (not_answer, answer) for one sentence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceTagDistribution<T> {
    pub p_t: [T; 2],
}

fn linear_vec<T: Scalar>(x: &[T], weight: &Mat<T>, bias: &Mat<T>) -> Vec<T> {
    debug_assert_eq!(x.len(), weight.rows);
    let mut out = bias.data.clone();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(weight.row(i)) {
            *o += xi * w;
        }
    }
    out
}

/// Accumulates parameter gradients of `x·W + b` and returns `∂/∂x`.
fn linear_vec_backward<T: Scalar>(
    x: &[T],
    weight: &Mat<T>,
    grad_out: &[T],
    grad_weight: &mut Mat<T>,
    grad_bias: &mut Mat<T>,
) -> Vec<T> {
    for (b, &g) in grad_bias.data.iter_mut().zip(grad_out) {
        *b += g;
    }
    let mut grad_in = vec![T::ZERO; x.len()];
    for (i, &xi) in x.iter().enumerate() {
        let wrow = weight.row(i);
        let grow = grad_weight.row_mut(i);
        let mut acc = T::ZERO;
        for k in 0..grad_out.len() {
            grow[k] += xi * grad_out[k];
            acc += wrow[k] * grad_out[k];
        }
        grad_in[i] = acc;
    }
    grad_in
}

fn to_array<T: Scalar, const N: usize>(v: Vec<T>) -> [T; N] {
    v.try_into().unwrap_or_else(|v: Vec<T>| panic!("expected {N} logits, got {}", v.len()))
}

pub fn multispan_logits<T: Scalar>(h_cls: &[T], params: &HeadParams<T>) -> [T; 2] {
    to_array(linear_vec(h_cls, &params.multispan_weight, &params.multispan_bias))
}

pub fn predict_multispan<T: Scalar>(h_cls: &[T], params: &HeadParams<T>) -> MultiSpanDecision<T> {
    MultiSpanDecision { p_s: to_array(softmax(&multispan_logits(h_cls, params))) }
}

pub fn answer_type_logits<T: Scalar>(h_cls: &[T], params: &HeadParams<T>) -> [T; 3] {
    to_array(linear_vec(h_cls, &params.answer_type_weight, &params.answer_type_bias))
}

pub fn predict_answer_type<T: Scalar>(h_cls: &[T], params: &HeadParams<T>) -> AnswerTypeDistribution<T> {
    AnswerTypeDistribution { p_a: to_array(softmax(&answer_type_logits(h_cls, params))) }
}

/// Backward of both `h[CLS]` linear heads for given logit gradients.
pub fn cls_heads_backward<T: Scalar>(
    h_cls: &[T],
    params: &HeadParams<T>,
    d_multispan: &[T; 2],
    d_answer_type: &[T; 3],
    grads: &mut HeadParams<T>,
) -> Vec<T> {
    let mut d = linear_vec_backward(
        h_cls,
        &params.multispan_weight,
        d_multispan,
        &mut grads.multispan_weight,
        &mut grads.multispan_bias,
    );
    let d2 = linear_vec_backward(
        h_cls,
        &params.answer_type_weight,
        d_answer_type,
        &mut grads.answer_type_weight,
        &mut grads.answer_type_bias,
    );
    for (a, b) in d.iter_mut().zip(d2) {
        *a += b;
    }
    d
}

/// Intermediate values of one per-token scorer.
#[derive(Debug, Clone)]
pub struct ScorerCache<T> {
    pre_activation: Mat<T>,
    activation: Mat<T>,
}

fn score_tokens<T: Scalar>(
    h: &Mat<T>,
    in_w: &Mat<T>,
    in_b: &Mat<T>,
    out_w: &Mat<T>,
    out_b: &Mat<T>,
) -> (Vec<T>, ScorerCache<T>) {
    let mut pre_activation = matmul(h, in_w);
    pre_activation.add_row_bias(&in_b.data);
    let mut activation = pre_activation.clone();
    activation.data.iter_mut().for_each(|v| *v = gelu(*v));
    let mut logits = matmul(&activation, out_w);
    logits.add_row_bias(&out_b.data);
    (logits.data, ScorerCache { pre_activation, activation })
}

#[allow(clippy::too_many_arguments)]
fn score_tokens_backward<T: Scalar>(
    h: &Mat<T>,
    cache: &ScorerCache<T>,
    d_logits: &[T],
    in_w: &Mat<T>,
    out_w: &Mat<T>,
    g_in_w: &mut Mat<T>,
    g_in_b: &mut Mat<T>,
    g_out_w: &mut Mat<T>,
    g_out_b: &mut Mat<T>,
) -> Mat<T> {
    let d_logits = Mat::from_vec(d_logits.len(), 1, d_logits.to_vec());
    matmul_tn_acc(&cache.activation, &d_logits, g_out_w);
    d_logits.accumulate_col_sums(&mut g_out_b.data);
    let mut d_act = matmul_nt(&d_logits, out_w);
    for (v, &pre) in d_act.data.iter_mut().zip(&cache.pre_activation.data) {
        *v *= gelu_grad(pre);
    }
    matmul_tn_acc(h, &d_act, g_in_w);
    d_act.accumulate_col_sums(&mut g_in_b.data);
    matmul_nt(&d_act, in_w)
}

/// Raw start/end logits for every position, before masking.
#[derive(Debug, Clone)]
pub struct SpanLogits<T> {
    pub start: Vec<T>,
    pub end: Vec<T>,
    start_cache: ScorerCache<T>,
    end_cache: ScorerCache<T>,
}

pub fn span_scores<T: Scalar>(h: &Mat<T>, params: &HeadParams<T>) -> SpanLogits<T> {
    let (start, start_cache) = score_tokens(
        h,
        &params.span_start_in_weight,
        &params.span_start_in_bias,
        &params.span_start_out_weight,
        &params.span_start_out_bias,
    );
    let (end, end_cache) = score_tokens(
        h,
        &params.span_end_in_weight,
        &params.span_end_in_bias,
        &params.span_end_out_weight,
        &params.span_end_out_bias,
    );
    SpanLogits { start, end, start_cache, end_cache }
}

/// Softmax over positions; padded positions get probability zero. Position
/// 0 (CLS) competes with content tokens.
pub fn masked_softmax<T: Scalar>(logits: &[T], mask: &[u8]) -> Vec<T> {
    let masked: Vec<T> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m == 1 { l } else { T::NEG_INFINITY })
        .collect();
    softmax(&masked)
}

pub fn span_logits<T: Scalar>(h: &Mat<T>, params: &HeadParams<T>, mask: &[u8]) -> SpanDistributions<T> {
    let scores = span_scores(h, params);
    SpanDistributions {
        p_start: masked_softmax(&scores.start, mask),
        p_end: masked_softmax(&scores.end, mask),
    }
}

/// Backward of both span scorers; returns `∂/∂H_L`.
pub fn span_backward<T: Scalar>(
    h: &Mat<T>,
    params: &HeadParams<T>,
    logits: &SpanLogits<T>,
    d_start: &[T],
    d_end: &[T],
    grads: &mut HeadParams<T>,
) -> Mat<T> {
    let mut dh = score_tokens_backward(
        h,
        &logits.start_cache,
        d_start,
        &params.span_start_in_weight,
        &params.span_start_out_weight,
        &mut grads.span_start_in_weight,
        &mut grads.span_start_in_bias,
        &mut grads.span_start_out_weight,
        &mut grads.span_start_out_bias,
    );
    dh.add_assign(&score_tokens_backward(
        h,
        &logits.end_cache,
        d_end,
        &params.span_end_in_weight,
        &params.span_end_out_weight,
        &mut grads.span_end_in_weight,
        &mut grads.span_end_in_bias,
        &mut grads.span_end_out_weight,
        &mut grads.span_end_out_bias,
    ));
    dh
}

/// Mean of the rows at `positions`.
pub fn pool<T: Scalar>(h: &Mat<T>, positions: &[usize]) -> Result<Vec<T>> {
    if positions.is_empty() {
        return Err(Error::Degenerate("cannot pool an empty token range".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= h.rows) {
        return Err(Error::Degenerate(format!("position {p} outside {} rows", h.rows)));
    }
    let mut out = vec![T::ZERO; h.cols];
    for &p in positions {
        for (o, &v) in out.iter_mut().zip(h.row(p)) {
            *o += v;
        }
    }
    let n = T::of(positions.len() as f64);
    out.iter_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// Spreads a pooled gradient back over the pooled rows.
pub fn pool_backward<T: Scalar>(grad: &[T], positions: &[usize], dh: &mut Mat<T>) {
    let n = T::of(positions.len() as f64);
    for &p in positions {
        for (o, &g) in dh.row_mut(p).iter_mut().zip(grad) {
            *o += g / n;
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaggerCache<T> {
    input: Vec<T>,
    pre_activation: Vec<T>,
    activation: Vec<T>,
}

pub fn tagger_logits<T: Scalar>(h_q: &[T], h_sent: &[T], params: &HeadParams<T>) -> ([T; 2], TaggerCache<T>) {
    let input: Vec<T> = h_q.iter().chain(h_sent).copied().collect();
    let pre_activation = linear_vec(&input, &params.tagger_in_weight, &params.tagger_in_bias);
    let activation: Vec<T> = pre_activation.iter().map(|&v| gelu(v)).collect();
    let logits = linear_vec(&activation, &params.tagger_out_weight, &params.tagger_out_bias);
    (to_array(logits), TaggerCache { input, pre_activation, activation })
}

pub fn tag_sentence<T: Scalar>(h_q: &[T], h_sent: &[T], params: &HeadParams<T>) -> SentenceTagDistribution<T> {
    let (logits, _) = tagger_logits(h_q, h_sent, params);
    SentenceTagDistribution { p_t: to_array(softmax(&logits)) }
}

/// Returns `(∂/∂h_q, ∂/∂h_sent)`.
pub fn tagger_backward<T: Scalar>(
    params: &HeadParams<T>,
    cache: &TaggerCache<T>,
    d_logits: &[T; 2],
    grads: &mut HeadParams<T>,
) -> (Vec<T>, Vec<T>) {
    let mut d_act = linear_vec_backward(
        &cache.activation,
        &params.tagger_out_weight,
        d_logits,
        &mut grads.tagger_out_weight,
        &mut grads.tagger_out_bias,
    );
    for (v, &pre) in d_act.iter_mut().zip(&cache.pre_activation) {
        *v *= gelu_grad(pre);
    }
    let d_in = linear_vec_backward(
        &cache.input,
        &params.tagger_in_weight,
        &d_act,
        &mut grads.tagger_in_weight,
        &mut grads.tagger_in_bias,
    );
    let d = d_in.len() / 2;
    (d_in[..d].to_vec(), d_in[d..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::relative_error;

    fn cfg() -> HeadConfig {
        HeadConfig { hidden: 4, ffn_hidden: 5 }
    }

    fn jittered(seed: u64) -> HeadParams<f64> {
        let mut p = HeadParams::init(&cfg(), seed);
        let mut rng = Stream::new(seed, 3);
        for (_, t) in p.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v += 0.5 * rng.normal());
        }
        p
    }

    fn hidden(rows: usize) -> Mat<f64> {
        Mat::from_vec(rows, 4, (0..rows * 4).map(|i| ((i * 5 + 1) as f64 * 0.73).cos()).collect())
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-6
    }

    #[test]
    fn multispan_closed_forms() {
        let mut p = HeadParams::<f64>::zeros(&cfg());
        let h = [0.3, -1.0, 2.0, 0.5];
        assert_eq!(predict_multispan(&h, &p).p_s, [0.5, 0.5]);
        p.multispan_bias.data = vec![3f64.ln(), 0.0];
        let d = predict_multispan(&h, &p);
        assert!(close(d.p_s[0], 0.75) && close(d.p_s[1], 0.25));
        p.multispan_bias.data = vec![3f64.ln() + 40.0, 40.0];
        let shifted = predict_multispan(&h, &p);
        assert!(close(shifted.p_s[0], 0.75) && close(shifted.p_s[1], 0.25));
    }

    #[test]
    fn answer_type_closed_forms() {
        let mut p = HeadParams::<f64>::zeros(&cfg());
        let h = [1.0, 2.0, 3.0, 4.0];
        let u = predict_answer_type(&h, &p).p_a;
        assert!(u.iter().all(|&v| close(v, 1.0 / 3.0)));
        p.answer_type_bias.data = vec![0.0, 0.0, 2f64.ln()];
        let d = predict_answer_type(&h, &p);
        assert!(close(d.p_a[0], 0.25) && close(d.p_a[1], 0.25) && close(d.p_a[2], 0.5));
        assert_eq!(d.argmax(), AnswerType::Unknown);
        p.answer_type_bias.data = vec![5.0, 5.0, 5.0 + 2f64.ln()];
        assert_eq!(predict_answer_type(&h, &p).argmax(), AnswerType::Unknown);
    }

    #[test]
    fn span_distributions_respect_mask() {
        let p = HeadParams::<f64>::zeros(&cfg());
        let h = hidden(5);
        let d = span_logits(&h, &p, &[1, 1, 1, 0, 0]);
        for probs in [&d.p_start, &d.p_end] {
            assert!(probs[..3].iter().all(|&v| close(v, 1.0 / 3.0)));
            assert_eq!(&probs[3..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn span_distribution_matches_hand_rolled_oracle() {
        let p = jittered(2);
        let h = hidden(4);
        let mask = [1u8, 1, 1, 0];
        let d = span_logits(&h, &p, &mask);
        for (probs, w1, b1, w2, b2) in [
            (&d.p_start, &p.span_start_in_weight, &p.span_start_in_bias, &p.span_start_out_weight, &p.span_start_out_bias),
            (&d.p_end, &p.span_end_in_weight, &p.span_end_in_bias, &p.span_end_out_weight, &p.span_end_out_bias),
        ] {
            let mut logits = Vec::new();
            for t in 0..3 {
                let mut z = b2.data[0];
                for j in 0..5 {
                    let mut a = b1.data[j];
                    for i in 0..4 {
                        a += h.at(t, i) * w1.at(i, j);
                    }
                    let g = 0.5 * a * (1.0 + libm::erf(a / 2f64.sqrt()));
                    z += g * w2.at(j, 0);
                }
                logits.push(z);
            }
            let total: f64 = logits.iter().map(|l| l.exp()).sum();
            for t in 0..3 {
                assert!(close(probs[t], logits[t].exp() / total));
            }
            assert_eq!(probs[3], 0.0);
        }
    }

    #[test]
    fn pooling() {
        let h = hidden(4);
        assert_eq!(pool(&h, &[2]).unwrap(), h.row(2));
        let same = Mat::from_vec(2, 2, vec![1.5, -2.0, 1.5, -2.0]);
        assert_eq!(pool(&same, &[0, 1]).unwrap(), vec![1.5, -2.0]);
        let mean = pool(&h, &[0, 1, 3]).unwrap();
        for c in 0..4 {
            assert!(close(mean[c], (h.at(0, c) + h.at(1, c) + h.at(3, c)) / 3.0));
        }
        assert!(matches!(pool(&h, &[]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn tagger_properties() {
        let zero = HeadParams::<f64>::zeros(&cfg());
        let q = [0.1, 0.2, 0.3, 0.4];
        let s = [-0.5, 0.0, 0.9, 1.0];
        assert_eq!(tag_sentence(&q, &s, &zero).p_t, [0.5, 0.5]);
        let p = jittered(4);
        let forward = tag_sentence(&q, &s, &p);
        let swapped = tag_sentence(&s, &q, &p);
        assert!((forward.p_t[0] - swapped.p_t[0]).abs() > 1e-6);
        // Independent matrix-multiply oracle.
        let x: Vec<f64> = q.iter().chain(&s).copied().collect();
        let mut logits = p.tagger_out_bias.data.clone();
        for j in 0..5 {
            let a: f64 = p.tagger_in_bias.data[j] + (0..8).map(|i| x[i] * p.tagger_in_weight.at(i, j)).sum::<f64>();
            let g = 0.5 * a * (1.0 + libm::erf(a / 2f64.sqrt()));
            for k in 0..2 {
                logits[k] += g * p.tagger_out_weight.at(j, k);
            }
        }
        let z = logits[0].exp() + logits[1].exp();
        assert!(close(forward.p_t[0], logits[0].exp() / z));
        assert!(close(forward.p_t[0] + forward.p_t[1], 1.0));
    }

    fn ce(probs: &[f64], label: usize) -> f64 {
        -probs[label].ln()
    }

    /// Cross-entropy of every head on fixed inputs, summed.
    fn head_loss(p: &HeadParams<f64>, h: &Mat<f64>, mask: &[u8]) -> f64 {
        let cls = h.row(0);
        let spans = span_logits(h, p, mask);
        let q = pool(h, &[1, 2]).unwrap();
        let s = pool(h, &[3, 4]).unwrap();
        ce(&predict_multispan(cls, p).p_s, 1)
            + ce(&predict_answer_type(cls, p).p_a, 2)
            + ce(&spans.p_start, 2)
            + ce(&spans.p_end, 3)
            + ce(&tag_sentence(&q, &s, p).p_t, 1)
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let p = jittered(6);
        let h = hidden(6);
        let mask = [1u8, 1, 1, 1, 1, 0];
        let mut grads = HeadParams::zeros(&cfg());
        let mut dh = Mat::zeros(6, 4);

        let cls = h.row(0).to_vec();
        let mut d_ms = predict_multispan(&cls, &p).p_s;
        d_ms[1] -= 1.0;
        let mut d_at = predict_answer_type(&cls, &p).p_a;
        d_at[2] -= 1.0;
        let d_cls = cls_heads_backward(&cls, &p, &d_ms, &d_at, &mut grads);
        for (v, g) in dh.row_mut(0).iter_mut().zip(d_cls) {
            *v += g;
        }

        let logits = span_scores(&h, &p);
        let mut d_start = masked_softmax(&logits.start, &mask);
        d_start[2] -= 1.0;
        let mut d_end = masked_softmax(&logits.end, &mask);
        d_end[3] -= 1.0;
        dh.add_assign(&span_backward(&h, &p, &logits, &d_start, &d_end, &mut grads));

        let q = pool(&h, &[1, 2]).unwrap();
        let s = pool(&h, &[3, 4]).unwrap();
        let (tl, cache) = tagger_logits(&q, &s, &p);
        let mut d_tag = to_array::<f64, 2>(softmax(&tl));
        d_tag[1] -= 1.0;
        let (dq, ds) = tagger_backward(&p, &cache, &d_tag, &mut grads);
        pool_backward(&dq, &[1, 2], &mut dh);
        pool_backward(&ds, &[3, 4], &mut dh);

        let eps = 1e-6;
        let names: Vec<String> = grads.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            for i in 0..grads.tensors()[ti].1.len() {
                let mut plus = p.clone();
                plus.tensors_mut()[ti].1.data[i] += eps;
                let mut minus = p.clone();
                minus.tensors_mut()[ti].1.data[i] -= eps;
                let numeric = (head_loss(&plus, &h, &mask) - head_loss(&minus, &h, &mask)) / (2.0 * eps);
                let analytic = grads.tensors()[ti].1.data[i];
                assert!(relative_error(analytic, numeric) <= 1e-4, "{name}[{i}]: {analytic} vs {numeric}");
            }
        }
        for i in 0..h.len() {
            let mut plus = h.clone();
            plus.data[i] += eps;
            let mut minus = h.clone();
            minus.data[i] -= eps;
            let numeric = (head_loss(&p, &plus, &mask) - head_loss(&p, &minus, &mask)) / (2.0 * eps);
            assert!(relative_error(dh.data[i], numeric) <= 1e-4, "dH[{i}]: {} vs {numeric}", dh.data[i]);
        }
    }
}
