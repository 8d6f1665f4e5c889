//! Pre-normalisation transformer encoder with analytic gradients.
//!
//! Each layer computes
//!
//! ```text
//! x = x + Drop(Attn(LN1(x)))
//! x = x + Drop(W2 · GELU(W1 · LN2(x)))
//! ```
//!
//! and a final layer norm produces `H_L`. The forward pass records whatever
//! the backward pass needs in an [`EncoderCache`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    gelu, gelu_grad, matmul, matmul_nt, matmul_tn_acc, softmax_in_place, Mat, Scalar,
};
use crate::rng::Stream;
use crate::tokenizer::Encoding;

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            hidden: 64,
            ffn_dim: 256,
            max_positions: 512,
            vocab_size: 0,
            dropout_rate: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.max_positions == 0 || self.vocab_size == 0 {
            return Err(Error::Config("ffn_dim, max_positions and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm_scale: Mat<T>,
    pub attn_norm_shift: Mat<T>,
    pub query_weight: Mat<T>,
    pub query_bias: Mat<T>,
    pub key_weight: Mat<T>,
    pub key_bias: Mat<T>,
    pub value_weight: Mat<T>,
    pub value_bias: Mat<T>,
    pub output_weight: Mat<T>,
    pub output_bias: Mat<T>,
    pub ffn_norm_scale: Mat<T>,
    pub ffn_norm_shift: Mat<T>,
    pub ffn_in_weight: Mat<T>,
    pub ffn_in_bias: Mat<T>,
    pub ffn_out_weight: Mat<T>,
    pub ffn_out_bias: Mat<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            attn_norm_scale: Mat::zeros(1, d),
            attn_norm_shift: Mat::zeros(1, d),
            query_weight: Mat::zeros(d, d),
            query_bias: Mat::zeros(1, d),
            key_weight: Mat::zeros(d, d),
            key_bias: Mat::zeros(1, d),
            value_weight: Mat::zeros(d, d),
            value_bias: Mat::zeros(1, d),
            output_weight: Mat::zeros(d, d),
            output_bias: Mat::zeros(1, d),
            ffn_norm_scale: Mat::zeros(1, d),
            ffn_norm_shift: Mat::zeros(1, d),
            ffn_in_weight: Mat::zeros(d, f),
            ffn_in_bias: Mat::zeros(1, f),
            ffn_out_weight: Mat::zeros(f, d),
            ffn_out_bias: Mat::zeros(1, d),
        }
    }

    fn fields(&self) -> [(&'static str, &Mat<T>); 16] {
        [
            ("attn_norm_scale", &self.attn_norm_scale),
            ("attn_norm_shift", &self.attn_norm_shift),
            ("query_weight", &self.query_weight),
            ("query_bias", &self.query_bias),
            ("key_weight", &self.key_weight),
            ("key_bias", &self.key_bias),
            ("value_weight", &self.value_weight),
            ("value_bias", &self.value_bias),
            ("output_weight", &self.output_weight),
            ("output_bias", &self.output_bias),
            ("ffn_norm_scale", &self.ffn_norm_scale),
            ("ffn_norm_shift", &self.ffn_norm_shift),
            ("ffn_in_weight", &self.ffn_in_weight),
            ("ffn_in_bias", &self.ffn_in_bias),
            ("ffn_out_weight", &self.ffn_out_weight),
            ("ffn_out_bias", &self.ffn_out_bias),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Mat<T>); 16] {
        [
            ("attn_norm_scale", &mut self.attn_norm_scale),
            ("attn_norm_shift", &mut self.attn_norm_shift),
            ("query_weight", &mut self.query_weight),
            ("query_bias", &mut self.query_bias),
            ("key_weight", &mut self.key_weight),
            ("key_bias", &mut self.key_bias),
            ("value_weight", &mut self.value_weight),
            ("value_bias", &mut self.value_bias),
            ("output_weight", &mut self.output_weight),
            ("output_bias", &mut self.output_bias),
            ("ffn_norm_scale", &mut self.ffn_norm_scale),
            ("ffn_norm_shift", &mut self.ffn_norm_shift),
            ("ffn_in_weight", &mut self.ffn_in_weight),
            ("ffn_in_bias", &mut self.ffn_in_bias),
            ("ffn_out_weight", &mut self.ffn_out_weight),
            ("ffn_out_bias", &mut self.ffn_out_bias),
        ]
    }
}

/// All encoder tensors. The same type doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embedding: Mat<T>,
    pub position_embedding: Mat<T>,
    pub segment_embedding: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_scale: Mat<T>,
    pub final_norm_shift: Mat<T>,
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden;
        Self {
            token_embedding: Mat::zeros(cfg.vocab_size, d),
            position_embedding: Mat::zeros(cfg.max_positions, d),
            segment_embedding: Mat::zeros(2, d),
            layers: (0..cfg.layers).map(|_| LayerParams::zeros(d, cfg.ffn_dim)).collect(),
            final_norm_scale: Mat::zeros(1, d),
            final_norm_shift: Mat::zeros(1, d),
        }
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &self.token_embedding),
            ("encoder.position_embedding".to_string(), &self.position_embedding),
            ("encoder.segment_embedding".to_string(), &self.segment_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("encoder.layers.{i}.{name}"), t));
            }
        }
        out.push(("encoder.final_norm_scale".to_string(), &self.final_norm_scale));
        out.push(("encoder.final_norm_shift".to_string(), &self.final_norm_shift));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = vec![
            ("encoder.token_embedding".to_string(), &mut self.token_embedding),
            ("encoder.position_embedding".to_string(), &mut self.position_embedding),
            ("encoder.segment_embedding".to_string(), &mut self.segment_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("encoder.layers.{i}.{name}"), t));
            }
        }
        out.push(("encoder.final_norm_scale".to_string(), &mut self.final_norm_scale));
        out.push(("encoder.final_norm_shift".to_string(), &mut self.final_norm_shift));
        out
    }
}

/// Fills `m` from a normal with standard deviation `std`, redrawing values
/// beyond three standard deviations.
pub fn fill_truncated_normal<T: Scalar>(m: &mut Mat<T>, std: f64, rng: &mut Stream) {
    for v in m.data.iter_mut() {
        let z = loop {
            let z = rng.normal();
            if z.abs() <= 3.0 {
                break z;
            }
        };
        *v = T::of(z * std);
    }
}

/// Weights and embeddings from a truncated normal (std 0.02), norm scales
/// one, everything else zero.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    cfg.validate()?;
    let mut params = EncoderParams::zeros(cfg);
    let mut rng = Stream::new(seed, 0);
    for (name, t) in params.tensors_mut() {
        if name.ends_with("norm_scale") {
            t.fill(T::ONE);
        } else if name.ends_with("weight") || name.ends_with("embedding") {
            fill_truncated_normal(t, INIT_STD, &mut rng);
        }
    }
    Ok(params)
}

#[derive(Debug, Clone)]
struct NormCache<T> {
    normalized: Mat<T>,
    inv_std: Vec<T>,
}

/// Row-wise layer norm; returns output and cache.
fn layer_norm<T: Scalar>(x: &Mat<T>, scale: &Mat<T>, shift: &Mat<T>) -> (Mat<T>, NormCache<T>) {
    let d = x.cols;
    let mut normalized = Mat::zeros(x.rows, d);
    let mut out = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    let n = T::of(d as f64);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::ONE / (var + T::of(LAYER_NORM_EPS)).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let z = (row[c] - mean) * inv;
            *normalized.at_mut(r, c) = z;
            *out.at_mut(r, c) = z * scale.data[c] + shift.data[c];
        }
    }
    (out, NormCache { normalized, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    grad_out: &Mat<T>,
    cache: &NormCache<T>,
    scale: &Mat<T>,
    grad_scale: &mut Mat<T>,
    grad_shift: &mut Mat<T>,
) -> Mat<T> {
    let d = grad_out.cols;
    let n = T::of(d as f64);
    let mut grad_in = Mat::zeros(grad_out.rows, d);
    let mut dz = vec![T::ZERO; d];
    for r in 0..grad_out.rows {
        let go = grad_out.row(r);
        let z = cache.normalized.row(r);
        let mut sum_dz = T::ZERO;
        let mut sum_dz_z = T::ZERO;
        for c in 0..d {
            grad_scale.data[c] += go[c] * z[c];
            grad_shift.data[c] += go[c];
            dz[c] = go[c] * scale.data[c];
            sum_dz += dz[c];
            sum_dz_z += dz[c] * z[c];
        }
        let inv = cache.inv_std[r];
        let gi = grad_in.row_mut(r);
        for c in 0..d {
            gi[c] = inv / n * (n * dz[c] - sum_dz - z[c] * sum_dz_z);
        }
    }
    grad_in
}

fn linear<T: Scalar>(x: &Mat<T>, weight: &Mat<T>, bias: &Mat<T>) -> Mat<T> {
    let mut y = matmul(x, weight);
    y.add_row_bias(&bias.data);
    y
}

/// Accumulates weight/bias gradients and returns the input gradient.
fn linear_backward<T: Scalar>(
    x: &Mat<T>,
    weight: &Mat<T>,
    grad_out: &Mat<T>,
    grad_weight: &mut Mat<T>,
    grad_bias: &mut Mat<T>,
) -> Mat<T> {
    matmul_tn_acc(x, grad_out, grad_weight);
    grad_out.accumulate_col_sums(&mut grad_bias.data);
    matmul_nt(grad_out, weight)
}

fn dropout_mask<T: Scalar>(rows: usize, cols: usize, rate: f64, seed: u64, site: u64) -> Mat<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    let mut rng = Stream::new(seed, site);
    let mut mask = Mat::zeros(rows, cols);
    for v in mask.data.iter_mut() {
        *v = if rng.unit() < rate { T::ZERO } else { keep };
    }
    mask
}

fn apply_mask<T: Scalar>(x: &mut Mat<T>, mask: &Option<Mat<T>>) {
    if let Some(m) = mask {
        for (v, k) in x.data.iter_mut().zip(&m.data) {
            *v *= *k;
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    attn_norm: NormCache<T>,
    query: Mat<T>,
    key: Mat<T>,
    value: Mat<T>,
    /// Attention weights, one `T×T` matrix per head.
    pub probs: Vec<Mat<T>>,
    context: Mat<T>,
    attn_drop: Option<Mat<T>>,
    ffn_norm: NormCache<T>,
    pre_activation: Mat<T>,
    activation: Mat<T>,
    ffn_drop: Option<Mat<T>>,
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    ids: Vec<u32>,
    segments: Vec<u8>,
    embed_drop: Option<Mat<T>>,
    pub layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
}

impl<T: Scalar> EncoderCache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn check_input(cfg: &EncoderConfig, enc: &Encoding) -> Result<()> {
    if enc.len() > cfg.max_positions {
        return Err(Error::Length { len: enc.len(), max: cfg.max_positions });
    }
    if enc.is_empty() {
        return Err(Error::Degenerate("empty encoding".into()));
    }
    if let Some(&id) = enc.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Consistency(format!("token id {id} outside vocabulary")));
    }
    Ok(())
}

/// Forward pass returning `H_L` (one row per position) and the cache.
pub fn forward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    enc: &Encoding,
    train_mode: bool,
    seed: u64,
) -> Result<(Mat<T>, EncoderCache<T>)> {
    check_input(cfg, enc)?;
    let n = enc.len();
    let d = cfg.hidden;
    let dropout = train_mode && cfg.dropout_rate > 0.0;
    let mask_at = |site: u64, cols: usize| {
        dropout.then(|| dropout_mask::<T>(n, cols, cfg.dropout_rate, seed, site))
    };

    let mut x = Mat::zeros(n, d);
    for t in 0..n {
        let tok = params.token_embedding.row(enc.ids[t] as usize);
        let pos = params.position_embedding.row(t);
        let seg = params.segment_embedding.row(enc.segment_ids[t].min(1) as usize);
        for (c, v) in x.row_mut(t).iter_mut().enumerate() {
            *v = tok[c] + pos[c] + seg[c];
        }
    }
    let embed_drop = mask_at(1, d);
    apply_mask(&mut x, &embed_drop);

    let key_allowed: Vec<bool> = enc.attention_mask.iter().map(|&m| m == 1).collect();
    let scale = T::ONE / T::of(cfg.head_dim() as f64).sqrt();
    let hd = cfg.head_dim();
    let mut caches = Vec::with_capacity(cfg.layers);
    for (li, layer) in params.layers.iter().enumerate() {
        let (normed, attn_norm) = layer_norm(&x, &layer.attn_norm_scale, &layer.attn_norm_shift);
        let query = linear(&normed, &layer.query_weight, &layer.query_bias);
        let key = linear(&normed, &layer.key_weight, &layer.key_bias);
        let value = linear(&normed, &layer.value_weight, &layer.value_bias);
        let mut context = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = query.column_block(h * hd, hd);
            let kh = key.column_block(h * hd, hd);
            let vh = value.column_block(h * hd, hd);
            let mut scores = matmul_nt(&qh, &kh);
            for r in 0..n {
                let row = scores.row_mut(r);
                for (c, s) in row.iter_mut().enumerate() {
                    *s = if key_allowed[c] { *s * scale } else { T::NEG_INFINITY };
                }
                softmax_in_place(row);
            }
            context.set_column_block(h * hd, &matmul(&scores, &vh));
            probs.push(scores);
        }
        let mut attn_out = linear(&context, &layer.output_weight, &layer.output_bias);
        let attn_drop = mask_at(2 + 2 * li as u64, d);
        apply_mask(&mut attn_out, &attn_drop);
        x.add_assign(&attn_out);

        let (normed2, ffn_norm) = layer_norm(&x, &layer.ffn_norm_scale, &layer.ffn_norm_shift);
        let pre_activation = linear(&normed2, &layer.ffn_in_weight, &layer.ffn_in_bias);
        let mut activation = pre_activation.clone();
        activation.data.iter_mut().for_each(|v| *v = gelu(*v));
        let mut ffn_out = linear(&activation, &layer.ffn_out_weight, &layer.ffn_out_bias);
        let ffn_drop = mask_at(3 + 2 * li as u64, d);
        apply_mask(&mut ffn_out, &ffn_drop);
        x.add_assign(&ffn_out);

        caches.push(LayerCache {
            attn_norm,
            query,
            key,
            value,
            probs,
            context,
            attn_drop,
            ffn_norm,
            pre_activation,
            activation,
            ffn_drop,
        });
    }
    let (out, final_norm) = layer_norm(&x, &params.final_norm_scale, &params.final_norm_shift);
    let cache = EncoderCache {
        ids: enc.ids.clone(),
        segments: enc.segment_ids.clone(),
        embed_drop,
        layers: caches,
        final_norm,
    };
    Ok((out, cache))
}

/// Forward pass without keeping the cache.
pub fn encode<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    enc: &Encoding,
    train_mode: bool,
    seed: u64,
) -> Result<Mat<T>> {
    forward(params, cfg, enc, train_mode, seed).map(|(h, _)| h)
}

/// Accumulates `∂loss/∂θ` into `grads` given `∂loss/∂H_L`.
pub fn backward_into<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    enc: &Encoding,
    upstream: &Mat<T>,
    cache: &EncoderCache<T>,
    grads: &mut EncoderParams<T>,
) -> Result<()> {
    let n = enc.len();
    if cache.ids != enc.ids || cache.segments != enc.segment_ids {
        return Err(Error::Consistency("cache does not belong to this encoding".into()));
    }
    if upstream.rows != n || upstream.cols != cfg.hidden || cache.layers.len() != params.layers.len() {
        return Err(Error::Consistency(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows, upstream.cols, n, cfg.hidden
        )));
    }
    let hd = cfg.head_dim();
    let scale = T::ONE / T::of(hd as f64).sqrt();
    let mut dx = layer_norm_backward(
        upstream,
        &cache.final_norm,
        &params.final_norm_scale,
        &mut grads.final_norm_scale,
        &mut grads.final_norm_shift,
    );
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let lc = &cache.layers[li];
        let g = &mut grads.layers[li];

        // Feed-forward block.
        let mut d_ffn = dx.clone();
        apply_mask(&mut d_ffn, &lc.ffn_drop);
        let mut d_act = linear_backward(
            &lc.activation,
            &layer.ffn_out_weight,
            &d_ffn,
            &mut g.ffn_out_weight,
            &mut g.ffn_out_bias,
        );
        for (v, &pre) in d_act.data.iter_mut().zip(&lc.pre_activation.data) {
            *v *= gelu_grad(pre);
        }
        let normed2 = normed_from(&lc.ffn_norm, &layer.ffn_norm_scale, &layer.ffn_norm_shift);
        let d_norm2 =
            linear_backward(&normed2, &layer.ffn_in_weight, &d_act, &mut g.ffn_in_weight, &mut g.ffn_in_bias);
        let d_in2 = layer_norm_backward(
            &d_norm2,
            &lc.ffn_norm,
            &layer.ffn_norm_scale,
            &mut g.ffn_norm_scale,
            &mut g.ffn_norm_shift,
        );
        dx.add_assign(&d_in2);

        // Attention block.
        let mut d_attn = dx.clone();
        apply_mask(&mut d_attn, &lc.attn_drop);
        let d_context = linear_backward(
            &lc.context,
            &layer.output_weight,
            &d_attn,
            &mut g.output_weight,
            &mut g.output_bias,
        );
        let mut d_query = Mat::zeros(n, cfg.hidden);
        let mut d_key = Mat::zeros(n, cfg.hidden);
        let mut d_value = Mat::zeros(n, cfg.hidden);
        for h in 0..cfg.heads {
            let probs = &lc.probs[h];
            let qh = lc.query.column_block(h * hd, hd);
            let kh = lc.key.column_block(h * hd, hd);
            let vh = lc.value.column_block(h * hd, hd);
            let dch = d_context.column_block(h * hd, hd);
            let mut dvh = Mat::zeros(n, hd);
            matmul_tn_acc(probs, &dch, &mut dvh);
            let mut dscores = matmul_nt(&dch, &vh);
            for r in 0..n {
                let p = probs.row(r);
                let ds = dscores.row_mut(r);
                let dot: T = p.iter().zip(ds.iter()).map(|(&a, &b)| a * b).sum();
                for c in 0..n {
                    ds[c] = p[c] * (ds[c] - dot) * scale;
                }
            }
            let dqh = matmul(&dscores, &kh);
            let mut dkh = Mat::zeros(n, hd);
            matmul_tn_acc(&dscores, &qh, &mut dkh);
            d_query.set_column_block(h * hd, &dqh);
            d_key.set_column_block(h * hd, &dkh);
            d_value.set_column_block(h * hd, &dvh);
        }
        let normed1 = normed_from(&lc.attn_norm, &layer.attn_norm_scale, &layer.attn_norm_shift);
        let mut d_norm1 =
            linear_backward(&normed1, &layer.query_weight, &d_query, &mut g.query_weight, &mut g.query_bias);
        d_norm1.add_assign(&linear_backward(
            &normed1,
            &layer.key_weight,
            &d_key,
            &mut g.key_weight,
            &mut g.key_bias,
        ));
        d_norm1.add_assign(&linear_backward(
            &normed1,
            &layer.value_weight,
            &d_value,
            &mut g.value_weight,
            &mut g.value_bias,
        ));
        let d_in1 = layer_norm_backward(
            &d_norm1,
            &lc.attn_norm,
            &layer.attn_norm_scale,
            &mut g.attn_norm_scale,
            &mut g.attn_norm_shift,
        );
        dx.add_assign(&d_in1);
    }
    apply_mask(&mut dx, &cache.embed_drop);
    for t in 0..n {
        let grad = dx.row(t);
        let seg = enc.segment_ids[t].min(1) as usize;
        for (target, row) in [
            (&mut grads.token_embedding, enc.ids[t] as usize),
            (&mut grads.position_embedding, t),
            (&mut grads.segment_embedding, seg),
        ] {
            for (v, g) in target.row_mut(row).iter_mut().zip(grad) {
                *v += *g;
            }
        }
    }
    Ok(())
}

/// Rebuilds a layer-norm output from its cached normalised values.
fn normed_from<T: Scalar>(cache: &NormCache<T>, scale: &Mat<T>, shift: &Mat<T>) -> Mat<T> {
    let mut out = cache.normalized.clone();
    for r in 0..out.rows {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = *v * scale.data[c] + shift.data[c];
        }
    }
    out
}

/// Gradient of the loss with respect to every encoder tensor.
pub fn encode_backward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    enc: &Encoding,
    upstream: &Mat<T>,
    cache: &EncoderCache<T>,
) -> Result<EncoderParams<T>> {
    let mut grads = EncoderParams::zeros(cfg);
    backward_into(params, cfg, enc, upstream, cache, &mut grads)?;
    Ok(grads)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::tokenizer::Vocab;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ffn_dim: 16,
            max_positions: 8,
            vocab_size: 10,
            dropout_rate: 0.1,
        }
    }

    pub(crate) fn tiny_encoding() -> Encoding {
        Encoding {
            ids: vec![Vocab::CLS_ID, 5, Vocab::SEP_ID, 7, 8, Vocab::SEP_ID],
            offsets: vec![(0, 0), (0, 4), (0, 0), (0, 2), (3, 5), (0, 0)],
            segment_ids: vec![0, 0, 0, 1, 1, 1],
            attention_mask: vec![1; 6],
            truncated: false,
        }
    }

    fn probe(rows: usize, cols: usize) -> Mat<f64> {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i * 7 + 3) as f64 * 0.61).sin()).collect())
    }

    fn loss(params: &EncoderParams<f64>, cfg: &EncoderConfig, enc: &Encoding, weights: &Mat<f64>, train: bool) -> f64 {
        let h = encode(params, cfg, enc, train, 11).unwrap();
        h.data.iter().zip(&weights.data).map(|(a, b)| a * b).sum()
    }

    /// Perturbs the parameters so norms and biases are not at their
    /// symmetric initial values.
    fn jitter(params: &mut EncoderParams<f64>) {
        let mut rng = Stream::new(5, 9);
        for (_, t) in params.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += 0.3 * rng.normal();
            }
        }
    }

    #[test]
    fn init_is_deterministic_and_documented() {
        let cfg = EncoderConfig { vocab_size: 200, ..EncoderConfig::default() };
        let a: EncoderParams<f32> = init_params(&cfg, 3).unwrap();
        let b: EncoderParams<f32> = init_params(&cfg, 3).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.tensors() {
            if name.ends_with("norm_scale") {
                assert!(t.data.iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with("bias") || name.ends_with("shift") {
                assert!(t.data.iter().all(|&v| v == 0.0), "{name}");
            }
        }
        let e = &a.token_embedding.data;
        assert!(e.len() >= 10_000);
        let mean = e.iter().map(|&v| v as f64).sum::<f64>() / e.len() as f64;
        let var = e.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / e.len() as f64;
        assert!((var - 0.0004).abs() <= 0.2 * 0.0004, "variance {var}");
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny_config();
        let mut params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        jitter(&mut params);
        let mut enc = tiny_encoding();
        enc.pad_to(8);
        let (_, cache) = forward(&params, &cfg, &enc, false, 0).unwrap();
        for layer in &cache.layers {
            for p in &layer.probs {
                for r in 0..p.rows {
                    let row = p.row(r);
                    let total: f64 = row[..6].iter().sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert_eq!(&row[6..], &[0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn padded_tokens_do_not_leak() {
        let cfg = tiny_config();
        let mut params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        jitter(&mut params);
        let mut enc = tiny_encoding();
        enc.pad_to(8);
        let a = encode(&params, &cfg, &enc, false, 0).unwrap();
        enc.ids[7] = 9;
        let b = encode(&params, &cfg, &enc, false, 0).unwrap();
        for r in 0..6 {
            assert_eq!(a.row(r), b.row(r));
        }
    }

    #[test]
    fn zero_layers_is_normalised_embedding_sum() {
        let cfg = EncoderConfig { layers: 0, ..tiny_config() };
        let mut params: EncoderParams<f64> = init_params(&cfg, 4).unwrap();
        jitter(&mut params);
        let enc = tiny_encoding();
        let h = encode(&params, &cfg, &enc, false, 0).unwrap();
        for t in 0..enc.len() {
            let e: Vec<f64> = (0..8)
                .map(|c| {
                    params.token_embedding.at(enc.ids[t] as usize, c)
                        + params.position_embedding.at(t, c)
                        + params.segment_embedding.at(enc.segment_ids[t] as usize, c)
                })
                .collect();
            let mean = e.iter().sum::<f64>() / 8.0;
            let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for c in 0..8 {
                let want = (e[c] - mean) / (var + LAYER_NORM_EPS).sqrt() * params.final_norm_scale.data[c]
                    + params.final_norm_shift.data[c];
                assert!((h.at(t, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalised_activations_are_standardised() {
        let cfg = EncoderConfig { vocab_size: 10, max_positions: 16, ..EncoderConfig::default() };
        let params: EncoderParams<f32> = init_params(&cfg, 2).unwrap();
        let enc = tiny_encoding();
        let (_, cache) = forward(&params, &cfg, &enc, false, 0).unwrap();
        let norms = cache
            .layers
            .iter()
            .flat_map(|l| [&l.attn_norm, &l.ffn_norm])
            .chain(std::iter::once(&cache.final_norm));
        for norm in norms {
            for r in 0..norm.normalized.rows {
                let row = norm.normalized.row(r);
                let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
                let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row.len() as f64;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn forward_is_deterministic_and_dropout_is_seeded() {
        let cfg = tiny_config();
        let params: EncoderParams<f32> = init_params(&cfg, 1).unwrap();
        let enc = tiny_encoding();
        let a = encode(&params, &cfg, &enc, true, 42).unwrap();
        let b = encode(&params, &cfg, &enc, true, 42).unwrap();
        assert_eq!(a, b);
        let c = encode(&params, &cfg, &enc, true, 43).unwrap();
        assert_ne!(a, c);
        let eval1 = encode(&params, &cfg, &enc, false, 1).unwrap();
        let eval2 = encode(&params, &cfg, &enc, false, 2).unwrap();
        assert_eq!(eval1, eval2);
    }

    #[test]
    fn over_length_input_is_rejected() {
        let cfg = tiny_config();
        let params: EncoderParams<f32> = init_params(&cfg, 1).unwrap();
        let mut enc = tiny_encoding();
        enc.pad_to(9);
        assert!(matches!(encode(&params, &cfg, &enc, false, 0), Err(Error::Length { len: 9, max: 8 })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cfg = tiny_config();
        let params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        let enc = tiny_encoding();
        let (_, cache) = forward(&params, &cfg, &enc, true, 3).unwrap();
        let grads = encode_backward(&params, &cfg, &enc, &Mat::zeros(6, 8), &cache).unwrap();
        for (_, t) in grads.tensors() {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let cfg = tiny_config();
        let params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        let enc = tiny_encoding();
        let (_, cache) = forward(&params, &cfg, &enc, false, 3).unwrap();
        let mut other = enc.clone();
        other.ids[1] = 6;
        assert!(matches!(
            encode_backward(&params, &cfg, &other, &Mat::zeros(6, 8), &cache),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            encode_backward(&params, &cfg, &enc, &Mat::zeros(5, 8), &cache),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn padded_position_embedding_gets_no_gradient() {
        let cfg = tiny_config();
        let mut params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        jitter(&mut params);
        let mut enc = tiny_encoding();
        enc.pad_to(8);
        let (_, cache) = forward(&params, &cfg, &enc, false, 3).unwrap();
        let mut upstream = probe(8, 8);
        for r in 6..8 {
            upstream.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        let grads = encode_backward(&params, &cfg, &enc, &upstream, &cache).unwrap();
        for r in 6..8 {
            assert!(grads.position_embedding.row(r).iter().all(|&v| v == 0.0));
        }
        assert!(grads.token_embedding.row(Vocab::PAD_ID as usize).iter().all(|&v| v == 0.0));
        assert!(grads.position_embedding.row(0).iter().any(|&v| v != 0.0));
    }

    fn finite_difference_check(train: bool) {
        let cfg = tiny_config();
        let mut params: EncoderParams<f64> = init_params(&cfg, 1).unwrap();
        jitter(&mut params);
        let enc = tiny_encoding();
        let weights = probe(6, 8);
        let (_, cache) = forward(&params, &cfg, &enc, train, 11).unwrap();
        let grads = encode_backward(&params, &cfg, &enc, &weights, &cache).unwrap();
        let analytic: Vec<(String, Vec<f64>)> =
            grads.tensors().into_iter().map(|(n, t)| (n, t.data.clone())).collect();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (ti, (name, values)) in analytic.iter().enumerate() {
            for i in 0..values.len() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].1.data[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].1.data[i] -= h;
                let numeric = (loss(&plus, &cfg, &enc, &weights, train) - loss(&minus, &cfg, &enc, &weights, train)) / (2.0 * h);
                let a = values[i];
                let err = crate::testutil::relative_error(a, numeric);
                assert!(err <= 1e-4, "{name}[{i}]: analytic {a} numeric {numeric}");
                worst = worst.max(err);
                checked += 1;
            }
        }
        assert!(checked > 500);
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        finite_difference_check(false);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        finite_difference_check(true);
    }
}
