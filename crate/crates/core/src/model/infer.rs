//! Value-only forward passes: teacher-forced logits without building a
//! tape, greedy decoding with a per-layer KV cache, and block-output
//! capture for representational-similarity analysis.
//!
//! These paths share their numeric kernels with the autodiff graph, so
//! the two routes agree to rounding; the inference route just skips node
//! bookkeeping, which matters when a frozen teacher is consulted every
//! training step.

use super::{patchify, Model};
use crate::autodiff::kernels;
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

/// Pooled output of one transformer block over a probe batch: `rows`
/// examples × `cols` features, one mean-pooled vector per example.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTap {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

fn param<'a>(model: &'a Model, name: &str) -> Result<(&'a [f64], &'a [usize])> {
    let t = model.param(name)?;
    Ok((&t.data, &t.shape))
}

/// x (rows×a) · w (a×b) + bias, row-major.
fn linear(model: &Model, x: &[f64], rows: usize, w_name: &str, b_name: &str) -> Result<Vec<f64>> {
    let (w, wshape) = param(model, w_name)?;
    let (bias, _) = param(model, b_name)?;
    let (a, b) = (wshape[0], wshape[1]);
    debug_assert_eq!(x.len(), rows * a, "{w_name}");
    let mut y = kernels::matmul_nn(x, w, rows, a, b);
    for r in 0..rows {
        for (yv, bv) in y[r * b..(r + 1) * b].iter_mut().zip(bias) {
            *yv += bv;
        }
    }
    Ok(y)
}

fn norm_rows(model: &Model, x: &[f64], prefix: &str) -> Result<Vec<f64>> {
    let (g, _) = param(model, &format!("{prefix}.g"))?;
    let (b, _) = param(model, &format!("{prefix}.b"))?;
    Ok(kernels::layer_norm(x, g, b, g.len()))
}

fn ffn_rows(model: &Model, x: &[f64], rows: usize, prefix: &str) -> Result<Vec<f64>> {
    let mut h = linear(model, x, rows, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    linear(model, &h, rows, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
}

fn add_assign(x: &mut [f64], delta: &[f64]) {
    for (a, b) in x.iter_mut().zip(delta) {
        *a += b;
    }
}

fn slice_head(x: &[f64], rows: usize, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for r in 0..rows {
        out.extend_from_slice(&x[r * d + h * dh..r * d + h * dh + dh]);
    }
    out
}

/// Full multi-head attention: queries from `q_in` (tq rows), keys/values
/// from `kv_in` (tk rows). `causal` hides keys above the diagonal.
fn mha(
    model: &Model,
    q_in: &[f64],
    tq: usize,
    kv_in: &[f64],
    tk: usize,
    prefix: &str,
    causal: bool,
) -> Result<Vec<f64>> {
    let heads = model.config.n_heads;
    let (_, wq_shape) = param(model, &format!("{prefix}.wq"))?;
    let d = wq_shape[0];
    let dh = d / heads;
    let q = linear(model, q_in, tq, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = linear(model, kv_in, tk, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = linear(model, kv_in, tk, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let inv = 1.0 / (dh as f64).sqrt();

    let mut merged = vec![0.0; tq * d];
    for h in 0..heads {
        let qh = slice_head(&q, tq, d, h, dh);
        let kh = slice_head(&k, tk, d, h, dh);
        let vh = slice_head(&v, tk, d, h, dh);
        let mut scores = kernels::matmul_nt(&qh, &kh, tq, dh, tk);
        for (idx, s) in scores.iter_mut().enumerate() {
            *s *= inv;
            if causal && idx % tk > idx / tk {
                *s = super::NEG_INF_MASK;
            }
        }
        let probs = kernels::softmax_axis(&scores, &[tq, tk], 1);
        let oh = kernels::matmul_nn(&probs, &vh, tq, tk, dh);
        for r in 0..tq {
            merged[r * d + h * dh..r * d + h * dh + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
        }
    }
    linear(model, &merged, tq, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
}

/// Encoder output: the normalized memory plus each block's raw residual
/// output (the tensors similarity probes tap).
pub struct EncoderOut {
    pub memory: Vec<f64>,
    pub blocks: Vec<Vec<f64>>,
}

pub fn encode_values(model: &Model, image: &[f64]) -> Result<EncoderOut> {
    let cfg = &model.config;
    let expected = cfg.image_h * cfg.image_w;
    if image.len() != expected {
        return Err(crate::shape_err(
            "encode",
            format!("image has {} pixels, config wants {expected}", image.len()),
        ));
    }
    let n = cfg.n_patches();
    let patches = patchify(image, cfg.image_w, cfg.patch, cfg.image_h / cfg.patch, cfg.image_w / cfg.patch);
    let mut x = linear(model, &patches, n, "embed.patch.w", "embed.patch.b")?;
    let (pos, _) = param(model, "enc.pos")?;
    add_assign(&mut x, pos);

    let mut blocks = Vec::with_capacity(cfg.n_enc_layers);
    for i in 0..cfg.n_enc_layers {
        let a = norm_rows(model, &x, &format!("enc.{i}.ln1"))?;
        let sa = mha(model, &a, n, &a, n, &format!("enc.{i}.attn"), false)?;
        add_assign(&mut x, &sa);
        let m = norm_rows(model, &x, &format!("enc.{i}.ln2"))?;
        let f = ffn_rows(model, &m, n, &format!("enc.{i}.ffn"))?;
        add_assign(&mut x, &f);
        blocks.push(x.clone());
    }
    let memory = norm_rows(model, &x, "enc.norm")?;
    Ok(EncoderOut { memory, blocks })
}

/// Bridge memory to decoder width; identity copy when widths match.
pub fn adapt_values(model: &Model, memory: &[f64], rows: usize) -> Result<Vec<f64>> {
    let cfg = &model.config;
    if cfg.adapter_bottleneck.is_none() {
        if cfg.d_enc != cfg.d_dec {
            return Err(Error::Contract(
                "adapter requested on a model without one and mismatched widths".to_string(),
            ));
        }
        return Ok(memory.to_vec());
    }
    let mut h = linear(model, memory, rows, "adapter.w1", "adapter.b1")?;
    h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
    let h = linear(model, &h, rows, "adapter.w2", "adapter.b2")?;
    norm_rows(model, &h, "adapter.norm")
}

/// Decoder output: teacher-forced logits plus each block's raw residual
/// output.
pub struct DecoderOut {
    pub logits: Vec<f64>,
    pub blocks: Vec<Vec<f64>>,
}

pub fn decode_values(model: &Model, memory: &[f64], tokens: &[usize]) -> Result<DecoderOut> {
    let cfg = &model.config;
    let t = tokens.len();
    if t == 0 || t > cfg.max_len {
        return Err(Error::Contract(format!(
            "decoder input length {t} outside 1..={}",
            cfg.max_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    if memory.len() % cfg.d_dec != 0 || memory.is_empty() {
        return Err(crate::shape_err(
            "decode",
            format!("memory of {} values is not rows × {}", memory.len(), cfg.d_dec),
        ));
    }
    let mem_rows = memory.len() / cfg.d_dec;
    let d = cfg.d_dec;

    let (table, _) = param(model, "embed.tok")?;
    let (pos, _) = param(model, "dec.pos")?;
    let mut x = Vec::with_capacity(t * d);
    for (i, &id) in tokens.iter().enumerate() {
        for c in 0..d {
            x.push(table[id * d + c] + pos[i * d + c]);
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_dec_layers);
    for j in 0..cfg.n_dec_layers {
        let a = norm_rows(model, &x, &format!("dec.{j}.ln1"))?;
        let sa = mha(model, &a, t, &a, t, &format!("dec.{j}.attn"), true)?;
        add_assign(&mut x, &sa);
        let c = norm_rows(model, &x, &format!("dec.{j}.ln2"))?;
        let ca = mha(model, &c, t, memory, mem_rows, &format!("dec.{j}.xattn"), false)?;
        add_assign(&mut x, &ca);
        let m = norm_rows(model, &x, &format!("dec.{j}.ln3"))?;
        let f = ffn_rows(model, &m, t, &format!("dec.{j}.ffn"))?;
        add_assign(&mut x, &f);
        blocks.push(x.clone());
    }
    let out = norm_rows(model, &x, "dec.norm")?;
    let logits = linear(model, &out, t, "head.w", "head.b")?;
    Ok(DecoderOut { logits, blocks })
}

/// encode → adapt → decode without a tape: logits for every position of
/// `tokens`, t × vocab_size.
pub fn forced_logits(model: &Model, image: &[f64], tokens: &[usize]) -> Result<Vec<f64>> {
    let enc = encode_values(model, image)?;
    let memory = adapt_values(model, &enc.memory, model.config.n_patches())?;
    Ok(decode_values(model, &memory, tokens)?.logits)
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy autoregressive decoding with per-layer key/value caches.
///
/// Starts from the begin marker, appends the argmax token each step (ties
/// go to the lowest id), and stops at the end marker, after `max_new`
/// generated tokens, or when the positional table runs out — whichever
/// comes first. Returns the generated body without the markers.
pub fn greedy_decode(model: &Model, image: &[f64], max_new: usize) -> Result<Vec<usize>> {
    let cfg = &model.config;
    let d = cfg.d_dec;
    let heads = cfg.n_heads;
    let dh = d / heads;
    let inv = 1.0 / (dh as f64).sqrt();

    let enc = encode_values(model, image)?;
    let memory = adapt_values(model, &enc.memory, cfg.n_patches())?;
    let mem_rows = memory.len() / d;

    // Cross-attention keys/values depend only on the memory: project once.
    let mut cross_k = Vec::with_capacity(cfg.n_dec_layers);
    let mut cross_v = Vec::with_capacity(cfg.n_dec_layers);
    for j in 0..cfg.n_dec_layers {
        cross_k.push(linear(model, &memory, mem_rows, &format!("dec.{j}.xattn.wk"), &format!("dec.{j}.xattn.bk"))?);
        cross_v.push(linear(model, &memory, mem_rows, &format!("dec.{j}.xattn.wv"), &format!("dec.{j}.xattn.bv"))?);
    }
    let mut self_k: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_dec_layers];
    let mut self_v: Vec<Vec<f64>> = vec![Vec::new(); cfg.n_dec_layers];

    let (table, _) = param(model, "embed.tok")?;
    let (pos_table, _) = param(model, "dec.pos")?;

    // One attention read over cached keys/values, accumulating in key
    // order so results match the full-matrix path bit for bit.
    let attend = |q: &[f64], keys: &[f64], values: &[f64], rows: usize| -> Vec<f64> {
        let mut merged = vec![0.0; d];
        for h in 0..heads {
            let qh = &q[h * dh..(h + 1) * dh];
            let mut scores = Vec::with_capacity(rows);
            for s in 0..rows {
                scores.push(kernels::dot(qh, &keys[s * d + h * dh..s * d + h * dh + dh]) * inv);
            }
            let probs = kernels::softmax_axis(&scores, &[1, rows], 1);
            let out = &mut merged[h * dh..(h + 1) * dh];
            for (s, &p) in probs.iter().enumerate() {
                let vrow = &values[s * d + h * dh..s * d + h * dh + dh];
                for (o, &vv) in out.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
        merged
    };

    let mut body = Vec::new();
    let mut token = BOS;
    for pos in 0..cfg.max_len {
        let mut x: Vec<f64> = (0..d).map(|c| table[token * d + c] + pos_table[pos * d + c]).collect();
        for j in 0..cfg.n_dec_layers {
            let a = norm_rows(model, &x, &format!("dec.{j}.ln1"))?;
            let q = linear(model, &a, 1, &format!("dec.{j}.attn.wq"), &format!("dec.{j}.attn.bq"))?;
            let k = linear(model, &a, 1, &format!("dec.{j}.attn.wk"), &format!("dec.{j}.attn.bk"))?;
            let v = linear(model, &a, 1, &format!("dec.{j}.attn.wv"), &format!("dec.{j}.attn.bv"))?;
            self_k[j].extend_from_slice(&k);
            self_v[j].extend_from_slice(&v);
            let cached = self_k[j].len() / d;
            let sa = attend(&q, &self_k[j], &self_v[j], cached);
            let sa = linear(model, &sa, 1, &format!("dec.{j}.attn.wo"), &format!("dec.{j}.attn.bo"))?;
            add_assign(&mut x, &sa);

            let c = norm_rows(model, &x, &format!("dec.{j}.ln2"))?;
            let q = linear(model, &c, 1, &format!("dec.{j}.xattn.wq"), &format!("dec.{j}.xattn.bq"))?;
            let ca = attend(&q, &cross_k[j], &cross_v[j], mem_rows);
            let ca = linear(model, &ca, 1, &format!("dec.{j}.xattn.wo"), &format!("dec.{j}.xattn.bo"))?;
            add_assign(&mut x, &ca);

            let m = norm_rows(model, &x, &format!("dec.{j}.ln3"))?;
            let f = ffn_rows(model, &m, 1, &format!("dec.{j}.ffn"))?;
            add_assign(&mut x, &f);
        }
        let out = norm_rows(model, &x, "dec.norm")?;
        let logits = linear(model, &out, 1, "head.w", "head.b")?;
        let next = argmax_lowest(&logits);
        if next == EOS {
            break;
        }
        body.push(next);
        if body.len() >= max_new || pos + 1 >= cfg.max_len {
            break;
        }
        token = next;
    }
    Ok(body)
}

/// Capture every block's pooled output over a probe batch: one tap per
/// encoder and decoder block, named `enc.<i>` / `dec.<j>`, each an
/// m×width matrix with one mean-pooled row per probe example. Decoder
/// inputs are the teacher-forced ground-truth sequences.
pub fn capture_activations(model: &Model, probes: &[(&[f64], &[usize])]) -> Result<Vec<LayerTap>> {
    let cfg = &model.config;
    let m = probes.len();
    if m < 2 {
        return Err(Error::Contract(format!(
            "activation capture needs at least 2 probe examples, got {m}"
        )));
    }
    let mut taps: Vec<LayerTap> = (0..cfg.n_enc_layers)
        .map(|i| (format!("enc.{i}"), cfg.d_enc))
        .chain((0..cfg.n_dec_layers).map(|j| (format!("dec.{j}"), cfg.d_dec)))
        .map(|(name, cols)| LayerTap { name, rows: m, cols, data: vec![0.0; m * cols] })
        .collect();

    for (row, &(image, dec_input)) in probes.iter().enumerate() {
        let enc = encode_values(model, image)?;
        let memory = adapt_values(model, &enc.memory, cfg.n_patches())?;
        let dec = decode_values(model, &memory, dec_input)?;
        for (tap, block) in taps.iter_mut().zip(enc.blocks.iter().chain(dec.blocks.iter())) {
            let d = tap.cols;
            let n_rows = block.len() / d;
            let out = &mut tap.data[row * d..(row + 1) * d];
            for r in 0..n_rows {
                for (o, &v) in out.iter_mut().zip(&block[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|v| *v /= n_rows as f64);
        }
    }
    Ok(taps)
}
