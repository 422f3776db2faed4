//! Image-to-sequence encoder–decoder transformer.
//!
//! A patch-embedding visual encoder feeds an autoregressive token decoder
//! through cross-attention; when the two stacks disagree on width, a small
//! bottleneck adapter bridges them. Everything is plain pre-norm
//! transformer machinery on dense f64, sized for single-CPU experiments.
//!
//! Parameters live in an insertion-ordered map of named tensors, so
//! checkpoints, optimizer slots, and pruning masks can all address them by
//! name. The token and positional tables count as "embedding" parameters;
//! every projection — the patch embedding included — counts as
//! non-embedding and is what pruning operates on.
//!
//! Forward passes for training build an autodiff [`Graph`] via
//! [`ModelGraph`]; the value-only inference paths (greedy decoding with a
//! KV cache, activation capture) live in [`infer`].

pub mod infer;

use indexmap::IndexMap;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::tokenizer::{BOS, EOS};
use crate::{Error, Result};

pub use infer::{capture_activations, greedy_decode, LayerTap};

/// Which architecture a checkpoint carries. `Pruned` is the teacher
/// architecture trained or held under a sparsity mask; `Small` is the
/// narrow student with the adapter bridge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Teacher,
    Small,
    Pruned,
}

impl Variant {
    pub fn tag(self) -> &'static str {
        match self {
            Variant::Teacher => "teacher",
            Variant::Small => "small",
            Variant::Pruned => "pruned",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "teacher" => Ok(Variant::Teacher),
            "small" => Ok(Variant::Small),
            "pruned" => Ok(Variant::Pruned),
            other => Err(Error::Contract(format!("unknown model variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Square patch side; both image dimensions must divide by it.
    pub patch: usize,
    pub d_enc: usize,
    pub d_dec: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    /// Longest decoder input (positions the decoder has embeddings for).
    pub max_len: usize,
    /// Bottleneck width of the encoder→decoder adapter. Present exactly
    /// when the stacks have different widths.
    pub adapter_bottleneck: Option<usize>,
}

impl ModelConfig {
    /// Full-size teacher: wide enough to master both tasks, small enough
    /// to train in minutes on one CPU core.
    pub fn teacher_default() -> Self {
        ModelConfig {
            image_h: 48,
            image_w: 96,
            patch: 8,
            d_enc: 48,
            d_dec: 48,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            d_ff: 96,
            vocab_size: 65,
            max_len: 48,
            adapter_bottleneck: None,
        }
    }

    /// Narrow student: same encoder depth, a single decoder layer, and a
    /// thin encoder that needs the adapter to reach decoder width.
    pub fn small_default() -> Self {
        ModelConfig {
            d_enc: 32,
            n_dec_layers: 1,
            adapter_bottleneck: Some(16),
            ..Self::teacher_default()
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch) * (self.image_w / self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("model config: {msg}")));
        if self.patch == 0 || self.image_h % self.patch != 0 || self.image_w % self.patch != 0 {
            return fail(format!(
                "image {}×{} not divisible by patch {}",
                self.image_h, self.image_w, self.patch
            ));
        }
        if self.n_heads == 0 || self.d_enc % self.n_heads != 0 || self.d_dec % self.n_heads != 0 {
            return fail(format!(
                "widths {}/{} not divisible by {} heads",
                self.d_enc, self.d_dec, self.n_heads
            ));
        }
        if self.n_enc_layers == 0 || self.n_dec_layers == 0 || self.d_ff == 0 {
            return fail("layer counts and d_ff must be positive".to_string());
        }
        if self.vocab_size <= EOS {
            return fail(format!("vocab_size {} leaves no room for specials", self.vocab_size));
        }
        if self.max_len < 2 {
            return fail(format!("max_len {} cannot hold begin marker plus a token", self.max_len));
        }
        match self.adapter_bottleneck {
            Some(0) => fail("adapter bottleneck must be positive".to_string()),
            Some(_) if self.d_enc == self.d_dec => {
                fail("adapter configured but encoder and decoder widths already match".to_string())
            }
            None if self.d_enc != self.d_dec => fail(format!(
                "widths {} vs {} differ but no adapter is configured",
                self.d_enc, self.d_dec
            )),
            _ => Ok(()),
        }
    }
}

enum Init {
    Gauss,
    Zero,
    One,
}

// Close to Xavier scale for the widths used here. Keeping the init in
// the same magnitude band as trained weights matters beyond optimization:
// magnitude pruning separates live circuits from dormant ones by |w|, and
// a tiny init would hand it that separation for free.
const INIT_STD: f64 = 0.12;

/// The full parameter schema for a config, in construction order. This is
/// the single source of truth for names and shapes; initialization and
/// checkpoint validation both walk it.
fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    use Init::*;
    let mut specs: Vec<(String, Vec<usize>, Init)> = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, init: Init| specs.push((name, shape, init));

    let pp = cfg.patch * cfg.patch;
    p("embed.patch.w".into(), vec![pp, cfg.d_enc], Gauss);
    p("embed.patch.b".into(), vec![cfg.d_enc], Zero);
    p("enc.pos".into(), vec![cfg.n_patches(), cfg.d_enc], Gauss);
    p("embed.tok".into(), vec![cfg.vocab_size, cfg.d_dec], Gauss);
    p("dec.pos".into(), vec![cfg.max_len, cfg.d_dec], Gauss);

    let attn = |prefix: &str, d: usize, p: &mut dyn FnMut(String, Vec<usize>, Init)| {
        for proj in ["wq", "wk", "wv", "wo"] {
            p(format!("{prefix}.{proj}"), vec![d, d], Gauss);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            p(format!("{prefix}.{bias}"), vec![d], Zero);
        }
    };
    let norm = |prefix: &str, d: usize, p: &mut dyn FnMut(String, Vec<usize>, Init)| {
        p(format!("{prefix}.g"), vec![d], One);
        p(format!("{prefix}.b"), vec![d], Zero);
    };
    let ffn = |prefix: &str, d: usize, p: &mut dyn FnMut(String, Vec<usize>, Init)| {
        p(format!("{prefix}.w1"), vec![d, cfg.d_ff], Gauss);
        p(format!("{prefix}.b1"), vec![cfg.d_ff], Zero);
        p(format!("{prefix}.w2"), vec![cfg.d_ff, d], Gauss);
        p(format!("{prefix}.b2"), vec![d], Zero);
    };

    for i in 0..cfg.n_enc_layers {
        norm(&format!("enc.{i}.ln1"), cfg.d_enc, &mut p);
        attn(&format!("enc.{i}.attn"), cfg.d_enc, &mut p);
        norm(&format!("enc.{i}.ln2"), cfg.d_enc, &mut p);
        ffn(&format!("enc.{i}.ffn"), cfg.d_enc, &mut p);
    }
    norm("enc.norm", cfg.d_enc, &mut p);

    if let Some(b) = cfg.adapter_bottleneck {
        p("adapter.w1".into(), vec![cfg.d_enc, b], Gauss);
        p("adapter.b1".into(), vec![b], Zero);
        p("adapter.w2".into(), vec![b, cfg.d_dec], Gauss);
        p("adapter.b2".into(), vec![cfg.d_dec], Zero);
        // The decoder's cross-attention is calibrated against unit-scale
        // memory (the encoder ends in a norm). A raw bottleneck output is
        // much smaller than that at init, which flattens attention into
        // near-uniform averaging and stalls conditioning, so the bridge
        // ends in a norm of its own.
        norm("adapter.norm", cfg.d_dec, &mut p);
    }

    for j in 0..cfg.n_dec_layers {
        norm(&format!("dec.{j}.ln1"), cfg.d_dec, &mut p);
        attn(&format!("dec.{j}.attn"), cfg.d_dec, &mut p);
        norm(&format!("dec.{j}.ln2"), cfg.d_dec, &mut p);
        attn(&format!("dec.{j}.xattn"), cfg.d_dec, &mut p);
        norm(&format!("dec.{j}.ln3"), cfg.d_dec, &mut p);
        ffn(&format!("dec.{j}.ffn"), cfg.d_dec, &mut p);
    }
    norm("dec.norm", cfg.d_dec, &mut p);

    p("head.w".into(), vec![cfg.d_dec, cfg.vocab_size], Gauss);
    p("head.b".into(), vec![cfg.vocab_size], Zero);
    specs
}

/// Lookup tables are embedding-class; every projection (patch embedding
/// included) is non-embedding and therefore prunable.
pub fn is_embedding(name: &str) -> bool {
    name == "embed.tok" || name == "enc.pos" || name == "dec.pos"
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub variant: Variant,
    /// Named tensors in a stable construction order.
    pub params: IndexMap<String, Tensor>,
}

impl Model {
    /// Fresh weights: Gaussian projections and tables, zero biases, unit
    /// norm gains. Same seed → bit-identical model.
    pub fn init(config: ModelConfig, variant: Variant, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();
        for (name, shape, init) in param_specs(&config) {
            let t = match init {
                Init::Gauss => Tensor::randn(&shape, INIT_STD, &mut rng),
                Init::Zero => Tensor::zeros(&shape),
                Init::One => Tensor::full(&shape, 1.0),
            };
            params.insert(name, t.with_grad());
        }
        Ok(Model { config, variant, params })
    }

    /// Rebuild a model from loaded tensors, checking them against the
    /// config's schema (exact name set and shapes).
    pub fn from_params(
        config: ModelConfig,
        variant: Variant,
        params: IndexMap<String, Tensor>,
    ) -> Result<Model> {
        config.validate()?;
        let specs = param_specs(&config);
        if params.len() != specs.len() {
            return Err(Error::Contract(format!(
                "model has {} tensors, config expects {}",
                params.len(),
                specs.len()
            )));
        }
        for (name, shape, _) in &specs {
            let t = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))?;
            if &t.shape != shape {
                return Err(Error::Contract(format!(
                    "parameter {name:?} has shape {:?}, config expects {shape:?}",
                    t.shape
                )));
            }
        }
        let params = params.into_iter().map(|(n, t)| (n, t.with_grad())).collect();
        Ok(Model { config, variant, params })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named {name:?}")))
    }

    pub fn count_params(&self) -> ParamCounts {
        let mut c = ParamCounts::default();
        for (name, t) in &self.params {
            let n = t.data.len();
            if is_embedding(name) {
                c.embedding += n;
            } else {
                c.non_embedding += n;
                c.nonzero_non_embedding += t.data.iter().filter(|&&v| v != 0.0).count();
            }
            c.total += n;
        }
        c
    }
}

/// Parameter census in the style of a model-size table: lookup tables vs
/// everything else, with exact zeros tracked for pruned models.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub non_embedding: usize,
    pub embedding: usize,
    pub total: usize,
    pub nonzero_non_embedding: usize,
}

/// Split a target token sequence into the decoder input (begin marker
/// plus the sequence) and the shifted prediction targets (the sequence
/// plus the end marker).
pub fn teacher_forcing_pair(target: &[usize], max_len: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if target.len() + 1 > max_len {
        return Err(Error::Contract(format!(
            "target of {} tokens exceeds decoder capacity {max_len}",
            target.len()
        )));
    }
    let mut input = Vec::with_capacity(target.len() + 1);
    input.push(BOS);
    input.extend_from_slice(target);
    let mut labels = target.to_vec();
    labels.push(EOS);
    Ok((input, labels))
}

const NEG_INF_MASK: f64 = -1e30;

/// One training-time forward pass: builds the autodiff graph over the
/// model's parameters. Parameters enter the graph lazily as leaves, so
/// gradients can be read back per name after `backward`.
pub struct ModelGraph<'m> {
    model: &'m Model,
    pub graph: Graph,
    leaves: IndexMap<String, NodeId>,
}

impl<'m> ModelGraph<'m> {
    pub fn new(model: &'m Model) -> Self {
        ModelGraph { model, graph: Graph::new(), leaves: IndexMap::new() }
    }

    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.leaves.get(name) {
            return Ok(id);
        }
        let id = self.graph.leaf(self.model.param(name)?)?;
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let w = self.p(w)?;
        let b = self.p(b)?;
        let xw = self.graph.matmul(x, w)?;
        self.graph.add_bias(xw, b)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let g = self.p(&format!("{prefix}.g"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.graph.layer_norm(x, g, b)
    }

    fn ffn(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.graph.gelu(h)?;
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Multi-head attention with queries from `q_in` and keys/values from
    /// `kv_in`; `causal` hides keys above the diagonal (valid only when
    /// both sides have equal length).
    fn attention(&mut self, q_in: NodeId, kv_in: NodeId, prefix: &str, causal: bool) -> Result<NodeId> {
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let d = self.graph.shape(q)[1];
        let tq = self.graph.shape(q)[0];
        let tk = self.graph.shape(k)[0];
        let heads = self.model.config.n_heads;
        let dh = d / heads;

        let mask = if causal {
            let mut m = vec![0.0; tq * tk];
            for i in 0..tq {
                for j in 0..tk {
                    if j > i {
                        m[i * tk + j] = NEG_INF_MASK;
                    }
                }
            }
            Some(self.graph.constant(&[tq, tk], m)?)
        } else {
            None
        };

        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = self.graph.slice_cols(q, h * dh, dh)?;
            let kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            let kt = self.graph.transpose(kh)?;
            let scores = self.graph.matmul(qh, kt)?;
            let mut scores = self.graph.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = self.graph.add(scores, m)?;
            }
            let probs = self.graph.softmax(scores, 1)?;
            outs.push(self.graph.matmul(probs, vh)?);
        }
        let merged = self.graph.concat_cols(&outs)?;
        self.linear(merged, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    /// Patch-embed the image and run the encoder stack. Returns the
    /// normalized memory, n_patches × d_enc.
    pub fn encode(&mut self, image: &[f64]) -> Result<NodeId> {
        let cfg = &self.model.config;
        let expected = cfg.image_h * cfg.image_w;
        if image.len() != expected {
            return Err(crate::shape_err(
                "encode",
                format!("image has {} pixels, config wants {expected}", image.len()),
            ));
        }
        let patches = self.graph.constant(
            &[cfg.n_patches(), cfg.patch * cfg.patch],
            patchify(image, cfg.image_w, cfg.patch, cfg.image_h / cfg.patch, cfg.image_w / cfg.patch),
        )?;
        let embedded = self.linear(patches, "embed.patch.w", "embed.patch.b")?;
        let pos = self.p("enc.pos")?;
        let mut x = self.graph.add(embedded, pos)?;
        for i in 0..cfg.n_enc_layers {
            let a = self.norm(x, &format!("enc.{i}.ln1"))?;
            let attn = self.attention(a, a, &format!("enc.{i}.attn"), false)?;
            x = self.graph.add(x, attn)?;
            let m = self.norm(x, &format!("enc.{i}.ln2"))?;
            let f = self.ffn(m, &format!("enc.{i}.ffn"))?;
            x = self.graph.add(x, f)?;
        }
        self.norm(x, "enc.norm")
    }

    /// Bridge encoder width to decoder width. Without an adapter this is
    /// the identity (same node); with one it is a bottleneck MLP.
    pub fn adapt(&mut self, visual: NodeId) -> Result<NodeId> {
        let cfg = &self.model.config;
        if cfg.adapter_bottleneck.is_none() {
            if cfg.d_enc != cfg.d_dec {
                return Err(Error::Contract(
                    "adapter requested on a model without one and mismatched widths".to_string(),
                ));
            }
            return Ok(visual);
        }
        let h = self.linear(visual, "adapter.w1", "adapter.b1")?;
        let h = self.graph.gelu(h)?;
        let h = self.linear(h, "adapter.w2", "adapter.b2")?;
        // Match the scale of the encoder memory the decoder was built
        // against; see the schema note on adapter.norm.
        self.norm(h, "adapter.norm")
    }

    /// Teacher-forced decoder: causal self-attention over the embedded
    /// tokens, cross-attention into `memory`, logits for every position.
    pub fn decode_logits(&mut self, memory: NodeId, tokens: &[usize]) -> Result<NodeId> {
        let cfg = &self.model.config;
        let t = tokens.len();
        if t == 0 || t > cfg.max_len {
            return Err(Error::Contract(format!(
                "decoder input length {t} outside 1..={}",
                cfg.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        let table = self.p("embed.tok")?;
        let embedded = self.graph.gather(table, tokens)?;
        let pos_all = self.p("dec.pos")?;
        let pos = self.graph.slice_rows(pos_all, 0, t)?;
        let mut x = self.graph.add(embedded, pos)?;
        for j in 0..cfg.n_dec_layers {
            let a = self.norm(x, &format!("dec.{j}.ln1"))?;
            let sa = self.attention(a, a, &format!("dec.{j}.attn"), true)?;
            x = self.graph.add(x, sa)?;
            let c = self.norm(x, &format!("dec.{j}.ln2"))?;
            let ca = self.attention(c, memory, &format!("dec.{j}.xattn"), false)?;
            x = self.graph.add(x, ca)?;
            let m = self.norm(x, &format!("dec.{j}.ln3"))?;
            let f = self.ffn(m, &format!("dec.{j}.ffn"))?;
            x = self.graph.add(x, f)?;
        }
        let out = self.norm(x, "dec.norm")?;
        self.linear(out, "head.w", "head.b")
    }

    /// encode → adapt → decode in one call.
    pub fn forced_logits(&mut self, image: &[f64], tokens: &[usize]) -> Result<NodeId> {
        let memory = self.encode(image)?;
        let memory = self.adapt(memory)?;
        self.decode_logits(memory, tokens)
    }

    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        self.graph.backward(root)
    }

    /// Fold this graph's parameter gradients into `acc`, scaled — e.g. by
    /// 1/batch when per-sample losses are averaged.
    pub fn accumulate_param_grads(&self, acc: &mut IndexMap<String, Vec<f64>>, scale: f64) {
        for (name, &id) in &self.leaves {
            if let Some(g) = self.graph.grad(id) {
                let slot = acc
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (a, &b) in slot.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }
}

/// Cut a row-major image into flattened patch rows, in raster order over
/// the patch grid.
pub(crate) fn patchify(image: &[f64], w: usize, patch: usize, grid_h: usize, grid_w: usize) -> Vec<f64> {
    let mut rows = Vec::with_capacity(grid_h * grid_w * patch * patch);
    for pr in 0..grid_h {
        for pc in 0..grid_w {
            for r in 0..patch {
                let base = (pr * patch + r) * w + pc * patch;
                rows.extend_from_slice(&image[base..base + patch]);
            }
        }
    }
    rows
}
