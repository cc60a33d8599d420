//! Post-layer-norm transformer encoder with pooled sentence embeddings.
//!
//! The same code runs the full-depth teacher and every shallow student; a
//! model is just an [`EncoderConfig`] plus a set of named weight tensors.
//!
//! Linear maps are stored input-major: a projection from `a` to `b` features
//! is an `[a × b]` matrix applied as `x · W + b`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model_io::ModelMeta;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::tokenizer::{EncodedBatch, Vocab};

/// Additive attention bias on padded key positions.
pub const MASK_BIAS: f64 = -1e9;

/// Rows per forward pass when `encode` is handed an arbitrary list.
pub const DEFAULT_ENCODE_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::Input(format!("unknown pooling {other:?}"))),
        }
    }
}

fn default_eps() -> f64 {
    1e-12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub pooling: Pooling,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

impl EncoderConfig {
    /// Small CPU-friendly shape: 64 hidden, 4 heads, 256 feed-forward.
    pub fn desk(vocab_size: usize, num_layers: usize) -> Self {
        EncoderConfig {
            num_layers,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 256,
            max_len: 64,
            vocab_size,
            pooling: Pooling::Mean,
            layer_norm_eps: default_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Input(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Input(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Input("max_len must leave room for [CLS] and [SEP]".into()));
        }
        if !(self.layer_norm_eps.is_finite() && self.layer_norm_eps >= 0.0) {
            return Err(Error::Input("layer_norm_eps must be finite and >= 0".into()));
        }
        Ok(())
    }
}

macro_rules! layer_params {
    ($($field:ident => $name:literal),* $(,)?) => {
        /// Parameters of one transformer block.
        #[derive(Clone, Debug, PartialEq)]
        pub struct LayerParams<P> {
            $(pub $field: P,)*
        }

        /// Tensor-name suffixes of one block, in storage order.
        pub const LAYER_TENSORS: &[&str] = &[$($name),*];

        impl<P> LayerParams<P> {
            fn fields(&self) -> Vec<(&'static str, &P)> {
                vec![$(($name, &self.$field)),*]
            }

            fn fields_mut(&mut self) -> Vec<(&'static str, &mut P)> {
                vec![$(($name, &mut self.$field)),*]
            }

            fn try_build(mut f: impl FnMut(&'static str) -> Result<P>) -> Result<Self> {
                Ok(LayerParams { $($field: f($name)?,)* })
            }
        }
    };
}

layer_params! {
    query_w => "attention.query.weight",
    query_b => "attention.query.bias",
    key_w => "attention.key.weight",
    key_b => "attention.key.bias",
    value_w => "attention.value.weight",
    value_b => "attention.value.bias",
    output_w => "attention.output.weight",
    output_b => "attention.output.bias",
    attn_norm_g => "attention.norm.gamma",
    attn_norm_b => "attention.norm.beta",
    ff_in_w => "ffn.intermediate.weight",
    ff_in_b => "ffn.intermediate.bias",
    ff_out_w => "ffn.output.weight",
    ff_out_b => "ffn.output.bias",
    ff_norm_g => "ffn.norm.gamma",
    ff_norm_b => "ffn.norm.beta",
}

/// Embedding-level tensor names, in storage order.
pub const EMBEDDING_TENSORS: &[&str] = &[
    "embeddings.word",
    "embeddings.position",
    "embeddings.token_type",
    "embeddings.norm.gamma",
    "embeddings.norm.beta",
];

/// Every parameter of an encoder. `P` is a [`Tensor`] for stored weights and
/// a [`Var`] once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<P> {
    pub word: P,
    pub position: P,
    /// Segment-0 type embedding, added to every position.
    pub token_type: P,
    pub norm_g: P,
    pub norm_b: P,
    pub layers: Vec<LayerParams<P>>,
}

pub type EncoderWeights<T = f32> = EncoderParams<Tensor<T>>;

pub fn layer_tensor_name(layer: usize, suffix: &str) -> String {
    format!("layers.{layer}.{suffix}")
}

/// Canonical `(name, shape)` list for a configuration.
pub fn expected_tensors(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.hidden_dim;
    let mut out = vec![
        ("embeddings.word".to_string(), vec![cfg.vocab_size, d]),
        ("embeddings.position".to_string(), vec![cfg.max_len, d]),
        ("embeddings.token_type".to_string(), vec![d]),
        ("embeddings.norm.gamma".to_string(), vec![d]),
        ("embeddings.norm.beta".to_string(), vec![d]),
    ];
    for l in 0..cfg.num_layers {
        for suffix in LAYER_TENSORS {
            out.push((layer_tensor_name(l, suffix), layer_shape(cfg, suffix)));
        }
    }
    out
}

fn layer_shape(cfg: &EncoderConfig, suffix: &str) -> Vec<usize> {
    let (d, f) = (cfg.hidden_dim, cfg.ff_dim);
    match suffix {
        "ffn.intermediate.weight" => vec![d, f],
        "ffn.intermediate.bias" => vec![f],
        "ffn.output.weight" => vec![f, d],
        s if s.ends_with(".weight") => vec![d, d],
        _ => vec![d],
    }
}

impl<P> EncoderParams<P> {
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = vec![
            ("embeddings.word".to_string(), &self.word),
            ("embeddings.position".to_string(), &self.position),
            ("embeddings.token_type".to_string(), &self.token_type),
            ("embeddings.norm.gamma".to_string(), &self.norm_g),
            ("embeddings.norm.beta".to_string(), &self.norm_b),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (suffix, p) in layer.fields() {
                out.push((layer_tensor_name(l, suffix), p));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut P)> {
        let mut out = vec![
            ("embeddings.word".to_string(), &mut self.word),
            ("embeddings.position".to_string(), &mut self.position),
            ("embeddings.token_type".to_string(), &mut self.token_type),
            ("embeddings.norm.gamma".to_string(), &mut self.norm_g),
            ("embeddings.norm.beta".to_string(), &mut self.norm_b),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (suffix, p) in layer.fields_mut() {
                out.push((layer_tensor_name(l, suffix), p));
            }
        }
        out
    }

    /// Builds every parameter by name in canonical order.
    pub fn try_build(num_layers: usize, mut f: impl FnMut(&str) -> Result<P>) -> Result<Self> {
        let word = f("embeddings.word")?;
        let position = f("embeddings.position")?;
        let token_type = f("embeddings.token_type")?;
        let norm_g = f("embeddings.norm.gamma")?;
        let norm_b = f("embeddings.norm.beta")?;
        let layers = (0..num_layers)
            .map(|l| LayerParams::try_build(|suffix| f(&layer_tensor_name(l, suffix))))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            word,
            position,
            token_type,
            norm_g,
            norm_b,
            layers,
        })
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> EncoderParams<Q> {
        let mut it = self.named().into_iter().map(|(_, p)| f(p));
        EncoderParams::try_build(self.layers.len(), |_| Ok(it.next().expect("same layout")))
            .expect("infallible")
    }

    pub fn len(&self) -> usize {
        EMBEDDING_TENSORS.len() + LAYER_TENSORS.len() * self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl<T: Real> EncoderWeights<T> {
    /// BERT-style initialization: `N(0, 0.02²)` matrices and embeddings,
    /// zero biases, unit layer-norm gains.
    pub fn random(cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut tensors = expected_tensors(cfg).into_iter();
        Self::try_build(cfg.num_layers, |name| {
            let (n, shape) = tensors.next().expect("same layout");
            debug_assert_eq!(n, name);
            Ok(if name.ends_with(".gamma") {
                Tensor::full(shape, T::one())
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                Tensor::zeros(shape)
            } else {
                Tensor::randn(shape, 0.02, rng)
            })
        })
        .expect("infallible")
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        self.map(|t| t.cast())
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.layers.len() != cfg.num_layers {
            return Err(Error::Format(format!(
                "config says {} layers, weights have {}",
                cfg.num_layers,
                self.layers.len()
            )));
        }
        for ((name, t), (_, shape)) in self.named().into_iter().zip(expected_tensors(cfg)) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> EncoderParams<Var<T>> {
        self.map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                Var::constant(t.clone())
            }
        })
    }
}

/// Token-level outputs `[batch × len × hidden]`.
///
/// Padded positions still get values; they are masked out of attention
/// keys and must be excluded downstream by pooling.
pub fn forward<T: Real>(
    tape: &Tape<T>,
    params: &EncoderParams<Var<T>>,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
) -> Result<Var<T>> {
    let (b, len, d) = (batch.batch, batch.len, cfg.hidden_dim);
    let (heads, hd) = (cfg.num_heads, cfg.head_dim());
    if params.layers.len() != cfg.num_layers {
        return Err(Error::Contract("weights and config disagree on depth".into()));
    }
    if len > cfg.max_len {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if let Some(bad) = batch.token_ids.iter().find(|id| **id >= cfg.vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} out of range for vocab of {}",
            cfg.vocab_size
        )));
    }

    let positions: Vec<usize> = (0..b).flat_map(|_| 0..len).collect();
    let words = tape.gather_rows(&params.word, &batch.token_ids)?;
    let pos = tape.gather_rows(&params.position, &positions)?;
    let x = tape.add(&words, &pos)?;
    let x = tape.add_row(&x, &params.token_type)?;
    let mut x = tape.layer_norm(&x, &params.norm_g, &params.norm_b, cfg.layer_norm_eps)?;

    let mask_bias = attention_bias::<T>(&batch.attention_mask, b, heads, len);
    let score_scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let split = |v: &Var<T>| -> Result<Var<T>> {
        let v = tape.reshape(v, vec![b, len, heads, hd])?;
        let v = tape.permute0213(&v)?;
        tape.reshape(&v, vec![b * heads, len, hd])
    };
    let affine = |x: &Var<T>, w: &Var<T>, bias: &Var<T>| -> Result<Var<T>> {
        let y = tape.matmul(x, w)?;
        tape.add_row(&y, bias)
    };

    for layer in &params.layers {
        let q = split(&affine(&x, &layer.query_w, &layer.query_b)?)?;
        let k = split(&affine(&x, &layer.key_w, &layer.key_b)?)?;
        let v = split(&affine(&x, &layer.value_w, &layer.value_b)?)?;
        let scores = tape.bmm(&q, &k, true)?;
        let scores = tape.scale(&scores, score_scale)?;
        let scores = tape.add(&scores, &mask_bias)?;
        let probs = tape.softmax(&scores, 2)?;
        let ctx = tape.bmm(&probs, &v, false)?;
        let ctx = tape.reshape(&ctx, vec![b, heads, len, hd])?;
        let ctx = tape.permute0213(&ctx)?;
        let ctx = tape.reshape(&ctx, vec![b * len, d])?;
        let attn = affine(&ctx, &layer.output_w, &layer.output_b)?;
        let h = tape.add(&x, &attn)?;
        x = tape.layer_norm(&h, &layer.attn_norm_g, &layer.attn_norm_b, cfg.layer_norm_eps)?;

        let inner = tape.gelu(&affine(&x, &layer.ff_in_w, &layer.ff_in_b)?)?;
        let out = affine(&inner, &layer.ff_out_w, &layer.ff_out_b)?;
        let h = tape.add(&x, &out)?;
        x = tape.layer_norm(&h, &layer.ff_norm_g, &layer.ff_norm_b, cfg.layer_norm_eps)?;
    }
    tape.reshape(&x, vec![b, len, d])
}

fn attention_bias<T: Real>(mask: &[u8], batch: usize, heads: usize, len: usize) -> Var<T> {
    let neg = T::from_f64_lossy(MASK_BIAS);
    let mut data = Vec::with_capacity(batch * heads * len * len);
    for b in 0..batch {
        let row: Vec<T> = mask[b * len..(b + 1) * len]
            .iter()
            .map(|m| if *m == 0 { neg } else { T::zero() })
            .collect();
        for _ in 0..heads * len {
            data.extend_from_slice(&row);
        }
    }
    Var::constant(Tensor::from_parts(vec![batch * heads, len, len], data))
}

/// Sentence embeddings `[batch × hidden]` from token outputs.
pub fn pool<T: Real>(
    tape: &Tape<T>,
    token_embs: &Var<T>,
    mask: &[u8],
    strategy: Pooling,
) -> Result<Var<T>> {
    match strategy {
        Pooling::Mean => tape.masked_mean(token_embs, mask),
        Pooling::Cls => {
            let s = token_embs.shape();
            if s.len() != 3 || mask.len() != s[0] * s[1] {
                return Err(Error::dim("pool", format!("{s:?} with mask of {}", mask.len())));
            }
            if let Some(b) = (0..s[0]).find(|b| mask[b * s[1]..(b + 1) * s[1]].iter().all(|m| *m == 0)) {
                return Err(Error::Contract(format!("mask row {b} has no tokens")));
            }
            tape.take_position(token_embs, 0)
        }
    }
}

/// Tokenize, run the stack and pool, under `tape`.
pub fn embed_batch<T: Real>(
    tape: &Tape<T>,
    params: &EncoderParams<Var<T>>,
    cfg: &EncoderConfig,
    batch: &EncodedBatch,
) -> Result<Var<T>> {
    let tokens = forward(tape, params, cfg, batch)?;
    pool(tape, &tokens, &batch.attention_mask, cfg.pooling)
}

/// A loaded encoder: configuration, weights, vocabulary and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub weights: EncoderWeights<f32>,
    pub vocab: Arc<Vocab>,
    pub meta: ModelMeta,
}

impl EncoderModel {
    pub fn new(
        config: EncoderConfig,
        weights: EncoderWeights<f32>,
        vocab: Arc<Vocab>,
        meta: ModelMeta,
    ) -> Result<Self> {
        config.validate()?;
        weights.check(&config)?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Input(format!(
                "vocab has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        Ok(EncoderModel {
            config,
            weights,
            vocab,
            meta,
        })
    }

    pub fn random(
        config: EncoderConfig,
        vocab: Arc<Vocab>,
        model_id: impl Into<String>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let weights = EncoderWeights::random(&config, rng);
        Self::new(config, weights, vocab, ModelMeta::new(model_id))
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn tokenize_batch<S: AsRef<str>>(&self, texts: &[S]) -> Result<EncodedBatch> {
        self.vocab.batch_encode(texts, self.config.max_len)
    }

    /// Embeds one already-tokenized batch without recording gradients.
    pub fn embed_encoded(&self, batch: &EncodedBatch) -> Result<Tensor<f32>> {
        let tape = Tape::new();
        let params = self.weights.bind(&tape, false);
        Ok(embed_batch(&tape, &params, &self.config, batch)?.into_value())
    }

    /// Embeddings `[n × hidden]`, order-preserving.
    pub fn encode<S: AsRef<str>>(&self, texts: &[S]) -> Result<Tensor<f32>> {
        self.encode_batched(texts, DEFAULT_ENCODE_BATCH)
    }

    pub fn encode_batched<S: AsRef<str>>(&self, texts: &[S], batch_size: usize) -> Result<Tensor<f32>> {
        if batch_size == 0 {
            return Err(Error::Contract("batch_size must be >= 1".into()));
        }
        let d = self.hidden_dim();
        let mut data = Vec::with_capacity(texts.len() * d);
        for chunk in texts.chunks(batch_size) {
            let batch = self.tokenize_batch(chunk)?;
            data.extend_from_slice(self.embed_encoded(&batch)?.data());
        }
        Tensor::new(vec![texts.len(), d], data)
    }

    /// Content hash of configuration, vocabulary and weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        h.update(self.vocab.to_text().as_bytes());
        for (name, t) in self.weights.named() {
            h.update(name.as_bytes());
            for dim in t.shape() {
                h.update((*dim as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
