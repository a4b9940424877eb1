use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FfnKind {
    /// Gated linear unit: the up-projection is split into value and gate halves.
    GluGelu,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    ScaledSinusoidal,
    Learned,
    Sinusoidal,
    Rotary,
}

macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}

keyword_enum!(FfnKind, "ffn kind", FfnKind::GluGelu => "glu_gelu", FfnKind::Gelu => "gelu");
keyword_enum!(NormPlacement, "norm placement", NormPlacement::Pre => "pre", NormPlacement::Post => "post");
keyword_enum!(
    EmbeddingKind,
    "embedding kind",
    EmbeddingKind::ScaledSinusoidal => "scaled_sinusoidal",
    EmbeddingKind::Learned => "learned",
    EmbeddingKind::Sinusoidal => "sinusoidal",
    EmbeddingKind::Rotary => "rotary",
);

/// Full architectural description of the encoder. Defaults are the crammed
/// recipe: 12 layers of width 768, GLU feed-forward blocks, no linear biases,
/// pre-normalization, scaled sinusoidal positions and a sparse, tied decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub ffn_kind: FfnKind,
    pub norm_placement: NormPlacement,
    pub embedding_kind: EmbeddingKind,
    pub qkv_bias: bool,
    pub linear_bias: bool,
    pub decoder_bias: bool,
    pub nonlinear_head: bool,
    pub sparse_prediction: bool,
    pub final_norm: bool,
    pub embedding_norm: bool,
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vocab_size: 32768,
            seq_len: 128,
            ffn_kind: FfnKind::GluGelu,
            norm_placement: NormPlacement::Pre,
            embedding_kind: EmbeddingKind::ScaledSinusoidal,
            qkv_bias: false,
            linear_bias: false,
            decoder_bias: false,
            nonlinear_head: false,
            sparse_prediction: true,
            final_norm: true,
            embedding_norm: true,
            tie_embeddings: true,
            layer_norm_eps: 1e-12,
            dropout_rate: 0.0,
        }
    }
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny(num_layers: usize, hidden_dim: usize, num_heads: usize, vocab_size: usize, seq_len: usize) -> Self {
        ModelConfig { num_layers, hidden_dim, num_heads, ffn_dim: 4 * hidden_dim, vocab_size, seq_len, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Input width of the second feed-forward projection.
    pub fn ffn_inner_dim(&self) -> usize {
        match self.ffn_kind {
            FfnKind::GluGelu => self.ffn_dim / 2,
            FfnKind::Gelu => self.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive".into());
        }
        if self.ffn_kind == FfnKind::GluGelu && self.ffn_dim % 2 != 0 {
            return bad(format!("ffn_dim {} must be even for a gated feed-forward block", self.ffn_dim));
        }
        if self.vocab_size > 65536 {
            return bad(format!("vocab_size {} exceeds the 16-bit dataset format", self.vocab_size));
        }
        if self.embedding_kind != EmbeddingKind::Learned && self.hidden_dim % 2 != 0 {
            return bad(format!("sinusoidal positions need an even hidden_dim, got {}", self.hidden_dim));
        }
        if self.embedding_kind == EmbeddingKind::Rotary && self.head_dim() % 2 != 0 {
            return bad(format!("rotary positions need an even head size, got {}", self.head_dim()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Sets one field from its `section.key` spelling (without the `model.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "num_layers" => self.num_layers = parse_num(key, value)?,
            "hidden_dim" => self.hidden_dim = parse_num(key, value)?,
            "num_heads" => self.num_heads = parse_num(key, value)?,
            "ffn_dim" => self.ffn_dim = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "seq_len" => self.seq_len = parse_num(key, value)?,
            "ffn_kind" => self.ffn_kind = value.parse()?,
            "norm_placement" => self.norm_placement = value.parse()?,
            "embedding_kind" => self.embedding_kind = value.parse()?,
            "qkv_bias" => self.qkv_bias = parse_bool(key, value)?,
            "linear_bias" => self.linear_bias = parse_bool(key, value)?,
            "decoder_bias" => self.decoder_bias = parse_bool(key, value)?,
            "nonlinear_head" => self.nonlinear_head = parse_bool(key, value)?,
            "sparse_prediction" => self.sparse_prediction = parse_bool(key, value)?,
            "final_norm" => self.final_norm = parse_bool(key, value)?,
            "embedding_norm" => self.embedding_norm = parse_bool(key, value)?,
            "tie_embeddings" => self.tie_embeddings = parse_bool(key, value)?,
            "layer_norm_eps" => self.layer_norm_eps = parse_num(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }

    /// `(key, value)` pairs in a fixed order; inverse of [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("num_layers", self.num_layers.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("ffn_kind", self.ffn_kind.to_string()),
            ("norm_placement", self.norm_placement.to_string()),
            ("embedding_kind", self.embedding_kind.to_string()),
            ("qkv_bias", self.qkv_bias.to_string()),
            ("linear_bias", self.linear_bias.to_string()),
            ("decoder_bias", self.decoder_bias.to_string()),
            ("nonlinear_head", self.nonlinear_head.to_string()),
            ("sparse_prediction", self.sparse_prediction.to_string()),
            ("final_norm", self.final_norm.to_string()),
            ("embedding_norm", self.embedding_norm.to_string()),
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("layer_norm_eps", format!("{:e}", self.layer_norm_eps)),
            ("dropout_rate", self.dropout_rate.to_string()),
        ]
    }

    /// Lines of the form `model.key = value`, as embedded in checkpoints.
    pub fn to_lines(&self) -> Vec<String> {
        self.entries().into_iter().map(|(k, v)| format!("model.{k} = {v}")).collect()
    }

    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in lines {
            let line = line.as_ref();
            let Some((k, v)) = line.split_once('=') else { continue };
            if let Some(key) = k.trim().strip_prefix("model.") {
                cfg.set(key, v.trim())?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Number of scalar parameters a model with `cfg` holds.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.hidden_dim;
    let v = cfg.vocab_size;
    let ln = 2 * d;
    let mut total = v * d;
    total += match cfg.embedding_kind {
        EmbeddingKind::ScaledSinusoidal => 1,
        EmbeddingKind::Learned => cfg.seq_len * d,
        EmbeddingKind::Sinusoidal | EmbeddingKind::Rotary => 0,
    };
    if cfg.embedding_norm {
        total += ln;
    }
    total += cfg.num_layers * layer_param_count(cfg);
    if cfg.final_norm {
        total += ln;
    }
    if cfg.nonlinear_head {
        total += d * d + ln + if cfg.linear_bias { d } else { 0 };
    }
    if !cfg.tie_embeddings {
        total += v * d;
    }
    if cfg.decoder_bias {
        total += v;
    }
    total
}

/// Parameters in one transformer block.
pub fn layer_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.hidden_dim;
    let mut n = 2 * (2 * d); // two layer norms
    n += 4 * d * d;
    if cfg.qkv_bias {
        n += 3 * d;
    }
    n += d * cfg.ffn_dim + cfg.ffn_inner_dim() * d;
    if cfg.linear_bias {
        n += d + cfg.ffn_dim + d;
    }
    n
}
