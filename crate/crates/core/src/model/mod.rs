//! The crammed transformer encoder.
//!
//! Every architectural toggle that the recipe evaluated is a field of
//! [`ModelConfig`]; the defaults describe the final crammed model.

mod config;
mod positional;

pub use config::{layer_param_count, param_count, EmbeddingKind, FfnKind, ModelConfig, NormPlacement};
pub(crate) use config::{parse_bool, parse_num};
pub use positional::{positional_embedding, sinusoidal_table};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    attn_norm: Norm,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    q_bias: Option<ParamId>,
    k_bias: Option<ParamId>,
    v_bias: Option<ParamId>,
    out_bias: Option<ParamId>,
    ffn_norm: Norm,
    w_up: ParamId,
    up_bias: Option<ParamId>,
    w_down: ParamId,
    down_bias: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct HeadTransform {
    dense: ParamId,
    dense_bias: Option<ParamId>,
    norm: Norm,
}

#[derive(Clone, Copy, Debug)]
enum Positions {
    Scaled(ParamId),
    Learned(ParamId),
    Fixed,
    Rotary,
}

/// Parameters of the encoder plus the handles needed to run it.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    token_embedding: ParamId,
    positions: Positions,
    embedding_norm: Option<Norm>,
    layers: Vec<Layer>,
    final_norm: Option<Norm>,
    head: Option<HeadTransform>,
    decoder: ParamId,
    decoder_bias: Option<ParamId>,
    classifier: Option<(ParamId, ParamId)>,
    /// Replaces every layer norm by the identity. Test hook for comparing
    /// norm placements.
    #[doc(hidden)]
    pub bypass_norms: bool,
}

/// Whether weight decay applies to a parameter: layer norm affine terms,
/// biases and the positional scale are excluded.
pub fn decays(name: &str) -> bool {
    !(name.ends_with("bias") || name.ends_with("gain") || name.ends_with("position_scale"))
}

fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn add(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        self.store.insert(name, Tensor::from_f64(shape, &values)?)
    }

    fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let n = shape.iter().product();
        let v = truncated_normal(self.rng, n, INIT_STD);
        self.add(name, shape, v)
    }

    fn zeros(&mut self, name: &str, n: usize) -> Result<ParamId> {
        self.add(name, &[n], vec![0.0; n])
    }

    fn maybe_zeros(&mut self, on: bool, name: &str, n: usize) -> Result<Option<ParamId>> {
        on.then(|| self.zeros(name, n)).transpose()
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm { gain: self.add(&format!("{prefix}.gain"), &[d], vec![1.0; d])?, bias: self.zeros(&format!("{prefix}.bias"), d)? })
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; identical seeds give bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng };
        let (d, v, f) = (config.hidden_dim, config.vocab_size, config.ffn_dim);

        b.weight("embedding.token", &[v, d])?;
        match config.embedding_kind {
            EmbeddingKind::ScaledSinusoidal => {
                b.add("embedding.position_scale", &[1], vec![1.0 / (d as f64).sqrt()])?;
            }
            EmbeddingKind::Learned => {
                b.weight("embedding.position", &[config.seq_len, d])?;
            }
            EmbeddingKind::Sinusoidal | EmbeddingKind::Rotary => {}
        }
        if config.embedding_norm {
            b.norm("embedding.norm", d)?;
        }
        for i in 0..config.num_layers {
            let p = format!("layer{i}");
            b.norm(&format!("{p}.attn_norm"), d)?;
            for w in ["wq", "wk", "wv", "wo"] {
                b.weight(&format!("{p}.attn.{w}"), &[d, d])?;
            }
            for bias in ["q_bias", "k_bias", "v_bias"] {
                b.maybe_zeros(config.qkv_bias, &format!("{p}.attn.{bias}"), d)?;
            }
            b.maybe_zeros(config.linear_bias, &format!("{p}.attn.out_bias"), d)?;
            b.norm(&format!("{p}.ffn_norm"), d)?;
            b.weight(&format!("{p}.ffn.w_up"), &[d, f])?;
            b.maybe_zeros(config.linear_bias, &format!("{p}.ffn.up_bias"), f)?;
            b.weight(&format!("{p}.ffn.w_down"), &[config.ffn_inner_dim(), d])?;
            b.maybe_zeros(config.linear_bias, &format!("{p}.ffn.down_bias"), d)?;
        }
        if config.final_norm {
            b.norm("final_norm", d)?;
        }
        if config.nonlinear_head {
            b.weight("head.dense", &[d, d])?;
            b.maybe_zeros(config.linear_bias, "head.dense_bias", d)?;
            b.norm("head.norm", d)?;
        }
        if !config.tie_embeddings {
            b.weight("decoder.weight", &[v, d])?;
        }
        b.maybe_zeros(config.decoder_bias, "decoder.bias", v)?;
        let store = b.store;
        Self::from_params(config, store)
    }

    /// Wraps an existing parameter set, e.g. one read from a checkpoint.
    pub fn from_params(config: &ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (d, v, f) = (config.hidden_dim, config.vocab_size, config.ffn_dim);
        let need = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params.id(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Shape(format!("{name}: expected {shape:?}, found {:?}", params.get(id).shape())));
            }
            Ok(id)
        };
        let maybe = |on: bool, name: &str, shape: &[usize]| on.then(|| need(name, shape)).transpose();
        let norm = |prefix: &str| -> Result<Norm> {
            Ok(Norm { gain: need(&format!("{prefix}.gain"), &[d])?, bias: need(&format!("{prefix}.bias"), &[d])? })
        };

        let token_embedding = need("embedding.token", &[v, d])?;
        let positions = match config.embedding_kind {
            EmbeddingKind::ScaledSinusoidal => Positions::Scaled(need("embedding.position_scale", &[1])?),
            EmbeddingKind::Learned => Positions::Learned(need("embedding.position", &[config.seq_len, d])?),
            EmbeddingKind::Sinusoidal => Positions::Fixed,
            EmbeddingKind::Rotary => Positions::Rotary,
        };
        let embedding_norm = config.embedding_norm.then(|| norm("embedding.norm")).transpose()?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layer{i}");
            layers.push(Layer {
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                wq: need(&format!("{p}.attn.wq"), &[d, d])?,
                wk: need(&format!("{p}.attn.wk"), &[d, d])?,
                wv: need(&format!("{p}.attn.wv"), &[d, d])?,
                wo: need(&format!("{p}.attn.wo"), &[d, d])?,
                q_bias: maybe(config.qkv_bias, &format!("{p}.attn.q_bias"), &[d])?,
                k_bias: maybe(config.qkv_bias, &format!("{p}.attn.k_bias"), &[d])?,
                v_bias: maybe(config.qkv_bias, &format!("{p}.attn.v_bias"), &[d])?,
                out_bias: maybe(config.linear_bias, &format!("{p}.attn.out_bias"), &[d])?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
                w_up: need(&format!("{p}.ffn.w_up"), &[d, f])?,
                up_bias: maybe(config.linear_bias, &format!("{p}.ffn.up_bias"), &[f])?,
                w_down: need(&format!("{p}.ffn.w_down"), &[config.ffn_inner_dim(), d])?,
                down_bias: maybe(config.linear_bias, &format!("{p}.ffn.down_bias"), &[d])?,
            });
        }
        let final_norm = config.final_norm.then(|| norm("final_norm")).transpose()?;
        let head = if config.nonlinear_head {
            Some(HeadTransform {
                dense: need("head.dense", &[d, d])?,
                dense_bias: maybe(config.linear_bias, "head.dense_bias", &[d])?,
                norm: norm("head.norm")?,
            })
        } else {
            None
        };
        let decoder = if config.tie_embeddings { token_embedding } else { need("decoder.weight", &[v, d])? };
        let decoder_bias = maybe(config.decoder_bias, "decoder.bias", &[v])?;
        let classifier = match (params.id("classifier.weight"), params.id("classifier.bias")) {
            (Some(w), Some(b)) => Some((w, b)),
            _ => None,
        };

        let model = Model {
            config: config.clone(),
            params,
            token_embedding,
            positions,
            embedding_norm,
            layers,
            final_norm,
            head,
            decoder,
            decoder_bias,
            classifier,
            bypass_norms: false,
        };
        let expected = param_count(config) + model.classifier_numel();
        if model.params.numel() != expected {
            return Err(Error::Config(format!(
                "parameter set holds {} values, configuration implies {expected}",
                model.params.numel()
            )));
        }
        Ok(model)
    }

    fn classifier_numel(&self) -> usize {
        self.classifier.map_or(0, |(w, b)| self.params.get(w).numel() + self.params.get(b).numel())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn token_embedding(&self) -> ParamId {
        self.token_embedding
    }

    pub fn decoder_weight(&self) -> ParamId {
        self.decoder
    }

    /// Number of parameters excluding any classification head.
    pub fn num_params(&self) -> usize {
        self.params.numel() - self.classifier_numel()
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let cfg = ModelConfig { dropout_rate: rate, ..self.config.clone() };
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.map(|(_, b)| self.params.get(b).numel())
    }

    /// Adds (or replaces) a freshly initialized linear classification head.
    pub fn add_classifier(&mut self, num_classes: usize, seed: u64) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config(format!("a classifier needs at least two classes, got {num_classes}")));
        }
        let d = self.config.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_f64(&[d, num_classes], &truncated_normal(&mut rng, d * num_classes, INIT_STD))?;
        let b = Tensor::zeros(&[num_classes]);
        match self.classifier {
            Some((wid, bid)) if self.params.get(bid).numel() == num_classes => {
                *self.params.get_mut(wid) = w.with_grad(true);
                *self.params.get_mut(bid) = b.with_grad(true);
            }
            Some(_) => return Err(Error::Contract("classifier already present with a different class count".into())),
            None => {
                let wid = self.params.insert("classifier.weight", w)?;
                let bid = self.params.insert("classifier.bias", b)?;
                self.classifier = Some((wid, bid));
            }
        }
        Ok(())
    }

    fn norm(&self, tape: &mut Tape<T>, x: Var, n: Norm) -> Result<Var> {
        if self.bypass_norms {
            return Ok(x);
        }
        let g = tape.param(&self.params, n.gain);
        let b = tape.param(&self.params, n.bias);
        tape.layer_norm(x, g, b, self.config.layer_norm_eps)
    }

    fn linear(&self, tape: &mut Tape<T>, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = tape.param(&self.params, w);
        let y = tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = tape.param(&self.params, b);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    fn dropout(&self, tape: &mut Tape<T>, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        match rng {
            Some(r) if self.config.dropout_rate > 0.0 => tape.dropout(x, self.config.dropout_rate, &mut **r),
            _ => Ok(x),
        }
    }

    /// Multi-head self-attention sublayer (projections included).
    pub fn attention(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        layer: usize,
        batch: usize,
        seq: usize,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        let mut q = self.linear(tape, x, l.wq, l.q_bias)?;
        let mut k = self.linear(tape, x, l.wk, l.k_bias)?;
        let v = self.linear(tape, x, l.wv, l.v_bias)?;
        if matches!(self.positions, Positions::Rotary) {
            q = tape.rotary(q, batch, seq, self.config.num_heads)?;
            k = tape.rotary(k, batch, seq, self.config.num_heads)?;
        }
        let a = tape.attention(q, k, v, batch, seq, self.config.num_heads, lens)?;
        self.linear(tape, a, l.wo, l.out_bias)
    }

    /// Feed-forward sublayer. The gated variant uses the first half of the
    /// up-projection as value and the second half as gate.
    pub fn ffn(&self, tape: &mut Tape<T>, x: Var, layer: usize) -> Result<Var> {
        let l = &self.layers[layer];
        let h = self.linear(tape, x, l.w_up, l.up_bias)?;
        let inner = match self.config.ffn_kind {
            FfnKind::GluGelu => {
                let half = self.config.ffn_dim / 2;
                let value = tape.slice_cols(h, 0, half)?;
                let gate = tape.slice_cols(h, half, self.config.ffn_dim)?;
                let gate = tape.gelu(gate)?;
                tape.mul(value, gate)?
            }
            FfnKind::Gelu => tape.gelu(h)?,
        };
        self.linear(tape, inner, l.w_down, l.down_bias)
    }

    fn embed(&self, tape: &mut Tape<T>, ids: &[usize], batch: usize, seq: usize) -> Result<Var> {
        let e = tape.param(&self.params, self.token_embedding);
        let x = tape.embedding(e, ids)?;
        let d = self.config.hidden_dim;
        match self.positions {
            Positions::Scaled(scale) => {
                let table = sinusoidal_table(seq, d)?.into_iter().map(T::of).collect();
                let table = tape.constant(&[seq, d], table)?;
                let s = tape.param(&self.params, scale);
                let table = tape.scale_by(table, s)?;
                tape.add_tiled(x, table)
            }
            Positions::Fixed => {
                let table = sinusoidal_table(seq, d)?.into_iter().map(T::of).collect();
                let table = tape.constant(&[seq, d], table)?;
                tape.add_tiled(x, table)
            }
            Positions::Learned(p) => {
                let p = tape.param(&self.params, p);
                let rows: Vec<usize> = (0..seq).collect();
                let table = tape.gather_rows(p, &rows)?;
                tape.add_tiled(x, table)
            }
            Positions::Rotary => {
                let _ = batch;
                Ok(x)
            }
        }
    }

    /// Final hidden states `[(batch·seq)×d]`.
    ///
    /// `dropout_rng` enables dropout at the configured rate; pass `None` for
    /// deterministic evaluation.
    pub fn hidden_states(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        lens: Option<&[usize]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::Shape(format!("{} ids for batch {batch} × seq {seq}", ids.len())));
        }
        if seq > self.config.seq_len {
            return Err(Error::Shape(format!("sequence of {seq} exceeds configured seq_len {}", self.config.seq_len)));
        }
        let mut x = self.embed(tape, ids, batch, seq)?;
        if let Some(n) = self.embedding_norm {
            x = self.norm(tape, x, n)?;
        }
        x = self.dropout(tape, x, &mut dropout_rng)?;
        for i in 0..self.layers.len() {
            let (an, fnn) = (self.layers[i].attn_norm, self.layers[i].ffn_norm);
            match self.config.norm_placement {
                NormPlacement::Pre => {
                    let h = self.norm(tape, x, an)?;
                    let a = self.attention(tape, h, i, batch, seq, lens)?;
                    let a = self.dropout(tape, a, &mut dropout_rng)?;
                    x = tape.add(x, a)?;
                    let h = self.norm(tape, x, fnn)?;
                    let m = self.ffn(tape, h, i)?;
                    let m = self.dropout(tape, m, &mut dropout_rng)?;
                    x = tape.add(x, m)?;
                }
                NormPlacement::Post => {
                    let a = self.attention(tape, x, i, batch, seq, lens)?;
                    let a = self.dropout(tape, a, &mut dropout_rng)?;
                    let s = tape.add(x, a)?;
                    x = self.norm(tape, s, an)?;
                    let m = self.ffn(tape, x, i)?;
                    let m = self.dropout(tape, m, &mut dropout_rng)?;
                    let s = tape.add(x, m)?;
                    x = self.norm(tape, s, fnn)?;
                }
            }
        }
        if let Some(n) = self.final_norm {
            x = self.norm(tape, x, n)?;
        }
        Ok(x)
    }

    fn decode(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let mut h = h;
        if let Some(head) = self.head {
            h = self.linear(tape, h, head.dense, head.dense_bias)?;
            h = tape.gelu(h)?;
            h = self.norm(tape, h, head.norm)?;
        }
        let w = tape.param(&self.params, self.decoder);
        let logits = tape.matmul_t(h, w)?;
        match self.decoder_bias {
            Some(b) => {
                let b = tape.param(&self.params, b);
                tape.add_row(logits, b)
            }
            None => Ok(logits),
        }
    }

    /// Masked-token logits. With sparse prediction the decoder runs only on
    /// the `P` masked rows and the result is `[P×V]`; otherwise it runs on
    /// every row and the result is `[(batch·seq)×V]`.
    pub fn mlm_logits(&self, tape: &mut Tape<T>, hidden: Var, masked_positions: &[usize]) -> Result<Var> {
        if masked_positions.is_empty() {
            return Err(Error::Index("at least one masked position is required".into()));
        }
        let rows = tape.shape(hidden)[0];
        if let Some(&bad) = masked_positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Index(format!("masked position {bad} outside {rows} positions")));
        }
        if self.config.sparse_prediction {
            let h = tape.gather_rows(hidden, masked_positions)?;
            self.decode(tape, h)
        } else {
            self.decode(tape, hidden)
        }
    }

    /// Embedding → encoder blocks → final norm → decoder logits.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        masked_positions: &[usize],
    ) -> Result<Var> {
        let h = self.hidden_states(tape, ids, batch, seq, None, None)?;
        self.mlm_logits(tape, h, masked_positions)
    }

    /// Mean cross entropy of `labels` at `masked_positions` (flat indices
    /// into the `batch·seq` positions).
    #[allow(clippy::too_many_arguments)]
    pub fn mlm_loss(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        masked_positions: &[usize],
        labels: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let h = self.hidden_states(tape, ids, batch, seq, None, dropout_rng)?;
        let mut logits = self.mlm_logits(tape, h, masked_positions)?;
        if !self.config.sparse_prediction {
            logits = tape.gather_rows(logits, masked_positions)?;
        }
        tape.cross_entropy(logits, labels)
    }

    /// Class logits `[batch×C]` read from the first position of each row.
    pub fn classify(
        &self,
        tape: &mut Tape<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        lens: &[usize],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let (w, b) = self.classifier.ok_or_else(|| Error::Contract("model has no classification head".into()))?;
        let h = self.hidden_states(tape, ids, batch, seq, Some(lens), dropout_rng)?;
        let rows: Vec<usize> = (0..batch).map(|i| i * seq).collect();
        let cls = tape.gather_rows(h, &rows)?;
        self.linear(tape, cls, w, Some(b))
    }
}

impl Model<f32> {
    /// Checkpoint configuration lines for this model.
    pub fn config_lines(&self) -> Vec<String> {
        self.config.to_lines()
    }
}
