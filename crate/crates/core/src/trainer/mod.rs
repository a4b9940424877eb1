//! Masked-language-model pretraining and classification finetuning.

mod curve;
mod finetune;
mod pretrain;

pub use curve::{CurvePoint, LossCurve};
pub use finetune::{
    encode_examples, finetune, finetune_seeds, matthews_correlation, read_task, split_task, FinetuneProtocol,
    FinetuneResult, SeedSummary, TaskExample,
};
pub use pretrain::{eval_loss, pretrain, Budget, PretrainConfig, PretrainOutcome, StopReason};

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::decays;
use crate::tensor::{ParamStore, Scalar};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub p_mask: f64,
    pub p_random: f64,
    pub p_keep: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { rate: 0.15, p_mask: 0.8, p_random: 0.1, p_keep: 0.1 }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_mask, self.p_random, self.p_keep];
        if ps.iter().any(|p| !(0.0..=1.0).contains(p)) || ((ps.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("masking proportions {ps:?} must be probabilities summing to 1")));
        }
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("masking rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

/// Token ids masking needs to know about.
#[derive(Clone, Debug)]
pub struct MaskTokens {
    pub mask: TokenId,
    /// Never selected for prediction.
    pub excluded: Vec<TokenId>,
    /// Pool for random replacements.
    pub random_pool: Vec<TokenId>,
}

impl MaskTokens {
    pub fn from_vocab(vocab: &Vocab) -> Self {
        MaskTokens {
            mask: vocab.mask(),
            excluded: vec![vocab.sep(), vocab.pad(), vocab.cls()],
            random_pool: vocab.regular_ids(),
        }
    }
}

/// One masked sequence: model inputs plus `(position, original id)` targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Masked {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

/// Selects eligible positions independently with probability `rate`; a
/// selected position becomes `<mask>`, a random id, or stays unchanged. If
/// nothing is selected one eligible position is chosen as a target with its
/// input left unchanged.
pub fn mask_mlm<R: Rng + ?Sized>(
    seq: &[TokenId],
    cfg: &MaskingConfig,
    tokens: &MaskTokens,
    rng: &mut R,
) -> Result<Masked> {
    if seq.contains(&tokens.mask) {
        return Err(Error::Contract("sequence already contains <mask>".into()));
    }
    let mut inputs = seq.to_vec();
    let mut targets = Vec::new();
    let eligible = |t: &TokenId| !tokens.excluded.contains(t);
    for (i, t) in seq.iter().enumerate() {
        if !eligible(t) || !rng.random_bool(cfg.rate) {
            continue;
        }
        targets.push((i, *t));
        let u: f64 = rng.random();
        if u < cfg.p_mask {
            inputs[i] = tokens.mask;
        } else if u < cfg.p_mask + cfg.p_random && !tokens.random_pool.is_empty() {
            inputs[i] = tokens.random_pool[rng.random_range(0..tokens.random_pool.len())];
        }
    }
    if targets.is_empty() {
        let pool: Vec<usize> = (0..seq.len()).filter(|&i| eligible(&seq[i])).collect();
        if pool.is_empty() {
            return Err(Error::Contract("sequence has no position eligible for masking".into()));
        }
        let i = pool[rng.random_range(0..pool.len())];
        targets.push((i, seq[i]));
    }
    Ok(Masked { inputs, targets })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    OneCycle,
    Triangular,
    CosineDecay,
    LinearDecay,
    Constant,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::OneCycle => "one_cycle",
            ScheduleKind::Triangular => "triangular",
            ScheduleKind::CosineDecay => "cosine_decay",
            ScheduleKind::LinearDecay => "linear_decay",
            ScheduleKind::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "one_cycle" => ScheduleKind::OneCycle,
            "triangular" => ScheduleKind::Triangular,
            "cosine_decay" => ScheduleKind::CosineDecay,
            "linear_decay" => ScheduleKind::LinearDecay,
            "constant" => ScheduleKind::Constant,
            other => return Err(Error::Config(format!("unknown schedule {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub peak_lr: f64,
    pub peak_fraction: f64,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::OneCycle, peak_lr: 1e-3, peak_fraction: 0.5, total_steps: 1 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) || !(self.peak_fraction > 0.0 && self.peak_fraction < 1.0) {
            return Err(Error::Config(format!(
                "schedule needs peak_lr > 0 and 0 < peak_fraction < 1, got {} and {}",
                self.peak_lr, self.peak_fraction
            )));
        }
        Ok(())
    }
}

/// Learning rate for optimizer step `step` of `total_steps`. Every schedule
/// is zero at `step == total_steps`.
pub fn lr_at(step: usize, cfg: &ScheduleConfig) -> Result<f64> {
    let t = cfg.total_steps;
    if step > t {
        return Err(Error::Contract(format!("step {step} beyond schedule length {t}")));
    }
    if step == t {
        return Ok(0.0);
    }
    let (s, tf) = (step as f64, t as f64);
    Ok(match cfg.kind {
        ScheduleKind::OneCycle | ScheduleKind::Triangular => {
            let peak_at = cfg.peak_fraction * tf;
            if s <= peak_at {
                cfg.peak_lr * (s / peak_at)
            } else {
                cfg.peak_lr * ((tf - s) / (tf - peak_at))
            }
        }
        ScheduleKind::CosineDecay => cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * s / tf).cos()),
        ScheduleKind::LinearDecay => cfg.peak_lr * ((tf - s) / tf),
        ScheduleKind::Constant => cfg.peak_lr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchRampConfig {
    pub micro_batch: usize,
    pub final_batch: usize,
    pub ramp_end_fraction: f64,
    pub total_steps: usize,
}

impl Default for BatchRampConfig {
    fn default() -> Self {
        BatchRampConfig { micro_batch: 128, final_batch: 4096, ramp_end_fraction: 0.6, total_steps: 1 }
    }
}

impl BatchRampConfig {
    pub fn factor(&self) -> usize {
        ((self.final_batch as f64 / self.micro_batch as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.final_batch < self.micro_batch {
            return Err(Error::Config(format!(
                "final_batch {} must be at least micro_batch {} > 0",
                self.final_batch, self.micro_batch
            )));
        }
        if !(0.0..=1.0).contains(&self.ramp_end_fraction) {
            return Err(Error::Config(format!("ramp_end_fraction {} outside [0, 1]", self.ramp_end_fraction)));
        }
        Ok(())
    }

    /// Total samples a run of `total_steps` optimizer steps consumes.
    pub fn planned_samples(&self) -> usize {
        (0..self.total_steps).map(|s| accumulation_at(s, self) * self.micro_batch).sum()
    }
}

/// Micro-batches to accumulate at `step`: linear from 1 at step 0 to the full
/// factor at `ramp_end_fraction · total_steps`, constant afterwards.
pub fn accumulation_at(step: usize, cfg: &BatchRampConfig) -> usize {
    let f = cfg.factor();
    let ramp_end = cfg.ramp_end_fraction * cfg.total_steps as f64;
    let s = step as f64;
    if s >= ramp_end {
        return f;
    }
    ((1.0 + (f as f64 - 1.0) * s / ramp_end).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { beta1: 0.9, beta2: 0.98, eps: 1e-12, weight_decay: 0.01, clip_norm: 0.5 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) || !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("optimizer needs 0 <= betas < 1, eps > 0 and clip_norm > 0".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    decay: Vec<bool>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |id| vec![T::zero(); params.get(id).numel()];
        AdamState {
            m: params.ids().map(zeros).collect(),
            v: params.ids().map(zeros).collect(),
            decay: params.iter().map(|(_, name, _)| decays(name)).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients<T: Scalar>(params: &mut ParamStore<T>, clip_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > clip_norm {
        let s = T::of(clip_norm / norm);
        params.scale_grads(s);
    }
    norm
}

/// Bias-corrected Adam with decoupled weight decay, reading gradients from
/// the store. Parameters excluded by [`decays`] are not decayed.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match the parameter store".into()));
    }
    let ids: Vec<_> = params.ids().collect();
    for &id in &ids {
        if let Some(g) = params.get(id).grad() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Runtime(format!("non-finite gradient in {}", params.name(id))));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step_size = T::of(lr / c1);
    let (tb1, tb2) = (T::of(b1), T::of(b2));
    let (ob1, ob2) = (T::of(1.0 - b1), T::of(1.0 - b2));
    let inv_c2 = T::of(1.0 / c2);
    let eps = T::of(cfg.eps);
    for (k, &id) in ids.iter().enumerate() {
        let shrink = if state.decay[k] { T::of(1.0 - lr * cfg.weight_decay) } else { T::one() };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let (data, grad) = params.get_mut(id).data_and_grad();
        let Some(g) = grad else { continue };
        for (((p, g), m), v) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = tb1 * *m + ob1 * *g;
            *v = tb2 * *v + ob2 * *g * *g;
            *p = *p * shrink - step_size * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tokens() -> MaskTokens {
        MaskTokens { mask: 4, excluded: vec![0, 2, 3], random_pool: (5..50).collect() }
    }

    #[test]
    fn zero_rate_forces_one_unchanged_target() {
        let cfg = MaskingConfig { rate: 0.0, ..Default::default() };
        let seq = vec![10, 11, 3, 12];
        let m = mask_mlm(&seq, &cfg, &tokens(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.inputs, seq);
        assert_eq!(m.targets.len(), 1);
        assert_ne!(m.targets[0].1, 3);
    }

    #[test]
    fn full_rate_masks_every_eligible_position() {
        let cfg = MaskingConfig { rate: 1.0, p_mask: 1.0, p_random: 0.0, p_keep: 0.0 };
        let seq = vec![10, 3, 12, 0];
        let m = mask_mlm(&seq, &cfg, &tokens(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.inputs, vec![4, 3, 4, 0]);
        assert_eq!(m.targets, vec![(0, 10), (2, 12)]);
        assert!(mask_mlm(&[4, 5], &cfg, &tokens(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(mask_mlm(&[3, 3], &cfg, &tokens(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = ScheduleConfig { total_steps: 1000, ..Default::default() };
        assert_eq!(lr_at(0, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(500, &cfg).unwrap(), 1e-3);
        assert_eq!(lr_at(1000, &cfg).unwrap(), 0.0);
        assert!(lr_at(1001, &cfg).is_err());
        for kind in [ScheduleKind::CosineDecay, ScheduleKind::LinearDecay, ScheduleKind::Constant] {
            let c = ScheduleConfig { kind, ..cfg.clone() };
            assert_eq!(lr_at(0, &c).unwrap(), 1e-3);
            assert_eq!(lr_at(1000, &c).unwrap(), 0.0);
        }
    }

    #[test]
    fn ramp_examples() {
        let cfg = BatchRampConfig { total_steps: 1000, ..Default::default() };
        assert_eq!(accumulation_at(0, &cfg), 1);
        assert_eq!(accumulation_at(600, &cfg), 32);
        assert_eq!(accumulation_at(999, &cfg), 32);
        assert_eq!(accumulation_at(300, &cfg), 17);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap()).unwrap();
        let g = store.insert("norm.gain", Tensor::from_f64(&[1], &[1.0]).unwrap()).unwrap();
        store.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        store.get_mut(g).accumulate_grad(&[0.0]);
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 0.1, &OptimizerConfig::default()).unwrap();
        assert_eq!(store.get(id).data(), &[1.0 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
        assert_eq!(store.by_name("norm.gain").unwrap().data(), &[1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[3], &[0.0; 3]).unwrap()).unwrap();
        store.get_mut(id).accumulate_grad(&[1e-3, -5.0, 42.0]);
        let mut st = AdamState::new(&store);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..Default::default() };
        adam_step(&mut store, &mut st, 0.01, &cfg).unwrap();
        for (p, s) in store.get(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((p - 0.01 * s).abs() < 1e-9);
        }
    }

    #[test]
    fn clipping_halves_unit_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[2], &[0.0; 2]).unwrap()).unwrap();
        store.get_mut(id).accumulate_grad(&[0.6, 0.8]);
        assert_eq!(clip_gradients(&mut store, 0.5), 1.0);
        assert_eq!(store.get(id).grad().unwrap(), &[0.3, 0.4]);
        assert!((clip_gradients(&mut store, 0.5) - 0.5).abs() < 1e-12);
        assert_eq!(store.get(id).grad().unwrap(), &[0.3, 0.4]);
    }
}
