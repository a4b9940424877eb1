use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    accumulation_at, adam_step, clip_gradients, lr_at, mask_mlm, AdamState, BatchRampConfig, CurvePoint, LossCurve,
    MaskTokens, MaskingConfig, OptimizerConfig, ScheduleConfig,
};
use crate::corpus::PackedDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamStore, Tape};
use crate::tokenizer::{TokenId, Vocab};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Steps(usize),
    Seconds(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub masking: MaskingConfig,
    pub optimizer: OptimizerConfig,
    /// `total_steps` is filled in from the budget.
    pub schedule: ScheduleConfig,
    pub ramp: BatchRampConfig,
    pub budget: Budget,
    pub seed: u64,
    /// Optimizer steps between curve points.
    pub curve_every: usize,
    /// Record wallclock seconds in the curve. Off gives byte-identical curves
    /// across runs.
    pub record_time: bool,
    pub calibration_seconds: f64,
    pub reestimate_seconds: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            masking: MaskingConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            ramp: BatchRampConfig::default(),
            budget: Budget::Steps(1000),
            seed: 0,
            curve_every: 10,
            record_time: true,
            calibration_seconds: 30.0,
            reestimate_seconds: 300.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    DataExhausted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    pub curve: LossCurve,
    pub steps: usize,
    /// Sequences consumed.
    pub samples: usize,
    /// Schedule length in force at the end of the run.
    pub total_steps: usize,
    pub stop: StopReason,
    pub seconds: f64,
}

/// Largest step count whose remaining micro-batches fit the time left.
fn estimate_total_steps(ramp: &BatchRampConfig, step: usize, secs_per_micro: f64, remaining: f64) -> usize {
    if secs_per_micro <= 0.0 || remaining <= 0.0 {
        return step.max(1);
    }
    let fits = |t: usize| {
        let r = BatchRampConfig { total_steps: t, ..ramp.clone() };
        let micro: usize = (step..t).map(|s| accumulation_at(s, &r)).sum();
        micro as f64 * secs_per_micro <= remaining
    };
    let (mut lo, mut hi) = (step, step + (remaining / secs_per_micro) as usize + 1);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo.max(step + 1)
}

struct Batch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    labels: Vec<usize>,
}

fn masked_batch(
    seqs: &[&[TokenId]],
    masking: &MaskingConfig,
    tokens: &MaskTokens,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let mut b = Batch { ids: Vec::new(), positions: Vec::new(), labels: Vec::new() };
    for (row, seq) in seqs.iter().enumerate() {
        let m = mask_mlm(seq, masking, tokens, rng)?;
        let off = row * seq.len();
        b.ids.extend(m.inputs.iter().map(|&t| t as usize));
        for (p, t) in m.targets {
            b.positions.push(off + p);
            b.labels.push(t as usize);
        }
    }
    Ok(b)
}

fn snapshot(params: &ParamStore<f32>) -> Vec<Vec<f32>> {
    params.ids().map(|id| params.get(id).data().to_vec()).collect()
}

fn restore(params: &mut ParamStore<f32>, snap: &[Vec<f32>]) {
    let ids: Vec<_> = params.ids().collect();
    for (id, s) in ids.into_iter().zip(snap) {
        params.get_mut(id).data_mut().copy_from_slice(s);
    }
    params.zero_grads();
}

/// Runs the masked-language-model recipe over `data` in order, without
/// revisiting any sequence.
///
/// On a non-finite loss or gradient the parameters are restored to the last
/// completed step and a runtime error is returned.
pub fn pretrain(
    model: &mut Model<f32>,
    data: &PackedDataset,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.masking.validate()?;
    cfg.optimizer.validate()?;
    cfg.schedule.validate()?;
    cfg.ramp.validate()?;
    if data.seq_len() > model.config().seq_len {
        return Err(Error::Config(format!(
            "dataset sequences of {} exceed the model's seq_len {}",
            data.seq_len(),
            model.config().seq_len
        )));
    }
    if vocab.len() != model.config().vocab_size || data.vocab_size() != vocab.len() {
        return Err(Error::Config(format!(
            "vocabulary sizes disagree: tokenizer {}, model {}, dataset {}",
            vocab.len(),
            model.config().vocab_size,
            data.vocab_size()
        )));
    }
    let seq = data.seq_len();
    let micro = cfg.ramp.micro_batch;
    let tokens = MaskTokens::from_vocab(vocab);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let start = Instant::now();

    let (mut total, wallclock) = match cfg.budget {
        Budget::Steps(n) => (n, None),
        Budget::Seconds(s) => (if s > 0.0 { usize::MAX / 4 } else { 0 }, Some(s)),
    };
    let mut outcome = PretrainOutcome {
        curve: LossCurve::default(),
        steps: 0,
        samples: 0,
        total_steps: total,
        stop: StopReason::Budget,
        seconds: 0.0,
    };
    if total == 0 {
        return Ok(outcome);
    }

    let mut state = AdamState::new(model.params());
    let mut last_good = snapshot(model.params());
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    let mut micro_done = 0usize;
    let mut next_estimate = cfg.calibration_seconds;
    let mut lr = 0.0;
    let curve_every = cfg.curve_every.max(1);

    let mut step = 0;
    while step < total {
        let schedule = ScheduleConfig { total_steps: total, ..cfg.schedule.clone() };
        let ramp = BatchRampConfig { total_steps: total, ..cfg.ramp.clone() };
        let acc = accumulation_at(step, &ramp);
        if outcome.samples + acc * micro > data.len() {
            outcome.stop = StopReason::DataExhausted;
            break;
        }
        lr = lr_at(step, &schedule)?;
        model.params_mut().zero_grads();
        for k in 0..acc {
            let first = outcome.samples + k * micro;
            let seqs: Vec<&[TokenId]> = (first..first + micro).map(|i| data.sequence(i)).collect();
            let batch = masked_batch(&seqs, &cfg.masking, &tokens, &mut mask_rng)?;
            let mut tape = Tape::new();
            let loss = model.mlm_loss(&mut tape, &batch.ids, micro, seq, &batch.positions, &batch.labels, Some(&mut dropout_rng))?;
            let value = tape.item(loss) as f64;
            if !value.is_finite() {
                restore(model.params_mut(), &last_good);
                return Err(Error::Runtime(format!("non-finite loss at step {step}; restored step {}", outcome.steps)));
            }
            let scaled = tape.scale(loss, 1.0 / acc as f64)?;
            tape.backward_into(scaled, model.params_mut())?;
            loss_sum += value;
            loss_count += 1;
        }
        clip_gradients(model.params_mut(), cfg.optimizer.clip_norm);
        if let Err(e) = adam_step(model.params_mut(), &mut state, lr, &cfg.optimizer) {
            restore(model.params_mut(), &last_good);
            return Err(e);
        }
        if model.params().iter().any(|(_, _, t)| !t.all_finite()) {
            restore(model.params_mut(), &last_good);
            return Err(Error::Runtime(format!("non-finite parameters after step {step}")));
        }
        model.params_mut().zero_grads();
        last_good = snapshot(model.params());
        step += 1;
        micro_done += acc;
        outcome.samples += acc * micro;
        outcome.steps = step;

        let elapsed = start.elapsed().as_secs_f64();
        if let Some(budget) = wallclock {
            if elapsed >= budget {
                total = step;
            } else if step == 1 || elapsed >= next_estimate {
                total = estimate_total_steps(&cfg.ramp, step, elapsed / micro_done as f64, budget - elapsed);
                if elapsed >= next_estimate {
                    next_estimate = elapsed + cfg.reestimate_seconds;
                }
            }
        }
        if step % curve_every == 0 || step == total {
            outcome.curve.push(CurvePoint {
                step,
                tokens: (outcome.samples * seq) as u64,
                lr,
                loss: loss_sum / loss_count as f64,
                seconds: if cfg.record_time { elapsed } else { 0.0 },
            })?;
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    if loss_count > 0 {
        let elapsed = start.elapsed().as_secs_f64();
        outcome.curve.push(CurvePoint {
            step: outcome.steps,
            tokens: (outcome.samples * seq) as u64,
            lr,
            loss: loss_sum / loss_count as f64,
            seconds: if cfg.record_time { elapsed } else { 0.0 },
        })?;
    }
    outcome.total_steps = total;
    outcome.seconds = start.elapsed().as_secs_f64();
    Ok(outcome)
}

/// Mean masked-LM loss over `sequences` with masking drawn from `seed`, no
/// dropout. Identical arguments give identical results.
pub fn eval_loss(
    model: &Model<f32>,
    sequences: &[&[TokenId]],
    vocab: &Vocab,
    masking: &MaskingConfig,
    batch: usize,
    seed: u64,
) -> Result<f64> {
    if sequences.is_empty() || batch == 0 {
        return Err(Error::Config("evaluation needs at least one sequence and a positive batch".into()));
    }
    let tokens = MaskTokens::from_vocab(vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in sequences.chunks(batch) {
        let seq = chunk[0].len();
        if chunk.iter().any(|s| s.len() != seq) {
            return Err(Error::Shape("evaluation sequences differ in length".into()));
        }
        let b = masked_batch(chunk, masking, &tokens, &mut rng)?;
        let mut tape = Tape::new();
        let loss = model.mlm_loss(&mut tape, &b.ids, chunk.len(), seq, &b.positions, &b.labels, None)?;
        sum += tape.item(loss) as f64 * b.labels.len() as f64;
        n += b.labels.len();
    }
    Ok(sum / n as f64)
}
