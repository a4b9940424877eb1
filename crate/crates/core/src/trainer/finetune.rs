use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, clip_gradients, lr_at, AdamState, OptimizerConfig, ScheduleConfig, ScheduleKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tape;
use crate::tokenizer::{TokenId, WordPieceModel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub text: String,
    pub text2: Option<String>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneProtocol {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FinetuneProtocol {
    fn default() -> Self {
        FinetuneProtocol { epochs: 5, batch_size: 16, lr: 4e-5, dropout: 0.1, optimizer: OptimizerConfig::default() }
    }
}

impl FinetuneProtocol {
    /// The original baseline's setting: batch 32, learning rate 2e-5.
    pub fn baseline() -> Self {
        FinetuneProtocol { batch_size: 32, lr: 2e-5, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.epochs) {
            return Err(Error::Config(format!("finetuning runs 1 to 5 epochs, got {}", self.epochs)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("finetuning needs batch_size > 0, lr > 0 and dropout in [0, 1)".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub accuracy: f64,
    pub matthews: f64,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub per_seed: Vec<FinetuneResult>,
    pub median_accuracy: f64,
    pub median_matthews: f64,
}

/// Reads a tab-separated task file with rows `text[\ttext2]\tlabel`. Labels
/// are mapped to indices in sorted order (numerically if all are integers).
pub fn read_task(path: &Path) -> Result<(Vec<TaskExample>, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let (t1, t2, label) = match f.as_slice() {
            [a, l] => (*a, None, *l),
            [a, b, l] => (*a, Some(*b), *l),
            _ => return Err(Error::format("task file", format!("line {}: expected 2 or 3 tab-separated fields", n + 1))),
        };
        rows.push((t1.to_string(), t2.map(str::to_string), label.trim().to_string()));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("task file {} has no rows", path.display())));
    }
    let mut labels: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().unwrap_or(0));
    }
    let examples = rows
        .into_iter()
        .map(|(text, text2, l)| TaskExample { text, text2, label: labels.iter().position(|x| *x == l).unwrap_or(0) })
        .collect();
    Ok((examples, labels))
}

/// Deterministic split holding out `eval_fraction` of the examples.
pub fn split_task(examples: &[TaskExample], eval_fraction: f64, seed: u64) -> (Vec<TaskExample>, Vec<TaskExample>) {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_eval = ((examples.len() as f64 * eval_fraction).round() as usize).clamp(1, examples.len().saturating_sub(1).max(1));
    let eval = order[..n_eval].iter().map(|&i| examples[i].clone()).collect();
    let train = order[n_eval..].iter().map(|&i| examples[i].clone()).collect();
    (train, eval)
}

/// `<cls> text [<sep> text2]`, truncated to `max_len`.
pub fn encode_examples(examples: &[TaskExample], tokenizer: &WordPieceModel, max_len: usize) -> Vec<Vec<TokenId>> {
    examples
        .iter()
        .map(|e| {
            let mut ids = vec![tokenizer.vocab.cls()];
            ids.extend(tokenizer.encode(&e.text));
            if let Some(t2) = &e.text2 {
                ids.push(tokenizer.vocab.sep());
                ids.extend(tokenizer.encode(t2));
            }
            ids.truncate(max_len);
            ids
        })
        .collect()
}

fn pad_batch(rows: &[&[TokenId]], pad: TokenId) -> (Vec<usize>, Vec<usize>, usize) {
    let seq = rows.iter().map(|r| r.len()).max().unwrap_or(1);
    let mut ids = Vec::with_capacity(rows.len() * seq);
    for r in rows {
        ids.extend(r.iter().map(|&t| t as usize));
        ids.extend(std::iter::repeat_n(pad as usize, seq - r.len()));
    }
    (ids, rows.iter().map(|r| r.len()).collect(), seq)
}

/// Multi-class Matthews correlation (binary MCC for two classes).
pub fn matthews_correlation(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let s = truth.len() as f64;
    let c = truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64;
    let mut t = vec![0.0; classes];
    let mut p = vec![0.0; classes];
    for (&a, &b) in truth.iter().zip(pred) {
        t[a] += 1.0;
        p[b] += 1.0;
    }
    let tp: f64 = t.iter().zip(&p).map(|(a, b)| a * b).sum();
    let den = ((s * s - p.iter().map(|x| x * x).sum::<f64>()) * (s * s - t.iter().map(|x| x * x).sum::<f64>())).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - tp) / den
    }
}

fn predict(model: &Model<f32>, rows: &[Vec<TokenId>], pad: TokenId) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(64) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(Vec::as_slice).collect();
        let (ids, lens, seq) = pad_batch(&refs, pad);
        let mut tape = Tape::new();
        let logits = model.classify(&mut tape, &ids, chunk.len(), seq, &lens, None)?;
        let c = tape.shape(logits)[1];
        for row in tape.value(logits).chunks(c) {
            let best = row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            out.push(best);
        }
    }
    Ok(out)
}

/// Finetunes a copy of `base` with a fresh linear head on `<cls>` and reports
/// accuracy and Matthews correlation on `eval`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    base: &Model<f32>,
    tokenizer: &WordPieceModel,
    train: &[TaskExample],
    eval: &[TaskExample],
    num_classes: usize,
    protocol: &FinetuneProtocol,
    seed: u64,
) -> Result<FinetuneResult> {
    protocol.validate()?;
    if train.is_empty() || eval.is_empty() {
        return Err(Error::Config("finetuning needs non-empty train and eval sets".into()));
    }
    if let Some(bad) = train.iter().chain(eval).find(|e| e.label >= num_classes) {
        return Err(Error::Config(format!("label {} outside {num_classes} classes", bad.label)));
    }
    let mut model = base.clone();
    model.set_dropout(protocol.dropout)?;
    model.add_classifier(num_classes, seed)?;
    let max_len = model.config().seq_len;
    let pad = tokenizer.vocab.pad();
    let train_rows = encode_examples(train, tokenizer, max_len);
    let eval_rows = encode_examples(eval, tokenizer, max_len);

    let steps_per_epoch = train.len().div_ceil(protocol.batch_size);
    let schedule = ScheduleConfig {
        kind: ScheduleKind::CosineDecay,
        peak_lr: protocol.lr,
        peak_fraction: 0.5,
        total_steps: steps_per_epoch * protocol.epochs,
    };
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    let mut last_loss = f64::NAN;
    for _ in 0..protocol.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(protocol.batch_size) {
            let refs: Vec<&[TokenId]> = chunk.iter().map(|&i| train_rows[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let (ids, lens, seq) = pad_batch(&refs, pad);
            let mut tape = Tape::new();
            let logits = model.classify(&mut tape, &ids, chunk.len(), seq, &lens, Some(&mut dropout_rng))?;
            let loss = tape.cross_entropy(logits, &labels)?;
            last_loss = tape.item(loss) as f64;
            if !last_loss.is_finite() {
                return Err(Error::Runtime(format!("non-finite finetuning loss at step {step}")));
            }
            model.params_mut().zero_grads();
            tape.backward_into(loss, model.params_mut())?;
            clip_gradients(model.params_mut(), protocol.optimizer.clip_norm);
            adam_step(model.params_mut(), &mut state, lr_at(step, &schedule)?, &protocol.optimizer)?;
            step += 1;
        }
    }
    let pred = predict(&model, &eval_rows, pad)?;
    let truth: Vec<usize> = eval.iter().map(|e| e.label).collect();
    let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(FinetuneResult {
        accuracy: correct as f64 / eval.len() as f64,
        matthews: matthews_correlation(&truth, &pred, num_classes),
        final_train_loss: last_loss,
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Runs [`finetune`] once per seed and reports medians.
#[allow(clippy::too_many_arguments)]
pub fn finetune_seeds(
    base: &Model<f32>,
    tokenizer: &WordPieceModel,
    train: &[TaskExample],
    eval: &[TaskExample],
    num_classes: usize,
    protocol: &FinetuneProtocol,
    seeds: &[u64],
) -> Result<SeedSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one finetuning seed is required".into()));
    }
    let per_seed = seeds
        .iter()
        .map(|&s| finetune(base, tokenizer, train, eval, num_classes, protocol, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedSummary {
        median_accuracy: median(per_seed.iter().map(|r| r.accuracy).collect()),
        median_matthews: median(per_seed.iter().map(|r| r.matthews).collect()),
        per_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matthews_extremes() {
        assert_eq!(matthews_correlation(&[0, 1, 0, 1], &[0, 1, 0, 1], 2), 1.0);
        assert_eq!(matthews_correlation(&[0, 1, 0, 1], &[1, 0, 1, 0], 2), -1.0);
        assert_eq!(matthews_correlation(&[0, 1, 0, 1], &[0, 0, 0, 0], 2), 0.0);
    }

    #[test]
    fn binary_matthews_matches_confusion_formula() {
        let truth = [1, 1, 1, 0, 0, 0, 0, 1, 0, 1];
        let pred = [1, 0, 1, 0, 0, 1, 0, 1, 1, 1];
        let (mut tp, mut tn, mut fp, mut fneg) = (0.0, 0.0, 0.0, 0.0);
        for (&t, &p) in truth.iter().zip(&pred) {
            match (t, p) {
                (1, 1) => tp += 1.0,
                (0, 0) => tn += 1.0,
                (0, 1) => fp += 1.0,
                _ => fneg += 1.0,
            }
        }
        let expect = (tp * tn - fp * fneg) / ((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg) as f64).sqrt();
        assert!((matthews_correlation(&truth, &pred, 2) - expect).abs() < 1e-12);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ex: Vec<TaskExample> =
            (0..50).map(|i| TaskExample { text: format!("t{i}"), text2: None, label: i % 2 }).collect();
        let (a, b) = split_task(&ex, 0.1, 3);
        assert_eq!((a.len(), b.len()), (45, 5));
        assert_eq!(split_task(&ex, 0.1, 3), (a.clone(), b.clone()));
        assert!(b.iter().all(|e| !a.contains(e)));
    }
}
