use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use super::config::RunConfig;
use crate::corpus::{prepare, read_text_dir, write_dataset, PackedDataset, PrepareReport, RawEntry};
use crate::error::{Error, Result};
use crate::model::{param_count, Model};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::tokenizer::{train_wordpiece, TokenId, WordPieceModel};
use crate::trainer::{
    eval_loss, finetune_seeds, pretrain, read_task, split_task, LossCurve, PretrainConfig, PretrainOutcome,
    SeedSummary, StopReason,
};

pub const CONFIG_FILE: &str = "config.cfg";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const DATA_FILE: &str = "data.bin";
pub const CURVE_FILE: &str = "curve.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EVAL_BATCH: usize = 64;

/// Tokenizer plus training and held-out sequences for one data configuration.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub tokenizer: WordPieceModel,
    pub train: PackedDataset,
    pub eval: Vec<Vec<TokenId>>,
    pub report: PrepareReport,
}

impl PreparedData {
    /// Hash of the training sequences and their shape.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        (self.train.seq_len(), self.train.vocab_size(), self.train.ids()).hash(&mut h);
        self.eval.hash(&mut h);
        h.finish()
    }
}

/// Reads every configured input directory.
pub fn load_corpus(cfg: &RunConfig) -> Result<Vec<RawEntry>> {
    if cfg.tokenizer.inputs.is_empty() {
        return Err(Error::Config("tokenizer.inputs names no corpus directory".into()));
    }
    let mut raw = Vec::new();
    for dir in &cfg.tokenizer.inputs {
        raw.extend(read_text_dir(dir)?);
    }
    Ok(raw)
}

pub fn train_tokenizer(cfg: &RunConfig, raw: &[RawEntry]) -> Result<WordPieceModel> {
    let n = if cfg.tokenizer.train_entries == 0 { raw.len() } else { cfg.tokenizer.train_entries.min(raw.len()) };
    train_wordpiece(raw[..n].iter().map(|e| e.text.as_str()), cfg.tokenizer.vocab_size)
}

/// Moves `n` evenly spaced sequences out of `ds`.
pub fn split_eval(ds: &PackedDataset, n: usize) -> Result<(PackedDataset, Vec<Vec<TokenId>>)> {
    if n == 0 {
        return Ok((ds.clone(), Vec::new()));
    }
    if 2 * n > ds.len() {
        return Err(Error::Config(format!("{n} held-out sequences leave too little of {} to train on", ds.len())));
    }
    let stride = ds.len() / n;
    let mut train = Vec::with_capacity(ds.ids().len());
    let mut eval = Vec::with_capacity(n);
    for i in 0..ds.len() {
        if i % stride == stride - 1 && eval.len() < n {
            eval.push(ds.sequence(i).to_vec());
        } else {
            train.extend_from_slice(ds.sequence(i));
        }
    }
    Ok((PackedDataset::new(train, ds.seq_len(), ds.vocab_size())?, eval))
}

/// Tokenizer training, the curation pipeline and the held-out split.
pub fn prepare_data(cfg: &RunConfig, raw: &[RawEntry]) -> Result<PreparedData> {
    let tokenizer = train_tokenizer(cfg, raw)?;
    prepare_with(cfg, raw, tokenizer)
}

/// As [`prepare_data`] with an already trained tokenizer.
pub fn prepare_with(cfg: &RunConfig, raw: &[RawEntry], tokenizer: WordPieceModel) -> Result<PreparedData> {
    let (ds, report) = prepare(raw, &tokenizer, &cfg.pipeline)?;
    let (train, eval) = split_eval(&ds, cfg.train.eval_sequences)?;
    Ok(PreparedData { tokenizer, train, eval, report })
}

pub fn pretrain_config(cfg: &RunConfig) -> PretrainConfig {
    PretrainConfig {
        masking: cfg.train.masking.clone(),
        optimizer: cfg.train.optimizer.clone(),
        schedule: cfg.train.schedule.clone(),
        ramp: cfg.train.ramp.clone(),
        budget: cfg.train.budget,
        seed: cfg.train.seed,
        curve_every: cfg.report.curve_every,
        record_time: cfg.report.record_time,
        ..PretrainConfig::default()
    }
}

fn held_out_loss(model: &Model<f32>, cfg: &RunConfig, data: &PreparedData) -> Result<Option<f64>> {
    if data.eval.is_empty() {
        return Ok(None);
    }
    let refs: Vec<&[TokenId]> = data.eval.iter().map(Vec::as_slice).collect();
    let seed = cfg.train.seed ^ 0x5eed;
    eval_loss(model, &refs, &data.tokenizer.vocab, &cfg.train.masking, EVAL_BATCH, seed).map(Some)
}

/// Finetunes on the configured task, if any.
pub fn run_finetune(cfg: &RunConfig, model: &Model<f32>, tokenizer: &WordPieceModel) -> Result<Option<SeedSummary>> {
    let Some(task) = &cfg.finetune.task else { return Ok(None) };
    let (examples, labels) = read_task(task)?;
    let (train, eval) = match &cfg.finetune.eval {
        Some(path) => {
            let (eval, eval_labels) = read_task(path)?;
            if eval_labels != labels {
                return Err(Error::Config(format!("{} uses different labels from {}", path.display(), task.display())));
            }
            (examples, eval)
        }
        None => split_task(&examples, 0.1, cfg.train.seed),
    };
    let seeds: Vec<u64> = (0..cfg.finetune.seeds as u64).collect();
    finetune_seeds(model, tokenizer, &train, &eval, labels.len(), &cfg.finetune.protocol, &seeds).map(Some)
}

/// Scalar results of one run, stored as `metrics.txt`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub param_count: usize,
    pub steps: usize,
    pub samples: usize,
    pub tokens: u64,
    pub seconds: f64,
    pub stop: String,
    /// Held-out loss before training.
    pub initial_loss: Option<f64>,
    /// Held-out loss after training, or the last curve point without a
    /// held-out set.
    pub final_loss: f64,
    pub finetune_accuracy: Option<f64>,
    pub finetune_matthews: Option<f64>,
    pub dataset_fingerprint: u64,
}

impl RunMetrics {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".into(), |v| v.to_string());
        let mut s = String::new();
        for (k, v) in [
            ("param_count", self.param_count.to_string()),
            ("steps", self.steps.to_string()),
            ("samples", self.samples.to_string()),
            ("tokens", self.tokens.to_string()),
            ("seconds", self.seconds.to_string()),
            ("stop", self.stop.clone()),
            ("initial_loss", opt(self.initial_loss)),
            ("final_loss", self.final_loss.to_string()),
            ("finetune_accuracy", opt(self.finetune_accuracy)),
            ("finetune_matthews", opt(self.finetune_matthews)),
            ("dataset_fingerprint", format!("{:016x}", self.dataset_fingerprint)),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("run metrics", d);
        let mut m = RunMetrics::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{k}: bad number {v:?}")));
            let opt = |v: &str| if v == "none" { Ok(None) } else { num(v).map(Some) };
            let int = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{k}: bad integer {v:?}")));
            match k {
                "param_count" => m.param_count = int(v)? as usize,
                "steps" => m.steps = int(v)? as usize,
                "samples" => m.samples = int(v)? as usize,
                "tokens" => m.tokens = int(v)?,
                "seconds" => m.seconds = num(v)?,
                "stop" => m.stop = v.to_string(),
                "initial_loss" => m.initial_loss = opt(v)?,
                "final_loss" => m.final_loss = num(v)?,
                "finetune_accuracy" => m.finetune_accuracy = opt(v)?,
                "finetune_matthews" => m.finetune_matthews = opt(v)?,
                "dataset_fingerprint" => {
                    m.dataset_fingerprint = u64::from_str_radix(v, 16).map_err(|_| bad(format!("bad fingerprint {v:?}")))?
                }
                _ => return Err(bad(format!("unknown key {k:?}"))),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub outcome: PretrainOutcome,
    pub finetune: Option<SeedSummary>,
    pub metrics: RunMetrics,
}

impl RunResult {
    pub fn curve(&self) -> &LossCurve {
        &self.outcome.curve
    }
}

/// Builds, pretrains, evaluates and optionally finetunes one model on
/// already prepared data.
pub fn train_run(cfg: &RunConfig, data: &PreparedData) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = Model::<f32>::build(&cfg.model, cfg.train.seed)?;
    let initial_loss = held_out_loss(&model, cfg, data)?;
    let outcome = pretrain(&mut model, &data.train, &data.tokenizer.vocab, &pretrain_config(cfg))?;
    let final_loss = match held_out_loss(&model, cfg, data)? {
        Some(l) => l,
        None => outcome.curve.last_loss().ok_or_else(|| Error::Runtime("run finished without a loss point".into()))?,
    };
    let finetune = run_finetune(cfg, &model, &data.tokenizer)?;
    let metrics = RunMetrics {
        param_count: param_count(&cfg.model),
        steps: outcome.steps,
        samples: outcome.samples,
        tokens: (outcome.samples * data.train.seq_len()) as u64,
        seconds: if cfg.report.record_time { outcome.seconds } else { 0.0 },
        stop: match outcome.stop {
            StopReason::Budget => "budget".into(),
            StopReason::DataExhausted => "data_exhausted".into(),
        },
        initial_loss,
        final_loss,
        finetune_accuracy: finetune.as_ref().map(|f| f.median_accuracy),
        finetune_matthews: finetune.as_ref().map(|f| f.median_matthews),
        dataset_fingerprint: data.fingerprint(),
    };
    Ok(RunResult { config: cfg.clone(), model, outcome, finetune, metrics })
}

/// Writes the run directory: config, vocabulary, training data, curve,
/// metrics and checkpoint.
pub fn save_run(dir: &Path, result: &RunResult, data: &PreparedData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    result.config.save(&dir.join(CONFIG_FILE))?;
    data.tokenizer.save(&dir.join(VOCAB_FILE))?;
    write_dataset(&dir.join(DATA_FILE), &data.train)?;
    result.outcome.curve.save(&dir.join(CURVE_FILE))?;
    let mpath = dir.join(METRICS_FILE);
    fs::write(&mpath, result.metrics.to_text()).map_err(|e| Error::io(&mpath, e))?;
    save_model(&dir.join(CHECKPOINT_DIR), &result.model, &data.tokenizer)
}

/// Checkpoint directory with the vocabulary alongside, so it is self-contained.
pub fn save_model(dir: &Path, model: &Model<f32>, tokenizer: &WordPieceModel) -> Result<()> {
    save_checkpoint(dir, model.params(), &model.config_lines())?;
    tokenizer.save(&dir.join(VOCAB_FILE))
}

pub fn load_model(dir: &Path) -> Result<(Model<f32>, WordPieceModel)> {
    let ck = load_checkpoint(dir)?;
    let cfg = crate::model::ModelConfig::from_lines(&ck.config)?;
    let model = Model::from_params(&cfg, ck.params)?;
    let tokenizer = WordPieceModel::load(&dir.join(VOCAB_FILE))?;
    if tokenizer.vocab.len() != cfg.vocab_size {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} tokens, model expects {}",
            tokenizer.vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok((model, tokenizer))
}

/// Prepares data and trains one configuration, writing the run directory
/// when `out` is given.
pub fn execute_run(cfg: &RunConfig, raw: &[RawEntry], out: Option<&Path>) -> Result<RunResult> {
    let data = prepare_data(cfg, raw)?;
    let result = train_run(cfg, &data)?;
    if let Some(dir) = out {
        save_run(dir, &result, &data)?;
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub overrides: Vec<(String, String)>,
    /// Metrics, or the reason the row failed.
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:width$}  {:>10}  {:>10}  {:>10}  {:>12}\n", "row", "final loss", "init loss", "downstream", "tokens");
        for r in &self.rows {
            match &r.outcome {
                Ok(m) => {
                    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                    let _ = writeln!(
                        s,
                        "{:width$}  {:>10.4}  {:>10}  {:>10}  {:>12}",
                        r.name,
                        m.final_loss,
                        opt(m.initial_loss),
                        opt(m.finetune_accuracy),
                        m.tokens
                    );
                }
                Err(e) => {
                    let _ = writeln!(s, "{:width$}  failed: {e}", r.name);
                }
            }
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,status,final_loss,initial_loss,downstream,tokens,steps,overrides\n");
        for r in &self.rows {
            let ov = r.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";");
            match &r.outcome {
                Ok(m) => {
                    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                    let _ = writeln!(
                        s,
                        "{},ok,{},{},{},{},{},{}",
                        r.name,
                        m.final_loss,
                        opt(m.initial_loss),
                        opt(m.finetune_accuracy),
                        m.tokens,
                        m.steps,
                        ov
                    );
                }
                Err(_) => {
                    let _ = writeln!(s, "{},failed,,,,,,{}", r.name, ov);
                }
            }
        }
        s
    }
}

/// Runs `base` and then each named override set with the same seed and
/// budget. Rows that share tokenizer and pipeline settings share one prepared
/// dataset. A failing row is recorded and the rest proceed. When `out` is
/// given each row writes a run directory under it.
pub fn run_ablation(
    base: &RunConfig,
    matrix: &[(String, Vec<(String, String)>)],
    raw: &[RawEntry],
    out: Option<&Path>,
) -> AblationTable {
    let mut prepared: HashMap<String, std::result::Result<PreparedData, String>> = HashMap::new();
    let rows = std::iter::once(("base".to_string(), Vec::new())).chain(matrix.iter().cloned());
    let mut table = AblationTable::default();
    for (name, overrides) in rows {
        let outcome = (|| -> std::result::Result<RunMetrics, String> {
            let cfg = base.with_overrides(&overrides).map_err(|e| e.to_string())?;
            let data = prepared
                .entry(cfg.data_key())
                .or_insert_with(|| prepare_data(&cfg, raw).map_err(|e| e.to_string()))
                .as_ref()
                .map_err(Clone::clone)?;
            let result = train_run(&cfg, data).map_err(|e| e.to_string())?;
            if let Some(dir) = out {
                save_run(&dir.join(&name), &result, data).map_err(|e| e.to_string())?;
            }
            Ok(result.metrics)
        })();
        table.rows.push(AblationRow { name, overrides, outcome });
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let m = RunMetrics {
            param_count: 10,
            steps: 3,
            samples: 48,
            tokens: 3072,
            seconds: 1.25,
            stop: "budget".into(),
            initial_loss: Some(8.5),
            final_loss: 6.0,
            finetune_accuracy: None,
            finetune_matthews: Some(0.5),
            dataset_fingerprint: 0xdead_beef,
        };
        assert_eq!(RunMetrics::parse(&m.to_text()).unwrap(), m);
    }

    #[test]
    fn eval_split_is_spread_and_disjoint() {
        let ids: Vec<TokenId> = (0..40).collect();
        let ds = PackedDataset::new(ids, 2, 40).unwrap();
        let (train, eval) = split_eval(&ds, 4).unwrap();
        assert_eq!(train.len(), 16);
        assert_eq!(eval, vec![vec![8, 9], vec![18, 19], vec![28, 29], vec![38, 39]]);
        assert!(split_eval(&ds, 11).is_err());
    }
}
