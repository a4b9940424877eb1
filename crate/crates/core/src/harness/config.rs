use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::{parse_bool, parse_num, ModelConfig};
use crate::trainer::{Budget, BatchRampConfig, FinetuneProtocol, MaskingConfig, OptimizerConfig, ScheduleConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerSection {
    pub vocab_size: usize,
    /// Directories of `.txt` files.
    pub inputs: Vec<PathBuf>,
    /// Entries used to train the tokenizer; 0 uses all.
    pub train_entries: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub schedule: ScheduleConfig,
    pub ramp: BatchRampConfig,
    pub optimizer: OptimizerConfig,
    pub masking: MaskingConfig,
    pub budget: Budget,
    pub seed: u64,
    /// Sequences held out of training, evenly spaced through the dataset,
    /// for the initial and final loss.
    pub eval_sequences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSection {
    pub task: Option<PathBuf>,
    /// Separate evaluation file; without one a 10% split of `task` is held out.
    pub eval: Option<PathBuf>,
    pub seeds: usize,
    pub protocol: FinetuneProtocol,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportSection {
    /// Optimizer steps between loss-curve points.
    pub curve_every: usize,
    pub device: String,
    /// Off writes zero seconds into curves so repeated runs match byte for byte.
    pub record_time: bool,
}

/// Everything one run needs. Defaults are the crammed recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub finetune: FinetuneSection,
    pub report: ReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tokenizer: TokenizerSection { vocab_size: 32768, inputs: Vec::new(), train_entries: 0 },
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection {
                schedule: ScheduleConfig::default(),
                ramp: BatchRampConfig::default(),
                optimizer: OptimizerConfig::default(),
                masking: MaskingConfig::default(),
                budget: Budget::Seconds(24.0 * 3600.0),
                seed: 0,
                eval_sequences: 256,
            },
            finetune: FinetuneSection { task: None, eval: None, seeds: 5, protocol: FinetuneProtocol::default() },
            report: ReportSection { curve_every: 10, device: "rtx2080ti".into(), record_time: true },
        }
    }
}

fn paths(v: &str) -> Vec<PathBuf> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect()
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Parses `section.key = value` lines over the defaults. `#` starts a
    /// comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `section.key = value`", n + 1)));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let Some((section, field)) = key.split_once('.') else {
            return Err(Error::Config(format!("key {key:?} lacks a section")));
        };
        let t = &mut self.train;
        let f = &mut self.finetune;
        match (section, field) {
            ("tokenizer", "vocab_size") => self.tokenizer.vocab_size = parse_num(key, v)?,
            ("tokenizer", "inputs") => self.tokenizer.inputs = paths(v),
            ("tokenizer", "train_entries") => self.tokenizer.train_entries = parse_num(key, v)?,
            ("pipeline", "t") => self.pipeline.t = parse_num(key, v)?,
            ("pipeline", "dedup_min_len") => {
                self.pipeline.dedup_min_len = if v == "off" { None } else { Some(parse_num(key, v)?) }
            }
            ("pipeline", "sort") => self.pipeline.sort = parse_bool(key, v)?,
            ("pipeline", "shuffle_seed") => self.pipeline.shuffle_seed = parse_num(key, v)?,
            ("pipeline", "seq_len") => self.pipeline.seq_len = parse_num(key, v)?,
            ("model", k) => self.model.set(k, v)?,
            ("train", "schedule") => t.schedule.kind = v.parse()?,
            ("train", "peak_lr") => t.schedule.peak_lr = parse_num(key, v)?,
            ("train", "peak_fraction") => t.schedule.peak_fraction = parse_num(key, v)?,
            ("train", "micro_batch") => t.ramp.micro_batch = parse_num(key, v)?,
            ("train", "final_batch") => t.ramp.final_batch = parse_num(key, v)?,
            ("train", "ramp_end_fraction") => t.ramp.ramp_end_fraction = parse_num(key, v)?,
            ("train", "beta1") => t.optimizer.beta1 = parse_num(key, v)?,
            ("train", "beta2") => t.optimizer.beta2 = parse_num(key, v)?,
            ("train", "eps") => t.optimizer.eps = parse_num(key, v)?,
            ("train", "weight_decay") => t.optimizer.weight_decay = parse_num(key, v)?,
            ("train", "clip_norm") => t.optimizer.clip_norm = parse_num(key, v)?,
            ("train", "mask_rate") => t.masking.rate = parse_num(key, v)?,
            ("train", "mask_p_mask") => t.masking.p_mask = parse_num(key, v)?,
            ("train", "mask_p_random") => t.masking.p_random = parse_num(key, v)?,
            ("train", "mask_p_keep") => t.masking.p_keep = parse_num(key, v)?,
            ("train", "budget_steps") => t.budget = Budget::Steps(parse_num(key, v)?),
            ("train", "budget_hours") => t.budget = Budget::Seconds(parse_num::<f64>(key, v)? * 3600.0),
            ("train", "seed") => t.seed = parse_num(key, v)?,
            ("train", "eval_sequences") => t.eval_sequences = parse_num(key, v)?,
            ("finetune", "task") => f.task = opt_path(v),
            ("finetune", "eval") => f.eval = opt_path(v),
            ("finetune", "seeds") => f.seeds = parse_num(key, v)?,
            ("finetune", "epochs") => f.protocol.epochs = parse_num(key, v)?,
            ("finetune", "batch_size") => f.protocol.batch_size = parse_num(key, v)?,
            ("finetune", "lr") => f.protocol.lr = parse_num(key, v)?,
            ("finetune", "dropout") => f.protocol.dropout = parse_num(key, v)?,
            ("report", "curve_every") => self.report.curve_every = parse_num(key, v)?,
            ("report", "device") => self.report.device = v.to_string(),
            ("report", "record_time") => self.report.record_time = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let t = &self.train;
        let f = &self.finetune;
        let budget = match t.budget {
            Budget::Steps(n) => ("train.budget_steps", n.to_string()),
            Budget::Seconds(s) => ("train.budget_hours", (s / 3600.0).to_string()),
        };
        let head: Vec<(&str, String)> = vec![
            ("tokenizer.vocab_size", self.tokenizer.vocab_size.to_string()),
            (
                "tokenizer.inputs",
                self.tokenizer.inputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            ),
            ("tokenizer.train_entries", self.tokenizer.train_entries.to_string()),
            ("pipeline.t", self.pipeline.t.to_string()),
            ("pipeline.dedup_min_len", self.pipeline.dedup_min_len.map_or("off".into(), |l| l.to_string())),
            ("pipeline.sort", self.pipeline.sort.to_string()),
            ("pipeline.shuffle_seed", self.pipeline.shuffle_seed.to_string()),
            ("pipeline.seq_len", self.pipeline.seq_len.to_string()),
        ];
        let model: Vec<(String, String)> =
            self.model.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        let rest: Vec<(&str, String)> = vec![
            ("train.schedule", t.schedule.kind.to_string()),
            ("train.peak_lr", format!("{:e}", t.schedule.peak_lr)),
            ("train.peak_fraction", t.schedule.peak_fraction.to_string()),
            ("train.micro_batch", t.ramp.micro_batch.to_string()),
            ("train.final_batch", t.ramp.final_batch.to_string()),
            ("train.ramp_end_fraction", t.ramp.ramp_end_fraction.to_string()),
            ("train.beta1", t.optimizer.beta1.to_string()),
            ("train.beta2", t.optimizer.beta2.to_string()),
            ("train.eps", format!("{:e}", t.optimizer.eps)),
            ("train.weight_decay", t.optimizer.weight_decay.to_string()),
            ("train.clip_norm", t.optimizer.clip_norm.to_string()),
            ("train.mask_rate", t.masking.rate.to_string()),
            ("train.mask_p_mask", t.masking.p_mask.to_string()),
            ("train.mask_p_random", t.masking.p_random.to_string()),
            ("train.mask_p_keep", t.masking.p_keep.to_string()),
            budget,
            ("train.seed", t.seed.to_string()),
            ("train.eval_sequences", t.eval_sequences.to_string()),
            ("finetune.task", show_path(&f.task)),
            ("finetune.eval", show_path(&f.eval)),
            ("finetune.seeds", f.seeds.to_string()),
            ("finetune.epochs", f.protocol.epochs.to_string()),
            ("finetune.batch_size", f.protocol.batch_size.to_string()),
            ("finetune.lr", format!("{:e}", f.protocol.lr)),
            ("finetune.dropout", f.protocol.dropout.to_string()),
            ("report.curve_every", self.report.curve_every.to_string()),
            ("report.device", self.report.device.clone()),
            ("report.record_time", self.report.record_time.to_string()),
        ];
        let mut out: Vec<(String, String)> = head.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        out.extend(model);
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        out
    }

    /// Text form accepted by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pipeline.validate()?;
        self.train.schedule.validate()?;
        self.train.ramp.validate()?;
        self.train.optimizer.validate()?;
        self.train.masking.validate()?;
        self.finetune.protocol.validate()?;
        if self.tokenizer.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer.vocab_size {} differs from model.vocab_size {}",
                self.tokenizer.vocab_size, self.model.vocab_size
            )));
        }
        if self.pipeline.seq_len == 0 || self.pipeline.seq_len > self.model.seq_len {
            return Err(Error::Config(format!(
                "pipeline.seq_len {} must be in 1..={}",
                self.pipeline.seq_len, self.model.seq_len
            )));
        }
        if self.finetune.seeds == 0 || self.report.curve_every == 0 {
            return Err(Error::Config("finetune.seeds and report.curve_every must be positive".into()));
        }
        Ok(())
    }

    /// Lists referenced files that do not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.tokenizer
            .inputs
            .iter()
            .chain(&self.finetune.task)
            .chain(&self.finetune.eval)
            .filter(|p| !p.exists())
            .cloned()
            .collect()
    }

    /// Applies `overrides` in order to a copy and validates the result.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = self.clone();
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The `tokenizer.*` and `pipeline.*` entries, which alone determine the
    /// prepared dataset for a given corpus.
    pub fn data_key(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| k.starts_with("tokenizer.") || k.starts_with("pipeline."))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

/// Keys whose values differ, as `(key, left, right)`.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<(String, String, String)> {
    let mut left = a.entries();
    let mut right = b.entries();
    // A budget given in steps on one side and hours on the other shows both keys.
    for (side, other) in [(&mut left, &b.entries()), (&mut right, &a.entries())] {
        for (k, _) in other {
            if !side.iter().any(|(sk, _)| sk == k) {
                side.push((k.clone(), "-".into()));
            }
        }
    }
    left.iter()
        .filter_map(|(k, va)| {
            let vb = &right.iter().find(|(kb, _)| kb == k)?.1;
            (va != vb).then(|| (k.clone(), va.clone(), vb.clone()))
        })
        .collect()
}

type Overrides = Vec<(String, String)>;

fn pairs(list: &[(&str, &str)]) -> Overrides {
    list.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

const ORIGINAL_TRAIN: &[(&str, &str)] = &[
    ("train.schedule", "one_cycle"),
    ("train.peak_fraction", "0.01"),
    ("train.peak_lr", "1e-4"),
    ("train.ramp_end_fraction", "0"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-6"),
    ("train.clip_norm", "1.0"),
    ("model.dropout_rate", "0.1"),
];

const ORIGINAL_ARCH: &[(&str, &str)] = &[
    ("model.norm_placement", "post"),
    ("model.qkv_bias", "true"),
    ("model.linear_bias", "true"),
    ("model.decoder_bias", "true"),
    ("model.nonlinear_head", "true"),
    ("model.sparse_prediction", "false"),
    ("model.embedding_kind", "learned"),
    ("model.ffn_kind", "gelu"),
    ("model.final_norm", "false"),
];

/// Named preset groups accepted by [`preset`].
pub const PRESETS: &[&str] = &[
    "crammed",
    "original-data",
    "original-train",
    "original-arch",
    "minimal-train",
    "minimal-arch",
    "post-ln",
    "rotary",
    "learned-positions",
    "gelu-ffn",
    "biases",
    "nonlinear-head",
    "dense-prediction",
    "no-final-norm",
    "untied",
    "layer-norm-eps",
    "vocab-4096",
    "vocab-8192",
    "vocab-16384",
    "vocab-32768",
];

/// Overrides for a named ablation. The first six mirror the ablation table
/// rows: one group reset to the original recipe, or reset with the minimal
/// modifications that make it trainable. The rest toggle a single choice or
/// sweep the vocabulary size.
pub fn preset(name: &str) -> Result<Overrides> {
    let single = |k: &str, v: &str| Ok(pairs(&[(k, v)]));
    match name {
        "crammed" => Ok(Vec::new()),
        "original-data" => {
            Ok(pairs(&[("pipeline.t", "inf"), ("pipeline.dedup_min_len", "off"), ("pipeline.sort", "false")]))
        }
        "original-train" => Ok(pairs(ORIGINAL_TRAIN)),
        "original-arch" => Ok(pairs(ORIGINAL_ARCH)),
        "minimal-train" => {
            let mut o = pairs(ORIGINAL_TRAIN);
            o.extend(pairs(&[("model.dropout_rate", "0"), ("train.schedule", "cosine_decay")]));
            Ok(o)
        }
        "minimal-arch" => {
            let mut o = pairs(ORIGINAL_ARCH);
            o.extend(pairs(&[
                ("model.norm_placement", "pre"),
                ("model.sparse_prediction", "true"),
                ("model.layer_norm_eps", "1e-6"),
            ]));
            Ok(o)
        }
        "post-ln" => single("model.norm_placement", "post"),
        "rotary" => single("model.embedding_kind", "rotary"),
        "learned-positions" => single("model.embedding_kind", "learned"),
        "gelu-ffn" => single("model.ffn_kind", "gelu"),
        "biases" => Ok(pairs(&[("model.qkv_bias", "true"), ("model.linear_bias", "true"), ("model.decoder_bias", "true")])),
        "nonlinear-head" => single("model.nonlinear_head", "true"),
        "dense-prediction" => single("model.sparse_prediction", "false"),
        "no-final-norm" => single("model.final_norm", "false"),
        "untied" => single("model.tie_embeddings", "false"),
        "layer-norm-eps" => single("model.layer_norm_eps", "1e-6"),
        _ => {
            if let Some(v) = name.strip_prefix("vocab-") {
                let size: usize = parse_num("vocab preset", v)?;
                return Ok(vec![
                    ("tokenizer.vocab_size".into(), size.to_string()),
                    ("model.vocab_size".into(), size.to_string()),
                ]);
            }
            Err(Error::Config(format!("unknown preset {name:?}; known: {}", PRESETS.join(", "))))
        }
    }
}
