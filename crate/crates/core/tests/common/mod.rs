#![allow(dead_code)]

use std::path::Path;

use cramming::corpus::synth::{SynthConfig, SynthCorpus};
use cramming::harness::RunConfig;

/// Writes `docs` into `dir/corpus.txt`, one blank line between documents.
pub fn write_corpus(dir: &Path, docs: &[String]) {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("corpus.txt"), docs.join("\n\n")).unwrap();
}

pub fn synth_docs(n: usize, seed: u64) -> Vec<String> {
    SynthCorpus::new(SynthConfig::default()).documents(n, seed)
}

/// A run small enough to train in a second: one layer, width 32, 8 steps.
pub fn tiny_run(corpus_dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("tokenizer.vocab_size", "400"),
        ("model.vocab_size", "400"),
        ("model.num_layers", "1"),
        ("model.hidden_dim", "32"),
        ("model.num_heads", "2"),
        ("model.ffn_dim", "64"),
        ("model.seq_len", "32"),
        ("pipeline.seq_len", "32"),
        ("pipeline.t", "1.0"),
        ("pipeline.dedup_min_len", "16"),
        ("train.micro_batch", "4"),
        ("train.final_batch", "8"),
        ("train.budget_steps", "8"),
        ("train.eval_sequences", "8"),
        ("report.curve_every", "1"),
        ("report.record_time", "false"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.tokenizer.inputs = vec![corpus_dir.to_path_buf()];
    cfg
}
