use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cramming::corpus::synth::{SynthConfig, SynthCorpus};

fn cram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cram")).args(args).output().expect("run cram")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> String {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const CONFIG: &str = "\
tokenizer.vocab_size = 400
model.vocab_size = 400
model.num_layers = 1
model.hidden_dim = 32
model.num_heads = 2
model.ffn_dim = 64
model.seq_len = 32
pipeline.seq_len = 32
pipeline.t = 1.0
train.micro_batch = 4
train.final_batch = 8
train.budget_steps = 6
train.eval_sequences = 8
report.curve_every = 1
report.record_time = false
";

/// Corpus directory plus a config file pointing at it.
fn workspace(root: &Path) -> String {
    let corpus = root.join("corpus");
    fs::create_dir_all(&corpus).unwrap();
    let docs = SynthCorpus::new(SynthConfig::default()).documents(150, 3);
    fs::write(corpus.join("a.txt"), docs.join("\n\n")).unwrap();
    let cfg = root.join("run.cfg");
    fs::write(&cfg, format!("{CONFIG}tokenizer.inputs = {}\n", corpus.display())).unwrap();
    cfg.display().to_string()
}

#[test]
fn end_to_end_verbs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = workspace(root);
    let p = |name: &str| root.join(name).display().to_string();

    let out = ok(cram(&["tokenize-train", "--input", &p("corpus"), "--vocab-size", "400", "--out", &p("vocab.txt")]));
    assert!(out.contains("trained 400 tokens"));
    assert_eq!(fs::read_to_string(root.join("vocab.txt")).unwrap().lines().count(), 400);

    let out = ok(cram(&["prepare", "--config", &cfg, "--tokenizer", &p("vocab.txt"), "--out", &p("data.bin")]));
    assert!(out.contains("sequences"));

    ok(cram(&["pretrain", "--config", &cfg, "--data", &p("data.bin"), "--budget-steps", "4", "--out", &p("run")]));
    for f in ["config.cfg", "curve.csv", "metrics.txt", "vocab.txt", "checkpoint/params.bin", "checkpoint/manifest.txt"] {
        assert!(root.join("run").join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(root.join("run/metrics.txt")).unwrap();
    assert!(metrics.contains("steps = 4"), "{metrics}");

    let out = ok(cram(&["report", "--run", &p("run"), "--out", &p("report")]));
    assert!(out.contains("## Throughput"));
    assert!(root.join("report/report.txt").exists());

    // Four curve points are too few for a fit: analysis failure.
    let o = cram(&["fit-scaling", "--curve", &p("run/curve.csv")]);
    assert_eq!(code(&o), 3);

    let mut curve = String::from("step,tokens,lr,loss,seconds\n");
    for i in 1..=40 {
        let n = 1000.0 * i as f64;
        curve.push_str(&format!("{i},{n},0.001,{},0\n", 2.0 + 5.0 * f64::powf(n, -0.4)));
    }
    fs::write(root.join("law.csv"), curve).unwrap();
    let out = ok(cram(&["fit-scaling", "--curve", &p("law.csv"), "--curve", &p("law.csv")]));
    assert!(out.contains("shift"), "{out}");
    assert!(out.contains("1.0000x"), "{out}");

    let mut task = String::new();
    for i in 0..40 {
        task.push_str(&format!("{}\t{}\n", if i % 2 == 0 { "the red cat sat" } else { "a blue dog ran" }, i % 2));
    }
    fs::write(root.join("task.tsv"), task).unwrap();
    let out = ok(cram(&[
        "finetune", "--checkpoint", &p("run/checkpoint"), "--task", &p("task.tsv"), "--seeds", "2", "--epochs", "1",
    ]));
    assert!(out.contains("median accuracy"), "{out}");

    let out = ok(cram(&["ablate", "--config", &cfg, "--preset", "post-ln", "--out", &p("abl")]));
    assert!(out.contains("post-ln"));
    assert!(root.join("abl/ablation.csv").exists());
    assert!(root.join("abl/post-ln/curve.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).display().to_string();

    // Usage errors and configuration errors exit 1.
    assert_eq!(code(&cram(&["pretrain"])), 1);
    assert_eq!(code(&cram(&["no-such-verb"])), 1);
    fs::write(root.join("bad.cfg"), "model.widgets = 3\n").unwrap();
    assert_eq!(code(&cram(&["ablate", "--config", &p("bad.cfg")])), 1);
    fs::write(root.join("missing.cfg"), "tokenizer.inputs = /definitely/not/here\n").unwrap();
    let o = cram(&["ablate", "--config", &p("missing.cfg")]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("/definitely/not/here"));

    // Missing run artifacts are an analysis failure.
    fs::create_dir_all(root.join("empty")).unwrap();
    let o = cram(&["report", "--run", &p("empty"), "--out", &p("r")]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("curve.csv"));

    // Malformed dataset file.
    fs::write(root.join("junk.bin"), b"nope").unwrap();
    fs::write(root.join("vocab.txt"), "<pad>\n<unk>\n<cls>\n<sep>\n<mask>\na\n").unwrap();
    assert_eq!(code(&cram(&["pretrain", "--data", &p("junk.bin"), "--out", &p("x")])), 1);

    assert_eq!(code(&cram(&["--help"])), 0);
}

#[test]
fn failing_ablation_row_exits_nonzero_but_writes_the_table() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = workspace(root);
    // A 32768-token vocabulary needs far more text than this corpus.
    let o = cram(&["ablate", "--config", &cfg, "--preset", "vocab-32768", "--out", &root.join("abl").display().to_string()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(root.join("abl/ablation.csv")).unwrap();
    assert!(csv.contains("base,ok"));
    assert!(csv.contains("vocab-32768,failed"));
}
