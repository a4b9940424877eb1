use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cramming::budget::{find_device, load_devices, DeviceSpec};
use cramming::corpus::{read_dataset, read_text_dir, write_dataset, PrepareReport, RawEntry};
use cramming::harness::{
    default_burn_in, emit_report, estimate_shift, fit_power_law, load_model, preset, report_artifacts,
    run_ablation, save_run, split_eval, train_run, PreparedData, RunArtifacts, RunConfig, VOCAB_FILE,
};
use cramming::tokenizer::{train_wordpiece, WordPieceModel};
use cramming::trainer::{finetune_seeds, read_task, split_task, Budget, FinetuneProtocol, LossCurve};
use cramming::{Error, Result};

#[derive(Parser)]
#[command(name = "cram", version, about = "Desk-scale masked language model pretraining lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a WordPiece vocabulary on directories of .txt files.
    TokenizeTrain(TokenizeTrain),
    /// Tokenize, filter, deduplicate, pack and sort a corpus into a dataset file.
    Prepare(Prepare),
    /// Pretrain a model on a prepared dataset and write a run directory.
    Pretrain(Pretrain),
    /// Finetune a pretrained checkpoint on a tab-separated classification task.
    Finetune(Finetune),
    /// Run the base configuration and a list of ablation presets.
    Ablate(Ablate),
    /// Fit power laws to loss curves and estimate the token shift between two.
    FitScaling(FitScaling),
    /// Summarize run directories or a single curve.
    Report(Report),
}

#[derive(Args)]
struct TokenizeTrain {
    #[arg(long = "input", required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 32768)]
    vocab_size: usize,
    /// Paragraphs used for training; 0 uses all.
    #[arg(long, default_value_t = 0)]
    train_entries: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Prepare {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tokenizer: PathBuf,
    /// Corpus directories; defaults to `tokenizer.inputs` from the config.
    #[arg(long = "input")]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Vocabulary file; defaults to vocab.txt beside the dataset.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long, conflicts_with = "budget_steps")]
    budget_hours: Option<f64>,
    #[arg(long)]
    budget_steps: Option<usize>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct Finetune {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    task: PathBuf,
    /// Separate evaluation file; otherwise 10% of the task is held out.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Batch 32 and learning rate 2e-5 instead of 16 and 4e-5.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct Ablate {
    #[arg(long)]
    config: PathBuf,
    /// Preset rows to run after the base row.
    #[arg(long = "preset")]
    presets: Vec<String>,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args)]
struct FitScaling {
    #[arg(long = "curve", required = true, num_args = 1..=2)]
    curves: Vec<PathBuf>,
    /// Fraction of each curve's tokens excluded from fits.
    #[arg(long, default_value_t = 0.1)]
    burn_in_fraction: f64,
}

#[derive(Args)]
struct Report {
    /// Run directories written by `pretrain` or `ablate`.
    #[arg(long = "run")]
    runs: Vec<PathBuf>,
    /// A loss curve to report on without a run directory.
    #[arg(long, conflicts_with = "runs")]
    curve: Option<PathBuf>,
    #[arg(long, requires = "curve")]
    config: Option<PathBuf>,
    #[arg(long)]
    device: Option<String>,
    /// Extra `name tflops` table consulted before the shipped one.
    #[arg(long)]
    devices: Option<PathBuf>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let missing = cfg.missing_files();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Config(format!("configured files do not exist: {}", list.join(", "))));
    }
    Ok(cfg)
}

fn read_inputs(dirs: &[PathBuf]) -> Result<Vec<RawEntry>> {
    let mut raw = Vec::new();
    for d in dirs {
        raw.extend(read_text_dir(d)?);
    }
    if raw.is_empty() {
        return Err(Error::Config("no text found in the input directories".into()));
    }
    Ok(raw)
}

fn tokenize_train(a: TokenizeTrain) -> Result<()> {
    let raw = read_inputs(&a.inputs)?;
    let n = if a.train_entries == 0 { raw.len() } else { a.train_entries.min(raw.len()) };
    let model = train_wordpiece(raw[..n].iter().map(|e| e.text.as_str()), a.vocab_size)?;
    model.save(&a.out)?;
    println!("trained {} tokens on {n} paragraphs -> {}", model.vocab.len(), a.out.display());
    Ok(())
}

fn print_prepare(r: &PrepareReport) {
    println!(
        "entries {} (empty {}, filtered {}), dedup removed {} tokens, packed {} entries into {} sequences, mean tokens/char {:.4}",
        r.raw_entries,
        r.empty_entries,
        r.filtered_entries,
        r.dedup_removed_tokens,
        r.packed_entries,
        r.sequences,
        r.mean_compression_ratio
    );
}

fn prepare(a: Prepare) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let dirs = if a.inputs.is_empty() { cfg.tokenizer.inputs.clone() } else { a.inputs };
    let raw = read_inputs(&dirs)?;
    let tokenizer = WordPieceModel::load(&a.tokenizer)?;
    let (ds, report) = cramming::corpus::prepare(&raw, &tokenizer, &cfg.pipeline)?;
    write_dataset(&a.out, &ds)?;
    print_prepare(&report);
    println!("wrote {}", a.out.display());
    Ok(())
}

fn pretrain(a: Pretrain) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(h) = a.budget_hours {
        cfg.train.budget = Budget::Seconds(h * 3600.0);
    }
    if let Some(n) = a.budget_steps {
        cfg.train.budget = Budget::Steps(n);
    }
    let vocab_path = a.tokenizer.unwrap_or_else(|| a.data.with_file_name(VOCAB_FILE));
    let tokenizer = WordPieceModel::load(&vocab_path)?;
    let ds = read_dataset(&a.data)?;
    if ds.vocab_size() != tokenizer.vocab.len() {
        return Err(Error::Config(format!(
            "{} holds ids for {} tokens but {} has {}",
            a.data.display(),
            ds.vocab_size(),
            vocab_path.display(),
            tokenizer.vocab.len()
        )));
    }
    let (train, eval) = split_eval(&ds, cfg.train.eval_sequences)?;
    let data = PreparedData { tokenizer, train, eval, report: PrepareReport::default() };
    let result = train_run(&cfg, &data)?;
    save_run(&a.out, &result, &data)?;
    let m = &result.metrics;
    println!(
        "{} steps, {} tokens, {:.1}s, stop: {}; loss {} -> {:.4}",
        m.steps,
        m.tokens,
        m.seconds,
        m.stop,
        m.initial_loss.map_or("n/a".into(), |l| format!("{l:.4}")),
        m.final_loss
    );
    println!("wrote {}", a.out.display());
    Ok(())
}

fn finetune(a: Finetune) -> Result<()> {
    let (model, tokenizer) = load_model(&a.checkpoint)?;
    let (examples, labels) = read_task(&a.task)?;
    let (train, eval) = match &a.eval {
        Some(p) => {
            let (eval, eval_labels) = read_task(p)?;
            if eval_labels != labels {
                return Err(Error::Config(format!("{} uses different labels from {}", p.display(), a.task.display())));
            }
            (examples, eval)
        }
        None => split_task(&examples, 0.1, 0),
    };
    let mut protocol = if a.baseline { FinetuneProtocol::baseline() } else { FinetuneProtocol::default() };
    if let Some(e) = a.epochs {
        protocol.epochs = e;
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let summary = finetune_seeds(&model, &tokenizer, &train, &eval, labels.len(), &protocol, &seeds)?;
    for (s, r) in seeds.iter().zip(&summary.per_seed) {
        println!("seed {s}: accuracy {:.4}, matthews {:.4}", r.accuracy, r.matthews);
    }
    println!("median accuracy {:.4}, median matthews {:.4}", summary.median_accuracy, summary.median_matthews);
    Ok(())
}

fn ablate(a: Ablate) -> Result<()> {
    let base = load_config(Some(&a.config))?;
    let raw = read_inputs(&base.tokenizer.inputs)?;
    let matrix = a.presets.iter().map(|p| Ok((p.clone(), preset(p)?))).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let table = run_ablation(&base, &matrix, &raw, Some(&a.out));
    let text = table.to_text();
    print!("{text}");
    for (name, body) in [("ablation.txt", text), ("ablation.csv", table.to_csv())] {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    if table.rows.iter().any(|r| r.outcome.is_err()) {
        return Err(Error::Runtime("one or more ablation rows failed".into()));
    }
    Ok(())
}

fn fit_scaling(a: FitScaling) -> Result<()> {
    let curves = a.curves.iter().map(|p| LossCurve::load(p)).collect::<Result<Vec<_>>>()?;
    let series: Vec<Vec<(f64, f64)>> = curves.iter().map(LossCurve::series).collect();
    let burn = |s: &[(f64, f64)]| default_burn_in(s) / 0.1 * a.burn_in_fraction;
    for (path, s) in a.curves.iter().zip(&series) {
        let f = fit_power_law(s, burn(s))?;
        println!(
            "{}: L(n) = {:.5} + {:.5} * n^-{:.5}  (residual {:.5}, {} points)",
            path.display(),
            f.c,
            f.a,
            f.b,
            f.residual,
            f.points
        );
    }
    if let [x, y] = series.as_slice() {
        let s = estimate_shift(x, y, burn(x), burn(y))?;
        println!(
            "shift: the second curve needs {:.4}x the tokens to match the first (residual {:.5}, {} points)",
            s.factor, s.residual, s.points
        );
    }
    Ok(())
}

fn report(a: Report) -> Result<()> {
    let extra = a.devices.as_deref().map(load_devices).transpose()?;
    let device: Option<DeviceSpec> = a.device.as_deref().map(|d| find_device(d, extra.as_deref())).transpose()?;
    let text = if let Some(curve) = &a.curve {
        let config = load_config(a.config.as_deref())?;
        let run = RunArtifacts {
            name: curve.file_stem().map_or("curve".into(), |s| s.to_string_lossy().into_owned()),
            config,
            curve: LossCurve::load(curve)?,
            metrics: None,
        };
        report_artifacts(&[run], &a.out, device.as_ref())?
    } else {
        if a.runs.is_empty() {
            return Err(Error::Config("give --run directories or --curve".into()));
        }
        emit_report(&a.runs, &a.out, device.as_ref())?
    };
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::TokenizeTrain(a) => tokenize_train(a),
        Command::Prepare(a) => prepare(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Ablate(a) => ablate(a),
        Command::FitScaling(a) => fit_scaling(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
