//! Run configuration, ablation orchestration, reports and scaling-law
//! analysis of loss curves.

mod config;
mod report;
mod run;
mod scaling;

pub use config::{config_diff, preset, FinetuneSection, ReportSection, RunConfig, TokenizerSection, TrainSection, PRESETS};
pub use report::{
    curve_csv_name, emit_report, render_summary, report_artifacts, summarize, svg_line_chart, RunArtifacts, RunSummary,
    FIT_CSV, PLOT_FILE, REPORT_FILE, SUMMARY_CSV,
};
pub use run::{
    execute_run, load_corpus, load_model, prepare_data, prepare_with, pretrain_config, run_ablation, run_finetune,
    save_model, save_run, split_eval, train_run, train_tokenizer, AblationRow, AblationTable, PreparedData, RunMetrics,
    RunResult, CHECKPOINT_DIR, CONFIG_FILE, CURVE_FILE, DATA_FILE, EVAL_BATCH, METRICS_FILE, VOCAB_FILE,
};
pub use scaling::{b_grid, default_burn_in, estimate_shift, fit_power_law, PowerLawFit, ShiftEstimate, B_RANGE, MIN_FIT_POINTS};
