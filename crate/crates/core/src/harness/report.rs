use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{config_diff, RunConfig};
use super::run::{RunMetrics, CHECKPOINT_DIR, CONFIG_FILE, CURVE_FILE, METRICS_FILE};
use super::scaling::{default_burn_in, fit_power_law, PowerLawFit};
use crate::budget::{find_device, model_flops_estimate, total_exaflops, DeviceSpec};
use crate::error::{Error, Result};
use crate::model::param_count;
use crate::tensor::{BLOB_FILE, MANIFEST_FILE};
use crate::trainer::LossCurve;

/// Artifacts of one run as read back from disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub name: String,
    pub config: RunConfig,
    pub curve: LossCurve,
    pub metrics: Option<RunMetrics>,
}

impl RunArtifacts {
    /// Reads a run directory. Missing files are listed together in one error.
    pub fn load(dir: &Path) -> Result<Self> {
        let required = [
            dir.join(CONFIG_FILE),
            dir.join(CURVE_FILE),
            dir.join(CHECKPOINT_DIR).join(MANIFEST_FILE),
            dir.join(CHECKPOINT_DIR).join(BLOB_FILE),
        ];
        let missing: Vec<String> = required.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            return Err(Error::Analysis(format!("missing run artifacts: {}", missing.join(", "))));
        }
        let mpath = dir.join(METRICS_FILE);
        let metrics = if mpath.exists() {
            Some(RunMetrics::parse(&fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?)?)
        } else {
            None
        };
        Ok(RunArtifacts {
            name: dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned()),
            config: RunConfig::load(&required[0])?,
            curve: LossCurve::load(&required[1])?,
            metrics,
        })
    }
}

/// Derived numbers for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub param_count: usize,
    pub tokens: u64,
    pub seconds: f64,
    /// Last curve point's tokens over its seconds.
    pub tokens_per_second: Option<f64>,
    pub device: DeviceSpec,
    /// Device-peak budget over the elapsed time.
    pub device_exaflops: Option<f64>,
    /// 6·N·D estimate of the FLOPs actually spent.
    pub model_exaflops: f64,
    pub utilization: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub last_curve_loss: Option<f64>,
    pub fit: std::result::Result<PowerLawFit, String>,
}

/// `device` defaults to the run's configured device from the shipped table.
pub fn summarize(run: &RunArtifacts, device: Option<&DeviceSpec>) -> Result<RunSummary> {
    let device = match device {
        Some(d) => d.clone(),
        None => find_device(&run.config.report.device, None)?,
    };
    let last = run.curve.points.last();
    let tokens = last.map_or(0, |p| p.tokens);
    let seconds = last.map_or(0.0, |p| p.seconds);
    let params = param_count(&run.config.model);
    let model_flops = model_flops_estimate(&run.config.model, tokens);
    let series = run.curve.series();
    Ok(RunSummary {
        name: run.name.clone(),
        param_count: params,
        tokens,
        seconds,
        tokens_per_second: (seconds > 0.0).then(|| tokens as f64 / seconds),
        device_exaflops: (seconds > 0.0).then(|| total_exaflops(&device, seconds / 3600.0)).transpose()?,
        model_exaflops: model_flops / 1e18,
        utilization: (seconds > 0.0).then(|| model_flops / (seconds * device.peak_flops())),
        device,
        initial_loss: run.metrics.as_ref().and_then(|m| m.initial_loss),
        final_loss: run.metrics.as_ref().map(|m| m.final_loss),
        last_curve_loss: run.curve.last_loss(),
        fit: fit_power_law(&series, default_burn_in(&series)).map_err(|e| e.to_string()),
    })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.prec$}"))
}

/// The five report sections for one run.
pub fn render_summary(run: &RunArtifacts, s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# Run {}\n", s.name);
    let _ = writeln!(out, "## Configuration");
    let defaults = RunConfig::default();
    let changed = config_diff(&defaults, &run.config);
    let _ = writeln!(out, "parameters: {}", s.param_count);
    if changed.is_empty() {
        let _ = writeln!(out, "all settings at their defaults");
    }
    for (k, _, v) in changed {
        let _ = writeln!(out, "{k} = {v}");
    }
    let _ = writeln!(out, "\n## Throughput");
    let _ = writeln!(out, "tokens: {}", s.tokens);
    let _ = writeln!(out, "seconds: {:.3}", s.seconds);
    let _ = writeln!(out, "tokens/second: {}", opt(s.tokens_per_second, 1));
    let _ = writeln!(out, "\n## Budget");
    let _ = writeln!(out, "device: {} ({} TFLOP/s x {})", s.device.name, s.device.peak_tflops, s.device.count);
    let _ = writeln!(out, "device-peak exaFLOP over elapsed time: {}", opt(s.device_exaflops, 9));
    let _ = writeln!(out, "model exaFLOP (6ND): {:.9}", s.model_exaflops);
    let _ = writeln!(out, "utilization: {}", opt(s.utilization, 6));
    let _ = writeln!(out, "\n## Loss");
    let _ = writeln!(out, "initial: {}", opt(s.initial_loss, 4));
    let _ = writeln!(out, "final: {}", opt(s.final_loss, 4));
    let _ = writeln!(out, "last curve point: {}", opt(s.last_curve_loss, 4));
    let _ = writeln!(out, "\n## Scaling fit");
    match &s.fit {
        Ok(f) => {
            let _ = writeln!(out, "L(n) = {:.4} + {:.4} * n^-{:.4}", f.c, f.a, f.b);
            let _ = writeln!(out, "residual: {:.5} over {} points past {} tokens", f.residual, f.points, f.burn_in);
        }
        Err(e) => {
            let _ = writeln!(out, "no fit: {e}");
        }
    }
    out
}

/// Files written by [`emit_report`], relative to its output directory.
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const FIT_CSV: &str = "fit.csv";
pub const PLOT_FILE: &str = "loss.svg";

pub fn curve_csv_name(i: usize) -> String {
    format!("curve_{i}.csv")
}

/// Writes a report for one or more run directories into `out` and returns
/// the text. With two or more runs a diff section lists the changed keys
/// of each run against the first.
pub fn emit_report(runs: &[PathBuf], out: &Path, device: Option<&DeviceSpec>) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Analysis("no run directories given".into()));
    }
    let mut errors = Vec::new();
    let mut loaded = Vec::new();
    for dir in runs {
        match RunArtifacts::load(dir) {
            Ok(r) => loaded.push(r),
            Err(e) => errors.push(e.to_string()),
        }
    }
    if !errors.is_empty() {
        return Err(Error::Analysis(errors.join("; ")));
    }
    report_artifacts(&loaded, out, device)
}

/// As [`emit_report`] for runs already in memory.
pub fn report_artifacts(runs: &[RunArtifacts], out: &Path, device: Option<&DeviceSpec>) -> Result<String> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summaries = runs.iter().map(|r| summarize(r, device)).collect::<Result<Vec<_>>>()?;
    let mut text = String::new();
    for (r, s) in runs.iter().zip(&summaries) {
        text.push_str(&render_summary(r, s));
        text.push('\n');
    }
    if runs.len() > 1 {
        let _ = writeln!(text, "## Diff");
        for r in &runs[1..] {
            let _ = writeln!(text, "{} vs {}:", runs[0].name, r.name);
            let diff = config_diff(&runs[0].config, &r.config);
            if diff.is_empty() {
                let _ = writeln!(text, "  no configuration changes");
            }
            for (k, a, b) in diff {
                let _ = writeln!(text, "  {k}: {a} -> {b}");
            }
        }
    }
    let write = |name: &str, body: &str| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(REPORT_FILE, &text)?;
    let mut summary = String::from("run,param_count,tokens,seconds,tokens_per_second,device_exaflops,model_exaflops,utilization,initial_loss,final_loss\n");
    let mut fit = String::from("run,a,b,c,residual,burn_in,points\n");
    let cell = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for (i, (r, s)) in runs.iter().zip(&summaries).enumerate() {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{}",
            s.name,
            s.param_count,
            s.tokens,
            s.seconds,
            cell(s.tokens_per_second),
            cell(s.device_exaflops),
            s.model_exaflops,
            cell(s.utilization),
            cell(s.initial_loss),
            cell(s.final_loss)
        );
        if let Ok(f) = &s.fit {
            let _ = writeln!(fit, "{},{},{},{},{},{},{}", s.name, f.a, f.b, f.c, f.residual, f.burn_in, f.points);
        }
        write(&curve_csv_name(i), &r.curve.to_csv())?;
    }
    write(SUMMARY_CSV, &summary)?;
    write(FIT_CSV, &fit)?;
    let series: Vec<(String, Vec<(f64, f64)>)> = runs.iter().map(|r| (r.name.clone(), r.curve.series())).collect();
    write(PLOT_FILE, &svg_line_chart(&series, "tokens (log)", "MLM loss"))?;
    Ok(text)
}

const PALETTE: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Self-contained SVG line chart with a logarithmic x axis.
pub fn svg_line_chart(series: &[(String, Vec<(f64, f64)>)], x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (720.0, 420.0, 60.0);
    let pts = series.iter().flat_map(|s| s.1.iter()).filter(|p| p.0 > 0.0 && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x.log10());
        x1 = x1.max(x.log10());
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| m + (x.log10() - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<path d=\"M{m} {m} V{} H{}\" fill=\"none\" stroke=\"#333\"/>",
        h - m,
        w - m
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let yv = y0 + f * (y1 - y0);
        let xv = 10f64.powf(x0 + f * (x1 - x0));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{yv:.2}</text>", m - 6.0, py(yv) + 4.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{xv:.2e}</text>", px(xv), h - m + 18.0);
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>", w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        h / 2.0,
        h / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts
            .iter()
            .filter(|p| p.0 > 0.0 && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\"/>", path.join(" "));
        }
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\" fill=\"{colour}\">{}</text>", w - m - 140.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
