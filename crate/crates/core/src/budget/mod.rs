//! FLOP and wallclock accounting.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{param_count, ModelConfig};
use crate::trainer::Budget;

const BUILTIN_DEVICES: &str = include_str!("devices.txt");

#[derive(Clone, Debug, PartialEq)]
pub struct DeviceSpec {
    pub name: String,
    /// Peak throughput of one device in TFLOP/s.
    pub peak_tflops: f64,
    pub count: usize,
}

impl DeviceSpec {
    pub fn new(name: impl Into<String>, peak_tflops: f64, count: usize) -> Result<Self> {
        if !(peak_tflops > 0.0 && peak_tflops.is_finite()) || count == 0 {
            return Err(Error::Config(format!("device needs positive throughput and count, got {peak_tflops} x {count}")));
        }
        Ok(DeviceSpec { name: name.into(), peak_tflops, count })
    }

    /// Aggregate peak in FLOP/s.
    pub fn peak_flops(&self) -> f64 {
        self.count as f64 * self.peak_tflops * 1e12
    }
}

/// Parses a `name tflops` table. Blank lines and `#` comments are skipped.
pub fn parse_devices(text: &str) -> Result<Vec<DeviceSpec>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        let (Some(name), Some(tflops), None) = (f.next(), f.next(), f.next()) else {
            return Err(Error::format("device table", format!("line {}: expected `name tflops`", n + 1)));
        };
        let tflops: f64 =
            tflops.parse().map_err(|_| Error::format("device table", format!("line {}: bad number {tflops:?}", n + 1)))?;
        out.push(DeviceSpec::new(name, tflops, 1)?);
    }
    Ok(out)
}

/// The shipped device table.
pub fn builtin_devices() -> Vec<DeviceSpec> {
    parse_devices(BUILTIN_DEVICES).expect("builtin device table parses")
}

pub fn load_devices(path: &Path) -> Result<Vec<DeviceSpec>> {
    parse_devices(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

/// Looks up `name` in the shipped table, or in `extra` first when given.
pub fn find_device(name: &str, extra: Option<&[DeviceSpec]>) -> Result<DeviceSpec> {
    extra
        .into_iter()
        .flatten()
        .cloned()
        .chain(builtin_devices())
        .find(|d| d.name == name)
        .ok_or_else(|| Error::Config(format!("unknown device {name:?}")))
}

/// Device-peak budget over `hours`, in units of 10^18 FLOP.
pub fn total_exaflops(device: &DeviceSpec, hours: f64) -> Result<f64> {
    if !(hours > 0.0) {
        return Err(Error::Contract(format!("hours must be positive, got {hours}")));
    }
    Ok(device.count as f64 * device.peak_tflops * 1e12 * hours * 3600.0 / 1e18)
}

/// Training FLOPs by the 6·N·D rule (2N forward, 4N backward per token).
pub fn model_flops_estimate(config: &ModelConfig, tokens: u64) -> f64 {
    flops_for(param_count(config), tokens)
}

fn flops_for(params: usize, tokens: u64) -> f64 {
    6.0 * params as f64 * tokens as f64
}

/// Running account of one training run. Every field only grows.
#[derive(Clone, Debug, PartialEq)]
pub struct BudgetLedger {
    pub wallclock_elapsed: f64,
    pub tokens_ingested: u64,
    pub steps: usize,
    pub estimated_flops_used: f64,
    pub budget: Budget,
    param_count: usize,
    stopped: bool,
}

impl BudgetLedger {
    pub fn new(param_count: usize, budget: Budget) -> Self {
        BudgetLedger {
            wallclock_elapsed: 0.0,
            tokens_ingested: 0,
            steps: 0,
            estimated_flops_used: 0.0,
            budget,
            param_count,
            stopped: false,
        }
    }

    pub fn for_model(config: &ModelConfig, budget: Budget) -> Self {
        Self::new(param_count(config), budget)
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Records the totals reached so far. Totals that go backwards are
    /// rejected and leave the ledger untouched.
    pub fn record(&mut self, elapsed: f64, tokens: u64, steps: usize) -> Result<()> {
        if !(elapsed >= self.wallclock_elapsed) || tokens < self.tokens_ingested || steps < self.steps {
            return Err(Error::Contract(format!(
                "ledger totals must not decrease: ({elapsed}s, {tokens} tokens, {steps} steps) after ({}s, {} tokens, {} steps)",
                self.wallclock_elapsed, self.tokens_ingested, self.steps
            )));
        }
        self.wallclock_elapsed = elapsed;
        self.tokens_ingested = tokens;
        self.steps = steps;
        self.estimated_flops_used = flops_for(self.param_count, tokens);
        self.stopped |= match self.budget {
            Budget::Seconds(s) => elapsed >= s,
            Budget::Steps(n) => steps >= n,
        };
        Ok(())
    }

    /// Latches: once the budget is reached it stays reached.
    pub fn should_stop(&self) -> bool {
        self.stopped
    }

    /// Achieved model FLOPs as a fraction of the device peak over the
    /// elapsed time. `None` before any time has passed.
    pub fn utilization(&self, device: &DeviceSpec) -> Option<f64> {
        (self.wallclock_elapsed > 0.0).then(|| self.estimated_flops_used / (self.wallclock_elapsed * device.peak_flops()))
    }

    pub fn tokens_per_second(&self) -> Option<f64> {
        (self.wallclock_elapsed > 0.0).then(|| self.tokens_ingested as f64 / self.wallclock_elapsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_table_has_all_devices() {
        let names: Vec<String> = builtin_devices().into_iter().map(|d| d.name).collect();
        assert_eq!(names, ["rtx2080ti", "rtxa4000", "rtxa6000", "v100", "tpuv3", "tpuv4", "titanrtx"]);
        assert!(find_device("h100", None).is_err());
    }

    #[test]
    fn bad_tables_are_rejected() {
        assert!(parse_devices("gpu\n").is_err());
        assert!(parse_devices("gpu fast\n").is_err());
        assert!(parse_devices("gpu -3\n").is_err());
        assert_eq!(parse_devices("# only a comment\n\n").unwrap(), vec![]);
    }

    #[test]
    fn ledger_latches_and_rejects_regress() {
        let mut l = BudgetLedger::new(10, Budget::Seconds(86400.0));
        assert!(!l.should_stop());
        l.record(86400.0, 100, 3).unwrap();
        assert!(l.should_stop());
        assert_eq!(l.estimated_flops_used, 6000.0);
        assert!(l.record(86399.0, 200, 4).is_err());
        assert!(l.should_stop());
        assert_eq!(l.tokens_ingested, 100);
    }
}
