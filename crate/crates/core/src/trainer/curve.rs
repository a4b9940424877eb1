use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens: u64,
    pub lr: f64,
    /// Mean micro-batch loss since the previous point.
    pub loss: f64,
    pub seconds: f64,
}

/// MLM loss against tokens ingested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub points: Vec<CurvePoint>,
}

pub const CURVE_HEADER: &str = "step,tokens,lr,loss,seconds";

impl LossCurve {
    pub fn push(&mut self, p: CurvePoint) -> Result<()> {
        if let Some(last) = self.points.last() {
            if p.tokens <= last.tokens || p.seconds < last.seconds {
                return Err(Error::Contract(format!(
                    "curve point at {} tokens / {}s does not follow {} tokens / {}s",
                    p.tokens, p.seconds, last.tokens, last.seconds
                )));
            }
        }
        self.points.push(p);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.points.last().map(|p| p.loss)
    }

    /// `(tokens, loss)` pairs.
    pub fn series(&self) -> Vec<(f64, f64)> {
        self.points.iter().map(|p| (p.tokens as f64, p.loss)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CURVE_HEADER);
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!("{},{},{:e},{},{}\n", p.step, p.tokens, p.lr, p.loss, p.seconds));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("loss curve", d);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(CURVE_HEADER) {
            return Err(bad(format!("expected header {CURVE_HEADER:?}")));
        }
        let mut curve = LossCurve::default();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("line {}: expected 5 fields", n + 2)));
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(format!("line {}: bad number {:?}", n + 2, f[i])));
            let int = |i: usize| f[i].trim().parse::<u64>().map_err(|_| bad(format!("line {}: bad integer {:?}", n + 2, f[i])));
            let p = CurvePoint { step: int(0)? as usize, tokens: int(1)?, lr: num(2)?, loss: num(3)?, seconds: num(4)? };
            curve.push(p).map_err(|e| bad(e.to_string()))?;
        }
        Ok(curve)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut c = LossCurve::default();
        c.push(CurvePoint { step: 10, tokens: 1280, lr: 5e-4, loss: 7.25, seconds: 1.5 }).unwrap();
        c.push(CurvePoint { step: 20, tokens: 2560, lr: 1e-3, loss: 6.125, seconds: 3.0 }).unwrap();
        assert_eq!(LossCurve::from_csv(&c.to_csv()).unwrap(), c);
        assert!(c.push(CurvePoint { step: 30, tokens: 2560, lr: 0.0, loss: 1.0, seconds: 4.0 }).is_err());
        assert!(LossCurve::from_csv("tokens,loss\n").is_err());
    }
}
