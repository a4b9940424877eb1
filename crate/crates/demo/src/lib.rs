//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function is a thin wrapper over a plain Rust function of the
//! same name in [`ops`], which the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod ops {
    use cramming::budget::{total_exaflops, DeviceSpec};
    use cramming::harness::{default_burn_in, fit_power_law};
    use cramming::tokenizer::{train_wordpiece, TokenId, WordPieceModel};
    use cramming::trainer::{accumulation_at, lr_at, BatchRampConfig, ScheduleConfig};
    use cramming::{Error, Result};

    /// Learning rate and accumulation count for every step `0..=total_steps`,
    /// interleaved as `[lr0, acc0, lr1, acc1, ...]`.
    pub fn schedule_curve(
        kind: &str,
        peak_lr: f64,
        peak_fraction: f64,
        total_steps: usize,
        micro_batch: usize,
        final_batch: usize,
        ramp_end_fraction: f64,
    ) -> Result<Vec<f64>> {
        if total_steps == 0 || total_steps > 1_000_000 {
            return Err(Error::Config("total steps must be between 1 and 1000000".into()));
        }
        let schedule = ScheduleConfig { kind: kind.parse()?, peak_lr, peak_fraction, total_steps };
        schedule.validate()?;
        let ramp = BatchRampConfig { micro_batch, final_batch, ramp_end_fraction, total_steps };
        ramp.validate()?;
        let mut out = Vec::with_capacity(2 * (total_steps + 1));
        for s in 0..=total_steps {
            out.push(lr_at(s, &schedule)?);
            out.push(if s < total_steps { accumulation_at(s, &ramp) as f64 } else { 0.0 });
        }
        Ok(out)
    }

    /// Device-peak exaFLOP for `count` devices at `tflops` over `hours`.
    pub fn exaflops(tflops: f64, count: usize, hours: f64) -> Result<f64> {
        total_exaflops(&DeviceSpec::new("device", tflops, count)?, hours)
    }

    /// Fits `c + a·n^(−b)` past the default burn-in; returns `[a, b, c, residual, burn_in]`.
    pub fn fit_curve(tokens: &[f64], losses: &[f64]) -> Result<Vec<f64>> {
        if tokens.len() != losses.len() {
            return Err(Error::Shape(format!("{} token counts but {} losses", tokens.len(), losses.len())));
        }
        let series: Vec<(f64, f64)> = tokens.iter().copied().zip(losses.iter().copied()).collect();
        let f = fit_power_law(&series, default_burn_in(&series))?;
        Ok(vec![f.a, f.b, f.c, f.residual, f.burn_in])
    }

    /// Parses `tokens,loss` lines (a header line and blank lines are skipped).
    /// A loss curve CSV with more columns is read by its `tokens` and `loss`
    /// columns.
    pub fn parse_curve(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).peekable();
        let (mut ti, mut li) = (0, 1);
        if let Some(first) = lines.peek() {
            let cols: Vec<&str> = first.split(',').map(str::trim).collect();
            if cols.iter().any(|c| c.parse::<f64>().is_err()) {
                ti = cols.iter().position(|c| *c == "tokens").unwrap_or(0);
                li = cols.iter().position(|c| *c == "loss").unwrap_or(1);
                lines.next();
            }
        }
        let (mut t, mut l) = (Vec::new(), Vec::new());
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |i: usize| {
                f.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| Error::Config(format!("row {}: expected numbers in columns {ti} and {li}", n + 1)))
            };
            t.push(get(ti)?);
            l.push(get(li)?);
        }
        Ok((t, l))
    }

    /// A WordPiece vocabulary trained in the page.
    pub struct Tokenizer {
        model: WordPieceModel,
    }

    impl Tokenizer {
        pub fn train(corpus: &str, vocab_size: usize) -> Result<Self> {
            let paragraphs: Vec<&str> = corpus.split("\n\n").filter(|p| !p.trim().is_empty()).collect();
            Ok(Tokenizer { model: train_wordpiece(paragraphs, vocab_size)? })
        }

        pub fn vocab_size(&self) -> usize {
            self.model.vocab.len()
        }

        pub fn encode(&self, text: &str) -> Vec<TokenId> {
            self.model.encode(text)
        }

        /// Token strings for `text`, one per id.
        pub fn pieces(&self, text: &str) -> Vec<String> {
            self.encode(text).into_iter().map(|id| self.model.vocab.token(id).unwrap_or("?").to_string()).collect()
        }

        pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
            self.model.decode(ids)
        }

        /// Tokens per character of the normalized text.
        pub fn compression(&self, text: &str) -> f64 {
            let chars = cramming::tokenizer::normalize(text).chars().count();
            if chars == 0 {
                0.0
            } else {
                self.encode(text).len() as f64 / chars as f64
            }
        }
    }
}

fn js(e: cramming::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = scheduleCurve)]
pub fn schedule_curve(
    kind: &str,
    peak_lr: f64,
    peak_fraction: f64,
    total_steps: usize,
    micro_batch: usize,
    final_batch: usize,
    ramp_end_fraction: f64,
) -> Result<Vec<f64>, JsError> {
    ops::schedule_curve(kind, peak_lr, peak_fraction, total_steps, micro_batch, final_batch, ramp_end_fraction).map_err(js)
}

#[wasm_bindgen]
pub fn exaflops(tflops: f64, count: usize, hours: f64) -> Result<f64, JsError> {
    ops::exaflops(tflops, count, hours).map_err(js)
}

#[wasm_bindgen(js_name = fitCurve)]
pub fn fit_curve(csv: &str) -> Result<Vec<f64>, JsError> {
    let (t, l) = ops::parse_curve(csv).map_err(js)?;
    ops::fit_curve(&t, &l).map_err(js)
}

#[wasm_bindgen]
pub struct Tokenizer(ops::Tokenizer);

#[wasm_bindgen]
impl Tokenizer {
    #[wasm_bindgen(constructor)]
    pub fn new(corpus: &str, vocab_size: usize) -> Result<Tokenizer, JsError> {
        ops::Tokenizer::train(corpus, vocab_size).map(Tokenizer).map_err(js)
    }

    #[wasm_bindgen(js_name = vocabSize)]
    pub fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.0.encode(text)
    }

    /// Token strings joined by single spaces.
    pub fn pieces(&self, text: &str) -> String {
        self.0.pieces(text).join(" ")
    }

    pub fn decode(&self, ids: Vec<u32>) -> Result<String, JsError> {
        self.0.decode(&ids).map_err(js)
    }

    pub fn compression(&self, text: &str) -> f64 {
        self.0.compression(text)
    }
}
