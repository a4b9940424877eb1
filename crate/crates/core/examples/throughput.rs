//! Forward/backward throughput of a small MLM model on random tokens.
//!
//! `cargo run --release --example throughput -- [hidden] [seq] [batch]`

use std::time::Instant;

use cramming::model::{Model, ModelConfig};
use cramming::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cramming::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let d = args.first().copied().unwrap_or(128);
    let seq = args.get(1).copied().unwrap_or(128);
    let batch = args.get(2).copied().unwrap_or(16);
    let cfg = ModelConfig::tiny(2, d, d / 64, 4096, seq);
    let mut model = Model::<f32>::build(&cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ids: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..4096)).collect();
    let masked: Vec<usize> = (0..batch * seq).filter(|_| rng.random_bool(0.15)).collect();
    let labels: Vec<usize> = masked.iter().map(|&p| ids[p]).collect();
    let reps = 5;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let loss = model.mlm_loss(&mut tape, &ids, batch, seq, &masked, &labels, None)?;
        tape.backward_into(loss, model.params_mut())?;
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    let tokens = (batch * seq) as f64;
    println!(
        "d={d} seq={seq} batch={batch} params={} : {:.1} ms/micro-batch, {:.0} tokens/s",
        model.num_params(),
        per * 1e3,
        tokens / per
    );
    Ok(())
}
