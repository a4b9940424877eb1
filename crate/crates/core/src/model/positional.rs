use super::config::EmbeddingKind;
use crate::error::{Error, Result};

/// Interleaved sinusoidal table `[S×d]`: column `2i` holds
/// `sin(pos / 10000^(2i/d))` and column `2i+1` the matching cosine.
pub fn sinusoidal_table(seq_len: usize, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal positions need an even width, got {dim}")));
    }
    let mut table = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            table[pos * dim + 2 * i] = angle.sin();
            table[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(table)
}

/// Additive positional contribution for `kind`, or `None` when the kind adds
/// nothing (rotary rotates queries and keys instead; learned tables live in
/// the parameter store).
pub fn positional_embedding(kind: EmbeddingKind, seq_len: usize, dim: usize, scale: f64) -> Result<Option<Vec<f64>>> {
    match kind {
        EmbeddingKind::ScaledSinusoidal => Ok(Some(sinusoidal_table(seq_len, dim)?.into_iter().map(|v| v * scale).collect())),
        EmbeddingKind::Sinusoidal => Ok(Some(sinusoidal_table(seq_len, dim)?)),
        EmbeddingKind::Learned | EmbeddingKind::Rotary => {
            if dim % 2 != 0 && kind == EmbeddingKind::Rotary {
                return Err(Error::Config(format!("rotary positions need an even width, got {dim}")));
            }
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn position_zero_is_sin_zero_cos_scale() {
        let sigma = 0.37;
        let t = positional_embedding(EmbeddingKind::ScaledSinusoidal, 4, 8, sigma).unwrap().unwrap();
        for i in 0..4 {
            assert_eq!(t[2 * i], 0.0);
            assert_eq!(t[2 * i + 1], sigma);
        }
    }

    #[test]
    fn first_frequency_entry() {
        let sigma = 0.5;
        let t = positional_embedding(EmbeddingKind::ScaledSinusoidal, 2, 768, sigma).unwrap().unwrap();
        assert!((t[768] - 0.841_470_984_807_896_5 * sigma).abs() < 1e-15);
    }

    #[test]
    fn zero_scale_vanishes() {
        let t = positional_embedding(EmbeddingKind::ScaledSinusoidal, 3, 4, 0.0).unwrap().unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(sinusoidal_table(4, 7).is_err());
        assert!(positional_embedding(EmbeddingKind::Rotary, 4, 7, 1.0).is_err());
    }
}
