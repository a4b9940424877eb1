//! Corpus curation: filtering, deduplication, packing and sorting, plus the
//! binary dataset format consumed by the trainer.

mod dedup;
pub mod synth;

pub use dedup::{dedup_exact, duplicate_mask, lcp_array, suffix_array};

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{normalize, TokenId, WordPieceModel};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawEntry {
    pub text: String,
    /// Length of the normalized text.
    pub char_count: usize,
}

impl RawEntry {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let char_count = normalize(&text).len();
        RawEntry { text, char_count }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedEntry {
    pub ids: Vec<TokenId>,
    pub source_index: usize,
}

impl TokenizedEntry {
    pub fn new(ids: Vec<TokenId>, source_index: usize) -> Self {
        TokenizedEntry { ids, source_index }
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }
}

/// Fixed-length training sequences stored back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedDataset {
    ids: Vec<TokenId>,
    seq_len: usize,
    vocab_size: usize,
    unigram_counts: Vec<u64>,
}

impl PackedDataset {
    pub fn new(ids: Vec<TokenId>, seq_len: usize, vocab_size: usize) -> Result<Self> {
        if seq_len == 0 || ids.len() % seq_len != 0 {
            return Err(Error::Shape(format!("{} ids do not form sequences of {seq_len}", ids.len())));
        }
        let mut unigram_counts = vec![0u64; vocab_size];
        for &t in &ids {
            *unigram_counts
                .get_mut(t as usize)
                .ok_or_else(|| Error::Index(format!("token {t} outside vocabulary of {vocab_size}")))? += 1;
        }
        Ok(PackedDataset { ids, seq_len, vocab_size, unigram_counts })
    }

    pub fn len(&self) -> usize {
        self.ids.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn sequence(&self, i: usize) -> &[TokenId] {
        &self.ids[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn sequences(&self) -> impl Iterator<Item = &[TokenId]> {
        self.ids.chunks_exact(self.seq_len)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn unigram_counts(&self) -> &[u64] {
        &self.unigram_counts
    }

    pub fn token_count(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub t: f64,
    /// `None` disables deduplication.
    pub dedup_min_len: Option<usize>,
    pub sort: bool,
    pub shuffle_seed: u64,
    pub seq_len: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { t: 0.3, dedup_min_len: Some(100), sort: true, shuffle_seed: 0, seq_len: 128 }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0) {
            return Err(Error::Config(format!("filter threshold must be positive, got {}", self.t)));
        }
        if matches!(self.dedup_min_len, Some(l) if l < 2) {
            return Err(Error::Config("dedup length threshold must be at least 2".into()));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!("seq_len must be at least 2, got {}", self.seq_len)));
        }
        Ok(())
    }
}

/// Keeps an entry iff it has characters and `tokens <= t · chars`.
pub fn compression_filter(token_count: usize, char_count: usize, t: f64) -> bool {
    char_count > 0 && token_count as f64 <= t * char_count as f64
}

/// Shuffles entries by `seed`, joins them with one `sep` between neighbours
/// and cuts the stream into full sequences of `seq_len`, dropping the tail.
pub fn pack(
    entries: &[TokenizedEntry],
    seq_len: usize,
    sep: TokenId,
    vocab_size: usize,
    seed: u64,
) -> Result<PackedDataset> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: usize = entries.iter().map(|e| e.ids.len()).sum::<usize>() + entries.len().saturating_sub(1);
    if seq_len == 0 || total < seq_len {
        return Err(Error::Config(format!("{total} tokens cannot fill a sequence of {seq_len}")));
    }
    let keep = total / seq_len * seq_len;
    let mut ids = Vec::with_capacity(total);
    for (k, &i) in order.iter().enumerate() {
        if k > 0 {
            ids.push(sep);
        }
        ids.extend_from_slice(&entries[i].ids);
        if ids.len() >= keep {
            break;
        }
    }
    ids.truncate(keep);
    PackedDataset::new(ids, seq_len, vocab_size)
}

/// Mean log unigram probability of each sequence. Counts are summed in
/// ascending order so that equal multisets get bit-identical keys.
pub fn prevalence_scores(ds: &PackedDataset) -> Vec<f64> {
    let total = ds.token_count() as f64;
    let mut buf = Vec::with_capacity(ds.seq_len);
    ds.sequences()
        .map(|s| {
            buf.clear();
            buf.extend(s.iter().map(|&t| ds.unigram_counts[t as usize]));
            buf.sort_unstable();
            let sum: f64 = buf.iter().map(|&c| (c as f64 / total).ln()).sum();
            sum / ds.seq_len as f64
        })
        .collect()
}

/// Reorders sequences by descending mean log unigram probability, keeping
/// the original order among ties.
pub fn sort_by_prevalence(ds: &PackedDataset) -> PackedDataset {
    let scores = prevalence_scores(ds);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ids = Vec::with_capacity(ds.ids.len());
    for i in order {
        ids.extend_from_slice(ds.sequence(i));
    }
    PackedDataset { ids, seq_len: ds.seq_len, vocab_size: ds.vocab_size, unigram_counts: ds.unigram_counts.clone() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub sequences: usize,
    pub tokens: usize,
    /// Unigram entropy in nats.
    pub unigram_entropy: f64,
    pub unk_rate: f64,
    /// Mean tokens per normalized character over the entries that were
    /// packed, when known.
    pub mean_compression_ratio: Option<f64>,
}

pub fn corpus_stats(ds: &PackedDataset, unk: TokenId) -> CorpusStats {
    let total = ds.token_count() as f64;
    let unigram_entropy = if total == 0.0 {
        0.0
    } else {
        -ds.unigram_counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                p * p.ln()
            })
            .sum::<f64>()
    };
    let unk_count = ds.unigram_counts.get(unk as usize).copied().unwrap_or(0);
    CorpusStats {
        sequences: ds.len(),
        tokens: ds.token_count(),
        unigram_entropy: unigram_entropy.max(0.0),
        unk_rate: if total == 0.0 { 0.0 } else { unk_count as f64 / total },
        mean_compression_ratio: None,
    }
}

const MAGIC: &[u8; 4] = b"CRAM";
const VERSION: u32 = 1;

pub fn write_dataset(path: &Path, ds: &PackedDataset) -> Result<()> {
    if ds.vocab_size > 1 << 16 {
        return Err(Error::Config(format!("vocab_size {} does not fit 16-bit ids", ds.vocab_size)));
    }
    let mut buf = Vec::with_capacity(24 + 2 * ds.ids.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.seq_len as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for &t in &ds.ids {
        buf.extend_from_slice(&(t as u16).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<PackedDataset> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::format("dataset file", detail);
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(bad("missing CRAM header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let seq_len = u32_at(8) as usize;
    let vocab_size = u32_at(12) as usize;
    let count = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = count.checked_mul(seq_len).and_then(|n| n.checked_mul(2)).map(|n| n + 24);
    if expected != Some(bytes.len()) {
        return Err(bad(format!("{} bytes for {count} sequences of {seq_len}", bytes.len())));
    }
    let ids = bytes[24..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as TokenId).collect();
    PackedDataset::new(ids, seq_len, vocab_size).map_err(|e| bad(e.to_string()))
}

/// Reads every `.txt` file under `dir` (sorted by path) and splits it into
/// entries at blank lines.
pub fn read_text_dir(dir: &Path) -> Result<Vec<RawEntry>> {
    let mut files = Vec::new();
    collect_txt(dir, &mut files)?;
    files.sort();
    let mut entries = Vec::new();
    for path in files {
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut para = String::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                if !para.is_empty() {
                    entries.push(RawEntry::new(std::mem::take(&mut para)));
                }
            } else {
                if !para.is_empty() {
                    para.push('\n');
                }
                para.push_str(&line);
            }
        }
        if !para.is_empty() {
            entries.push(RawEntry::new(para));
        }
    }
    Ok(entries)
}

fn collect_txt(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_txt(&path, out)?;
        } else if path.extension().is_some_and(|x| x == "txt") {
            out.push(path);
        }
    }
    Ok(())
}

/// Counts from one run of [`prepare`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepareReport {
    pub raw_entries: usize,
    pub empty_entries: usize,
    pub filtered_entries: usize,
    pub dedup_removed_tokens: usize,
    pub packed_entries: usize,
    pub sequences: usize,
    pub mean_compression_ratio: f64,
}

/// Tokenize → compression filter → dedup → pack → optional prevalence sort.
pub fn prepare(
    raw: &[RawEntry],
    tokenizer: &WordPieceModel,
    cfg: &PipelineConfig,
) -> Result<(PackedDataset, PrepareReport)> {
    cfg.validate()?;
    let mut report = PrepareReport { raw_entries: raw.len(), ..Default::default() };
    let mut kept = Vec::new();
    let (mut kept_tokens, mut kept_chars) = (0usize, 0usize);
    for (i, e) in raw.iter().enumerate() {
        if e.char_count == 0 {
            report.empty_entries += 1;
            continue;
        }
        let ids = tokenizer.encode(&e.text);
        if compression_filter(ids.len(), e.char_count, cfg.t) {
            kept_tokens += ids.len();
            kept_chars += e.char_count;
            kept.push(TokenizedEntry::new(ids, i));
        } else {
            report.filtered_entries += 1;
        }
    }
    report.mean_compression_ratio = if kept_chars == 0 { 0.0 } else { kept_tokens as f64 / kept_chars as f64 };
    if let Some(l) = cfg.dedup_min_len {
        let before: usize = kept.iter().map(TokenizedEntry::token_count).sum();
        kept = dedup_exact(&kept, l)?;
        report.dedup_removed_tokens = before - kept.iter().map(TokenizedEntry::token_count).sum::<usize>();
    }
    report.packed_entries = kept.len();
    let mut ds = pack(&kept, cfg.seq_len, tokenizer.vocab.sep(), tokenizer.vocab.len(), cfg.shuffle_seed)?;
    if cfg.sort {
        ds = sort_by_prevalence(&ds);
    }
    report.sequences = ds.len();
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_arithmetic() {
        assert!(!compression_filter(35, 100, 0.3));
        assert!(compression_filter(25, 100, 0.3));
        assert!(compression_filter(30, 100, 0.3));
        assert!(!compression_filter(0, 0, 0.3));
    }

    #[test]
    fn pack_two_entries() {
        let a = TokenizedEntry::new((0..100).map(|i| 10 + i % 50).collect(), 0);
        let b = TokenizedEntry::new(vec![7; 80], 1);
        let entries = vec![a.clone(), b.clone()];
        let ds = pack(&entries, 128, 3, 100, 0).unwrap();
        assert_eq!(ds.len(), 1);
        let s = ds.sequence(0);
        let (first, second) = if s[0] == 7 { (&b, &a) } else { (&a, &b) };
        assert_eq!(&s[..first.ids.len()], &first.ids[..]);
        assert_eq!(s[first.ids.len()], 3);
        assert_eq!(&s[first.ids.len() + 1..], &second.ids[..128 - first.ids.len() - 1]);
    }

    #[test]
    fn pack_single_long_entry() {
        let e = TokenizedEntry::new((0..256).map(|i| i % 90 + 5).collect(), 0);
        let ds = pack(&[e.clone()], 128, 3, 100, 9).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.ids(), &e.ids[..]);
        assert!(pack(&[TokenizedEntry::new(vec![5; 10], 0)], 128, 3, 100, 0).is_err());
    }

    #[test]
    fn sorting_puts_frequent_first_and_is_idempotent() {
        let mut ids = vec![9u32, 8, 7, 6];
        ids.extend([3, 3, 3, 3]);
        ids.extend([3, 3, 3, 5]);
        let ds = PackedDataset::new(ids, 4, 10).unwrap();
        let sorted = sort_by_prevalence(&ds);
        assert_eq!(sorted.sequence(0), &[3, 3, 3, 3]);
        assert_eq!(sorted.sequence(2), &[9, 8, 7, 6]);
        assert_eq!(sort_by_prevalence(&sorted), sorted);
    }

    #[test]
    fn entropy_of_constant_dataset_is_zero() {
        let ds = PackedDataset::new(vec![4; 12], 4, 8).unwrap();
        let s = corpus_stats(&ds, 1);
        assert_eq!(s.unigram_entropy, 0.0);
        assert_eq!(s.tokens, 12);
        assert_eq!(s.unk_rate, 0.0);
    }

    #[test]
    fn dataset_rejects_out_of_range_ids() {
        assert!(PackedDataset::new(vec![1, 2, 3, 99], 2, 10).is_err());
        assert!(PackedDataset::new(vec![1, 2, 3], 2, 10).is_err());
    }
}
