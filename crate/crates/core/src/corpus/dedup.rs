//! Exact-substring deduplication over token ids.

use super::TokenizedEntry;
use crate::error::{Error, Result};

/// Suffix array of `text` by prefix doubling.
pub fn suffix_array(text: &[u64]) -> Vec<u32> {
    let n = text.len();
    if n == 0 {
        return Vec::new();
    }
    let mut sa: Vec<u32> = (0..n as u32).collect();
    sa.sort_unstable_by_key(|&i| text[i as usize]);
    let mut rank = vec![0u32; n];
    for w in 1..n {
        let (a, b) = (sa[w - 1] as usize, sa[w] as usize);
        rank[b] = rank[a] + u32::from(text[a] != text[b]);
    }
    let mut keyed: Vec<(u64, u32)> = Vec::with_capacity(n);
    let mut k = 1;
    while (rank[sa[n - 1] as usize] as usize) < n - 1 {
        // Rank 0 is reserved for "past the end", hence the +1 shift.
        keyed.clear();
        keyed.extend((0..n).map(|i| {
            let second = if i + k < n { rank[i + k] as u64 + 1 } else { 0 };
            (((rank[i] as u64) << 32) | second, i as u32)
        }));
        keyed.sort_unstable();
        let mut prev = keyed[0].0;
        let mut r = 0u32;
        for &(key, i) in &keyed {
            if key != prev {
                r += 1;
                prev = key;
            }
            rank[i as usize] = r;
        }
        for (slot, &(_, i)) in sa.iter_mut().zip(&keyed) {
            *slot = i;
        }
        k *= 2;
    }
    sa
}

/// Kasai's algorithm: `lcp[r]` is the common prefix length of the suffixes at
/// ranks `r - 1` and `r` (`lcp[0] = 0`).
pub fn lcp_array(text: &[u64], sa: &[u32]) -> Vec<u32> {
    let n = text.len();
    let mut rank = vec![0usize; n];
    for (r, &i) in sa.iter().enumerate() {
        rank[i as usize] = r;
    }
    let mut lcp = vec![0u32; n];
    let mut h = 0usize;
    for i in 0..n {
        if rank[i] > 0 {
            let j = sa[rank[i] - 1] as usize;
            while i + h < n && j + h < n && text[i + h] == text[j + h] {
                h += 1;
            }
            lcp[rank[i]] = h as u32;
            h = h.saturating_sub(1);
        } else {
            h = 0;
        }
    }
    lcp
}

/// Flattens entries with a distinct sentinel after each one so that no match
/// crosses an entry boundary. Returns the text and each entry's start offset.
fn flatten(entries: &[TokenizedEntry]) -> (Vec<u64>, Vec<usize>) {
    let total: usize = entries.iter().map(|e| e.ids.len() + 1).sum();
    let mut text = Vec::with_capacity(total);
    let mut starts = Vec::with_capacity(entries.len());
    for (k, e) in entries.iter().enumerate() {
        starts.push(text.len());
        text.extend(e.ids.iter().map(|&t| t as u64));
        text.push((1u64 << 32) + k as u64);
    }
    (text, starts)
}

/// Marks every position covered by a non-first occurrence of some token
/// substring of length `min_len`. Positions are in the flattened text.
pub fn duplicate_mask(text: &[u64], min_len: usize) -> Vec<bool> {
    let n = text.len();
    let sa = suffix_array(text);
    let lcp = lcp_array(text, &sa);
    let mut starts = vec![false; n];
    // Maximal rank runs with adjacent lcp >= L share their first L tokens;
    // every member other than the leftmost text position repeats it.
    let mut r = 0;
    while r < n {
        let mut end = r + 1;
        while end < n && lcp[end] as usize >= min_len {
            end += 1;
        }
        if end - r > 1 {
            let first = sa[r..end].iter().min().copied().unwrap_or(0);
            for &p in &sa[r..end] {
                if p != first {
                    starts[p as usize] = true;
                }
            }
        }
        r = end;
    }
    let mut mask = vec![false; n];
    let mut cover_until = 0;
    for i in 0..n {
        if starts[i] {
            cover_until = i + min_len;
        }
        if i < cover_until {
            mask[i] = true;
        }
    }
    mask
}

/// Removes every non-first occurrence of any token substring of length
/// `min_len` or more. Surviving pieces of an entry become separate entries
/// sharing its `source_index`.
pub fn dedup_exact(entries: &[TokenizedEntry], min_len: usize) -> Result<Vec<TokenizedEntry>> {
    if min_len < 2 {
        return Err(Error::Config(format!("dedup length threshold must be at least 2, got {min_len}")));
    }
    let (text, starts) = flatten(entries);
    let mask = duplicate_mask(&text, min_len);
    let mut out = Vec::new();
    for (e, &start) in entries.iter().zip(&starts) {
        let mut piece = Vec::new();
        for (j, &id) in e.ids.iter().enumerate() {
            if mask[start + j] {
                if !piece.is_empty() {
                    out.push(TokenizedEntry::new(std::mem::take(&mut piece), e.source_index));
                }
            } else {
                piece.push(id);
            }
        }
        if !piece.is_empty() {
            out.push(TokenizedEntry::new(piece, e.source_index));
        }
    }
    Ok(out)
}
