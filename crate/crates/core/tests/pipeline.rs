use cramming::corpus::{
    compression_filter, dedup_exact, duplicate_mask, lcp_array, pack, prevalence_scores, read_dataset,
    sort_by_prevalence, suffix_array, write_dataset, PackedDataset, TokenizedEntry,
};
use proptest::prelude::*;

/// Position `i` is a duplicate iff some window of length `l` covering it
/// already appeared starting at an earlier position.
fn naive_mask(text: &[u64], l: usize) -> Vec<bool> {
    let n = text.len();
    let mut mask = vec![false; n];
    if l == 0 || l > n {
        return mask;
    }
    for i in 0..=n - l {
        let w = &text[i..i + l];
        if (0..i).any(|j| &text[j..j + l] == w) {
            mask[i..i + l].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

fn naive_dedup(entries: &[TokenizedEntry], l: usize) -> Vec<TokenizedEntry> {
    // Distinct separators keep windows from spanning two entries.
    let mut text = Vec::new();
    let mut starts = Vec::new();
    for (k, e) in entries.iter().enumerate() {
        starts.push(text.len());
        text.extend(e.ids.iter().map(|&t| t as u64));
        text.push(u64::MAX - k as u64);
    }
    let mask = naive_mask(&text, l);
    let mut out = Vec::new();
    for (e, &s) in entries.iter().zip(&starts) {
        let mut piece = Vec::new();
        for (j, &t) in e.ids.iter().enumerate() {
            if mask[s + j] {
                if !piece.is_empty() {
                    out.push(TokenizedEntry::new(std::mem::take(&mut piece), e.source_index));
                }
            } else {
                piece.push(t);
            }
        }
        if !piece.is_empty() {
            out.push(TokenizedEntry::new(piece, e.source_index));
        }
    }
    out
}

fn entries_strategy() -> impl Strategy<Value = Vec<TokenizedEntry>> {
    prop::collection::vec(prop::collection::vec(0u32..4, 0..30), 1..6).prop_map(|v| {
        v.into_iter().enumerate().map(|(i, ids)| TokenizedEntry::new(ids, i)).collect()
    })
}

proptest! {
    #[test]
    fn suffix_array_sorts_suffixes(text in prop::collection::vec(0u64..4, 0..80)) {
        let sa = suffix_array(&text);
        let mut naive: Vec<u32> = (0..text.len() as u32).collect();
        naive.sort_by(|&a, &b| text[a as usize..].cmp(&text[b as usize..]));
        prop_assert_eq!(&sa, &naive);
        let lcp = lcp_array(&text, &sa);
        for r in 1..sa.len() {
            let (a, b) = (&text[sa[r - 1] as usize..], &text[sa[r] as usize..]);
            let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
            prop_assert_eq!(lcp[r] as usize, common);
        }
    }

    #[test]
    fn duplicate_mask_matches_window_scan(text in prop::collection::vec(0u64..3, 0..60), l in 1usize..6) {
        prop_assert_eq!(duplicate_mask(&text, l), naive_mask(&text, l));
    }

    #[test]
    fn dedup_matches_naive_and_leaves_no_repeat(entries in entries_strategy(), l in 2usize..6) {
        let out = dedup_exact(&entries, l).unwrap();
        prop_assert_eq!(&out, &naive_dedup(&entries, l));
        // No window of length l appears twice among the survivors.
        let mut seen = std::collections::HashSet::new();
        for e in &out {
            for w in e.ids.windows(l) {
                prop_assert!(seen.insert(w.to_vec()), "window {:?} repeated", w);
            }
        }
        // Idempotent.
        prop_assert_eq!(dedup_exact(&out, l).unwrap(), out.clone());
    }

    #[test]
    fn filter_is_monotone_in_threshold(tokens in 0usize..500, chars in 0usize..500, t1 in 0.0f64..2.0, dt in 0.0f64..1.0) {
        if compression_filter(tokens, chars, t1) {
            prop_assert!(compression_filter(tokens, chars, t1 + dt));
        }
        prop_assert_eq!(compression_filter(tokens, chars, t1), chars > 0 && (tokens as f64) <= t1 * chars as f64);
    }

    #[test]
    fn packing_conserves_tokens(
        lens in prop::collection::vec(0usize..40, 1..12),
        seq_len in 1usize..24,
        seed in any::<u64>(),
    ) {
        let entries: Vec<TokenizedEntry> = lens
            .iter()
            .enumerate()
            .map(|(k, &n)| TokenizedEntry::new((0..n as u32).map(|j| 10 + (k as u32 * 7 + j) % 50).collect(), k))
            .collect();
        let total: usize = lens.iter().sum::<usize>() + lens.len() - 1;
        match pack(&entries, seq_len, 3, 64, seed) {
            Err(_) => prop_assert!(total < seq_len),
            Ok(ds) => {
                prop_assert_eq!(ds.len(), total / seq_len);
                prop_assert!(ds.sequences().all(|s| s.len() == seq_len));
                // The packed stream is a prefix of the entries joined by
                // separators in some order, and every id comes from an entry.
                let seps = ds.ids().iter().filter(|&&t| t == 3).count();
                let content = ds.ids().len() - seps;
                let available: usize = lens.iter().sum();
                prop_assert!(content <= available);
                prop_assert!(total - ds.ids().len() < seq_len);
                let counts = ds.unigram_counts();
                prop_assert_eq!(counts.iter().sum::<u64>() as usize, ds.ids().len());
            }
        }
    }

    #[test]
    fn prevalence_sort_matches_brute_force(ids in prop::collection::vec(5u32..12, 4..80), seq_len in 1usize..5) {
        let n = ids.len() / seq_len * seq_len;
        prop_assume!(n > 0);
        let ds = PackedDataset::new(ids[..n].to_vec(), seq_len, 12).unwrap();
        let total = n as f64;
        let mut counts = [0u64; 12];
        ids[..n].iter().for_each(|&t| counts[t as usize] += 1);
        let score = |s: &[u32]| {
            let mut c: Vec<u64> = s.iter().map(|&t| counts[t as usize]).collect();
            c.sort_unstable();
            c.iter().map(|&c| (c as f64 / total).ln()).sum::<f64>() / seq_len as f64
        };
        let scores = prevalence_scores(&ds);
        for (i, s) in ds.sequences().enumerate() {
            prop_assert_eq!(scores[i], score(s));
        }
        // Stable descending order by score, by insertion into a sorted list.
        let mut expect: Vec<usize> = Vec::new();
        for i in 0..ds.len() {
            let at = expect.iter().position(|&j| scores[j] < scores[i]).unwrap_or(expect.len());
            expect.insert(at, i);
        }
        let sorted = sort_by_prevalence(&ds);
        for (r, &i) in expect.iter().enumerate() {
            prop_assert_eq!(sorted.sequence(r), ds.sequence(i));
        }
        prop_assert_eq!(sorted.unigram_counts(), ds.unigram_counts());
        let again = sort_by_prevalence(&sorted);
        prop_assert_eq!(again.ids(), sorted.ids());
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.bin");
    let ds = PackedDataset::new((0..96).map(|i| i % 40).collect(), 8, 40).unwrap();
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.ids(), ds.ids());
    assert_eq!(back.seq_len(), 8);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_dataset(&path), Err(cramming::Error::Format { .. })));
}

#[test]
fn dedup_rejects_tiny_threshold() {
    let e = [TokenizedEntry::new(vec![1, 1, 1], 0)];
    assert!(dedup_exact(&e, 1).is_err());
}
