use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::rc::Rc;

use super::{normalize, pre_tokenize, Vocab, WordPieceModel, CONTINUATION, SPECIALS};
use crate::error::{Error, Result};

type Pair = (u32, u32);

/// Heap entry carrying the counts it was scored with; stale entries are
/// detected on pop by comparing against the live counts.
struct Candidate {
    pair: Pair,
    count: u64,
    left_count: u64,
    right_count: u64,
    left: Rc<str>,
    right: Rc<str>,
}

impl Candidate {
    fn score_cmp(&self, other: &Self) -> Ordering {
        let a = self.count as u128 * other.left_count as u128 * other.right_count as u128;
        let b = other.count as u128 * self.left_count as u128 * self.right_count as u128;
        a.cmp(&b)
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // Higher score first, then lexicographically smaller (left, right).
        self.score_cmp(other)
            .then_with(|| (&*other.left, &*other.right).cmp(&(&*self.left, &*self.right)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

struct Word {
    symbols: Vec<u32>,
    freq: u64,
}

#[derive(Default)]
struct State {
    names: Vec<Rc<str>>,
    lookup: HashMap<Rc<str>, u32>,
    symbol_counts: Vec<u64>,
    pair_counts: HashMap<Pair, u64>,
    pair_words: HashMap<Pair, Vec<u32>>,
    symbol_pairs: Vec<HashSet<Pair>>,
    heap: BinaryHeap<Candidate>,
}

impl State {
    fn intern(&mut self, s: &str) -> (u32, bool) {
        if let Some(&id) = self.lookup.get(s) {
            return (id, false);
        }
        let id = self.names.len() as u32;
        let rc: Rc<str> = Rc::from(s);
        self.names.push(rc.clone());
        self.lookup.insert(rc, id);
        self.symbol_counts.push(0);
        self.symbol_pairs.push(HashSet::new());
        (id, true)
    }

    fn add_pair(&mut self, p: Pair, delta: i64) {
        let c = self.pair_counts.entry(p).or_insert(0);
        let was = *c;
        *c = (*c as i64 + delta) as u64;
        if *c == 0 {
            self.pair_counts.remove(&p);
            self.symbol_pairs[p.0 as usize].remove(&p);
            self.symbol_pairs[p.1 as usize].remove(&p);
        } else if was == 0 {
            self.symbol_pairs[p.0 as usize].insert(p);
            self.symbol_pairs[p.1 as usize].insert(p);
        }
    }

    fn push(&mut self, p: Pair) {
        if let Some(&count) = self.pair_counts.get(&p) {
            self.heap.push(Candidate {
                pair: p,
                count,
                left_count: self.symbol_counts[p.0 as usize],
                right_count: self.symbol_counts[p.1 as usize],
                left: self.names[p.0 as usize].clone(),
                right: self.names[p.1 as usize].clone(),
            });
        }
    }

    fn is_live(&self, c: &Candidate) -> bool {
        self.pair_counts.get(&c.pair) == Some(&c.count)
            && self.symbol_counts[c.pair.0 as usize] == c.left_count
            && self.symbol_counts[c.pair.1 as usize] == c.right_count
    }

    /// Adds (`sign` = 1) or removes (`sign` = -1) a word's contribution to
    /// the symbol and pair tables, recording touched pairs.
    fn account(&mut self, w: &Word, idx: u32, sign: i64, touched: &mut HashSet<Pair>) {
        let f = w.freq as i64 * sign;
        for &s in &w.symbols {
            self.symbol_counts[s as usize] = (self.symbol_counts[s as usize] as i64 + f) as u64;
        }
        for win in w.symbols.windows(2) {
            let p = (win[0], win[1]);
            self.add_pair(p, f);
            if sign > 0 {
                self.pair_words.entry(p).or_default().push(idx);
            }
            touched.insert(p);
        }
    }
}

/// Trains a WordPiece vocabulary of exactly `vocab_size` tokens: the special
/// tokens, every initial symbol seen in the corpus, then merged subwords
/// chosen greedily by `count(ab) / (count(a)·count(b))`.
pub fn train_wordpiece<I, S>(corpus: I, vocab_size: usize) -> Result<WordPieceModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<(String, bool), u64> = HashMap::new();
    for text in corpus {
        let normalized = normalize(text.as_ref());
        for piece in pre_tokenize(&normalized) {
            *counts.entry((piece.text.to_string(), piece.glued)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("tokenizer corpus is empty after normalization".into()));
    }
    let mut keys: Vec<_> = counts.into_iter().collect();
    keys.sort_unstable();

    let mut st = State::default();
    let mut alphabet = std::collections::BTreeSet::new();
    let mut words = Vec::with_capacity(keys.len());
    let mut buf = String::new();
    for ((text, glued), freq) in keys {
        let mut symbols = Vec::with_capacity(text.len());
        for (i, c) in text.char_indices() {
            buf.clear();
            if i > 0 || glued {
                buf.push_str(CONTINUATION);
            }
            buf.push(c);
            alphabet.insert(buf.clone());
            symbols.push(st.intern(&buf).0);
        }
        words.push(Word { symbols, freq });
    }
    let base = SPECIALS.len() + alphabet.len();
    if vocab_size < base {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than {} specials plus an alphabet of {}",
            SPECIALS.len(),
            alphabet.len()
        )));
    }

    let mut touched = HashSet::new();
    for (i, w) in words.iter().enumerate() {
        st.account(w, i as u32, 1, &mut touched);
    }
    let mut initial: Vec<Pair> = touched.drain().collect();
    initial.sort_unstable();
    for p in initial {
        st.push(p);
    }

    let mut merged: Vec<Rc<str>> = Vec::new();
    while base + merged.len() < vocab_size {
        let Some(best) = st.heap.pop() else {
            return Err(Error::Config(format!(
                "corpus supports only {} tokens, {vocab_size} requested",
                base + merged.len()
            )));
        };
        if !st.is_live(&best) {
            continue;
        }
        let (a, b) = best.pair;
        let joined = format!("{}{}", best.left, best.right.strip_prefix(CONTINUATION).unwrap_or(&best.right));
        let (c, fresh) = st.intern(&joined);
        if fresh {
            merged.push(st.names[c as usize].clone());
        }

        let mut seen = HashSet::new();
        let holders = st.pair_words.remove(&best.pair).unwrap_or_default();
        for idx in holders {
            if !seen.insert(idx) {
                continue;
            }
            let w = &words[idx as usize];
            if !w.symbols.windows(2).any(|x| x[0] == a && x[1] == b) {
                continue;
            }
            let freq = w.freq;
            let mut symbols = Vec::with_capacity(w.symbols.len());
            let mut i = 0;
            while i < w.symbols.len() {
                if i + 1 < w.symbols.len() && w.symbols[i] == a && w.symbols[i + 1] == b {
                    symbols.push(c);
                    i += 2;
                } else {
                    symbols.push(w.symbols[i]);
                    i += 1;
                }
            }
            let old = std::mem::replace(&mut words[idx as usize], Word { symbols, freq });
            st.account(&old, idx, -1, &mut touched);
            st.account(&words[idx as usize], idx, 1, &mut touched);
        }
        for s in [a, b, c] {
            touched.extend(st.symbol_pairs[s as usize].iter().copied());
        }
        let mut batch: Vec<Pair> = touched.drain().collect();
        batch.sort_unstable();
        for p in batch {
            st.push(p);
        }
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    tokens.extend(merged.iter().map(|s| s.to_string()));
    Ok(WordPieceModel::new(Vocab::new(tokens)?))
}
