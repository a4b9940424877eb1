//! Seeded generator of English-like text.
//!
//! Documents are built from sentence templates over a Zipf-distributed
//! lexicon of real function words and invented content words. Each document
//! draws most of its nouns and verbs from one topic, which gives a masked
//! language model local structure to learn.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "br", "tr", "st", "sh", "ch", "th",
    "pl", "gr", "",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "a", "e", "o", "ea", "ou"];
const CODAS: &[&str] = &["", "", "", "", "n", "r", "l", "s", "t", "m", "nd", "st", "ng"];
const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "one", "each", "no", "his", "her", "their"];
const PREPOSITIONS: &[&str] =
    &["in", "on", "under", "with", "near", "from", "into", "over", "after", "before", "through", "without", "beside"];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "although", "so", "until", "since"];
const PRONOUNS: &[&str] = &["he", "she", "it", "they", "we", "you", "i"];
const AUXILIARIES: &[&str] = &["will", "could", "should", "might", "must", "can", "would"];

/// Shape of a generated corpus.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub topics: usize,
    /// Content words preferred by each topic, per category.
    pub topic_words: usize,
    /// Probability that a content word comes from the document's topic.
    pub topic_bias: f64,
    pub sentences: (usize, usize),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nouns: 1500,
            verbs: 600,
            adjectives: 500,
            topics: 40,
            topic_words: 60,
            topic_bias: 0.7,
            sentences: (4, 12),
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A much larger lexicon, enough to support a 32768-token vocabulary.
    pub fn large() -> Self {
        SynthConfig { nouns: 40_000, verbs: 15_000, adjectives: 12_000, topics: 200, ..Self::default() }
    }
}

/// Zipf(1) sampler over `n` ranks using a cumulative table.
#[derive(Clone, Debug)]
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut acc = 0.0;
        let cdf = (1..=n)
            .map(|r| {
                acc += 1.0 / r as f64;
                acc
            })
            .collect();
        Zipf { cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u = rng.random::<f64>() * self.cdf.last().copied().unwrap_or(0.0);
        self.cdf.partition_point(|&c| c < u).min(self.cdf.len() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    config: SynthConfig,
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    topics: Vec<[Vec<usize>; 3]>,
    noun_zipf: Zipf,
    verb_zipf: Zipf,
    adj_zipf: Zipf,
    topic_zipf: Zipf,
}

fn invent_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut std::collections::HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = match rng.random_range(0..10) {
            0..=3 => 1,
            4..=8 => 2,
            _ => 3,
        };
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(rng).unwrap());
            w.push_str(VOWELS.choose(rng).unwrap());
            w.push_str(CODAS.choose(rng).unwrap());
        }
        if w.len() >= 3 && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl SynthCorpus {
    pub fn new(config: SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut taken: std::collections::HashSet<String> = DETERMINERS
            .iter()
            .chain(PREPOSITIONS)
            .chain(CONJUNCTIONS)
            .chain(PRONOUNS)
            .chain(AUXILIARIES)
            .map(|s| s.to_string())
            .collect();
        let nouns = invent_words(&mut rng, config.nouns, &mut taken);
        let verbs = invent_words(&mut rng, config.verbs, &mut taken);
        let adjectives = invent_words(&mut rng, config.adjectives, &mut taken);
        let k = config.topic_words.max(1);
        let mut pick = |n: usize| -> Vec<usize> { (0..k).map(|_| rng.random_range(0..n)).collect() };
        let topics = (0..config.topics.max(1))
            .map(|_| [pick(nouns.len()), pick(verbs.len()), pick(adjectives.len())])
            .collect();
        SynthCorpus {
            noun_zipf: Zipf::new(nouns.len()),
            verb_zipf: Zipf::new(verbs.len()),
            adj_zipf: Zipf::new(adjectives.len()),
            topic_zipf: Zipf::new(config.topic_words.max(1)),
            config,
            nouns,
            verbs,
            adjectives,
            topics,
        }
    }

    fn word<'a, R: Rng>(&'a self, rng: &mut R, cat: usize, topic: usize) -> &'a str {
        let (list, zipf) = match cat {
            0 => (&self.nouns, &self.noun_zipf),
            1 => (&self.verbs, &self.verb_zipf),
            _ => (&self.adjectives, &self.adj_zipf),
        };
        if rng.random_bool(self.config.topic_bias) {
            let t = &self.topics[topic][cat];
            &list[t[self.topic_zipf.sample(rng)]]
        } else {
            &list[zipf.sample(rng)]
        }
    }

    fn noun_phrase<R: Rng>(&self, rng: &mut R, topic: usize, out: &mut Vec<String>) {
        out.push(DETERMINERS.choose(rng).unwrap().to_string());
        if rng.random_bool(0.4) {
            out.push(self.word(rng, 2, topic).to_string());
        }
        let n = self.word(rng, 0, topic);
        out.push(if rng.random_bool(0.2) { format!("{n}s") } else { n.to_string() });
        if rng.random_bool(0.15) {
            out.push(PREPOSITIONS.choose(rng).unwrap().to_string());
            out.push(DETERMINERS.choose(rng).unwrap().to_string());
            out.push(self.word(rng, 0, topic).to_string());
        }
    }

    fn clause<R: Rng>(&self, rng: &mut R, topic: usize, out: &mut Vec<String>) {
        if rng.random_bool(0.3) {
            out.push(PRONOUNS.choose(rng).unwrap().to_string());
        } else {
            self.noun_phrase(rng, topic, out);
        }
        let v = self.word(rng, 1, topic);
        match rng.random_range(0..4) {
            0 => out.push(format!("{v}ed")),
            1 => out.push(format!("{v}s")),
            2 => {
                out.push(AUXILIARIES.choose(rng).unwrap().to_string());
                out.push(v.to_string());
            }
            _ => {
                out.push("was".into());
                out.push(format!("{v}ing"));
            }
        }
        match rng.random_range(0..5) {
            0 => {
                out.push(PREPOSITIONS.choose(rng).unwrap().to_string());
                self.noun_phrase(rng, topic, out);
            }
            1 => {
                let a = self.word(rng, 2, topic);
                out.push(format!("{a}ly"));
            }
            _ => self.noun_phrase(rng, topic, out),
        }
    }

    fn sentence<R: Rng>(&self, rng: &mut R, topic: usize) -> String {
        let mut words = Vec::new();
        if rng.random_bool(0.15) {
            words.push(PREPOSITIONS.choose(rng).unwrap().to_string());
            words.push(rng.random_range(1700..2030).to_string());
            words.push(",".into());
        }
        self.clause(rng, topic, &mut words);
        if rng.random_bool(0.35) {
            if rng.random_bool(0.5) {
                words.push(",".into());
            }
            words.push(CONJUNCTIONS.choose(rng).unwrap().to_string());
            self.clause(rng, topic, &mut words);
        }
        let mut s = String::new();
        for w in &words {
            if !s.is_empty() && w != "," {
                s.push(' ');
            }
            s.push_str(w);
        }
        s.push(if rng.random_bool(0.1) { '?' } else { '.' });
        let mut chars = s.chars();
        match chars.next() {
            Some(c) => c.to_ascii_uppercase().to_string() + chars.as_str(),
            None => s,
        }
    }

    /// One paragraph of `config.sentences` sentences on a single topic.
    pub fn document<R: Rng>(&self, rng: &mut R) -> String {
        let topic = rng.random_range(0..self.topics.len());
        let (lo, hi) = self.config.sentences;
        let n = rng.random_range(lo..=hi.max(lo));
        (0..n).map(|_| self.sentence(rng, topic)).collect::<Vec<_>>().join(" ")
    }

    pub fn documents(&self, n: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.document(&mut rng)).collect()
    }

    /// Documents totalling at least `chars` characters.
    pub fn documents_with_chars(&self, chars: usize, seed: u64) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut total = 0;
        while total < chars {
            let d = self.document(&mut rng);
            total += d.len() + 1;
            out.push(d);
        }
        out
    }
}

/// Markup-like noise that tokenizes at roughly one token per character.
pub fn tag_soup<R: Rng>(rng: &mut R, chars: usize) -> String {
    const TAGS: &[&str] = &["div", "span", "td", "li", "a", "p", "tr", "img", "br"];
    const ATTRS: &[&str] = &["id", "class", "style", "href", "src", "data-x"];
    let mut s = String::new();
    while s.len() < chars {
        let tag = TAGS.choose(rng).unwrap();
        let attr = ATTRS.choose(rng).unwrap();
        let value: String = (0..rng.random_range(3..8))
            .map(|_| {
                let c = rng.random_range(0..36u8);
                if c < 10 { (b'0' + c) as char } else { (b'a' + c - 10) as char }
            })
            .collect();
        let sym = ["{", "}", ";", ":", "#", "%", "&", "=", "/"].choose(rng).unwrap();
        s.push_str(&format!("<{tag} {attr}=\"{sym}{value}\"></{tag}>{sym}"));
    }
    s
}
