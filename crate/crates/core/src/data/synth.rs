//! Deterministic synthetic triple corpus.
//!
//! Source sentences are uniform draws from a small word list. The target
//! side applies a fixed bijective dictionary and then reverses the word
//! order, so translation needs reordering. Each source word is "spoken" as
//! a run of frames equal to a per-word Gaussian prototype plus noise.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::corpus::{Corpus, Frames, TextPair, TripleExample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_triples: usize,
    pub n_ext_pairs: usize,
    pub src_vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub ext_min_len: usize,
    pub ext_max_len: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    pub frame_dim: usize,
    pub noise_sigma: f64,
    pub n_dev: usize,
    pub n_test: usize,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 1,
            n_triples: 1000,
            n_ext_pairs: 20_000,
            src_vocab_size: 40,
            min_len: 3,
            max_len: 6,
            ext_min_len: 4,
            ext_max_len: 8,
            min_frames_per_token: 5,
            max_frames_per_token: 9,
            frame_dim: 16,
            noise_sigma: 0.1,
            n_dev: 200,
            n_test: 200,
            src_lang: "en".into(),
            tgt_lang: "fr".into(),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_triples == 0 {
            return bad("empty corpus: n_triples must be >= 1");
        }
        if self.src_vocab_size == 0 || self.frame_dim == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("src_vocab_size, frame_dim, n_dev and n_test must be >= 1");
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.ext_min_len == 0 || self.ext_min_len > self.ext_max_len {
            return bad("sentence length ranges must satisfy 1 <= min <= max");
        }
        if self.min_frames_per_token == 0 || self.min_frames_per_token > self.max_frames_per_token {
            return bad("frames-per-token range must satisfy 1 <= min <= max");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.src_lang == self.tgt_lang {
            return bad("source and target languages must differ");
        }
        Ok(())
    }
}

/// The bijective word dictionary plus the acoustic prototype of each source
/// word.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    /// `dictionary[i]` is the index in `tgt_words` of the translation of `src_words[i]`.
    pub dictionary: Vec<usize>,
    pub prototypes: Vec<Vec<f32>>,
    src_index: HashMap<String, usize>,
}

impl Lexicon {
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1e81);
        let n = spec.src_vocab_size;
        let src_words: Vec<String> = (0..n).map(|i| pseudo_word(i, SRC_SYLLABLES)).collect();
        let tgt_words: Vec<String> = (0..n).map(|i| pseudo_word(i, TGT_SYLLABLES)).collect();
        let mut dictionary: Vec<usize> = (0..n).collect();
        dictionary.shuffle(&mut rng);
        let prototypes = (0..n)
            .map(|_| (0..spec.frame_dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let src_index = src_words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Lexicon {
            src_words,
            tgt_words,
            dictionary,
            prototypes,
            src_index,
        }
    }

    pub fn src_id(&self, word: &str) -> Option<usize> {
        self.src_index.get(word).copied()
    }

    /// Dictionary lookup followed by reversal.
    pub fn translate(&self, source: &[usize]) -> Vec<String> {
        source
            .iter()
            .rev()
            .map(|&w| self.tgt_words[self.dictionary[w]].clone())
            .collect()
    }

    /// Inverse mapping of [`Lexicon::translate`] on the target side: maps
    /// each target word back through the inverse dictionary and restores
    /// the original order.
    pub fn back_translate(&self, target: &[String]) -> Option<Vec<String>> {
        let mut inverse = vec![0; self.dictionary.len()];
        for (s, &t) in self.dictionary.iter().enumerate() {
            inverse[t] = s;
        }
        target
            .iter()
            .rev()
            .map(|w| {
                let t = self.tgt_words.iter().position(|x| x == w)?;
                Some(self.src_words[inverse[t]].clone())
            })
            .collect()
    }
}

const SRC_SYLLABLES: &[&str] = &["ka", "lo", "mi", "ne", "su", "ta", "ri", "po"];
const TGT_SYLLABLES: &[&str] = &["zu", "vei", "qa", "xo", "fy", "jen", "wod", "gli"];

// Base-|syllables| spelling of `i`, at least two syllables long.
fn pseudo_word(mut i: usize, syl: &[&str]) -> String {
    let b = syl.len();
    let mut parts = Vec::new();
    loop {
        parts.push(syl[i % b]);
        i /= b;
        if i == 0 {
            break;
        }
    }
    if parts.len() < 2 {
        parts.push(syl[0]);
    }
    parts.reverse();
    parts.concat()
}

const SPLIT_TRAIN: u64 = 0x7121;
const SPLIT_DEV: u64 = 0xde70;
const SPLIT_TEST: u64 = 0x7e57;
const SPLIT_EXT: u64 = 0xe877;

pub fn generate_corpus(spec: &SynthSpec) -> Result<(Corpus, Lexicon)> {
    spec.validate()?;
    let lex = Lexicon::new(spec);
    let triples = |name: &str, salt: u64, n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt));
        (0..n)
            .map(|i| make_triple(spec, &lex, &mut rng, format!("{name}-{i:06}")))
            .collect::<Vec<_>>()
    };
    let train = triples("train", SPLIT_TRAIN, spec.n_triples);
    let dev = triples("dev", SPLIT_DEV, spec.n_dev);
    let test = triples("test", SPLIT_TEST, spec.n_test);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9).wrapping_add(SPLIT_EXT));
    let ext = (0..spec.n_ext_pairs)
        .map(|i| {
            let len = rng.random_range(spec.ext_min_len..=spec.ext_max_len);
            let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.src_vocab_size)).collect();
            TextPair {
                id: format!("ext-{i:06}"),
                source: words.iter().map(|&w| lex.src_words[w].clone()).collect(),
                target: lex.translate(&words),
                src_lang: spec.src_lang.clone(),
                tgt_lang: spec.tgt_lang.clone(),
            }
        })
        .collect();
    Ok((
        Corpus {
            train,
            dev,
            test,
            ext,
        },
        lex,
    ))
}

fn make_triple(spec: &SynthSpec, lex: &Lexicon, rng: &mut ChaCha8Rng, id: String) -> TripleExample {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let words: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.src_vocab_size)).collect();
    let noise = Normal::new(0.0f64, spec.noise_sigma).expect("sigma validated");
    let mut data = Vec::new();
    let mut n_frames = 0;
    for &w in &words {
        let k = rng.random_range(spec.min_frames_per_token..=spec.max_frames_per_token);
        for _ in 0..k {
            for &p in &lex.prototypes[w] {
                let eps = if spec.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(p + eps as f32);
            }
        }
        n_frames += k;
    }
    TripleExample {
        id,
        frames: Arc::new(Frames {
            n_frames,
            frame_dim: spec.frame_dim,
            data,
        }),
        transcript: words.iter().map(|&w| lex.src_words[w].clone()).collect(),
        translation: lex.translate(&words),
        src_lang: spec.src_lang.clone(),
        tgt_lang: spec.tgt_lang.clone(),
    }
}
