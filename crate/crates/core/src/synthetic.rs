//! Deterministic toy translation tasks for tests and demonstrations.
//!
//! Sentences are drawn from a small random lexicon. The copy task maps a
//! sentence to itself; the transliteration task enciphers every letter
//! through a fixed permutation and reverses the word order, so a
//! character decoder must spell each source word in a new alphabet while
//! attending right to left.

use std::collections::HashMap;
use std::ops::RangeInclusive;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::textpipe::ParallelCorpus;

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    lexicon: Vec<String>,
    cipher: HashMap<char, char>,
    reverse: bool,
}

impl SyntheticTask {
    /// Identity mapping, original word order.
    pub fn copy(lexicon_size: usize, word_len: RangeInclusive<usize>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SyntheticTask {
            lexicon: lexicon(&mut rng, lexicon_size, word_len)?,
            cipher: LETTERS.chars().map(|c| (c, c)).collect(),
            reverse: false,
        })
    }

    /// Letter substitution plus word-order reversal.
    pub fn transliteration(lexicon_size: usize, word_len: RangeInclusive<usize>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lexicon = lexicon(&mut rng, lexicon_size, word_len)?;
        let mut image: Vec<char> = LETTERS.chars().collect();
        image.shuffle(&mut rng);
        Ok(SyntheticTask {
            lexicon,
            cipher: LETTERS.chars().zip(image).collect(),
            reverse: true,
        })
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    pub fn translate(&self, source: &str) -> String {
        let mut words: Vec<String> = source
            .split_whitespace()
            .map(|w| w.chars().map(|c| *self.cipher.get(&c).unwrap_or(&c)).collect())
            .collect();
        if self.reverse {
            words.reverse();
        }
        words.join(" ")
    }

    /// `pairs` random sentences with a uniform word count in `words`.
    pub fn sample(&self, pairs: usize, words: RangeInclusive<usize>, seed: u64) -> Result<ParallelCorpus> {
        if words.is_empty() || *words.start() == 0 {
            return Err(Error::Config("sentence length range must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut source = Vec::with_capacity(pairs);
        let mut target = Vec::with_capacity(pairs);
        for _ in 0..pairs {
            let n = rng.random_range(words.clone());
            let line: Vec<&str> = (0..n)
                .map(|_| self.lexicon[rng.random_range(0..self.lexicon.len())].as_str())
                .collect();
            let line = line.join(" ");
            target.push(self.translate(&line));
            source.push(line);
        }
        ParallelCorpus::new(source, target)
    }
}

fn lexicon(rng: &mut ChaCha8Rng, size: usize, word_len: RangeInclusive<usize>) -> Result<Vec<String>> {
    if size == 0 || word_len.is_empty() || *word_len.start() == 0 {
        return Err(Error::Config("lexicon needs a positive size and word length".into()));
    }
    let letters: Vec<char> = LETTERS.chars().collect();
    let mut words = Vec::with_capacity(size);
    let mut attempts = 0;
    while words.len() < size {
        attempts += 1;
        if attempts > size * 1000 {
            return Err(Error::Config(format!("cannot draw {size} distinct words")));
        }
        let len = rng.random_range(word_len.clone());
        let w: String = (0..len).map(|_| letters[rng.random_range(0..letters.len())]).collect();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    Ok(words)
}
