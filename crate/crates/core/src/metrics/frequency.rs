use std::collections::HashMap;

use super::bleu::Bucket;
use crate::decode::Member;
use crate::error::{Error, Result};
use crate::model::sequence_log_prob;
use crate::numerics::Real;
use crate::textpipe::{Codec, ParallelCorpus, Unit, CONTINUATION, EOS_ID};

/// A model together with the pipelines that turn text into its indices.
#[derive(Clone, Copy, Debug)]
pub struct WordScorer<'a, T> {
    pub member: Member<'a, T>,
    pub source: &'a Codec,
    pub target: &'a Codec,
}

/// Whitespace-token counts over a corpus.
pub fn word_frequencies<S: AsRef<str>>(lines: &[S]) -> HashMap<String, u64> {
    let mut counts = HashMap::new();
    for line in lines {
        for w in line.as_ref().split_whitespace() {
            *counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    counts
}

/// `[0, 0]`, `[1, 1]`, `[2, 3]`, `[4, 7]`, ... up to the bucket holding
/// `max_count`.
pub fn power_of_two_buckets(max_count: u64) -> Vec<Bucket> {
    let mut out = vec![Bucket { lo: 0, hi: 0 }];
    let mut lo = 1usize;
    loop {
        out.push(Bucket { lo, hi: 2 * lo - 1 });
        if (2 * lo - 1) as u64 >= max_count {
            break;
        }
        lo *= 2;
    }
    out
}

/// Negative log-probability of every reference word under teacher forcing,
/// in sentence order. A subword-level word costs the sum over its pieces;
/// a character-level word also pays for the space (or, for the last word,
/// the EOS) that ends it.
pub fn word_nlls<T: Real>(scorer: &WordScorer<'_, T>, source: &str, reference: &str) -> Result<Vec<(String, f64)>> {
    let boundary_err = |why: &str| Error::WordBoundary(format!("{why} in sentence {reference:?}"));
    let mut src = scorer.source.encode(source);
    src.push(EOS_ID);
    let symbols = scorer.target.segment(reference);
    let mut tgt = scorer.target.vocab().encode(&symbols);
    tgt.push(EOS_ID);
    let score = sequence_log_prob(scorer.member.params, scorer.member.config, &src, &tgt)?;
    let nll: Vec<f64> = score.per_position.iter().map(|l| -l).collect();

    let mut words = Vec::new();
    let mut current = String::new();
    let mut cost = 0.0;
    match scorer.target.unit() {
        Unit::Subword => {
            for (sym, c) in symbols.iter().zip(&nll) {
                cost += c;
                match sym.strip_suffix(CONTINUATION) {
                    Some(stem) => current.push_str(stem),
                    None => {
                        current.push_str(sym);
                        words.push((std::mem::take(&mut current), cost));
                        cost = 0.0;
                    }
                }
            }
            if !current.is_empty() {
                return Err(boundary_err("last subword carries a continuation marker"));
            }
        }
        Unit::Character => {
            for (sym, c) in symbols.iter().zip(&nll) {
                cost += c;
                if sym.chars().all(char::is_whitespace) {
                    if current.is_empty() {
                        return Err(boundary_err("empty word"));
                    }
                    words.push((std::mem::take(&mut current), cost));
                    cost = 0.0;
                } else {
                    current.push_str(sym);
                }
            }
            if !current.is_empty() {
                cost += nll[symbols.len()];
                words.push((current, cost));
            }
        }
    }
    let expected: Vec<&str> = reference.split_whitespace().collect();
    let got: Vec<&str> = words.iter().map(|(w, _)| w.as_str()).collect();
    if got != expected {
        return Err(boundary_err(&format!("reconstructed words {got:?} differ")));
    }
    Ok(words)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyRow {
    pub bucket: Bucket,
    pub count: usize,
    /// Mean of `NLL_A(w) - NLL_B(w)` over the words in the bucket.
    pub mean_diff: f64,
}

/// Mean per-word NLL difference between two models, bucketed by each
/// word's training-corpus frequency. Empty buckets are omitted.
pub fn word_nll_by_frequency<T: Real>(
    a: &WordScorer<'_, T>,
    b: &WordScorer<'_, T>,
    test: &ParallelCorpus,
    frequencies: &HashMap<String, u64>,
    buckets: &[Bucket],
) -> Result<Vec<FrequencyRow>> {
    let mut sums = vec![(0usize, 0.0f64); buckets.len()];
    for (src, reference) in test.pairs() {
        let wa = word_nlls(a, src, reference)?;
        let wb = word_nlls(b, src, reference)?;
        for ((word, na), (_, nb)) in wa.iter().zip(&wb) {
            let f = frequencies.get(word).copied().unwrap_or(0) as usize;
            if let Some(i) = buckets.iter().position(|bk| bk.lo <= f && f <= bk.hi) {
                sums[i].0 += 1;
                sums[i].1 += na - nb;
            }
        }
    }
    Ok(buckets
        .iter()
        .zip(sums)
        .filter(|(_, (n, _))| *n > 0)
        .map(|(bk, (n, total))| FrequencyRow {
            bucket: *bk,
            count: n,
            mean_diff: total / n as f64,
        })
        .collect())
}
