use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Corpus BLEU with the statistics it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// In `[0, 1]`.
    pub bleu: f64,
    /// Clipped n-gram precisions for n = 1..4.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    pub matches: [usize; 4],
    pub totals: [usize; 4],
}

impl fmt::Display for BleuReport {
    /// Mirrors the summary line of the standard `multi-bleu` script.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ratio = if self.ref_len == 0 {
            0.0
        } else {
            self.hyp_len as f64 / self.ref_len as f64
        };
        let p = self.precisions.map(|x| 100.0 * x);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            100.0 * self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            ratio,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Sufficient statistics of corpus BLEU; they add across sentences.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<'w, 's>(words: &'w [&'s str], n: usize) -> HashMap<&'w [&'s str], usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

impl BleuStats {
    pub fn sentence(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = BleuStats {
            hyp_len: h.len(),
            ref_len: r.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            for (g, &c) in &hc {
                s.totals[n - 1] += c;
                s.matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
        }
        s
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    /// Unsmoothed geometric mean of the four precisions times the brevity
    /// penalty; any zero precision gives zero.
    pub fn report(&self) -> BleuReport {
        let mut precisions = [0.0; 4];
        for n in 0..4 {
            if self.totals[n] > 0 {
                precisions[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        let bleu = if precisions.iter().all(|&p| p > 0.0) {
            brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
        } else {
            0.0
        };
        BleuReport {
            bleu,
            precisions,
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
            matches: self.matches,
            totals: self.totals,
        }
    }
}

fn check_aligned(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::CorpusAlignment {
            path: "<memory>".into(),
            detail: format!("{a} hypotheses but {b} {what}"),
        });
    }
    Ok(())
}

/// Corpus BLEU of whitespace-tokenized hypotheses against one reference
/// per line.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<BleuReport> {
    check_aligned("references", hypotheses.len(), references.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
    }
    Ok(total.report())
}

/// Inclusive source-length range `[lo, hi]` in tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bucket {
    pub lo: usize,
    pub hi: usize,
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hi == usize::MAX {
            write!(f, "{}+", self.lo)
        } else {
            write!(f, "{}-{}", self.lo, self.hi)
        }
    }
}

/// Parses `"1-10,11-20,21+"` into buckets.
pub fn parse_buckets(spec: &str) -> Result<Vec<Bucket>> {
    let bad = || Error::Config(format!("bad bucket spec `{spec}`; expected e.g. 1-10,11-20,21+"));
    spec.split(',')
        .map(|part| {
            let part = part.trim();
            if let Some(lo) = part.strip_suffix('+') {
                let lo = lo.parse().map_err(|_| bad())?;
                return Ok(Bucket { lo, hi: usize::MAX });
            }
            let (lo, hi) = part.split_once('-').ok_or_else(bad)?;
            let (lo, hi): (usize, usize) = (lo.parse().map_err(|_| bad())?, hi.parse().map_err(|_| bad())?);
            if lo > hi {
                return Err(bad());
            }
            Ok(Bucket { lo, hi })
        })
        .collect()
}

/// Corpus BLEU per source-length bucket. Buckets that receive no sentence
/// are omitted.
pub fn bleu_by_source_length<S, R, X>(
    hypotheses: &[S],
    references: &[R],
    sources: &[X],
    buckets: &[Bucket],
) -> Result<Vec<(Bucket, usize, BleuReport)>>
where
    S: AsRef<str>,
    R: AsRef<str>,
    X: AsRef<str>,
{
    check_aligned("references", hypotheses.len(), references.len())?;
    check_aligned("sources", hypotheses.len(), sources.len())?;
    let mut stats = vec![(0usize, BleuStats::default()); buckets.len()];
    for ((h, r), s) in hypotheses.iter().zip(references).zip(sources) {
        let len = s.as_ref().split_whitespace().count();
        if let Some(i) = buckets.iter().position(|b| b.lo <= len && len <= b.hi) {
            stats[i].0 += 1;
            stats[i].1.add(&BleuStats::sentence(h.as_ref(), r.as_ref()));
        }
    }
    Ok(buckets
        .iter()
        .zip(stats)
        .filter(|(_, (count, _))| *count > 0)
        .map(|(b, (count, s))| (*b, count, s.report()))
        .collect())
}
