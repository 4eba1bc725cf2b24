//! Corpus BLEU and the two diagnostic analyses: BLEU by source length and
//! per-word NLL differences by training frequency.

mod bleu;
mod frequency;

pub use bleu::{bleu, bleu_by_source_length, parse_buckets, BleuReport, BleuStats, Bucket};
pub use frequency::{
    power_of_two_buckets, word_frequencies, word_nll_by_frequency, word_nlls, FrequencyRow, WordScorer,
};

/// `bucket<TAB>count<TAB>value` lines.
pub fn format_tsv<B: std::fmt::Display>(rows: &[(B, usize, f64)]) -> String {
    let mut out = String::new();
    for (b, n, v) in rows {
        out.push_str(&format!("{b}\t{n}\t{v:.6}\n"));
    }
    out
}
