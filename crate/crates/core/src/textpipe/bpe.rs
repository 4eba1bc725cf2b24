//! Byte-pair encoding over Unicode characters.
//!
//! Learning greedily merges the most frequent adjacent symbol pair inside
//! words, weighted by word frequency. Segmented output marks every
//! non-final piece of a word with [`CONTINUATION`], so detokenization is
//! "strip the marker, join with the next piece".

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util;

pub const CONTINUATION: &str = "@@";
const VERSION_LINE: &str = "#version: 0.2";

/// Ordered merge rules, most frequent first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MergeTable {
    rules: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl MergeTable {
    pub fn new(rules: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::with_capacity(rules.len());
        for (i, r) in rules.iter().enumerate() {
            if ranks.insert(r.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate merge rule {r:?}")));
            }
        }
        Ok(MergeTable { rules, ranks })
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::from(VERSION_LINE);
        out.push('\n');
        for (a, b) in &self.rules {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(first) if first.starts_with("#version") => {}
            _ => {
                return Err(Error::Integrity(
                    "merge file must start with a version comment".into(),
                ))
            }
        }
        let mut rules = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                    rules.push((a.to_owned(), b.to_owned()))
                }
                _ => {
                    return Err(Error::Integrity(format!(
                        "malformed merge rule on line {}: {line:?}",
                        n + 2
                    )))
                }
            }
        }
        Self::new(rules)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&io_util::read_to_string(path)?)
    }

    /// Splits one word into pieces, applying rules in learned order.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        let mut pieces: Vec<String> = word.chars().map(String::from).collect();
        loop {
            let best = pieces
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&rank| (rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.rules[rank];
            let mut merged = Vec::with_capacity(pieces.len());
            let mut i = 0;
            while i < pieces.len() {
                if i + 1 < pieces.len() && &pieces[i] == a && &pieces[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut pieces[i]));
                    i += 1;
                }
            }
            pieces = merged;
        }
        pieces
    }

    /// Segments a whitespace-tokenized sentence into marked subwords.
    pub fn apply<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<String> {
        let mut out = Vec::new();
        for word in sentence {
            let pieces = self.segment_word(word.as_ref());
            let last = pieces.len().saturating_sub(1);
            for (i, p) in pieces.into_iter().enumerate() {
                if i < last {
                    out.push(format!("{p}{CONTINUATION}"));
                } else {
                    out.push(p);
                }
            }
        }
        out
    }

    pub fn apply_line(&self, line: &str) -> Vec<String> {
        let words: Vec<&str> = line.split_whitespace().collect();
        self.apply(&words)
    }
}

/// Learns up to `num_merges` rules from whitespace-tokenized lines. Ties
/// between equally frequent pairs go to the lexicographically smallest.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<MergeTable> {
    let mut word_counts: BTreeMap<&str, u64> = BTreeMap::new();
    for line in corpus {
        for w in line.as_ref().split_whitespace() {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Domain("cannot learn BPE from an empty corpus".into()));
    }
    let mut words: Vec<(Vec<String>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.chars().map(String::from).collect(), c))
        .collect();

    let mut rules = Vec::with_capacity(num_merges);
    while rules.len() < num_merges {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, count) in &words {
            for w in symbols.windows(2) {
                *pair_counts.entry((&w[0], &w[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), count)) = best else { break };
        // A pair seen once in the whole corpus does not repeat.
        if count < 2 {
            break;
        }
        let (a, b) = (a.to_owned(), b.to_owned());
        let joined = format!("{a}{b}");
        for (symbols, _) in words.iter_mut() {
            if symbols.len() < 2 {
                continue;
            }
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == a && symbols[i + 1] == b {
                    merged.push(joined.clone());
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut symbols[i]));
                    i += 1;
                }
            }
            *symbols = merged;
        }
        rules.push((a, b));
    }
    MergeTable::new(rules)
}

/// Joins marked subwords back into a space-separated sentence.
pub fn detokenize<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    let mut at_word_start = true;
    for p in pieces {
        let p = p.as_ref();
        if at_word_start && !out.is_empty() {
            out.push(' ');
        }
        match p.strip_suffix(CONTINUATION) {
            Some(stem) => {
                out.push_str(stem);
                at_word_start = false;
            }
            None => {
                out.push_str(p);
                at_word_start = true;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn freq_corpus() -> Vec<String> {
        let mut lines = Vec::new();
        for (w, n) in [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)] {
            for _ in 0..n {
                lines.push(w.to_string());
            }
        }
        lines
    }

    /// Independent pair counter over the frequency table.
    fn brute_force_best_pair(table: &[(&str, u64)]) -> (String, String) {
        let mut best: Option<((String, String), u64)> = None;
        for (w, _) in table {
            let chars: Vec<char> = w.chars().collect();
            for i in 0..chars.len().saturating_sub(1) {
                let pair = (chars[i].to_string(), chars[i + 1].to_string());
                let total: u64 = table
                    .iter()
                    .map(|(w2, c2)| {
                        let cs: Vec<char> = w2.chars().collect();
                        let hits = cs
                            .windows(2)
                            .filter(|x| x[0].to_string() == pair.0 && x[1].to_string() == pair.1)
                            .count() as u64;
                        hits * c2
                    })
                    .sum();
                let better = match &best {
                    None => true,
                    Some((bp, bc)) => total > *bc || (total == *bc && pair < *bp),
                };
                if better {
                    best = Some((pair, total));
                }
            }
        }
        best.unwrap().0
    }

    #[test]
    fn first_merge_matches_brute_force() {
        let oracle =
            brute_force_best_pair(&[("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)]);
        assert_eq!(oracle, ("e".to_string(), "s".to_string()));
        let table = learn_bpe(&freq_corpus(), 1).unwrap();
        assert_eq!(table.rules(), &[("e".to_string(), "s".to_string())]);
    }

    #[test]
    fn zero_merges_and_single_character_corpus() {
        assert!(learn_bpe(&freq_corpus(), 0).unwrap().is_empty());
        assert!(learn_bpe(&["a"], 10).unwrap().is_empty());
        assert!(matches!(learn_bpe::<&str>(&[], 3), Err(Error::Domain(_))));
        assert!(matches!(learn_bpe(&["   "], 3), Err(Error::Domain(_))));
    }

    #[test]
    fn apply_examples() {
        let empty = MergeTable::default();
        assert_eq!(empty.apply(&["ab"]), vec!["a@@", "b"]);
        let ab = MergeTable::new(vec![("a".into(), "b".into())]).unwrap();
        assert_eq!(ab.apply(&["ab"]), vec!["ab"]);
        assert_eq!(ab.apply(&["abc", "b"]), vec!["ab@@", "c", "b"]);
    }

    #[test]
    fn merge_file_round_trip() {
        let table = learn_bpe(&freq_corpus(), 5).unwrap();
        let text = table.to_file_string();
        assert!(text.starts_with("#version"));
        assert_eq!(MergeTable::parse(&text).unwrap(), table);
        assert!(MergeTable::parse("a b\n").is_err());
    }

    #[test]
    fn learned_rules_apply_to_training_words() {
        let table = learn_bpe(&freq_corpus(), 50).unwrap();
        for w in ["low", "lower", "newest", "widest"] {
            assert_eq!(table.apply(&[w]), vec![w.to_string()]);
        }
    }

    proptest! {
        #[test]
        fn strip_and_join_reproduces_words(
            words in proptest::collection::vec("[a-eé]{1,9}", 1..8),
        ) {
            let table = learn_bpe(&["abc abd bcd ebe ééa abcde", "dab cab aéé"], 12).unwrap();
            let pieces = table.apply(&words);
            prop_assert_eq!(detokenize(&pieces), words.join(" "));
            // Re-segmenting any produced piece keeps it whole.
            for p in &pieces {
                let stem = p.strip_suffix(CONTINUATION).unwrap_or(p);
                prop_assert_eq!(table.segment_word(stem), vec![stem.to_string()]);
            }
            prop_assert_eq!(table.apply_line(&detokenize(&pieces)), pieces);
        }
    }

    #[test]
    fn round_trip_on_1000_random_words() {
        use rand::{Rng, SeedableRng};
        let table = learn_bpe(&freq_corpus(), 20).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let alphabet: Vec<char> = "lowerndistzß".chars().collect();
        for _ in 0..1000 {
            let len = rng.random_range(1..12);
            let w: String = (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect();
            let pieces = table.apply(&[w.as_str()]);
            assert_eq!(detokenize(&pieces), w);
        }
    }
}
