use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io_util;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const PAD_ID: usize = 3;

const RESERVED: [&str; 4] = [BOS, EOS, UNK, PAD];

/// Granularity of the symbols a vocabulary holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unit {
    Subword,
    Character,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Subword => "subword",
            Unit::Character => "char",
        }
    }

    /// Splits a line into symbols of this unit. Characters are Unicode
    /// scalar values and spaces are kept as ordinary symbols.
    pub fn split(self, line: &str) -> Vec<String> {
        match self {
            Unit::Subword => line.split_whitespace().map(str::to_owned).collect(),
            Unit::Character => line.chars().map(String::from).collect(),
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subword" | "bpe" => Ok(Unit::Subword),
            "char" | "character" => Ok(Unit::Character),
            other => Err(Error::Config(format!("unknown unit `{other}`"))),
        }
    }
}

/// Bidirectional symbol/index map. Indices 0..4 hold the reserved
/// BOS, EOS, UNK and PAD symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    unit: Unit,
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from an ordered list of non-reserved symbols.
    pub fn from_symbols<I, S>(unit: Unit, symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(symbols.into_iter().map(Into::into));
        Self::from_full_list(unit, all.collect())
    }

    fn from_full_list(unit: Unit, symbols: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Integrity(format!(
                    "vocabulary must start with reserved symbol `{r}` at index {i}"
                )));
            }
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Vocabulary {
            unit,
            symbols,
            index,
        })
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    /// Index of `symbol`, or UNK when it is out of vocabulary.
    pub fn encode_symbol(&self, symbol: &str) -> usize {
        self.index_of(symbol).unwrap_or(UNK_ID)
    }

    pub fn encode(&self, symbols: &[String]) -> Vec<usize> {
        symbols.iter().map(|s| self.encode_symbol(s)).collect()
    }

    pub fn decode(&self, indices: &[usize]) -> Result<Vec<&str>> {
        indices
            .iter()
            .map(|&i| {
                self.symbol(i).ok_or(Error::Vocabulary {
                    index: i,
                    size: self.len(),
                })
            })
            .collect()
    }

    /// One symbol per line, in index order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for s in &self.symbols {
            out.push_str(s);
            out.push('\n');
        }
        out
    }

    pub fn parse(unit: Unit, text: &str) -> Result<Self> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        Self::from_full_list(unit, body.split('\n').map(str::to_owned).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io_util::write_atomic(path, self.to_file_string().as_bytes())
    }

    pub fn load(unit: Unit, path: &Path) -> Result<Self> {
        Self::parse(unit, &io_util::read_to_string(path)?)
    }
}

/// Frequency-ranked vocabulary over a corpus, truncated to `max_size`
/// symbols in total (reserved symbols included). Ties are broken by
/// symbol order so the result is deterministic.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], unit: Unit, max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() + 1 {
        return Err(Error::Config(format!(
            "vocabulary max size {max_size} leaves no room beside the reserved symbols (need >= 5)"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for s in unit.split(line.as_ref()) {
            if !RESERVED.contains(&s.as_str()) {
                *counts.entry(s).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_symbols(unit, ranked.into_iter().map(|(s, _)| s))
}
