use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util;

/// Line-aligned source/target sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl ParallelCorpus {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::CorpusAlignment {
                path: "<memory>".into(),
                detail: format!(
                    "{} source lines but {} target lines",
                    source.len(),
                    target.len()
                ),
            });
        }
        Ok(ParallelCorpus { source, target })
    }

    /// Reads two line-aligned UTF-8 files. A count mismatch names the
    /// target file, read second.
    pub fn read(source: &Path, target: &Path) -> Result<Self> {
        let src = io_util::read_lines(source)?;
        let tgt = io_util::read_lines(target)?;
        if src.len() != tgt.len() {
            return Err(Error::CorpusAlignment {
                path: target.to_path_buf(),
                detail: format!(
                    "{} has {} lines but {} has {}",
                    target.display(),
                    tgt.len(),
                    source.display(),
                    src.len()
                ),
            });
        }
        Ok(ParallelCorpus {
            source: src,
            target: tgt,
        })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.source
            .iter()
            .map(String::as_str)
            .zip(self.target.iter().map(String::as_str))
    }
}

/// Whitespace tokenizer that also splits off ASCII punctuation. Only meant
/// for building fixtures; real corpora arrive pre-tokenized.
pub fn simple_tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_ascii_punctuation() {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}
