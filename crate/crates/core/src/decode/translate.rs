use std::fmt::Write as _;

use super::search::{beam_search, BeamOptions};
use super::{check_ensemble, Hypothesis, Member};
use crate::error::{Error, Result};
use crate::numerics::Real;
use crate::textpipe::{Codec, Unit, EOS, EOS_ID};

/// Output length bound for a source of `source_len` symbols (EOS not
/// counted): `2n + 10` subwords or `10n + 50` characters.
pub fn default_max_len(unit: Unit, source_len: usize) -> usize {
    match unit {
        Unit::Subword => 2 * source_len + 10,
        Unit::Character => 10 * source_len + 50,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub text: String,
    pub best: Hypothesis,
    /// Source symbols as the encoder saw them, EOS included.
    pub source_symbols: Vec<String>,
    pub target_symbols: Vec<String>,
}

/// Segments, encodes, beam-searches and detokenizes every line. `max_len`
/// of `None` applies [`default_max_len`] per sentence.
pub fn translate_corpus<T: Real>(
    members: &[Member<'_, T>],
    source: &Codec,
    target: &Codec,
    lines: &[String],
    width: usize,
    max_len: Option<usize>,
    length_normalize: bool,
) -> Result<Vec<Translation>> {
    check_ensemble(members)?;
    for (i, m) in members.iter().enumerate() {
        if m.config.src_vocab != source.vocab().len() || m.config.tgt_vocab != target.vocab().len() {
            return Err(Error::Consistency(format!(
                "model {i} expects vocabularies of {}/{} symbols, files have {}/{}",
                m.config.src_vocab,
                m.config.tgt_vocab,
                source.vocab().len(),
                target.vocab().len()
            )));
        }
    }
    lines
        .iter()
        .map(|line| {
            let mut symbols = source.segment(line);
            let mut ids = source.vocab().encode(&symbols);
            let limit = max_len.unwrap_or_else(|| default_max_len(target.unit(), ids.len()));
            ids.push(EOS_ID);
            symbols.push(EOS.to_string());
            let options = BeamOptions {
                width,
                max_len: limit,
                length_normalize,
            };
            let best = beam_search(members, &ids, options)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Contract("beam search returned no hypothesis".into()))?;
            let text = target.detokenize(best.content())?;
            let target_symbols = target
                .vocab()
                .decode(&best.tokens)?
                .into_iter()
                .map(str::to_owned)
                .collect();
            Ok(Translation {
                text,
                best,
                source_symbols: symbols,
                target_symbols,
            })
        })
        .collect()
}

/// Alignment block for one sentence: a comment line with the sentence
/// number, a header of source symbols, then one row of `T_x` weights per
/// emitted target symbol, and a blank separator line.
pub fn format_alignment(sentence: usize, source_symbols: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# sentence {sentence}");
    out.push_str(&source_symbols.join("\t"));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|w| format!("{w:.8}")).collect();
        out.push_str(&cells.join("\t"));
        out.push('\n');
    }
    out.push('\n');
    out
}
