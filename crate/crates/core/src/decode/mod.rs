//! Greedy and beam-search decoding from one model or an ensemble.

mod search;
mod translate;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{ParameterStore, Real};

pub use search::{beam_search, greedy, greedy_batch, BeamOptions};
pub use translate::{default_max_len, format_alignment, translate_corpus, Translation};

/// One ensemble member: a parameter store and the config it was built for.
#[derive(Clone, Copy, Debug)]
pub struct Member<'a, T> {
    pub params: &'a ParameterStore<T>,
    pub config: &'a ModelConfig,
}

impl<'a, T: Real> Member<'a, T> {
    pub fn new(params: &'a ParameterStore<T>, config: &'a ModelConfig) -> Self {
        Member { params, config }
    }
}

/// Checks that all members read the same source and write the same target
/// vocabulary.
pub fn check_ensemble<T: Real>(members: &[Member<'_, T>]) -> Result<()> {
    let first = members
        .first()
        .ok_or_else(|| Error::Ensemble("no models given".into()))?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.config.tgt_vocab != first.config.tgt_vocab || m.config.src_vocab != first.config.src_vocab {
            return Err(Error::Ensemble(format!(
                "model {i} has vocabulary sizes {}/{}, model 0 has {}/{}",
                m.config.src_vocab, m.config.tgt_vocab, first.config.src_vocab, first.config.tgt_vocab
            )));
        }
    }
    Ok(())
}

/// Log of the arithmetic mean of the members' probabilities, computed
/// stably in `f64`.
pub fn ensemble_log_probs<R: AsRef<[f64]>>(per_model: &[R]) -> Result<Vec<f64>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Ensemble("no model outputs to combine".into()))?
        .as_ref();
    if per_model.len() == 1 {
        return Ok(first.to_vec());
    }
    let v = first.len();
    if let Some(bad) = per_model.iter().find(|r| r.as_ref().len() != v) {
        return Err(Error::Ensemble(format!(
            "output sizes differ: {v} vs {}",
            bad.as_ref().len()
        )));
    }
    let ln_m = (per_model.len() as f64).ln();
    Ok((0..v)
        .map(|j| {
            let max = per_model
                .iter()
                .map(|r| r.as_ref()[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            let total: f64 = per_model.iter().map(|r| (r.as_ref()[j] - max).exp()).sum();
            max + (total.ln() - ln_m)
        })
        .collect())
}

/// A finished (or length-truncated) output sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted symbols, ending in EOS unless `truncated`.
    pub tokens: Vec<usize>,
    /// Sum of the chosen per-step log-probabilities.
    pub score: f64,
    /// One attention row per emitted symbol, averaged over members.
    pub alignment: Vec<Vec<f64>>,
    /// True when the length bound stopped the search before EOS.
    pub truncated: bool,
}

impl Hypothesis {
    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&crate::textpipe::EOS_ID)
    }

    /// Tokens with a trailing EOS removed.
    pub fn content(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, rest)) if last == crate::textpipe::EOS_ID => rest,
            _ => &self.tokens,
        }
    }
}
