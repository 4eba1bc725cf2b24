//! The conditional translation model: a bidirectional GRU encoder over
//! source subwords, an MLP soft-alignment, and either a two-layer stacked
//! GRU decoder or the bi-scale decoder, followed by an MLP output layer.

mod init;
mod layers;
mod sequence;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub use init::{init_params, parameter_shapes};
pub use layers::{
    attend, base_step, biscale_step, decoder_step, encode, gru_cell, initial_state,
    output_log_probs, Attention, BiScaleGates, BiScaleState, DecoderState, Encoding, StepOutput,
};
pub use sequence::{sequence_log_prob, teacher_forced, SequenceScore, TeacherForced};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Base,
    BiScale,
}

impl DecoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Base => "base",
            DecoderKind::BiScale => "biscale",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(DecoderKind::Base),
            "biscale" | "bi-scale" => Ok(DecoderKind::BiScale),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Which decoder layer(s) the attention network looks at. For the base
/// decoder "faster" is the first layer and "slower" the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionQuery {
    Slower,
    Faster,
    Concat,
}

impl AttentionQuery {
    pub fn default_for(kind: DecoderKind) -> Self {
        match kind {
            DecoderKind::Base => AttentionQuery::Concat,
            DecoderKind::BiScale => AttentionQuery::Slower,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttentionQuery::Slower => "slower",
            AttentionQuery::Faster => "faster",
            AttentionQuery::Concat => "concat",
        }
    }
}

impl fmt::Display for AttentionQuery {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionQuery {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slower" => Ok(AttentionQuery::Slower),
            "faster" => Ok(AttentionQuery::Faster),
            "concat" | "both" => Ok(AttentionQuery::Concat),
            other => Err(Error::Config(format!("unknown attention query `{other}`"))),
        }
    }
}

/// Sizes and variant choices that determine every parameter shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub d_emb: usize,
    /// Width of each encoder direction; contexts are twice this wide.
    pub d_enc: usize,
    /// Width of every decoder layer (both bi-scale layers share it).
    pub d_dec: usize,
    /// Hidden width of the alignment network.
    pub d_att: usize,
    pub decoder: DecoderKind,
    pub attention: AttentionQuery,
}

impl ModelConfig {
    pub const DEFAULT_EMB: usize = 64;
    pub const DEFAULT_ENC: usize = 64;
    pub const DEFAULT_DEC: usize = 128;

    pub fn new(src_vocab: usize, tgt_vocab: usize, decoder: DecoderKind) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            d_emb: Self::DEFAULT_EMB,
            d_enc: Self::DEFAULT_ENC,
            d_dec: Self::DEFAULT_DEC,
            d_att: Self::DEFAULT_DEC,
            decoder,
            attention: AttentionQuery::default_for(decoder),
        }
    }

    pub fn with_dims(mut self, d_emb: usize, d_enc: usize, d_dec: usize) -> Self {
        self.d_emb = d_emb;
        self.d_enc = d_enc;
        self.d_dec = d_dec;
        self.d_att = d_dec;
        self
    }

    pub fn with_attention(mut self, attention: AttentionQuery) -> Self {
        self.attention = attention;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("d_emb", self.d_emb),
            ("d_enc", self.d_enc),
            ("d_dec", self.d_dec),
            ("d_att", self.d_att),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn context_width(&self) -> usize {
        2 * self.d_enc
    }

    pub fn query_width(&self) -> usize {
        match self.attention {
            AttentionQuery::Concat => 2 * self.d_dec,
            _ => self.d_dec,
        }
    }

    /// Width of the decoder output fed to the output network.
    pub fn output_width(&self) -> usize {
        match self.decoder {
            DecoderKind::Base => self.d_dec,
            DecoderKind::BiScale => 2 * self.d_dec,
        }
    }
}
