//! Neural machine translation with a subword (BPE) encoder and a choice of
//! subword- or character-level decoders, including the two-timescale
//! bi-scale recurrent decoder.

pub mod decode;
pub mod error;
pub mod io_util;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
