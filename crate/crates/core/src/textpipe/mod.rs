//! Corpus ingestion: BPE learning and application, vocabularies, and
//! length-filtered padded batches.

mod batch;
mod bpe;
mod corpus;
mod vocab;

pub use batch::{make_batches, Batch, Codec, EncodedCorpus, EncodedPair, LengthLimits, Segmenter};
pub use bpe::{detokenize, learn_bpe, MergeTable, CONTINUATION};
pub use corpus::{simple_tokenize, ParallelCorpus};
pub use vocab::{build_vocab, Unit, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};
