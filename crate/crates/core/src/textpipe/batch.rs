use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::bpe::{detokenize, MergeTable};
use super::corpus::ParallelCorpus;
use super::vocab::{Unit, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};

/// How one side of a corpus is cut into symbols.
#[derive(Clone, Debug, PartialEq)]
pub enum Segmenter {
    /// Whitespace words split by learned merges.
    Bpe(MergeTable),
    /// Unicode scalar values, spaces included.
    Characters,
    /// Input that is already segmented into whitespace-separated symbols.
    Whitespace,
}

/// Segmentation plus vocabulary for one side of the translation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    segmenter: Segmenter,
    vocab: Vocabulary,
}

impl Codec {
    pub fn new(segmenter: Segmenter, vocab: Vocabulary) -> Result<Self> {
        let expected = match segmenter {
            Segmenter::Characters => Unit::Character,
            _ => Unit::Subword,
        };
        if vocab.unit() != expected {
            return Err(Error::Config(format!(
                "segmenter needs a {expected} vocabulary, got {}",
                vocab.unit()
            )));
        }
        Ok(Codec { segmenter, vocab })
    }

    pub fn bpe(merges: MergeTable, vocab: Vocabulary) -> Result<Self> {
        Self::new(Segmenter::Bpe(merges), vocab)
    }

    pub fn characters(vocab: Vocabulary) -> Result<Self> {
        Self::new(Segmenter::Characters, vocab)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn segmenter(&self) -> &Segmenter {
        &self.segmenter
    }

    pub fn unit(&self) -> Unit {
        self.vocab.unit()
    }

    pub fn segment(&self, line: &str) -> Vec<String> {
        match &self.segmenter {
            Segmenter::Bpe(m) => m.apply_line(line),
            Segmenter::Characters => Unit::Character.split(line),
            Segmenter::Whitespace => Unit::Subword.split(line),
        }
    }

    /// Symbol indices without BOS/EOS.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        self.vocab.encode(&self.segment(line))
    }

    /// Symbols of an index sequence, dropping BOS/EOS/PAD.
    pub fn symbols(&self, indices: &[usize]) -> Result<Vec<String>> {
        let kept: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|&i| i != BOS_ID && i != EOS_ID && i != PAD_ID)
            .collect();
        Ok(self.vocab.decode(&kept)?.into_iter().map(str::to_owned).collect())
    }

    /// Text for an index sequence. Characters are concatenated verbatim;
    /// subwords are joined at continuation markers.
    pub fn detokenize(&self, indices: &[usize]) -> Result<String> {
        let syms = self.symbols(indices)?;
        Ok(match self.unit() {
            Unit::Character => syms.concat(),
            Unit::Subword => detokenize(&syms),
        })
    }
}

/// Maximum symbol counts (before EOS) for a pair to be kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthLimits {
    pub max_source: usize,
    pub max_target: usize,
}

impl LengthLimits {
    pub const SOURCE_SUBWORDS: usize = 50;
    pub const TARGET_SUBWORDS: usize = 100;
    pub const TARGET_CHARACTERS: usize = 500;

    pub fn for_target(unit: Unit) -> Self {
        LengthLimits {
            max_source: Self::SOURCE_SUBWORDS,
            max_target: match unit {
                Unit::Subword => Self::TARGET_SUBWORDS,
                Unit::Character => Self::TARGET_CHARACTERS,
            },
        }
    }

    pub fn admits(&self, source_len: usize, target_len: usize) -> bool {
        source_len <= self.max_source && target_len <= self.max_target
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPair {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Padded minibatch. Source rows end in EOS; target rows are
/// `BOS y_1 .. y_n EOS`, both followed by PAD up to the batch maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub source_width: usize,
    pub target_width: usize,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Source lengths including EOS.
    pub source_lengths: Vec<usize>,
    /// Target lengths including BOS and EOS.
    pub target_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Domain("batch of zero pairs".into()));
        }
        let source_lengths: Vec<usize> = pairs.iter().map(|p| p.source.len() + 1).collect();
        let target_lengths: Vec<usize> = pairs.iter().map(|p| p.target.len() + 2).collect();
        let sw = *source_lengths.iter().max().expect("non-empty");
        let tw = *target_lengths.iter().max().expect("non-empty");
        let mut source = Vec::with_capacity(pairs.len() * sw);
        let mut target = Vec::with_capacity(pairs.len() * tw);
        for p in pairs {
            source.extend_from_slice(&p.source);
            source.push(EOS_ID);
            source.resize(source.len() + sw - p.source.len() - 1, PAD_ID);
            target.push(BOS_ID);
            target.extend_from_slice(&p.target);
            target.push(EOS_ID);
            target.resize(target.len() + tw - p.target.len() - 2, PAD_ID);
        }
        Ok(Batch {
            size: pairs.len(),
            source_width: sw,
            target_width: tw,
            source,
            target,
            source_lengths,
            target_lengths,
        })
    }

    pub fn source_row(&self, b: usize) -> &[usize] {
        &self.source[b * self.source_width..(b + 1) * self.source_width]
    }

    pub fn target_row(&self, b: usize) -> &[usize] {
        &self.target[b * self.target_width..(b + 1) * self.target_width]
    }

    /// `[size x source_width]`, true on real (non-PAD) positions.
    pub fn source_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.source.len());
        for &len in &self.source_lengths {
            m.extend((0..self.source_width).map(|t| t < len));
        }
        m
    }

    /// True where the target symbol at `position` (>= 1) is scored.
    pub fn target_scored(&self, b: usize, position: usize) -> bool {
        position >= 1 && position < self.target_lengths[b]
    }

    /// Number of scored target symbols (every symbol after BOS, EOS included).
    pub fn num_target_tokens(&self) -> usize {
        self.target_lengths.iter().map(|l| l - 1).sum()
    }

    /// Same examples with `extra` more PAD columns on the target side.
    pub fn with_target_padding(&self, extra: usize) -> Batch {
        let tw = self.target_width + extra;
        let mut target = Vec::with_capacity(self.size * tw);
        for b in 0..self.size {
            target.extend_from_slice(self.target_row(b));
            target.resize(target.len() + extra, PAD_ID);
        }
        Batch {
            target_width: tw,
            target,
            ..self.clone()
        }
    }

    pub fn validate(&self, source_vocab: usize, target_vocab: usize) -> Result<()> {
        for (ids, size) in [(&self.source, source_vocab), (&self.target, target_vocab)] {
            if let Some(&bad) = ids.iter().find(|&&i| i >= size) {
                return Err(Error::Vocabulary { index: bad, size });
            }
        }
        Ok(())
    }
}

/// Length-filtered, index-encoded corpus ready for batching.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodedCorpus {
    pub pairs: Vec<EncodedPair>,
    pub dropped: usize,
}

impl EncodedCorpus {
    pub fn encode(
        corpus: &ParallelCorpus,
        source: &Codec,
        target: &Codec,
        limits: LengthLimits,
    ) -> Self {
        let mut pairs = Vec::with_capacity(corpus.len());
        let mut dropped = 0;
        for (s, t) in corpus.pairs() {
            let src = source.encode(s);
            let tgt = target.encode(t);
            if src.is_empty() || !limits.admits(src.len(), tgt.len()) {
                dropped += 1;
                continue;
            }
            pairs.push(EncodedPair {
                source: src,
                target: tgt,
            });
        }
        EncodedCorpus { pairs, dropped }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Shuffles pair order under `seed` and cuts consecutive batches.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        let order = self.shuffled_order(batch_size, seed)?;
        order
            .chunks(batch_size)
            .map(|chunk| {
                let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &self.pairs[i]).collect();
                Batch::from_pairs(&refs)
            })
            .collect()
    }

    /// Like [`EncodedCorpus::batches`], but pairs of similar target length
    /// are grouped to reduce padding: the shuffled order is sorted by length
    /// inside windows of `window` batches, and the batch order is shuffled
    /// again.
    pub fn bucketed_batches(&self, batch_size: usize, seed: u64, window: usize) -> Result<Vec<Batch>> {
        let mut order = self.shuffled_order(batch_size, seed)?;
        for chunk in order.chunks_mut(batch_size * window.max(1)) {
            chunk.sort_by_key(|&i| (self.pairs[i].target.len(), self.pairs[i].source.len()));
        }
        let mut batches: Vec<Batch> = order
            .chunks(batch_size)
            .map(|chunk| {
                let refs: Vec<&EncodedPair> = chunk.iter().map(|&i| &self.pairs[i]).collect();
                Batch::from_pairs(&refs)
            })
            .collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        batches.shuffle(&mut rng);
        Ok(batches)
    }

    fn shuffled_order(&self, batch_size: usize, seed: u64) -> Result<Vec<usize>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        Ok(order)
    }
}

/// Filters, encodes, shuffles and pads a parallel corpus into batches.
pub fn make_batches(
    corpus: &ParallelCorpus,
    source: &Codec,
    target: &Codec,
    limits: LengthLimits,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    EncodedCorpus::encode(corpus, source, target, limits).batches(batch_size, shuffle_seed)
}
