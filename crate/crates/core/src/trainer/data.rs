//! Corpus segmentation, batching and per-purpose random streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::PAD_ID;
use crate::TokenId;

/// Purposes of the independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Shuffle = 1,
    Corruption = 2,
}

/// A ChaCha stream keyed by `(seed, purpose, a, b)`. Streams with different
/// keys are independent, so no generator state needs checkpointing.
pub fn stream_rng(seed: u64, purpose: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, purpose as u64, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Splits every document into consecutive segments of at most `seq_len`
/// tokens. Segments are never packed across documents.
pub fn segment(documents: &[Vec<TokenId>], seq_len: usize) -> Vec<Vec<TokenId>> {
    documents
        .iter()
        .flat_map(|doc| doc.chunks(seq_len).map(<[TokenId]>::to_vec))
        .collect()
}

/// A batch of segments padded to a common length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Indices of the segments in the segment list.
    pub indices: Vec<usize>,
    /// `indices.len() × seq_len`, `PAD`-filled tails.
    pub tokens: Vec<TokenId>,
    pub seq_len: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }
}

/// Number of batches per epoch.
pub fn batches_per_epoch(segments: usize, batch_size: usize) -> usize {
    segments.div_ceil(batch_size)
}

/// Segment order for `epoch`, shuffled from the run seed.
pub fn epoch_order(segments: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..segments).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, epoch, 0));
    order
}

/// The `index`-th batch of `epoch`. The last batch of an epoch may be
/// smaller than `batch_size`.
pub fn batch_at(
    segments: &[Vec<TokenId>],
    order: &[usize],
    index: usize,
    batch_size: usize,
    seq_len: usize,
) -> Result<Batch> {
    let start = index * batch_size;
    if start >= order.len() {
        return Err(Error::Data(format!("batch {index} is past the end of the epoch")));
    }
    let indices = order[start..(start + batch_size).min(order.len())].to_vec();
    let mut tokens = Vec::with_capacity(indices.len() * seq_len);
    for &i in &indices {
        let seg = &segments[i];
        if seg.len() > seq_len {
            return Err(Error::Shape(format!(
                "segment of {} tokens exceeds seq_len {seq_len}",
                seg.len()
            )));
        }
        tokens.extend_from_slice(seg);
        tokens.extend(std::iter::repeat_n(PAD_ID, seq_len - seg.len()));
    }
    Ok(Batch {
        indices,
        tokens,
        seq_len,
    })
}

/// All batches of one epoch.
pub fn make_batches(
    segments: &[Vec<TokenId>],
    seq_len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if segments.is_empty() {
        return Err(Error::Data("corpus has no segments".into()));
    }
    let order = epoch_order(segments.len(), seed, epoch);
    (0..batches_per_epoch(segments.len(), batch_size))
        .map(|i| batch_at(segments, &order, i, batch_size, seq_len))
        .collect()
}
