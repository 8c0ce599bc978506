use rand::seq::SliceRandom;
use rand::Rng;

use crate::embeddings::AttentionMask;
use crate::error::{Error, Result};

/// Example indices sharing one padded length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// Length of the longest member; shorter members are padded to it.
    pub padded_len: usize,
    pub masks: Vec<AttentionMask>,
}

/// Groups examples (given by their assembled lengths) into batches of at most
/// `batch_size`, optionally in a shuffled order.
pub fn make_batches(lengths: &[usize], batch_size: usize, max_seq_len: usize, shuffle: bool, rng: &mut impl Rng) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    if let Some(&len) = lengths.iter().find(|&&l| l > max_seq_len || l == 0) {
        return Err(Error::Length { len, max: max_seq_len });
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let padded_len = chunk.iter().map(|&i| lengths[i]).max().unwrap_or(0);
            let masks = chunk.iter().map(|&i| AttentionMask::prefix(lengths[i], padded_len)).collect::<Result<_>>()?;
            Ok(Batch { indices: chunk.to_vec(), padded_len, masks })
        })
        .collect()
}
