use crate::embeddings::region::RegionSet;
use crate::embeddings::tokenize::TokenSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Text is never cut below this many tokens to make room for regions.
pub const MIN_TEXT_BUDGET: usize = 16;

/// Validity flag per sequence position; padding is invalid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    valid: Vec<bool>,
}

impl AttentionMask {
    pub fn new(valid: Vec<bool>) -> Result<Self> {
        if !valid.iter().any(|&v| v) {
            return Err(Error::EmptyInput("attention mask with no valid position".into()));
        }
        Ok(AttentionMask { valid })
    }

    /// First `valid_len` of `len` positions valid.
    pub fn prefix(valid_len: usize, len: usize) -> Result<Self> {
        Self::new((0..len).map(|i| i < valid_len).collect())
    }

    pub fn all_valid(len: usize) -> Result<Self> {
        Self::prefix(len, len)
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Cls,
    /// Index into the kept text tokens.
    Text(usize),
    Sep,
    /// Index into the kept regions.
    Region(usize),
    Pad,
}

/// `[CLS] w_1..w_T [SEP] v_1..v_I [PAD]...` after truncation.
///
/// Embedding the layout needs parameters, so it is done on a graph by
/// [`crate::embeddings::embed_input`].
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledInput<S> {
    pub token_ids: Vec<usize>,
    pub regions: Option<RegionSet<S>>,
    pub layout: Vec<Role>,
    pub mask: AttentionMask,
}

/// Lays out one (text, regions) pair within `max_seq_len` positions.
///
/// Truncation: text keeps up to `max(max_seq_len - 2 - I, min(16, max_seq_len - 2))`
/// tokens, dropping from the tail; regions then fill what is left, again dropping
/// from the tail.
pub fn assemble<S: Scalar>(tokens: &TokenSequence, regions: &RegionSet<S>, max_seq_len: usize) -> Result<AssembledInput<S>> {
    assemble_parts(&tokens.ids, Some(regions), max_seq_len)
}

/// Like [`assemble`] but allows either side to be empty (not both).
pub fn assemble_parts<S: Scalar>(
    token_ids: &[usize],
    regions: Option<&RegionSet<S>>,
    max_seq_len: usize,
) -> Result<AssembledInput<S>> {
    let num_regions = regions.map_or(0, RegionSet::len);
    if token_ids.is_empty() && num_regions == 0 {
        return Err(Error::EmptyInput("no tokens and no regions".into()));
    }
    if max_seq_len < 3 {
        return Err(Error::Argument(format!("max_seq_len {max_seq_len} < 3")));
    }
    let avail = max_seq_len - 2;
    let text_budget = avail.saturating_sub(num_regions).max(MIN_TEXT_BUDGET.min(avail));
    let text_keep = token_ids.len().min(text_budget);
    let region_keep = num_regions.min(avail - text_keep);

    let kept_regions = match regions {
        Some(r) if region_keep > 0 => Some(if region_keep == r.len() {
            r.clone()
        } else {
            r.select(&(0..region_keep).collect::<Vec<_>>())?
        }),
        _ => None,
    };

    let mut layout = Vec::with_capacity(text_keep + region_keep + 2);
    layout.push(Role::Cls);
    layout.extend((0..text_keep).map(Role::Text));
    layout.push(Role::Sep);
    layout.extend((0..region_keep).map(Role::Region));
    let n = layout.len();
    Ok(AssembledInput {
        token_ids: token_ids[..text_keep].to_vec(),
        regions: kept_regions,
        layout,
        mask: AttentionMask::all_valid(n)?,
    })
}

impl<S: Scalar> AssembledInput<S> {
    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Number of non-padding positions.
    pub fn valid_len(&self) -> usize {
        self.token_ids.len() + 2 + self.num_regions()
    }

    pub fn num_regions(&self) -> usize {
        self.regions.as_ref().map_or(0, RegionSet::len)
    }

    /// Absolute position of kept text token `i`.
    pub fn text_position(&self, i: usize) -> usize {
        1 + i
    }

    /// Absolute position of kept region `j`.
    pub fn region_position(&self, j: usize) -> usize {
        self.token_ids.len() + 2 + j
    }

    pub fn region_positions(&self) -> std::ops::Range<usize> {
        let start = self.token_ids.len() + 2;
        start..start + self.num_regions()
    }

    /// Appends `[PAD]` positions up to `len` (no-op if already that long).
    pub fn pad_to(&mut self, len: usize, max_seq_len: usize) -> Result<()> {
        if len > max_seq_len {
            return Err(Error::Length { len, max: max_seq_len });
        }
        if len > self.layout.len() {
            self.layout.resize(len, Role::Pad);
            self.mask = AttentionMask::prefix(self.valid_len(), len)?;
        }
        Ok(())
    }
}
