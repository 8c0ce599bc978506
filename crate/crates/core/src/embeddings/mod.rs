//! Joint input construction: text tokens and image regions embedded into one
//! `[n, d]` sequence.
//!
//! Text rows are `LN(word + position + segment[0])`. Region rows are
//! `LN(FC(feature) + FC(location) + word[IMG] + segment[1])`; regions get no
//! position embedding, so the encoder treats them as an unordered set.

pub mod assemble;
pub mod region;
pub mod tokenize;
pub mod vocab;

pub use assemble::{assemble, assemble_parts, AssembledInput, AttentionMask, Role};
pub use region::{location_vector, BBox, ImageSize, RegionSet};
pub use tokenize::{tokenize, TokenSequence};
pub use vocab::Vocabulary;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

pub const WORD: &str = "embeddings.word";
pub const POSITION: &str = "embeddings.position";
pub const SEGMENT: &str = "embeddings.segment";
pub const TEXT_LN: &str = "embeddings.text_ln";
pub const VISUAL_FC: &str = "embeddings.visual";
pub const LOCATION_FC: &str = "embeddings.location";
pub const REGION_LN: &str = "embeddings.region_ln";

pub const TEXT_SEGMENT: usize = 0;
pub const IMAGE_SEGMENT: usize = 1;

/// Sum of word, position and text-segment embeddings, before layer norm.
pub fn text_pre_norm<S: Scalar>(g: &mut Graph<'_, S>, ids: &[usize], positions: &[usize]) -> Result<Var> {
    if ids.len() != positions.len() {
        return Err(Error::dim("text embedding", ids.len(), positions.len()));
    }
    let word = g.param(WORD)?;
    let pos = g.param(POSITION)?;
    let seg = g.param(SEGMENT)?;
    let w = g.gather_rows(word, ids)?;
    let p = g.gather_rows(pos, positions)?;
    let s = g.gather_rows(seg, &[TEXT_SEGMENT])?;
    let wp = g.add(w, p)?;
    g.add_row(wp, s)
}

/// Text embedding for ids at the given absolute positions.
pub fn embed_text<S: Scalar>(g: &mut Graph<'_, S>, ids: &[usize], positions: &[usize], eps: f64) -> Result<Var> {
    let pre = text_pre_norm(g, ids, positions)?;
    g.layer_norm_named(pre, TEXT_LN, eps)
}

/// Sum of the feature projection, location projection, `[IMG]` and
/// image-segment embeddings, before layer norm.
pub fn region_pre_norm<S: Scalar>(g: &mut Graph<'_, S>, regions: &RegionSet<S>) -> Result<Var> {
    let vis_w = g.param(&format!("{VISUAL_FC}.weight"))?;
    let expected = g.value(vis_w).shape()[0];
    if regions.feature_dim() != expected {
        return Err(Error::dim("region features (d_vis)", regions.features.shape(), g.value(vis_w).shape()));
    }
    let feats = g.constant(regions.features.clone());
    let locs = g.constant(regions.locations()?);
    let fv = g.linear(feats, VISUAL_FC)?;
    let fl = g.linear(locs, LOCATION_FC)?;
    let sum = g.add(fv, fl)?;
    let word = g.param(WORD)?;
    let img = g.gather_rows(word, &[vocab::IMG])?;
    let seg = g.param(SEGMENT)?;
    let s = g.gather_rows(seg, &[IMAGE_SEGMENT])?;
    let sum = g.add_row(sum, img)?;
    g.add_row(sum, s)
}

pub fn embed_regions<S: Scalar>(g: &mut Graph<'_, S>, regions: &RegionSet<S>, eps: f64) -> Result<Var> {
    let pre = region_pre_norm(g, regions)?;
    g.layer_norm_named(pre, REGION_LN, eps)
}

/// Adds the referenced region's pre-norm embedding to each referenced text row.
///
/// `references` holds `(row in text_pre, region index)` pairs.
pub fn inject_references<S: Scalar>(
    g: &mut Graph<'_, S>,
    text_pre: Var,
    references: &[(usize, usize)],
    region_pre: Var,
) -> Result<Var> {
    if references.is_empty() {
        return Ok(text_pre);
    }
    let rows = g.value(text_pre).rows();
    let num_regions = g.value(region_pre).rows();
    let mut select = Tensor::<S>::zeros(vec![rows, num_regions]);
    for &(row, obj) in references {
        if obj >= num_regions {
            return Err(Error::Reference { object: obj, available: num_regions });
        }
        if row >= rows {
            return Err(Error::Index { what: "referencing token", index: row, bound: rows });
        }
        let cols = select.cols();
        select.data_mut()[row * cols + obj] = S::one();
    }
    let sel = g.constant(select);
    let added = g.matmul(sel, region_pre)?;
    g.add(text_pre, added)
}

/// Embeds a full assembled sequence into `[len, d]` rows.
///
/// `references` maps kept text token indices to region indices of the
/// assembled region set; each referenced token additionally receives that
/// region's visual embedding.
pub fn embed_input<S: Scalar>(
    g: &mut Graph<'_, S>,
    input: &AssembledInput<S>,
    references: &[(usize, usize)],
    eps: f64,
) -> Result<Var> {
    let t = input.token_ids.len();
    let n = input.len();
    let valid = input.valid_len();
    let num_pad = n - valid;

    // [CLS] tokens [SEP] followed by every [PAD]; pads take their absolute positions.
    let mut ids = Vec::with_capacity(t + 2 + num_pad);
    ids.push(vocab::CLS);
    ids.extend_from_slice(&input.token_ids);
    ids.push(vocab::SEP);
    ids.extend(std::iter::repeat_n(vocab::PAD, num_pad));
    let positions: Vec<usize> = (0..t + 2).chain(valid..n).collect();

    let mut text_pre = text_pre_norm(g, &ids, &positions)?;
    let region_pre = match &input.regions {
        Some(r) => Some(region_pre_norm(g, r)?),
        None => None,
    };
    if !references.is_empty() {
        let region_pre = region_pre.ok_or(Error::Reference { object: references[0].1, available: 0 })?;
        let shifted: Vec<(usize, usize)> = references.iter().map(|&(tok, obj)| (input.text_position(tok), obj)).collect();
        if let Some(&(tok, _)) = references.iter().find(|(tok, _)| *tok >= t) {
            return Err(Error::Index { what: "referencing token", index: tok, bound: t });
        }
        text_pre = inject_references(g, text_pre, &shifted, region_pre)?;
    }
    let text = g.layer_norm_named(text_pre, TEXT_LN, eps)?;

    let mut parts = Vec::with_capacity(3);
    if num_pad == 0 && region_pre.is_none() {
        return Ok(text);
    }
    parts.push(g.gather_rows(text, &(0..t + 2).collect::<Vec<_>>())?);
    if let Some(pre) = region_pre {
        parts.push(g.layer_norm_named(pre, REGION_LN, eps)?);
    }
    if num_pad > 0 {
        parts.push(g.gather_rows(text, &(t + 2..t + 2 + num_pad).collect::<Vec<_>>())?);
    }
    g.concat_rows(&parts)
}
