//! Pretraining objectives: masked language modeling, masked object
//! classification, visual-linguistic matching, and their gated sum.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairExample;
use crate::embeddings::{vocab, AssembledInput, RegionSet, TokenSequence};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, MLM_HEAD, MOC_HEAD, VLM_HEAD};
use crate::numerics::kernels::softplus_scalar;
use crate::numerics::{Graph, Var};
use crate::scalar::Scalar;

/// What happens to a selected text token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextReplacement {
    Mask,
    Random(usize),
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionReplacement {
    /// Feature row replaced by zeros before projection.
    Zeroed,
    /// Feature row left as is; the region is still a prediction target.
    Kept,
}

/// Share of selected text tokens turned into `[MASK]`, a random word, or left alone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextMaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl TextMaskSplit {
    pub const PURE_MASK: TextMaskSplit = TextMaskSplit { mask: 1.0, random: 0.0, keep: 0.0 };
    pub const EIGHTY_TEN_TEN: TextMaskSplit = TextMaskSplit { mask: 0.8, random: 0.1, keep: 0.1 };
}

impl Default for TextMaskSplit {
    fn default() -> Self {
        Self::PURE_MASK
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub text_rate: f64,
    pub region_rate: f64,
    /// Probability a selected region's feature is zeroed rather than kept.
    pub region_zero_prob: f64,
    pub text_split: TextMaskSplit,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig { text_rate: 0.15, region_rate: 0.15, region_zero_prob: 0.9, text_split: TextMaskSplit::default() }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.text_rate, self.region_rate, self.region_zero_prob, self.text_split.mask, self.text_split.random, self.text_split.keep];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("masking probabilities must lie in [0, 1]: {self:?}")));
        }
        let s = self.text_split;
        if ((s.mask + s.random + s.keep) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("text mask split must sum to 1: {s:?}")));
        }
        Ok(())
    }
}

/// Independent Bernoulli(rate) selection of `0..n`; if nothing is picked, one
/// uniform index is forced so the objective stays defined.
fn bernoulli_forced(n: usize, rate: f64, rng: &mut impl Rng) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < rate).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(0..n));
    }
    picked
}

/// Positions of the text block to mask.
pub fn sample_text_mask(t: usize, rate: f64, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::EmptyInput("text mask over zero tokens".into()));
    }
    Ok(bernoulli_forced(t, rate, rng))
}

/// Replaces the selected positions with `[MASK]`.
pub fn apply_text_mask(ids: &[usize], indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = ids.to_vec();
    for &i in indices {
        *out.get_mut(i).ok_or(Error::Index { what: "text mask position", index: i, bound: ids.len() })? = vocab::MASK;
    }
    Ok(out)
}

/// Positions of the region block to mask, with a replacement decision for each.
pub fn sample_region_mask(
    num_regions: usize,
    rate: f64,
    zero_prob: f64,
    rng: &mut impl Rng,
) -> Result<(Vec<usize>, Vec<RegionReplacement>)> {
    if num_regions == 0 {
        return Err(Error::EmptyInput("region mask over zero regions".into()));
    }
    let idx = bernoulli_forced(num_regions, rate, rng);
    let rep = idx
        .iter()
        .map(|_| if rng.random::<f64>() < zero_prob { RegionReplacement::Zeroed } else { RegionReplacement::Kept })
        .collect();
    Ok((idx, rep))
}

/// Zeroes the feature rows of regions marked [`RegionReplacement::Zeroed`].
pub fn apply_region_mask<S: Scalar>(regions: &RegionSet<S>, indices: &[usize], replacement: &[RegionReplacement]) -> Result<RegionSet<S>> {
    if indices.len() != replacement.len() {
        return Err(Error::dim("region mask", indices.len(), replacement.len()));
    }
    let mut out = regions.clone();
    for (&j, &r) in indices.iter().zip(replacement) {
        if j >= regions.len() {
            return Err(Error::Index { what: "region mask position", index: j, bound: regions.len() });
        }
        if r == RegionReplacement::Zeroed {
            out.features.row_mut(j).fill(S::zero());
        }
    }
    Ok(out)
}

/// Masked positions for one example, relative to the text and region blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub text_mask_indices: Vec<usize>,
    pub text_replacement: Vec<TextReplacement>,
    pub region_mask_indices: Vec<usize>,
    pub region_replacement: Vec<RegionReplacement>,
}

impl MaskPlan {
    /// Samples a plan for `t` kept tokens and `num_regions` kept regions. An
    /// empty region block yields no region targets.
    pub fn sample(t: usize, num_regions: usize, cfg: &MaskingConfig, vocab_size: usize, rng: &mut impl Rng) -> Result<Self> {
        let text_mask_indices = sample_text_mask(t, cfg.text_rate, rng)?;
        let s = cfg.text_split;
        let text_replacement = text_mask_indices
            .iter()
            .map(|_| {
                let u = rng.random::<f64>();
                if u < s.mask {
                    TextReplacement::Mask
                } else if u < s.mask + s.random {
                    TextReplacement::Random(rng.random_range(vocab::RESERVED.len()..vocab_size))
                } else {
                    TextReplacement::Keep
                }
            })
            .collect();
        let (region_mask_indices, region_replacement) = if num_regions == 0 {
            (Vec::new(), Vec::new())
        } else {
            sample_region_mask(num_regions, cfg.region_rate, cfg.region_zero_prob, rng)?
        };
        Ok(MaskPlan { text_mask_indices, text_replacement, region_mask_indices, region_replacement })
    }

    /// The masked copy of an assembled input.
    pub fn apply<S: Scalar>(&self, input: &AssembledInput<S>) -> Result<AssembledInput<S>> {
        let mut out = input.clone();
        for (&i, &r) in self.text_mask_indices.iter().zip(&self.text_replacement) {
            let slot = out.token_ids.get_mut(i).ok_or(Error::Index { what: "text mask position", index: i, bound: input.token_ids.len() })?;
            match r {
                TextReplacement::Mask => *slot = vocab::MASK,
                TextReplacement::Random(id) => *slot = id,
                TextReplacement::Keep => {}
            }
        }
        if !self.region_mask_indices.is_empty() {
            let regions = input.regions.as_ref().ok_or(Error::Index { what: "region mask position", index: self.region_mask_indices[0], bound: 0 })?;
            out.regions = Some(apply_region_mask(regions, &self.region_mask_indices, &self.region_replacement)?);
        }
        Ok(out)
    }
}

fn check_positions(positions: &[usize], rows: usize) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::EmptyInput("no masked positions".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p >= rows) {
        return Err(Error::Index { what: "masked position", index: p, bound: rows });
    }
    Ok(())
}

/// Mean negative log-likelihood of the true words at masked sequence positions.
pub fn mlm_loss<S: Scalar>(g: &mut Graph<'_, S>, hidden: Var, positions: &[usize], targets: &[usize]) -> Result<Var> {
    check_positions(positions, g.value(hidden).rows())?;
    let h = g.gather_rows(hidden, positions)?;
    let logits = g.linear(h, MLM_HEAD)?;
    g.cross_entropy(logits, targets)
}

/// Mean cross-entropy of detector labels at masked region positions.
pub fn moc_loss<S: Scalar>(g: &mut Graph<'_, S>, hidden: Var, positions: &[usize], labels: &[usize]) -> Result<Var> {
    check_positions(positions, g.value(hidden).rows())?;
    let h = g.gather_rows(hidden, positions)?;
    let logits = g.linear(h, MOC_HEAD)?;
    let k = g.value(logits).cols();
    if let Some(&c) = labels.iter().find(|&&c| c >= k) {
        return Err(Error::Index { what: "object label", index: c, bound: k });
    }
    g.cross_entropy(logits, labels)
}

/// Matching logit from the `[CLS]` state, `[1, 1]`.
pub fn vlm_logit<S: Scalar>(g: &mut Graph<'_, S>, hidden: Var) -> Result<Var> {
    let cls = model::cls_state(g, hidden)?;
    g.linear(cls, VLM_HEAD)
}

/// Matching probability from the `[CLS]` state.
pub fn vlm_score<S: Scalar>(g: &mut Graph<'_, S>, hidden: Var) -> Result<Var> {
    let z = vlm_logit(g, hidden)?;
    Ok(g.sigmoid(z))
}

/// Binary cross-entropy of the matching logit against `y`.
pub fn vlm_loss<S: Scalar>(g: &mut Graph<'_, S>, logit: Var, y: bool) -> Result<Var> {
    g.bce_with_logits(logit, if y { S::one() } else { S::zero() })
}

/// Binary cross-entropy of a probability `s` in (0, 1), evaluated through its logit.
pub fn vlm_loss_value(s: f64, y: bool) -> f64 {
    let z = (s / (1.0 - s)).ln();
    softplus_scalar(z) - if y { z } else { 0.0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    None,
    NegImage,
    NegCaption,
}

/// A caption/regions pair with its matching label.
#[derive(Clone, Debug, PartialEq)]
pub struct VlmPair<S> {
    pub tokens: TokenSequence,
    pub regions: RegionSet<S>,
    pub y: bool,
    pub corruption: Corruption,
}

/// With probability 1/2 the true pair at `anchor`; otherwise its caption with
/// another image's regions, or its regions with another image's caption.
pub fn sample_vlm_pair<S: Scalar>(examples: &[PairExample<S>], anchor: usize, rng: &mut impl Rng) -> Result<VlmPair<S>> {
    let a = examples.get(anchor).ok_or(Error::Index { what: "anchor example", index: anchor, bound: examples.len() })?;
    let others: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].image_id != a.image_id).collect();
    if others.is_empty() {
        return Err(Error::NoNegative(format!("no example with an image other than {}", a.image_id)));
    }
    if rng.random::<f64>() < 0.5 {
        return Ok(VlmPair { tokens: a.tokens.clone(), regions: a.regions.clone(), y: true, corruption: Corruption::None });
    }
    let neg_image = rng.random::<bool>();
    let other = &examples[*others.choose(rng).expect("non-empty")];
    Ok(if neg_image {
        VlmPair { tokens: a.tokens.clone(), regions: other.regions.clone(), y: false, corruption: Corruption::NegImage }
    } else {
        VlmPair { tokens: other.tokens.clone(), regions: a.regions.clone(), y: false, corruption: Corruption::NegCaption }
    })
}

/// Loss nodes of one example. `mlm` and `moc` are absent for mismatched pairs
/// (and `moc` when no region survived truncation).
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub total: Var,
    pub mlm: Option<Var>,
    pub moc: Option<Var>,
    pub vlm: Var,
}

/// `(MLM + MOC) * [y = 1] + VLM` for an assembled (unmasked) input and its plan.
///
/// For `y = 0` the masked-token and masked-object heads are never touched, so
/// their gradients are exactly zero.
pub fn joint_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    input: &AssembledInput<S>,
    plan: &MaskPlan,
    y: bool,
    dropout: Option<&mut Dropout>,
) -> Result<JointLoss> {
    let masked = plan.apply(input)?;
    let hidden = model::encode(g, cfg, &masked, &[], dropout)?;
    let logit = vlm_logit(g, hidden)?;
    let vlm = vlm_loss(g, logit, y)?;
    if !y {
        return Ok(JointLoss { total: vlm, mlm: None, moc: None, vlm });
    }
    let positions: Vec<usize> = plan.text_mask_indices.iter().map(|&i| input.text_position(i)).collect();
    let targets: Vec<usize> = plan.text_mask_indices.iter().map(|&i| input.token_ids[i]).collect();
    let mlm = mlm_loss(g, hidden, &positions, &targets)?;
    let mut total = g.add(mlm, vlm)?;
    let moc = match &input.regions {
        Some(r) if !plan.region_mask_indices.is_empty() => {
            let positions: Vec<usize> = plan.region_mask_indices.iter().map(|&j| input.region_position(j)).collect();
            let labels: Vec<usize> = plan.region_mask_indices.iter().map(|&j| r.label_ids[j]).collect();
            let moc = moc_loss(g, hidden, &positions, &labels)?;
            total = g.add(total, moc)?;
            Some(moc)
        }
        _ => None,
    };
    Ok(JointLoss { total, mlm: Some(mlm), moc, vlm })
}
