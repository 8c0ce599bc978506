//! Caption-based image-text retrieval: pair scoring, hardest-negative triplet
//! loss in both directions, recall@K, and zero-shot evaluation.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairExample;
use crate::embeddings::{assemble, RegionSet, TokenSequence};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, Provenance};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::pretraining::vlm_logit;
use crate::scalar::Scalar;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub margin: f64,
    /// Weight of the caption-anchored direction (negative images).
    pub lambda_text: f64,
    /// Weight of the image-anchored direction (negative captions).
    pub lambda_image: f64,
    pub negatives_per_positive: usize,
    pub learning_rate: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { margin: 0.2, lambda_text: 1.0, lambda_image: 1.0, negatives_per_positive: 3, learning_rate: 5e-5 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) || self.negatives_per_positive == 0 {
            return Err(Error::Config(format!("margin {} must be > 0 and negatives_per_positive >= 1", self.margin)));
        }
        Ok(())
    }
}

/// Matching probability of a caption and regions as a `[1]` node.
pub fn pair_score_node<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
    regions: &RegionSet<S>,
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let input = assemble(tokens, regions, cfg.encoder.max_seq_len)?;
    let hidden = model::encode(g, cfg, &input, &[], dropout)?;
    let z = vlm_logit(g, hidden)?;
    let z = g.sum_all(z);
    Ok(g.sigmoid(z))
}

/// Evaluation-mode matching probability: no masking, no dropout.
pub fn score_pair<S: Scalar>(store: &ParameterStore<S>, cfg: &ModelConfig, tokens: &TokenSequence, regions: &RegionSet<S>) -> Result<f64> {
    let mut g = Graph::new(store);
    let s = pair_score_node(&mut g, cfg, tokens, regions, None)?;
    Ok(g.scalar_value(s)?.as_f64())
}

/// `max(0, margin - positive + max(negatives))`.
pub fn hardest_triplet_loss(positive: f64, negatives: &[f64], margin: f64) -> Result<f64> {
    let hardest = negatives.iter().copied().reduce(f64::max).ok_or_else(|| Error::Argument("triplet loss needs a negative".into()))?;
    Ok((margin - positive + hardest).max(0.0))
}

/// Graph form of [`hardest_triplet_loss`] over `[1]` score nodes.
pub fn hardest_triplet_node<S: Scalar>(g: &mut Graph<'_, S>, positive: Var, negatives: &[Var], margin: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Argument("triplet loss needs a negative".into()));
    }
    let negs = if negatives.len() == 1 {
        negatives[0]
    } else {
        let rows: Vec<Var> = negatives.to_vec();
        g.concat_rows(&rows)?
    };
    let hardest = g.max_all(negs);
    let gap = g.sub(hardest, positive)?;
    let shifted = g.add_scalar(gap, S::lit(margin));
    Ok(g.relu(shifted))
}

/// `lambda_text * text_direction + lambda_image * image_direction`.
pub fn bidirectional_loss(text_direction: &[f64], image_direction: &[f64], cfg: &RetrievalConfig) -> f64 {
    cfg.lambda_text * text_direction.iter().sum::<f64>() + cfg.lambda_image * image_direction.iter().sum::<f64>()
}

/// Sampled negatives for one positive pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletSample {
    pub anchor: usize,
    /// Examples whose regions replace the anchor's.
    pub negative_images: Vec<usize>,
    /// Examples whose captions replace the anchor's.
    pub negative_captions: Vec<usize>,
}

/// Draws negatives from examples with a different image, without replacement
/// when enough exist.
pub fn sample_triplets<S: Scalar>(examples: &[PairExample<S>], anchor: usize, count: usize, rng: &mut impl Rng) -> Result<TripletSample> {
    let a = examples.get(anchor).ok_or(Error::Index { what: "anchor example", index: anchor, bound: examples.len() })?;
    let others: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].image_id != a.image_id).collect();
    if others.is_empty() {
        return Err(Error::NoNegative(format!("no example with an image other than {}", a.image_id)));
    }
    let draw = |rng: &mut dyn rand::RngCore| -> Vec<usize> {
        if others.len() >= count {
            others.choose_multiple(rng, count).copied().collect()
        } else {
            (0..count).map(|_| *others.choose(rng).expect("non-empty")).collect()
        }
    };
    let negative_images = draw(rng);
    let negative_captions = draw(rng);
    Ok(TripletSample { anchor, negative_images, negative_captions })
}

/// Weighted two-direction hardest-triplet loss for one positive and its negatives.
pub fn triplet_example_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    rc: &RetrievalConfig,
    examples: &[PairExample<S>],
    sample: &TripletSample,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let a = &examples[sample.anchor];
    let pos = pair_score_node(g, cfg, &a.tokens, &a.regions, dropout.as_deref_mut())?;
    let mut neg_img = Vec::with_capacity(sample.negative_images.len());
    for &i in &sample.negative_images {
        neg_img.push(pair_score_node(g, cfg, &a.tokens, &examples[i].regions, dropout.as_deref_mut())?);
    }
    let mut neg_cap = Vec::with_capacity(sample.negative_captions.len());
    for &i in &sample.negative_captions {
        neg_cap.push(pair_score_node(g, cfg, &examples[i].tokens, &a.regions, dropout.as_deref_mut())?);
    }
    let text_dir = hardest_triplet_node(g, pos, &neg_img, rc.margin)?;
    let image_dir = hardest_triplet_node(g, pos, &neg_cap, rc.margin)?;
    let t = g.scale(text_dir, S::lit(rc.lambda_text));
    let i = g.scale(image_dir, S::lit(rc.lambda_image));
    g.add(t, i)
}

/// Scores of `Q` queries against `C` candidates with the correct candidates per query.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Tensor<f64>,
    pub truth: Vec<Vec<usize>>,
}

impl ScoreMatrix {
    pub fn new(scores: Tensor<f64>, truth: Vec<Vec<usize>>) -> Result<Self> {
        if scores.shape().len() != 2 || scores.rows() != truth.len() {
            return Err(Error::dim("score matrix", scores.shape(), truth.len()));
        }
        let c = scores.cols();
        for t in &truth {
            if t.is_empty() {
                return Err(Error::Argument("query without a correct candidate".into()));
            }
            if let Some(&j) = t.iter().find(|&&j| j >= c) {
                return Err(Error::Index { what: "correct candidate", index: j, bound: c });
            }
        }
        Ok(ScoreMatrix { scores, truth })
    }

    pub fn num_queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn num_candidates(&self) -> usize {
        self.scores.cols()
    }

    /// Candidate indices of query `q`, best first; ties by ascending index.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.scores.row(q);
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order
    }
}

/// Fraction of queries with a correct candidate among their top `k` (clamped to C).
pub fn recall_at_k(m: &ScoreMatrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let k = k.min(m.num_candidates());
    let hits = (0..m.num_queries()).filter(|&q| m.ranking(q)[..k].iter().any(|c| m.truth[q].contains(c))).count();
    Ok(hits as f64 / m.num_queries() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Image query, caption candidates.
    SentenceRetrieval,
    /// Caption query, image candidates.
    ImageRetrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub direction: Direction,
    pub k: usize,
    pub recall: f64,
    pub num_queries: usize,
    pub num_candidates: usize,
}

/// Both directions' score matrices from one all-pairs scoring pass.
///
/// Images are the distinct `image_id`s in order of first appearance; an image's
/// correct captions are all pairs carrying its id.
pub fn score_matrices<S: Scalar>(store: &ParameterStore<S>, cfg: &ModelConfig, examples: &[PairExample<S>]) -> Result<(ScoreMatrix, ScoreMatrix)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("retrieval evaluation set".into()));
    }
    let mut images: Vec<usize> = Vec::new();
    let mut image_of = Vec::with_capacity(examples.len());
    for (i, ex) in examples.iter().enumerate() {
        let slot = match images.iter().position(|&j| examples[j].image_id == ex.image_id) {
            Some(s) => s,
            None => {
                images.push(i);
                images.len() - 1
            }
        };
        image_of.push(slot);
    }
    let (nc, ni) = (examples.len(), images.len());
    let mut text_to_image = Vec::with_capacity(nc * ni);
    for ex in examples {
        for &j in &images {
            text_to_image.push(score_pair(store, cfg, &ex.tokens, &examples[j].regions)?);
        }
    }
    let t2i = Tensor::new(vec![nc, ni], text_to_image)?;
    let mut i2t = Vec::with_capacity(nc * ni);
    for im in 0..ni {
        i2t.extend((0..nc).map(|c| t2i.at(c, im)));
    }
    let image_retrieval = ScoreMatrix::new(t2i, image_of.iter().map(|&s| vec![s]).collect())?;
    let sentence_retrieval = ScoreMatrix::new(
        Tensor::new(vec![ni, nc], i2t)?,
        (0..ni).map(|im| (0..nc).filter(|&c| image_of[c] == im).collect()).collect(),
    )?;
    Ok((sentence_retrieval, image_retrieval))
}

pub fn recall_table(sentence: &ScoreMatrix, image: &ScoreMatrix, ks: &[usize]) -> Result<Vec<RecallEntry>> {
    let mut out = Vec::new();
    for (direction, m) in [(Direction::SentenceRetrieval, sentence), (Direction::ImageRetrieval, image)] {
        for &k in ks {
            out.push(RecallEntry { direction, k, recall: recall_at_k(m, k)?, num_queries: m.num_queries(), num_candidates: m.num_candidates() });
        }
    }
    Ok(out)
}

/// R@K in both directions over every caption-image combination.
pub fn evaluate_retrieval<S: Scalar>(store: &ParameterStore<S>, cfg: &ModelConfig, examples: &[PairExample<S>], ks: &[usize]) -> Result<Vec<RecallEntry>> {
    let (s, i) = score_matrices(store, cfg, examples)?;
    recall_table(&s, &i, ks)
}

/// [`evaluate_retrieval`] on parameters that must not have been fine-tuned.
pub fn zero_shot_eval<S: Scalar>(
    provenance: Provenance,
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    examples: &[PairExample<S>],
    ks: &[usize],
) -> Result<Vec<RecallEntry>> {
    if provenance.is_finetuned() {
        return Err(Error::Protocol(format!("zero-shot evaluation requires unfine-tuned parameters, got {provenance:?}")));
    }
    evaluate_retrieval(store, cfg, examples, ks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: &[Vec<f64>], truth: Vec<Vec<usize>>) -> ScoreMatrix {
        ScoreMatrix::new(Tensor::from_rows(rows).unwrap(), truth).unwrap()
    }

    #[test]
    fn triplet_values() {
        assert_eq!(hardest_triplet_loss(0.9, &[0.5, 0.3], 0.2).unwrap(), 0.0);
        assert!((hardest_triplet_loss(0.6, &[0.5], 0.2).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(hardest_triplet_loss(0.4, &[0.4], 0.2).unwrap(), 0.2);
        assert!(hardest_triplet_loss(0.4, &[], 0.2).is_err());
    }

    #[test]
    fn bidirectional_weighting() {
        let cfg = RetrievalConfig::default();
        assert!((bidirectional_loss(&[0.1], &[0.05], &cfg) - 0.15).abs() < 1e-12);
        let text_only = RetrievalConfig { lambda_image: 0.0, ..cfg.clone() };
        assert_eq!(bidirectional_loss(&[0.1], &[0.05], &text_only), 0.1);
        assert_eq!(bidirectional_loss(&[0.0], &[0.0], &cfg), 0.0);
    }

    #[test]
    fn triplet_node_matches_scalar() {
        let store = ParameterStore::<f64>::new();
        let mut g = Graph::new(&store);
        let pos = g.constant(Tensor::scalar(0.6));
        let negs: Vec<Var> = [0.3, 0.5, 0.45].iter().map(|&v| g.constant(Tensor::scalar(v))).collect();
        let l = hardest_triplet_node(&mut g, pos, &negs, 0.2).unwrap();
        assert!((g.scalar_value(l).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let diag = matrix(&[vec![0.9, 0.1, 0.2], vec![0.0, 0.8, 0.1], vec![0.3, 0.2, 0.7]], vec![vec![0], vec![1], vec![2]]);
        assert_eq!(recall_at_k(&diag, 1).unwrap(), 1.0);
        let second = matrix(&[vec![0.5, 0.9, 0.1], vec![0.4, 0.2, 0.3], vec![0.9, 0.1, 0.5]], vec![vec![0], vec![2], vec![2]]);
        assert_eq!(recall_at_k(&second, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&second, 5).unwrap(), 1.0);
        let single = matrix(&[vec![0.1, 0.2]], vec![vec![0]]);
        assert_eq!(recall_at_k(&single, 10).unwrap(), 1.0);
        assert!(recall_at_k(&single, 0).is_err());
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let m = matrix(&[vec![0.5, 0.5, 0.5]], vec![vec![1]]);
        assert_eq!(m.ranking(0), vec![0, 1, 2]);
        assert_eq!(recall_at_k(&m, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&m, 2).unwrap(), 1.0);
    }

    #[test]
    fn finetuned_parameters_are_refused_for_zero_shot() {
        let store = ParameterStore::<f32>::new();
        let cfg = ModelConfig::new(Default::default(), 40, 4, 3);
        let err = zero_shot_eval::<f32>(Provenance::FinetunedRetrieval, &store, &cfg, &[], &[1]).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }
}
