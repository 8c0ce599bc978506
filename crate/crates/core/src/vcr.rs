//! Four-way multiple-choice reasoning over an image: answer selection given a
//! question (Q→A), rationale selection given the question and correct answer
//! (QA→R), and both together (Q→AR).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::embeddings::{assemble_parts, vocab, AssembledInput, BBox, RegionSet, TokenSequence, Vocabulary};
use crate::embeddings::tokenize::ids_for_words;
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, VCR_HEAD};
use crate::numerics::{Graph, ParameterStore, Var};
use crate::scalar::Scalar;

pub const NUM_CHOICES: usize = 4;
/// Region count after matching, at full scale.
pub const DEFAULT_BUDGET: usize = 100;

/// Part of an example a token belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Segment {
    Question,
    Answer(usize),
    Rationale(usize),
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Question => write!(f, "q"),
            Segment::Answer(i) => write!(f, "a_{i}"),
            Segment::Rationale(i) => write!(f, "r_{i}"),
        }
    }
}

impl TryFrom<String> for Segment {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        let choice = |rest: &str| match rest.parse::<usize>() {
            Ok(i) if i < NUM_CHOICES => Ok(i),
            _ => Err(format!("bad segment {s:?}")),
        };
        match s.as_str() {
            "q" => Ok(Segment::Question),
            _ if s.starts_with("a_") => Ok(Segment::Answer(choice(&s[2..])?)),
            _ if s.starts_with("r_") => Ok(Segment::Rationale(choice(&s[2..])?)),
            _ => Err(format!("bad segment {s:?}")),
        }
    }
}

impl From<Segment> for String {
    fn from(s: Segment) -> String {
        s.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub object_index: usize,
}

/// A token that points at a ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectReference {
    pub segment: Segment,
    pub token_pos: usize,
    pub object_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VcrExample<S> {
    pub example_id: String,
    pub question: Vec<String>,
    pub answers: [Vec<String>; NUM_CHOICES],
    pub rationales: [Vec<String>; NUM_CHOICES],
    pub answer_label: usize,
    pub rationale_label: usize,
    pub gt_boxes: Vec<GtBox>,
    pub references: Vec<ObjectReference>,
    /// Extracted detector regions for the image.
    pub regions: RegionSet<S>,
}

impl<S: Scalar> VcrExample<S> {
    pub fn validate(&self) -> Result<()> {
        if self.answer_label >= NUM_CHOICES || self.rationale_label >= NUM_CHOICES {
            return Err(Error::Index { what: "correct choice", index: self.answer_label.max(self.rationale_label), bound: NUM_CHOICES });
        }
        if self.question.is_empty() {
            return Err(Error::EmptyInput(format!("{}: empty question", self.example_id)));
        }
        for r in &self.references {
            self.object_slot(r.object_index)?;
            let len = self.segment(r.segment).len();
            if r.token_pos >= len {
                return Err(Error::Index { what: "reference token", index: r.token_pos, bound: len });
            }
        }
        for b in &self.gt_boxes {
            BBox::from_array(b.bbox).validate()?;
        }
        Ok(())
    }

    pub fn segment(&self, s: Segment) -> &[String] {
        match s {
            Segment::Question => &self.question,
            Segment::Answer(i) => &self.answers[i],
            Segment::Rationale(i) => &self.rationales[i],
        }
    }

    /// Position of an object in `gt_boxes`.
    pub fn object_slot(&self, object_index: usize) -> Result<usize> {
        self.gt_boxes
            .iter()
            .position(|b| b.object_index == object_index)
            .ok_or(Error::Reference { object: object_index, available: self.gt_boxes.len() })
    }

    pub fn cast<T: Scalar>(&self) -> VcrExample<T> {
        VcrExample {
            example_id: self.example_id.clone(),
            question: self.question.clone(),
            answers: self.answers.clone(),
            rationales: self.rationales.clone(),
            answer_label: self.answer_label,
            rationale_label: self.rationale_label,
            gt_boxes: self.gt_boxes.clone(),
            references: self.references.clone(),
            regions: self.regions.cast(),
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxMatch {
    pub region: usize,
    pub iou: f64,
}

/// Aligns ground-truth boxes to extracted regions by best IoU (ties to the
/// lowest region index). The returned set starts with one matched region per
/// ground-truth box, in ground-truth order, followed by unmatched regions in
/// descending score order, up to `budget`.
pub fn match_boxes<S: Scalar>(gt: &[BBox], regions: &RegionSet<S>, budget: usize) -> Result<(Vec<BoxMatch>, RegionSet<S>)> {
    if regions.is_empty() {
        return Err(Error::EmptyInput("no extracted regions to match".into()));
    }
    if gt.len() > budget {
        return Err(Error::Budget { count: gt.len(), budget });
    }
    let mut matches = Vec::with_capacity(gt.len());
    for g in gt {
        let mut best = BoxMatch { region: 0, iou: -1.0 };
        for (j, b) in regions.boxes.iter().enumerate() {
            let v = iou(g, b)?;
            if v > best.iou {
                best = BoxMatch { region: j, iou: v };
            }
        }
        matches.push(best);
    }
    let mut order: Vec<usize> = matches.iter().map(|m| m.region).collect();
    let mut rest: Vec<usize> = (0..regions.len()).filter(|j| !order.contains(j)).collect();
    rest.sort_by(|&a, &b| regions.scores[b].total_cmp(&regions.scores[a]).then(a.cmp(&b)));
    order.extend(rest.into_iter().take(budget - gt.len()));
    if order.is_empty() {
        order.push(0);
    }
    Ok((matches, regions.select(&order)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    /// Question ; answer.
    Qa,
    /// Question ; correct answer ; rationale.
    Qar,
}

/// Word sequence for one choice plus `(token position, ground-truth slot)` references.
pub fn build_choice_words<S: Scalar>(ex: &VcrExample<S>, mode: ChoiceMode, choice: usize) -> Result<(Vec<String>, Vec<(usize, usize)>)> {
    if choice >= NUM_CHOICES {
        return Err(Error::Index { what: "choice", index: choice, bound: NUM_CHOICES });
    }
    let segments: Vec<Segment> = match mode {
        ChoiceMode::Qa => vec![Segment::Question, Segment::Answer(choice)],
        ChoiceMode::Qar => {
            if ex.answer_label >= NUM_CHOICES {
                return Err(Error::Protocol(format!("{}: rationale input needs the correct answer", ex.example_id)));
            }
            vec![Segment::Question, Segment::Answer(ex.answer_label), Segment::Rationale(choice)]
        }
    };
    let mut words = Vec::new();
    let mut refs = Vec::new();
    for (k, &seg) in segments.iter().enumerate() {
        if k > 0 {
            words.push(vocab::SEMICOLON.to_string());
        }
        let offset = words.len();
        for r in ex.references.iter().filter(|r| r.segment == seg) {
            refs.push((offset + r.token_pos, ex.object_slot(r.object_index)?));
        }
        words.extend(ex.segment(seg).iter().cloned());
    }
    Ok((words, refs))
}

/// One choice ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceInput<S> {
    pub input: AssembledInput<S>,
    /// `(kept token index, region index)` pairs.
    pub references: Vec<(usize, usize)>,
}

/// Matched regions and the four assembled inputs of one example and mode.
pub fn prepare_choices<S: Scalar>(
    ex: &VcrExample<S>,
    mode: ChoiceMode,
    vocab: &Vocabulary,
    budget: usize,
    max_seq_len: usize,
) -> Result<Vec<ChoiceInput<S>>> {
    ex.validate()?;
    let gt: Vec<BBox> = ex.gt_boxes.iter().map(|b| BBox::from_array(b.bbox)).collect();
    let (_, matched) = match_boxes(&gt, &ex.regions, budget)?;
    (0..NUM_CHOICES)
        .map(|c| {
            let (words, refs) = build_choice_words(ex, mode, c)?;
            let tokens = TokenSequence::new(ids_for_words(&words, vocab), words.join(" "))?;
            let input = assemble_parts(&tokens.ids, Some(&matched), max_seq_len)?;
            let kept = input.token_ids.len();
            let references = refs.into_iter().filter(|&(t, _)| t < kept).collect();
            Ok(ChoiceInput { input, references })
        })
        .collect()
}

/// `[1, 4]` logits, one per choice, from the projection of each `[CLS]` state.
pub fn score_choices<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    choices: &[ChoiceInput<S>],
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    if choices.len() != NUM_CHOICES {
        return Err(Error::dim("choices", choices.len(), NUM_CHOICES));
    }
    let mut logits = Vec::with_capacity(NUM_CHOICES);
    for c in choices {
        let hidden = model::encode(g, cfg, &c.input, &c.references, dropout.as_deref_mut())?;
        let cls = model::cls_state(g, hidden)?;
        logits.push(g.linear(cls, VCR_HEAD)?);
    }
    g.concat_cols(&logits)
}

pub fn vcr_loss<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, correct: usize) -> Result<Var> {
    let n = g.value(logits).cols();
    if correct >= n {
        return Err(Error::Index { what: "correct choice", index: correct, bound: n });
    }
    g.cross_entropy(logits, &[correct])
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VcrPrediction {
    pub answer: usize,
    pub rationale: usize,
    pub answer_label: usize,
    pub rationale_label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VcrAccuracy {
    pub q_a: f64,
    pub qa_r: f64,
    /// Both the chosen answer and the chosen rationale correct.
    pub q_ar: f64,
    pub count: usize,
}

pub fn vcr_accuracy(preds: &[VcrPrediction]) -> VcrAccuracy {
    let n = preds.len().max(1) as f64;
    let frac = |f: &dyn Fn(&VcrPrediction) -> bool| preds.iter().filter(|p| f(p)).count() as f64 / n;
    VcrAccuracy {
        q_a: frac(&|p| p.answer == p.answer_label),
        qa_r: frac(&|p| p.rationale == p.rationale_label),
        q_ar: frac(&|p| p.answer == p.answer_label && p.rationale == p.rationale_label),
        count: preds.len(),
    }
}

/// Logits of the four choices, without recording gradients for later use.
pub fn choice_logits<S: Scalar>(store: &ParameterStore<S>, cfg: &ModelConfig, choices: &[ChoiceInput<S>]) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let logits = score_choices(&mut g, cfg, choices, None)?;
    Ok(g.value(logits).to_f64_vec())
}

/// Q→A, QA→R (conditioned on the correct answer) and Q→AR accuracies.
pub fn evaluate_vcr<S: Scalar>(
    store: &ParameterStore<S>,
    cfg: &ModelConfig,
    examples: &[VcrExample<S>],
    vocab: &Vocabulary,
    budget: usize,
) -> Result<(VcrAccuracy, Vec<VcrPrediction>)> {
    let max_len = cfg.encoder.max_seq_len;
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        let qa = prepare_choices(ex, ChoiceMode::Qa, vocab, budget, max_len)?;
        let qar = prepare_choices(ex, ChoiceMode::Qar, vocab, budget, max_len)?;
        preds.push(VcrPrediction {
            answer: argmax(&choice_logits(store, cfg, &qa)?),
            rationale: argmax(&choice_logits(store, cfg, &qar)?),
            answer_label: ex.answer_label,
            rationale_label: ex.rationale_label,
        });
    }
    Ok((vcr_accuracy(&preds), preds))
}
