//! Finite-difference gradient checks of every training loss on a small
//! 64-bit model (2 layers, hidden size 16).

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, prepare_examples, PairExample, SynthConfig};
use crate::embeddings::{assemble, Vocabulary};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{self, init_parameters, HeadInit, ModelConfig};
use crate::numerics::gradcheck::jitter;
use crate::numerics::{grad_check, GradCheckReport, ParameterStore};
use crate::pretraining::{joint_loss, mlm_loss, moc_loss, vlm_logit, vlm_loss, MaskPlan, MaskingConfig};
use crate::retrieval::{sample_triplets, triplet_example_loss, RetrievalConfig};
use crate::vcr::{prepare_choices, score_choices, vcr_loss, ChoiceMode, VcrExample};

/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mlm,
    Moc,
    Vlm,
    Joint,
    Triplet,
    Vcr,
}

impl LossKind {
    pub const ALL: [LossKind; 6] = [LossKind::Mlm, LossKind::Moc, LossKind::Vlm, LossKind::Joint, LossKind::Triplet, LossKind::Vcr];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mlm => "mlm",
            LossKind::Moc => "moc",
            LossKind::Vlm => "vlm",
            LossKind::Joint => "joint",
            LossKind::Triplet => "triplet",
            LossKind::Vcr => "vcr",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown loss {s:?} (expected mlm, moc, vlm, joint, triplet or vcr)")))
    }
}

/// Tiny corpus, model and jittered parameters shared by the checks.
pub struct Fixture {
    pub model: ModelConfig,
    pub store: ParameterStore<f64>,
    pub vocab: Vocabulary,
    pub pairs: Vec<PairExample<f64>>,
    pub vcr: Vec<VcrExample<f64>>,
}

pub fn fixture(seed: u64) -> Result<Fixture> {
    let synth = SynthConfig {
        num_concepts: 5,
        vocab_size: 40,
        d_vis: 6,
        regions_min: 2,
        regions_max: 3,
        pairs: 6,
        vcr_examples: 1,
        seed,
        templates: vec!["{objects}".into()],
        ..Default::default()
    };
    let corpus = generate_synthetic(&synth)?;
    let enc = EncoderConfig { num_layers: 2, hidden_size: 16, num_heads: 2, ffn_size: 32, max_seq_len: 24, dropout_rate: 0.0, layer_norm_eps: 1e-12 };
    let model = ModelConfig { init_std: 0.2, ..ModelConfig::new(enc, corpus.vocab.len(), synth.d_vis, synth.num_concepts) };
    let mut store = init_parameters::<f64>(&model, seed, HeadInit::Normal)?;
    jitter(&mut store, 0.05, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let pairs = prepare_examples(&corpus.records, &corpus.vocab)?;
    Ok(Fixture {
        model,
        store,
        vocab: corpus.vocab,
        pairs,
        vcr: corpus.vcr.iter().map(|e| e.cast()).collect(),
    })
}

/// Checks one loss; the returned report's `max_relative_error` is the figure of merit.
pub fn grad_check_loss(kind: LossKind, seed: u64) -> Result<GradCheckReport> {
    let fx = fixture(seed)?;
    let model = &fx.model;
    let ex = &fx.pairs[0];
    let input = assemble(&ex.tokens, &ex.regions, model.encoder.max_seq_len)?;
    let masking = MaskingConfig { text_rate: 0.5, region_rate: 0.5, ..Default::default() };
    let plan = MaskPlan::sample(input.token_ids.len(), input.num_regions(), &masking, model.vocab_size, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let masked = plan.apply(&input)?;
    match kind {
        LossKind::Mlm => grad_check(&fx.store, STEP, |g| {
            let h = model::encode(g, model, &masked, &[], None)?;
            let pos: Vec<usize> = plan.text_mask_indices.iter().map(|&i| input.text_position(i)).collect();
            let tgt: Vec<usize> = plan.text_mask_indices.iter().map(|&i| input.token_ids[i]).collect();
            mlm_loss(g, h, &pos, &tgt)
        }),
        LossKind::Moc => grad_check(&fx.store, STEP, |g| {
            let h = model::encode(g, model, &masked, &[], None)?;
            let pos: Vec<usize> = plan.region_mask_indices.iter().map(|&j| input.region_position(j)).collect();
            let labels: Vec<usize> = plan.region_mask_indices.iter().map(|&j| ex.regions.label_ids[j]).collect();
            moc_loss(g, h, &pos, &labels)
        }),
        LossKind::Vlm => grad_check(&fx.store, STEP, |g| {
            let h = model::encode(g, model, &input, &[], None)?;
            let z = vlm_logit(g, h)?;
            vlm_loss(g, z, true)
        }),
        LossKind::Joint => grad_check(&fx.store, STEP, |g| Ok(joint_loss(g, model, &input, &plan, true, None)?.total)),
        LossKind::Triplet => {
            let rc = RetrievalConfig::default();
            let sample = sample_triplets(&fx.pairs, 0, rc.negatives_per_positive, &mut ChaCha8Rng::seed_from_u64(seed))?;
            grad_check(&fx.store, STEP, |g| triplet_example_loss(g, model, &rc, &fx.pairs, &sample, None))
        }
        LossKind::Vcr => {
            let ex = &fx.vcr[0];
            let choices = prepare_choices(ex, ChoiceMode::Qa, &fx.vocab, 8, model.encoder.max_seq_len)?;
            grad_check(&fx.store, STEP, |g| {
                let logits = score_choices(g, model, &choices, None)?;
                vcr_loss(g, logits, ex.answer_label)
            })
        }
    }
}
