//! Model configuration, parameter layout, and the embed-then-encode forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embeddings::{self, AssembledInput};
use crate::encoder::{self, Dropout, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::scalar::Scalar;

pub const MLM_HEAD: &str = "heads.mlm";
pub const MOC_HEAD: &str = "heads.moc";
pub const VLM_HEAD: &str = "heads.vlm";
pub const VCR_HEAD: &str = "heads.vcr";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    /// Width of precomputed region features.
    pub d_vis: usize,
    /// Number of detector classes predicted by the masked-object head.
    pub num_classes: usize,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, vocab_size: usize, d_vis: usize, num_classes: usize) -> Self {
        ModelConfig { encoder, vocab_size, d_vis, num_classes, init_std: default_init_std() }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size <= embeddings::vocab::RESERVED.len() || self.d_vis == 0 || self.num_classes == 0 {
            return Err(Error::Config(format!(
                "vocab_size {} (> {} reserved), d_vis {}, num_classes {} must be positive",
                self.vocab_size,
                embeddings::vocab::RESERVED.len(),
                self.d_vis,
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.encoder.hidden_size
    }

    /// Every parameter name with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.hidden();
        let mut out = vec![
            (embeddings::WORD.to_string(), vec![self.vocab_size, d]),
            (embeddings::POSITION.to_string(), vec![self.encoder.max_seq_len, d]),
            (embeddings::SEGMENT.to_string(), vec![2, d]),
            (format!("{}.gamma", embeddings::TEXT_LN), vec![d]),
            (format!("{}.beta", embeddings::TEXT_LN), vec![d]),
            (format!("{}.weight", embeddings::VISUAL_FC), vec![self.d_vis, d]),
            (format!("{}.bias", embeddings::VISUAL_FC), vec![d]),
            (format!("{}.weight", embeddings::LOCATION_FC), vec![5, d]),
            (format!("{}.bias", embeddings::LOCATION_FC), vec![d]),
            (format!("{}.gamma", embeddings::REGION_LN), vec![d]),
            (format!("{}.beta", embeddings::REGION_LN), vec![d]),
        ];
        for layer in 0..self.encoder.num_layers {
            out.extend(encoder::layer_parameter_shapes(&self.encoder, layer));
        }
        for (head, width) in [(MLM_HEAD, self.vocab_size), (MOC_HEAD, self.num_classes), (VLM_HEAD, 1), (VCR_HEAD, 1)] {
            out.push((format!("{head}.weight"), vec![d, width]));
            out.push((format!("{head}.bias"), vec![width]));
        }
        out
    }
}

/// Which training a parameter set has been through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Initialized,
    Pretrained,
    FinetunedRetrieval,
    FinetunedVcr,
}

impl Provenance {
    pub fn is_finetuned(self) -> bool {
        matches!(self, Provenance::FinetunedRetrieval | Provenance::FinetunedVcr)
    }
}

/// How output heads start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadInit {
    /// All-zero weights and biases: uniform predictions.
    Zero,
    /// Same random normal initialization as the body.
    Normal,
}

/// Fresh parameters: normal(0, init_std) matrices and embedding tables, zero
/// biases and segment table, unit layer-norm scales. Values are drawn in
/// double precision, so `f32` and `f64` stores from one seed agree up to rounding.
pub fn init_parameters<S: Scalar>(cfg: &ModelConfig, seed: u64, heads: HeadInit) -> Result<ParameterStore<S>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut store = ParameterStore::new();
    for (name, shape) in cfg.parameter_shapes() {
        let numel: usize = shape.iter().product();
        let is_head = name.starts_with("heads.");
        let data: Vec<S> = if name.ends_with(".gamma") {
            vec![S::one(); numel]
        } else if name.ends_with(".bias") || name.ends_with(".beta") || name == embeddings::SEGMENT || (is_head && heads == HeadInit::Zero) {
            vec![S::zero(); numel]
        } else {
            (0..numel).map(|_| S::lit(normal.sample(&mut rng))).collect()
        };
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

/// Embeds an assembled input and runs the encoder over it.
pub fn encode<S: Scalar>(
    g: &mut Graph<'_, S>,
    cfg: &ModelConfig,
    input: &AssembledInput<S>,
    references: &[(usize, usize)],
    dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let embedded = embeddings::embed_input(g, input, references, cfg.encoder.layer_norm_eps)?;
    encoder::encoder_forward(g, embedded, &input.mask, &cfg.encoder, dropout)
}

/// Final `[CLS]` state, `[1, d]`.
pub fn cls_state<S: Scalar>(g: &mut Graph<'_, S>, hidden: Var) -> Result<Var> {
    g.gather_rows(hidden, &[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_names_are_unique_and_complete() {
        let cfg = ModelConfig::new(EncoderConfig::default(), 40, 8, 5);
        let shapes = cfg.parameter_shapes();
        let mut names: Vec<_> = shapes.iter().map(|(n, _)| n.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), shapes.len());
        let store = init_parameters::<f32>(&cfg, 1, HeadInit::Zero).unwrap();
        assert_eq!(store.len(), shapes.len());
        assert!(store.value("encoder.layer1.ffn.outer.weight").is_ok());
        assert!(store.value("heads.mlm.weight").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initialization_is_seeded() {
        let cfg = ModelConfig::new(EncoderConfig::default(), 40, 8, 5);
        let a = init_parameters::<f32>(&cfg, 9, HeadInit::Normal).unwrap();
        let b = init_parameters::<f32>(&cfg, 9, HeadInit::Normal).unwrap();
        let c = init_parameters::<f32>(&cfg, 10, HeadInit::Normal).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let enc = EncoderConfig { num_heads: 3, ..EncoderConfig::default() };
        assert!(init_parameters::<f32>(&ModelConfig::new(enc, 40, 8, 5), 0, HeadInit::Zero).is_err());
    }
}
