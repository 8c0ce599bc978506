//! Bidirectional post-LN transformer encoder.
//!
//! Parameters live under `encoder.layer{i}.attn.{query,key,value,output}`,
//! `encoder.layer{i}.attn.ln`, `encoder.layer{i}.ffn.{inner,outer}` and
//! `encoder.layer{i}.ffn.ln`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::AttentionMask;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ffn_size: 256,
            max_seq_len: 64,
            dropout_rate: 0.1,
            layer_norm_eps: default_ln_eps(),
        }
    }
}

impl EncoderConfig {
    /// 12 layers, 768 hidden units, 12 heads, 144 positions.
    pub fn base() -> Self {
        EncoderConfig {
            num_layers: 12,
            hidden_size: 768,
            num_heads: 12,
            ffn_size: 3072,
            max_seq_len: 144,
            dropout_rate: 0.1,
            layer_norm_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} must be a positive multiple of num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.max_seq_len < 3 {
            return Err(Error::Config(format!("max_seq_len {} < 3", self.max_seq_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.ffn_size == 0 || self.layer_norm_eps <= 0.0 {
            return Err(Error::Config("ffn_size and layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

/// Inverted dropout with its own seeded stream.
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = S::lit(1.0 / (1.0 - self.rate));
        let shape = g.value(x).shape().to_vec();
        let n = g.value(x).numel();
        let data = (0..n).map(|_| if self.rng.random::<f64>() < self.rate { S::zero() } else { keep }).collect();
        g.mul_const(x, Tensor::new(shape, data)?)
    }
}

fn maybe_dropout<S: Scalar>(g: &mut Graph<'_, S>, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// Multi-head scaled dot-product attention over already-projected `q`, `k`, `v`
/// (`[n, d]` each), followed by the `{output}` affine projection.
///
/// Keys at invalid positions get zero weight. A query row with no valid key
/// produces a zero vector before projection and is counted in
/// [`Graph::degenerate_softmax_rows`].
pub fn attention<S: Scalar>(
    g: &mut Graph<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttentionMask,
    num_heads: usize,
    output: &str,
    dropout: &mut Option<&mut Dropout>,
) -> Result<Var> {
    let d = g.value(q).cols();
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::Argument(format!("width {d} not divisible by {num_heads} heads")));
    }
    let n_keys = g.value(k).rows();
    if mask.len() != n_keys {
        return Err(Error::dim("attention mask", mask.len(), n_keys));
    }
    let dh = d / num_heads;
    let scale = S::lit(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let scores = g.matmul_bt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let weights = g.softmax_rows(scores, Some(mask.valid()))?;
        let weights = maybe_dropout(g, weights, dropout)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.linear(merged, output)
}

/// Runs every encoder block over `embedded[n, d]`; output has the same shape.
pub fn encoder_forward<S: Scalar>(
    g: &mut Graph<'_, S>,
    embedded: Var,
    mask: &AttentionMask,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<Var> {
    let n = g.value(embedded).rows();
    if n > cfg.max_seq_len {
        return Err(Error::Length { len: n, max: cfg.max_seq_len });
    }
    if g.value(embedded).cols() != cfg.hidden_size {
        return Err(Error::dim("encoder input", g.value(embedded).shape(), cfg.hidden_size));
    }
    let mut x = embedded;
    for layer in 0..cfg.num_layers {
        let p = format!("encoder.layer{layer}");
        let q = g.linear(x, &format!("{p}.attn.query"))?;
        let k = g.linear(x, &format!("{p}.attn.key"))?;
        let v = g.linear(x, &format!("{p}.attn.value"))?;
        let a = attention(g, q, k, v, mask, cfg.num_heads, &format!("{p}.attn.output"), &mut dropout)?;
        let a = maybe_dropout(g, a, &mut dropout)?;
        let res = g.add(x, a)?;
        x = g.layer_norm_named(res, &format!("{p}.attn.ln"), cfg.layer_norm_eps)?;

        let h = g.linear(x, &format!("{p}.ffn.inner"))?;
        let h = g.gelu(h);
        let h = g.linear(h, &format!("{p}.ffn.outer"))?;
        let h = maybe_dropout(g, h, &mut dropout)?;
        let res = g.add(x, h)?;
        x = g.layer_norm_named(res, &format!("{p}.ffn.ln"), cfg.layer_norm_eps)?;
    }
    Ok(x)
}

/// Parameter names and shapes for one encoder layer.
pub fn layer_parameter_shapes(cfg: &EncoderConfig, layer: usize) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (cfg.hidden_size, cfg.ffn_size);
    let p = format!("encoder.layer{layer}");
    let mut out = Vec::new();
    for proj in ["query", "key", "value", "output"] {
        out.push((format!("{p}.attn.{proj}.weight"), vec![d, d]));
        out.push((format!("{p}.attn.{proj}.bias"), vec![d]));
    }
    out.push((format!("{p}.attn.ln.gamma"), vec![d]));
    out.push((format!("{p}.attn.ln.beta"), vec![d]));
    out.push((format!("{p}.ffn.inner.weight"), vec![d, f]));
    out.push((format!("{p}.ffn.inner.bias"), vec![f]));
    out.push((format!("{p}.ffn.outer.weight"), vec![f, d]));
    out.push((format!("{p}.ffn.outer.bias"), vec![d]));
    out.push((format!("{p}.ffn.ln.gamma"), vec![d]));
    out.push((format!("{p}.ffn.ln.beta"), vec![d]));
    out
}
