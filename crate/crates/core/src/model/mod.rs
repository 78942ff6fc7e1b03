//! Decoder-only causal transformer with a dedicated `<emb>` pooling token.
//!
//! Pre-norm blocks, learned absolute positions, tanh-GELU MLP, and an output
//! projection tied to the token embedding table. The same weights serve as a
//! rationale generator and as an embedder: the embedding of a sequence is the
//! final-layer hidden state at its closing `<emb>` position.

mod cache;
mod checkpoint;
mod decode;
mod forward;

pub use cache::{KVCache, StepOutput};
pub use checkpoint::{
    checkpoint_dtype, load_checkpoint, read_blob, save_checkpoint, write_blob, Blob, MODEL_MAGIC,
};
pub use decode::ForwardOutput;
pub use forward::{forward_hidden, logits, Packed, ParamVars};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::task::VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 72,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq < 2 {
            return bad("max_seq must be at least 2".into());
        }
        Ok(())
    }
}

/// Per-block tensor slots, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerField {
    Ln1Gain,
    Ln1Bias,
    Wq,
    Bq,
    Wk,
    Bk,
    Wv,
    Bv,
    Wo,
    Bo,
    Ln2Gain,
    Ln2Bias,
    WUp,
    BUp,
    WDown,
    BDown,
}

impl LayerField {
    pub const ALL: [LayerField; 16] = [
        LayerField::Ln1Gain,
        LayerField::Ln1Bias,
        LayerField::Wq,
        LayerField::Bq,
        LayerField::Wk,
        LayerField::Bk,
        LayerField::Wv,
        LayerField::Bv,
        LayerField::Wo,
        LayerField::Bo,
        LayerField::Ln2Gain,
        LayerField::Ln2Bias,
        LayerField::WUp,
        LayerField::BUp,
        LayerField::WDown,
        LayerField::BDown,
    ];

    fn name(self) -> &'static str {
        match self {
            LayerField::Ln1Gain => "ln1.gain",
            LayerField::Ln1Bias => "ln1.bias",
            LayerField::Wq => "attn.wq",
            LayerField::Bq => "attn.bq",
            LayerField::Wk => "attn.wk",
            LayerField::Bk => "attn.bk",
            LayerField::Wv => "attn.wv",
            LayerField::Bv => "attn.bv",
            LayerField::Wo => "attn.wo",
            LayerField::Bo => "attn.bo",
            LayerField::Ln2Gain => "ln2.gain",
            LayerField::Ln2Bias => "ln2.bias",
            LayerField::WUp => "mlp.w_up",
            LayerField::BUp => "mlp.b_up",
            LayerField::WDown => "mlp.w_down",
            LayerField::BDown => "mlp.b_down",
        }
    }

    fn shape(self, c: &ModelConfig) -> Vec<usize> {
        let (d, f) = (c.d_model, c.d_ff);
        match self {
            LayerField::Wq | LayerField::Wk | LayerField::Wv | LayerField::Wo => vec![d, d],
            LayerField::WUp => vec![d, f],
            LayerField::WDown => vec![f, d],
            LayerField::BUp => vec![f],
            _ => vec![d],
        }
    }
}

const PER_LAYER: usize = LayerField::ALL.len();

/// Flat parameter store: token table, position table, `n_layers` blocks of
/// [`LayerField`] tensors, then the final layer-norm gain and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    tensors: Vec<Tensor<T>>,
    n_layers: usize,
}

impl<T: Scalar> Params<T> {
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let expected = Self::layout(config);
        if tensors.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            tensors,
            n_layers: config.n_layers,
        })
    }

    /// `(name, shape)` of every tensor in storage order.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            (
                "tok_emb".to_string(),
                vec![config.vocab_size, config.d_model],
            ),
            ("pos_emb".to_string(), vec![config.max_seq, config.d_model]),
        ];
        for l in 0..config.n_layers {
            for f in LayerField::ALL {
                out.push((format!("layer{l}.{}", f.name()), f.shape(config)));
            }
        }
        out.push(("lnf.gain".into(), vec![config.d_model]));
        out.push(("lnf.bias".into(), vec![config.d_model]));
        out
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tok_emb(&self) -> &Tensor<T> {
        &self.tensors[0]
    }

    pub fn pos_emb(&self) -> &Tensor<T> {
        &self.tensors[1]
    }

    pub fn layer(&self, l: usize, f: LayerField) -> &Tensor<T> {
        &self.tensors[2 + l * PER_LAYER + f as usize]
    }

    pub fn lnf_gain(&self) -> &Tensor<T> {
        &self.tensors[2 + self.n_layers * PER_LAYER]
    }

    pub fn lnf_bias(&self) -> &Tensor<T> {
        &self.tensors[3 + self.n_layers * PER_LAYER]
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Binds every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        ParamVars::new(
            self.tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            self.n_layers,
        )
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            n_layers: self.n_layers,
        }
    }
}

/// Weights drawn from N(0, 0.02), layer-norm gains 1, biases 0, all
/// determined by `config.seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig) -> Result<Params<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let tensors = Params::<T>::layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("gain") {
                vec![T::one(); n]
            } else if shape.len() == 1 {
                vec![T::zero(); n]
            } else {
                (0..n).map(|_| T::of_f64(normal.sample(&mut rng))).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Params::from_tensors(config, tensors)
}

/// Configuration plus weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self { config, params })
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&id) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Vocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
