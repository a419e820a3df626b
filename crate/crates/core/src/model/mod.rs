//! Decoder-only transformer language model.
//!
//! Pre-norm blocks with learned positional embeddings and an untied readout.
//! The hidden state `h^(l)` exposed by [`HiddenStates`] and replaced by
//! [`Patch`] is the residual stream after block `l`, so
//! `h^(l) = h^(l-1) + attn^(l) + ffn^(l)` at every position.

mod backward;
mod checkpoint;
mod forward;
mod sample;
mod train;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Matrix, Scalar};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use forward::{HiddenStates, Patch, ProbabilityModel};
pub(crate) use forward::{object_sequence, Activations, RunOptions};
pub use sample::sample_prefixes;
pub use train::{train_base, TrainHyper, TrainReport};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ffn_hidden_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            vocab_size: 256,
            max_seq_len: 32,
            ffn_hidden_dim: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Config(format!(
                "max_seq_len {} is below the minimum of 4",
                self.max_seq_len
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size does not fit token ids".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// An ordered, non-empty run of token ids.
///
/// Emptiness is allowed at the type level so spans can be built
/// incrementally; the model entry points reject empty inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn new(tokens: impl Into<Vec<u32>>) -> Self {
        Self(tokens.into())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut tokens = self.0.clone();
        tokens.extend_from_slice(&other.0);
        TokenSeq(tokens)
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

impl From<&[u32]> for TokenSeq {
    fn from(v: &[u32]) -> Self {
        Self(v.to_vec())
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, t) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_gain: Matrix<F>,
    pub ln1_bias: Matrix<F>,
    pub w_q: Matrix<F>,
    pub w_k: Matrix<F>,
    pub w_v: Matrix<F>,
    pub w_o: Matrix<F>,
    pub ln2_gain: Matrix<F>,
    pub ln2_bias: Matrix<F>,
    /// FFN keys, `model_dim × ffn_hidden_dim`.
    pub w_1: Matrix<F>,
    pub b_1: Matrix<F>,
    /// FFN values, `ffn_hidden_dim × model_dim`.
    pub w_2: Matrix<F>,
    pub b_2: Matrix<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    pub tok_emb: Matrix<F>,
    pub pos_emb: Matrix<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub lnf_gain: Matrix<F>,
    pub lnf_bias: Matrix<F>,
    pub w_out: Matrix<F>,
    pub b_out: Matrix<F>,
}

impl<F: Scalar> Params<F> {
    /// All tensors with their stable checkpoint names, in storage order.
    pub fn named(&self) -> Vec<(String, &Matrix<F>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1_gain"), &b.ln1_gain),
                (p("ln1_bias"), &b.ln1_bias),
                (p("w_q"), &b.w_q),
                (p("w_k"), &b.w_k),
                (p("w_v"), &b.w_v),
                (p("w_o"), &b.w_o),
                (p("ln2_gain"), &b.ln2_gain),
                (p("ln2_bias"), &b.ln2_bias),
                (p("w_1"), &b.w_1),
                (p("b_1"), &b.b_1),
                (p("w_2"), &b.w_2),
                (p("b_2"), &b.b_2),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), &self.lnf_gain),
            ("lnf_bias".to_string(), &self.lnf_bias),
            ("w_out".to_string(), &self.w_out),
            ("b_out".to_string(), &self.b_out),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_gain,
                &mut b.ln1_bias,
                &mut b.w_q,
                &mut b.w_k,
                &mut b.w_v,
                &mut b.w_o,
                &mut b.ln2_gain,
                &mut b.ln2_bias,
                &mut b.w_1,
                &mut b.b_1,
                &mut b.w_2,
                &mut b.b_2,
            ]);
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill_zero();
        }
        z
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_gain: b.ln1_gain.cast(),
                    ln1_bias: b.ln1_bias.cast(),
                    w_q: b.w_q.cast(),
                    w_k: b.w_k.cast(),
                    w_v: b.w_v.cast(),
                    w_o: b.w_o.cast(),
                    ln2_gain: b.ln2_gain.cast(),
                    ln2_bias: b.ln2_bias.cast(),
                    w_1: b.w_1.cast(),
                    b_1: b.b_1.cast(),
                    w_2: b.w_2.cast(),
                    b_2: b.b_2.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            w_out: self.w_out.cast(),
            b_out: self.b_out.cast(),
        }
    }
}

/// A transformer language model. `F` is `f32` for normal use and `f64` for
/// gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F = f32> {
    config: ModelConfig,
    pub(crate) params: Params<F>,
}

const INIT_STD: f64 = 0.02;

impl<F: Scalar> Model<F> {
    /// Deterministically initializes a model from `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.model_dim;
        let f = config.ffn_hidden_dim;
        let v = config.vocab_size;
        let proj_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let tok_emb = Matrix::randn(v, d, INIT_STD, &mut rng);
        let pos_emb = Matrix::randn(config.max_seq_len, d, INIT_STD, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1_gain: Matrix::filled(1, d, F::one()),
                ln1_bias: Matrix::zeros(1, d),
                w_q: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_k: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_v: Matrix::randn(d, d, INIT_STD, &mut rng),
                w_o: Matrix::randn(d, d, proj_std, &mut rng),
                ln2_gain: Matrix::filled(1, d, F::one()),
                ln2_bias: Matrix::zeros(1, d),
                w_1: Matrix::randn(d, f, INIT_STD, &mut rng),
                b_1: Matrix::zeros(1, f),
                w_2: Matrix::randn(f, d, proj_std, &mut rng),
                b_2: Matrix::zeros(1, d),
            })
            .collect();
        let params = Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: Matrix::filled(1, d, F::one()),
            lnf_bias: Matrix::zeros(1, d),
            w_out: Matrix::randn(d, v, INIT_STD, &mut rng),
            b_out: Matrix::zeros(1, v),
        };
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Params<F>) -> Result<Self> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        let actual = params.named();
        if expected.len() != actual.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, shape), (_, t)) in expected.iter().zip(&actual) {
            if t.shape() != *shape {
                return Err(Error::Shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    /// Tensor names and shapes implied by a configuration.
    pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
        let d = config.model_dim;
        let f = config.ffn_hidden_dim;
        let v = config.vocab_size;
        let mut out = vec![
            ("tok_emb".to_string(), [v, d]),
            ("pos_emb".to_string(), [config.max_seq_len, d]),
        ];
        for i in 0..config.num_layers {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1_gain"), [1, d]),
                (p("ln1_bias"), [1, d]),
                (p("w_q"), [d, d]),
                (p("w_k"), [d, d]),
                (p("w_v"), [d, d]),
                (p("w_o"), [d, d]),
                (p("ln2_gain"), [1, d]),
                (p("ln2_bias"), [1, d]),
                (p("w_1"), [d, f]),
                (p("b_1"), [1, f]),
                (p("w_2"), [f, d]),
                (p("b_2"), [1, d]),
            ]);
        }
        out.extend([
            ("lnf_gain".to_string(), [1, d]),
            ("lnf_bias".to_string(), [1, d]),
            ("w_out".to_string(), [d, v]),
            ("b_out".to_string(), [1, v]),
        ]);
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn model_dim(&self) -> usize {
        self.config.model_dim
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Converts the parameters to another precision.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// SHA-256 over every parameter's little-endian bytes, in storage order.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, t) in self.params.named() {
            hasher.update(name.as_bytes());
            buf.clear();
            for &x in &t.data {
                x.extend_le_bytes(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Argument(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }
}
