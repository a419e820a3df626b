//! The fairness stamp: a two-layer ReLU adapter added residually to the
//! output of one block's FFN sublayer.
//!
//! With stamp input `h` (the same post-norm vector the frozen FFN consumes)
//! the stamped sublayer computes `FFN(h) + relu(h K'ᵀ) V'`, where `K'` and `V'`
//! are both `d_c × d`. `V'` starts at zero so a new stamp is an exact identity.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::io::{crc32, read_f32_le, write_atomic, write_f32_le};
use crate::model::{HiddenStates, Model, Patch, ProbabilityModel, RunOptions};
use crate::tensor::{matmul, matmul_bt, Matrix, Scalar};
use crate::{Error, Result, TokenSeq};

pub const STAMP_FORMAT_VERSION: u32 = 1;
const KEY_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessStamp<F = f32> {
    /// Block the stamp wraps, counted from 1.
    pub layer: usize,
    /// `K'`, `d_c × d`.
    pub keys: Matrix<F>,
    /// `V'`, `d_c × d`.
    pub values: Matrix<F>,
    pub activation: Activation,
}

/// Gradient buffers shaped like a stamp.
#[derive(Debug, Clone, PartialEq)]
pub struct StampGrad<F> {
    pub keys: Matrix<F>,
    pub values: Matrix<F>,
}

impl<F: Scalar> StampGrad<F> {
    pub fn zeros_for(stamp: &FairnessStamp<F>) -> Self {
        Self {
            keys: stamp.keys.zeros_like(),
            values: stamp.values.zeros_like(),
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = F> + '_ {
        self.keys.data.iter().chain(&self.values.data).copied()
    }
}

impl<F: Scalar> FairnessStamp<F> {
    /// `K'` drawn from N(0, 0.01²) under `seed`; `V'` all zeros.
    pub fn new(layer: usize, d: usize, d_c: usize, seed: u64) -> Result<Self> {
        if layer == 0 {
            return Err(Error::Argument("stamp layer is counted from 1".into()));
        }
        if d == 0 || d_c == 0 {
            return Err(Error::Argument(format!(
                "stamp dimensions must be positive (d={d}, d_c={d_c})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            layer,
            keys: Matrix::randn(d_c, d, KEY_INIT_STD, &mut rng),
            values: Matrix::zeros(d_c, d),
            activation: Activation::Relu,
        })
    }

    pub fn d_c(&self) -> usize {
        self.keys.rows
    }

    pub fn dim(&self) -> usize {
        self.keys.cols
    }

    pub fn num_parameters(&self) -> usize {
        self.keys.len() + self.values.len()
    }

    /// `relu(h K'ᵀ) V'` for one vector.
    pub fn apply(&self, h: &[F]) -> Result<Vec<F>> {
        if h.len() != self.dim() {
            return Err(Error::Shape(format!(
                "stamp expects dimension {}, got {}",
                self.dim(),
                h.len()
            )));
        }
        let mut z = matmul_bt(h, &self.keys.data, 1, self.dim(), self.d_c());
        z.iter_mut().for_each(|v| *v = v.max(F::zero()));
        Ok(matmul(&z, &self.values.data, 1, self.d_c(), self.dim()))
    }

    pub fn cast<G: Scalar>(&self) -> FairnessStamp<G> {
        FairnessStamp {
            layer: self.layer,
            keys: self.keys.cast(),
            values: self.values.cast(),
            activation: self.activation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.keys.all_finite() && self.values.all_finite()
    }

    pub(crate) fn params_mut(&mut self) -> [&mut Matrix<F>; 2] {
        [&mut self.keys, &mut self.values]
    }
}

/// A frozen base model with stamps on one or more blocks.
#[derive(Debug, Clone)]
pub struct StampedModel<F = f32> {
    base: Arc<Model<F>>,
    stamps: Vec<FairnessStamp<F>>,
    base_checksum: String,
}

impl<F: Scalar> StampedModel<F> {
    /// Wraps `base` with no stamps.
    pub fn new(base: Arc<Model<F>>) -> Self {
        let base_checksum = base.checksum();
        Self {
            base,
            stamps: Vec::new(),
            base_checksum,
        }
    }

    pub fn attach(mut self, stamp: FairnessStamp<F>) -> Result<Self> {
        self.add_stamp(stamp)?;
        Ok(self)
    }

    pub fn add_stamp(&mut self, stamp: FairnessStamp<F>) -> Result<()> {
        let layers = self.base.num_layers();
        if stamp.layer == 0 || stamp.layer > layers {
            return Err(Error::Attach(format!(
                "stamp layer {} outside 1..={layers}",
                stamp.layer
            )));
        }
        if stamp.dim() != self.base.model_dim() || stamp.values.shape() != stamp.keys.shape() {
            return Err(Error::Shape(format!(
                "stamp matrices {:?}/{:?} do not fit model_dim {}",
                stamp.keys.shape(),
                stamp.values.shape(),
                self.base.model_dim()
            )));
        }
        if self.stamps.iter().any(|s| s.layer == stamp.layer) {
            return Err(Error::Attach(format!(
                "layer {} already carries a stamp",
                stamp.layer
            )));
        }
        self.stamps.push(stamp);
        self.stamps.sort_by_key(|s| s.layer);
        Ok(())
    }

    /// Removes every stamp, returning them.
    pub fn detach(&mut self) -> Vec<FairnessStamp<F>> {
        std::mem::take(&mut self.stamps)
    }

    pub fn base(&self) -> &Arc<Model<F>> {
        &self.base
    }

    pub fn stamps(&self) -> &[FairnessStamp<F>] {
        &self.stamps
    }

    pub(crate) fn stamps_mut(&mut self) -> &mut [FairnessStamp<F>] {
        &mut self.stamps
    }

    pub fn base_checksum(&self) -> &str {
        &self.base_checksum
    }

    /// Recomputes the base checksum and compares it with the one recorded at
    /// construction.
    pub fn verify_base(&self) -> bool {
        self.base.checksum() == self.base_checksum
    }

    pub fn num_stamp_parameters(&self) -> usize {
        self.stamps.iter().map(FairnessStamp::num_parameters).sum()
    }

    pub(crate) fn options(&self) -> RunOptions<'_, F> {
        RunOptions {
            stamps: &self.stamps,
            ..Default::default()
        }
    }

    pub fn forward(&self, input: &TokenSeq) -> Result<(Matrix<F>, HiddenStates<F>)> {
        self.base.check_tokens(input.tokens())?;
        let acts = self.base.run(input.tokens(), &self.options());
        Ok(self.base.split_outputs(acts))
    }

    pub fn forward_with_patch(&self, input: &TokenSeq, patches: &[Patch<F>]) -> Result<Matrix<F>> {
        self.base.check_tokens(input.tokens())?;
        self.base.validate_patches(input.len(), patches)?;
        let acts = self.base.run(
            input.tokens(),
            &RunOptions {
                stamps: &self.stamps,
                patches,
                start: None,
            },
        );
        Ok(Matrix::from_vec(
            acts.len,
            self.base.config().vocab_size,
            acts.logits,
        ))
    }

    pub fn next_token_distribution(&self, prompt: &TokenSeq) -> Result<Vec<f64>> {
        self.base.next_token_distribution_with(prompt, &self.options())
    }
}

impl<F: Scalar> ProbabilityModel for StampedModel<F> {
    fn object_prob(&self, prompt: &TokenSeq, object: &TokenSeq) -> Result<f64> {
        self.base.object_prob_with(prompt, object, &self.options())
    }
}

/// Convenience wrapper for attaching a single stamp.
pub fn attach<F: Scalar>(model: Arc<Model<F>>, stamp: FairnessStamp<F>) -> Result<StampedModel<F>> {
    StampedModel::new(model).attach(stamp)
}

#[derive(Debug, Serialize, Deserialize)]
struct StampManifest {
    format_version: u32,
    layer: usize,
    d: usize,
    d_c: usize,
    activation: Activation,
    dtype: String,
    keys_crc32: u32,
    values_crc32: u32,
}

const STAMP_MANIFEST: &str = "stamp_manifest.json";
const STAMP_BIN: &str = "stamp.bin";

/// Writes `stamp_manifest.json` and `stamp.bin` (K' then V', f32 LE).
pub fn save_stamp<F: Scalar>(stamp: &FairnessStamp<F>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let keys = write_f32_le(&stamp.keys.data);
    let values = write_f32_le(&stamp.values.data);
    let manifest = StampManifest {
        format_version: STAMP_FORMAT_VERSION,
        layer: stamp.layer,
        d: stamp.dim(),
        d_c: stamp.d_c(),
        activation: stamp.activation,
        dtype: "f32".into(),
        keys_crc32: crc32(&keys),
        values_crc32: crc32(&values),
    };
    let mut bin = keys;
    bin.extend_from_slice(&values);
    write_atomic(&dir.join(STAMP_BIN), &bin)?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    write_atomic(&dir.join(STAMP_MANIFEST), &json)
}

pub fn load_stamp(dir: &Path) -> Result<FairnessStamp<f32>> {
    let manifest_path = dir.join(STAMP_MANIFEST);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let m: StampManifest = serde_json::from_slice(&raw)
        .map_err(|e| Error::load(&manifest_path, format!("corrupt manifest: {e}")))?;
    if m.format_version != STAMP_FORMAT_VERSION {
        return Err(Error::load(
            &manifest_path,
            format!("unknown format_version {}", m.format_version),
        ));
    }
    if m.dtype != "f32" {
        return Err(Error::load(&manifest_path, format!("unsupported dtype {}", m.dtype)));
    }
    if m.layer == 0 || m.d == 0 || m.d_c == 0 {
        return Err(Error::load(&manifest_path, "non-positive layer or dimension"));
    }
    let bin_path = dir.join(STAMP_BIN);
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let n = m.d * m.d_c * 4;
    if bin.len() != 2 * n {
        return Err(Error::load(
            &bin_path,
            format!("expected {} bytes, found {}", 2 * n, bin.len()),
        ));
    }
    let (kb, vb) = bin.split_at(n);
    if crc32(kb) != m.keys_crc32 || crc32(vb) != m.values_crc32 {
        return Err(Error::load(&bin_path, "CRC32 mismatch"));
    }
    Ok(FairnessStamp {
        layer: m.layer,
        keys: Matrix::from_vec(m.d_c, m.d, read_f32_le(kb)),
        values: Matrix::from_vec(m.d_c, m.d, read_f32_le(vb)),
        activation: m.activation,
    })
}
