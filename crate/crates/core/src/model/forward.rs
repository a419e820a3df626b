use serde::{Deserialize, Serialize};

use super::Model;
use crate::stamp::FairnessStamp;
use crate::tensor::{
    add_row, dot, layer_norm, log_softmax_f64, matmul, matmul_bt, LayerNormCache, Matrix, Scalar,
};
use crate::{Error, Result, TokenSeq};

/// Residual stream after every block: `states[l - 1]` is `h^(l)` as a
/// `T × model_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<F> {
    pub states: Vec<Matrix<F>>,
}

impl<F: Scalar> HiddenStates<F> {
    /// `h^(layer)` at `position`, with `layer` counted from 1.
    pub fn get(&self, layer: usize, position: usize) -> &[F] {
        self.states[layer - 1].row(position)
    }

    pub fn num_layers(&self) -> usize {
        self.states.len()
    }

    pub fn len(&self) -> usize {
        self.states.first().map_or(0, |m| m.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces the residual stream at `layer` (1-based) and the listed positions
/// before later blocks consume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch<F> {
    pub layer: usize,
    pub positions: Vec<usize>,
    pub vectors: Vec<Vec<F>>,
}

impl<F: Scalar> Patch<F> {
    /// Patch that copies `states` at `layer` for the given positions.
    pub fn from_states(states: &HiddenStates<F>, layer: usize, positions: &[usize]) -> Self {
        Self {
            layer,
            positions: positions.to_vec(),
            vectors: positions
                .iter()
                .map(|&p| states.get(layer, p).to_vec())
                .collect(),
        }
    }

    pub(crate) fn validate(&self, num_layers: usize, len: usize, dim: usize) -> Result<()> {
        if self.layer == 0 || self.layer > num_layers {
            return Err(Error::Patch(format!(
                "layer {} outside 1..={num_layers}",
                self.layer
            )));
        }
        if self.positions.is_empty() {
            return Err(Error::Patch("empty position set".into()));
        }
        if self.positions.len() != self.vectors.len() {
            return Err(Error::Patch(format!(
                "{} positions but {} vectors",
                self.positions.len(),
                self.vectors.len()
            )));
        }
        if let Some(&p) = self.positions.iter().find(|&&p| p >= len) {
            return Err(Error::Patch(format!(
                "position {p} outside input of length {len}"
            )));
        }
        if let Some(v) = self.vectors.iter().find(|v| v.len() != dim) {
            return Err(Error::Patch(format!(
                "vector of dimension {} where model_dim is {dim}",
                v.len()
            )));
        }
        Ok(())
    }
}

/// Anything that can score an object continuation of a prompt.
///
/// This is the only capability the metrics need, so externally implemented
/// models (including masked LMs scored by pseudo-likelihood) can be evaluated.
pub trait ProbabilityModel {
    /// `P[object | prompt]`, multiplying per-token conditionals for
    /// multi-token objects.
    fn object_prob(&self, prompt: &TokenSeq, object: &TokenSeq) -> Result<f64>;
}

impl<M: ProbabilityModel + ?Sized> ProbabilityModel for &M {
    fn object_prob(&self, prompt: &TokenSeq, object: &TokenSeq) -> Result<f64> {
        (**self).object_prob(prompt, object)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct StampCache<F> {
    pub index: usize,
    /// Pre-activations `h K'ᵀ`, `T × d_c`.
    pub z: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<F> {
    pub ln1: LayerNormCache<F>,
    pub u: Vec<F>,
    pub q: Vec<F>,
    pub k: Vec<F>,
    pub v: Vec<F>,
    /// Attention probabilities, `heads × T × T` (upper triangle zero).
    pub attn: Vec<F>,
    pub ctx: Vec<F>,
    /// Sublayer outputs, read only by tests that check the residual sum.
    #[cfg_attr(not(test), allow(dead_code))]
    pub attn_out: Vec<F>,
    pub ln2: LayerNormCache<F>,
    pub h: Vec<F>,
    /// FFN pre-activations, `T × ffn_hidden_dim`.
    pub z: Vec<F>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub ffn_out: Vec<F>,
    pub stamp: Option<StampCache<F>>,
    /// Residual stream leaving the block, after any patch.
    pub out: Vec<F>,
}

#[derive(Debug, Clone)]
pub(crate) struct Activations<F> {
    pub len: usize,
    pub first_block: usize,
    pub blocks: Vec<BlockCache<F>>,
    pub lnf: LayerNormCache<F>,
    pub hf: Vec<F>,
    pub logits: Vec<F>,
}

impl<F: Scalar> Activations<F> {
    pub fn logits_row(&self, pos: usize, vocab: usize) -> &[F] {
        &self.logits[pos * vocab..(pos + 1) * vocab]
    }
}

/// Hooks applied during a forward pass.
pub(crate) struct RunOptions<'a, F> {
    pub stamps: &'a [FairnessStamp<F>],
    pub patches: &'a [Patch<F>],
    /// Start at this 0-based block with a precomputed input residual.
    pub start: Option<(usize, &'a [F])>,
}

impl<F> Default for RunOptions<'_, F> {
    fn default() -> Self {
        Self {
            stamps: &[],
            patches: &[],
            start: None,
        }
    }
}

impl<F: Scalar> Model<F> {
    pub(crate) fn embed(&self, tokens: &[u32]) -> Vec<F> {
        let d = self.config.model_dim;
        let mut x = vec![F::zero(); tokens.len() * d];
        for (i, &t) in tokens.iter().enumerate() {
            let te = self.params.tok_emb.row(t as usize);
            let pe = self.params.pos_emb.row(i);
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }
        x
    }

    /// Runs the network; callers validate tokens, patches and stamps.
    pub(crate) fn run(&self, tokens: &[u32], opts: &RunOptions<'_, F>) -> Activations<F> {
        let cfg = &self.config;
        let t_len = tokens.len();
        let d = cfg.model_dim;
        let f = cfg.ffn_hidden_dim;
        let heads = cfg.num_heads;
        let hd = cfg.head_dim();
        let scale = F::one() / F::lit(hd as f64).sqrt();

        let (first_block, mut x) = match opts.start {
            Some((block, residual)) => (block, residual.to_vec()),
            None => (0, self.embed(tokens)),
        };

        let mut blocks = Vec::with_capacity(cfg.num_layers - first_block);
        for (bi, bp) in self.params.blocks.iter().enumerate().skip(first_block) {
            let (u, ln1) = layer_norm(&x, d, &bp.ln1_gain.data, &bp.ln1_bias.data);
            let q = matmul(&u, &bp.w_q.data, t_len, d, d);
            let k = matmul(&u, &bp.w_k.data, t_len, d, d);
            let v = matmul(&u, &bp.w_v.data, t_len, d, d);

            let mut attn = vec![F::zero(); heads * t_len * t_len];
            let mut ctx = vec![F::zero(); t_len * d];
            for head in 0..heads {
                let off = head * hd;
                for i in 0..t_len {
                    let row = &mut attn[(head * t_len + i) * t_len..(head * t_len + i + 1) * t_len];
                    let qi = &q[i * d + off..i * d + off + hd];
                    let mut max = F::neg_infinity();
                    for j in 0..=i {
                        let s = dot(qi, &k[j * d + off..j * d + off + hd]) * scale;
                        row[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut total = F::zero();
                    for a in row.iter_mut().take(i + 1) {
                        *a = (*a - max).exp();
                        total += *a;
                    }
                    for a in row.iter_mut().take(i + 1) {
                        *a /= total;
                    }
                    let ci = &mut ctx[i * d + off..i * d + off + hd];
                    for j in 0..=i {
                        let a = row[j];
                        for (c, &vv) in ci.iter_mut().zip(&v[j * d + off..j * d + off + hd]) {
                            *c += a * vv;
                        }
                    }
                }
            }
            let attn_out = matmul(&ctx, &bp.w_o.data, t_len, d, d);
            let mut y = x.clone();
            for (a, &b) in y.iter_mut().zip(&attn_out) {
                *a += b;
            }

            let (h, ln2) = layer_norm(&y, d, &bp.ln2_gain.data, &bp.ln2_bias.data);
            let mut z = matmul(&h, &bp.w_1.data, t_len, d, f);
            add_row(&mut z, &bp.b_1.data);
            let r: Vec<F> = z.iter().map(|&v| v.max(F::zero())).collect();
            let mut ffn_out = matmul(&r, &bp.w_2.data, t_len, f, d);
            add_row(&mut ffn_out, &bp.b_2.data);

            let stamp = opts
                .stamps
                .iter()
                .position(|s| s.layer == bi + 1)
                .map(|index| {
                    let s = &opts.stamps[index];
                    let dc = s.d_c();
                    let sz = matmul_bt(&h, &s.keys.data, t_len, d, dc);
                    let sr: Vec<F> = sz.iter().map(|&v| v.max(F::zero())).collect();
                    let delta = matmul(&sr, &s.values.data, t_len, dc, d);
                    for (o, dv) in ffn_out.iter_mut().zip(delta) {
                        *o += dv;
                    }
                    StampCache { index, z: sz }
                });

            let mut out = y;
            for (o, &m) in out.iter_mut().zip(&ffn_out) {
                *o += m;
            }
            for patch in opts.patches.iter().filter(|p| p.layer == bi + 1) {
                for (&pos, vec) in patch.positions.iter().zip(&patch.vectors) {
                    out[pos * d..(pos + 1) * d].copy_from_slice(vec);
                }
            }
            x = out.clone();
            blocks.push(BlockCache {
                ln1,
                u,
                q,
                k,
                v,
                attn,
                ctx,
                attn_out,
                ln2,
                h,
                z,
                ffn_out,
                stamp,
                out,
            });
        }

        let (hf, lnf) = layer_norm(
            &x,
            d,
            &self.params.lnf_gain.data,
            &self.params.lnf_bias.data,
        );
        let mut logits = matmul(&hf, &self.params.w_out.data, t_len, d, cfg.vocab_size);
        add_row(&mut logits, &self.params.b_out.data);
        Activations {
            len: t_len,
            first_block,
            blocks,
            lnf,
            hf,
            logits,
        }
    }

    pub(crate) fn validate_patches(&self, len: usize, patches: &[Patch<F>]) -> Result<()> {
        for p in patches {
            p.validate(self.config.num_layers, len, self.config.model_dim)?;
        }
        Ok(())
    }

    /// Logits (`T × vocab`) and the residual stream after every block.
    pub fn forward(&self, input: &TokenSeq) -> Result<(Matrix<F>, HiddenStates<F>)> {
        self.check_tokens(input.tokens())?;
        let acts = self.run(input.tokens(), &RunOptions::default());
        Ok(self.split_outputs(acts))
    }

    pub(crate) fn split_outputs(&self, acts: Activations<F>) -> (Matrix<F>, HiddenStates<F>) {
        let d = self.config.model_dim;
        let t = acts.len;
        let states = acts
            .blocks
            .into_iter()
            .map(|b| Matrix::from_vec(t, d, b.out))
            .collect();
        (
            Matrix::from_vec(t, self.config.vocab_size, acts.logits),
            HiddenStates { states },
        )
    }

    /// Forward pass with residual-stream states replaced at the patched
    /// `(layer, position)` sites.
    pub fn forward_with_patch(&self, input: &TokenSeq, patches: &[Patch<F>]) -> Result<Matrix<F>> {
        self.check_tokens(input.tokens())?;
        self.validate_patches(input.len(), patches)?;
        let acts = self.run(
            input.tokens(),
            &RunOptions {
                patches,
                ..Default::default()
            },
        );
        Ok(Matrix::from_vec(
            acts.len,
            self.config.vocab_size,
            acts.logits,
        ))
    }

    /// Full next-token distribution at the prompt's final position.
    pub fn next_token_distribution(&self, prompt: &TokenSeq) -> Result<Vec<f64>> {
        self.next_token_distribution_with(prompt, &RunOptions::default())
    }

    pub(crate) fn next_token_distribution_with(
        &self,
        prompt: &TokenSeq,
        opts: &RunOptions<'_, F>,
    ) -> Result<Vec<f64>> {
        self.check_tokens(prompt.tokens())?;
        let acts = self.run(prompt.tokens(), opts);
        let row = acts.logits_row(acts.len - 1, self.config.vocab_size);
        Ok(log_softmax_f64(row).into_iter().map(f64::exp).collect())
    }

    /// `P[object | prompt]` with patches applied to the prompt positions.
    pub fn object_prob_patched(
        &self,
        prompt: &TokenSeq,
        object: &TokenSeq,
        patches: &[Patch<F>],
    ) -> Result<f64> {
        let seq = object_sequence(prompt, object)?;
        self.check_tokens(&seq)?;
        self.validate_patches(seq.len(), patches)?;
        self.object_prob_with(
            prompt,
            object,
            &RunOptions {
                patches,
                ..Default::default()
            },
        )
    }

    pub(crate) fn object_prob_with(
        &self,
        prompt: &TokenSeq,
        object: &TokenSeq,
        opts: &RunOptions<'_, F>,
    ) -> Result<f64> {
        let seq = object_sequence(prompt, object)?;
        self.check_tokens(&seq)?;
        let acts = self.run(&seq, opts);
        Ok(object_log_prob(&acts, prompt.len(), object, self.config.vocab_size).exp())
    }
}

/// `prompt ⧺ object[..n-1]`: the shortest input whose logits score every
/// object token.
pub(crate) fn object_sequence(prompt: &TokenSeq, object: &TokenSeq) -> Result<Vec<u32>> {
    if object.is_empty() {
        return Err(Error::Argument("empty object".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    let mut seq = prompt.0.clone();
    seq.extend_from_slice(&object.0[..object.len() - 1]);
    Ok(seq)
}

pub(crate) fn object_log_prob<F: Scalar>(
    acts: &Activations<F>,
    prompt_len: usize,
    object: &TokenSeq,
    vocab: usize,
) -> f64 {
    object
        .tokens()
        .iter()
        .enumerate()
        .map(|(j, &tok)| log_softmax_f64(acts.logits_row(prompt_len - 1 + j, vocab))[tok as usize])
        .sum()
}

impl<F: Scalar> ProbabilityModel for Model<F> {
    fn object_prob(&self, prompt: &TokenSeq, object: &TokenSeq) -> Result<f64> {
        self.object_prob_with(prompt, object, &RunOptions::default())
    }
}
