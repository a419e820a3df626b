//! Stamp optimization.
//!
//! The objective on a batch of bias pairs is `L = L_e + α·L_s1 + β·L_s2`:
//!
//! - `L_e`: mean `|P[o1 | x ⧺ p1] − P[o2 | x ⧺ p2]|` over pairs and prefixes
//!   `x` (the empty prefix included), on the model being edited.
//! - `L_s1`: mean `KL(base ‖ edited)` of the next-token distribution at the end
//!   of every prefixed prompt of both triplets.
//! - `L_s2`: mean `KL(base ‖ edited)` at the end of `s ⧺ template` for every
//!   distinct subject in the batch.
//!
//! A (pair, prefix) combination whose sequences exceed `max_seq_len` is
//! skipped by both `L_e` and `L_s1`. Only stamp parameters are optimized.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BiasPair;
use crate::error::DivergenceInfo;
use crate::metrics::stereotype_score;
use crate::model::{
    object_sequence, sample_prefixes, Activations, Model, ProbabilityModel, RunOptions,
};
use crate::optim::Adam;
use crate::stamp::{FairnessStamp, StampGrad, StampedModel};
use crate::tensor::{log_softmax_f64, Scalar};
use crate::tracing::{locate_decisive_layer, LocationReport, PositionsMode};
use crate::{Error, Result, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 40.0,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditHyper {
    pub batch_size: usize,
    pub iterations_per_batch: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub prefix_count: usize,
    /// Inclusive range of sampled prefix lengths.
    pub prefix_len: (usize, usize),
    pub d_c: usize,
    pub seed: u64,
    /// Use `|log P1 − log P2|` in place of raw probabilities for `L_e`.
    pub log_prob_efficacy: bool,
}

impl Default for EditHyper {
    fn default() -> Self {
        Self {
            batch_size: 4,
            iterations_per_batch: 20,
            learning_rate: 0.1,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            prefix_count: 10,
            prefix_len: (2, 4),
            d_c: 64,
            seed: 0,
            log_prob_efficacy: false,
        }
    }
}

impl EditHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.iterations_per_batch == 0 || self.d_c == 0 {
            return bad("batch_size, iterations_per_batch and d_c must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Loss values at the start of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub batch: usize,
    pub iter: usize,
    pub l_e: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub total: f64,
    pub wall_ms: f64,
}

/// `batch,iter,L_e,L_s1,L_s2,total`; wall time is left out so reruns compare
/// byte for byte.
pub fn telemetry_csv(records: &[EditRecord]) -> String {
    let mut out = String::from("batch,iter,L_e,L_s1,L_s2,total\n");
    for r in records {
        writeln!(out, "{},{},{},{},{},{}", r.batch, r.iter, r.l_e, r.l_s1, r.l_s2, r.total).unwrap();
    }
    out
}

/// Relation tokens appended to a subject to probe the model's view of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplatePrompt(pub TokenSeq);

impl TemplatePrompt {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Argument("empty template".into()));
        }
        Ok(Self(TokenSeq::new(tokens)))
    }

    pub fn apply(&self, subject: &TokenSeq) -> TokenSeq {
        subject.concat(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerChoice {
    /// Stamp these 1-based layers.
    Explicit(Vec<usize>),
    /// Stamp the decisive layer found by tracing the bias set.
    Auto(PositionsMode),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_e: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub total: f64,
}

impl LossValues {
    fn combine(l_e: f64, l_s1: f64, l_s2: f64, w: &LossWeights) -> Self {
        Self {
            l_e,
            l_s1,
            l_s2,
            total: l_e + w.alpha * l_s1 + w.beta * l_s2,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_e.is_finite() && self.l_s1.is_finite() && self.l_s2.is_finite() && self.total.is_finite()
    }
}

/// `KL(p ‖ q)` from unnormalized logits.
pub fn kl_from_logits<F: Scalar>(p_logits: &[F], q_logits: &[F]) -> f64 {
    kl_from_log_probs(&log_softmax_f64(p_logits), &log_softmax_f64(q_logits))
}

fn kl_from_log_probs(lp: &[f64], lq: &[f64]) -> f64 {
    lp.iter()
        .zip(lq)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum()
}

/// `(pair index, prefixed k1 prompt, prefixed k2 prompt)` for every
/// combination that fits in the context.
fn combinations(
    batch: &[BiasPair],
    prefixes: &[TokenSeq],
    max_seq_len: usize,
) -> Result<Vec<(usize, TokenSeq, TokenSeq)>> {
    let empty = TokenSeq::default();
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (i, pair) in batch.iter().enumerate() {
        for x in std::iter::once(&empty).chain(prefixes) {
            let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
            let p1 = x.concat(&k1.prompt());
            let p2 = x.concat(&k2.prompt());
            let fits = |p: &TokenSeq, o: &TokenSeq| p.len() + o.len() - 1 <= max_seq_len;
            if fits(&p1, &k1.object) && fits(&p2, &k2.object) {
                out.push((i, p1, p2));
            } else {
                skipped += 1;
            }
        }
    }
    if skipped > 0 {
        log::debug!("{skipped} prefixed combinations exceed max_seq_len and were skipped");
    }
    if batch.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    if out.is_empty() {
        return Err(Error::Loss("every prefixed combination exceeds max_seq_len".into()));
    }
    Ok(out)
}

fn distinct_subjects(batch: &[BiasPair]) -> Vec<TokenSeq> {
    let mut out: Vec<TokenSeq> = Vec::new();
    for pair in batch {
        for s in [&pair.stereotyped.subject, &pair.counterfactual.subject] {
            if !out.contains(s) {
                out.push(s.clone());
            }
        }
    }
    out
}

pub fn loss_efficacy<F: Scalar>(
    current: &StampedModel<F>,
    batch: &[BiasPair],
    prefixes: &[TokenSeq],
    log_prob: bool,
) -> Result<f64> {
    let combos = combinations(batch, prefixes, current.base().config().max_seq_len)?;
    let mut sum = 0.0;
    for (i, p1, p2) in &combos {
        let pair = &batch[*i];
        let a = current.object_prob(p1, &pair.stereotyped.object)?;
        let b = current.object_prob(p2, &pair.counterfactual.object)?;
        sum += if log_prob {
            (a.ln() - b.ln()).abs()
        } else {
            (a - b).abs()
        };
    }
    Ok(sum / combos.len() as f64)
}

fn prompt_kl<F: Scalar>(base: &Model<F>, current: &StampedModel<F>, prompt: &TokenSeq) -> Result<f64> {
    let (lb, _) = base.forward(prompt)?;
    let (le, _) = current.forward(prompt)?;
    let last = prompt.len() - 1;
    Ok(kl_from_logits(lb.row(last), le.row(last)))
}

pub fn loss_retention_prompts<F: Scalar>(
    base: &Model<F>,
    current: &StampedModel<F>,
    batch: &[BiasPair],
    prefixes: &[TokenSeq],
) -> Result<f64> {
    let combos = combinations(batch, prefixes, base.config().max_seq_len)?;
    let mut sum = 0.0;
    for (_, p1, p2) in &combos {
        sum += prompt_kl(base, current, p1)? + prompt_kl(base, current, p2)?;
    }
    Ok(sum / (2 * combos.len()) as f64)
}

pub fn loss_retention_subjects<F: Scalar>(
    base: &Model<F>,
    current: &StampedModel<F>,
    batch: &[BiasPair],
    template: &TemplatePrompt,
) -> Result<f64> {
    let subjects = distinct_subjects(batch);
    if subjects.is_empty() {
        return Err(Error::Loss("empty batch".into()));
    }
    let mut sum = 0.0;
    for s in &subjects {
        let prompt = template.apply(s);
        if prompt.len() > base.config().max_seq_len {
            return Err(Error::Argument(format!(
                "template prompt of {} tokens exceeds max_seq_len",
                prompt.len()
            )));
        }
        sum += prompt_kl(base, current, &prompt)?;
    }
    Ok(sum / subjects.len() as f64)
}

/// The three losses and their weighted sum, each computed independently from
/// model outputs.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<F: Scalar>(
    base: &Model<F>,
    current: &StampedModel<F>,
    batch: &[BiasPair],
    prefixes: &[TokenSeq],
    template: &TemplatePrompt,
    weights: &LossWeights,
    log_prob: bool,
) -> Result<LossValues> {
    let l_e = loss_efficacy(current, batch, prefixes, log_prob)?;
    let l_s1 = loss_retention_prompts(base, current, batch, prefixes)?;
    let l_s2 = loss_retention_subjects(base, current, batch, template)?;
    Ok(LossValues::combine(l_e, l_s1, l_s2, weights))
}

struct Sequence<F> {
    tokens: Vec<u32>,
    prompt_len: usize,
    object: Option<TokenSeq>,
    /// Input residual of the lowest stamped block, from the frozen base.
    residual: Vec<F>,
    base_log_probs: Vec<f64>,
}

/// A batch objective with base-side quantities cached and analytic stamp
/// gradients.
pub(crate) struct Objective<'a, F> {
    base: &'a Model<F>,
    first_block: usize,
    seqs: Vec<Sequence<F>>,
    /// `(seq of k1, seq of k2)` per combination.
    efficacy: Vec<(usize, usize)>,
    s1: Vec<usize>,
    s2: Vec<usize>,
    weights: LossWeights,
    log_prob: bool,
}

struct Evaluated<F> {
    acts: Activations<F>,
    /// Log-softmax rows from the prompt's last position to the end.
    log_rows: Vec<Vec<f64>>,
}

impl<'a, F: Scalar> Objective<'a, F> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        base: &'a Model<F>,
        lowest_layer: usize,
        batch: &[BiasPair],
        prefixes: &[TokenSeq],
        template: &TemplatePrompt,
        weights: LossWeights,
        log_prob: bool,
    ) -> Result<Self> {
        let max_len = base.config().max_seq_len;
        let first_block = lowest_layer - 1;
        let mut obj = Self {
            base,
            first_block,
            seqs: Vec::new(),
            efficacy: Vec::new(),
            s1: Vec::new(),
            s2: Vec::new(),
            weights,
            log_prob,
        };
        for (i, p1, p2) in combinations(batch, prefixes, max_len)? {
            let pair = &batch[i];
            let a = obj.push(&p1, Some(&pair.stereotyped.object))?;
            let b = obj.push(&p2, Some(&pair.counterfactual.object))?;
            obj.efficacy.push((a, b));
            obj.s1.extend([a, b]);
        }
        for s in distinct_subjects(batch) {
            let prompt = template.apply(&s);
            if prompt.len() > max_len {
                return Err(Error::Argument(format!(
                    "template prompt of {} tokens exceeds max_seq_len",
                    prompt.len()
                )));
            }
            let idx = obj.push(&prompt, None)?;
            obj.s2.push(idx);
        }
        Ok(obj)
    }

    fn push(&mut self, prompt: &TokenSeq, object: Option<&TokenSeq>) -> Result<usize> {
        let tokens = match object {
            Some(o) => object_sequence(prompt, o)?,
            None => prompt.0.clone(),
        };
        self.base.check_tokens(&tokens)?;
        let acts = self.base.run(&tokens, &RunOptions::default());
        let residual = if self.first_block == 0 {
            self.base.embed(&tokens)
        } else {
            acts.blocks[self.first_block - 1].out.clone()
        };
        let v = self.base.config().vocab_size;
        self.seqs.push(Sequence {
            base_log_probs: log_softmax_f64(acts.logits_row(prompt.len() - 1, v)),
            tokens,
            prompt_len: prompt.len(),
            object: object.cloned(),
            residual,
        });
        Ok(self.seqs.len() - 1)
    }

    fn run(&self, stamps: &[FairnessStamp<F>]) -> Vec<Evaluated<F>> {
        let v = self.base.config().vocab_size;
        self.seqs
            .iter()
            .map(|s| {
                let acts = self.base.run(
                    &s.tokens,
                    &RunOptions {
                        stamps,
                        patches: &[],
                        start: Some((self.first_block, &s.residual)),
                    },
                );
                let log_rows = (s.prompt_len - 1..s.tokens.len())
                    .map(|p| log_softmax_f64(acts.logits_row(p, v)))
                    .collect();
                Evaluated { acts, log_rows }
            })
            .collect()
    }

    fn object_log_prob(seq: &Sequence<F>, ev: &Evaluated<F>) -> f64 {
        let object = seq.object.as_ref().expect("efficacy sequences carry objects");
        object
            .tokens()
            .iter()
            .zip(&ev.log_rows)
            .map(|(&t, row)| row[t as usize])
            .sum()
    }

    /// Loss values and, when `grads` is given, their gradient with respect
    /// to every stamp.
    pub(crate) fn evaluate(
        &self,
        stamps: &[FairnessStamp<F>],
        grads: Option<&mut [StampGrad<F>]>,
    ) -> LossValues {
        let evals = self.run(stamps);
        let log_p: Vec<Option<f64>> = self
            .seqs
            .iter()
            .zip(&evals)
            .map(|(s, ev)| s.object.as_ref().map(|_| Self::object_log_prob(s, ev)))
            .collect();
        let kl: Vec<f64> = self
            .seqs
            .iter()
            .zip(&evals)
            .map(|(s, ev)| kl_from_log_probs(&s.base_log_probs, &ev.log_rows[0]))
            .collect();

        let gap = |a: usize, b: usize| {
            let (la, lb) = (log_p[a].unwrap(), log_p[b].unwrap());
            if self.log_prob {
                la - lb
            } else {
                la.exp() - lb.exp()
            }
        };
        let n_e = self.efficacy.len() as f64;
        let l_e = self.efficacy.iter().map(|&(a, b)| gap(a, b).abs()).sum::<f64>() / n_e;
        let l_s1 = self.s1.iter().map(|&i| kl[i]).sum::<f64>() / self.s1.len() as f64;
        let l_s2 = self.s2.iter().map(|&i| kl[i]).sum::<f64>() / self.s2.len() as f64;
        let values = LossValues::combine(l_e, l_s1, l_s2, &self.weights);

        let Some(grads) = grads else {
            return values;
        };
        let v = self.base.config().vocab_size;
        // Per-sequence coefficients on d(object log-prob or prob) and d(KL).
        let mut eff_coef = vec![0.0; self.seqs.len()];
        let mut kl_coef = vec![0.0; self.seqs.len()];
        for &(a, b) in &self.efficacy {
            let sign = match gap(a, b) {
                g if g > 0.0 => 1.0,
                g if g < 0.0 => -1.0,
                _ => 0.0,
            };
            eff_coef[a] += sign / n_e;
            eff_coef[b] -= sign / n_e;
        }
        for &i in &self.s1 {
            kl_coef[i] += self.weights.alpha / self.s1.len() as f64;
        }
        for &i in &self.s2 {
            kl_coef[i] += self.weights.beta / self.s2.len() as f64;
        }

        for (i, (seq, ev)) in self.seqs.iter().zip(&evals).enumerate() {
            if eff_coef[i] == 0.0 && kl_coef[i] == 0.0 {
                continue;
            }
            let t_len = seq.tokens.len();
            let mut dlogits = vec![F::zero(); t_len * v];
            let base_pos = seq.prompt_len - 1;
            if eff_coef[i] != 0.0 {
                // d log P / dz_j = onehot(o_j) − softmax(z_j); raw P adds a factor P.
                let scale = if self.log_prob {
                    eff_coef[i]
                } else {
                    eff_coef[i] * log_p[i].unwrap().exp()
                };
                let object = seq.object.as_ref().unwrap();
                for (j, &tok) in object.tokens().iter().enumerate() {
                    let row = &ev.log_rows[j];
                    let out = &mut dlogits[(base_pos + j) * v..(base_pos + j + 1) * v];
                    for (k, (o, &lp)) in out.iter_mut().zip(row).enumerate() {
                        let onehot = if k == tok as usize { 1.0 } else { 0.0 };
                        *o += F::lit(scale * (onehot - lp.exp()));
                    }
                }
            }
            if kl_coef[i] != 0.0 {
                let out = &mut dlogits[base_pos * v..(base_pos + 1) * v];
                for ((o, &le), &lb) in out.iter_mut().zip(&ev.log_rows[0]).zip(&seq.base_log_probs) {
                    *o += F::lit(kl_coef[i] * (le.exp() - lb.exp()));
                }
            }
            self.base
                .backward(&seq.tokens, &ev.acts, stamps, &dlogits, None, Some(&mut *grads));
        }
        values
    }
}

/// Compares the analytic gradient of the full objective with central finite
/// differences of [`total_loss`] at every stamp parameter and returns the
/// largest relative error, with denominators floored at 1e-8.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    base: &Arc<Model<f64>>,
    stamps: &[FairnessStamp<f64>],
    batch: &[BiasPair],
    prefixes: &[TokenSeq],
    template: &TemplatePrompt,
    weights: &LossWeights,
    log_prob: bool,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let lowest = stamps
        .iter()
        .map(|s| s.layer)
        .min()
        .ok_or_else(|| Error::Check("no stamps to check".into()))?;
    let objective = Objective::new(base, lowest, batch, prefixes, template, *weights, log_prob)?;
    let mut model = StampedModel::new(base.clone());
    for s in stamps {
        model.add_stamp(s.clone())?;
    }
    let mut grads: Vec<StampGrad<f64>> = model.stamps().iter().map(StampGrad::zeros_for).collect();
    objective.evaluate(model.stamps(), Some(&mut grads));

    let loss = |m: &StampedModel<f64>| -> Result<f64> {
        let v = total_loss(base, m, batch, prefixes, template, weights, log_prob)?.total;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Check("non-finite loss during finite differences".into()))
        }
    };
    let mut worst: f64 = 0.0;
    for si in 0..grads.len() {
        for which in 0..2 {
            let n = grads[si].keys.len();
            for k in 0..n {
                let analytic = if which == 0 {
                    grads[si].keys.data[k]
                } else {
                    grads[si].values.data[k]
                };
                if !analytic.is_finite() {
                    return Err(Error::Check("non-finite analytic gradient".into()));
                }
                let mut nudge = |delta: f64| -> Result<f64> {
                    let stamp = &mut model.stamps_mut()[si];
                    stamp.params_mut()[which].data[k] += delta;
                    let v = loss(&model);
                    model.stamps_mut()[si].params_mut()[which].data[k] -= delta;
                    v
                };
                let up = nudge(STEP)?;
                let down = nudge(-STEP)?;
                let fd = (up - down) / (2.0 * STEP);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct EditOutcome<F = f32> {
    pub model: StampedModel<F>,
    pub telemetry: Vec<EditRecord>,
    pub location: Option<LocationReport>,
    pub prefixes: Vec<TokenSeq>,
}

/// SS on every set seen so far, measured after one continual stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub ss: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome<F = f32> {
    pub edit: EditOutcome<F>,
    pub stages: Vec<StageReport>,
}

struct Editor<F: Scalar> {
    model: StampedModel<F>,
    adam: Adam<F>,
    rng: ChaCha8Rng,
    prefixes: Vec<TokenSeq>,
    template: TemplatePrompt,
    weights: LossWeights,
    hyper: EditHyper,
    telemetry: Vec<EditRecord>,
    batches_done: usize,
}

impl<F: Scalar> Editor<F> {
    fn new(
        base: Arc<Model<F>>,
        layers: &[usize],
        template: &TemplatePrompt,
        weights: &LossWeights,
        hyper: &EditHyper,
    ) -> Result<Self> {
        let d = base.model_dim();
        let prefixes = if hyper.prefix_count == 0 {
            Vec::new()
        } else {
            sample_prefixes(&base, hyper.prefix_count, hyper.prefix_len, hyper.seed)?
        };
        let mut model = StampedModel::new(base);
        for (i, &layer) in layers.iter().enumerate() {
            let seed = hyper.seed.wrapping_add(1 + i as u64);
            model.add_stamp(FairnessStamp::new(layer, d, hyper.d_c, seed)?)?;
        }
        Ok(Self {
            model,
            adam: Adam::new(hyper.learning_rate, hyper.adam_betas.0, hyper.adam_betas.1, hyper.adam_eps),
            rng: ChaCha8Rng::seed_from_u64(hyper.seed),
            prefixes,
            template: template.clone(),
            weights: *weights,
            hyper: hyper.clone(),
            telemetry: Vec::new(),
            batches_done: 0,
        })
    }

    fn diverged(&self, iteration: usize, detail: String, last: &[FairnessStamp<F>]) -> Error {
        Error::Divergence(Box::new(DivergenceInfo {
            batch: self.batches_done,
            iteration,
            detail,
            last_finite: last.iter().map(FairnessStamp::cast).collect(),
        }))
    }

    fn run_set(&mut self, set: &[BiasPair]) -> Result<()> {
        if set.is_empty() {
            return Err(Error::Argument("empty bias set".into()));
        }
        let base = self.model.base().clone();
        let lowest = self.model.stamps().iter().map(|s| s.layer).min().unwrap();
        let mut order: Vec<usize> = (0..set.len()).collect();
        order.shuffle(&mut self.rng);
        for chunk in order.chunks(self.hyper.batch_size) {
            let batch: Vec<BiasPair> = chunk.iter().map(|&i| set[i].clone()).collect();
            let objective = Objective::new(
                &base,
                lowest,
                &batch,
                &self.prefixes,
                &self.template,
                self.weights,
                self.hyper.log_prob_efficacy,
            )?;
            let mut last_finite = self.model.stamps().to_vec();
            for iter in 0..self.hyper.iterations_per_batch {
                let start = Instant::now();
                let mut grads: Vec<StampGrad<F>> =
                    self.model.stamps().iter().map(StampGrad::zeros_for).collect();
                let values = objective.evaluate(self.model.stamps(), Some(&mut grads));
                if !values.is_finite() {
                    return Err(self.diverged(iter, format!("non-finite loss {values:?}"), &last_finite));
                }
                if grads.iter().any(|g| g.flat().any(|x| !x.is_finite())) {
                    return Err(self.diverged(iter, "non-finite gradient".into(), &last_finite));
                }
                last_finite = self.model.stamps().to_vec();
                let mut params: Vec<&mut crate::tensor::Matrix<F>> = self
                    .model
                    .stamps_mut()
                    .iter_mut()
                    .flat_map(|s| s.params_mut())
                    .collect();
                let grad_refs: Vec<&crate::tensor::Matrix<F>> =
                    grads.iter().flat_map(|g| [&g.keys, &g.values]).collect();
                self.adam.step(&mut params, &grad_refs);
                if !self.model.stamps().iter().all(FairnessStamp::is_finite) {
                    return Err(self.diverged(iter, "non-finite stamp after step".into(), &last_finite));
                }
                let record = EditRecord {
                    batch: self.batches_done,
                    iter,
                    l_e: values.l_e,
                    l_s1: values.l_s1,
                    l_s2: values.l_s2,
                    total: values.total,
                    wall_ms: start.elapsed().as_secs_f64() * 1e3,
                };
                log::debug!(
                    "batch {} iter {}: L_e {:.5} L_s1 {:.5} L_s2 {:.5} total {:.5}",
                    record.batch,
                    iter,
                    values.l_e,
                    values.l_s1,
                    values.l_s2,
                    values.total
                );
                self.telemetry.push(record);
            }
            self.batches_done += 1;
        }
        Ok(())
    }

    fn finish(self, location: Option<LocationReport>) -> Result<EditOutcome<F>> {
        if !self.model.verify_base() {
            return Err(Error::Check("base parameters changed during editing".into()));
        }
        Ok(EditOutcome {
            model: self.model,
            telemetry: self.telemetry,
            location,
            prefixes: self.prefixes,
        })
    }
}

fn resolve_layers<F: Scalar>(
    base: &Model<F>,
    set: &[BiasPair],
    choice: &LayerChoice,
) -> Result<(Vec<usize>, Option<LocationReport>)> {
    match choice {
        LayerChoice::Explicit(layers) => {
            if layers.is_empty() {
                return Err(Error::Argument("no layers to stamp".into()));
            }
            Ok((layers.clone(), None))
        }
        LayerChoice::Auto(mode) => {
            let report = locate_decisive_layer(base, set, *mode)?;
            log::info!("decisive layer {} (mean IE {:?})", report.decisive_layer, report.mean_ie);
            Ok((vec![report.decisive_layer], Some(report)))
        }
    }
}

/// Trains fresh stamps on `bias_set` in seeded batches; Adam state carries
/// over from batch to batch.
pub fn edit<F: Scalar>(
    base: Arc<Model<F>>,
    bias_set: &[BiasPair],
    layers: &LayerChoice,
    template: &TemplatePrompt,
    weights: &LossWeights,
    hyper: &EditHyper,
) -> Result<EditOutcome<F>> {
    weights.validate()?;
    hyper.validate()?;
    if bias_set.is_empty() {
        return Err(Error::Argument("empty bias set".into()));
    }
    let (layers, location) = resolve_layers(&base, bias_set, layers)?;
    let mut editor = Editor::new(base, &layers, template, weights, hyper)?;
    editor.run_set(bias_set)?;
    editor.finish(location)
}

/// Edits the same stamps through `bias_sets` in order. Layers are resolved on
/// the first set; after each stage SS is measured on every set seen so far.
pub fn continual_edit<F: Scalar>(
    base: Arc<Model<F>>,
    bias_sets: &[Vec<BiasPair>],
    layers: &LayerChoice,
    template: &TemplatePrompt,
    weights: &LossWeights,
    hyper: &EditHyper,
) -> Result<ContinualOutcome<F>> {
    weights.validate()?;
    hyper.validate()?;
    let first = bias_sets
        .first()
        .ok_or_else(|| Error::Argument("no bias sets".into()))?;
    if first.is_empty() {
        return Err(Error::Argument("empty bias set".into()));
    }
    let (layers, location) = resolve_layers(&base, first, layers)?;
    let mut editor = Editor::new(base, &layers, template, weights, hyper)?;
    let mut stages = Vec::with_capacity(bias_sets.len());
    for (stage, set) in bias_sets.iter().enumerate() {
        editor.run_set(set)?;
        let ss = bias_sets[..=stage]
            .iter()
            .map(|s| stereotype_score(&editor.model, s))
            .collect::<Result<Vec<_>>>()?;
        log::info!("continual stage {stage}: SS per set {ss:?}");
        stages.push(StageReport { stage, ss });
    }
    Ok(ContinualOutcome {
        edit: editor.finish(location)?,
        stages,
    })
}
