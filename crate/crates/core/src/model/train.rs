use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, RunOptions};
use crate::optim::Adam;
use crate::tensor::{log_softmax_f64, Matrix, Scalar};
use crate::{Error, Result, TokenSeq};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            steps: 1500,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean next-token cross-entropy over the whole corpus before training.
    pub initial_loss: f64,
    /// The same quantity after the last step.
    pub final_loss: f64,
    /// Minibatch loss at every step.
    pub step_losses: Vec<f64>,
}

impl<F: Scalar> Model<F> {
    /// Mean next-token cross-entropy over every predicted position.
    pub fn corpus_loss(&self, corpus: &[TokenSeq]) -> Result<f64> {
        let v = self.config.vocab_size;
        let mut total = 0.0;
        let mut count = 0usize;
        for seq in corpus.iter().filter(|s| s.len() >= 2) {
            self.check_tokens(seq.tokens())?;
            let toks = seq.tokens();
            let acts = self.run(&toks[..toks.len() - 1], &RunOptions::default());
            for i in 0..toks.len() - 1 {
                total -= log_softmax_f64(acts.logits_row(i, v))[toks[i + 1] as usize];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Argument("corpus has no sequence of length ≥ 2".into()));
        }
        Ok(total / count as f64)
    }
}

/// Trains every parameter with Adam on next-token cross-entropy, sampling
/// minibatches with replacement under `hyper.seed`.
pub fn train_base<F: Scalar>(
    model: &mut Model<F>,
    corpus: &[TokenSeq],
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if corpus.is_empty() {
        return Err(Error::Argument("empty training corpus".into()));
    }
    if hyper.batch == 0 || !(hyper.lr > 0.0) {
        return Err(Error::Argument("batch and lr must be positive".into()));
    }
    let usable: Vec<&TokenSeq> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Argument("corpus has no sequence of length ≥ 2".into()));
    }
    for s in &usable {
        model.check_tokens(s.tokens())?;
    }

    let initial_loss = model.corpus_loss(corpus)?;
    let v = model.config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = Adam::new(hyper.lr, 0.9, 0.98, 1e-8);
    let mut grads = model.params.zeros_like();
    let mut step_losses = Vec::with_capacity(hyper.steps);

    for _ in 0..hyper.steps {
        let picks: Vec<&TokenSeq> = (0..hyper.batch)
            .map(|_| usable[rng.gen_range(0..usable.len())])
            .collect();
        let n_targets: usize = picks.iter().map(|s| s.len() - 1).sum();
        let norm = 1.0 / n_targets as f64;
        for g in grads.tensors_mut() {
            g.fill_zero();
        }
        let mut loss = 0.0;
        for seq in picks {
            let toks = seq.tokens();
            let input = &toks[..toks.len() - 1];
            let acts = model.run(input, &RunOptions::default());
            let mut dlogits = vec![F::zero(); input.len() * v];
            for i in 0..input.len() {
                let lp = log_softmax_f64(acts.logits_row(i, v));
                let target = toks[i + 1] as usize;
                loss -= lp[target] * norm;
                for j in 0..v {
                    dlogits[i * v + j] = F::lit(lp[j].exp() * norm);
                }
                dlogits[i * v + target] -= F::lit(norm);
            }
            model.backward(input, &acts, &[], &dlogits, Some(&mut grads), None);
        }
        if !loss.is_finite() {
            return Err(Error::Argument("training loss became non-finite".into()));
        }
        step_losses.push(loss);
        let grad_refs: Vec<&Matrix<F>> = grads.named().into_iter().map(|(_, t)| t).collect();
        let mut param_refs = model.params.tensors_mut();
        adam.step(&mut param_refs, &grad_refs);
    }

    let final_loss = model.corpus_loss(corpus)?;
    Ok(TrainReport {
        initial_loss,
        final_loss,
        step_losses,
    })
}
