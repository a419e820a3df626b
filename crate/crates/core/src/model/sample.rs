use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, WeightedIndex};

use super::Model;
use crate::tensor::Scalar;
use crate::{Error, Result, TokenSeq};

/// Draws `count` ancestral samples with lengths uniform in `length_range`.
///
/// The model has no beginning-of-sequence token, so the first token of each
/// sample is uniform over the vocabulary and every later token is drawn from
/// the model's next-token distribution.
pub fn sample_prefixes<F: Scalar>(
    model: &Model<F>,
    count: usize,
    length_range: (usize, usize),
    seed: u64,
) -> Result<Vec<TokenSeq>> {
    let (min, max) = length_range;
    let limit = model.config.max_seq_len / 2;
    if min == 0 || min > max || max > limit {
        return Err(Error::Argument(format!(
            "prefix length range [{min}, {max}] must satisfy 1 ≤ min ≤ max ≤ {limit}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = model.config.vocab_size;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(min..=max);
        let mut tokens = vec![rng.gen_range(0..vocab) as u32];
        while tokens.len() < len {
            let dist = model.next_token_distribution(&TokenSeq::new(tokens.clone()))?;
            let idx = WeightedIndex::new(&dist)
                .map_err(|e| Error::Argument(format!("degenerate distribution: {e}")))?;
            tokens.push(idx.sample(&mut rng) as u32);
        }
        out.push(TokenSeq::new(tokens));
    }
    Ok(out)
}
