//! A synthetic token world with planted biased associations.
//!
//! Social groups split into two sides along one or more bias axes. For each
//! bias relation, every group on the first side of the relation's axis is
//! followed by attribute `A` with probability `bias_strength` (else `B`) and
//! every group on the second side mirrors it. Axis `a` puts group `g` on side
//! `(g / s) % 2` with `s = num_groups / 2^(a+1)`, and bias pairs contrast `g`
//! with `g + s`. Every bias
//! relation has synonym relations with the same statistics, used as
//! paraphrases. Retention facts map each
//! `(group, retention relation)` to a unique fact token with probability 1, and
//! a template relation continues a subject with one of its facts.
//!
//! With `attribute_marker` set, every attribute is preceded by one shared
//! marker token, so bias objects are two-token spans and the attribute is
//! decided one position after the prompt.
//!
//! Corpus lines hold one or two statements, each preceded by up to two filler
//! tokens. Subjects are always `[determiner, group]`, so every subject swap
//! keeps positions aligned.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BiasPair, DatasetBundle, KnowledgeTriplet, ParaphrasePair, RetentionItem};
use crate::{Error, Result, TokenSeq};

const MIN_FILLERS: usize = 4;
const MAX_FILLER_RUN: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub num_groups: usize,
    pub num_attributes: usize,
    pub num_bias_pairs: usize,
    /// Independent ways of splitting the groups into two sides. Bias
    /// relations are assigned to axes in contiguous blocks.
    pub num_axes: usize,
    pub num_retention: usize,
    pub num_paraphrases_per_pair: usize,
    pub corpus_size: usize,
    pub bias_strength: f64,
    pub attribute_marker: bool,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_groups: 8,
            num_attributes: 8,
            num_bias_pairs: 32,
            num_axes: 1,
            num_retention: 24,
            num_paraphrases_per_pair: 1,
            corpus_size: 6000,
            bias_strength: 0.95,
            attribute_marker: true,
            seed: 0,
        }
    }
}

/// Token ids assigned to each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldLayout {
    pub groups: Vec<u32>,
    pub determiner: u32,
    pub bias_relations: Vec<u32>,
    /// `paraphrase_relations[r]` are the synonyms of `bias_relations[r]`.
    pub paraphrase_relations: Vec<Vec<u32>>,
    pub retention_relations: Vec<u32>,
    pub template: u32,
    pub marker: Option<u32>,
    pub attributes: Vec<u32>,
    pub facts: Vec<u32>,
    pub fillers: Vec<u32>,
}

impl WorldLayout {
    pub fn subject(&self, group: usize) -> Vec<u32> {
        vec![self.determiner, self.groups[group]]
    }

    /// The object span naming `attribute`.
    pub fn attribute_object(&self, attribute: u32) -> Vec<u32> {
        match self.marker {
            Some(m) => vec![m, attribute],
            None => vec![attribute],
        }
    }
}

/// The planted majority association of one `(group, relation)` context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub group: u32,
    pub relation: u32,
    pub stereotyped: u32,
    pub counter: u32,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionFact {
    pub group: u32,
    pub relation: u32,
    pub fact: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub layout: WorldLayout,
    /// Includes synonym relations.
    pub associations: Vec<Association>,
    pub retention_facts: Vec<RetentionFact>,
}

impl GroundTruth {
    pub fn association(&self, group: u32, relation: u32) -> Option<&Association> {
        self.associations
            .iter()
            .find(|a| a.group == group && a.relation == relation)
    }

    /// The template continuation `p'(s) = s ⧺ [template]`.
    pub fn template(&self) -> TokenSeq {
        TokenSeq::new(vec![self.layout.template])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub corpus: Vec<TokenSeq>,
    pub bundle: DatasetBundle,
    pub ground_truth: GroundTruth,
}

/// What follows a context in the corpus.
enum Continuation {
    Biased { majority: u32, minority: u32 },
    Fixed(u32),
    Uniform(Vec<u32>),
}

struct Context {
    prompt: Vec<u32>,
    next: Continuation,
}

fn allocate(next: &mut u32, n: usize) -> Vec<u32> {
    let out = (*next..*next + n as u32).collect();
    *next += n as u32;
    out
}

pub fn gen_synthetic_world(
    spec: &WorldSpec,
    vocab_size: usize,
    max_seq_len: usize,
) -> Result<SyntheticWorld> {
    let gen_err = |m: String| Error::Generation(m);
    if spec.num_groups < 2 || !spec.num_groups.is_multiple_of(2) {
        return Err(gen_err(format!(
            "num_groups must be even and at least 2, got {}",
            spec.num_groups
        )));
    }
    if spec.num_attributes < 2 {
        return Err(gen_err("num_attributes must be at least 2".into()));
    }
    if spec.num_bias_pairs == 0 {
        return Err(gen_err("num_bias_pairs must be positive".into()));
    }
    if !(spec.bias_strength > 0.5 - 1e-12 && spec.bias_strength <= 1.0) {
        return Err(gen_err(format!(
            "bias_strength {} outside [0.5, 1]",
            spec.bias_strength
        )));
    }
    let marker_len = usize::from(spec.attribute_marker);
    let statement_len = 4 + marker_len;
    let longest = MAX_FILLER_RUN + statement_len;
    if max_seq_len < longest {
        return Err(gen_err(format!(
            "max_seq_len {max_seq_len} cannot hold a statement of {longest} tokens"
        )));
    }

    let group_pairs = spec.num_groups / 2;
    let num_relations = spec.num_bias_pairs.div_ceil(group_pairs);
    if spec.num_axes == 0
        || spec.num_axes > num_relations
        || !spec.num_groups.is_multiple_of(1 << spec.num_axes.min(31))
    {
        return Err(gen_err(format!(
            "{} axes need num_groups divisible by 2^axes and at least one bias relation each",
            spec.num_axes
        )));
    }
    let num_ret_relations = spec.num_retention.div_ceil(spec.num_groups);
    let special = spec.num_groups
        + 1
        + num_relations * (1 + spec.num_paraphrases_per_pair)
        + num_ret_relations
        + 1
        + marker_len
        + spec.num_attributes
        + spec.num_retention;
    if special + MIN_FILLERS > vocab_size {
        return Err(gen_err(format!(
            "world needs {} tokens but vocab_size is {vocab_size}",
            special + MIN_FILLERS
        )));
    }

    let mut next = 0u32;
    let groups = allocate(&mut next, spec.num_groups);
    let determiner = allocate(&mut next, 1)[0];
    let bias_relations = allocate(&mut next, num_relations);
    let paraphrase_relations = (0..num_relations)
        .map(|_| allocate(&mut next, spec.num_paraphrases_per_pair))
        .collect::<Vec<_>>();
    let retention_relations = allocate(&mut next, num_ret_relations);
    let template = allocate(&mut next, 1)[0];
    let marker = allocate(&mut next, marker_len).first().copied();
    let attributes = allocate(&mut next, spec.num_attributes);
    let facts = allocate(&mut next, spec.num_retention);
    let fillers: Vec<u32> = (next..vocab_size as u32).collect();
    let layout = WorldLayout {
        groups,
        determiner,
        bias_relations,
        paraphrase_relations,
        retention_relations,
        template,
        marker,
        attributes,
        facts,
        fillers,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut contexts = Vec::new();
    let mut associations = Vec::new();
    let mut bias_set = Vec::new();
    let mut paraphrase_set = Vec::new();

    'outer: for r in 0..num_relations {
        let step = spec.num_groups >> (1 + r * spec.num_axes / num_relations);
        let side = |g: usize| (g / step) % 2;
        let picks: Vec<u32> = layout
            .attributes
            .choose_multiple(&mut rng, 2)
            .copied()
            .collect();
        let (a_attr, b_attr) = (picks[0], picks[1]);
        let relations: Vec<u32> = std::iter::once(layout.bias_relations[r])
            .chain(layout.paraphrase_relations[r].iter().copied())
            .collect();
        for &rel in &relations {
            for g in 0..spec.num_groups {
                let (maj, min) = if side(g) == 0 {
                    (a_attr, b_attr)
                } else {
                    (b_attr, a_attr)
                };
                associations.push(Association {
                    group: layout.groups[g],
                    relation: rel,
                    stereotyped: maj,
                    counter: min,
                    strength: spec.bias_strength,
                });
                let mut prompt = layout.subject(g);
                prompt.push(rel);
                contexts.push(Context {
                    prompt,
                    next: Continuation::Biased {
                        majority: maj,
                        minority: min,
                    },
                });
            }
        }
        for gp in (0..spec.num_groups).filter(|&g| side(g) == 0) {
            if bias_set.len() == spec.num_bias_pairs {
                break 'outer;
            }
            let (ga, gb, object) = if rng.gen_bool(0.5) {
                (gp, gp + step, a_attr)
            } else {
                (gp + step, gp, b_attr)
            };
            let object = layout.attribute_object(object);
            let o_ir = *layout.fillers.choose(&mut rng).expect("fillers checked non-empty");
            let k1 = KnowledgeTriplet::new(
                layout.subject(ga),
                vec![layout.bias_relations[r]],
                object.clone(),
            );
            let source = bias_set.len();
            bias_set.push(
                BiasPair::subject_swap(k1, layout.subject(gb))
                    .with_irrelevant(layout.attribute_object(o_ir)),
            );
            for &syn in &layout.paraphrase_relations[r] {
                let k1 = KnowledgeTriplet::new(layout.subject(ga), vec![syn], object.clone());
                paraphrase_set.push(ParaphrasePair {
                    source,
                    pair: BiasPair::subject_swap(k1, layout.subject(gb)),
                });
            }
        }
    }

    let mut retention_facts = Vec::new();
    for (i, &fact) in layout.facts.iter().enumerate() {
        let rel = layout.retention_relations[i / spec.num_groups];
        let g = i % spec.num_groups;
        retention_facts.push(RetentionFact {
            group: layout.groups[g],
            relation: rel,
            fact,
        });
        let mut prompt = layout.subject(g);
        prompt.push(rel);
        contexts.push(Context {
            prompt,
            next: Continuation::Fixed(fact),
        });
    }
    let retention_set = retention_facts
        .iter()
        .map(|rf| {
            let g = layout.groups.iter().position(|&t| t == rf.group).unwrap();
            let mut candidates: Vec<TokenSeq> = retention_facts
                .iter()
                .filter(|o| o.relation == rf.relation)
                .map(|o| TokenSeq::new(vec![o.fact]))
                .collect();
            if candidates.len() < 2 {
                let extra = retention_facts
                    .iter()
                    .find(|o| o.fact != rf.fact)
                    .map_or(layout.attributes[0], |o| o.fact);
                candidates.push(TokenSeq::new(vec![extra]));
            }
            let mut prompt = layout.subject(g);
            prompt.push(rf.relation);
            RetentionItem {
                prompt: TokenSeq::new(prompt),
                candidates,
                note: format!("group {} relation {} -> fact {}", rf.group, rf.relation, rf.fact),
            }
        })
        .collect::<Vec<_>>();

    for g in 0..spec.num_groups {
        let own: Vec<u32> = retention_facts
            .iter()
            .filter(|f| f.group == layout.groups[g])
            .map(|f| f.fact)
            .collect();
        let options = if own.is_empty() {
            layout.attributes.clone()
        } else {
            own
        };
        let mut prompt = layout.subject(g);
        prompt.push(layout.template);
        contexts.push(Context {
            prompt,
            next: Continuation::Uniform(options),
        });
    }

    let mut corpus = Vec::with_capacity(spec.corpus_size);
    for _ in 0..spec.corpus_size {
        let statements = if 2 * longest <= max_seq_len && rng.gen_bool(0.5) {
            2
        } else {
            1
        };
        let mut seq = Vec::new();
        for _ in 0..statements {
            for _ in 0..rng.gen_range(0..=MAX_FILLER_RUN) {
                seq.push(*layout.fillers.choose(&mut rng).unwrap());
            }
            let ctx = &contexts[rng.gen_range(0..contexts.len())];
            seq.extend_from_slice(&ctx.prompt);
            let object = match &ctx.next {
                Continuation::Biased { majority, minority } => {
                    seq.extend(layout.marker);
                    if rng.gen_bool(spec.bias_strength) {
                        *majority
                    } else {
                        *minority
                    }
                }
                Continuation::Fixed(t) => *t,
                Continuation::Uniform(opts) => *opts.choose(&mut rng).unwrap(),
            };
            seq.push(object);
        }
        corpus.push(TokenSeq::new(seq));
    }

    let bundle = DatasetBundle {
        empty_sets_flagged: paraphrase_set.is_empty() || retention_set.is_empty(),
        bias_set,
        paraphrase_set,
        retention_set,
    };
    Ok(SyntheticWorld {
        corpus,
        bundle,
        ground_truth: GroundTruth {
            layout,
            associations,
            retention_facts,
        },
    })
}
