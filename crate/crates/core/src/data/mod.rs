//! Knowledge triplets, bias pairs and the three evaluation sets.
//!
//! A [`DatasetBundle`] carries the stereotype set (bias pairs), the paraphrase
//! set (bias pairs linked back to a source pair) and the retention set
//! (prompts with candidate objects whose argmax must survive editing).

mod jsonl;
mod synthetic;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, TokenSeq};

pub use jsonl::{load_jsonl, save_jsonl};
pub use synthetic::{
    gen_synthetic_world, Association, GroundTruth, RetentionFact, SyntheticWorld, WorldLayout,
    WorldSpec,
};

/// `(subject, relation, object)`; the prompt is `subject ⧺ relation`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTriplet {
    #[serde(rename = "s")]
    pub subject: TokenSeq,
    #[serde(rename = "r")]
    pub relation: TokenSeq,
    #[serde(rename = "o")]
    pub object: TokenSeq,
}

impl KnowledgeTriplet {
    pub fn new(subject: Vec<u32>, relation: Vec<u32>, object: Vec<u32>) -> Self {
        Self {
            subject: TokenSeq(subject),
            relation: TokenSeq(relation),
            object: TokenSeq(object),
        }
    }

    pub fn prompt(&self) -> TokenSeq {
        self.subject.concat(&self.relation)
    }

    /// Whether prompt and object fit in a context of `max_seq_len`.
    pub fn fits(&self, max_seq_len: usize) -> bool {
        self.subject.len() + self.relation.len() + self.object.len() <= max_seq_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contrast {
    SubjectSwap,
    ObjectSwap,
}

/// A stereotyped triplet and its counterfactual.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BiasPair {
    pub stereotyped: KnowledgeTriplet,
    pub counterfactual: KnowledgeTriplet,
    pub contrast: Contrast,
    /// An object unrelated to the prompt, used by the language-modeling score.
    pub irrelevant_object: Option<TokenSeq>,
}

impl BiasPair {
    /// Pair whose triplets differ only in the subject.
    pub fn subject_swap(stereotyped: KnowledgeTriplet, counter_subject: Vec<u32>) -> Self {
        let counterfactual = KnowledgeTriplet {
            subject: TokenSeq(counter_subject),
            ..stereotyped.clone()
        };
        Self {
            stereotyped,
            counterfactual,
            contrast: Contrast::SubjectSwap,
            irrelevant_object: None,
        }
    }

    pub fn with_irrelevant(mut self, object: Vec<u32>) -> Self {
        self.irrelevant_object = Some(TokenSeq(object));
        self
    }
}

/// A violated [`BiasPair`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation(pub String);

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Checks the structural invariants of a pair without touching it.
pub fn validate_pair(pair: &BiasPair) -> std::result::Result<(), Violation> {
    let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
    for (name, k) in [("k1", k1), ("k2", k2)] {
        if k.subject.is_empty() || k.relation.is_empty() || k.object.is_empty() {
            return Err(Violation(format!("{name} has an empty span")));
        }
    }
    match pair.contrast {
        Contrast::SubjectSwap => {
            if k1.relation != k2.relation {
                return Err(Violation("subject-swap pair with differing relations".into()));
            }
            if k1.object != k2.object {
                return Err(Violation("subject-swap pair with differing objects".into()));
            }
            if k1.subject == k2.subject {
                return Err(Violation("subject-swap pair with identical subjects".into()));
            }
        }
        Contrast::ObjectSwap => {
            if k1.subject != k2.subject || k1.relation != k2.relation {
                return Err(Violation("object-swap pair with differing prompts".into()));
            }
            if k1.object == k2.object {
                return Err(Violation("object-swap pair with identical objects".into()));
            }
        }
    }
    if let Some(o_ir) = &pair.irrelevant_object {
        if o_ir.is_empty() {
            return Err(Violation("empty irrelevant object".into()));
        }
        if o_ir == &k1.object || o_ir == &k2.object {
            return Err(Violation("irrelevant object equals a pair object".into()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionItem {
    pub prompt: TokenSeq,
    pub candidates: Vec<TokenSeq>,
    pub note: String,
}

impl RetentionItem {
    pub fn validate(&self) -> std::result::Result<(), Violation> {
        if self.prompt.is_empty() {
            return Err(Violation("empty retention prompt".into()));
        }
        if self.candidates.len() < 2 {
            return Err(Violation("retention item needs at least two candidates".into()));
        }
        for (i, a) in self.candidates.iter().enumerate() {
            if a.is_empty() {
                return Err(Violation("empty retention candidate".into()));
            }
            if self.candidates[..i].contains(a) {
                return Err(Violation(format!("duplicate candidate {a}")));
            }
        }
        Ok(())
    }
}

/// A paraphrased pair and the index of its source in the bias set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphrasePair {
    pub source: usize,
    pub pair: BiasPair,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub bias_set: Vec<BiasPair>,
    pub paraphrase_set: Vec<ParaphrasePair>,
    pub retention_set: Vec<RetentionItem>,
    /// Explicit acknowledgement that one or more sets are empty.
    pub empty_sets_flagged: bool,
}

impl DatasetBundle {
    pub fn has_empty_set(&self) -> bool {
        self.bias_set.is_empty() || self.paraphrase_set.is_empty() || self.retention_set.is_empty()
    }

    pub fn paraphrase_pairs(&self) -> Vec<BiasPair> {
        self.paraphrase_set.iter().map(|p| p.pair.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.has_empty_set() && !self.empty_sets_flagged {
            return Err(Error::Argument(
                "bundle has an empty set but is not flagged as such".into(),
            ));
        }
        for (i, p) in self.bias_set.iter().enumerate() {
            validate_pair(p).map_err(|v| Error::Argument(format!("bias pair {i}: {v}")))?;
        }
        for (i, p) in self.paraphrase_set.iter().enumerate() {
            if p.source >= self.bias_set.len() {
                return Err(Error::Argument(format!(
                    "paraphrase {i} links to missing bias pair {}",
                    p.source
                )));
            }
            validate_pair(&p.pair).map_err(|v| Error::Argument(format!("paraphrase {i}: {v}")))?;
        }
        for (i, item) in self.retention_set.iter().enumerate() {
            item.validate()
                .map_err(|v| Error::Argument(format!("retention item {i}: {v}")))?;
        }
        Ok(())
    }
}
