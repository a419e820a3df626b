//! Contrastive causal tracing.
//!
//! For a subject-swap pair, the biased run on `prompt(k1)` records hidden
//! states, the counterfactual run on `prompt(k2)` gives `P*[o]`, and the
//! restoration runs re-run `prompt(k2)` with one layer's states copied back
//! from the biased run. `TE = P[o] - P*[o]` and `IE_l = P*_l[o] - P*[o]`,
//! where `o` is the stereotyped object.
//!
//! Positions are aligned at the last subject token, so subjects of unequal
//! length are patched on their overlapping tail only.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{validate_pair, BiasPair, Contrast};
use crate::io::{write_atomic, write_json};
use crate::model::{object_sequence, HiddenStates, Model, Patch, ProbabilityModel};
use crate::tensor::Scalar;
use crate::{Error, Result, TokenSeq};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionsMode {
    /// Restore only the subject tokens.
    #[default]
    SubjectTokens,
    /// Restore the whole layer.
    AllTokens,
}

impl PositionsMode {
    pub fn label(self) -> &'static str {
        match self {
            PositionsMode::SubjectTokens => "subject",
            PositionsMode::AllTokens => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub total_effect: f64,
    /// `indirect_effects[l - 1]` is `IE_l`; absent for object-swap pairs.
    pub indirect_effects: Option<Vec<f64>>,
    pub biased_prob: f64,
    pub counterfactual_prob: f64,
    /// Positions of the counterfactual input that were restored.
    pub restored_positions: Vec<usize>,
}

impl TraceResult {
    /// Layer (1-based) with the largest IE, lowest index on ties.
    pub fn argmax_layer(&self) -> Option<usize> {
        self.indirect_effects.as_deref().map(argmax_first)
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best + 1
}

/// The two runs of a subject-swap pair and the offset mapping counterfactual
/// positions onto biased positions.
struct Alignment {
    biased: Vec<u32>,
    counter: Vec<u32>,
    /// `biased_pos = counter_pos + shift`.
    shift: isize,
    counter_subject: std::ops::Range<usize>,
}

impl Alignment {
    fn new(pair: &BiasPair) -> Result<Self> {
        validate_pair(pair).map_err(|v| Error::Alignment(v.0))?;
        let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
        let shift = k1.subject.len() as isize - k2.subject.len() as isize;
        if shift != 0 {
            log::warn!(
                "subject lengths differ ({} vs {}); aligning at the last subject token",
                k1.subject.len(),
                k2.subject.len()
            );
        }
        Ok(Self {
            biased: object_sequence(&k1.prompt(), &k1.object)?,
            counter: object_sequence(&k2.prompt(), &k2.object)?,
            shift,
            counter_subject: 0..k2.subject.len(),
        })
    }

    fn source(&self, counter_pos: usize) -> Option<usize> {
        let p = counter_pos as isize + self.shift;
        (p >= 0 && (p as usize) < self.biased.len()).then_some(p as usize)
    }

    fn positions(&self, mode: PositionsMode) -> Vec<usize> {
        let range = match mode {
            PositionsMode::SubjectTokens => self.counter_subject.clone(),
            PositionsMode::AllTokens => 0..self.counter.len(),
        };
        range.filter(|&p| self.source(p).is_some()).collect()
    }

    fn patch<F: Scalar>(&self, states: &HiddenStates<F>, layer: usize, positions: &[usize]) -> Patch<F> {
        Patch {
            layer,
            positions: positions.to_vec(),
            vectors: positions
                .iter()
                .map(|&p| states.get(layer, self.source(p).unwrap()).to_vec())
                .collect(),
        }
    }
}

fn biased_states<F: Scalar>(model: &Model<F>, a: &Alignment) -> Result<HiddenStates<F>> {
    Ok(model.forward(&TokenSeq::new(a.biased.clone()))?.1)
}

pub fn trace_pair<F: Scalar>(
    model: &Model<F>,
    pair: &BiasPair,
    positions: PositionsMode,
) -> Result<TraceResult> {
    let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
    if pair.contrast == Contrast::ObjectSwap {
        validate_pair(pair).map_err(|v| Error::Alignment(v.0))?;
        let prompt = k1.prompt();
        let p1 = model.object_prob(&prompt, &k1.object)?;
        let p2 = model.object_prob(&prompt, &k2.object)?;
        return Ok(TraceResult {
            total_effect: p1 - p2,
            indirect_effects: None,
            biased_prob: p1,
            counterfactual_prob: p2,
            restored_positions: Vec::new(),
        });
    }

    let align = Alignment::new(pair)?;
    let object = &k1.object;
    let p1 = model.object_prob(&k1.prompt(), object)?;
    let counter_prompt = k2.prompt();
    let p_star = model.object_prob(&counter_prompt, object)?;
    let states = biased_states(model, &align)?;
    let restored = align.positions(positions);
    let mut ie = Vec::with_capacity(model.num_layers());
    for layer in 1..=model.num_layers() {
        let patch = align.patch(&states, layer, &restored);
        let p = model.object_prob_patched(&counter_prompt, object, &[patch])?;
        ie.push(p - p_star);
    }
    Ok(TraceResult {
        total_effect: p1 - p_star,
        indirect_effects: Some(ie),
        biased_prob: p1,
        counterfactual_prob: p_star,
        restored_positions: restored,
    })
}

/// IE of restoring a single `(layer, position)` site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenTrace {
    /// `ie[l - 1][i]` for prompt position `i`.
    pub ie: Vec<Vec<f64>>,
    pub prompt_len: usize,
}

/// Requires a subject-swap pair whose subjects have equal length.
pub fn trace_tokens<F: Scalar>(model: &Model<F>, pair: &BiasPair) -> Result<TokenTrace> {
    if pair.contrast != Contrast::SubjectSwap {
        return Err(Error::Alignment("token tracing needs a subject-swap pair".into()));
    }
    let align = Alignment::new(pair)?;
    if align.shift != 0 {
        return Err(Error::Alignment("token tracing needs equal subject lengths".into()));
    }
    let (k1, k2) = (&pair.stereotyped, &pair.counterfactual);
    let prompt = k2.prompt();
    let p_star = model.object_prob(&prompt, &k1.object)?;
    let states = biased_states(model, &align)?;
    let mut ie = Vec::with_capacity(model.num_layers());
    for layer in 1..=model.num_layers() {
        let mut row = Vec::with_capacity(prompt.len());
        for pos in 0..prompt.len() {
            let patch = align.patch(&states, layer, &[pos]);
            row.push(model.object_prob_patched(&prompt, &k1.object, &[patch])? - p_star);
        }
        ie.push(row);
    }
    Ok(TokenTrace {
        ie,
        prompt_len: prompt.len(),
    })
}

/// Elementwise mean of the token traces of every traceable pair with the
/// most common prompt length. `None` when no pair qualifies.
pub fn mean_token_trace<F: Scalar>(model: &Model<F>, pairs: &[BiasPair]) -> Result<Option<TokenTrace>> {
    let mut traces = Vec::new();
    for pair in pairs {
        match trace_tokens(model, pair) {
            Ok(t) => traces.push(t),
            Err(Error::Alignment(reason)) => log::warn!("token trace skipped: {reason}"),
            Err(e) => return Err(e),
        }
    }
    let mut lens: Vec<usize> = traces.iter().map(|t| t.prompt_len).collect();
    lens.sort_unstable();
    let Some(len) = lens
        .iter()
        .copied()
        .max_by_key(|&l| (lens.iter().filter(|&&x| x == l).count(), std::cmp::Reverse(l)))
    else {
        return Ok(None);
    };
    let kept: Vec<&TokenTrace> = traces.iter().filter(|t| t.prompt_len == len).collect();
    let n = kept.len() as f64;
    let mut ie = vec![vec![0.0; len]; model.num_layers()];
    for t in &kept {
        for (acc, row) in ie.iter_mut().zip(&t.ie) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v / n;
            }
        }
    }
    Ok(Some(TokenTrace { ie, prompt_len: len }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationReport {
    pub positions: PositionsMode,
    pub mean_ie: Vec<f64>,
    pub decisive_layer: usize,
    /// One entry per input pair, in input order.
    pub per_pair: Vec<TraceResult>,
    pub skipped: usize,
}

/// Averages IE vectors over the pairs that have them and picks the layer with
/// the largest mean, lowest index on ties.
pub fn locate_decisive_layer<F: Scalar>(
    model: &Model<F>,
    pairs: &[BiasPair],
    positions: PositionsMode,
) -> Result<LocationReport> {
    if pairs.is_empty() {
        return Err(Error::Location("no pairs to trace".into()));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    let mut sum = vec![0.0; model.num_layers()];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (i, pair) in pairs.iter().enumerate() {
        let result = match trace_pair(model, pair, positions) {
            Ok(r) => r,
            Err(Error::Alignment(reason)) => {
                log::warn!("pair {i} skipped: {reason}");
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match &result.indirect_effects {
            Some(ie) => {
                for (s, v) in sum.iter_mut().zip(ie) {
                    *s += v;
                }
                used += 1;
            }
            None => {
                log::warn!("pair {i} has no layer effects (object swap)");
                skipped += 1;
            }
        }
        per_pair.push(result);
    }
    if used == 0 {
        return Err(Error::Location(format!(
            "none of {} pairs could be traced layer-wise",
            pairs.len()
        )));
    }
    let mean_ie: Vec<f64> = sum.iter().map(|s| s / used as f64).collect();
    Ok(LocationReport {
        positions,
        decisive_layer: argmax_first(&mean_ie),
        mean_ie,
        per_pair,
        skipped,
    })
}

impl LocationReport {
    /// `layer,position,ie` rows; `position` is the restoration mode.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,position,ie\n");
        for (l, v) in self.mean_ie.iter().enumerate() {
            writeln!(out, "{},{},{}", l + 1, self.positions.label(), v).unwrap();
        }
        out
    }

    pub fn save(&self, json_path: &Path, csv_path: &Path) -> Result<()> {
        write_json(json_path, self)?;
        write_atomic(csv_path, self.to_csv().as_bytes())
    }
}

impl TokenTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,position,ie\n");
        for (l, row) in self.ie.iter().enumerate() {
            for (p, v) in row.iter().enumerate() {
                writeln!(out, "{},{},{}", l + 1, p, v).unwrap();
            }
        }
        out
    }
}
