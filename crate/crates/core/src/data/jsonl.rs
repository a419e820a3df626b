//! One-file JSONL encoding of a [`DatasetBundle`], discriminated by `kind`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    validate_pair, BiasPair, Contrast, DatasetBundle, KnowledgeTriplet, ParaphrasePair,
    RetentionItem,
};
use crate::io::write_atomic;
use crate::{Error, Result, TokenSeq};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Bias {
        id: i64,
        k1: KnowledgeTriplet,
        k2: KnowledgeTriplet,
        contrast: Contrast,
        o_ir: Option<TokenSeq>,
    },
    Paraphrase {
        id: i64,
        source_id: i64,
        k1: KnowledgeTriplet,
        k2: KnowledgeTriplet,
    },
    Retention {
        id: i64,
        prompt: TokenSeq,
        candidates: Vec<TokenSeq>,
        note: String,
    },
}

/// Writes bias records, then paraphrases, then retention items. Record ids
/// are positions within each set.
pub fn save_jsonl(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let mut push = |rec: Record| -> Result<()> {
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
        Ok(())
    };
    for (id, p) in bundle.bias_set.iter().enumerate() {
        push(Record::Bias {
            id: id as i64,
            k1: p.stereotyped.clone(),
            k2: p.counterfactual.clone(),
            contrast: p.contrast,
            o_ir: p.irrelevant_object.clone(),
        })?;
    }
    for (id, p) in bundle.paraphrase_set.iter().enumerate() {
        push(Record::Paraphrase {
            id: id as i64,
            source_id: p.source as i64,
            k1: p.pair.stereotyped.clone(),
            k2: p.pair.counterfactual.clone(),
        })?;
    }
    for (id, item) in bundle.retention_set.iter().enumerate() {
        push(Record::Retention {
            id: id as i64,
            prompt: item.prompt.clone(),
            candidates: item.candidates.clone(),
            note: item.note.clone(),
        })?;
    }
    write_atomic(path, &out)
}

/// Reads a bundle, resolving paraphrase links by bias-record id. Paraphrases
/// inherit the contrast of their source and carry no irrelevant object.
pub fn load_jsonl(path: &Path) -> Result<DatasetBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let line_err = |line: usize, reason: String| Error::DataLine {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let mut bundle = DatasetBundle::default();
    let mut bias_ids: HashMap<i64, usize> = HashMap::new();
    let mut pending: Vec<(usize, i64, KnowledgeTriplet, KnowledgeTriplet)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(raw).map_err(|e| line_err(line, e.to_string()))?;
        match rec {
            Record::Bias {
                id,
                k1,
                k2,
                contrast,
                o_ir,
            } => {
                let pair = BiasPair {
                    stereotyped: k1,
                    counterfactual: k2,
                    contrast,
                    irrelevant_object: o_ir,
                };
                validate_pair(&pair).map_err(|v| line_err(line, v.0))?;
                if bias_ids.insert(id, bundle.bias_set.len()).is_some() {
                    return Err(line_err(line, format!("duplicate bias id {id}")));
                }
                bundle.bias_set.push(pair);
            }
            Record::Paraphrase {
                source_id, k1, k2, ..
            } => pending.push((line, source_id, k1, k2)),
            Record::Retention {
                prompt,
                candidates,
                note,
                ..
            } => {
                let item = RetentionItem {
                    prompt,
                    candidates,
                    note,
                };
                item.validate().map_err(|v| line_err(line, v.0))?;
                bundle.retention_set.push(item);
            }
        }
    }

    for (line, source_id, k1, k2) in pending {
        let source = *bias_ids
            .get(&source_id)
            .ok_or_else(|| line_err(line, format!("paraphrase links to unknown bias id {source_id}")))?;
        let pair = BiasPair {
            stereotyped: k1,
            counterfactual: k2,
            contrast: bundle.bias_set[source].contrast,
            irrelevant_object: None,
        };
        validate_pair(&pair).map_err(|v| line_err(line, v.0))?;
        bundle.paraphrase_set.push(ParaphrasePair { source, pair });
    }

    if bundle.has_empty_set() {
        log::warn!(
            "{}: bundle has empty sets (bias {}, paraphrase {}, retention {})",
            path.display(),
            bundle.bias_set.len(),
            bundle.paraphrase_set.len(),
            bundle.retention_set.len()
        );
        bundle.empty_sets_flagged = true;
    }
    Ok(bundle)
}
