//! Pipeline stages. Each stage reads the previous stages' files from the
//! output directory, writes only under its own subdirectory and records its
//! artifacts in the run manifest.
//!
//! ```text
//! data/     bundle.jsonl corpus.jsonl template.json [ground_truth.json]
//! base/     manifest.json weights.bin train_report.json
//! trace/    location.json layer_ie.csv token_ie.csv
//! edit/     stamps/layer_XX/ telemetry.csv summary.json
//! eval/     report.json report.csv base_report.json base_report.csv
//! continual/ stamps/layer_XX/ telemetry.csv continual.json
//! run_manifest.json
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::ValueEnum;
use fairstamp::data::{gen_synthetic_world, load_jsonl, save_jsonl, BiasPair, DatasetBundle};
use fairstamp::edit::{continual_edit, edit, telemetry_csv, EditRecord, StageReport, TemplatePrompt};
use fairstamp::io::{write_atomic, write_json};
use fairstamp::metrics::{evaluate, EvalReport};
use fairstamp::model::{load_checkpoint, save_checkpoint, train_base};
use fairstamp::stamp::{load_stamp, save_stamp};
use fairstamp::tracing::{locate_decisive_layer, mean_token_trace, LocationReport};
use fairstamp::{Error, FairnessStamp, Model, Result, StampedModel, TokenSeq};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::RunManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Gen,
    TrainBase,
    Trace,
    Edit,
    Eval,
    Continual,
    All,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::TrainBase => "train-base",
            Stage::Trace => "trace",
            Stage::Edit => "edit",
            Stage::Eval => "eval",
            Stage::Continual => "continual",
            Stage::All => "all",
        }
    }
}

/// A failed stage and the library error behind it.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageError {}

pub const BUNDLE: &str = "data/bundle.jsonl";
pub const CORPUS: &str = "data/corpus.jsonl";
pub const TEMPLATE: &str = "data/template.json";
pub const GROUND_TRUTH: &str = "data/ground_truth.json";
pub const BASE_DIR: &str = "base";
pub const TRAIN_REPORT: &str = "base/train_report.json";
pub const LOCATION: &str = "trace/location.json";
pub const LAYER_IE: &str = "trace/layer_ie.csv";
pub const TOKEN_IE: &str = "trace/token_ie.csv";
pub const EDIT_STAMPS: &str = "edit/stamps";
pub const EDIT_TELEMETRY: &str = "edit/telemetry.csv";
pub const EDIT_SUMMARY: &str = "edit/summary.json";
pub const REPORT_JSON: &str = "eval/report.json";
pub const REPORT_CSV: &str = "eval/report.csv";
pub const BASE_REPORT_JSON: &str = "eval/base_report.json";
pub const BASE_REPORT_CSV: &str = "eval/base_report.csv";
pub const CONTINUAL_STAMPS: &str = "continual/stamps";
pub const CONTINUAL_TELEMETRY: &str = "continual/telemetry.csv";
pub const CONTINUAL_REPORT: &str = "continual/continual.json";

/// What the edit stage learned, apart from the stamp weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub layers: Vec<usize>,
    pub location: Option<LocationReport>,
    pub stamp_parameters: usize,
    pub base_checksum: String,
    pub prefixes: Vec<TokenSeq>,
    pub final_record: Option<EditRecordRow>,
}

/// An [`EditRecord`] without its wall time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecordRow {
    pub batch: usize,
    pub iter: usize,
    pub l_e: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub total: f64,
}

impl From<&EditRecord> for EditRecordRow {
    fn from(r: &EditRecord) -> Self {
        Self {
            batch: r.batch,
            iter: r.iter,
            l_e: r.l_e,
            l_s1: r.l_s1,
            l_s2: r.l_s2,
            total: r.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinualReport {
    pub layers: Vec<usize>,
    pub set_sizes: Vec<usize>,
    /// `stages[k].ss[j]`: SS of set `j` after editing set `k`.
    pub stages: Vec<StageReport>,
}

pub fn stamp_dir(root: &str, layer: usize) -> String {
    format!("{root}/layer_{layer:02}")
}

pub fn save_corpus(corpus: &[TokenSeq], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for seq in corpus {
        serde_json::to_writer(&mut out, seq)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Reads one JSON array of token ids per line; blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<TokenSeq>> {
    let file = fs::File::open(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: TokenSeq = serde_json::from_str(&line).map_err(|e| Error::DataLine {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        corpus.push(seq);
    }
    Ok(corpus)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Loads every `layer_XX` stamp under `dir`, in layer order.
pub fn load_stamps(dir: &Path) -> Result<Vec<FairnessStamp<f32>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Load {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Load {
            path: dir.to_path_buf(),
            reason: "no stamps found".into(),
        });
    }
    dirs.iter().map(|d| load_stamp(d)).collect()
}

/// Splits `set` into `n` contiguous chunks whose sizes differ by at most one.
pub fn split_sets(set: &[BiasPair], n: usize) -> Result<Vec<Vec<BiasPair>>> {
    if n == 0 || set.len() < n {
        return Err(Error::Argument(format!(
            "cannot split {} bias pairs into {n} non-empty sets",
            set.len()
        )));
    }
    let (q, r) = (set.len() / n, set.len() % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = q + usize::from(i < r);
        out.push(set[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    /// Validates `config` and opens its output directory.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output.clone();
        fs::create_dir_all(&out).map_err(|e| Error::Io {
            path: out.clone(),
            source: e,
        })?;
        let manifest = RunManifest::open(&out, &config);
        Ok(Self {
            config,
            out,
            manifest,
        })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn run(&mut self, stage: Stage) -> std::result::Result<(), StageError> {
        let stages: &[Stage] = match stage {
            Stage::All if self.config.continual.enabled => &[
                Stage::Gen,
                Stage::TrainBase,
                Stage::Trace,
                Stage::Edit,
                Stage::Eval,
                Stage::Continual,
            ],
            Stage::All => &[Stage::Gen, Stage::TrainBase, Stage::Trace, Stage::Edit, Stage::Eval],
            _ => std::slice::from_ref(&stage),
        };
        for &s in stages {
            self.run_one(s).map_err(|error| StageError { stage: s, error })?;
        }
        Ok(())
    }

    fn run_one(&mut self, stage: Stage) -> Result<()> {
        log::info!("stage {} starting", stage.name());
        let start = Instant::now();
        let artifacts = match stage {
            Stage::Gen => self.gen()?,
            Stage::TrainBase => self.train_base()?,
            Stage::Trace => self.trace()?,
            Stage::Edit => self.edit()?,
            Stage::Eval => self.eval()?,
            Stage::Continual => self.continual()?,
            Stage::All => unreachable!("expanded by run"),
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        log::info!("stage {} done in {:.1}s", stage.name(), wall_ms / 1e3);
        self.manifest.record(&self.out, stage.name(), wall_ms, &artifacts)
    }

    fn bundle(&self) -> Result<DatasetBundle> {
        load_jsonl(&self.path(BUNDLE))
    }

    fn template(&self) -> Result<TemplatePrompt> {
        let tokens: Vec<u32> = read_json(&self.path(TEMPLATE))?;
        TemplatePrompt::new(tokens)
    }

    fn base(&self) -> Result<Arc<Model<f32>>> {
        let model = load_checkpoint(&self.path(BASE_DIR))?;
        if model.config() != &self.config.model {
            return Err(Error::Config(format!(
                "base checkpoint in {} was trained under a different model config",
                self.path(BASE_DIR).display()
            )));
        }
        Ok(Arc::new(model))
    }

    fn check_vocab(&self, bundle: &DatasetBundle) -> Result<()> {
        let v = self.config.model.vocab_size as u32;
        let seqs = bundle
            .bias_set
            .iter()
            .chain(bundle.paraphrase_set.iter().map(|p| &p.pair))
            .flat_map(|p| {
                [&p.stereotyped, &p.counterfactual]
                    .into_iter()
                    .flat_map(|k| [&k.subject, &k.relation, &k.object])
                    .chain(p.irrelevant_object.as_ref())
            })
            .chain(
                bundle
                    .retention_set
                    .iter()
                    .flat_map(|r| std::iter::once(&r.prompt).chain(&r.candidates)),
            );
        for seq in seqs {
            if let Some(&t) = seq.tokens().iter().find(|&&t| t >= v) {
                return Err(Error::Argument(format!(
                    "token {t} in the bundle exceeds vocab_size {v}"
                )));
            }
        }
        Ok(())
    }

    fn gen(&mut self) -> Result<Vec<String>> {
        let mut artifacts = vec![BUNDLE.to_string(), CORPUS.to_string(), TEMPLATE.to_string()];
        if self.config.synthetic() {
            let world = gen_synthetic_world(
                &self.config.world,
                self.config.model.vocab_size,
                self.config.model.max_seq_len,
            )?;
            save_jsonl(&world.bundle, &self.path(BUNDLE))?;
            save_corpus(&world.corpus, &self.path(CORPUS))?;
            write_json(&self.path(TEMPLATE), &world.ground_truth.template())?;
            write_json(&self.path(GROUND_TRUTH), &world.ground_truth)?;
            artifacts.push(GROUND_TRUTH.to_string());
        } else {
            let data = &self.config.data;
            let bundle_path = data.bundle.as_ref().expect("checked by synthetic()");
            let bundle = load_jsonl(bundle_path)?;
            bundle.validate()?;
            self.check_vocab(&bundle)?;
            let corpus_path = data.corpus.as_ref().ok_or_else(|| {
                Error::Config("data.corpus is required with a user-supplied bundle".into())
            })?;
            let corpus = load_corpus(corpus_path)?;
            save_jsonl(&bundle, &self.path(BUNDLE))?;
            save_corpus(&corpus, &self.path(CORPUS))?;
            let template = data.template.clone().expect("checked by validate");
            write_json(&self.path(TEMPLATE), &TokenSeq::new(template))?;
        }
        Ok(artifacts)
    }

    fn train_base(&mut self) -> Result<Vec<String>> {
        let corpus = load_corpus(&self.path(CORPUS))?;
        let mut model = Model::<f32>::init(self.config.model.clone())?;
        let report = train_base(&mut model, &corpus, &self.config.train)?;
        log::info!(
            "base loss {:.4} -> {:.4}",
            report.initial_loss,
            report.final_loss
        );
        save_checkpoint(&model, &self.path(BASE_DIR))?;
        write_json(&self.path(TRAIN_REPORT), &report)?;
        Ok(vec![
            format!("{BASE_DIR}/manifest.json"),
            format!("{BASE_DIR}/weights.bin"),
            TRAIN_REPORT.to_string(),
        ])
    }

    fn trace(&mut self) -> Result<Vec<String>> {
        let base = self.base()?;
        let bundle = self.bundle()?;
        let report = locate_decisive_layer(&*base, &bundle.bias_set, self.config.modes.positions)?;
        log::info!(
            "decisive layer {} (mean IE {:?})",
            report.decisive_layer,
            report.mean_ie
        );
        report.save(&self.path(LOCATION), &self.path(LAYER_IE))?;
        let tokens = mean_token_trace(&*base, &bundle.bias_set)?;
        let csv = match tokens {
            Some(t) => t.to_csv(),
            None => "layer,position,ie\n".to_string(),
        };
        write_atomic(&self.path(TOKEN_IE), csv.as_bytes())?;
        Ok(vec![LOCATION.into(), LAYER_IE.into(), TOKEN_IE.into()])
    }

    fn save_stamps(&self, root: &str, stamps: &[FairnessStamp<f32>]) -> Result<Vec<String>> {
        let dir = self.path(root);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?;
        }
        let mut artifacts = Vec::new();
        for s in stamps {
            let rel = stamp_dir(root, s.layer);
            save_stamp(s, &self.path(&rel))?;
            artifacts.push(format!("{rel}/stamp_manifest.json"));
            artifacts.push(format!("{rel}/stamp.bin"));
        }
        Ok(artifacts)
    }

    /// Keeps the last finite stamps of a diverged edit for inspection.
    fn keep_diverged(&self, root: &str, err: Error) -> Error {
        if let Error::Divergence(info) = &err {
            let rel = format!("{root}_diverged");
            if let Err(e) = self.save_stamps(&rel, &info.last_finite) {
                log::warn!("could not save diverged stamps: {e}");
            }
        }
        err
    }

    fn edit(&mut self) -> Result<Vec<String>> {
        let base = self.base()?;
        let bundle = self.bundle()?;
        let template = self.template()?;
        let outcome = edit(
            base.clone(),
            &bundle.bias_set,
            &self.config.layer_choice(),
            &template,
            &self.config.loss,
            &self.config.edit,
        )
        .map_err(|e| self.keep_diverged(EDIT_STAMPS, e))?;
        let mut artifacts = self.save_stamps(EDIT_STAMPS, outcome.model.stamps())?;
        write_atomic(&self.path(EDIT_TELEMETRY), telemetry_csv(&outcome.telemetry).as_bytes())?;
        let summary = EditSummary {
            layers: outcome.model.stamps().iter().map(|s| s.layer).collect(),
            location: outcome.location,
            stamp_parameters: outcome.model.num_stamp_parameters(),
            base_checksum: base.checksum(),
            prefixes: outcome.prefixes,
            final_record: outcome.telemetry.last().map(EditRecordRow::from),
        };
        write_json(&self.path(EDIT_SUMMARY), &summary)?;
        artifacts.extend([EDIT_TELEMETRY.to_string(), EDIT_SUMMARY.to_string()]);
        Ok(artifacts)
    }

    fn eval(&mut self) -> Result<Vec<String>> {
        let base = self.base()?;
        let bundle = self.bundle()?;
        let mut edited = StampedModel::new(base.clone());
        for stamp in load_stamps(&self.path(EDIT_STAMPS))? {
            edited.add_stamp(stamp)?;
        }
        let report = evaluate(&*base, &edited, &bundle)?;
        let base_report = evaluate(&*base, &*base, &bundle)?;
        log::info!("edited {}", summary_line(&report));
        log::info!("base   {}", summary_line(&base_report));
        report.save(&self.path(REPORT_JSON), &self.path(REPORT_CSV))?;
        base_report.save(&self.path(BASE_REPORT_JSON), &self.path(BASE_REPORT_CSV))?;
        Ok(vec![
            REPORT_JSON.into(),
            REPORT_CSV.into(),
            BASE_REPORT_JSON.into(),
            BASE_REPORT_CSV.into(),
        ])
    }

    fn continual(&mut self) -> Result<Vec<String>> {
        let base = self.base()?;
        let bundle = self.bundle()?;
        let template = self.template()?;
        let sets = split_sets(&bundle.bias_set, self.config.continual.num_sets)?;
        let outcome = continual_edit(
            base,
            &sets,
            &self.config.layer_choice(),
            &template,
            &self.config.loss,
            &self.config.edit,
        )
        .map_err(|e| self.keep_diverged(CONTINUAL_STAMPS, e))?;
        let stamps = outcome.edit.model.stamps();
        let mut artifacts = self.save_stamps(CONTINUAL_STAMPS, stamps)?;
        write_atomic(
            &self.path(CONTINUAL_TELEMETRY),
            telemetry_csv(&outcome.edit.telemetry).as_bytes(),
        )?;
        let report = ContinualReport {
            layers: stamps.iter().map(|s| s.layer).collect(),
            set_sizes: sets.iter().map(Vec::len).collect(),
            stages: outcome.stages,
        };
        write_json(&self.path(CONTINUAL_REPORT), &report)?;
        artifacts.extend([CONTINUAL_TELEMETRY.to_string(), CONTINUAL_REPORT.to_string()]);
        Ok(artifacts)
    }
}

pub fn summary_line(r: &EvalReport) -> String {
    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    format!(
        "SS {:.2} PS {} RS {} LMS {} ICAT {}",
        r.ss,
        f(r.ps),
        f(r.rs),
        f(r.lms),
        f(r.icat)
    )
}

/// Reads a stage artifact written under `out`.
pub fn read_artifact<T: for<'de> Deserialize<'de>>(out: &Path, rel: &str) -> Result<T> {
    read_json(&out.join(rel))
}
