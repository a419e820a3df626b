//! The pipeline configuration file and its overrides.
//!
//! One JSON document with a section per pipeline concern. Every section and
//! field is optional and falls back to the library defaults. Relative data
//! paths resolve against the config file's directory; the output directory
//! resolves against the working directory.
//!
//! Overrides apply in the order file, environment (`FAIRSTAMP_OUT`,
//! `FAIRSTAMP_SEED`), command line.

use std::path::{Path, PathBuf};

use fairstamp::data::WorldSpec;
use fairstamp::edit::{EditHyper, LayerChoice, LossWeights, TemplatePrompt};
use fairstamp::model::TrainHyper;
use fairstamp::tracing::PositionsMode;
use fairstamp::{Error, ModelConfig, Result};
use serde::{Deserialize, Serialize};

pub const ENV_OUT: &str = "FAIRSTAMP_OUT";
pub const ENV_SEED: &str = "FAIRSTAMP_SEED";

/// User-supplied dataset files. When `bundle` is absent the synthetic world
/// is generated from the `world` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub bundle: Option<PathBuf>,
    /// JSONL, one JSON array of token ids per line.
    pub corpus: Option<PathBuf>,
    /// Template relation tokens for the subject-retention loss.
    pub template: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Modes {
    pub positions: PositionsMode,
    /// Explicit 1-based layers to stamp; tracing picks one when absent.
    pub layers: Option<Vec<usize>>,
    pub log_prob_efficacy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualSpec {
    pub enabled: bool,
    /// The bias set is cut into this many contiguous, disjoint stages.
    pub num_sets: usize,
}

impl Default for ContinualSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            num_sets: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Replaces the seed of every section when set.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub world: WorldSpec,
    pub data: DataPaths,
    pub train: TrainHyper,
    pub edit: EditHyper,
    pub loss: LossWeights,
    pub modes: Modes,
    pub continual: ContinualSpec,
    pub output: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: ModelConfig::default(),
            world: WorldSpec::default(),
            data: DataPaths::default(),
            train: TrainHyper::default(),
            edit: EditHyper::default(),
            loss: LossWeights::default(),
            modes: Modes::default(),
            continual: ContinualSpec::default(),
            output: PathBuf::from("runs/default"),
        }
    }
}

/// Values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub positions: Option<PositionsMode>,
    pub layers: Option<Vec<usize>>,
}

impl Overrides {
    /// Reads `FAIRSTAMP_OUT` and `FAIRSTAMP_SEED`.
    pub fn from_env() -> Result<Self> {
        let out = std::env::var_os(ENV_OUT).map(PathBuf::from);
        let seed = match std::env::var(ENV_SEED) {
            Ok(s) => Some(
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{ENV_SEED}={s:?} is not an unsigned integer")))?,
            ),
            Err(std::env::VarError::NotPresent) => None,
            Err(e) => return Err(Error::Config(format!("{ENV_SEED}: {e}"))),
        };
        Ok(Self {
            out,
            seed,
            ..Self::default()
        })
    }

    /// `other` wins field by field.
    pub fn then(self, other: Overrides) -> Self {
        Self {
            out: other.out.or(self.out),
            seed: other.seed.or(self.seed),
            positions: other.positions.or(self.positions),
            layers: other.layers.or(self.layers),
        }
    }
}

/// Parses `"i[,j...]"` into 1-based layer indices.
pub fn parse_layers(s: &str) -> Result<Vec<usize>> {
    let layers = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index {t:?} in {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.is_empty() {
        return Err(Error::Config("empty layer list".into()));
    }
    Ok(layers)
}

pub fn parse_positions(s: &str) -> Result<PositionsMode> {
    match s {
        "subject" => Ok(PositionsMode::SubjectTokens),
        "all" => Ok(PositionsMode::AllTokens),
        other => Err(Error::Config(format!(
            "positions must be \"subject\" or \"all\", got {other:?}"
        ))),
    }
}

impl PipelineConfig {
    /// Reads and validates a config file, resolving data paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: PipelineConfig = serde_json::from_str(&raw)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        config.modes.log_prob_efficacy |= config.edit.log_prob_efficacy;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.data.bundle, &mut config.data.corpus].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(out) = &overrides.out {
            self.output = out.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = Some(seed);
        }
        if let Some(p) = overrides.positions {
            self.modes.positions = p;
        }
        if let Some(l) = &overrides.layers {
            self.modes.layers = Some(l.clone());
        }
        if let Some(seed) = self.seed {
            self.model.seed = seed;
            self.world.seed = seed;
            self.train.seed = seed;
            self.edit.seed = seed;
        }
        self.edit.log_prob_efficacy = self.modes.log_prob_efficacy;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.edit.validate()?;
        self.loss.validate()?;
        if self.train.steps == 0 || self.train.batch == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train steps, batch and lr must be positive".into()));
        }
        if let Some(layers) = &self.modes.layers {
            if layers.is_empty() {
                return Err(Error::Config("modes.layers is empty".into()));
            }
            let n = self.model.num_layers;
            if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n) {
                return Err(Error::Config(format!("layer {bad} outside 1..={n}")));
            }
            let mut sorted = layers.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != layers.len() {
                return Err(Error::Config("modes.layers lists a layer twice".into()));
            }
        }
        if self.continual.enabled && self.continual.num_sets < 2 {
            return Err(Error::Config("continual editing needs num_sets >= 2".into()));
        }
        if let Some(t) = &self.data.template {
            TemplatePrompt::new(t.clone()).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.data.bundle.is_some() && self.data.template.is_none() {
            return Err(Error::Config(
                "data.template is required with a user-supplied bundle".into(),
            ));
        }
        Ok(())
    }

    pub fn synthetic(&self) -> bool {
        self.data.bundle.is_none()
    }

    pub fn layer_choice(&self) -> LayerChoice {
        match &self.modes.layers {
            Some(layers) => LayerChoice::Explicit(layers.clone()),
            None => LayerChoice::Auto(self.modes.positions),
        }
    }
}
