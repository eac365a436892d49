//! Run configuration: one JSON file merged over the defaults, then flags.

use std::path::{Path, PathBuf};

use pillarkit::suites::SuiteConfig;
use pillarkit::toy::{BenchConfig, ToyTaskSpec, TrainConfig};
use pillarkit::{DescriptorKind, GridMode, GridSpec};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptorSettings {
    pub kind: DescriptorKind,
    /// Embedding width of the last MLP layer.
    pub width: usize,
    /// Hidden widths before the last layer.
    pub hidden: Vec<usize>,
    /// Per-channel aggregation weights instead of one shared `w`.
    pub per_channel: bool,
    /// Descriptor parameters to load instead of a seeded initialisation.
    pub params: Option<PathBuf>,
}

impl Default for DescriptorSettings {
    fn default() -> Self {
        Self {
            kind: DescriptorKind::Weighted,
            width: 64,
            hidden: Vec::new(),
            per_channel: false,
            params: None,
        }
    }
}

/// Everything a subcommand reads. The top-level `seed` is copied into every
/// nested seed field, so one number pins the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: GridMode,
    /// Grid for `featurize`; defaults to the standard grid of `mode`.
    pub grid: Option<GridSpec>,
    pub descriptor: DescriptorSettings,
    pub toy: ToyTaskSpec,
    pub train: TrainConfig,
    pub suites: SuiteConfig,
    pub bench: BenchConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: GridMode::Pillar,
            grid: None,
            descriptor: DescriptorSettings::default(),
            toy: ToyTaskSpec::default(),
            train: TrainConfig::default(),
            suites: SuiteConfig::default(),
            bench: BenchConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<GridMode>,
    pub descriptor: Option<DescriptorKind>,
    pub out: Option<PathBuf>,
}

/// Objects merge key by key; anything else in `patch` replaces `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        let mut value =
            serde_json::to_value(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.to_owned(),
                source,
            })?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(CliError::Config(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            }
            merge(&mut value, patch);
        }
        let mut cfg: RunConfig =
            serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, flags: &Overrides) {
        if let Some(seed) = flags.seed {
            self.seed = seed;
        }
        if let Some(mode) = flags.mode {
            self.mode = mode;
        }
        if let Some(kind) = flags.descriptor {
            self.descriptor.kind = kind;
            self.train.kind = kind;
        }
        if let Some(out) = &flags.out {
            self.out = out.clone();
        }
        self.toy.seed = self.seed;
        self.train.seed = self.seed;
        self.suites.seed = self.seed;
        self.bench.seed = self.seed;
    }

    fn validate(&self) -> Result<(), CliError> {
        let bad = |e: pillarkit::Error| CliError::Config(e.to_string());
        self.grid_spec().validate().map_err(bad)?;
        self.toy.validate().map_err(bad)?;
        self.train.validate().map_err(bad)?;
        if self.descriptor.width == 0 || self.descriptor.hidden.contains(&0) {
            return Err(CliError::Config("descriptor widths must be positive".into()));
        }
        Ok(())
    }

    /// The configured grid, forced to `mode`. A grid written for the other
    /// mode is replaced by that mode's default.
    pub fn grid_spec(&self) -> GridSpec {
        match &self.grid {
            Some(g) if g.mode == self.mode => g.clone(),
            _ => GridSpec::default_for(self.mode),
        }
    }
}
