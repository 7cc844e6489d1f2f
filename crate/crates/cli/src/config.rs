use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use taskbias_core::attention::RolloutMode;
use taskbias_core::classifier::ClassifierConfig;
use taskbias_core::pretrain::PretrainConfig;
use taskbias_core::probe::{PrefixTable, DEFAULT_BINS};
use taskbias_core::prompt::PromptVariant;
use taskbias_core::synth::{CorpusConfig, TaskId, DEFAULT_TRAIN_FRACTION};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub prompts: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            checkpoint: "checkpoints/backbone.tbvlm".into(),
            prompts: "prompts".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairsConfig {
    pub train_fraction: f64,
    pub pairs: Vec<[TaskId; 2]>,
}

impl Default for PairsConfig {
    fn default() -> Self {
        Self {
            train_fraction: DEFAULT_TRAIN_FRACTION,
            pairs: vec![
                [TaskId::Object, TaskId::Action],
                [TaskId::Object, TaskId::SceneText],
                [TaskId::Action, TaskId::SceneText],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub pair: [TaskId; 2],
    pub bins: usize,
    pub extremes: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            pair: [TaskId::Object, TaskId::SceneText],
            bins: DEFAULT_BINS,
            extremes: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrefixConfig {
    pub pairs: Vec<[TaskId; 2]>,
    pub baseline: PrefixTable,
    pub directed: PrefixTable,
}

impl Default for PrefixConfig {
    fn default() -> Self {
        Self {
            pairs: PairsConfig::default().pairs,
            baseline: PrefixTable::uniform(),
            directed: PrefixTable::directed(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneBlock {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub variants: Vec<PromptVariant>,
}

impl Default for TuneBlock {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-2,
            batch_size: 32,
            variants: vec![
                PromptVariant::VisualToken { tokens: 1 },
                PromptVariant::PixelBorder { width: 1 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub mode: RolloutMode,
    /// Number of held-out images whose overlays are written as pixmaps.
    pub export: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            mode: RolloutMode::default(),
            export: 8,
        }
    }
}

/// Everything a run needs. Block seeds are overwritten by the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub pairs: PairsConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeConfig,
    pub prefix: PrefixConfig,
    pub tune: TuneBlock,
    pub attention: AttentionConfig,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            pairs: PairsConfig::default(),
            pretrain: PretrainConfig::default(),
            probe: ProbeConfig::default(),
            prefix: PrefixConfig::default(),
            tune: TuneBlock::default(),
            attention: AttentionConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

impl RunConfig {
    /// `default` names the built-in configuration; anything else is a TOML file.
    pub fn load(source: &str) -> Result<Self> {
        if source == "default" {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(source).with_context(|| format!("reading config {source}"))?;
        Self::from_toml(&text).with_context(|| format!("parsing config {source}"))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies `key=value` overrides with dotted keys, then the global seed.
    pub fn resolve(mut self, overrides: &[(String, String)]) -> Result<Self> {
        if !overrides.is_empty() {
            let mut tree = toml::Value::try_from(&self)?;
            for (key, value) in overrides {
                set_dotted(&mut tree, key, value)?;
            }
            self = tree.try_into().context("applying overrides")?;
        }
        let seed = self.seed;
        self.corpus.seed = seed;
        self.pretrain.seed = seed;
        self.classifier.seed = seed;
        self.pretrain.backbone.image_size = self.corpus.image_size;
        self.pretrain.holdout_fraction = 1.0 - self.pairs.train_fraction;
        Ok(self)
    }

    /// Short digest of the resolved configuration, used as the run id.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn under(&self, root: &Path) -> Paths {
        Paths {
            corpus: root.join(&self.paths.corpus),
            checkpoint: root.join(&self.paths.checkpoint),
            prompts: root.join(&self.paths.prompts),
            reports: root.join(&self.paths.reports),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words that are not TOML literals are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(tree: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Some(table) = node.as_table_mut() else {
            bail!(UsageError(format!("override key {key}: {} is not a table", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            if !table.contains_key(*part) && !optional_key(&parts) {
                bail!(UsageError(format!("unknown config key {key}")));
            }
            table.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| UsageError(format!("unknown config key {key}")))?;
    }
    bail!(UsageError("empty override key".into()))
}

/// Keys that are absent from the serialized tree when unset.
fn optional_key(parts: &[&str]) -> bool {
    parts == ["pretrain", "policy"]
}
