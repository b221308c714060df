//! Run configuration files (TOML).
//!
//! Relative paths are resolved against the directory holding the config
//! file. Stage entries may name a `preset` (`desk` or `full`) and override
//! any of its fields.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, ModalitySpec, PosMode};
use crate::datamix::{apply_exclusion, read_exclusion_list, read_manifest, DatasetSpec, MediaKind, PairRecord, Registry};
use crate::error::{Error, Result};
use crate::experts::{ExpertDims, Modality, DEFAULT_MAX_SECONDS};
use crate::model::ModelConfig;
use crate::retrieval::Precision;
use crate::textpipe::DEFAULT_VOCAB;
use crate::trainer::{validate_stage_order, CropMode, ParamGroup, StageConfig, StageId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub ff_width: Option<usize>,
    #[serde(default = "default_max_seconds")]
    pub max_seconds: u32,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    #[serde(default)]
    pub text_dim: Option<usize>,
    #[serde(default = "default_table_std")]
    pub table_init_std: f64,
    pub modalities: Vec<Modality>,
    pub dims: ExpertDims,
}

fn default_max_seconds() -> u32 {
    DEFAULT_MAX_SECONDS
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

fn default_table_std() -> f64 {
    0.02
}

impl ModelSection {
    pub fn to_model_config(&self, pos_mode: PosMode) -> ModelConfig {
        let specs = self
            .modalities
            .iter()
            .map(|&m| ModalitySpec {
                modality: m,
                dim: self.dims.get(m),
            })
            .collect();
        let mut agg = AggregatorConfig::new(self.d_model, self.num_layers, self.num_heads, specs);
        if let Some(ff) = self.ff_width {
            agg.ff_width = ff;
        }
        agg.max_seconds = self.max_seconds;
        agg.pos_mode = pos_mode;
        agg.table_init_std = self.table_init_std;
        let mut cfg = ModelConfig::new(agg);
        cfg.vocab_size = self.vocab_size;
        if let Some(t) = self.text_dim {
            cfg.text_dim = t;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: String,
    pub weight: f64,
    pub manifest: PathBuf,
    #[serde(default)]
    pub noisy: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub id: StageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub mix: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub examples_per_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze: Option<Vec<ParamGroup>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
}

impl StageEntry {
    pub fn resolve(&self) -> Result<StageConfig> {
        let mut s = match self.preset.as_deref().unwrap_or("desk") {
            "desk" => StageConfig::desk(self.id, self.mix.clone()),
            "full" => {
                let mut s = StageConfig::full(self.id);
                s.mix = self.mix.clone();
                s
            }
            other => return Err(Error::Config(format!("stage {}: unknown preset `{other}`", self.id))),
        };
        if let Some(v) = self.examples_per_epoch {
            s.examples_per_epoch = v;
        }
        if let Some(v) = self.num_epochs {
            s.num_epochs = v;
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.gamma {
            s.gamma = v;
        }
        if let Some(v) = &self.freeze {
            s.freeze = v.clone();
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.margin {
            s.margin = v;
        }
        Ok(s)
    }

    /// Entry with every field spelled out.
    pub fn from_resolved(s: &StageConfig) -> Self {
        Self {
            id: s.id,
            preset: None,
            mix: s.mix.clone(),
            examples_per_epoch: Some(s.examples_per_epoch),
            num_epochs: Some(s.num_epochs),
            lr: Some(s.lr),
            gamma: Some(s.gamma),
            freeze: Some(s.freeze.clone()),
            batch_size: Some(s.batch_size),
            margin: Some(s.margin),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub pos_mode: PosMode,
    #[serde(default)]
    pub crop: CropMode,
    /// Media ids removed from every training corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion: Option<PathBuf>,
    /// Held-out manifest evaluated once per epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    pub model: ModelSection,
    pub datasets: Vec<DatasetEntry>,
    pub stages: Vec<StageEntry>,
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Reads and validates a config; nothing is computed before this
    /// succeeds.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = std::path::absolute(base).map_err(|e| Error::io(base, e))?;
        let cfg = Self::parse(&text, &base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in &mut self.datasets {
            fix(&mut d.manifest);
        }
        if let Some(p) = &mut self.exclusion {
            fix(p);
        }
        if let Some(p) = &mut self.validation {
            fix(p);
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config(self.pos_mode)
    }

    pub fn stage_configs(&self) -> Result<Vec<StageConfig>> {
        self.stages.iter().map(StageEntry::resolve).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        let mut names = HashSet::new();
        for d in &self.datasets {
            if !names.insert(d.name.as_str()) {
                return Err(Error::Config(format!("dataset `{}` declared twice", d.name)));
            }
            if !(d.weight > 0.0 && d.weight.is_finite()) {
                return Err(Error::Config(format!("dataset `{}`: weight must be positive", d.name)));
            }
            must_exist(&d.manifest, &format!("manifest of `{}`", d.name))?;
        }
        if let Some(p) = &self.exclusion {
            must_exist(p, "exclusion list")?;
        }
        if let Some(p) = &self.validation {
            must_exist(p, "validation manifest")?;
        }
        if self.stages.is_empty() {
            return Err(Error::Config("no stages configured".into()));
        }
        let stages = self.stage_configs()?;
        for s in &stages {
            s.validate()?;
            if let Some(n) = s.mix.iter().find(|n| !names.contains(n.as_str())) {
                return Err(Error::Config(format!("stage {} mixes unknown dataset `{n}`", s.id)));
            }
        }
        validate_stage_order(&stages)
    }

    /// The config after defaulting, with stage presets expanded.
    pub fn effective(&self) -> Result<Self> {
        let mut e = self.clone();
        e.stages = self.stage_configs()?.iter().map(StageEntry::from_resolved).collect();
        e.model.ff_width = Some(self.model_config().aggregator.ff_width);
        e.model.text_dim = Some(self.model_config().text_dim);
        Ok(e)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// FNV-1a hash of the effective config, recorded in galleries.
    pub fn hash(&self) -> Result<u64> {
        Ok(crate::rng::fnv1a64(self.effective()?.to_toml()?.as_bytes()))
    }

    /// Loads every manifest into a registry, applying the exclusion list.
    /// Returns the registry and the number of excluded records.
    pub fn load_registry(&self) -> Result<(Registry, usize)> {
        let exclusion = match &self.exclusion {
            Some(p) => read_exclusion_list(p)?,
            None => HashSet::new(),
        };
        let mut reg = Registry::new();
        let mut removed = 0;
        for d in &self.datasets {
            let rows = read_manifest(&d.manifest)?;
            let kind = rows.first().map_or(MediaKind::Video, |r| r.0);
            let records: Vec<PairRecord> = rows.into_iter().map(|r| r.1).collect();
            let (records, n) = apply_exclusion(records, &exclusion);
            removed += n;
            reg.add(DatasetSpec {
                name: d.name.clone(),
                weight: d.weight,
                kind,
                records,
                noisy: d.noisy,
            })?;
        }
        Ok((reg, removed))
    }
}

fn must_exist(p: &Path, what: &str) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", p.display())))
    }
}
