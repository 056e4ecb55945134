//! Run configuration: one TOML document, overridable key by key.
//!
//! Values resolve as flag > file > default. Overrides use dotted keys such as
//! `injection.dur_cross=0.3`; the right-hand side is parsed as a TOML value
//! and falls back to a bare string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::control::InjectionConfig;
use crate::diffusion::{make_schedule, BetaKind, NoiseSchedule};
use crate::edit::BlendMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{NtiConfig, ParamFilter, TrainConfig};

/// Relative output directories are placed under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "VIDEDIT_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Edit,
    Reconstruct,
    BaselineGenerate,
    BaselineSdedit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Pretrained image-model weights.
    pub weights: PathBuf,
    /// Tuned video-model weights; reused when the file exists, written after
    /// tuning otherwise.
    pub tuned: Option<PathBuf>,
    /// Source video: a `make-data` directory, a PNG directory with a
    /// manifest, or a video archive. A synthetic scene drawn from `seed` is
    /// used when absent.
    pub video: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            weights: PathBuf::from("weights/image_model.safetensors"),
            tuned: None,
            video: None,
            output: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prompts {
    /// Empty means the caption stored with the source video.
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub kind: BetaKind,
    pub sampler_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            kind: BetaKind::ScaledLinear,
            sampler_steps: 50,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.kind, self.sampler_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub caption_dropout: f64,
    pub model: ModelConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        let t = TrainConfig::pretrain_default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch: t.batch,
            corpus_size: 4000,
            corpus_seed: 1,
            caption_dropout: 0.1,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        let t = TrainConfig::finetune_default();
        Self {
            steps: t.steps,
            learning_rate: t.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtiSection {
    pub inner_iters: usize,
    pub learning_rate: f64,
}

impl Default for NtiSection {
    fn default() -> Self {
        let n = NtiConfig::default();
        Self {
            inner_iters: n.inner_iters,
            learning_rate: n.learning_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdeditConfig {
    /// Sampler steps of noise added to the source, counted from the clean end.
    pub start_step: usize,
}

impl Default for SdeditConfig {
    fn default() -> Self {
        Self { start_step: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub guidance: f64,
    pub blend: BlendMode,
    pub paths: Paths,
    pub prompts: Prompts,
    pub schedule: ScheduleConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub nti: NtiSection,
    pub injection: InjectionConfig,
    pub sdedit: SdeditConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Edit,
            seed: 0,
            guidance: 7.5,
            blend: BlendMode::Temporal,
            paths: Paths::default(),
            prompts: Prompts::default(),
            schedule: ScheduleConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            nti: NtiSection::default(),
            injection: InjectionConfig::default(),
            sdedit: SdeditConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
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

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` descends into a non-table value")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` descends into a non-table value")))?;
    table.insert(parts[parts.len() - 1].to_owned(), value);
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (`key=value` pairs).
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let doc: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(doc));
        }
        for (key, raw) in overrides {
            set_dotted(&mut value, key, parse_value(raw))?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.injection.validate()?;
        self.pretrain.model.validate()?;
        self.pretrain_config().validate()?;
        self.finetune_config().validate()?;
        if !(self.guidance.is_finite() && self.guidance >= 0.0) {
            return Err(Error::Config(format!("guidance {} must be finite and non-negative", self.guidance)));
        }
        if !(self.nti.learning_rate > 0.0 && self.nti.learning_rate.is_finite()) {
            return Err(Error::Config("nti.learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain.caption_dropout) {
            return Err(Error::Config("pretrain.caption_dropout must lie in [0, 1]".into()));
        }
        if self.sdedit.start_step > self.schedule.sampler_steps {
            return Err(Error::Config(format!(
                "sdedit.start_step {} exceeds {} sampler steps",
                self.sdedit.start_step, self.schedule.sampler_steps
            )));
        }
        Ok(())
    }

    /// The target prompt, which the editing and baseline modes require.
    pub fn target_prompt(&self) -> Result<&str> {
        let t = self.prompts.target.trim();
        if t.is_empty() {
            return Err(Error::Config(format!("mode {:?} needs prompts.target", self.mode)));
        }
        Ok(t)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Short digest of the resolved configuration, recorded in reports.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_string(self)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    /// `paths.output`, placed under `$VIDEDIT_OUTPUT_ROOT` when relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.paths.output.is_relative() => PathBuf::from(root).join(&self.paths.output),
            _ => self.paths.output.clone(),
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.pretrain.steps,
            learning_rate: self.pretrain.learning_rate,
            batch: self.pretrain.batch,
            seed: self.seed,
            trainable: ParamFilter::All,
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.finetune.steps,
            learning_rate: self.finetune.learning_rate,
            batch: 1,
            seed: self.seed,
            trainable: ParamFilter::Attention,
        }
    }

    pub fn nti_config(&self) -> NtiConfig {
        NtiConfig {
            inner_iters: self.nti.inner_iters,
            learning_rate: self.nti.learning_rate,
            guidance: self.guidance,
        }
    }
}
