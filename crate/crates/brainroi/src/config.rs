use std::path::{Path, PathBuf};

use brainroi_core::decoding::{DecodeConfig, ToyLmConfig, Vocab};
use brainroi_core::encoder::EncoderConfig;
use brainroi_core::ipo::{validate_prompt, GeneratorConfig, DEFAULT_INSTRUCTION, DEFAULT_SEED_PROMPTS};
use brainroi_core::training::{Preset, SyntheticDatasetSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::formats::{read_file, sha256_hex, RunStamp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Synthetic volumes, voxel indices and membership matrices.
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub traces: PathBuf,
    pub reports: PathBuf,
}

impl Paths {
    pub fn under(root: &Path) -> Self {
        Paths {
            dataset: root.join("dataset"),
            checkpoints: root.join("checkpoints"),
            traces: root.join("traces"),
            reports: root.join("reports"),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Paths::under(Path::new("run"))
    }
}

/// Optional per-stage overrides applied on top of the preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverride {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub max_lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub warmup_dropout_epochs: Option<usize>,
}

impl StageOverride {
    fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.max_lr = self.max_lr.unwrap_or(cfg.max_lr);
        cfg.weight_decay = self.weight_decay.unwrap_or(cfg.weight_decay);
        cfg.warmup_dropout_epochs = self.warmup_dropout_epochs.unwrap_or(cfg.warmup_dropout_epochs);
        cfg
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub stage1: StageOverride,
    pub stage2: StageOverride,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpoSection {
    pub generator: GeneratorConfig,
    pub pool_capacity: usize,
    pub seeds: Vec<String>,
    /// Meta-prompt forwarded to external generators.
    pub instruction: String,
    pub backend: Backend,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for IpoSection {
    fn default() -> Self {
        IpoSection {
            generator: GeneratorConfig::default(),
            pool_capacity: 5,
            seeds: DEFAULT_SEED_PROMPTS.iter().map(|s| s.to_string()).collect(),
            instruction: DEFAULT_INSTRUCTION.into(),
            backend: Backend::Mock,
            endpoint: None,
            timeout_ms: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives initialization, shuffling, dropout and the mock generator.
    pub seed: u64,
    pub preset: Preset,
    pub paths: Paths,
    pub data: SyntheticDatasetSpec,
    pub encoder: EncoderConfig,
    pub train: TrainSection,
    pub lm: ToyLmConfig,
    pub projector_seed: u64,
    pub decode: DecodeConfig,
    pub ipo: IpoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            preset: Preset::Desk,
            paths: Paths::default(),
            data: SyntheticDatasetSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainSection::default(),
            lm: ToyLmConfig::default(),
            projector_seed: 5,
            decode: DecodeConfig::default(),
            ipo: IpoSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        self.encoder.validate()?;
        if (self.encoder.n_tokens, self.encoder.d_out) != (self.data.n_tokens, self.data.d_out) {
            return Err(CliError::Config(format!(
                "encoder emits {}x{} tokens but the dataset targets are {}x{}",
                self.encoder.n_tokens, self.encoder.d_out, self.data.n_tokens, self.data.d_out
            )));
        }
        let (s1, s2) = self.stages();
        s1.validate()?;
        s2.validate()?;
        self.decode.validate(&Vocab::default_captions())?;
        self.ipo.generator.validate()?;
        if self.ipo.pool_capacity == 0 {
            return Err(CliError::Config("ipo.pool_capacity must be >= 1".into()));
        }
        if self.ipo.seeds.is_empty() {
            return Err(CliError::Config("ipo.seeds must hold at least one prompt".into()));
        }
        for s in &self.ipo.seeds {
            validate_prompt(s)?;
        }
        if self.ipo.backend == Backend::Http && self.ipo.endpoint.is_none() {
            return Err(CliError::Config("ipo.backend `http` needs ipo.endpoint".into()));
        }
        Ok(())
    }

    /// Stage 1 and stage 2 training settings after overrides.
    pub fn stages(&self) -> (TrainConfig, TrainConfig) {
        let (s1, s2) = self.preset.stages(self.seed);
        (self.train.stage1.apply(s1), self.train.stage2.apply(s2))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form. Output locations are not hashed.
    pub fn hash(&self) -> String {
        let canonical = RunConfig {
            paths: Paths::default(),
            ..self.clone()
        };
        sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
    }

    pub fn stamp(&self) -> RunStamp {
        RunStamp {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }
}
