//! Pipeline configuration file.
//!
//! TOML with these sections; every key is optional and unknown keys are
//! rejected with their line number.
//!
//! ```toml
//! seed = 7            # master seed, mixed into every section seed
//! out_dir = "out"
//! jobs = 0            # scoring threads; 0 = all cores
//!
//! [data]
//! path = "out/dataset.amrd"   # default: <out_dir>/dataset.amrd
//! split = [0.6, 0.2, 0.2]     # train / val / test, stratified per cell
//!
//! [data.synth]                 # used by gen-data
//! schemes = ["BPSK", "QPSK", "8PSK", "PAM4", "16QAM", "CPFSK"]
//! snr_grid = [10, 12, 14, 16, 18]
//! examples_per_class_per_snr = 400
//! signal_length = 128
//! samples_per_symbol = 8
//! seed = 0
//!
//! [model]
//! arch = "vgg1d-8"            # vgg1d-4 | vgg1d-8 | resnet1d-6
//!
//! [train]                      # also [finetune]
//! epochs = 50
//! learning_rate = 0.001
//! batch_size = 128
//! lr_decay_factor = 0.8
//! lr_decay_every = 10
//! optimizer = "adam"          # adam | sgd
//! seed = 0
//!
//! [similarity]
//! metric = "cka"              # cka | cosine
//! samples_per_batch = 500
//! num_batches = 5
//! stratified = false
//! tilde = "zero-diagonal"     # zero-diagonal | matrix-product
//!
//! [prune]
//! k = 3
//! pruning_rate = 0.5
//! mode = "budget"             # budget | max-score
//! criterion = "sum-squares"   # sum-squares | absolute-deviation
//!
//! [ablation]
//! metrics = ["cka", "cosine"]
//! ks = [3, 4, 5, 6, 7]
//! finetune_epochs = 0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Preset, TrainConfig};
use crate::partition::SegmentCriterion;
use crate::rng;
use crate::signal::DatasetSpec;
use crate::similarity::{Metric, SamplingConfig, TildeReading};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub similarity: SimilarityConfig,
    pub prune: PruneConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            finetune: TrainConfig::default(),
            similarity: SimilarityConfig::default(),
            prune: PruneConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub split: [f64; 3],
    pub synth: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            split: [0.6, 0.2, 0.2],
            synth: DatasetSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Preset::Vgg8.name().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityConfig {
    pub metric: Metric,
    pub samples_per_batch: usize,
    pub num_batches: usize,
    pub stratified: bool,
    pub tilde: TildeReading,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        let s = SamplingConfig::default();
        SimilarityConfig {
            metric: Metric::Cka,
            samples_per_batch: s.samples_per_batch,
            num_batches: s.num_batches,
            stratified: s.stratified,
            tilde: s.tilde,
        }
    }
}

impl SimilarityConfig {
    pub fn sampling(&self) -> SamplingConfig {
        SamplingConfig {
            samples_per_batch: self.samples_per_batch,
            num_batches: self.num_batches,
            stratified: self.stratified,
            tilde: self.tilde,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectMode {
    /// Per-block counts chosen to meet the pruning-rate target.
    #[default]
    Budget,
    /// Best combination of every block, ignoring the target.
    MaxScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub k: usize,
    pub pruning_rate: f64,
    pub mode: SelectMode,
    pub criterion: SegmentCriterion,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            k: 3,
            pruning_rate: 0.5,
            mode: SelectMode::Budget,
            criterion: SegmentCriterion::SumSquares,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub metrics: Vec<Metric>,
    pub ks: Vec<usize>,
    /// Fine-tune each pruned variant for this many epochs (0 skips accuracy).
    pub finetune_epochs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            metrics: vec![Metric::Cka, Metric::Cosine],
            ks: (3..=7).collect(),
            finetune_epochs: 0,
        }
    }
}

/// Stream tags mixed with the master seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const INIT: u64 = 3;
    pub const TRAIN: u64 = 4;
    pub const SIMILARITY: u64 = 5;
    pub const SELECT: u64 = 6;
    pub const ADAPTER: u64 = 7;
    pub const FINETUNE: u64 = 8;
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        message: message.into(),
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, col)
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: PipelineConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            let key = msg
                .strip_prefix("unknown field `")
                .and_then(|rest| rest.split('`').next())
                .unwrap_or("config")
                .to_string();
            let location = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!("line {l}, column {c}: ")
                })
                .unwrap_or_default();
            Error::InvalidConfig {
                key,
                message: format!("{location}{msg}"),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the effective configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn preset(&self) -> Result<Preset> {
        self.model
            .arch
            .parse()
            .map_err(|_| invalid("model.arch", format!("unknown architecture {:?} (expected one of vgg1d-4, vgg1d-8, resnet1d-6)", self.model.arch)))
    }

    pub fn validate(&self) -> Result<()> {
        self.preset()?;
        self.data
            .synth
            .validate()
            .map_err(|e| invalid("data.synth", e.to_string()))?;
        let [a, b, c] = self.data.split;
        if self.data.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || ((a + b + c) - 1.0).abs() > 1e-9 || a == 0.0 {
            return Err(invalid("data.split", format!("need three fractions summing to 1 with a non-empty train share, got {:?}", self.data.split)));
        }
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.finetune.validate().map_err(|e| invalid("finetune", e.to_string()))?;
        if self.similarity.samples_per_batch < 4 {
            return Err(invalid("similarity.samples_per_batch", "must be at least 4"));
        }
        if self.similarity.num_batches == 0 {
            return Err(invalid("similarity.num_batches", "must be at least 1"));
        }
        if self.prune.k == 0 {
            return Err(invalid("prune.k", "must be at least 1"));
        }
        if !(self.prune.pruning_rate > 0.0 && self.prune.pruning_rate < 1.0) {
            return Err(invalid("prune.pruning_rate", format!("must lie in (0, 1), got {}", self.prune.pruning_rate)));
        }
        if self.ablation.metrics.is_empty() || self.ablation.ks.is_empty() || self.ablation.ks.contains(&0) {
            return Err(invalid("ablation", "needs at least one metric and positive k values"));
        }
        Ok(())
    }

    /// Seed for one pipeline stream, combining the master seed with the
    /// section's own seed.
    pub fn stream_seed(&self, stream: u64, section_seed: u64) -> u64 {
        rng::mix(self.seed, &[stream, section_seed])
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.data.path.clone().unwrap_or_else(|| self.out_dir.join("dataset.amrd"))
    }

    /// Training schedule with its effective seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stream_seed(stream::TRAIN, self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stream_seed(stream::FINETUNE, self.finetune.seed),
            ..self.finetune.clone()
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.stream_seed(stream::DATA, self.data.synth.seed),
            ..self.data.synth.clone()
        }
    }
}
