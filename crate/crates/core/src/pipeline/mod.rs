//! File-mediated pipeline: every stage reads the previous stage's artifacts
//! from the output directory and writes its own, recording them in
//! `manifest.json`.

pub mod config;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, load_checkpoint, presets, ModelGraph};
use crate::partition::{fisher_segment_with, BlockPartition};
use crate::rebuild::{self, make_report, PruneReport, PrunedModelSpec, ReportInput, TrainOutcome};
use crate::selection::{self, plan_max_score, plan_with_budget, plan_with_count, retained_budget, BlockSearch, SelectionPlan};
use crate::signal::{self, SignalDataset, Split, Subset};
use crate::similarity::{self, Metric, SimilarityProfile};
use crate::{nn::train, rng};

pub use config::{PipelineConfig, SelectMode};
use config::stream;

pub const MANIFEST: &str = "manifest.json";
pub const LOCK: &str = ".lock";

pub mod artifact {
    pub const DATASET: &str = "dataset.amrd";
    pub const DATASET_SUMMARY: &str = "dataset_summary.json";
    pub const MODEL: &str = "model.lpck";
    pub const TRAIN: &str = "train.json";
    pub const SIMILARITY_CSV: &str = "similarity.csv";
    pub const SIMILARITY_JSON: &str = "similarity.json";
    pub const PARTITION: &str = "partition.json";
    pub const SELECTION: &str = "selection.json";
    pub const CANDIDATES: &str = "candidates.csv";
    pub const PRUNED_MODEL: &str = "pruned.lpck";
    pub const PRUNED_SPEC: &str = "pruned_spec.json";
    pub const FINETUNE: &str = "finetune.json";
    pub const REPORT_CSV: &str = "report.csv";
    pub const REPORT_JSON: &str = "report.json";
    pub const ABLATION: &str = "ablation.csv";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    Train,
    Similarity,
    Partition,
    Select,
    Finetune,
    Report,
    Prune,
    Ablation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Similarity => "similarity",
            Stage::Partition => "partition",
            Stage::Select => "select",
            Stage::Finetune => "finetune",
            Stage::Report => "report",
            Stage::Prune => "prune",
            Stage::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    pub seed: u64,
    /// File name to SHA-256 of its contents.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Holds the output directory exclusively until dropped.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Precondition(format!(
                    "{} is locked by another run (remove {} if that run is gone)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "pid={}", std::process::id());
        Ok(DirLock { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory of one run: locked, with the manifest kept in sync.
pub struct Workspace {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    config_hash: String,
    manifest: Manifest,
    _lock: DirLock,
}

impl Workspace {
    pub fn open(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.out_dir.clone();
        let lock = DirLock::acquire(&dir)?;
        let manifest_path = dir.join(MANIFEST);
        let mut manifest: Manifest = if manifest_path.exists() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            serde_json::from_str(&text)?
        } else {
            Manifest::default()
        };
        let config_hash = config.hash();
        manifest.config_hash = config_hash.clone();
        manifest.seed = config.seed;
        Ok(Workspace {
            config,
            dir,
            config_hash,
            manifest,
            _lock: lock,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn write(&mut self, stage: Stage, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        let record = self.manifest.stages.entry(stage.name().to_string()).or_default();
        record.config_hash = self.config_hash.clone();
        record.seed = self.config.seed;
        record.artifacts.insert(name.to_string(), sha256_hex(bytes));
        log::info!("event=artifact stage={} file={} bytes={}", stage.name(), path.display(), bytes.len());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, stage: Stage, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(stage, name, text.as_bytes())
    }

    fn save_manifest(&self) -> Result<()> {
        let path = self.path(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Reads an artifact, warning when it no longer matches the manifest or
    /// was produced under a different configuration.
    fn read(&self, name: &str, producer: Stage) -> Result<Vec<u8>> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                producer: producer.name(),
            });
        }
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let record = self
            .manifest
            .stages
            .get(producer.name())
            .or_else(|| self.manifest.stages.get(Stage::Prune.name()).filter(|r| r.artifacts.contains_key(name)));
        match record {
            Some(r) => {
                if r.artifacts.get(name).is_some_and(|h| *h != sha256_hex(&bytes)) {
                    log::warn!("event=stale_artifact file={name} reason=modified_after_write");
                }
                if r.config_hash != self.config_hash {
                    log::warn!("event=stale_artifact file={name} reason=config_changed producer={}", producer.name());
                }
            }
            None => log::warn!("event=unrecorded_artifact file={name}"),
        }
        Ok(bytes)
    }

    pub fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: Stage) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(name, producer)?)?)
    }

    pub fn read_model(&self, name: &str, producer: Stage) -> Result<ModelGraph> {
        nn::checkpoint::from_bytes(&self.read(name, producer)?)
    }

    pub fn load_dataset(&self) -> Result<SignalDataset> {
        let path = self.config.dataset_path();
        if !path.exists() {
            let hint = if self.config.data.path.is_some() {
                "file does not exist".to_string()
            } else {
                format!("not set and {} does not exist (run gen-data first)", path.display())
            };
            return Err(Error::InvalidConfig {
                key: "data.path".into(),
                message: format!("{}: {hint}", path.display()),
            });
        }
        SignalDataset::read(&path)
    }

    fn dataset_name(&self) -> String {
        if self.config.data.path.is_none() {
            return "synthetic".into();
        }
        self.config
            .dataset_path()
            .file_stem()
            .map_or("dataset".into(), |s| s.to_string_lossy().into_owned())
    }

    /// Train/val/test indices used by every stage.
    pub fn split(&self, data: &SignalDataset) -> Result<Split> {
        signal::split(data, self.config.data.split, self.config.stream_seed(stream::SPLIT, 0))
    }

    /// Runs one subcommand inside a pool of `jobs` threads.
    pub fn run(&mut self, stage: Stage) -> Result<()> {
        log::info!(
            "event=stage_start stage={} seed={} config_hash={} jobs={}",
            stage.name(),
            self.config.seed,
            &self.config_hash[..12],
            self.config.jobs
        );
        let jobs = self.config.jobs;
        let result = selection::with_jobs(jobs, || self.dispatch(stage))?;
        self.save_manifest()?;
        result?;
        log::info!("event=stage_done stage={}", stage.name());
        Ok(())
    }

    fn dispatch(&mut self, stage: Stage) -> Result<()> {
        match stage {
            Stage::GenData => self.gen_data().map(drop),
            Stage::Train => self.train().map(drop),
            Stage::Similarity => self.similarity().map(drop),
            Stage::Partition => self.partition().map(drop),
            Stage::Select => self.select().map(drop),
            Stage::Finetune => self.finetune().map(drop),
            Stage::Report => self.report().map(drop),
            Stage::Prune => self.prune().map(drop),
            Stage::Ablation => self.ablation().map(drop),
        }
    }

    pub fn gen_data(&mut self) -> Result<signal::DatasetSummary> {
        let spec = self.config.dataset_spec();
        let data = signal::synthesize_dataset(&spec)?;
        let summary = data.summary();
        let path = self.config.dataset_path();
        if path.parent() == Some(self.dir.as_path()) || self.config.data.path.is_none() {
            let name = path.file_name().expect("dataset file name").to_string_lossy().into_owned();
            self.write(Stage::GenData, &name, &data.to_bytes())?;
        } else {
            data.write(&path)?;
        }
        self.write_json(Stage::GenData, artifact::DATASET_SUMMARY, &summary)?;
        log::info!(
            "event=dataset records={} classes={} length={}",
            summary.records,
            summary.num_classes,
            summary.signal_length
        );
        Ok(summary)
    }

    pub fn train(&mut self) -> Result<TrainRecord> {
        let data = self.load_dataset()?;
        let split = self.split(&data)?;
        let preset = self.config.preset()?;
        let mut model = presets::build(preset, data.num_classes(), &mut rng::rng(self.config.stream_seed(stream::INIT, 0)));
        model.validate(data.signal_length())?;
        let (train, val, test) = subsets(&data, &split);
        let cfg = self.config.train_config();
        cfg.validate()?;
        let fit = train::fit(&mut model, &train, &val, None, &cfg)?;
        let test_acc = train::accuracy(&model, &test)?;
        log::info!("event=trained arch={} test_acc={test_acc:.3} best_epoch={}", preset, fit.best_epoch);
        let record = TrainRecord {
            arch: preset.name().to_string(),
            signal_length: data.signal_length(),
            split_sizes: [split.train.len(), split.val.len(), split.test.len()],
            outcome: TrainOutcome { fit, test_acc },
        };
        self.write(Stage::Train, artifact::MODEL, &nn::checkpoint::to_bytes(&model))?;
        self.write_json(Stage::Train, artifact::TRAIN, &record)?;
        Ok(record)
    }

    pub fn similarity(&mut self) -> Result<SimilarityProfile> {
        let profile = self.compute_similarity(self.config.similarity.metric)?;
        self.write(Stage::Similarity, artifact::SIMILARITY_CSV, profile.to_csv().as_bytes())?;
        self.write_json(
            Stage::Similarity,
            artifact::SIMILARITY_JSON,
            &SimilarityMeta {
                metric: profile.metric,
                batches: profile.batches_averaged,
                samples_per_batch: self.config.similarity.samples_per_batch,
                seed: profile.seed,
            },
        )?;
        Ok(profile)
    }

    fn compute_similarity(&self, metric: Metric) -> Result<SimilarityProfile> {
        let model = self.read_model(artifact::MODEL, Stage::Train)?;
        let data = self.load_dataset()?;
        let split = self.split(&data)?;
        let pool = Subset {
            data: &data,
            indices: &split.train,
        };
        let seed = self.config.stream_seed(stream::SIMILARITY, 0);
        let profile = similarity::similarity_matrix(&model, &pool, &self.config.similarity.sampling(), metric, seed)?;
        log::info!(
            "event=similarity metric={metric} units={} z={:?}",
            profile.num_units(),
            profile.row_sums
        );
        Ok(profile)
    }

    pub fn partition(&mut self) -> Result<BlockPartition> {
        let csv = String::from_utf8(self.read(artifact::SIMILARITY_CSV, Stage::Similarity)?).map_err(|e| Error::Format {
            file: "similarity csv",
            message: e.to_string(),
        })?;
        let z = similarity::row_sums_from_csv(&csv)?;
        let p = self.segment(&z, self.config.prune.k)?;
        self.write_json(Stage::Partition, artifact::PARTITION, &p)?;
        Ok(p)
    }

    fn segment(&self, z: &[f64], k: usize) -> Result<BlockPartition> {
        if k > z.len() {
            return Err(Error::InvalidConfig {
                key: "prune.k".into(),
                message: format!("{k} blocks requested for {} units", z.len()),
            });
        }
        let p = fisher_segment_with(z, k, self.config.prune.criterion)?;
        log::info!("event=partition k={k} blocks={:?} cost={}", p.blocks, p.cost);
        Ok(p)
    }

    pub fn select(&mut self) -> Result<SelectionPlan> {
        let model = self.read_model(artifact::MODEL, Stage::Train)?;
        let partition: BlockPartition = self.read_json(artifact::PARTITION, Stage::Partition)?;
        let length = self.signal_length()?;
        let (plan, searches) = self.plan(&model, &partition, length)?;
        self.write(Stage::Select, artifact::CANDIDATES, candidates_csv(&searches).as_bytes())?;
        self.write_json(Stage::Select, artifact::SELECTION, &plan)?;
        Ok(plan)
    }

    fn signal_length(&self) -> Result<usize> {
        let record: TrainRecord = self.read_json(artifact::TRAIN, Stage::Train)?;
        Ok(record.signal_length)
    }

    fn plan(&self, model: &ModelGraph, partition: &BlockPartition, length: usize) -> Result<(SelectionPlan, Vec<BlockSearch>)> {
        let seed = self.config.stream_seed(stream::SELECT, 0);
        let searches = selection::score_partition(model, partition, seed, length)?;
        let plan = match self.config.prune.mode {
            SelectMode::Budget => plan_with_budget(&searches, model.num_units(), self.config.prune.pruning_rate)?,
            SelectMode::MaxScore => plan_max_score(&searches, model.num_units()),
        };
        for b in &plan.blocks {
            log::info!("event=selected block={} retained={:?} score={}", b.id, b.retained_unit_ids, b.score);
        }
        log::info!("event=plan retained={} achieved_pr={:.4}", plan.total_retained, plan.achieved_pr);
        Ok((plan, searches))
    }

    pub fn finetune(&mut self) -> Result<FinetuneRecord> {
        let model = self.read_model(artifact::MODEL, Stage::Train)?;
        let plan: SelectionPlan = self.read_json(artifact::SELECTION, Stage::Select)?;
        let data = self.load_dataset()?;
        let split = self.split(&data)?;
        let (pruned, spec, outcome) = self.rebuild_and_tune(&model, &plan, &data, &split, &self.config.finetune_config())?;
        let record = FinetuneRecord { spec, outcome };
        self.write(Stage::Finetune, artifact::PRUNED_MODEL, &nn::checkpoint::to_bytes(&pruned))?;
        self.write_json(Stage::Finetune, artifact::PRUNED_SPEC, &record.spec)?;
        self.write_json(Stage::Finetune, artifact::FINETUNE, &record.outcome)?;
        Ok(record)
    }

    fn rebuild_and_tune(
        &self,
        model: &ModelGraph,
        plan: &SelectionPlan,
        data: &SignalDataset,
        split: &Split,
        cfg: &nn::TrainConfig,
    ) -> Result<(ModelGraph, PrunedModelSpec, TrainOutcome)> {
        let (mut pruned, spec) = rebuild::reassemble(model, plan, data.signal_length(), self.config.stream_seed(stream::ADAPTER, 0))?;
        let (train, val, test) = subsets(data, split);
        let outcome = rebuild::finetune(&mut pruned, &train, &val, &test, cfg)?;
        log::info!(
            "event=finetuned units={} adapters={} test_acc={:.3} best_epoch={}",
            pruned.num_units(),
            spec.adapter_log.len(),
            outcome.test_acc,
            outcome.fit.best_epoch
        );
        Ok((pruned, spec, outcome))
    }

    pub fn report(&mut self) -> Result<PruneReport> {
        let original = self.read_model(artifact::MODEL, Stage::Train)?;
        let pruned = self.read_model(artifact::PRUNED_MODEL, Stage::Finetune)?;
        let trained: TrainRecord = self.read_json(artifact::TRAIN, Stage::Train)?;
        let tuned: TrainOutcome = self.read_json(artifact::FINETUNE, Stage::Finetune)?;
        let report = make_report(
            &original,
            &pruned,
            &ReportInput {
                model_name: &trained.arch,
                dataset_name: &self.dataset_name(),
                target_pr: self.config.prune.pruning_rate,
                original_acc: trained.outcome.test_acc,
                pruned_acc: tuned.test_acc,
                seed: self.config.seed,
            },
            trained.signal_length,
        )?;
        log::info!(
            "event=report original_acc={:.3} acc={:.3} delta_acc={:.3} flops_pr={:.3} params_pr={:.3} layer_pr={:.3}",
            report.original_acc,
            report.acc,
            report.delta_acc,
            report.flops_pr,
            report.params_pr,
            report.layer_pr
        );
        self.write(Stage::Report, artifact::REPORT_CSV, report.to_csv().as_bytes())?;
        self.write_json(Stage::Report, artifact::REPORT_JSON, &report)?;
        Ok(report)
    }

    /// similarity → partition → select → finetune → report.
    pub fn prune(&mut self) -> Result<PruneReport> {
        self.similarity()?;
        self.partition()?;
        self.select()?;
        self.finetune()?;
        self.report()
    }

    /// Sweeps metric × k at the configured pruning rate.
    pub fn ablation(&mut self) -> Result<Vec<AblationRow>> {
        let model = self.read_model(artifact::MODEL, Stage::Train)?;
        let length = self.signal_length()?;
        let tune = self.config.ablation.finetune_epochs > 0;
        let data = if tune { Some(self.load_dataset()?) } else { None };
        let split = data.as_ref().map(|d| self.split(d)).transpose()?;
        let mut rows = Vec::new();
        for &metric in &self.config.ablation.metrics {
            let profile = self.compute_similarity(metric)?;
            for &k in &self.config.ablation.ks {
                let partition = self.segment(&profile.row_sums, k)?;
                // at least one unit per block, even when the target leaves fewer
                let budget = retained_budget(model.num_units(), self.config.prune.pruning_rate).max(k);
                let searches = selection::score_partition(&model, &partition, self.config.stream_seed(stream::SELECT, 0), length)?;
                let plan = plan_with_count(&searches, model.num_units(), budget)?;
                let (acc, pruned) = match (&data, &split) {
                    (Some(d), Some(s)) => {
                        let cfg = nn::TrainConfig {
                            epochs: self.config.ablation.finetune_epochs,
                            ..self.config.finetune_config()
                        };
                        let (p, _, out) = self.rebuild_and_tune(&model, &plan, d, s, &cfg)?;
                        (Some(out.test_acc), p)
                    }
                    _ => (None, rebuild::reassemble(&model, &plan, length, self.config.stream_seed(stream::ADAPTER, 0))?.0),
                };
                let input = ReportInput {
                    model_name: "",
                    dataset_name: "",
                    target_pr: self.config.prune.pruning_rate,
                    original_acc: 0.0,
                    pruned_acc: 0.0,
                    seed: self.config.seed,
                };
                let r = make_report(&model, &pruned, &input, length)?;
                let row = AblationRow {
                    metric,
                    k,
                    budget,
                    blocks: partition.blocks.clone(),
                    retained: plan.retained(),
                    achieved_pr: plan.achieved_pr,
                    flops_pr: r.flops_pr,
                    params_pr: r.params_pr,
                    acc,
                };
                log::info!("event=ablation metric={metric} k={k} retained={:?} flops_pr={:.3}", row.retained, row.flops_pr);
                rows.push(row);
            }
        }
        self.write(Stage::Ablation, artifact::ABLATION, ablation_csv(&rows).as_bytes())?;
        Ok(rows)
    }
}

fn subsets<'a>(data: &'a SignalDataset, split: &'a Split) -> (Subset<'a>, Subset<'a>, Subset<'a>) {
    let s = |indices: &'a [usize]| Subset { data, indices };
    (s(&split.train), s(&split.val), s(&split.test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub arch: String,
    pub signal_length: usize,
    pub split_sizes: [usize; 3],
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMeta {
    pub metric: Metric,
    pub batches: usize,
    pub samples_per_batch: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRecord {
    pub spec: PrunedModelSpec,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub metric: Metric,
    pub k: usize,
    /// Units retained.
    pub budget: usize,
    pub blocks: Vec<(usize, usize)>,
    pub retained: Vec<usize>,
    pub achieved_pr: f64,
    pub flops_pr: f64,
    pub params_pr: f64,
    pub acc: Option<f64>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>, sep: &str) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("metric,k,budget,blocks,retained_units,achieved_pr,flops_pr,params_pr,acc\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{:.4},{:.4},{:.4},{}\n",
            r.metric,
            r.k,
            r.budget,
            join(r.blocks.iter().map(|(lo, hi)| format!("{lo}-{hi}")), " "),
            join(&r.retained, " "),
            r.achieved_pr,
            r.flops_pr,
            r.params_pr,
            r.acc.map(|a| format!("{a:.4}")).unwrap_or_default()
        ));
    }
    out
}

/// Every scored candidate: block, rank, mask, retained units, score.
pub fn candidates_csv(searches: &[BlockSearch]) -> String {
    let mut out = String::from("block,rank,mask,units,score\n");
    for s in searches {
        for c in &s.candidates {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.block_id,
                c.rank_index,
                c.combination.mask,
                join(c.combination.units(), " "),
                c.synflow
            ));
        }
    }
    out
}

/// Loads a checkpoint from an explicit path (used by tools outside a workspace).
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    load_checkpoint(path)
}

/// Writes `text` to a file, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(DirLock::acquire(dir.path()).is_err());
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn missing_dataset_names_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig {
            out_dir: dir.path().to_path_buf(),
            ..Default::default()
        };
        let mut ws = Workspace::open(config).unwrap();
        match ws.run(Stage::Train).unwrap_err() {
            Error::InvalidConfig { key, .. } => assert_eq!(key, "data.path"),
            other => panic!("{other}"),
        }
        assert!(matches!(ws.run(Stage::Partition).unwrap_err(), Error::MissingArtifact { .. }));
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![AblationRow {
            metric: Metric::Cosine,
            k: 3,
            budget: 4,
            blocks: vec![(0, 1), (2, 4), (5, 7)],
            retained: vec![0, 3, 6, 7],
            achieved_pr: 0.5,
            flops_pr: 48.0,
            params_pr: 47.5,
            acc: None,
        }];
        assert_eq!(
            ablation_csv(&rows).lines().nth(1).unwrap(),
            "cosine,3,4,0-1 2-4 5-7,0 3 6 7,0.5000,48.0000,47.5000,"
        );
    }
}
