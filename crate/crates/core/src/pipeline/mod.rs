//! End-to-end experiment orchestration.
//!
//! A run prepares the data, pretrains (or reloads) the frozen base, trains
//! the target adapter and one hybrid adapter per source, merges them and
//! evaluates the result on the target test split. Every trained artifact is
//! stored under a key derived from its inputs, so a rerun with an extra
//! source domain reloads the existing checkpoints and trains only the new
//! hybrid branch.
//!
//! Output layout:
//!
//! ```text
//! <output_dir>/
//!   manifest.json              WeaveRec run
//!   baselines-manifest.json    baseline run
//!   checkpoints/*.wvrc
//!   reports/<method>.json      evaluation reports
//!   reports/train/*.json       training reports
//!   tables/*.csv
//!   data/instructions/*.jsonl
//! ```

mod config;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{
    BaseCorpus, BaselineParams, DataSource, DomainFiles, ExperimentConfig, InstructionScope, ModelConfig,
};

use crate::checkpoint::{self, write_atomic, Checkpointable};
use crate::datagen::{
    five_core_filter, freeze_candidates, ingest_interactions, leave_one_out_split, mix_domains, prepare_synthetic,
    render_instruction, sample_candidates, write_jsonl, CandidatePool, DomainId, Example, HeldOut, InstructionTemplate,
    SplitDataset, GENERIC_DOMAIN,
};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, summary_csv, Aggregates, EvalReport};
use crate::merger::{
    learn_lambdas, merge, simplex_grid, weight_average, MergeMethod, MergeMode, MergeSpec, MergedAdapter,
};
use crate::numkernel::{derive_seed, RngStream};
use crate::seqmodel::{Adaptation, BaseModel, DenseDelta, LoraAdapter};
use crate::trainer::{pretrain_base, train_adapter, TrainConfig, TrainReport, Validation};

/// Pipeline phase a failure belongs to; the CLI maps it to an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Train,
    Merge,
    Eval,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Train => "train",
            Stage::Merge => "merge",
            Stage::Eval => "eval",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {error}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub error: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T, E: Into<Error>> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|e| StageError { stage, error: e.into() })
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

/// One stored artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub name: String,
    /// Relative to the output directory.
    pub path: String,
    pub kind: String,
    pub hash: String,
    pub param_count: usize,
    /// Loaded from an earlier run instead of being recomputed.
    pub reused: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRef {
    pub method: String,
    pub path: String,
    pub aggregates: Aggregates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub target: String,
    pub sources: Vec<String>,
    /// Merge weights used by the WeaveRec merge, target first.
    pub lambdas: Option<Vec<f64>>,
    pub artifacts: Vec<ArtifactRef>,
    pub reports: Vec<ReportRef>,
    /// Names of the artifacts trained (not reloaded) by this run.
    pub trained: Vec<String>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn artifact(&self, name: &str) -> Option<&ArtifactRef> {
        self.artifacts.iter().find(|a| a.name == name)
    }

    pub fn report(&self, method: &str) -> Option<&ReportRef> {
        self.reports.iter().find(|r| r.method == method)
    }

    /// Artifact name to content hash.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        self.artifacts
            .iter()
            .map(|a| (a.name.clone(), a.hash.clone()))
            .collect()
    }

    /// Every referenced file exists and every checkpoint matches its hash.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for a in &self.artifacts {
            let found = checkpoint::file_hash(&root.join(&a.path))?;
            if found != a.hash {
                return Err(Error::Checkpoint(checkpoint::CheckpointError::HashMismatch {
                    expected: a.hash.clone(),
                    actual: found,
                }));
            }
        }
        for r in &self.reports {
            if !root.join(&r.path).is_file() {
                return Err(Error::InvalidArgument(format!("report {} is missing", r.path)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BASELINES_MANIFEST_FILE: &str = "baselines-manifest.json";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn hash_value(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

fn file_slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Filtered, split data for every configured domain.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab_size: usize,
    pub domains: Vec<SplitDataset>,
    pub generic: Option<SplitDataset>,
    /// Identifies the data for cache keys.
    pub key: Value,
}

impl PreparedData {
    pub fn split(&self, id: &DomainId) -> Result<&SplitDataset> {
        self.domains
            .iter()
            .find(|d| &d.domain == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {id}")))
    }
}

/// The synthetic data seed is derived from the experiment seed.
pub fn synthetic_config(config: &ExperimentConfig) -> Option<crate::SyntheticConfig> {
    match &config.data {
        DataSource::Synthetic(s) => Some(crate::SyntheticConfig {
            seed: derive_seed(config.seed, "data"),
            ..s.clone()
        }),
        DataSource::Files(_) => None,
    }
}

pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    match &config.data {
        DataSource::Synthetic(_) => {
            let syn = synthetic_config(config).expect("synthetic source");
            let prepared = prepare_synthetic(&syn)?;
            Ok(PreparedData {
                vocab_size: prepared.vocab_size,
                domains: prepared.domains,
                generic: prepared.generic,
                key: json!({ "synthetic": syn }),
            })
        }
        DataSource::Files(files) => {
            let mut domains = Vec::with_capacity(files.len());
            let mut hashes = Vec::new();
            let mut owner: BTreeMap<u32, DomainId> = BTreeMap::new();
            for f in files {
                let (ds, _) = ingest_interactions(&f.interactions, &f.titles, f.domain.clone())?;
                for item in ds.catalog.items() {
                    if let Some(other) = owner.insert(item, f.domain.clone()) {
                        return Err(Error::InvalidArgument(format!(
                            "item {item} appears in both {other} and {}; ids must be unique across domains",
                            f.domain
                        )));
                    }
                }
                domains.push(leave_one_out_split(&five_core_filter(&ds)?)?);
                hashes.push(json!({
                    "domain": f.domain,
                    "interactions": checkpoint::file_hash(&f.interactions)?,
                    "titles": checkpoint::file_hash(&f.titles)?,
                }));
            }
            let vocab_size = owner.keys().next_back().map_or(0, |&m| m as usize + 1);
            Ok(PreparedData {
                vocab_size,
                domains,
                generic: None,
                key: json!({ "files": hashes }),
            })
        }
    }
}

/// Pretraining and validation examples for the base model.
pub fn base_corpus(config: &ExperimentConfig, data: &PreparedData) -> Result<(Vec<Example>, Vec<Example>)> {
    match config.base_corpus {
        BaseCorpus::Generic => {
            let g = data.generic.as_ref().ok_or_else(|| Error::EmptyDataset {
                domain: GENERIC_DOMAIN.into(),
            })?;
            Ok((g.train_examples(), g.held_out_examples(HeldOut::Validation)))
        }
        BaseCorpus::Slice => {
            let mut all: Vec<Example> = data.domains.iter().flat_map(|d| d.train_examples()).collect();
            RngStream::new(derive_seed(config.seed, "base/slice")).shuffle(&mut all);
            let cut = (all.len() as f64 * 0.8).round() as usize;
            let valid = all.split_off(cut);
            Ok((all, valid))
        }
    }
}

/// Renders the target and source domains as instruction JSON lines under
/// `data/instructions/`, one file per domain. Returns the written paths.
pub fn write_instruction_files(config: &ExperimentConfig, data: &PreparedData, root: &Path) -> Result<Vec<PathBuf>> {
    let scope = config.instructions;
    if scope == InstructionScope::None {
        return Ok(Vec::new());
    }
    let template = InstructionTemplate::default();
    let mut written = Vec::new();
    for id in std::iter::once(&config.target).chain(&config.sources) {
        let split = data.split(id)?;
        let pool = freeze_candidates(split, HeldOut::Test, config.negatives, config.candidate_seed)?;
        let mut rows = Vec::new();
        if scope == InstructionScope::All {
            let mut rng = RngStream::new(derive_seed(config.seed, &format!("instructions/{id}")));
            for ex in split.train_examples() {
                let user = split.user(&ex.user_id).expect("example user exists");
                let cands = sample_candidates(
                    &ex.user_id,
                    &user.interacted(),
                    ex.target,
                    &split.catalog,
                    config.negatives,
                    &mut rng,
                )?;
                rows.push(render_instruction(id, &ex.prefix, &cands, &split.catalog, &template)?);
            }
        }
        for user in &split.users {
            let cands = pool.get(&user.user_id).expect("frozen pool covers every user");
            rows.push(render_instruction(
                id,
                &user.test_prefix(),
                cands,
                &split.catalog,
                &template,
            )?);
        }
        let mut buf = Vec::new();
        write_jsonl(&rows, &mut buf)?;
        let name = match scope {
            InstructionScope::All => "all",
            _ => "test",
        };
        let path = root.join(format!("data/instructions/{}-{name}.jsonl", file_slug(id.as_str())));
        write_atomic(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}

fn train_config(config: &ExperimentConfig, seed_name: &str) -> TrainConfig {
    TrainConfig {
        seed: derive_seed(config.seed, seed_name),
        init_seed: derive_seed(config.seed, "lora/init"),
        ..config.train.clone()
    }
}

/// Shared state of one run inside an output directory.
pub struct Session<'c> {
    pub config: &'c ExperimentConfig,
    pub root: PathBuf,
    pub data: PreparedData,
    pub base: BaseModel,
    artifacts: Vec<ArtifactRef>,
    reports: Vec<ReportRef>,
    trained: Vec<String>,
    test_pool: CandidatePool,
    valid_pools: BTreeMap<DomainId, CandidatePool>,
    started_at: u64,
}

impl<'c> Session<'c> {
    /// Validates the config, prepares the data, renders instructions and
    /// loads or pretrains the base.
    pub fn open(config: &'c ExperimentConfig) -> StageResult<Self> {
        config.validate().at(Stage::Config)?;
        let started_at = now();
        let root = config.output_dir.clone();
        std::fs::create_dir_all(&root).at(Stage::Data)?;
        let data = prepare_data(config).at(Stage::Data)?;
        let target = data.split(&config.target).at(Stage::Data)?;
        let test_pool =
            freeze_candidates(target, HeldOut::Test, config.negatives, config.candidate_seed).at(Stage::Data)?;
        let mut session = Self {
            config,
            root,
            base: BaseModel::init(1, 1, 1, &mut RngStream::new(0)),
            data,
            artifacts: Vec::new(),
            reports: Vec::new(),
            trained: Vec::new(),
            test_pool,
            valid_pools: BTreeMap::new(),
            started_at,
        };
        session.write_instructions().at(Stage::Data)?;
        session.load_or_pretrain_base().at(Stage::Train)?;
        Ok(session)
    }

    fn write_instructions(&self) -> Result<()> {
        write_instruction_files(self.config, &self.data, &self.root)?;
        Ok(())
    }

    fn load_or_pretrain_base(&mut self) -> Result<()> {
        let config = self.config;
        let base_train = TrainConfig {
            seed: derive_seed(config.seed, "base/train"),
            ..config.base_train.clone()
        };
        let key = hash_value(&json!({
            "stage": "base",
            "data": self.data.key,
            "model": config.model,
            "corpus": config.base_corpus,
            "train": base_train,
            "init_seed": derive_seed(config.seed, "base/init"),
        }));
        let (base, art) = self.cached("base", &key, |s| {
            let data = &s.data;
            let (corpus, valid) = base_corpus(config, data)?;
            let init = BaseModel::init(
                data.vocab_size,
                config.model.dim,
                config.model.max_seq_len,
                &mut RngStream::new(derive_seed(config.seed, "base/init")),
            );
            pretrain_base(init, &corpus, Some(&valid), &base_train)
        })?;
        self.artifacts.push(ArtifactRef {
            param_count: base.param_count(),
            ..art
        });
        self.base = base;
        Ok(())
    }

    /// Loads `checkpoints/<name>-<key>.wvrc` if present, else builds and stores it.
    fn cached<T: Checkpointable>(
        &mut self,
        name: &str,
        key: &str,
        build: impl FnOnce(&Self) -> Result<(T, TrainReport)>,
    ) -> Result<(T, ArtifactRef)> {
        let stem = format!("{}-{}", file_slug(name), &key[..16]);
        let rel = format!("checkpoints/{stem}.wvrc");
        let path = self.root.join(&rel);
        let (value, hash, reused) = if path.is_file() {
            let bytes = std::fs::read(&path)?;
            let value = checkpoint::decode::<T>(&bytes)?;
            (value, checkpoint::content_hash(&bytes), true)
        } else {
            let (value, report) = build(self)?;
            let hash = checkpoint::save(&value, &path)?;
            let report_path = self.root.join(format!("reports/train/{stem}.json"));
            write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
            log::info!("trained {name} ({} epochs)", report.train_loss.len());
            self.trained.push(name.to_string());
            (value, hash, false)
        };
        Ok((
            value,
            ArtifactRef {
                name: name.to_string(),
                path: rel,
                kind: T::KIND.to_string(),
                hash,
                param_count: 0,
                reused,
            },
        ))
    }

    fn valid_pool(&mut self, id: &DomainId) -> Result<&CandidatePool> {
        if !self.valid_pools.contains_key(id) {
            let split = self.data.split(id)?;
            let pool = freeze_candidates(
                split,
                HeldOut::Validation,
                self.config.negatives,
                self.config.candidate_seed,
            )?;
            self.valid_pools.insert(id.clone(), pool);
        }
        Ok(&self.valid_pools[id])
    }

    fn adapter_key(&self, stage: &str, extra: Value, train: &TrainConfig) -> String {
        hash_value(&json!({
            "stage": stage,
            "base": self.artifacts[0].hash,
            "train": train,
            "negatives": self.config.negatives,
            "candidate_seed": self.config.candidate_seed,
            "extra": extra,
        }))
    }

    /// Adapter trained on one domain alone, validated on that domain.
    pub fn single_adapter(&mut self, id: &DomainId, name: &str) -> StageResult<LoraAdapter> {
        let train = train_config(self.config, &format!("train/single/{id}"));
        let key = self.adapter_key("single", json!({ "domain": id }), &train);
        self.valid_pool(id).at(Stage::Data)?;
        let (mut adapter, mut art) = self
            .cached(&format!("adapter-{id}"), &key, |s| {
                let split = s.data.split(id)?;
                let val = Validation {
                    split,
                    pool: &s.valid_pools[id],
                };
                let (mut a, r) = train_adapter(&s.base, &split.train_examples(), Some(val), &train)?;
                a.meta.domain_lineage = vec![id.to_string()];
                Ok((a, r))
            })
            .at(Stage::Train)?;
        adapter.meta.domain_lineage = vec![id.to_string()];
        art.name = name.to_string();
        art.param_count = adapter.param_count();
        self.push_artifact(art);
        Ok(adapter)
    }

    /// Adapter trained on target ∪ source, validated on the target.
    pub fn hybrid_adapter(&mut self, source: &DomainId) -> StageResult<LoraAdapter> {
        let target = self.config.target.clone();
        let train = train_config(self.config, &format!("train/hybrid/{source}"));
        let mix = self.config.hybrid_mix;
        let mix_seed = derive_seed(self.config.seed, &format!("mix/{source}"));
        let key = self.adapter_key(
            "hybrid",
            json!({ "target": target, "source": source, "mix": mix, "mix_seed": mix_seed }),
            &train,
        );
        self.valid_pool(&target).at(Stage::Data)?;
        let name = format!("hybrid/{source}");
        let (adapter, mut art) = self
            .cached(&format!("hybrid-{target}-{source}"), &key, |s| {
                let t = s.data.split(&target)?;
                let src = s.data.split(source)?;
                let mixed = mix_domains(t, src, mix, &mut RngStream::new(mix_seed))?;
                let val = Validation {
                    split: t,
                    pool: &s.valid_pools[&target],
                };
                let (mut a, r) = train_adapter(&s.base, &mixed.examples, Some(val), &train)?;
                a.meta.domain_lineage = vec![target.to_string(), source.to_string()];
                Ok((a, r))
            })
            .at(Stage::Train)?;
        art.name = name;
        art.param_count = adapter.param_count();
        self.push_artifact(art);
        Ok(adapter)
    }

    /// One adapter on the union of the target and every source.
    pub fn all_data_adapter(&mut self) -> StageResult<LoraAdapter> {
        let target = self.config.target.clone();
        let ids: Vec<DomainId> = std::iter::once(target.clone())
            .chain(self.config.sources.iter().cloned())
            .collect();
        let train = train_config(self.config, "train/all-data");
        let key = self.adapter_key("all-data", json!({ "domains": ids }), &train);
        self.valid_pool(&target).at(Stage::Data)?;
        let (adapter, mut art) = self
            .cached("all-data", &key, |s| {
                let splits = ids.iter().map(|d| s.data.split(d)).collect::<Result<Vec<_>>>()?;
                let val = Validation {
                    split: s.data.split(&target)?,
                    pool: &s.valid_pools[&target],
                };
                crate::trainer::train_all_data_merging(&s.base, &splits, Some(val), &train)
            })
            .at(Stage::Train)?;
        art.param_count = adapter.param_count();
        self.push_artifact(art);
        Ok(adapter)
    }

    fn push_artifact(&mut self, art: ArtifactRef) {
        if !self.artifacts.iter().any(|a| a.name == art.name) {
            self.artifacts.push(art);
        }
    }

    /// Stores a merged adapter under `checkpoints/merged-<method>.wvrc`.
    pub fn store_merged(&mut self, method: &str, merged: &MergedAdapter) -> StageResult<()> {
        let rel = format!("checkpoints/merged-{}.wvrc", file_slug(method));
        let path = self.root.join(&rel);
        let (hash, kind) = match merged {
            MergedAdapter::Factor(a) => (checkpoint::save(a, &path), LoraAdapter::KIND),
            MergedAdapter::Product(d) => (checkpoint::save(d, &path), DenseDelta::KIND),
        };
        let art = ArtifactRef {
            name: format!("merged/{method}"),
            path: rel,
            kind: kind.to_string(),
            hash: hash.at(Stage::Merge)?,
            param_count: merged.param_count(),
            reused: false,
        };
        self.artifacts.retain(|a| a.name != art.name);
        self.artifacts.push(art);
        Ok(())
    }

    pub fn target_split(&self) -> &SplitDataset {
        self.data.split(&self.config.target).expect("target validated at open")
    }

    pub fn test_pool(&self) -> &CandidatePool {
        &self.test_pool
    }

    /// Evaluates on the target test split and writes `reports/<method>.json`.
    pub fn evaluate(&mut self, method: &str, adapt: Adaptation<'_>) -> StageResult<EvalReport> {
        let mut report = evaluate(&self.base, adapt, self.target_split(), &self.test_pool, method).at(Stage::Eval)?;
        report.seed = Some(self.config.seed);
        let rel = format!("reports/{}.json", file_slug(method));
        write_atomic(&self.root.join(&rel), report.to_json().at(Stage::Eval)?.as_bytes()).at(Stage::Eval)?;
        self.reports.retain(|r| r.method != method);
        self.reports.push(ReportRef {
            method: method.to_string(),
            path: rel,
            aggregates: report.aggregates,
        });
        Ok(report)
    }

    /// Validation NDCG@5 on the target for a factor-mode merge.
    fn validation_ndcg5(&mut self, adapter: &LoraAdapter) -> Result<f64> {
        let target = self.config.target.clone();
        self.valid_pool(&target)?;
        let split = self.data.split(&target)?;
        Ok(evaluate(
            &self.base,
            Adaptation::Lora(adapter),
            split,
            &self.valid_pools[&target],
            "tune",
        )?
        .aggregates
        .ndcg5)
    }

    fn input_hashes(&self, names: &[String]) -> Vec<String> {
        names
            .iter()
            .filter_map(|n| self.artifacts.iter().find(|a| &a.name == n).map(|a| a.hash.clone()))
            .collect()
    }

    pub fn artifacts(&self) -> &[ArtifactRef] {
        &self.artifacts
    }

    /// Writes the manifest of everything this session produced to `file`.
    pub fn finish(self, lambdas: Option<Vec<f64>>, file: &str) -> StageResult<RunManifest> {
        let manifest = RunManifest {
            config_hash: self.config.hash(),
            seed: self.config.seed,
            target: self.config.target.to_string(),
            sources: self.config.sources.iter().map(|d| d.to_string()).collect(),
            lambdas,
            artifacts: self.artifacts,
            reports: self.reports,
            trained: self.trained,
            started_at: self.started_at,
            finished_at: now(),
        };
        let json = serde_json::to_string_pretty(&manifest).at(Stage::Eval)?;
        write_atomic(&self.root.join(file), json.as_bytes()).at(Stage::Eval)?;
        Ok(manifest)
    }
}

/// Method name of the WeaveRec merge in reports.
pub const WEAVEREC: &str = "weaverec";

/// Target adapter, one hybrid per source, factor merge, target-test
/// evaluation of the merge and of each branch on its own.
pub fn run_weaverec(config: &ExperimentConfig) -> StageResult<RunManifest> {
    let mut s = Session::open(config)?;
    let target_id = config.target.clone();
    let target = s.single_adapter(&target_id, "target")?;
    let mut branches = vec![target];
    let mut names = vec!["target".to_string()];
    for src in &config.sources {
        branches.push(s.hybrid_adapter(src)?);
        names.push(format!("hybrid/{src}"));
    }
    let refs: Vec<&LoraAdapter> = branches.iter().collect();
    let lambdas = if config.tune_lambdas {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for l in simplex_grid(refs.len(), config.lambda_grid) {
            let merged = weight_average(&refs, &l).at(Stage::Merge)?;
            let score = s.validation_ndcg5(&merged).at(Stage::Eval)?;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, l));
            }
        }
        best.expect("simplex grid is never empty").1
    } else {
        config.merge_lambdas()
    };
    let spec = MergeSpec {
        lambdas: lambdas.clone(),
        mode: config.merge_mode,
        method: MergeMethod::WeightAverage,
    };
    let inputs = s.input_hashes(&names);
    let merged = merge(&refs, &spec).at(Stage::Merge)?.with_provenance(&spec, &inputs);
    s.store_merged(WEAVEREC, &merged)?;
    let mut reports = vec![s.evaluate(Baseline::TargetOnly.name(), Adaptation::Lora(&branches[0]))?];
    for (src, hybrid) in config.sources.iter().zip(&branches[1..]) {
        reports.push(s.evaluate(&hybrid_method(src), Adaptation::Lora(hybrid))?);
    }
    reports.push(s.evaluate(WEAVEREC, merged.adaptation())?);
    let table = summary_csv(&reports, Some(&reports[0])).at(Stage::Eval)?;
    write_atomic(&s.root.join("tables/weaverec.csv"), table.as_bytes()).at(Stage::Eval)?;
    s.finish(Some(lambdas), MANIFEST_FILE)
}

/// Report name of a hybrid branch evaluated on its own.
pub fn hybrid_method(source: &DomainId) -> String {
    format!("hybrid-{source}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    /// The frozen base without any adapter.
    Base,
    TargetOnly,
    /// Each source-domain adapter evaluated on the target.
    SourceOnly,
    AllDataMerging,
    NaiveWa,
    Ties,
    DareWa,
    Lego,
    LearnedLambda,
}

impl Baseline {
    pub const ALL: [Baseline; 9] = [
        Baseline::Base,
        Baseline::TargetOnly,
        Baseline::SourceOnly,
        Baseline::AllDataMerging,
        Baseline::NaiveWa,
        Baseline::Ties,
        Baseline::DareWa,
        Baseline::Lego,
        Baseline::LearnedLambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Base => "base",
            Baseline::TargetOnly => "target-only",
            Baseline::SourceOnly => "source-only",
            Baseline::AllDataMerging => "all-data-merging",
            Baseline::NaiveWa => "naive-wa",
            Baseline::Ties => "ties",
            Baseline::DareWa => "dare+wa",
            Baseline::Lego => "lego",
            Baseline::LearnedLambda => "learned-lambda",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    fn merges_per_domain(self) -> bool {
        matches!(
            self,
            Baseline::NaiveWa | Baseline::Ties | Baseline::DareWa | Baseline::Lego | Baseline::LearnedLambda
        )
    }
}

/// Report name of the source-only evaluation of `source`.
pub fn source_only_method(source: &DomainId) -> String {
    format!("source-only-{source}")
}

/// Evaluates the requested baselines on the same frozen target candidates.
/// Merge baselines combine the target adapter with per-source adapters that
/// each saw a single domain.
pub fn run_baselines(config: &ExperimentConfig, methods: &[Baseline]) -> StageResult<RunManifest> {
    let mut s = Session::open(config)?;
    let wants = |b: Baseline| methods.contains(&b);
    let need_singles = wants(Baseline::SourceOnly) || methods.iter().any(|m| m.merges_per_domain());
    let need_target = wants(Baseline::TargetOnly) || methods.iter().any(|m| m.merges_per_domain());

    let target = if need_target {
        Some(s.single_adapter(&config.target.clone(), "target")?)
    } else {
        None
    };
    let mut singles = Vec::new();
    if need_singles {
        for src in &config.sources {
            singles.push((src.clone(), s.single_adapter(src, &format!("source/{src}"))?));
        }
    }
    let mut names = vec!["target".to_string()];
    names.extend(config.sources.iter().map(|d| format!("source/{d}")));

    for &method in methods {
        match method {
            Baseline::Base => {
                s.evaluate(method.name(), Adaptation::None)?;
            }
            Baseline::TargetOnly => {
                s.evaluate(method.name(), Adaptation::Lora(target.as_ref().expect("trained above")))?;
            }
            Baseline::SourceOnly => {
                for (d, a) in &singles {
                    s.evaluate(&source_only_method(d), Adaptation::Lora(a))?;
                }
            }
            Baseline::AllDataMerging => {
                let a = s.all_data_adapter()?;
                s.evaluate(method.name(), Adaptation::Lora(&a))?;
            }
            _ => {
                let mut refs = vec![target.as_ref().expect("trained above")];
                refs.extend(singles.iter().map(|(_, a)| a));
                let n = refs.len();
                let uniform = crate::merger::uniform_lambdas(n);
                let spec = match method {
                    Baseline::NaiveWa => MergeSpec {
                        lambdas: uniform,
                        mode: config.merge_mode,
                        method: MergeMethod::WeightAverage,
                    },
                    Baseline::Ties => MergeSpec {
                        lambdas: uniform,
                        mode: MergeMode::Product,
                        method: MergeMethod::Ties {
                            trim_fraction: config.baselines.ties_keep,
                        },
                    },
                    Baseline::DareWa => MergeSpec {
                        lambdas: uniform,
                        mode: MergeMode::Product,
                        method: MergeMethod::DareAverage {
                            drop_prob: config.baselines.dare_drop,
                            seed: derive_seed(config.seed, "dare"),
                        },
                    },
                    Baseline::Lego => MergeSpec {
                        lambdas: uniform,
                        mode: MergeMode::Factor,
                        method: MergeMethod::Lego {
                            target_rank: config.train.lora.rank,
                            seed: derive_seed(config.seed, "lego"),
                        },
                    },
                    Baseline::LearnedLambda => {
                        let target_id = config.target.clone();
                        let pool = s.valid_pool(&target_id).at(Stage::Data)?.clone();
                        let split = s.data.split(&target_id).at(Stage::Data)?;
                        let mut prefixes = Vec::new();
                        let mut candidates = Vec::new();
                        for u in &split.users {
                            prefixes.push(u.validation_prefix().to_vec());
                            candidates.push(pool.get(&u.user_id).expect("pool covers users").order.clone());
                        }
                        learn_lambdas(
                            &s.base,
                            &refs,
                            &prefixes,
                            Some(&candidates),
                            config.baselines.learned_steps,
                            config.baselines.learned_step_size,
                        )
                        .at(Stage::Merge)?
                    }
                    _ => unreachable!("handled above"),
                };
                let inputs = s.input_hashes(&names);
                let merged = merge(&refs, &spec).at(Stage::Merge)?.with_provenance(&spec, &inputs);
                s.store_merged(method.name(), &merged)?;
                s.evaluate(method.name(), merged.adaptation())?;
            }
        }
    }

    let reports: Vec<EvalReport> = s
        .reports
        .iter()
        .map(|r| Ok(serde_json::from_slice(&std::fs::read(s.root.join(&r.path))?)?))
        .collect::<Result<_>>()
        .at(Stage::Eval)?;
    let baseline = reports.iter().find(|r| r.method == Baseline::TargetOnly.name());
    let table = summary_csv(&reports, baseline).at(Stage::Eval)?;
    write_atomic(&s.root.join("tables/baselines.csv"), table.as_bytes()).at(Stage::Eval)?;
    s.finish(None, BASELINES_MANIFEST_FILE)
}
