use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::{DomainId, MixMode, SyntheticConfig, DEFAULT_NEGATIVES};
use crate::error::{Error, Result};
use crate::merger::MergeMode;
use crate::trainer::{Optimizer, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainFiles {
    pub domain: DomainId,
    pub interactions: PathBuf,
    pub titles: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// One interactions/titles pair per domain. Item ids must be globally
    /// unique across domains.
    Files(Vec<DomainFiles>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseCorpus {
    /// The dedicated generic synthetic domain.
    Generic,
    /// 80% of every domain's training examples; the rest validates.
    Slice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstructionScope {
    None,
    /// One instruction per user for the held-out test item.
    Test,
    /// Every training position plus the test item.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_seq_len: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    /// Fraction of coordinates each delta keeps before sign election.
    pub ties_keep: f64,
    pub dare_drop: f64,
    pub learned_steps: usize,
    pub learned_step_size: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            ties_keep: 0.2,
            dare_drop: 0.9,
            learned_steps: 20,
            learned_step_size: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub target: DomainId,
    pub sources: Vec<DomainId>,
    pub model: ModelConfig,
    pub base_corpus: BaseCorpus,
    pub base_train: TrainConfig,
    pub train: TrainConfig,
    pub hybrid_mix: MixMode,
    pub merge_mode: MergeMode,
    /// Merge weights (target first); `None` means uniform `1/(N+1)`.
    pub lambdas: Option<Vec<f64>>,
    /// Pick λ by validation NDCG@5 over a simplex grid instead.
    pub tune_lambdas: bool,
    pub lambda_grid: f64,
    pub negatives: usize,
    pub candidate_seed: u64,
    pub seed: u64,
    pub instructions: InstructionScope,
    pub baselines: BaselineParams,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticConfig::default()),
            target: DomainId::new("d0"),
            sources: vec![DomainId::new("d1")],
            model: ModelConfig::default(),
            base_corpus: BaseCorpus::Generic,
            base_train: TrainConfig {
                learning_rate: 3e-3,
                max_epochs: 20,
                ..TrainConfig::default()
            },
            train: TrainConfig::default(),
            hybrid_mix: MixMode::FullUnion,
            merge_mode: MergeMode::Factor,
            lambdas: None,
            tune_lambdas: false,
            lambda_grid: 0.1,
            negatives: DEFAULT_NEGATIVES,
            candidate_seed: 0,
            seed: 0,
            instructions: InstructionScope::Test,
            baselines: BaselineParams::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!(
            "{key}: expected a boolean, got {value:?}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "learning_rate" => t.learning_rate = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "max_epochs" => t.max_epochs = parse(key, value)?,
        "patience" => t.patience = parse(key, value)?,
        "optimizer" => {
            t.optimizer = match value.trim() {
                "adam" => Optimizer::Adam,
                "sgd" => Optimizer::Sgd,
                other => return Err(Error::InvalidArgument(format!("{key}: unknown optimizer {other:?}"))),
            }
        }
        "per_domain_cap" => {
            t.per_domain_cap = match value.trim() {
                "" | "none" => None,
                v => Some(parse(key, v)?),
            }
        }
        "rank" => t.lora.rank = parse(key, value)?,
        "alpha" => t.lora.alpha = parse(key, value)?,
        "dropout" => t.lora.dropout = parse(key, value)?,
        "init_sigma" => t.lora.init_sigma = parse(key, value)?,
        "a_lr_scale" => t.lora_a_lr_scale = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn set_synthetic(s: &mut SyntheticConfig, key: &str, field: &str, value: &str) -> Result<bool> {
    match field {
        "n_domains" => s.n_domains = parse(key, value)?,
        "users_per_domain" => s.users_per_domain = parse(key, value)?,
        "items_per_domain" => s.items_per_domain = parse(key, value)?,
        "latent_dim" => s.latent_dim = parse(key, value)?,
        "rho" => s.rho = parse(key, value)?,
        "min_len" => s.min_len = parse(key, value)?,
        "max_len" => s.max_len = parse(key, value)?,
        "affinity_scale" => s.affinity_scale = parse(key, value)?,
        "taste_scale" => s.taste_scale = parse(key, value)?,
        "popularity_scale" => s.popularity_scale = parse(key, value)?,
        "generic_users" => s.generic_users = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl ExperimentConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let unknown = || Error::InvalidArgument(format!("unknown config key {key:?}"));
        match key {
            "data" => {
                self.data = match value.trim() {
                    "synthetic" => DataSource::Synthetic(SyntheticConfig::default()),
                    "files" => DataSource::Files(Vec::new()),
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "data: expected synthetic or files, got {other:?}"
                        )))
                    }
                }
            }
            "target" => self.target = DomainId::new(value.trim()),
            "sources" => {
                self.sources = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(DomainId::new)
                    .collect()
            }
            "seed" => self.seed = parse(key, value)?,
            "candidate_seed" => self.candidate_seed = parse(key, value)?,
            "negatives" => self.negatives = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value.trim()),
            "model.dim" => self.model.dim = parse(key, value)?,
            "model.max_seq_len" => self.model.max_seq_len = parse(key, value)?,
            "base.corpus" => {
                self.base_corpus = match value.trim() {
                    "generic" => BaseCorpus::Generic,
                    "slice" => BaseCorpus::Slice,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "base.corpus: expected generic or slice, got {other:?}"
                        )))
                    }
                }
            }
            "hybrid.mix" => {
                self.hybrid_mix = match value.trim() {
                    "full" => MixMode::FullUnion,
                    v => MixMode::Ratio(parse(key, v.strip_prefix("ratio:").unwrap_or(v))?),
                }
            }
            "merge.mode" => {
                self.merge_mode = match value.trim() {
                    "factor" => MergeMode::Factor,
                    "product" => MergeMode::Product,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "merge.mode: expected factor or product, got {other:?}"
                        )))
                    }
                }
            }
            "merge.lambdas" => {
                self.lambdas = match value.trim() {
                    "" | "uniform" => None,
                    v => Some(parse_list(key, v)?),
                }
            }
            "merge.tune" => self.tune_lambdas = parse_bool(key, value)?,
            "merge.lambda_grid" => self.lambda_grid = parse(key, value)?,
            "instructions" => {
                self.instructions = match value.trim() {
                    "none" => InstructionScope::None,
                    "test" => InstructionScope::Test,
                    "all" => InstructionScope::All,
                    other => {
                        return Err(Error::InvalidArgument(format!(
                            "instructions: expected none, test or all, got {other:?}"
                        )))
                    }
                }
            }
            "baselines.ties_keep" => self.baselines.ties_keep = parse(key, value)?,
            "baselines.dare_drop" => self.baselines.dare_drop = parse(key, value)?,
            "baselines.learned_steps" => self.baselines.learned_steps = parse(key, value)?,
            "baselines.learned_step_size" => self.baselines.learned_step_size = parse(key, value)?,
            _ => {
                if let Some(field) = key.strip_prefix("train.") {
                    if set_train(&mut self.train, key, field, value)? {
                        return Ok(());
                    }
                } else if let Some(field) = key.strip_prefix("base.") {
                    if set_train(&mut self.base_train, key, field, value)? {
                        return Ok(());
                    }
                } else if let Some(field) = key.strip_prefix("synthetic.") {
                    let DataSource::Synthetic(s) = &mut self.data else {
                        return Err(Error::InvalidArgument(format!("{key} requires data=synthetic")));
                    };
                    if set_synthetic(s, key, field, value)? {
                        return Ok(());
                    }
                } else if let Some(rest) = key.strip_prefix("domain.") {
                    return self.set_domain_file(key, rest, value);
                }
                return Err(unknown());
            }
        }
        Ok(())
    }

    fn set_domain_file(&mut self, key: &str, rest: &str, value: &str) -> Result<()> {
        let DataSource::Files(files) = &mut self.data else {
            return Err(Error::InvalidArgument(format!("{key} requires data=files")));
        };
        let (name, field) = rest
            .rsplit_once('.')
            .ok_or_else(|| Error::InvalidArgument(format!("{key}: expected domain.<name>.interactions or .titles")))?;
        let domain = DomainId::new(name);
        let idx = match files.iter().position(|f| f.domain == domain) {
            Some(i) => i,
            None => {
                files.push(DomainFiles {
                    domain,
                    interactions: PathBuf::new(),
                    titles: PathBuf::new(),
                });
                files.len() - 1
            }
        };
        match field {
            "interactions" => files[idx].interactions = PathBuf::from(value.trim()),
            "titles" => files[idx].titles = PathBuf::from(value.trim()),
            _ => return Err(Error::InvalidArgument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_kv(&mut self, text: &str, file: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key=value".into()))?;
            self.set(k, v).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str, file: &str) -> Result<Self> {
        let mut config = Self::default();
        config.apply_kv(text, file)?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sources.contains(&self.target) {
            return bad(format!("target {} is also listed as a source", self.target));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = self.sources.iter().find(|d| !seen.insert(*d)) {
            return bad(format!("source {d} is listed twice"));
        }
        let known = self.domain_ids();
        for d in std::iter::once(&self.target).chain(&self.sources) {
            if !known.contains(d) {
                return bad(format!("domain {d} is not defined by the data source"));
            }
        }
        match &self.data {
            DataSource::Synthetic(s) => s.validate()?,
            DataSource::Files(files) => {
                for f in files {
                    if f.interactions.as_os_str().is_empty() || f.titles.as_os_str().is_empty() {
                        return bad(format!("domain {} needs both interactions and titles paths", f.domain));
                    }
                }
                if self.base_corpus == BaseCorpus::Generic {
                    return bad("ingested data has no generic corpus; set base.corpus=slice".into());
                }
            }
        }
        if let Some(l) = &self.lambdas {
            if l.len() != self.sources.len() + 1 {
                return bad(format!(
                    "{} merge weights for {} adapters",
                    l.len(),
                    self.sources.len() + 1
                ));
            }
            crate::merger::check_lambdas(l)?;
        }
        if !(self.lambda_grid > 0.0 && self.lambda_grid <= 1.0) {
            return bad(format!("merge.lambda_grid must be in (0, 1], got {}", self.lambda_grid));
        }
        if self.model.dim == 0 || self.model.max_seq_len == 0 {
            return bad("model dimensions must be positive".into());
        }
        self.train.validate()?;
        self.base_train.validate()?;
        Ok(())
    }

    pub fn domain_ids(&self) -> Vec<DomainId> {
        match &self.data {
            DataSource::Synthetic(s) => (0..s.n_domains).map(crate::datagen::domain_name).collect(),
            DataSource::Files(files) => files.iter().map(|f| f.domain.clone()).collect(),
        }
    }

    /// Merge weights for `[target, hybrid₁, …]`.
    pub fn merge_lambdas(&self) -> Vec<f64> {
        self.lambdas
            .clone()
            .unwrap_or_else(|| crate::merger::uniform_lambdas(self.sources.len() + 1))
    }

    /// Hash of everything but the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
