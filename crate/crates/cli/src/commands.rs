use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, ValueEnum};
use serde_json::json;

use weaverec::analysis::{
    alpha_grid, estimate_h_divergence, interpolation_sweep, landscape_grid, mixture_sample, sweep_csv, Featurizer,
    ProbeConfig,
};
use weaverec::checkpoint::{self, write_atomic};
use weaverec::datagen::{
    five_core_filter, generate_synthetic, ingest_interactions, leave_one_out_split, write_interactions, write_titles,
    ItemId, SplitDataset,
};
use weaverec::evaluator::Metric;
use weaverec::merger::{merge as merge_adapters, uniform_lambdas, MergeMethod, MergeMode, MergeSpec, MergedAdapter};
use weaverec::pipeline::{
    prepare_data, run_baselines, run_weaverec, synthetic_config, write_instruction_files, ArtifactRef, Baseline,
    DataSource, ExperimentConfig, InstructionScope, RunManifest, Session, BASELINES_MANIFEST_FILE, MANIFEST_FILE,
};
use weaverec::{DenseDelta, DomainId, LoraAdapter, RngStream};

use crate::{Code, Failure, CONFIG, DATA, MERGE_EVAL};

type Outcome = Result<(), Failure>;

fn print_json(value: &serde_json::Value) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("json value serializes")
    );
}

fn artifact_json(a: &ArtifactRef) -> serde_json::Value {
    json!({ "name": a.name, "path": a.path, "hash": a.hash, "reused": a.reused, "params": a.param_count })
}

#[derive(Args)]
pub struct GenData {
    /// Directory for `<domain>.interactions.csv`, `<domain>.titles.tsv` and `data.conf`.
    #[arg(long)]
    pub dir: PathBuf,
}

pub fn gen_data(config: &ExperimentConfig, args: &GenData) -> Outcome {
    let syn = synthetic_config(config)
        .ok_or_else(|| anyhow!("gen-data needs data=synthetic"))
        .code(CONFIG)?;
    let corpus = generate_synthetic(&syn).code(DATA)?;
    std::fs::create_dir_all(&args.dir).code(DATA)?;
    let dir = std::path::absolute(&args.dir).code(DATA)?;
    let mut conf = String::from("# Generated by `weaverec gen-data`.\ndata=files\nbase.corpus=slice\n");
    for d in &corpus.domains {
        let interactions = dir.join(format!("{}.interactions.csv", d.domain));
        let titles = dir.join(format!("{}.titles.tsv", d.domain));
        write_interactions(d, BufWriter::new(File::create(&interactions).code(DATA)?)).code(DATA)?;
        write_titles(&d.catalog, BufWriter::new(File::create(&titles).code(DATA)?)).code(DATA)?;
        conf.push_str(&format!(
            "domain.{0}.interactions={1}\ndomain.{0}.titles={2}\n",
            d.domain,
            interactions.display(),
            titles.display()
        ));
        println!("{}: {} users, {} items", d.domain, d.users.len(), d.catalog.len());
    }
    let conf_path = dir.join("data.conf");
    std::fs::write(&conf_path, conf).code(DATA)?;
    println!("config: {}", conf_path.display());
    Ok(())
}

pub fn ingest(config: &ExperimentConfig) -> Outcome {
    let DataSource::Files(files) = &config.data else {
        return Err(anyhow!("ingest needs data=files")).code(CONFIG);
    };
    println!("domain,rows,duplicates,users,items,five_core_users,train_examples");
    for f in files {
        let (ds, stats) = ingest_interactions(&f.interactions, &f.titles, f.domain.clone())
            .with_context(|| format!("domain {}", f.domain))
            .code(DATA)?;
        let filtered = five_core_filter(&ds).code(DATA)?;
        let split = leave_one_out_split(&filtered).code(DATA)?;
        println!(
            "{},{},{},{},{},{},{}",
            f.domain,
            stats.rows,
            stats.duplicates_removed,
            ds.users.len(),
            ds.catalog.len(),
            split.users.len(),
            split.train_examples().len()
        );
    }
    // Also catches ids shared between domains.
    prepare_data(config).code(DATA)?;
    Ok(())
}

pub fn pretrain(config: &ExperimentConfig) -> Outcome {
    let session = Session::open(config)?;
    print_json(&artifact_json(&session.artifacts()[0]));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Scope {
    Test,
    All,
}

#[derive(Args)]
pub struct RenderInstructions {
    /// Overrides `instructions` from the config.
    #[arg(long, value_enum)]
    pub scope: Option<Scope>,
}

pub fn render_instructions(config: &ExperimentConfig, args: &RenderInstructions) -> Outcome {
    let mut config = config.clone();
    config.instructions = match (args.scope, config.instructions) {
        (Some(Scope::All), _) => InstructionScope::All,
        (Some(Scope::Test), _) | (None, InstructionScope::None) => InstructionScope::Test,
        (None, other) => other,
    };
    let data = prepare_data(&config).code(DATA)?;
    for path in write_instruction_files(&config, &data, &config.output_dir).code(DATA)? {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct TrainAdapter {
    /// Domain of a single-domain adapter (defaults to the target).
    #[arg(long, conflicts_with_all = ["hybrid_source", "all_data"])]
    pub domain: Option<String>,
    /// Train the hybrid adapter on target + this source instead.
    #[arg(long)]
    pub hybrid_source: Option<String>,
    /// Train one adapter on the target and every source together.
    #[arg(long, conflicts_with = "hybrid_source")]
    pub all_data: bool,
}

pub fn train_adapter(config: &ExperimentConfig, args: &TrainAdapter) -> Outcome {
    let mut session = Session::open(config)?;
    if let Some(src) = &args.hybrid_source {
        session.hybrid_adapter(&DomainId::new(src))?;
    } else if args.all_data {
        session.all_data_adapter()?;
    } else {
        let id = args
            .domain
            .as_deref()
            .map_or_else(|| config.target.clone(), DomainId::new);
        let name = if id == config.target {
            "target".to_string()
        } else {
            format!("source/{id}")
        };
        session.single_adapter(&id, &name)?;
    }
    print_json(&artifact_json(
        session.artifacts().last().expect("adapter artifact pushed"),
    ));
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    /// λ-weighted average.
    Wa,
    Ties,
    /// DARE on each task vector, then λ-weighted average.
    Dare,
    Lego,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Factor,
    Product,
}

#[derive(Args)]
pub struct Merge {
    /// Adapter checkpoints (paths or artifact names from the run manifests).
    #[arg(long, required = true, num_args = 1.., value_delimiter = ',')]
    pub inputs: Vec<String>,
    /// Comma-separated coefficients summing to 1; uniform when omitted.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value = "wa")]
    pub method: Method,
    /// Defaults to `merge.mode` from the config.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Ties: fraction of each delta's largest magnitudes kept.
    #[arg(long)]
    pub keep: Option<f64>,
    /// DARE: drop probability.
    #[arg(long)]
    pub drop: Option<f64>,
    /// LEGO: output rank (defaults to the inputs' rank).
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolves a path, or an artifact name listed in the output directory's manifests.
fn resolve(config: &ExperimentConfig, spec: &str) -> anyhow::Result<PathBuf> {
    let path = PathBuf::from(spec);
    if path.is_file() {
        return Ok(path);
    }
    for file in [MANIFEST_FILE, BASELINES_MANIFEST_FILE] {
        let m = config.output_dir.join(file);
        if !m.is_file() {
            continue;
        }
        let manifest = RunManifest::load(&m)?;
        if let Some(a) = manifest.artifact(spec) {
            return Ok(config.output_dir.join(&a.path));
        }
    }
    bail!(
        "{spec:?} is neither a file nor an artifact in {}",
        config.output_dir.display()
    )
}

fn load_adapter(config: &ExperimentConfig, spec: &str) -> anyhow::Result<LoraAdapter> {
    let path = resolve(config, spec)?;
    checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))
}

pub fn merge(config: &ExperimentConfig, args: &Merge) -> Outcome {
    let adapters = args
        .inputs
        .iter()
        .map(|s| load_adapter(config, s))
        .collect::<anyhow::Result<Vec<_>>>()
        .code(DATA)?;
    let refs: Vec<&LoraAdapter> = adapters.iter().collect();
    let lambdas = args.lambdas.clone().unwrap_or_else(|| uniform_lambdas(refs.len()));
    let mode = match args.mode {
        Some(Mode::Factor) => MergeMode::Factor,
        Some(Mode::Product) => MergeMode::Product,
        None => config.merge_mode,
    };
    let (method, mode) = match args.method {
        Method::Wa => (MergeMethod::WeightAverage, mode),
        Method::Ties => (
            MergeMethod::Ties {
                trim_fraction: args.keep.unwrap_or(config.baselines.ties_keep),
            },
            MergeMode::Product,
        ),
        Method::Dare => (
            MergeMethod::DareAverage {
                drop_prob: args.drop.unwrap_or(config.baselines.dare_drop),
                seed: config.seed,
            },
            MergeMode::Product,
        ),
        Method::Lego => (
            MergeMethod::Lego {
                target_rank: args.rank.unwrap_or(refs[0].layers[0].b.cols()),
                seed: config.seed,
            },
            MergeMode::Factor,
        ),
    };
    let spec = MergeSpec { lambdas, mode, method };
    let inputs: Vec<String> = args
        .inputs
        .iter()
        .map(|s| resolve(config, s).and_then(|p| Ok(checkpoint::file_hash(&p)?)))
        .collect::<anyhow::Result<_>>()
        .code(DATA)?;
    let merged = merge_adapters(&refs, &spec)
        .code(MERGE_EVAL)?
        .with_provenance(&spec, &inputs);
    let hash = match &merged {
        MergedAdapter::Factor(a) => checkpoint::save(a, &args.out),
        MergedAdapter::Product(d) => checkpoint::save(d, &args.out),
    }
    .code(MERGE_EVAL)?;
    print_json(&json!({ "path": args.out, "hash": hash, "params": merged.param_count(), "spec": spec }));
    Ok(())
}

#[derive(Args)]
pub struct Eval {
    /// Adapter or dense-delta checkpoint (path or artifact name); the bare
    /// base model when omitted.
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Report name; defaults to the checkpoint's file stem, or `base`.
    #[arg(long)]
    pub method: Option<String>,
}

pub fn eval(config: &ExperimentConfig, args: &Eval) -> Outcome {
    let mut session = Session::open(config)?;
    let report = match &args.checkpoint {
        None => session.evaluate(args.method.as_deref().unwrap_or("base"), weaverec::Adaptation::None)?,
        Some(spec) => {
            let path = resolve(config, spec).code(DATA)?;
            let method = args.method.clone().unwrap_or_else(|| {
                path.file_stem()
                    .map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned())
            });
            let kind = checkpoint::peek(&path).code(DATA)?.kind;
            if kind == <DenseDelta as weaverec::Checkpointable>::KIND {
                let d: DenseDelta = checkpoint::load(&path).code(DATA)?;
                session.evaluate(&method, weaverec::Adaptation::Dense(&d))?
            } else {
                let a: LoraAdapter = checkpoint::load(&path).code(DATA)?;
                session.evaluate(&method, weaverec::Adaptation::Lora(&a))?
            }
        }
    };
    print_json(&json!({ "method": report.method, "users": report.users.len(), "aggregates": report.aggregates }));
    Ok(())
}

fn print_table(config: &ExperimentConfig, name: &str) -> Outcome {
    let path = config.output_dir.join("tables").join(name);
    print!("{}", std::fs::read_to_string(&path).code(MERGE_EVAL)?);
    Ok(())
}

pub fn weaverec(config: &ExperimentConfig) -> Outcome {
    let manifest = run_weaverec(config)?;
    log::info!(
        "trained {:?}; manifest {}",
        manifest.trained,
        config.output_dir.join(MANIFEST_FILE).display()
    );
    print_table(config, "weaverec.csv")
}

#[derive(Args)]
pub struct Baselines {
    /// Comma-separated subset of: base, target-only, source-only,
    /// all-data-merging, naive-wa, ties, dare+wa, lego, learned-lambda.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
}

pub fn baselines(config: &ExperimentConfig, args: &Baselines) -> Outcome {
    let methods = match &args.methods {
        None => Baseline::ALL.to_vec(),
        Some(names) => names
            .iter()
            .map(|n| Baseline::from_name(n.trim()).ok_or_else(|| anyhow!("unknown baseline {n:?}")))
            .collect::<anyhow::Result<_>>()
            .code(CONFIG)?,
    };
    let manifest = run_baselines(config, &methods)?;
    log::info!(
        "trained {:?}; manifest {}",
        manifest.trained,
        config.output_dir.join(BASELINES_MANIFEST_FILE).display()
    );
    print_table(config, "baselines.csv")
}

fn first_source(config: &ExperimentConfig) -> Result<&DomainId, Failure> {
    config
        .sources
        .first()
        .ok_or_else(|| anyhow!("no source domain configured; pass the adapters explicitly"))
        .code(CONFIG)
}

fn parse_metric(name: &str) -> Result<Metric, Failure> {
    Metric::from_name(name)
        .or_else(|| {
            Metric::ALL
                .into_iter()
                .find(|m| m.name().replace('@', "") == name.to_ascii_lowercase())
        })
        .ok_or_else(|| anyhow!("unknown metric {name:?}"))
        .code(CONFIG)
}

#[derive(Args)]
pub struct Landscape {
    /// Origin of the plane [default: target].
    #[arg(long)]
    pub a: Option<String>,
    /// Lies at (1, 0) [default: hybrid/<first source>].
    #[arg(long)]
    pub b: Option<String>,
    /// Third anchor [default: source/<first source>].
    #[arg(long)]
    pub c: Option<String>,
    #[arg(long, default_value_t = 9)]
    pub grid: usize,
    #[arg(long, default_value = "ndcg@5")]
    pub metric: String,
    /// Defaults to `<output_dir>/tables/landscape.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn landscape(config: &ExperimentConfig, args: &Landscape) -> Outcome {
    let metric = parse_metric(&args.metric)?;
    let a = args.a.clone().unwrap_or_else(|| "target".into());
    let b = match &args.b {
        Some(s) => s.clone(),
        None => format!("hybrid/{}", first_source(config)?),
    };
    let c = match &args.c {
        Some(s) => s.clone(),
        None => format!("source/{}", first_source(config)?),
    };
    let session = Session::open(config)?;
    let load = |s: &str| load_adapter(config, s).code(DATA);
    let (a, b, c) = (load(&a)?, load(&b)?, load(&c)?);
    let grid = landscape_grid(
        &session.base,
        &a,
        &b,
        &c,
        args.grid,
        session.target_split(),
        session.test_pool(),
        metric,
    )
    .code(MERGE_EVAL)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.join("tables/landscape.csv"));
    write_atomic(&out, grid.to_csv().as_bytes()).code(MERGE_EVAL)?;
    for anchor in &grid.anchors {
        println!(
            "{} at ({:.4}, {:.4}): {:.4}",
            anchor.name, anchor.s, anchor.t, anchor.value
        );
    }
    println!("grid: {}", out.display());
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FeaturizerKind {
    /// Bag of items plus mean frozen-base embedding.
    Affinity,
    /// Histogram over within-domain item positions (synthetic data only).
    Local,
}

#[derive(Args)]
pub struct Hdiv {
    #[arg(long)]
    pub first: String,
    #[arg(long)]
    pub second: String,
    /// Replace the first sample by a mixture of it with this domain.
    #[arg(long)]
    pub mix_with: Option<String>,
    /// Mixture weight: each draw comes from `--mix-with` with probability λ/(1+λ).
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, value_enum, default_value = "affinity")]
    pub featurizer: FeaturizerKind,
}

/// One training sequence per user.
fn user_sequences(split: &SplitDataset) -> Vec<Vec<ItemId>> {
    split.users.iter().map(|u| u.train.clone()).collect()
}

pub fn hdiv(config: &ExperimentConfig, args: &Hdiv) -> Outcome {
    let session = Session::open(config)?;
    let split = |name: &str| session.data.split(&DomainId::new(name)).code(DATA);
    let (mut first, mut second) = (
        user_sequences(split(&args.first)?),
        user_sequences(split(&args.second)?),
    );
    if args.first == args.second {
        // Disjoint user halves, so no sequence appears on both sides.
        second = first.split_off(first.len() / 2);
    }
    let mut first_name = args.first.clone();
    if let Some(src) = &args.mix_with {
        let source = user_sequences(split(src)?);
        let mut rng = RngStream::new(config.seed).split("hdiv/mixture");
        first = mixture_sample(&first, &source, args.lambda, first.len(), &mut rng)
            .code(DATA)?
            .into_iter()
            .map(|d| d.value)
            .collect();
        first_name = format!("mix({},{src};{})", args.first, args.lambda);
    }
    let featurizer = match args.featurizer {
        FeaturizerKind::Affinity => Featurizer::ItemAffinity(&session.base),
        FeaturizerKind::Local => {
            let syn = synthetic_config(config)
                .ok_or_else(|| anyhow!("the local featurizer needs data=synthetic"))
                .code(CONFIG)?;
            Featurizer::LocalIndex {
                items_per_domain: syn.items_per_domain,
            }
        }
    };
    let estimate = estimate_h_divergence(
        (&first_name, &first),
        (&args.second, &second),
        featurizer,
        &ProbeConfig::default(),
        config.seed,
    )
    .code(MERGE_EVAL)?;
    let value = serde_json::to_value(&estimate).code(MERGE_EVAL)?;
    let slug: String = format!("hdiv-{first_name}-{}", args.second)
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    write_report(&config.output_dir, &slug, &value)?;
    print_json(&value);
    Ok(())
}

fn write_report(root: &Path, stem: &str, value: &serde_json::Value) -> Outcome {
    let path = root.join("reports").join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(value).code(MERGE_EVAL)?;
    write_atomic(&path, text.as_bytes()).code(MERGE_EVAL)
}

#[derive(Args)]
pub struct Sweep {
    /// α = 0 end [default: target].
    #[arg(long)]
    pub from: Option<String>,
    /// α = 1 end [default: hybrid/<first source>].
    #[arg(long)]
    pub to: Option<String>,
    /// Number of intervals on [0, 1].
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Defaults to `<output_dir>/tables/sweep.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn sweep(config: &ExperimentConfig, args: &Sweep) -> Outcome {
    if args.steps == 0 {
        return Err(anyhow!("--steps must be at least 1")).code(CONFIG);
    }
    let from = args.from.clone().unwrap_or_else(|| "target".into());
    let to = match &args.to {
        Some(s) => s.clone(),
        None => format!("hybrid/{}", first_source(config)?),
    };
    let session = Session::open(config)?;
    let (a, b) = (
        load_adapter(config, &from).code(DATA)?,
        load_adapter(config, &to).code(DATA)?,
    );
    let points = interpolation_sweep(
        &session.base,
        &a,
        &b,
        &alpha_grid(args.steps),
        session.target_split(),
        session.test_pool(),
    )
    .code(MERGE_EVAL)?;
    let csv = sweep_csv(&points);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.output_dir.join("tables/sweep.csv"));
    write_atomic(&out, csv.as_bytes()).code(MERGE_EVAL)?;
    print!("{csv}");
    Ok(())
}
