//! Optimisation loops: base pretraining, adapter fine-tuning and the
//! all-data baseline, with validation-based early stopping.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datagen::{cap_per_domain, CandidatePool, Example, SplitDataset};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::numkernel::RngStream;
use crate::seqmodel::{
    base_loss_and_grads, loss_and_grads_with_dropout, mean_loss, Adaptation, BaseModel, LoraAdapter, LoraConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Optimizer::Sgd => 1e-2,
            Optimizer::Adam => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: Optimizer,
    /// Drives shuffling and dropout masks.
    pub seed: u64,
    /// Seed for the adapter's initial `A` factors.
    pub init_seed: u64,
    pub per_domain_cap: Option<usize>,
    pub lora: LoraConfig,
    /// Learning-rate multiplier for the `A` factors relative to `B`. The
    /// default 0 keeps every `A` at the shared initialization, so sibling
    /// adapters differ only in `B` and factor averaging is exact.
    pub lora_a_lr_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: Optimizer::Adam.default_learning_rate(),
            batch_size: 64,
            max_epochs: 50,
            patience: 5,
            optimizer: Optimizer::Adam,
            seed: 0,
            init_seed: 0,
            per_domain_cap: None,
            lora: LoraConfig::default(),
            lora_a_lr_scale: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience < 1 {
            return Err(Error::InvalidArgument("patience must be at least 1".into()));
        }
        if !(self.lora_a_lr_scale >= 0.0 && self.lora_a_lr_scale.is_finite()) {
            return Err(Error::InvalidArgument("lora_a_lr_scale must be finite and >= 0".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch (epoch 1 first).
    pub train_loss: Vec<f64>,
    pub validation_metric_name: String,
    /// Validation metric after each epoch, starting with epoch 0 (before any
    /// update). Empty when trained without validation.
    pub validation_trace: Vec<f64>,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub wall_time_secs: f64,
    pub n_train: usize,
}

/// Held-out data used for early stopping.
#[derive(Clone, Copy)]
pub struct Validation<'a> {
    pub split: &'a SplitDataset,
    pub pool: &'a CandidatePool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= lr[i] * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

enum Stepper {
    Sgd,
    Adam(Adam),
}

impl Stepper {
    fn new(opt: Optimizer, n: usize) -> Self {
        match opt {
            Optimizer::Sgd => Stepper::Sgd,
            Optimizer::Adam => Stepper::Adam(Adam::new(n)),
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: &[f64]) {
        match self {
            Stepper::Sgd => {
                for ((p, g), l) in params.iter_mut().zip(grad).zip(lr) {
                    *p -= l * g;
                }
            }
            Stepper::Adam(a) => a.step(params, grad, lr),
        }
    }
}

/// Mini-batch loop over flat parameters with early stopping on a
/// higher-is-better validation score.
fn optimize<G, V>(
    mut params: Vec<f64>,
    lr_scale: Option<&[f64]>,
    examples: &[Example],
    config: &TrainConfig,
    metric_name: &str,
    mut grad_fn: G,
    mut validate: Option<V>,
) -> Result<(Vec<f64>, TrainReport)>
where
    G: FnMut(&[f64], &[Example], &mut RngStream) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
{
    config.validate()?;
    let start = Instant::now();
    let root = RngStream::new(config.seed);
    let mut stepper = Stepper::new(config.optimizer, params.len());
    let lr: Vec<f64> = match lr_scale {
        Some(s) => s.iter().map(|k| k * config.learning_rate).collect(),
        None => vec![config.learning_rate; params.len()],
    };
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_metric_name: metric_name.to_string(),
        validation_trace: Vec::new(),
        best_epoch: 0,
        best_metric: None,
        wall_time_secs: 0.0,
        n_train: examples.len(),
    };
    let mut best = params.clone();
    if let Some(v) = validate.as_mut() {
        let m0 = v(&params)?;
        report.validation_trace.push(m0);
        report.best_metric = Some(m0);
    } else {
        log::warn!("no validation data; training for a fixed {} epochs", config.max_epochs);
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut stale = 0;
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.max_epochs {
        let mut rng = root.split(&format!("epoch/{epoch}"));
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let (loss, grad) = grad_fn(&params, &batch, &mut rng)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            stepper.step(&mut params, &grad, &lr);
        }
        let epoch_loss = total / examples.len() as f64;
        report.train_loss.push(epoch_loss);
        log::debug!("epoch {epoch}: train loss {epoch_loss:.5}");

        match validate.as_mut() {
            Some(v) => {
                let m = v(&params)?;
                if !m.is_finite() {
                    return Err(Error::Divergence { epoch, loss: m });
                }
                report.validation_trace.push(m);
                if m > report.best_metric.expect("set at epoch 0") {
                    report.best_metric = Some(m);
                    report.best_epoch = epoch;
                    best.clone_from(&params);
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= config.patience {
                        break;
                    }
                }
            }
            None => {
                report.best_epoch = epoch;
                best.clone_from(&params);
            }
        }
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((best, report))
}

/// Trains every base parameter on next-item prediction. Early stopping uses
/// the negated mean validation loss.
pub fn pretrain_base(
    init: BaseModel,
    corpus: &[Example],
    validation: Option<&[Example]>,
    config: &TrainConfig,
) -> Result<(BaseModel, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("pretraining corpus is empty".into()));
    }
    let template = init.clone();
    let with = |theta: &[f64]| -> Result<BaseModel> {
        let mut m = template.clone();
        m.set_flat(theta)?;
        Ok(m)
    };
    let grad_fn = |theta: &[f64], batch: &[Example], _: &mut RngStream| {
        let (loss, g) = base_loss_and_grads(&with(theta)?, batch)?;
        Ok((loss, g.to_flat()))
    };
    let validate = validation
        .filter(|v| !v.is_empty())
        .map(|v| move |theta: &[f64]| Ok(-mean_loss(&with(theta)?, Adaptation::None, v)?));
    let (best, report) = optimize(init.to_flat(), None, corpus, config, "neg_nll", grad_fn, validate)?;
    Ok((with(&best)?, report))
}

/// Fine-tunes a fresh adapter on `trainset`; the base model is only read.
/// Early stopping uses MRR@5 on the validation candidates.
pub fn train_adapter(
    base: &BaseModel,
    trainset: &[Example],
    validation: Option<Validation<'_>>,
    config: &TrainConfig,
) -> Result<(LoraAdapter, TrainReport)> {
    if trainset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut init = LoraAdapter::init(base, &config.lora, &mut RngStream::new(config.init_seed))?;
    init.meta.training_seed = Some(config.seed);
    let template = init.clone();
    let grad_fn = |theta: &[f64], batch: &[Example], rng: &mut RngStream| {
        let adapter = template.with_flat(theta)?;
        let (loss, g) = loss_and_grads_with_dropout(base, &adapter, batch, rng)?;
        Ok((loss, g.to_flat()))
    };
    let validation = validation.filter(|v| !v.split.users.is_empty());
    let validate = validation.map(|v| {
        |theta: &[f64]| {
            let adapter = template.with_flat(theta)?;
            Ok(
                evaluate(base, Adaptation::Lora(&adapter), v.split, v.pool, "validation")?
                    .aggregates
                    .mrr5,
            )
        }
    });
    let mut scale = Vec::with_capacity(init.param_count());
    for f in &init.layers {
        scale.extend(std::iter::repeat_n(1.0, f.b.len()));
        scale.extend(std::iter::repeat_n(config.lora_a_lr_scale, f.a.len()));
    }
    let (best, report) = optimize(
        init.to_flat(),
        Some(&scale),
        trainset,
        config,
        "mrr@5",
        grad_fn,
        validate,
    )?;
    Ok((template.with_flat(&best)?, report))
}

/// The "all data merging" baseline: one adapter on the union of every
/// domain's training examples (each domain capped at `per_domain_cap`).
pub fn train_all_data_merging(
    base: &BaseModel,
    splits: &[&SplitDataset],
    validation: Option<Validation<'_>>,
    config: &TrainConfig,
) -> Result<(LoraAdapter, TrainReport)> {
    let union = all_data_examples(splits, config);
    let (mut adapter, report) = train_adapter(base, &union, validation, config)?;
    adapter.meta.domain_lineage = splits.iter().map(|s| s.domain.to_string()).collect();
    Ok((adapter, report))
}

/// Union of the capped training examples of every split.
pub fn all_data_examples(splits: &[&SplitDataset], config: &TrainConfig) -> Vec<Example> {
    let mut rng = RngStream::new(config.seed).split("all-data-cap");
    let mut union = Vec::new();
    for s in splits {
        union.extend(cap_per_domain(s.train_examples(), config.per_domain_cap, &mut rng));
    }
    union
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::checkpoint_hash;
    use crate::datagen::{DomainId, Example};

    fn ex(prefix: &[u32], target: u32) -> Example {
        Example {
            domain: DomainId::from("d"),
            user_id: "u".into(),
            prefix: prefix.to_vec(),
            target,
        }
    }

    /// A deterministic cyclic corpus over `n` items: after `i` comes `i+1`.
    fn cyclic(n: u32, len: usize) -> Vec<Example> {
        (0..n)
            .flat_map(|s| (1..len).map(move |t| (s, t)))
            .map(|(s, t)| {
                let seq: Vec<u32> = (0..=t as u32).map(|k| (s + k) % n).collect();
                ex(&seq[..t], seq[t])
            })
            .collect()
    }

    #[test]
    fn singleton_vocab_has_zero_loss() {
        let base = BaseModel::init(1, 4, 4, &mut RngStream::new(1));
        let loss = mean_loss(&base, Adaptation::None, &[ex(&[0, 0], 0)]).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn pretraining_is_deterministic_and_learns() {
        let corpus = cyclic(6, 4);
        let cfg = TrainConfig {
            max_epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let init = BaseModel::init(6, 8, 4, &mut RngStream::new(2));
        let (a, ra) = pretrain_base(init.clone(), &corpus, Some(&corpus), &cfg).unwrap();
        let (b, _) = pretrain_base(init, &corpus, Some(&corpus), &cfg).unwrap();
        assert_eq!(checkpoint_hash(&a), checkpoint_hash(&b));
        let best = -ra.best_metric.unwrap();
        assert!(best < 6f64.ln(), "best loss {best}");
    }

    #[test]
    fn adapter_training_leaves_base_untouched() {
        let base = BaseModel::init(6, 8, 4, &mut RngStream::new(3));
        let before = checkpoint_hash(&base);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        let (adapter, report) = train_adapter(&base, &cyclic(6, 4), None, &cfg).unwrap();
        assert_eq!(checkpoint_hash(&base), before);
        assert_eq!(report.train_loss.len(), 3);
        assert!(adapter.layers.iter().any(|f| f.b.frobenius_norm() > 0.0));
    }

    #[test]
    fn zero_epochs_gives_identity_adapter() {
        let base = BaseModel::init(6, 8, 4, &mut RngStream::new(3));
        let cfg = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let (adapter, _) = train_adapter(&base, &cyclic(6, 4), None, &cfg).unwrap();
        assert!(adapter.layers.iter().all(|f| f.b.frobenius_norm() == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = BaseModel::init(6, 8, 4, &mut RngStream::new(3));
        for cfg in [
            TrainConfig {
                learning_rate: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                patience: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(train_adapter(&base, &cyclic(6, 4), None, &cfg).is_err());
        }
        assert!(train_adapter(&base, &[], None, &TrainConfig::default()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let base = BaseModel::init(6, 8, 4, &mut RngStream::new(3));
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd,
            learning_rate: 1e300,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        let err = train_adapter(&base, &cyclic(6, 4), None, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
