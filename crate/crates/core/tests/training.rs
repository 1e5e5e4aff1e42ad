use weaverec::checkpoint::checkpoint_hash;
use weaverec::datagen::{freeze_candidates, prepare_synthetic, HeldOut, PreparedCorpus, SyntheticConfig};
use weaverec::evaluator::evaluate;
use weaverec::seqmodel::mean_loss;
use weaverec::trainer::{pretrain_base, train_adapter, TrainConfig, Validation};
use weaverec::{Adaptation, BaseModel, RngStream};

fn small_world(seed: u64) -> PreparedCorpus {
    prepare_synthetic(&SyntheticConfig {
        users_per_domain: 120,
        items_per_domain: 40,
        generic_users: 300,
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn pretrained(world: &PreparedCorpus, seed: u64) -> BaseModel {
    let init = BaseModel::init(world.vocab_size, 16, 20, &mut RngStream::new(seed));
    let corpus = world.generic.as_ref().unwrap().train_examples();
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        max_epochs: 3,
        seed,
        ..TrainConfig::default()
    };
    pretrain_base(init, &corpus, None, &cfg).unwrap().0
}

#[test]
fn early_stopping_returns_the_best_epoch() {
    let world = small_world(1);
    let base = pretrained(&world, 1);
    let split = &world.domains[0];
    let pool = freeze_candidates(split, HeldOut::Validation, 19, 0).unwrap();
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let validation = Validation { split, pool: &pool };
    let (adapter, report) = train_adapter(&base, &split.train_examples(), Some(validation), &cfg).unwrap();
    let best = report.best_metric.unwrap();
    let trace = &report.validation_trace;
    assert_eq!(trace[report.best_epoch], best);
    assert!(trace[report.best_epoch..].iter().all(|&m| m <= best), "{trace:?}");
    assert!(trace.iter().all(|&m| m <= best));
    let again = evaluate(&base, Adaptation::Lora(&adapter), split, &pool, "check").unwrap();
    assert_eq!(again.aggregates.mrr5, best);
}

#[test]
fn first_epoch_lowers_training_loss() {
    let mut improved = 0;
    for seed in 0..5 {
        let world = small_world(seed);
        let base = pretrained(&world, seed);
        let examples = world.domains[0].train_examples();
        let before = mean_loss(&base, Adaptation::None, &examples).unwrap();
        let cfg = TrainConfig {
            max_epochs: 1,
            seed,
            init_seed: seed,
            ..TrainConfig::default()
        };
        let (adapter, _) = train_adapter(&base, &examples, None, &cfg).unwrap();
        let after = mean_loss(&base, Adaptation::Lora(&adapter), &examples).unwrap();
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 3, "{improved}/5 seeds improved");
}

#[test]
fn adapter_training_never_touches_the_base() {
    let world = small_world(2);
    let base = pretrained(&world, 2);
    let before = checkpoint_hash(&base);
    for d in &world.domains {
        let cfg = TrainConfig {
            max_epochs: 2,
            lora_a_lr_scale: 1.0,
            ..TrainConfig::default()
        };
        train_adapter(&base, &d.train_examples(), None, &cfg).unwrap();
        assert_eq!(checkpoint_hash(&base), before);
    }
}
