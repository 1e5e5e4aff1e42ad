use weaverec::analysis::{estimate_h_divergence, Featurizer, ProbeConfig};
use weaverec::datagen::{generate_synthetic, ItemId, SyntheticConfig};
use weaverec::evaluator::paired_t_test;
use weaverec::RngStream;

const SEEDS: u64 = 5;

fn config(rho: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        rho,
        seed,
        users_per_domain: 300,
        items_per_domain: 60,
        generic_users: 0,
        ..SyntheticConfig::default()
    }
}

/// Raw user sequences of the first two domains.
fn pair(rho: f64, seed: u64) -> (Vec<Vec<ItemId>>, Vec<Vec<ItemId>>) {
    let corpus = generate_synthetic(&config(rho, seed)).unwrap();
    let seqs = |n: usize| corpus.domains[n].users.iter().map(|u| u.items()).collect::<Vec<_>>();
    (seqs(0), seqs(1))
}

fn mean_probe_accuracy(rho: f64) -> f64 {
    let f = Featurizer::LocalIndex { items_per_domain: 60 };
    let total: f64 = (0..SEEDS)
        .map(|seed| {
            let (a, b) = pair(rho, seed);
            estimate_h_divergence(("d0", &a), ("d1", &b), f, &ProbeConfig::default(), seed)
                .unwrap()
                .accuracy
        })
        .sum();
    total / SEEDS as f64
}

#[test]
fn correlated_domains_are_harder_to_tell_apart() {
    let acc: Vec<f64> = [0.0, 0.4, 0.8].iter().map(|&rho| mean_probe_accuracy(rho)).collect();
    assert!(acc[0] >= acc[1] && acc[1] >= acc[2], "{acc:?}");
    assert!(acc[0] > acc[2], "{acc:?}");
}

#[test]
fn divergence_estimate_is_symmetric() {
    let f = Featurizer::LocalIndex { items_per_domain: 60 };
    let probe = ProbeConfig::default();
    let mut total = 0.0;
    for seed in 0..SEEDS {
        let (a, b) = pair(0.3, seed);
        let ab = estimate_h_divergence(("d0", &a), ("d1", &b), f, &probe, seed).unwrap();
        let ba = estimate_h_divergence(("d1", &b), ("d0", &a), f, &probe, seed).unwrap();
        assert!((0.0..=2.0).contains(&ab.d_hat) && (0.0..=2.0).contains(&ba.d_hat));
        total += (ab.d_hat - ba.d_hat).abs();
    }
    assert!(total / SEEDS as f64 <= 0.15, "mean asymmetry {}", total / SEEDS as f64);
}

#[test]
fn paired_t_test_is_calibrated_under_the_null() {
    let mut rng = RngStream::new(42);
    let trials = 2000;
    let rejections = (0..trials)
        .filter(|_| {
            let diffs: Vec<f64> = (0..30).map(|_| rng.normal(0.0, 1.0)).collect();
            paired_t_test(&diffs) < 0.05
        })
        .count();
    let rate = rejections as f64 / trials as f64;
    // Binomial(2000, 0.05) has sd of about 0.005.
    assert!((rate - 0.05).abs() < 0.02, "false positive rate {rate}");
}

#[test]
fn paired_t_test_detects_a_real_shift() {
    let mut rng = RngStream::new(7);
    let diffs: Vec<f64> = (0..200).map(|_| rng.normal(0.3, 1.0)).collect();
    assert!(paired_t_test(&diffs) < 1e-3);
}
