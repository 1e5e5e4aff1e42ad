use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::split::SplitDataset;
use super::types::{DomainId, Example};
use crate::error::{Error, Result};
use crate::numkernel::RngStream;

/// How a hybrid training set combines target and source examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MixMode {
    /// Every target example, plus each source example independently with
    /// probability `min(1, λ·|target| / |source|)`, so the expected
    /// source:target ratio is `λ:1`.
    Ratio(f64),
    /// Every example of both sets.
    FullUnion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSet {
    pub examples: Vec<Example>,
    pub n_target: usize,
    pub n_source: usize,
}

pub fn mix_domains(
    target: &SplitDataset,
    source: &SplitDataset,
    mode: MixMode,
    rng: &mut RngStream,
) -> Result<MixedSet> {
    mix_examples(target.train_examples(), source.train_examples(), mode, rng)
}

pub fn mix_examples(
    target: Vec<Example>,
    source: Vec<Example>,
    mode: MixMode,
    rng: &mut RngStream,
) -> Result<MixedSet> {
    let n_target = target.len();
    let mut examples = target;
    let chosen: Vec<Example> = match mode {
        MixMode::FullUnion => source,
        MixMode::Ratio(lambda) => {
            if !lambda.is_finite() || lambda < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "mixing ratio must be >= 0, got {lambda}"
                )));
            }
            if source.is_empty() || lambda == 0.0 {
                Vec::new()
            } else {
                let p = (lambda * n_target as f64 / source.len() as f64).min(1.0);
                source.into_iter().filter(|_| rng.bernoulli(p)).collect()
            }
        }
    };
    let n_source = chosen.len();
    examples.extend(chosen);
    rng.shuffle(&mut examples);
    Ok(MixedSet {
        examples,
        n_target,
        n_source,
    })
}

/// Keeps at most `cap` examples per domain, chosen uniformly at random.
pub fn cap_per_domain(examples: Vec<Example>, cap: Option<usize>, rng: &mut RngStream) -> Vec<Example> {
    let Some(cap) = cap else {
        return examples;
    };
    let mut by_domain: BTreeMap<DomainId, Vec<Example>> = BTreeMap::new();
    for ex in examples {
        by_domain.entry(ex.domain.clone()).or_default().push(ex);
    }
    let mut out = Vec::new();
    for (_, mut group) in by_domain {
        if group.len() > cap {
            let mut keep = rng.sample_indices(group.len(), cap);
            keep.sort_unstable();
            group = keep.into_iter().map(|i| group[i].clone()).collect();
        }
        out.extend(group);
    }
    rng.shuffle(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(domain: &str, n: usize) -> Vec<Example> {
        (0..n)
            .map(|i| Example {
                domain: DomainId::new(domain),
                user_id: format!("{domain}-{i}"),
                prefix: vec![i as u32],
                target: i as u32 + 1,
            })
            .collect()
    }

    #[test]
    fn zero_ratio_is_target_only() {
        let m = mix_examples(
            examples("t", 50),
            examples("s", 50),
            MixMode::Ratio(0.0),
            &mut RngStream::new(1),
        )
        .unwrap();
        assert_eq!(m.n_source, 0);
        assert_eq!(m.examples.len(), 50);
        assert!(m.examples.iter().all(|e| e.domain.as_str() == "t"));
    }

    #[test]
    fn equal_mixing() {
        let m = mix_examples(
            examples("t", 1000),
            examples("s", 1000),
            MixMode::Ratio(1.0),
            &mut RngStream::new(3),
        )
        .unwrap();
        assert_eq!(m.examples.len(), 2000);
        assert_eq!(m.n_target, 1000);
        assert_eq!(m.n_source, 1000);
        let mut target_users: Vec<_> = m
            .examples
            .iter()
            .filter(|e| e.domain.as_str() == "t")
            .map(|e| e.user_id.clone())
            .collect();
        target_users.sort();
        target_users.dedup();
        assert_eq!(target_users.len(), 1000);
    }

    #[test]
    fn half_ratio_is_binomial() {
        let sigma = (1000.0f64 * 0.5 * 0.5).sqrt();
        for seed in 0..50 {
            let m = mix_examples(
                examples("t", 1000),
                examples("s", 1000),
                MixMode::Ratio(0.5),
                &mut RngStream::new(seed),
            )
            .unwrap();
            assert!(
                (m.n_source as f64 - 500.0).abs() <= 3.0 * sigma,
                "seed {seed}: {}",
                m.n_source
            );
        }
    }

    #[test]
    fn negative_ratio_rejected() {
        assert!(mix_examples(
            examples("t", 1),
            examples("s", 1),
            MixMode::Ratio(-1.0),
            &mut RngStream::new(1)
        )
        .is_err());
    }

    #[test]
    fn shuffle_is_deterministic() {
        let run = || {
            mix_examples(
                examples("t", 20),
                examples("s", 20),
                MixMode::FullUnion,
                &mut RngStream::new(8),
            )
            .unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn cap_limits_each_domain() {
        let mut all = examples("t", 30);
        all.extend(examples("s", 10));
        let capped = cap_per_domain(all, Some(12), &mut RngStream::new(4));
        assert_eq!(capped.iter().filter(|e| e.domain.as_str() == "t").count(), 12);
        assert_eq!(capped.iter().filter(|e| e.domain.as_str() == "s").count(), 10);
    }
}
