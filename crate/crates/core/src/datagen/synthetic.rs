//! Latent-factor generator for multi-domain interaction sequences.
//!
//! Every domain has the same number of items and item `j` of every domain is
//! tied to the shared factor row `j`. Domain `n`'s item factors are
//! `√ρ · shared + √(1−ρ) · private_n`, so `ρ` dials how alike the domains'
//! transition structure is. Item ids are disjoint across domains: item `j` of
//! domain `n` has global id `n · items_per_domain + j`.
//!
//! A user's first item is drawn from `softmax(γ·pop + τ·taste·f)`, and each
//! next item from `softmax(β·f_prev·f + γ·pop + τ·taste·f)` over the items the
//! user has not touched yet.
//!
//! The optional generic corpus (used to pretrain the shared base model) walks
//! the same catalogs with the pure shared factors, so it teaches the base what
//! the domains have in common without exposing any domain's private structure.

use serde::{Deserialize, Serialize};

use super::types::{Catalog, DomainDataset, DomainId, Interaction, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::numkernel::{dot, gaussian_init, Matrix, RngStream};

pub const GENERIC_DOMAIN: &str = "generic";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_domains: usize,
    pub users_per_domain: usize,
    pub items_per_domain: usize,
    pub latent_dim: usize,
    /// Cross-domain correlation of the item factors, in `[0, 1]`.
    pub rho: f64,
    pub min_len: usize,
    pub max_len: usize,
    /// Weight of the previous-item affinity `f_prev · f`.
    pub affinity_scale: f64,
    /// Weight of the user taste affinity.
    pub taste_scale: f64,
    pub popularity_scale: f64,
    /// Users in the generic pretraining corpus; 0 disables it.
    pub generic_users: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_domains: 3,
            users_per_domain: 500,
            items_per_domain: 100,
            latent_dim: 8,
            rho: 0.3,
            min_len: 6,
            max_len: 15,
            affinity_scale: 4.0,
            taste_scale: 1.0,
            popularity_scale: 1.0,
            generic_users: 1500,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if self.n_domains == 0 || self.items_per_domain == 0 || self.latent_dim == 0 {
            return bad("n_domains, items_per_domain and latent_dim must be positive");
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.max_len > self.items_per_domain {
            return bad("max_len cannot exceed items_per_domain (sequences do not repeat items)");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.n_domains * self.items_per_domain
    }
}

/// The generating parameters, kept so tests can inspect the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentWorld {
    pub shared_factors: Matrix,
    pub shared_popularity: Vec<f64>,
    pub domain_factors: Vec<Matrix>,
    pub domain_popularity: Vec<Vec<f64>>,
}

impl LatentWorld {
    fn sample(config: &SyntheticConfig, rng: &RngStream) -> Self {
        let m = config.items_per_domain;
        let k = config.latent_dim;
        let sigma = 1.0 / (k as f64).sqrt();
        let shared_factors = gaussian_init(m, k, sigma, &mut rng.split("factors/shared"));
        let mut pop_rng = rng.split("popularity/shared");
        let shared_popularity: Vec<f64> = (0..m).map(|_| pop_rng.standard_normal()).collect();

        let a = config.rho.sqrt();
        let b = (1.0 - config.rho).sqrt();
        let mut domain_factors = Vec::new();
        let mut domain_popularity = Vec::new();
        for n in 0..config.n_domains {
            let private = gaussian_init(m, k, sigma, &mut rng.split(&format!("factors/{n}")));
            let mix = shared_factors.scale(a).add(&private.scale(b)).expect("same shape");
            domain_factors.push(mix);
            let mut prng = rng.split(&format!("popularity/{n}"));
            domain_popularity.push(
                shared_popularity
                    .iter()
                    .map(|&s| a * s + b * prng.standard_normal())
                    .collect(),
            );
        }
        Self {
            shared_factors,
            shared_popularity,
            domain_factors,
            domain_popularity,
        }
    }

    /// Next-item logits over local indices for a user without taste, given the
    /// previous local item (`None` for the first draw).
    pub fn transition_logits(&self, config: &SyntheticConfig, domain: usize, prev: Option<usize>) -> Vec<f64> {
        let f = &self.domain_factors[domain];
        let pop = &self.domain_popularity[domain];
        (0..config.items_per_domain)
            .map(|v| {
                let affinity = prev.map_or(0.0, |w| config.affinity_scale * dot(f.row(w), f.row(v)));
                affinity + config.popularity_scale * pop[v]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub world: LatentWorld,
    pub domains: Vec<DomainDataset>,
    pub generic: Option<DomainDataset>,
}

impl SyntheticCorpus {
    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size()
    }

    pub fn domain_index(&self, item: ItemId) -> usize {
        item as usize / self.config.items_per_domain
    }

    pub fn local_index(&self, item: ItemId) -> usize {
        item as usize % self.config.items_per_domain
    }

    pub fn domain(&self, id: &DomainId) -> Option<&DomainDataset> {
        self.domains.iter().find(|d| &d.domain == id)
    }
}

pub fn domain_name(n: usize) -> DomainId {
    DomainId(format!("d{n}"))
}

pub fn item_title(domain: usize, local: usize) -> String {
    format!("D{domain} item {local:03}")
}

fn catalog_for(config: &SyntheticConfig, domain: usize) -> Catalog {
    let m = config.items_per_domain;
    let mut c = Catalog::default();
    for j in 0..m {
        c.insert((domain * m + j) as ItemId, item_title(domain, j));
    }
    c
}

struct Walker<'a> {
    config: &'a SyntheticConfig,
    factors: &'a Matrix,
    popularity: &'a [f64],
}

impl Walker<'_> {
    fn walk(&self, rng: &mut RngStream) -> Vec<usize> {
        let cfg = self.config;
        let m = cfg.items_per_domain;
        let k = cfg.latent_dim;
        let len = rng.range_inclusive(cfg.min_len, cfg.max_len);
        let sigma = 1.0 / (k as f64).sqrt();
        let taste: Vec<f64> = (0..k).map(|_| sigma * rng.standard_normal()).collect();
        let base: Vec<f64> = (0..m)
            .map(|v| cfg.popularity_scale * self.popularity[v] + cfg.taste_scale * dot(&taste, self.factors.row(v)))
            .collect();

        let mut visited = vec![false; m];
        let mut seq = Vec::with_capacity(len);
        let mut weights = vec![0.0; m];
        for step in 0..len {
            let prev = seq.last().copied();
            let mut max = f64::NEG_INFINITY;
            for v in 0..m {
                if visited[v] {
                    weights[v] = f64::NEG_INFINITY;
                    continue;
                }
                let mut logit = base[v];
                if let Some(w) = prev {
                    logit += cfg.affinity_scale * dot(self.factors.row(w), self.factors.row(v));
                }
                weights[v] = logit;
                max = max.max(logit);
            }
            for w in weights.iter_mut() {
                *w = if w.is_finite() { (*w - max).exp() } else { 0.0 };
            }
            let next = rng.weighted_index(&weights);
            debug_assert!(!visited[next], "step {step} revisited an item");
            visited[next] = true;
            seq.push(next);
        }
        seq
    }
}

fn to_sequence(user_id: String, offset: usize, locals: &[usize], rng: &mut RngStream) -> UserSequence {
    let mut t: i64 = 1_600_000_000 + rng.below(1_000_000) as i64;
    let interactions = locals
        .iter()
        .map(|&j| {
            t += 1 + rng.below(86_400) as i64;
            Interaction {
                item: (offset + j) as ItemId,
                timestamp: t,
            }
        })
        .collect();
    UserSequence::new(user_id, interactions)
}

/// Generates every domain (and the generic corpus) deterministically from
/// `config.seed`. Each domain draws from its own named substream, so the
/// data of domain `n` does not depend on how many domains are generated.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let root = RngStream::new(config.seed);
    let world = LatentWorld::sample(config, &root);
    let m = config.items_per_domain;

    let mut domains = Vec::with_capacity(config.n_domains);
    for n in 0..config.n_domains {
        let walker = Walker {
            config,
            factors: &world.domain_factors[n],
            popularity: &world.domain_popularity[n],
        };
        let mut rng = root.split(&format!("users/{n}"));
        let users = (0..config.users_per_domain)
            .map(|u| {
                let locals = walker.walk(&mut rng);
                to_sequence(format!("d{n}-u{u:05}"), n * m, &locals, &mut rng)
            })
            .collect();
        domains.push(DomainDataset {
            domain: domain_name(n),
            users,
            catalog: catalog_for(config, n),
        });
    }

    let generic = (config.generic_users > 0).then(|| {
        let walker = Walker {
            config,
            factors: &world.shared_factors,
            popularity: &world.shared_popularity,
        };
        let mut rng = root.split("users/generic");
        let mut catalog = Catalog::default();
        for n in 0..config.n_domains {
            catalog.0.extend(catalog_for(config, n).0);
        }
        let users = (0..config.generic_users)
            .map(|u| {
                let n = rng.below(config.n_domains);
                let locals = walker.walk(&mut rng);
                to_sequence(format!("g-u{u:05}"), n * m, &locals, &mut rng)
            })
            .collect();
        DomainDataset {
            domain: DomainId::new(GENERIC_DOMAIN),
            users,
            catalog,
        }
    });

    Ok(SyntheticCorpus {
        config: config.clone(),
        world,
        domains,
        generic,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_domains: 2,
            users_per_domain: 40,
            items_per_domain: 30,
            generic_users: 20,
            seed: 1,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_synthetic(&small()).unwrap(),
            generate_synthetic(&small()).unwrap()
        );
    }

    #[test]
    fn full_correlation_gives_identical_transitions() {
        let cfg = SyntheticConfig { rho: 1.0, ..small() };
        let corpus = generate_synthetic(&cfg).unwrap();
        for prev in [None, Some(0), Some(7)] {
            let a = corpus.world.transition_logits(&cfg, 0, prev);
            let b = corpus.world.transition_logits(&cfg, 1, prev);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sequences_are_valid() {
        let corpus = generate_synthetic(&small()).unwrap();
        for d in &corpus.domains {
            assert!(d.is_consistent());
            for u in &d.users {
                assert!((6..=15).contains(&u.len()));
                let set = u.item_set();
                assert_eq!(set.len(), u.len(), "no repeats");
            }
        }
        assert!(corpus.generic.as_ref().unwrap().is_consistent());
    }

    #[test]
    fn domains_do_not_depend_on_domain_count() {
        let two = generate_synthetic(&small()).unwrap();
        let three = generate_synthetic(&SyntheticConfig {
            n_domains: 3,
            ..small()
        })
        .unwrap();
        assert_eq!(two.domains[0], three.domains[0]);
        assert_eq!(two.domains[1], three.domains[1]);
    }

    #[test]
    fn rejects_bad_rho() {
        assert!(generate_synthetic(&SyntheticConfig { rho: 1.5, ..small() }).is_err());
    }
}
