use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::split::{HeldOut, SplitDataset};
use super::types::{Catalog, ItemId, UserSequence};
use crate::error::{Error, Result};
use crate::numkernel::{derive_seed, RngStream};

pub const DEFAULT_NEGATIVES: usize = 29;

/// One ground-truth item plus sampled non-interacted negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user_id: String,
    pub ground_truth: ItemId,
    pub negatives: Vec<ItemId>,
    /// All candidates in presentation order (shuffled under `seed`).
    pub order: Vec<ItemId>,
    pub seed: u64,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }
}

/// Uniformly samples `k_neg` catalog items the user never interacted with.
pub fn sample_candidates(
    user_id: &str,
    interacted: &BTreeSet<ItemId>,
    ground_truth: ItemId,
    catalog: &Catalog,
    k_neg: usize,
    rng: &mut RngStream,
) -> Result<CandidateSet> {
    let eligible: Vec<ItemId> = catalog
        .items()
        .filter(|i| !interacted.contains(i) && *i != ground_truth)
        .collect();
    if eligible.len() < k_neg {
        return Err(Error::InsufficientCandidates {
            user: user_id.to_string(),
            available: eligible.len(),
            requested: k_neg,
        });
    }
    let seed = rng.seed();
    let mut picks = rng.sample_indices(eligible.len(), k_neg);
    picks.sort_unstable();
    let negatives: Vec<ItemId> = picks.into_iter().map(|i| eligible[i]).collect();
    let mut order = negatives.clone();
    order.push(ground_truth);
    rng.shuffle(&mut order);
    Ok(CandidateSet {
        user_id: user_id.to_string(),
        ground_truth,
        negatives,
        order,
        seed,
    })
}

/// Candidates for a raw sequence whose last item is the ground truth.
pub fn sample_candidates_for_sequence(
    user: &UserSequence,
    catalog: &Catalog,
    k_neg: usize,
    rng: &mut RngStream,
) -> Result<CandidateSet> {
    let last = user
        .interactions
        .last()
        .ok_or_else(|| Error::InvalidArgument(format!("user {} has no interactions", user.user_id)))?;
    sample_candidates(&user.user_id, &user.item_set(), last.item, catalog, k_neg, rng)
}

/// Candidate sets for every user of a split, frozen by `seed` so that every
/// compared method ranks the same items.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub held_out: HeldOut,
    pub seed: u64,
    pub sets: BTreeMap<String, CandidateSet>,
}

impl CandidatePool {
    pub fn get(&self, user_id: &str) -> Option<&CandidateSet> {
        self.sets.get(user_id)
    }
}

pub fn freeze_candidates(split: &SplitDataset, held_out: HeldOut, k_neg: usize, seed: u64) -> Result<CandidatePool> {
    let tag = match held_out {
        HeldOut::Validation => "valid",
        HeldOut::Test => "test",
    };
    let mut sets = BTreeMap::new();
    for user in &split.users {
        let mut rng = RngStream::new(derive_seed(seed, &format!("{tag}/{}", user.user_id)));
        let truth = match held_out {
            HeldOut::Validation => user.valid_target,
            HeldOut::Test => user.test_target,
        };
        let set = sample_candidates(
            &user.user_id,
            &user.interacted(),
            truth,
            &split.catalog,
            k_neg,
            &mut rng,
        )?;
        sets.insert(user.user_id.clone(), set);
    }
    Ok(CandidatePool { held_out, seed, sets })
}
