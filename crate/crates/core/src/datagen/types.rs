use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub type ItemId = u32;

/// Domain identifier, e.g. `d0` for a target and `d1..dN` for sources.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DomainId(pub String);

impl DomainId {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for DomainId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub item: ItemId,
    pub timestamp: i64,
}

/// One user's chronologically ordered interactions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserSequence {
    pub fn new(user_id: impl Into<String>, interactions: Vec<Interaction>) -> Self {
        Self {
            user_id: user_id.into(),
            interactions,
        }
    }

    /// Builds a sequence with timestamps `0, 1, 2, ...`.
    pub fn from_items(user_id: impl Into<String>, items: &[ItemId]) -> Self {
        let interactions = items
            .iter()
            .enumerate()
            .map(|(t, &item)| Interaction {
                item,
                timestamp: t as i64,
            })
            .collect();
        Self::new(user_id, interactions)
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.interactions.iter().map(|i| i.item).collect()
    }

    pub fn item_set(&self) -> BTreeSet<ItemId> {
        self.interactions.iter().map(|i| i.item).collect()
    }

    pub fn is_chronological(&self) -> bool {
        self.interactions.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

/// Item id → title.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog(pub BTreeMap<ItemId, String>);

impl Catalog {
    pub fn title(&self, item: ItemId) -> Option<&str> {
        self.0.get(&item).map(String::as_str)
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.0.contains_key(&item)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.0.keys().copied()
    }

    pub fn insert(&mut self, item: ItemId, title: impl Into<String>) {
        self.0.insert(item, title.into());
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: DomainId,
    pub users: Vec<UserSequence>,
    pub catalog: Catalog,
}

impl DomainDataset {
    pub fn interaction_count(&self) -> usize {
        self.users.iter().map(UserSequence::len).sum()
    }

    /// Per-item interaction counts over all users.
    pub fn item_counts(&self) -> BTreeMap<ItemId, usize> {
        let mut counts = BTreeMap::new();
        for user in &self.users {
            for i in &user.interactions {
                *counts.entry(i.item).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Every referenced item is in the catalog and every sequence is ordered.
    pub fn is_consistent(&self) -> bool {
        self.users
            .iter()
            .all(|u| u.is_chronological() && u.interactions.iter().all(|i| self.catalog.contains(i.item)))
    }
}

/// A next-item prediction example: predict `target` from `prefix`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub domain: DomainId,
    pub user_id: String,
    pub prefix: Vec<ItemId>,
    pub target: ItemId,
}
