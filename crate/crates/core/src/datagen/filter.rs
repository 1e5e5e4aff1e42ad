use std::collections::BTreeSet;

use super::types::DomainDataset;
use crate::error::{Error, Result};

pub const FIVE_CORE: usize = 5;

/// Iteratively drops users and items with fewer than five interactions
/// until every survivor has at least five.
pub fn five_core_filter(dataset: &DomainDataset) -> Result<DomainDataset> {
    k_core_filter(dataset, FIVE_CORE)
}

pub fn k_core_filter(dataset: &DomainDataset, k: usize) -> Result<DomainDataset> {
    let mut current = dataset.clone();
    loop {
        let counts = current.item_counts();
        let weak_items: BTreeSet<_> = counts.iter().filter(|&(_, &c)| c < k).map(|(&item, _)| item).collect();
        let before_users = current.users.len();
        let before_interactions = current.interaction_count();

        for user in &mut current.users {
            user.interactions.retain(|i| !weak_items.contains(&i.item));
        }
        current.users.retain(|u| u.len() >= k);

        if current.users.len() == before_users && current.interaction_count() == before_interactions {
            break;
        }
    }
    if current.users.is_empty() {
        return Err(Error::EmptyDataset {
            domain: current.domain.to_string(),
        });
    }
    let alive: BTreeSet<_> = current.item_counts().into_keys().collect();
    current.catalog.0.retain(|item, _| alive.contains(item));
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::types::{Catalog, DomainId, UserSequence};

    fn catalog(n: u32) -> Catalog {
        let mut c = Catalog::default();
        for i in 0..n {
            c.insert(i, format!("item {i}"));
        }
        c
    }

    /// Six users who each touch items 0..5: every item has six interactions.
    fn core_users() -> Vec<UserSequence> {
        (0..6)
            .map(|u| UserSequence::from_items(format!("u{u}"), &[0, 1, 2, 3, 4]))
            .collect()
    }

    fn dataset(users: Vec<UserSequence>, n_items: u32) -> DomainDataset {
        DomainDataset {
            domain: DomainId::new("t"),
            users,
            catalog: catalog(n_items),
        }
    }

    #[test]
    fn five_core_is_fixpoint() {
        let d = dataset(core_users(), 5);
        assert_eq!(five_core_filter(&d).unwrap(), d);
    }

    #[test]
    fn short_user_removed_items_kept() {
        let mut users = core_users();
        users.push(UserSequence::from_items("short", &[0, 1, 2]));
        let d = dataset(users, 5);
        let f = five_core_filter(&d).unwrap();
        assert_eq!(f.users.len(), 6);
        assert!(f.users.iter().all(|u| u.user_id != "short"));
        assert_eq!(f.catalog.len(), 5);
    }

    #[test]
    fn removal_cascades_to_items() {
        // Item 5 is touched by exactly five users, one of whom has only four
        // interactions. Dropping that user leaves item 5 with four.
        let mut users: Vec<UserSequence> = (0..4)
            .map(|u| UserSequence::from_items(format!("u{u}"), &[0, 1, 2, 3, 4, 5]))
            .collect();
        users.push(UserSequence::from_items("u4", &[0, 1, 2, 3, 4]));
        users.push(UserSequence::from_items("u5", &[0, 1, 2, 3, 4]));
        users.push(UserSequence::from_items("weak", &[5, 0, 1, 2]));
        let d = dataset(users, 6);
        let f = five_core_filter(&d).unwrap();

        // brute-force recount
        let counts = f.item_counts();
        assert!(!counts.contains_key(&5));
        assert!(counts.values().all(|&c| c >= 5));
        assert!(f.users.iter().all(|u| u.len() >= 5));
        assert!(!f.catalog.contains(5));
        assert_eq!(f.users.len(), 6);
    }

    #[test]
    fn empties_entirely() {
        let d = dataset(vec![UserSequence::from_items("a", &[0, 1])], 2);
        assert!(matches!(five_core_filter(&d), Err(Error::EmptyDataset { .. })));
    }
}
