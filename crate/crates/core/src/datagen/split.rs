use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::types::{Catalog, DomainDataset, DomainId, Example, ItemId};
use crate::error::{Error, Result};

/// A user after leave-one-out splitting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user_id: String,
    pub train: Vec<ItemId>,
    pub valid_target: ItemId,
    pub test_target: ItemId,
}

impl SplitUser {
    /// Original sequence: `train ‖ valid ‖ test`.
    pub fn full_sequence(&self) -> Vec<ItemId> {
        let mut s = self.train.clone();
        s.push(self.valid_target);
        s.push(self.test_target);
        s
    }

    pub fn interacted(&self) -> BTreeSet<ItemId> {
        self.full_sequence().into_iter().collect()
    }

    pub fn validation_prefix(&self) -> &[ItemId] {
        &self.train
    }

    pub fn test_prefix(&self) -> Vec<ItemId> {
        let mut p = self.train.clone();
        p.push(self.valid_target);
        p
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub domain: DomainId,
    pub users: Vec<SplitUser>,
    pub catalog: Catalog,
}

/// Which held-out item a set of examples or candidates refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeldOut {
    Validation,
    Test,
}

impl SplitDataset {
    /// Next-item examples from every position of every training sequence.
    pub fn train_examples(&self) -> Vec<Example> {
        let mut out = Vec::new();
        for user in &self.users {
            for t in 1..user.train.len() {
                out.push(Example {
                    domain: self.domain.clone(),
                    user_id: user.user_id.clone(),
                    prefix: user.train[..t].to_vec(),
                    target: user.train[t],
                });
            }
        }
        out
    }

    pub fn held_out_examples(&self, which: HeldOut) -> Vec<Example> {
        self.users
            .iter()
            .map(|u| match which {
                HeldOut::Validation => Example {
                    domain: self.domain.clone(),
                    user_id: u.user_id.clone(),
                    prefix: u.train.clone(),
                    target: u.valid_target,
                },
                HeldOut::Test => Example {
                    domain: self.domain.clone(),
                    user_id: u.user_id.clone(),
                    prefix: u.test_prefix(),
                    target: u.test_target,
                },
            })
            .collect()
    }

    pub fn user(&self, user_id: &str) -> Option<&SplitUser> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

/// Last item → test, second-to-last → validation, the rest → train.
pub fn leave_one_out_split(dataset: &DomainDataset) -> Result<SplitDataset> {
    let users = dataset
        .users
        .iter()
        .map(|u| {
            let items = u.items();
            let n = items.len();
            if n < 3 {
                return Err(Error::SequenceTooShort {
                    user: u.user_id.clone(),
                    len: n,
                    min: 3,
                });
            }
            Ok(SplitUser {
                user_id: u.user_id.clone(),
                train: items[..n - 2].to_vec(),
                valid_target: items[n - 2],
                test_target: items[n - 1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitDataset {
        domain: dataset.domain.clone(),
        users,
        catalog: dataset.catalog.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::types::UserSequence;

    fn ds(seqs: &[&[ItemId]]) -> DomainDataset {
        let mut catalog = Catalog::default();
        for s in seqs {
            for &i in *s {
                catalog.insert(i, format!("t{i}"));
            }
        }
        DomainDataset {
            domain: DomainId::new("d0"),
            users: seqs
                .iter()
                .enumerate()
                .map(|(k, s)| UserSequence::from_items(format!("u{k}"), s))
                .collect(),
            catalog,
        }
    }

    #[test]
    fn five_item_split() {
        let s = leave_one_out_split(&ds(&[&[1, 2, 3, 4, 5]])).unwrap();
        let u = &s.users[0];
        assert_eq!(u.train, vec![1, 2, 3]);
        assert_eq!(u.valid_target, 4);
        assert_eq!(u.test_target, 5);
    }

    #[test]
    fn minimal_split() {
        let s = leave_one_out_split(&ds(&[&[7, 8, 9]])).unwrap();
        assert_eq!(s.users[0].train, vec![7]);
        assert_eq!(s.users[0].valid_target, 8);
        assert_eq!(s.users[0].test_target, 9);
        assert!(s.train_examples().is_empty());
    }

    #[test]
    fn rejects_short_with_user_id() {
        let err = leave_one_out_split(&ds(&[&[1, 2, 3], &[4, 5]])).unwrap_err();
        match err {
            Error::SequenceTooShort { user, len, .. } => {
                assert_eq!(user, "u1");
                assert_eq!(len, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn examples_cover_positions() {
        let s = leave_one_out_split(&ds(&[&[1, 2, 3, 4, 5, 6]])).unwrap();
        let ex = s.train_examples();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[2].prefix, vec![1, 2, 3]);
        assert_eq!(ex[2].target, 4);
        let test = s.held_out_examples(HeldOut::Test);
        assert_eq!(test[0].prefix, vec![1, 2, 3, 4, 5]);
        assert_eq!(test[0].target, 6);
    }
}
