//! Candidate ranking, NDCG@k / MRR@k, per-user reports and paired
//! significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datagen::{CandidatePool, CandidateSet, HeldOut, ItemId, SplitDataset};
use crate::error::{Error, Result};
use crate::seqmodel::{forward, Adaptation, BaseModel};

/// Orders `items` by descending score, ties broken by ascending item id.
pub fn rank_by_scores(items: &[ItemId], scores: &[f64]) -> Vec<ItemId> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    idx.into_iter().map(|i| items[i]).collect()
}

/// Ranks a candidate set with the (optionally adapted) model.
pub fn rank_candidates(
    base: &BaseModel,
    adapt: Adaptation<'_>,
    prefix: &[ItemId],
    candidates: &CandidateSet,
) -> Result<Vec<ItemId>> {
    let logits = forward(base, adapt, prefix)?;
    let scores: Vec<f64> = candidates.order.iter().map(|&i| logits[i as usize]).collect();
    Ok(rank_by_scores(&candidates.order, &scores))
}

/// 1-based rank of `ground_truth`.
pub fn rank_of(ranking: &[ItemId], ground_truth: ItemId) -> Result<usize> {
    ranking
        .iter()
        .position(|&i| i == ground_truth)
        .map(|p| p + 1)
        .ok_or_else(|| Error::InvalidArgument(format!("ground truth {ground_truth} not in ranking")))
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    Ok(())
}

fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

fn mrr_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / rank as f64
    } else {
        0.0
    }
}

/// NDCG@k with a single relevant item (ideal DCG is 1).
pub fn ndcg_at_k(ranking: &[ItemId], ground_truth: ItemId, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(ndcg_from_rank(rank_of(ranking, ground_truth)?, k))
}

pub fn mrr_at_k(ranking: &[ItemId], ground_truth: ItemId, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(mrr_from_rank(rank_of(ranking, ground_truth)?, k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    Ndcg1,
    Ndcg3,
    Ndcg5,
    Mrr5,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ndcg1, Metric::Ndcg3, Metric::Ndcg5, Metric::Mrr5];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ndcg1 => "ndcg@1",
            Metric::Ndcg3 => "ndcg@3",
            Metric::Ndcg5 => "ndcg@5",
            Metric::Mrr5 => "mrr@5",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name.to_ascii_lowercase())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user_id: String,
    pub rank: usize,
    pub ndcg1: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub mrr5: f64,
}

impl UserMetrics {
    pub fn from_rank(user_id: impl Into<String>, rank: usize) -> Self {
        Self {
            user_id: user_id.into(),
            rank,
            ndcg1: ndcg_from_rank(rank, 1),
            ndcg3: ndcg_from_rank(rank, 3),
            ndcg5: ndcg_from_rank(rank, 5),
            mrr5: mrr_from_rank(rank, 5),
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Ndcg1 => self.ndcg1,
            Metric::Ndcg3 => self.ndcg3,
            Metric::Ndcg5 => self.ndcg5,
            Metric::Mrr5 => self.mrr5,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ndcg1: f64,
    pub ndcg3: f64,
    pub ndcg5: f64,
    pub mrr5: f64,
}

impl Aggregates {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::Ndcg1 => self.ndcg1,
            Metric::Ndcg3 => self.ndcg3,
            Metric::Ndcg5 => self.ndcg5,
            Metric::Mrr5 => self.mrr5,
        }
    }

    fn mean_of(users: &[UserMetrics]) -> Self {
        if users.is_empty() {
            return Self::default();
        }
        let n = users.len() as f64;
        let mean = |m: Metric| users.iter().map(|u| u.get(m)).sum::<f64>() / n;
        Self {
            ndcg1: mean(Metric::Ndcg1),
            ndcg3: mean(Metric::Ndcg3),
            ndcg5: mean(Metric::Ndcg5),
            mrr5: mean(Metric::Mrr5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub domain: String,
    pub held_out: HeldOut,
    pub candidate_seed: u64,
    pub seed: Option<u64>,
    pub users: Vec<UserMetrics>,
    pub aggregates: Aggregates,
}

impl EvalReport {
    pub fn from_users(
        method: &str,
        domain: &str,
        held_out: HeldOut,
        candidate_seed: u64,
        users: Vec<UserMetrics>,
    ) -> Self {
        Self {
            method: method.to_string(),
            domain: domain.to_string(),
            held_out,
            candidate_seed,
            seed: None,
            aggregates: Aggregates::mean_of(&users),
            users,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Anything that scores candidate items given a prefix.
pub trait Scorer: Sync {
    fn scores(&self, user_id: &str, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>>;
}

/// The recommender with an optional adaptation.
#[derive(Clone, Copy)]
pub struct ModelScorer<'a> {
    pub base: &'a BaseModel,
    pub adapt: Adaptation<'a>,
}

impl Scorer for ModelScorer<'_> {
    fn scores(&self, _user: &str, prefix: &[ItemId], candidates: &[ItemId]) -> Result<Vec<f64>> {
        let logits = forward(self.base, self.adapt, prefix)?;
        Ok(candidates.iter().map(|&i| logits[i as usize]).collect())
    }
}

/// Scores every user's frozen candidate set; users are processed in parallel
/// and reassembled in split order.
pub fn evaluate_scorer<S: Scorer>(
    scorer: &S,
    split: &SplitDataset,
    pool: &CandidatePool,
    method: &str,
) -> Result<EvalReport> {
    let users = split
        .users
        .par_iter()
        .map(|u| {
            let set = pool
                .get(&u.user_id)
                .ok_or_else(|| Error::InvalidArgument(format!("no frozen candidates for user {}", u.user_id)))?;
            let prefix = match pool.held_out {
                HeldOut::Validation => u.train.clone(),
                HeldOut::Test => u.test_prefix(),
            };
            let scores = scorer.scores(&u.user_id, &prefix, &set.order)?;
            let ranking = rank_by_scores(&set.order, &scores);
            Ok(UserMetrics::from_rank(&u.user_id, rank_of(&ranking, set.ground_truth)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_users(
        method,
        split.domain.as_str(),
        pool.held_out,
        pool.seed,
        users,
    ))
}

pub fn evaluate(
    base: &BaseModel,
    adapt: Adaptation<'_>,
    split: &SplitDataset,
    pool: &CandidatePool,
    method: &str,
) -> Result<EvalReport> {
    evaluate_scorer(&ModelScorer { base, adapt }, split, pool, method)
}

fn paired_values(a: &EvalReport, b: &EvalReport, metric: Metric) -> Result<Vec<f64>> {
    if a.candidate_seed != b.candidate_seed || a.held_out != b.held_out || a.domain != b.domain {
        return Err(Error::ReportMismatch(format!(
            "{} and {} were evaluated under different settings",
            a.method, b.method
        )));
    }
    let b_by_user: BTreeMap<&str, &UserMetrics> = b.users.iter().map(|u| (u.user_id.as_str(), u)).collect();
    if b_by_user.len() != a.users.len() {
        return Err(Error::ReportMismatch("reports cover different users".into()));
    }
    a.users
        .iter()
        .map(|u| {
            b_by_user
                .get(u.user_id.as_str())
                .map(|v| u.get(metric) - v.get(metric))
                .ok_or_else(|| Error::ReportMismatch(format!("user {} missing from {}", u.user_id, b.method)))
        })
        .collect()
}

/// Two-sided p-value of a paired t-test on per-user differences.
///
/// All-zero differences give `p = 1`; a non-zero constant difference has no
/// variance and gives `p = 0`.
pub fn paired_t_test(diffs: &[f64]) -> f64 {
    let n = diffs.len();
    if n == 0 {
        return 1.0;
    }
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    if var == 0.0 {
        return if mean == 0.0 { 1.0 } else { 0.0 };
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n > 1 degrees of freedom");
    (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0)
}

pub fn paired_significance(a: &EvalReport, b: &EvalReport, metric: Metric) -> Result<f64> {
    Ok(paired_t_test(&paired_values(a, b, metric)?))
}

/// Aggregate of `merged` minus aggregate of `target_only`, per metric.
pub fn transfer_gain(merged: &EvalReport, target_only: &EvalReport) -> Result<Aggregates> {
    paired_values(merged, target_only, Metric::Ndcg1)?;
    let (m, t) = (&merged.aggregates, &target_only.aggregates);
    Ok(Aggregates {
        ndcg1: m.ndcg1 - t.ndcg1,
        ndcg3: m.ndcg3 - t.ndcg3,
        ndcg5: m.ndcg5 - t.ndcg5,
        mrr5: m.mrr5 - t.mrr5,
    })
}

/// `method,domain,metric,mean,p_vs_baseline` rows; the p column is empty for
/// the baseline itself or when no baseline is given.
pub fn summary_csv(reports: &[EvalReport], baseline: Option<&EvalReport>) -> Result<String> {
    let mut out = String::from("method,domain,metric,mean,p_vs_baseline\n");
    for r in reports {
        for metric in Metric::ALL {
            let p = match baseline {
                Some(b) if b.method != r.method => format!("{:.6e}", paired_significance(r, b, metric)?),
                _ => String::new(),
            };
            writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.method,
                r.domain,
                metric.name(),
                r.aggregates.get(metric),
                p
            )
            .expect("writing to a String");
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        let ranking = [10, 20, 30, 40, 50, 60];
        assert_eq!(ndcg_at_k(&ranking, 10, 5).unwrap(), 1.0);
        assert!((ndcg_at_k(&ranking, 20, 3).unwrap() - 0.63093).abs() < 1e-5);
        assert_eq!(ndcg_at_k(&ranking, 40, 3).unwrap(), 0.0);
        assert_eq!(mrr_at_k(&ranking, 10, 5).unwrap(), 1.0);
        assert_eq!(mrr_at_k(&ranking, 50, 5).unwrap(), 0.2);
        assert_eq!(mrr_at_k(&ranking, 60, 5).unwrap(), 0.0);
        assert!(mrr_at_k(&ranking, 99, 5).is_err());
        assert!(ndcg_at_k(&ranking, 10, 0).is_err());
    }

    #[test]
    fn ties_break_by_item_id() {
        assert_eq!(rank_by_scores(&[7, 3, 5], &[1.0, 1.0, 2.0]), vec![5, 3, 7]);
    }

    #[test]
    fn shift_invariance() {
        let items = [4, 8, 1, 9, 2];
        let s = [0.3, -1.0, 2.5, 0.3, 0.0];
        let shifted: Vec<f64> = s.iter().map(|x| x + 17.0).collect();
        assert_eq!(rank_by_scores(&items, &s), rank_by_scores(&items, &shifted));
    }

    #[test]
    fn significance_edge_cases() {
        assert_eq!(paired_t_test(&[0.0; 100]), 1.0);
        assert!(paired_t_test(&[0.1; 100]) < 1e-10);
        let p = paired_t_test(&[0.1, -0.2, 0.05, 0.3, -0.1, 0.0, 0.2]);
        assert!(p > 0.05 && p < 1.0);
    }

    #[test]
    fn gain_antisymmetric() {
        let a = EvalReport::from_users("a", "d0", HeldOut::Test, 1, vec![UserMetrics::from_rank("u", 1)]);
        let b = EvalReport::from_users("b", "d0", HeldOut::Test, 1, vec![UserMetrics::from_rank("u", 3)]);
        let ab = transfer_gain(&a, &b).unwrap();
        let ba = transfer_gain(&b, &a).unwrap();
        for m in Metric::ALL {
            assert_eq!(ab.get(m), -ba.get(m));
        }
        assert_eq!(transfer_gain(&a, &a).unwrap(), Aggregates::default());
        let c = EvalReport::from_users("c", "d0", HeldOut::Test, 2, vec![UserMetrics::from_rank("u", 1)]);
        assert!(transfer_gain(&a, &c).is_err());
    }

    #[test]
    fn table_gain_arithmetic() {
        let mut a = EvalReport::from_users("weaverec", "d0", HeldOut::Test, 1, vec![]);
        let mut b = EvalReport::from_users("target", "d0", HeldOut::Test, 1, vec![]);
        a.aggregates.ndcg1 = 0.3897;
        b.aggregates.ndcg1 = 0.3708;
        assert!((transfer_gain(&a, &b).unwrap().ndcg1 - 0.0189).abs() < 1e-12);
    }

    #[test]
    fn csv_shape() {
        let a = EvalReport::from_users("a", "d0", HeldOut::Test, 1, vec![UserMetrics::from_rank("u", 2)]);
        let b = EvalReport::from_users("b", "d0", HeldOut::Test, 1, vec![UserMetrics::from_rank("u", 1)]);
        let csv = summary_csv(&[a.clone(), b], Some(&a)).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
    }
}
