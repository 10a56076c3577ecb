use serde::{Deserialize, Serialize};

use super::{ClickSession, ItemId};
use crate::error::{Error, Result};

/// Per-item click counts and their max-normalized popularity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    counts: Vec<u64>,
    pop: Vec<f64>,
}

impl PopularityTable {
    pub fn from_counts(counts: Vec<u64>) -> Self {
        let max = counts.iter().copied().max().unwrap_or(0);
        let pop = counts
            .iter()
            .map(|&c| if max == 0 { 0.0 } else { c as f64 / max as f64 })
            .collect();
        PopularityTable { counts, pop }
    }

    /// Counts every clicked item in `sequences` over a catalog of `n_items`.
    pub fn from_sequences<'a>(sequences: impl IntoIterator<Item = &'a [ItemId]>, n_items: usize) -> Result<Self> {
        let mut counts = vec![0u64; n_items];
        for seq in sequences {
            for &i in seq {
                *counts.get_mut(i).ok_or(Error::Index {
                    what: "catalog",
                    index: i,
                    len: n_items,
                })? += 1;
            }
        }
        Ok(Self::from_counts(counts))
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn count(&self, item: ItemId) -> u64 {
        self.counts[item]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Normalized popularity in `[0, 1]`.
    pub fn pop(&self, item: ItemId) -> Result<f64> {
        self.pop.get(item).copied().ok_or(Error::Index {
            what: "popularity table",
            index: item,
            len: self.pop.len(),
        })
    }

    pub fn pops(&self) -> &[f64] {
        &self.pop
    }

    /// Items by descending count, ties by smaller id.
    pub fn ranked(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = (0..self.counts.len()).collect();
        items.sort_by(|&a, &b| self.counts[b].cmp(&self.counts[a]).then(a.cmp(&b)));
        items
    }
}

pub fn popularity_stats(train: &[ClickSession], n_items: usize) -> Result<PopularityTable> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training sessions for popularity".into()));
    }
    let items: Vec<Vec<ItemId>> = train.iter().map(ClickSession::items).collect();
    PopularityTable::from_sequences(items.iter().map(Vec::as_slice), n_items)
}

/// Test sessions split into equal-count groups by target popularity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Buckets {
    pub long_tail: Vec<ClickSession>,
    pub mid: Vec<ClickSession>,
    pub head: Vec<ClickSession>,
}

impl Buckets {
    pub fn named(&self) -> [(&'static str, &[ClickSession]); 3] {
        [
            ("long-tail", &self.long_tail),
            ("mid", &self.mid),
            ("head", &self.head),
        ]
    }
}

/// Sorts by `pop(target)` (ties by session id) and cuts into three contiguous
/// groups; the remainder goes to long-tail first, then mid.
pub fn bucket_by_target_popularity(test: &[ClickSession], pop: &PopularityTable) -> Result<Buckets> {
    let mut keyed = Vec::with_capacity(test.len());
    for s in test {
        let target = s
            .target()
            .ok_or_else(|| Error::InvalidInput(format!("session {} has no target", s.session_id)))?;
        keyed.push((pop.pop(target)?, s.session_id, s));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = keyed.len();
    let base = n / 3;
    let rem = n % 3;
    let n_tail = base + usize::from(rem >= 1);
    let n_mid = base + usize::from(rem >= 2);
    let take = |r: std::ops::Range<usize>| keyed[r].iter().map(|k| k.2.clone()).collect::<Vec<_>>();
    Ok(Buckets {
        long_tail: take(0..n_tail),
        mid: take(n_tail..n_tail + n_mid),
        head: take(n_tail + n_mid..n),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalized_by_max() {
        let s = vec![ClickSession::from_items(0, &[0, 0, 1])];
        let p = popularity_stats(&s, 3).unwrap();
        assert_eq!(p.pop(0).unwrap(), 1.0);
        assert_eq!(p.pop(1).unwrap(), 0.5);
        assert_eq!(p.pop(2).unwrap(), 0.0);
        assert!(p.pop(3).is_err());
    }

    #[test]
    fn counts_match_full_scan() {
        let sessions: Vec<ClickSession> = (0..50)
            .map(|i| ClickSession::from_items(i, &[(i * 7 % 11) as usize, (i * 3 % 11) as usize, 4]))
            .collect();
        let p = popularity_stats(&sessions, 11).unwrap();
        for item in 0..11 {
            let mut brute = 0;
            for s in &sessions {
                for e in &s.events {
                    if e.item == item {
                        brute += 1;
                    }
                }
            }
            assert_eq!(p.count(item), brute);
        }
        assert!(p.pops().iter().any(|&x| x == 1.0));
    }

    #[test]
    fn empty_train_rejected() {
        assert!(matches!(popularity_stats(&[], 3), Err(Error::EmptyDataset(_))));
    }

    fn sessions_with_targets(targets: &[usize]) -> Vec<ClickSession> {
        targets
            .iter()
            .enumerate()
            .map(|(i, &t)| ClickSession::from_items(i as u64, &[0, t]))
            .collect()
    }

    #[test]
    fn bucket_sizes() {
        let pop = PopularityTable::from_counts((1..=10).collect());
        let b = bucket_by_target_popularity(&sessions_with_targets(&[0, 1, 2, 3, 4, 5, 6, 7, 8]), &pop).unwrap();
        assert_eq!((b.long_tail.len(), b.mid.len(), b.head.len()), (3, 3, 3));
        let b = bucket_by_target_popularity(&sessions_with_targets(&[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]), &pop).unwrap();
        assert_eq!((b.long_tail.len(), b.mid.len(), b.head.len()), (4, 3, 3));
        assert!(b.long_tail.iter().all(|s| s.target().unwrap() <= 3));
    }

    #[test]
    fn equal_popularity_splits_by_session_id() {
        let pop = PopularityTable::from_counts(vec![5; 4]);
        let b = bucket_by_target_popularity(&sessions_with_targets(&[3, 2, 1, 0, 3, 2]), &pop).unwrap();
        let ids: Vec<u64> = b.long_tail.iter().chain(&b.mid).chain(&b.head).map(|s| s.session_id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    proptest! {
        #[test]
        fn buckets_partition_the_test_set(targets in proptest::collection::vec(0usize..6, 0..40)) {
            let pop = PopularityTable::from_counts(vec![3, 1, 4, 1, 5, 9]);
            let s = sessions_with_targets(&targets);
            let b = bucket_by_target_popularity(&s, &pop).unwrap();
            let sizes = [b.long_tail.len(), b.mid.len(), b.head.len()];
            prop_assert_eq!(sizes.iter().sum::<usize>(), s.len());
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut ids: Vec<u64> = b.long_tail.iter().chain(&b.mid).chain(&b.head).map(|s| s.session_id).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), s.len());
        }
    }
}
