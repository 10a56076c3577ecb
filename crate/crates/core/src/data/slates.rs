use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{ClickSession, ItemId, PopularityTable};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlateStep {
    pub slate: Vec<ItemId>,
    pub clicks: Vec<bool>,
}

impl SlateStep {
    pub fn clicked(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.slate.iter().zip(&self.clicks).filter(|(_, &c)| c).map(|(&i, _)| i)
    }

    pub fn click_count(&self) -> usize {
        self.clicks.iter().filter(|&&c| c).count()
    }

    pub fn has_click(&self) -> bool {
        self.clicks.iter().any(|&c| c)
    }
}

/// One user's sequence of recommended slates and responses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlateInteraction {
    pub user: u64,
    pub user_type: Option<usize>,
    pub steps: Vec<SlateStep>,
}

impl SlateInteraction {
    /// Checks slate sizes, distinctness, catalog membership and response lengths.
    pub fn validate(&self, slate_size: usize, n_items: usize) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            if step.clicks.len() != step.slate.len() {
                return Err(Error::Data(format!(
                    "user {} step {t}: {} responses for a slate of {}",
                    self.user,
                    step.clicks.len(),
                    step.slate.len()
                )));
            }
            if step.slate.len() != slate_size {
                return Err(Error::Data(format!(
                    "user {} step {t}: slate has {} items, expected {slate_size}",
                    self.user,
                    step.slate.len()
                )));
            }
            let distinct: HashSet<_> = step.slate.iter().collect();
            if distinct.len() != step.slate.len() {
                return Err(Error::Data(format!("user {} step {t}: repeated slate item", self.user)));
            }
            if let Some(&bad) = step.slate.iter().find(|&&i| i >= n_items) {
                return Err(Error::Data(format!(
                    "user {} step {t}: item {bad} outside catalog of {n_items}",
                    self.user
                )));
            }
        }
        Ok(())
    }

    /// Clicked items in step order (slate order within a step).
    pub fn clicked_items(&self) -> Vec<ItemId> {
        self.steps.iter().flat_map(|s| s.clicked()).collect()
    }
}

/// Click sequences of a slate log, one per interaction (empty ones kept).
pub fn clicked_sequences(log: &[SlateInteraction]) -> Vec<Vec<ItemId>> {
    log.iter().map(SlateInteraction::clicked_items).collect()
}

/// Turns click-only sessions into slate interactions: for every click after
/// the first, a slate holding the clicked item and `slate_size − 1`
/// popularity-proportional negatives, shuffled.
///
/// Negatives avoid the clicked item always and the session's other items
/// while enough candidates remain; zero-popularity items are drawn uniformly
/// once the popular ones run out.
pub fn build_slate_log(
    sessions: &[ClickSession],
    slate_size: usize,
    pop: &PopularityTable,
    seed: u64,
) -> Result<Vec<SlateInteraction>> {
    let n_items = pop.len();
    if slate_size < 2 {
        return Err(Error::InvalidInput(format!("slate size {slate_size} must be at least 2")));
    }
    if n_items < slate_size {
        return Err(Error::InvalidInput(format!(
            "catalog of {n_items} items cannot fill slates of {slate_size}"
        )));
    }
    let weights: Vec<f64> = pop.counts().iter().map(|&c| c as f64).collect();
    let mut out = Vec::new();
    for (index, session) in sessions.iter().enumerate() {
        if session.len() < 2 {
            continue;
        }
        let mut r = rng::substream(seed, "slate-log", index as u64);
        let items = session.items();
        let in_session: HashSet<ItemId> = items.iter().copied().collect();
        let mut steps = Vec::with_capacity(items.len() - 1);
        for &clicked in &items[1..] {
            if clicked >= n_items {
                return Err(Error::Index {
                    what: "catalog",
                    index: clicked,
                    len: n_items,
                });
            }
            let mut slate = vec![clicked];
            let mut w = weights.clone();
            w[clicked] = 0.0;
            for &i in &in_session {
                w[i] = 0.0;
            }
            while slate.len() < slate_size {
                let pick = rng::categorical(&mut r, &w).or_else(|| {
                    let free: Vec<ItemId> = (0..n_items)
                        .filter(|i| !slate.contains(i) && !in_session.contains(i))
                        .collect();
                    let pool: Vec<ItemId> = if free.is_empty() {
                        (0..n_items).filter(|i| !slate.contains(i)).collect()
                    } else {
                        free
                    };
                    Some(pool[rng::below(&mut r, pool.len())])
                });
                let pick = pick.expect("pool non-empty because n_items >= slate_size");
                slate.push(pick);
                w[pick] = 0.0;
            }
            rng::shuffle(&mut r, &mut slate);
            let clicks = slate.iter().map(|&i| i == clicked).collect();
            steps.push(SlateStep { slate, clicks });
        }
        out.push(SlateInteraction {
            user: session.session_id,
            user_type: None,
            steps,
        });
    }
    Ok(out)
}
