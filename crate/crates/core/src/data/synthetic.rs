use serde::{Deserialize, Serialize};

use super::{ClickEvent, ClickSession, ItemId};
use crate::error::{Error, Result};
use crate::rng;

/// Generator settings for a click corpus with a planted long tail.
///
/// Items are split round-robin into topics. Each item has a Zipf exposure
/// weight (by a random rank) and a fixed successor inside its topic. A
/// session picks a topic, starts from an exposure-weighted item and then
/// either follows the current item's successor (`chain_prob`), stays in the
/// topic with an exposure-weighted draw (`stay_prob`), or jumps to a random
/// topic. Rarely exposed items are therefore predictable from their
/// predecessor but seldom seen in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticCorpusConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub n_topics: usize,
    pub zipf_exponent: f64,
    pub chain_prob: f64,
    pub stay_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            n_items: 500,
            n_sessions: 10_000,
            n_topics: 10,
            zipf_exponent: 1.0,
            chain_prob: 0.5,
            stay_prob: 0.4,
            min_len: 3,
            max_len: 8,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 || self.n_items < 2 * self.n_topics {
            return Err(Error::Config(format!(
                "synthetic corpus needs at least two items per topic ({} items, {} topics)",
                self.n_items, self.n_topics
            )));
        }
        if self.min_len < 1 || self.min_len > self.max_len || self.n_sessions == 0 {
            return Err(Error::Config("synthetic corpus lengths or session count invalid".into()));
        }
        for (name, p) in [("chain_prob", self.chain_prob), ("stay_prob", self.stay_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.chain_prob + self.stay_prob > 1.0 {
            return Err(Error::Config("chain_prob + stay_prob must not exceed 1".into()));
        }
        Ok(())
    }
}

/// Sessions `0..n_sessions` with timestamps increasing in session order.
pub fn synthetic_click_corpus(cfg: &SyntheticCorpusConfig, seed: u64) -> Result<Vec<ClickSession>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, "synthetic-corpus");
    let n = cfg.n_items;
    let mut ranks: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut r, &mut ranks);
    let exposure: Vec<f64> = ranks
        .iter()
        .map(|&rank| 1.0 / ((rank + 1) as f64).powf(cfg.zipf_exponent))
        .collect();
    let topic_items: Vec<Vec<ItemId>> = (0..cfg.n_topics)
        .map(|t| (t..n).step_by(cfg.n_topics).collect())
        .collect();
    let mut successor = vec![0; n];
    for items in &topic_items {
        let mut cycle = items.clone();
        rng::shuffle(&mut r, &mut cycle);
        for w in 0..cycle.len() {
            successor[cycle[w]] = cycle[(w + 1) % cycle.len()];
        }
    }
    let topic_weights: Vec<Vec<f64>> = topic_items
        .iter()
        .map(|items| items.iter().map(|&i| exposure[i]).collect())
        .collect();
    let draw_in_topic = |r: &mut rng::Rng, t: usize| {
        let k = rng::categorical(r, &topic_weights[t]).expect("positive weights");
        topic_items[t][k]
    };

    let mut sessions = Vec::with_capacity(cfg.n_sessions);
    for s in 0..cfg.n_sessions {
        let len = cfg.min_len + rng::below(&mut r, cfg.max_len - cfg.min_len + 1);
        let mut topic = rng::below(&mut r, cfg.n_topics);
        let mut current = draw_in_topic(&mut r, topic);
        let mut items = vec![current];
        while items.len() < len {
            let u = rng::uniform(&mut r);
            current = if u < cfg.chain_prob {
                successor[current]
            } else if u < cfg.chain_prob + cfg.stay_prob {
                draw_in_topic(&mut r, topic)
            } else {
                topic = rng::below(&mut r, cfg.n_topics);
                draw_in_topic(&mut r, topic)
            };
            items.push(current);
        }
        let start = s as i64 * 1_000;
        sessions.push(ClickSession {
            session_id: s as u64,
            user_id: None,
            events: items
                .into_iter()
                .enumerate()
                .map(|(t, item)| ClickEvent {
                    item,
                    timestamp: start + t as i64,
                })
                .collect(),
        });
    }
    Ok(sessions)
}
