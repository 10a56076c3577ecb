//! Click sessions, slate interactions and the preprocessing around them.

mod clicklog;
mod jsonl;
mod popularity;
mod slates;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use clicklog::{
    chronological_split, filter_sessions, parse_click_log, parse_click_log_str, DatasetSplit,
    FilteredSessions, ItemCatalog, TimestampFormat,
};
pub use jsonl::{read_jsonl, write_jsonl};
pub use popularity::{bucket_by_target_popularity, popularity_stats, Buckets, PopularityTable};
pub use slates::{build_slate_log, clicked_sequences, SlateInteraction, SlateStep};
pub use synthetic::{synthetic_click_corpus, SyntheticCorpusConfig};

/// Dense item index in `0..m`.
pub type ItemId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub item: ItemId,
    pub timestamp: i64,
}

/// Ordered item clicks of one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickSession {
    pub session_id: u64,
    pub user_id: Option<u64>,
    pub events: Vec<ClickEvent>,
}

impl ClickSession {
    pub fn from_items(session_id: u64, items: &[ItemId]) -> Self {
        ClickSession {
            session_id,
            user_id: None,
            events: items
                .iter()
                .enumerate()
                .map(|(t, &item)| ClickEvent {
                    item,
                    timestamp: t as i64,
                })
                .collect(),
        }
    }

    pub fn items(&self) -> Vec<ItemId> {
        self.events.iter().map(|e| e.item).collect()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The last clicked item, the prediction target in offline evaluation.
    pub fn target(&self) -> Option<ItemId> {
        self.events.last().map(|e| e.item)
    }

    pub fn start_time(&self) -> i64 {
        self.events.first().map_or(i64::MIN, |e| e.timestamp)
    }

    pub fn end_time(&self) -> i64 {
        self.events.last().map_or(i64::MIN, |e| e.timestamp)
    }
}

/// JSONL record for a click session: `{"session": id, "items": [ids]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRecord {
    pub session: u64,
    pub items: Vec<ItemId>,
}

impl From<&ClickSession> for SessionRecord {
    fn from(s: &ClickSession) -> Self {
        SessionRecord {
            session: s.session_id,
            items: s.items(),
        }
    }
}
