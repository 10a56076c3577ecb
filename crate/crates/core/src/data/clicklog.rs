use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{ClickEvent, ClickSession, ItemId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimestampFormat {
    #[default]
    Epoch,
    Iso8601,
}

fn parse_timestamp(raw: &str, format: TimestampFormat) -> Option<i64> {
    let raw = raw.trim();
    match format {
        TimestampFormat::Epoch => raw.parse().ok(),
        TimestampFormat::Iso8601 => DateTime::parse_from_rfc3339(raw)
            .map(|t| t.timestamp())
            .ok()
            .or_else(|| {
                NaiveDateTime::parse_from_str(raw, "%Y-%m-%dT%H:%M:%S")
                    .or_else(|_| NaiveDateTime::parse_from_str(raw, "%Y-%m-%d %H:%M:%S"))
                    .map(|t| t.and_utc().timestamp())
                    .ok()
            })
            .or_else(|| {
                NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                    .ok()
                    .and_then(|d| d.and_hms_opt(0, 0, 0))
                    .map(|t| t.and_utc().timestamp())
            }),
    }
}

/// Reads a `session_id,item_id,timestamp` CSV (an optional `user_id` column
/// is honoured). Sessions come back ordered by id, events by timestamp then
/// row order. Item ids are the raw ids from the file.
pub fn parse_click_log(path: impl AsRef<Path>, format: TimestampFormat) -> Result<Vec<ClickSession>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_click_log_str(&text, format)
}

pub fn parse_click_log_str(text: &str, format: TimestampFormat) -> Result<Vec<ClickSession>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format_at(1, e.to_string()))?
        .clone();
    let column = |name: &str| headers.iter().position(|h| h == name);
    let missing = |name: &str| Error::format_at(1, format!("missing column `{name}`"));
    let session_col = column("session_id").ok_or_else(|| missing("session_id"))?;
    let item_col = column("item_id").ok_or_else(|| missing("item_id"))?;
    let time_col = column("timestamp").ok_or_else(|| missing("timestamp"))?;
    let user_col = column("user_id");

    // (timestamp, row) keeps the sort stable with respect to file order.
    let mut grouped: BTreeMap<u64, (Option<u64>, Vec<(i64, usize, ItemId)>)> = BTreeMap::new();
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::format_at(line, e.to_string())
        })?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| Error::format_at(line, format!("missing `{name}` field")))
        };
        let session: u64 = field(session_col, "session_id")?
            .parse()
            .map_err(|_| Error::format_at(line, "session_id is not an unsigned integer"))?;
        let item: ItemId = field(item_col, "item_id")?
            .parse()
            .map_err(|_| Error::format_at(line, "item_id is not an unsigned integer"))?;
        let raw_time = field(time_col, "timestamp")?;
        let timestamp = parse_timestamp(raw_time, format)
            .ok_or_else(|| Error::format_at(line, format!("unparseable timestamp `{raw_time}`")))?;
        let user = match user_col {
            Some(c) => {
                let raw = field(c, "user_id")?;
                if raw.is_empty() || raw == "NA" {
                    None
                } else {
                    Some(raw.parse().map_err(|_| Error::format_at(line, "user_id is not an integer"))?)
                }
            }
            None => None,
        };
        let entry = grouped.entry(session).or_insert((user, Vec::new()));
        if entry.0.is_none() {
            entry.0 = user;
        }
        entry.1.push((timestamp, rows, item));
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::format_at(1, "click log has no data rows"));
    }
    Ok(grouped
        .into_iter()
        .map(|(session_id, (user_id, mut events))| {
            events.sort_by_key(|&(t, row, _)| (t, row));
            ClickSession {
                session_id,
                user_id,
                events: events
                    .into_iter()
                    .map(|(timestamp, _, item)| ClickEvent { item, timestamp })
                    .collect(),
            }
        })
        .collect())
}

/// Bijection between raw item ids and dense indices `0..m`, ordered by raw id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<u64>", into = "Vec<u64>")]
pub struct ItemCatalog {
    raw_ids: Vec<u64>,
    dense: HashMap<u64, ItemId>,
}

impl From<Vec<u64>> for ItemCatalog {
    fn from(raw_ids: Vec<u64>) -> Self {
        ItemCatalog::new(raw_ids)
    }
}

impl From<ItemCatalog> for Vec<u64> {
    fn from(c: ItemCatalog) -> Self {
        c.raw_ids
    }
}

impl ItemCatalog {
    pub fn new(mut raw_ids: Vec<u64>) -> Self {
        raw_ids.sort_unstable();
        raw_ids.dedup();
        let dense = raw_ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
        ItemCatalog { raw_ids, dense }
    }

    pub fn len(&self) -> usize {
        self.raw_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw_ids.is_empty()
    }

    pub fn dense(&self, raw: u64) -> Option<ItemId> {
        self.dense.get(&raw).copied()
    }

    pub fn raw(&self, dense: ItemId) -> Option<u64> {
        self.raw_ids.get(dense).copied()
    }

    pub fn raw_ids(&self) -> &[u64] {
        &self.raw_ids
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSessions {
    /// Sessions with dense item ids.
    pub sessions: Vec<ClickSession>,
    pub catalog: ItemCatalog,
}

/// Keeps clicks on the `top_m` most clicked items (ties to the smaller id),
/// then sessions with `min_len ≤ length ≤ max_len`, then re-indexes items
/// densely.
pub fn filter_sessions(
    sessions: &[ClickSession],
    top_m: usize,
    min_len: usize,
    max_len: usize,
) -> Result<FilteredSessions> {
    if top_m == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::InvalidInput(format!(
            "need top_m >= 1 and 1 <= min_len <= max_len, got {top_m}, {min_len}, {max_len}"
        )));
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for s in sessions {
        for e in &s.events {
            *counts.entry(e.item as u64).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top_m);
    let keep: std::collections::HashSet<u64> = ranked.iter().map(|&(id, _)| id).collect();

    let kept: Vec<ClickSession> = sessions
        .iter()
        .map(|s| ClickSession {
            events: s
                .events
                .iter()
                .copied()
                .filter(|e| keep.contains(&(e.item as u64)))
                .collect(),
            ..s.clone()
        })
        .filter(|s| (min_len..=max_len).contains(&s.len()))
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyDataset("every session was filtered out".into()));
    }
    let catalog = ItemCatalog::new(
        kept.iter()
            .flat_map(|s| s.events.iter().map(|e| e.item as u64))
            .collect(),
    );
    let sessions = kept
        .into_iter()
        .map(|mut s| {
            for e in &mut s.events {
                e.item = catalog.dense(e.item as u64).expect("catalog built from kept items");
            }
            s
        })
        .collect();
    Ok(FilteredSessions { sessions, catalog })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<ClickSession>,
    pub valid: Vec<ClickSession>,
    pub test: Vec<ClickSession>,
    /// Latest training event; valid/test sessions start no earlier.
    pub boundary: i64,
    /// Valid/test sessions dropped for starting before `boundary`.
    pub dropped: usize,
}

/// Orders sessions by end time (ties by id) and cuts them by `fractions`.
/// Held-out sessions that start before the last training event are dropped
/// so that no training event postdates a held-out one.
pub fn chronological_split(sessions: &[ClickSession], fractions: (f64, f64, f64)) -> Result<DatasetSplit> {
    let (ft, fv, fs) = fractions;
    if !(ft > 0.0 && fv > 0.0 && fs > 0.0) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let n = sessions.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("need at least 3 sessions to split, got {n}")));
    }
    if sessions.iter().any(ClickSession::is_empty) {
        return Err(Error::InvalidInput("cannot split empty sessions".into()));
    }
    let mut ordered: Vec<&ClickSession> = sessions.iter().collect();
    ordered.sort_by_key(|s| (s.end_time(), s.session_id));
    let n_train = ((ft * n as f64).round() as usize).clamp(1, n - 2);
    let n_valid = ((fv * n as f64).round() as usize).clamp(1, n - n_train - 1);

    let train: Vec<ClickSession> = ordered[..n_train].iter().map(|&s| s.clone()).collect();
    let boundary = train
        .iter()
        .flat_map(|s| s.events.iter().map(|e| e.timestamp))
        .max()
        .expect("train is non-empty");
    let mut dropped = 0;
    let mut held_out = |range: std::ops::Range<usize>| -> Vec<ClickSession> {
        ordered[range]
            .iter()
            .filter(|s| {
                let ok = s.start_time() >= boundary;
                dropped += usize::from(!ok);
                ok
            })
            .map(|&s| s.clone())
            .collect()
    };
    let valid = held_out(n_train..n_train + n_valid);
    let test = held_out(n_train + n_valid..n);
    Ok(DatasetSplit {
        train,
        valid,
        test,
        boundary,
        dropped,
    })
}
