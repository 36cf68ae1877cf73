//! Interaction logs, chronological splits, fixed-length user sequences and
//! item popularity.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One implicit-feedback event with dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: i64,
}

/// A set of events over a fixed id space `[0, n_users) x [0, n_items)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InteractionLog {
    pub events: Vec<Event>,
    pub n_users: usize,
    pub n_items: usize,
}

/// Raw-to-dense id assignment produced by [`parse_interactions`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Per-user chronological train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
}

/// A position in a diffusion sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Token {
    Item(usize),
    Mask,
    Pad,
}

impl Token {
    pub fn item(self) -> Option<usize> {
        match self {
            Token::Item(v) => Some(v),
            _ => None,
        }
    }

    pub fn is_pad(self) -> bool {
        self == Token::Pad
    }

    pub fn is_mask(self) -> bool {
        self == Token::Mask
    }
}

/// The `l` most recent training items of a user, oldest first, left-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<Token>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.items.iter().map(|t| t.is_pad()).collect()
    }

    /// Items at non-padded positions, in sequence order.
    pub fn item_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().filter_map(|t| t.item())
    }
}

/// Item popularity normalized by the most frequent item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityTable {
    pub pop: Vec<f64>,
}

impl PopularityTable {
    pub fn get(&self, item: usize) -> f64 {
        self.pop.get(item).copied().unwrap_or(0.0)
    }
}

impl InteractionLog {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Events grouped by user, each group sorted by timestamp with ties kept
    /// in original order.
    pub fn by_user(&self) -> Vec<Vec<Event>> {
        let mut groups = vec![Vec::new(); self.n_users];
        for e in &self.events {
            groups[e.user].push(*e);
        }
        for g in &mut groups {
            g.sort_by_key(|e| e.timestamp);
        }
        groups
    }

    /// Sorted, de-duplicated item set per user.
    pub fn user_items(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![Vec::new(); self.n_users];
        for e in &self.events {
            sets[e.user].push(e.item);
        }
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        sets
    }

    /// Interaction count per item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_items];
        for e in &self.events {
            counts[e.item] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.events {
            if e.user >= self.n_users || e.item >= self.n_items {
                return Err(Error::InvalidArgument(format!(
                    "event ({}, {}) outside id space {}x{}",
                    e.user, e.item, self.n_users, self.n_items
                )));
            }
        }
        Ok(())
    }
}

/// Parses `user, item, rating, timestamp` rows (tab- or comma-separated),
/// keeps ratings at or above `threshold`, drops exact duplicate rows and
/// assigns dense ids by first appearance among the kept rows.
pub fn parse_interactions(text: &str, threshold: f64) -> Result<(InteractionLog, IdMaps)> {
    let mut user_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut item_ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut maps = IdMaps::default();
    let mut events = Vec::new();
    let mut seen: BTreeMap<(usize, usize, i64), Vec<u64>> = BTreeMap::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(['\t', ',']).map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        }
        let rating: f64 = fields[2].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad rating {:?}", fields[2]),
        })?;
        let timestamp = parse_timestamp(fields[3]).ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("bad timestamp {:?}", fields[3]),
        })?;
        if fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty id".to_string(),
            });
        }
        if !rating.is_finite() || rating < threshold {
            continue;
        }
        let user = *user_ids.entry(fields[0].to_string()).or_insert_with(|| {
            maps.users.push(fields[0].to_string());
            maps.users.len() - 1
        });
        let item = *item_ids.entry(fields[1].to_string()).or_insert_with(|| {
            maps.items.push(fields[1].to_string());
            maps.items.len() - 1
        });
        let dup = seen.entry((user, item, timestamp)).or_default();
        if dup.contains(&rating.to_bits()) {
            continue;
        }
        dup.push(rating.to_bits());
        events.push(Event {
            user,
            item,
            rating,
            timestamp,
        });
    }
    if events.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let log = InteractionLog {
        events,
        n_users: maps.users.len(),
        n_items: maps.items.len(),
    };
    Ok((log, maps))
}

fn parse_timestamp(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    if f.is_finite() {
        Some(f as i64)
    } else {
        None
    }
}

/// Splits every user's history chronologically: the first `floor(k*a/s)`
/// events go to train, the next `round(k*b/s)` to validation and the rest to
/// test, where `(a, b, c)` are the ratios and `s = a + b + c`. Users with
/// fewer than three events go entirely to train.
pub fn split_chronological(log: &InteractionLog, ratios: (u32, u32, u32)) -> Result<SplitBundle> {
    let (a, b, c) = ratios;
    if a == 0 || b == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!(
            "split ratios must be positive, got {a}:{b}:{c}"
        )));
    }
    if log.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let sum = (a + b + c) as usize;
    let empty = || InteractionLog {
        events: Vec::new(),
        n_users: log.n_users,
        n_items: log.n_items,
    };
    let (mut train, mut validation, mut test) = (empty(), empty(), empty());
    for events in log.by_user() {
        let k = events.len();
        let (n_train, n_val) = if k < 3 {
            (k, 0)
        } else {
            let n_train = k * a as usize / sum;
            let n_val = (2 * k * b as usize + sum) / (2 * sum);
            (n_train, n_val.min(k - n_train))
        };
        train.events.extend_from_slice(&events[..n_train]);
        validation
            .events
            .extend_from_slice(&events[n_train..n_train + n_val]);
        test.events.extend_from_slice(&events[n_train + n_val..]);
    }
    Ok(SplitBundle {
        train,
        validation,
        test,
    })
}

/// Builds one sequence of exactly `l` tokens per user with at least one
/// training event: the `l` most recent items, oldest first, left-padded.
pub fn build_sequences(train: &InteractionLog, l: usize) -> Result<Vec<UserSequence>> {
    if l == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".to_string()));
    }
    let mut out = Vec::new();
    for (user, events) in train.by_user().into_iter().enumerate() {
        if events.is_empty() {
            log::debug!("user {user} has no training events; no sequence built");
            continue;
        }
        let recent = &events[events.len().saturating_sub(l)..];
        let mut items = vec![Token::Pad; l - recent.len()];
        items.extend(recent.iter().map(|e| Token::Item(e.item)));
        out.push(UserSequence { user, items });
    }
    Ok(out)
}

/// `pop(v) = count(v) / max_w count(w)` over the training log.
pub fn popularity(train: &InteractionLog) -> Result<PopularityTable> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let counts = train.item_counts();
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    Ok(PopularityTable {
        pop: counts.into_iter().map(|c| c as f64 / max).collect(),
    })
}

/// Popularity deviation of each position from the sequence's mean
/// popularity. Padded positions are excluded from the mean and report 0.
pub fn popularity_deviation(seq: &UserSequence, pop: &PopularityTable) -> Result<Vec<f64>> {
    let values: Vec<Option<f64>> = seq.items.iter().map(|t| t.item().map(|v| pop.get(v))).collect();
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::AllPadding);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(values
        .into_iter()
        .map(|v| v.map_or(0.0, |p| p - mean))
        .collect())
}
