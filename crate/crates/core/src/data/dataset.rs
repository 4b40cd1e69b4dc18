use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::log::InteractionLog;
use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const BUNDLE_FORMAT: &str = "causalrec-bundle/1";

/// Per-user chronological item sequences over contiguous integer ids.
///
/// Item ids run `1..=n_items`; `0` is padding and `n_items + 1` is the mask
/// token. User ids run `1..=n_users` and index `sequences` at `id - 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceDataset {
    user_names: Vec<String>,
    item_names: Vec<String>,
    sequences: Vec<Vec<u32>>,
    /// `item_popularity[id]` for `id in 0..=n_items`; slot 0 is always zero.
    item_popularity: Vec<u64>,
    max_len: usize,
}

/// A raw user id with its (timestamp, file order, raw item id) events.
type UserEvents<'a> = (&'a str, Vec<(u64, usize, &'a str)>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub mean_length: f64,
    pub density: f64,
}

impl SequenceDataset {
    /// Groups a log into per-user sequences ordered by (timestamp, file order).
    /// Users with fewer than three interactions cannot be split and are
    /// dropped; the second return value counts them.
    pub fn from_log(log: &InteractionLog, max_len: usize) -> Result<(Self, usize)> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be positive"));
        }
        let mut user_slot: HashMap<&str, usize> = HashMap::new();
        let mut per_user: Vec<UserEvents> = Vec::new();
        for (order, r) in log.records.iter().enumerate() {
            let slot = *user_slot.entry(r.user.as_str()).or_insert_with(|| {
                per_user.push((r.user.as_str(), Vec::new()));
                per_user.len() - 1
            });
            per_user[slot].1.push((r.timestamp, order, r.item.as_str()));
        }
        let mut dropped = 0;
        let mut kept = Vec::new();
        for (user, mut events) in per_user {
            if events.len() < 3 {
                dropped += 1;
                continue;
            }
            events.sort_by_key(|&(ts, order, _)| (ts, order));
            kept.push((user, events));
        }
        if kept.is_empty() {
            return Err(Error::EmptyDataset(
                "no user has the three interactions a leave-one-out split needs".into(),
            ));
        }
        // Items are numbered by first appearance in file order among kept users.
        let mut first_seen: Vec<(usize, &str)> = kept
            .iter()
            .flat_map(|(_, ev)| ev.iter().map(|&(_, order, item)| (order, item)))
            .collect();
        first_seen.sort_unstable();
        let mut item_index: HashMap<&str, u32> = HashMap::new();
        let mut item_names = Vec::new();
        for (_, item) in first_seen {
            item_index.entry(item).or_insert_with(|| {
                item_names.push(item.to_string());
                item_names.len() as u32
            });
        }
        let mut item_popularity = vec![0u64; item_names.len() + 1];
        let mut user_names = Vec::with_capacity(kept.len());
        let mut sequences = Vec::with_capacity(kept.len());
        for (user, events) in kept {
            user_names.push(user.to_string());
            let seq: Vec<u32> = events
                .iter()
                .map(|&(_, _, item)| item_index[item])
                .collect();
            for &i in &seq {
                item_popularity[i as usize] += 1;
            }
            sequences.push(seq);
        }
        Ok((
            Self {
                user_names,
                item_names,
                sequences,
                item_popularity,
                max_len,
            },
            dropped,
        ))
    }

    /// Builds a dataset directly from integer sequences over items `1..=n_items`.
    pub fn from_sequences(
        sequences: Vec<Vec<u32>>,
        n_items: usize,
        max_len: usize,
    ) -> Result<Self> {
        if max_len == 0 {
            return Err(Error::contract("max_len must be positive"));
        }
        let mut item_popularity = vec![0u64; n_items + 1];
        for seq in &sequences {
            if seq.len() < 3 {
                return Err(Error::contract("every sequence needs at least 3 items"));
            }
            for &i in seq {
                if i == PAD_ID || i as usize > n_items {
                    return Err(Error::Index {
                        index: i as usize,
                        size: n_items + 1,
                    });
                }
                item_popularity[i as usize] += 1;
            }
        }
        if sequences.is_empty() {
            return Err(Error::EmptyDataset("no sequences".into()));
        }
        Ok(Self {
            user_names: (1..=sequences.len()).map(|u| u.to_string()).collect(),
            item_names: (1..=n_items).map(|i| i.to_string()).collect(),
            sequences,
            item_popularity,
            max_len,
        })
    }

    pub fn n_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_names.len()
    }

    pub fn mask_id(&self) -> u32 {
        self.n_items() as u32 + 1
    }

    /// Embedding rows needed: pad, items, mask.
    pub fn vocab_size(&self) -> usize {
        self.n_items() + 2
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len.max(1);
        self
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    /// Sequence of user `user_id` (1-based).
    pub fn sequence(&self, user_id: u32) -> &[u32] {
        &self.sequences[user_id as usize - 1]
    }

    pub fn user_name(&self, user_id: u32) -> &str {
        &self.user_names[user_id as usize - 1]
    }

    pub fn item_name(&self, item_id: u32) -> &str {
        &self.item_names[item_id as usize - 1]
    }

    pub fn item_popularity(&self) -> &[u64] {
        &self.item_popularity
    }

    pub fn total_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Empirical item frequency over the whole dataset, indexed by item id
    /// (slot 0 is padding and holds 0).
    pub fn popularity_distribution(&self) -> Vec<f64> {
        popularity_distribution(&self.item_popularity)
    }

    pub fn stats(&self) -> DatasetStats {
        let users = self.n_users();
        let items = self.item_popularity.iter().filter(|&&c| c > 0).count();
        let interactions = self.total_interactions();
        DatasetStats {
            users,
            items,
            interactions,
            mean_length: interactions as f64 / users as f64,
            density: interactions as f64 / (users as f64 * items as f64),
        }
    }

    /// Serializes to the line-based bundle format:
    ///
    /// ```text
    /// format causalrec-bundle/1
    /// max_len <n>
    /// users <count>
    /// items <count>
    /// u <tab> <user id> <tab> <raw user id>          (one per user, ascending id)
    /// i <tab> <item id> <tab> <raw item id> <tab> <popularity>
    /// s <tab> <user id> <tab> <space-separated item ids>
    /// ```
    pub fn to_bundle_string(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(out, "format {BUNDLE_FORMAT}").unwrap();
        writeln!(out, "max_len {}", self.max_len).unwrap();
        writeln!(out, "users {}", self.n_users()).unwrap();
        writeln!(out, "items {}", self.n_items()).unwrap();
        let check = |name: &str| {
            if name.contains(['\t', '\n', '\r']) {
                Err(Error::Format(format!(
                    "raw id {name:?} contains a tab or newline"
                )))
            } else {
                Ok(())
            }
        };
        for (u, name) in self.user_names.iter().enumerate() {
            check(name)?;
            writeln!(out, "u\t{}\t{}", u + 1, name).unwrap();
        }
        for (i, name) in self.item_names.iter().enumerate() {
            check(name)?;
            writeln!(
                out,
                "i\t{}\t{}\t{}",
                i + 1,
                name,
                self.item_popularity[i + 1]
            )
            .unwrap();
        }
        for (u, seq) in self.sequences.iter().enumerate() {
            let items: Vec<String> = seq.iter().map(u32::to_string).collect();
            writeln!(out, "s\t{}\t{}", u + 1, items.join(" ")).unwrap();
        }
        Ok(out)
    }

    pub fn from_bundle_str(text: &str) -> Result<Self> {
        let fmt_err = |line: usize, msg: &str| Error::Format(format!("bundle line {line}: {msg}"));
        let mut lines = text.lines().enumerate();
        let mut header = |key: &str| -> Result<String> {
            let (n, line) = lines
                .next()
                .ok_or_else(|| Error::Format(format!("bundle truncated before {key}")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| fmt_err(n + 1, &format!("expected `{key} ...`")))
        };
        let format = header("format")?;
        if format != BUNDLE_FORMAT {
            return Err(Error::SchemaVersion {
                expected: BUNDLE_FORMAT.into(),
                found: format,
            });
        }
        let parse_num = |s: String| s.parse::<usize>().map_err(|e| Error::Format(e.to_string()));
        let max_len = parse_num(header("max_len")?)?;
        let n_users = parse_num(header("users")?)?;
        let n_items = parse_num(header("items")?)?;
        let mut user_names = Vec::with_capacity(n_users);
        let mut item_names = Vec::with_capacity(n_items);
        let mut item_popularity = vec![0u64; n_items + 1];
        let mut sequences = Vec::with_capacity(n_users);
        for (n, line) in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            let id = |s: &str| s.parse::<usize>().map_err(|_| fmt_err(n + 1, "bad id"));
            match cols.as_slice() {
                ["u", idx, name] if id(idx)? == user_names.len() + 1 => {
                    user_names.push(name.to_string())
                }
                ["i", idx, name, pop] if id(idx)? == item_names.len() + 1 => {
                    item_names.push(name.to_string());
                    item_popularity[item_names.len()] =
                        pop.parse().map_err(|_| fmt_err(n + 1, "bad popularity"))?;
                }
                ["s", idx, items] if id(idx)? == sequences.len() + 1 => {
                    let seq = items
                        .split(' ')
                        .filter(|s| !s.is_empty())
                        .map(|s| match s.parse::<u32>() {
                            Ok(v) if v >= 1 && v as usize <= n_items => Ok(v),
                            _ => Err(fmt_err(n + 1, "item id out of range")),
                        })
                        .collect::<Result<Vec<u32>>>()?;
                    sequences.push(seq);
                }
                _ => return Err(fmt_err(n + 1, "unrecognized or out-of-order record")),
            }
        }
        if user_names.len() != n_users || item_names.len() != n_items || sequences.len() != n_users
        {
            return Err(Error::Format(
                "bundle record counts disagree with header".into(),
            ));
        }
        Ok(Self {
            user_names,
            item_names,
            sequences,
            item_popularity,
            max_len,
        })
    }

    pub fn save_bundle(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let text = self.to_bundle_string()?;
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        Ok(fingerprint(text.as_bytes()))
    }

    pub fn load_bundle(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bundle_str(&text)?, fingerprint(text.as_bytes())))
    }
}

/// Hex SHA-256 of a byte payload.
pub fn fingerprint(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
}

pub fn popularity_distribution(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::log::Interaction;

    fn log(rows: &[(&str, &str, u64)]) -> InteractionLog {
        InteractionLog::from_records(rows.iter().map(|&(u, i, t)| Interaction {
            user: u.into(),
            item: i.into(),
            timestamp: t,
        }))
    }

    #[test]
    fn chronological_with_stable_ties() {
        let l = log(&[
            ("a", "x", 5),
            ("a", "y", 1),
            ("a", "z", 5),
            ("a", "w", 3),
            ("b", "x", 1),
        ]);
        let (ds, dropped) = SequenceDataset::from_log(&l, 10).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(ds.n_users(), 1);
        let names: Vec<&str> = ds.sequence(1).iter().map(|&i| ds.item_name(i)).collect();
        assert_eq!(names, ["y", "w", "x", "z"]);
        assert_eq!(
            ds.total_interactions() as u64,
            ds.item_popularity().iter().sum::<u64>()
        );
        assert_eq!(ds.mask_id(), 5);
    }

    #[test]
    fn popularity_normalizes() {
        assert_eq!(popularity_distribution(&[0, 3, 1]), vec![0.0, 0.75, 0.25]);
        let p = popularity_distribution(&[0, 5, 3, 2]);
        assert!(
            (p[1] - 0.5).abs() < 1e-15 && (p[2] - 0.3).abs() < 1e-15 && (p[3] - 0.2).abs() < 1e-15
        );
        let p = popularity_distribution(&[0, 4, 4, 4, 4]);
        assert!(p[1..].iter().all(|&x| x == 0.25));
    }

    #[test]
    fn bundle_roundtrip_and_fingerprint() {
        let ds =
            SequenceDataset::from_sequences(vec![vec![1, 2, 3], vec![3, 2, 1, 2]], 3, 8).unwrap();
        let text = ds.to_bundle_string().unwrap();
        assert!(text.starts_with("format causalrec-bundle/1\n"));
        assert_eq!(SequenceDataset::from_bundle_str(&text).unwrap(), ds);
        assert_eq!(fingerprint(text.as_bytes()).len(), 64);
        let bad = text.replace("causalrec-bundle/1", "causalrec-bundle/0");
        assert!(matches!(
            SequenceDataset::from_bundle_str(&bad),
            Err(Error::SchemaVersion { .. })
        ));
    }

    #[test]
    fn stats_match_definitions() {
        let ds = SequenceDataset::from_sequences(vec![vec![1, 2, 3], vec![3, 2, 1, 2, 4]], 4, 8)
            .unwrap();
        let s = ds.stats();
        assert_eq!((s.users, s.items, s.interactions), (2, 4, 8));
        assert_eq!(s.mean_length, 4.0);
        assert_eq!(s.density, 1.0);
    }
}
