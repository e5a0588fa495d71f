//! Per-node commit store keyed by block height, with optimistic and final
//! markers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::execution::ChainState;
use crate::hash::Digest;
use crate::types::{BlockId, Micros};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Marker {
    OptCommitted,
    Committed,
}

impl Marker {
    pub fn as_str(self) -> &'static str {
        match self {
            Marker::OptCommitted => "opt_committed",
            Marker::Committed => "committed",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommitRecord {
    pub height: u64,
    pub marker: Marker,
    pub block_id: BlockId,
    pub state_digest: Digest,
    #[serde(skip)]
    pub snapshot: Option<Arc<ChainState>>,
    pub write_time: Micros,
    pub io_duration: Micros,
}

impl CommitRecord {
    /// Same height, marker, block and digest; write timing ignored.
    pub fn same_content(&self, other: &CommitRecord) -> bool {
        self.height == other.height
            && self.marker == other.marker
            && self.block_id == other.block_id
            && self.state_digest == other.state_digest
    }
}

/// Simulated IO durations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StorageConfig {
    /// Fixed part of a full state write.
    pub commit_base: Micros,
    /// Per-transaction part of a full state write.
    pub commit_per_txn: Micros,
    /// Flipping an OptCommitted marker to Committed.
    pub marker_upgrade: Micros,
}

impl Default for StorageConfig {
    fn default() -> Self {
        StorageConfig {
            commit_base: 2 * crate::types::MILLI,
            commit_per_txn: 10,
            marker_upgrade: 100,
        }
    }
}

impl StorageConfig {
    pub fn full_write(&self, txns: usize) -> Micros {
        self.commit_base + self.commit_per_txn * txns as Micros
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum StorageError {
    #[error("height {height} is already committed")]
    AlreadyCommitted { height: u64 },
    #[error("cannot revert committed record at height {height}")]
    RevertCommitted { height: u64 },
    #[error("commit of height {height} does not follow committed height {committed}")]
    HeightGap { height: u64, committed: u64 },
}

#[derive(Clone, Debug, Default)]
pub struct Storage {
    records: BTreeMap<u64, CommitRecord>,
    committed_height: u64,
    reverted: u64,
}

impl Storage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn read(&self, height: u64) -> Option<&CommitRecord> {
        self.records.get(&height)
    }

    /// Raw write. A Committed record can never be replaced, and an
    /// OptCommitted record cannot replace a Committed one.
    pub fn write(&mut self, record: CommitRecord) -> Result<(), StorageError> {
        let height = record.height;
        if let Some(old) = self.records.get(&height) {
            if old.marker == Marker::Committed {
                return Err(StorageError::AlreadyCommitted { height });
            }
        }
        if record.marker == Marker::Committed {
            if height != self.committed_height + 1 && !(self.records.is_empty() && height == 0) {
                return Err(StorageError::HeightGap {
                    height,
                    committed: self.committed_height,
                });
            }
            self.committed_height = height;
        }
        self.records.insert(height, record);
        Ok(())
    }

    /// Persists an OptCommitted record. No-op when the height is already
    /// committed; overwrites an OptCommitted sibling.
    pub fn opt_commit(&mut self, record: CommitRecord) -> bool {
        debug_assert_eq!(record.marker, Marker::OptCommitted);
        if record.height <= self.committed_height && self.records.contains_key(&record.height) {
            return false;
        }
        self.write(record).is_ok()
    }

    /// Marks `height` Committed. If an OptCommitted record of the same block
    /// exists it is upgraded in place, otherwise `fresh` is written.
    pub fn finalize(&mut self, fresh: CommitRecord) -> Result<(), StorageError> {
        let height = fresh.height;
        let upgrade = self
            .records
            .get(&height)
            .filter(|r| r.marker == Marker::OptCommitted && r.block_id == fresh.block_id)
            .map(|r| CommitRecord {
                marker: Marker::Committed,
                write_time: fresh.write_time,
                io_duration: fresh.io_duration,
                ..r.clone()
            });
        self.write(upgrade.unwrap_or(CommitRecord {
            marker: Marker::Committed,
            ..fresh
        }))
    }

    /// Deletes every OptCommitted record above `height`.
    pub fn revert_above(&mut self, height: u64) -> Result<usize, StorageError> {
        if let Some((&h, _)) = self
            .records
            .range(height + 1..)
            .find(|(_, r)| r.marker == Marker::Committed)
        {
            return Err(StorageError::RevertCommitted { height: h });
        }
        let doomed: Vec<u64> = self.records.range(height + 1..).map(|(&h, _)| h).collect();
        for h in &doomed {
            self.records.remove(h);
        }
        self.reverted += doomed.len() as u64;
        Ok(doomed.len())
    }

    pub fn committed_height(&self) -> u64 {
        self.committed_height
    }

    pub fn reverted_count(&self) -> u64 {
        self.reverted
    }

    pub fn records(&self) -> impl Iterator<Item = &CommitRecord> {
        self.records.values()
    }

    /// Newline-delimited `height,marker,digest,time` rows in height order.
    pub fn journal(&self) -> String {
        let mut out = String::new();
        for r in self.records.values() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.height,
                r.marker.as_str(),
                r.state_digest.to_hex(),
                r.write_time
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(height: u64, marker: Marker, tag: &[u8]) -> CommitRecord {
        CommitRecord {
            height,
            marker,
            block_id: Digest::of(tag),
            state_digest: Digest::of(&[tag, b"-state"].concat()),
            snapshot: None,
            write_time: height * 10,
            io_duration: 1,
        }
    }

    fn committed_through(h: u64) -> Storage {
        let mut s = Storage::new();
        for i in 0..=h {
            s.write(rec(i, Marker::Committed, &i.to_be_bytes()))
                .unwrap();
        }
        s
    }

    #[test]
    fn write_then_read() {
        let mut s = Storage::new();
        assert!(s.read(3).is_none());
        s.write(rec(0, Marker::Committed, b"g")).unwrap();
        assert!(s
            .read(0)
            .unwrap()
            .same_content(&rec(0, Marker::Committed, b"g")));
    }

    #[test]
    fn marker_only_moves_forward() {
        let mut s = committed_through(0);
        assert!(s.opt_commit(rec(1, Marker::OptCommitted, b"a")));
        s.finalize(rec(1, Marker::Committed, b"a")).unwrap();
        assert_eq!(s.read(1).unwrap().marker, Marker::Committed);
        assert_eq!(
            s.write(rec(1, Marker::OptCommitted, b"a")),
            Err(StorageError::AlreadyCommitted { height: 1 })
        );
        assert!(!s.opt_commit(rec(1, Marker::OptCommitted, b"b")));
        assert_eq!(s.read(1).unwrap().block_id, Digest::of(b"a"));
    }

    #[test]
    fn opt_committed_then_absent_commit() {
        let mut s = committed_through(0);
        s.opt_commit(rec(1, Marker::OptCommitted, b"a"));
        assert_eq!(s.read(1).unwrap().marker, Marker::OptCommitted);
        assert_eq!(s.committed_height(), 0);
    }

    #[test]
    fn finalize_without_opt_commit_writes_fresh() {
        let mut s = committed_through(0);
        s.finalize(rec(1, Marker::Committed, b"a")).unwrap();
        assert_eq!(s.read(1).unwrap().marker, Marker::Committed);
    }

    #[test]
    fn finalize_of_other_sibling_replaces_opt_record() {
        let mut s = committed_through(0);
        s.opt_commit(rec(1, Marker::OptCommitted, b"orphan"));
        s.finalize(rec(1, Marker::Committed, b"winner")).unwrap();
        assert_eq!(s.read(1).unwrap().block_id, Digest::of(b"winner"));
    }

    #[test]
    fn finalize_with_gap_is_rejected() {
        let mut s = committed_through(0);
        assert_eq!(
            s.finalize(rec(2, Marker::Committed, b"x")),
            Err(StorageError::HeightGap {
                height: 2,
                committed: 0
            })
        );
    }

    #[test]
    fn revert_removes_opt_records_above() {
        let mut s = committed_through(4);
        s.opt_commit(rec(5, Marker::OptCommitted, b"5"));
        s.opt_commit(rec(6, Marker::OptCommitted, b"6"));
        assert_eq!(s.revert_above(4), Ok(2));
        assert!(s.read(5).is_none() && s.read(6).is_none());
    }

    #[test]
    fn revert_keeps_committed_prefix() {
        let mut s = committed_through(5);
        s.opt_commit(rec(6, Marker::OptCommitted, b"6"));
        assert_eq!(s.revert_above(5), Ok(1));
        assert_eq!(s.read(5).unwrap().marker, Marker::Committed);
    }

    #[test]
    fn revert_into_committed_is_an_error() {
        let mut s = committed_through(5);
        assert_eq!(
            s.revert_above(3),
            Err(StorageError::RevertCommitted { height: 4 })
        );
        assert_eq!(s.committed_height(), 5);
    }

    #[test]
    fn revert_with_nothing_above_is_noop() {
        let mut s = committed_through(2);
        assert_eq!(s.revert_above(2), Ok(0));
    }

    #[test]
    fn journal_rows() {
        let s = committed_through(1);
        let j = s.journal();
        let lines: Vec<&str> = j.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("1,committed,"));
        assert!(lines[1].ends_with(",10"));
    }
}
