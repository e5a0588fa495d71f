use std::collections::{BTreeMap, BTreeSet};

use crate::types::{Transaction, TxnKey};

/// Pending transactions in arrival order, deduplicated by `(sender, nonce)`.
#[derive(Debug, Default)]
pub struct Mempool {
    pending: BTreeMap<TxnKey, (u64, Transaction)>,
    fifo: BTreeMap<u64, TxnKey>,
    next_seq: u64,
    ordered: BTreeSet<TxnKey>,
}

impl Mempool {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false for duplicates and already-ordered transactions.
    pub fn insert(&mut self, txn: Transaction) -> bool {
        let key = txn.key();
        if self.ordered.contains(&key) || self.pending.contains_key(&key) {
            return false;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.fifo.insert(seq, key);
        self.pending.insert(key, (seq, txn));
        true
    }

    pub fn contains(&self, key: &TxnKey) -> bool {
        self.pending.contains_key(key)
    }

    pub fn is_ordered(&self, key: &TxnKey) -> bool {
        self.ordered.contains(key)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn mark_ordered(&mut self, key: TxnKey) {
        if let Some((seq, _)) = self.pending.remove(&key) {
            self.fifo.remove(&seq);
        }
        self.ordered.insert(key);
    }

    /// Oldest pending transactions not in `exclude`, at most `max`.
    pub fn select(&self, exclude: &BTreeSet<TxnKey>, max: usize) -> Vec<Transaction> {
        self.fifo
            .values()
            .filter(|k| !exclude.contains(k))
            .take(max)
            .map(|k| self.pending[k].1.clone())
            .collect()
    }

    pub fn has_selectable(&self, exclude: &BTreeSet<TxnKey>) -> bool {
        self.fifo.values().any(|k| !exclude.contains(k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_is_ignored() {
        let mut m = Mempool::new();
        assert!(m.insert(Transaction::transfer(1, 2, 3, 0)));
        assert!(!m.insert(Transaction::transfer(1, 2, 3, 0)));
        assert_eq!(m.select(&BTreeSet::new(), 10).len(), 1);
    }

    #[test]
    fn fifo_order_and_exclusion() {
        let mut m = Mempool::new();
        m.insert(Transaction::transfer(5, 0, 1, 0));
        m.insert(Transaction::transfer(1, 0, 1, 0));
        m.insert(Transaction::transfer(3, 0, 1, 0));
        let first = Transaction::transfer(5, 0, 1, 0).key();
        let picked: Vec<u64> = m
            .select(&BTreeSet::from([first]), 10)
            .iter()
            .map(|t| t.sender.0)
            .collect();
        assert_eq!(picked, vec![1, 3]);
    }

    #[test]
    fn ordered_transactions_never_return() {
        let mut m = Mempool::new();
        let t = Transaction::transfer(1, 2, 3, 0);
        m.insert(t.clone());
        m.mark_ordered(t.key());
        assert!(m.is_empty());
        assert!(!m.insert(t));
    }
}
