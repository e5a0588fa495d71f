//! Append-only binary Merkle accumulator over the committed transaction log.
//!
//! Odd levels are padded by pairing the last node with itself. The published
//! root additionally binds the leaf count, so a padded duplicate can never
//! pass as an extra leaf.
//!
//! Complete subtree nodes are kept per level in persistent vectors, which
//! makes cloning the accumulator O(1) and proofs O(log n).

use im::Vector;
use serde::{Deserialize, Serialize};

use crate::hash::{Digest, Preimage};
use crate::types::{InclusionProof, Transaction};

const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;

pub fn leaf_hash(txn: &Transaction) -> Digest {
    let enc = txn.encode();
    let mut buf = Vec::with_capacity(enc.len() + 1);
    buf.push(LEAF_TAG);
    buf.extend_from_slice(&enc);
    Digest::of(&buf)
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut buf = [0u8; 65];
    buf[0] = NODE_TAG;
    buf[1..33].copy_from_slice(&left.0);
    buf[33..].copy_from_slice(&right.0);
    Digest::of(&buf)
}

/// Root of the padded tree over `leaves` with the count bound in.
pub fn bind_count(tree_root: &Digest, leaf_count: u64) -> Digest {
    Preimage::tagged("log-root")
        .u64(leaf_count)
        .digest(tree_root)
        .finish()
}

/// Number of sibling hashes in a proof for a log of `leaf_count` leaves.
pub fn proof_depth(leaf_count: u64) -> usize {
    let mut depth = 0;
    let mut width = leaf_count;
    while width > 1 {
        width = width.div_ceil(2);
        depth += 1;
    }
    depth
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MerkleAccumulator {
    /// `levels[l]` holds the complete nodes at level `l`; level 0 is leaves.
    levels: Vec<Vector<Digest>>,
    leaf_count: u64,
}

impl MerkleAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.leaf_count
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_count == 0
    }

    pub fn append(&mut self, leaf: Digest) {
        self.leaf_count += 1;
        let mut level = 0;
        let mut node = leaf;
        loop {
            if self.levels.len() == level {
                self.levels.push(Vector::new());
            }
            let nodes = &mut self.levels[level];
            nodes.push_back(node);
            let len = nodes.len();
            if !len.is_multiple_of(2) {
                break;
            }
            node = node_hash(&nodes[len - 2], &nodes[len - 1]);
            level += 1;
        }
    }

    fn complete(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, |v| v.len())
    }

    /// The padded right-edge node at every level, `None` where the level has
    /// no incomplete node. The last entry is the tree root.
    fn right_edge(&self) -> Vec<Option<Digest>> {
        let mut out = Vec::new();
        let mut carry: Option<Digest> = None;
        let mut level = 0;
        loop {
            out.push(carry);
            let c = self.complete(level);
            let total = c + carry.is_some() as usize;
            if total <= 1 {
                break;
            }
            carry = if c % 2 == 1 {
                let last = self.levels[level][c - 1];
                Some(node_hash(&last, &carry.unwrap_or(last)))
            } else {
                carry.map(|x| node_hash(&x, &x))
            };
            level += 1;
        }
        out
    }

    fn tree_root(&self) -> Digest {
        if self.leaf_count == 0 {
            return Digest::ZERO;
        }
        let edge = self.right_edge();
        let top = edge.len() - 1;
        edge[top].unwrap_or_else(|| self.levels[top][0])
    }

    pub fn root(&self) -> Digest {
        bind_count(&self.tree_root(), self.leaf_count)
    }

    pub fn leaf(&self, position: u64) -> Option<Digest> {
        self.levels.first()?.get(position as usize).copied()
    }

    pub fn prove(&self, position: u64) -> Option<InclusionProof> {
        if position >= self.leaf_count {
            return None;
        }
        let edge = self.right_edge();
        let node_at = |level: usize, idx: usize| -> Option<Digest> {
            let c = self.complete(level);
            if idx < c {
                Some(self.levels[level][idx])
            } else if idx == c {
                edge[level]
            } else {
                None
            }
        };
        let mut path = Vec::new();
        for level in 0..edge.len() - 1 {
            let idx = (position >> level) as usize;
            let sibling = node_at(level, idx ^ 1).or_else(|| node_at(level, idx))?;
            path.push(sibling);
        }
        Some(InclusionProof {
            position,
            leaf_digest: self.leaf(position)?,
            sibling_path: path,
            root: self.root(),
            leaf_count: self.leaf_count,
        })
    }
}

/// Checks that `txn` sits at `position` under `proof.root`.
pub fn verify_inclusion(proof: &InclusionProof, position: u64, txn: &Transaction) -> bool {
    let leaf = leaf_hash(txn);
    if leaf != proof.leaf_digest
        || position >= proof.leaf_count
        || proof.sibling_path.len() != proof_depth(proof.leaf_count)
    {
        return false;
    }
    let mut acc = leaf;
    for (level, sibling) in proof.sibling_path.iter().enumerate() {
        acc = if (position >> level) & 1 == 0 {
            node_hash(&acc, sibling)
        } else {
            node_hash(sibling, &acc)
        };
    }
    bind_count(&acc, proof.leaf_count) == proof.root
}
