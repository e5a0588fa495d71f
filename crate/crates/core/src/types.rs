//! Shared domain types: node identities, transactions, blocks and block
//! identity.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::execution::ChainState;
use crate::hash::{Digest, Preimage};
use crate::multisig::{AggSignature, Signature};

/// Virtual time and durations, in integer microseconds.
pub type Micros = u64;

pub const MILLI: Micros = 1_000;
pub const SECOND: Micros = 1_000_000;

pub type BlockId = Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Validator,
    Fullnode,
    Client,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Validator => 0,
            Role::Fullnode => 1,
            Role::Client => 2,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId {
    pub role: Role,
    pub index: u32,
}

impl NodeId {
    pub const fn validator(index: u32) -> Self {
        NodeId {
            role: Role::Validator,
            index,
        }
    }

    pub const fn fullnode(index: u32) -> Self {
        NodeId {
            role: Role::Fullnode,
            index,
        }
    }

    pub const fn client(index: u32) -> Self {
        NodeId {
            role: Role::Client,
            index,
        }
    }

    pub fn is_validator(&self) -> bool {
        self.role == Role::Validator
    }

    /// 9-byte encoding: role tag then big-endian index.
    pub fn encode(&self) -> [u8; 9] {
        let mut out = [0u8; 9];
        out[0] = self.role.tag();
        out[1..].copy_from_slice(&(self.index as u64).to_be_bytes());
        out
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.role {
            Role::Validator => "v",
            Role::Fullnode => "fn",
            Role::Client => "c",
        };
        write!(f, "{prefix}{}", self.index)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("bad node name {0:?}: expected v<i>, fn<i> or c<i>")]
pub struct ParseNodeIdError(pub String);

impl std::str::FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseNodeIdError(s.to_string());
        let (role, digits) = if let Some(rest) = s.strip_prefix("fn") {
            (Role::Fullnode, rest)
        } else if let Some(rest) = s.strip_prefix('v') {
            (Role::Validator, rest)
        } else if let Some(rest) = s.strip_prefix('c') {
            (Role::Client, rest)
        } else {
            return Err(err());
        };
        let index = digits.parse().map_err(|_| err())?;
        Ok(NodeId { role, index })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AccountId(pub u64);

/// `(sender, nonce)` identifies a transaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxnKey {
    pub sender: AccountId,
    pub nonce: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub sender: AccountId,
    pub recipient: AccountId,
    pub amount: u64,
    pub nonce: u64,
    pub payload_bytes: Bytes,
    pub submit_time: Micros,
}

pub const DEFAULT_PAYLOAD_LEN: usize = 300;

impl Transaction {
    pub fn transfer(sender: u64, recipient: u64, amount: u64, nonce: u64) -> Self {
        Transaction {
            sender: AccountId(sender),
            recipient: AccountId(recipient),
            amount,
            nonce,
            payload_bytes: Bytes::from(vec![0u8; DEFAULT_PAYLOAD_LEN]),
            submit_time: 0,
        }
    }

    pub fn key(&self) -> TxnKey {
        TxnKey {
            sender: self.sender,
            nonce: self.nonce,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut p = Preimage::new();
        p.u64(self.sender.0)
            .u64(self.recipient.0)
            .u64(self.amount)
            .u64(self.nonce)
            .field(&self.payload_bytes)
            .u64(self.submit_time);
        p.into_bytes()
    }
}

/// Byte-exact preimage of a block id: proposer, height, parent and payload,
/// each written as an 8-byte big-endian length and the field bytes. The
/// payload field holds the transaction count followed by each
/// length-prefixed transaction encoding.
pub fn block_id_preimage(
    proposer: NodeId,
    height: u64,
    parent: &Digest,
    payload: &[Transaction],
) -> Vec<u8> {
    let mut txns = Preimage::new();
    txns.u64(payload.len() as u64);
    for t in payload {
        txns.field(&t.encode());
    }
    let mut p = Preimage::new();
    p.field(&proposer.encode())
        .u64(height)
        .digest(parent)
        .field(txns.bytes());
    p.into_bytes()
}

pub fn compute_block_id(
    proposer: NodeId,
    height: u64,
    parent: &Digest,
    payload: &[Transaction],
) -> BlockId {
    Digest::of(&block_id_preimage(proposer, height, parent, payload))
}

/// Proof that a block was ordered: an aggregate over `block_id` of
/// 2f+1 order votes. `block_id` may name a descendant, since ordering a
/// block orders its whole ancestry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderProof {
    pub block_id: BlockId,
    pub agg: AggSignature,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Block {
    pub id: BlockId,
    pub proposer: NodeId,
    pub height: u64,
    pub parent: BlockId,
    pub payload: Arc<Vec<Transaction>>,
    /// Proposer signature over `id`; absent only for genesis.
    pub sig_blk: Option<Signature>,
    pub sig_od: Option<OrderProof>,
    #[serde(skip)]
    pub state: Option<Arc<ChainState>>,
    #[serde(with = "crate::serde_pairs")]
    pub cert_votes: BTreeMap<NodeId, Signature>,
    pub sig_st: Option<AggSignature>,
}

impl Block {
    /// An unsigned block with no certificates attached.
    pub fn new(proposer: NodeId, height: u64, parent: BlockId, payload: Vec<Transaction>) -> Self {
        let id = compute_block_id(proposer, height, &parent, &payload);
        Block {
            id,
            proposer,
            height,
            parent,
            payload: Arc::new(payload),
            sig_blk: None,
            sig_od: None,
            state: None,
            cert_votes: BTreeMap::new(),
            sig_st: None,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.height == 0 && self.parent == Digest::ZERO
    }

    pub fn id_matches_contents(&self) -> bool {
        self.id == compute_block_id(self.proposer, self.height, &self.parent, &self.payload)
    }

    /// The header and payload only, as proposed: certificates and state
    /// dropped.
    pub fn proposal_view(&self) -> Block {
        Block {
            sig_od: None,
            state: None,
            cert_votes: BTreeMap::new(),
            sig_st: None,
            ..self.clone()
        }
    }

    /// Drops the executed state before the block is shipped to fullnodes.
    pub fn without_state(&self) -> Block {
        Block {
            state: None,
            cert_votes: BTreeMap::new(),
            ..self.clone()
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GenesisError {
    #[error("negative initial balance {balance} for account {account}")]
    NegativeBalance { account: u64, balance: i128 },
}

/// The height-0 block holding the initial state; its order and state
/// certificates are the genesis sentinels.
pub fn genesis_block(initial_accounts: &BTreeMap<u64, i128>) -> Result<Block, GenesisError> {
    let mut balances = BTreeMap::new();
    for (&account, &balance) in initial_accounts {
        if balance < 0 {
            return Err(GenesisError::NegativeBalance { account, balance });
        }
        balances.insert(AccountId(account), balance as u64);
    }
    Ok(genesis_from_state(ChainState::with_balances(balances)))
}

pub fn genesis_from_state(mut state: ChainState) -> Block {
    let mut b = Block::new(NodeId::validator(0), 0, Digest::ZERO, Vec::new());
    state.set_tip(b.id);
    b.sig_od = Some(OrderProof {
        block_id: b.id,
        agg: AggSignature::genesis(),
    });
    b.sig_st = Some(AggSignature::genesis());
    b.state = Some(Arc::new(state));
    b
}

/// Merkle inclusion proof of one committed-log entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InclusionProof {
    pub position: u64,
    pub leaf_digest: Digest,
    pub sibling_path: Vec<Digest>,
    pub root: Digest,
    /// Number of leaves in the log the proof was cut from.
    pub leaf_count: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn genesis_id() -> BlockId {
        genesis_block(&BTreeMap::new()).unwrap().id
    }

    #[test]
    fn block_id_is_deterministic() {
        let parent = genesis_id();
        let txns = vec![Transaction::transfer(1, 2, 5, 0)];
        let a = compute_block_id(NodeId::validator(1), 1, &parent, &txns);
        let b = compute_block_id(NodeId::validator(1), 1, &parent, &txns);
        assert_eq!(a, b);
    }

    #[test]
    fn block_id_changes_with_height() {
        let parent = genesis_id();
        let a = compute_block_id(NodeId::validator(0), 1, &parent, &[]);
        let b = compute_block_id(NodeId::validator(0), 2, &parent, &[]);
        assert_ne!(a, b);
    }

    #[test]
    fn block_id_changes_with_each_field() {
        let parent = genesis_id();
        let txns = vec![Transaction::transfer(1, 2, 5, 0)];
        let base = compute_block_id(NodeId::validator(0), 1, &parent, &txns);
        assert_ne!(
            base,
            compute_block_id(NodeId::validator(1), 1, &parent, &txns)
        );
        assert_ne!(
            base,
            compute_block_id(NodeId::validator(0), 1, &Digest::ZERO, &txns)
        );
        assert_ne!(
            base,
            compute_block_id(NodeId::validator(0), 1, &parent, &[])
        );
        let mut other = txns.clone();
        other[0].amount = 6;
        assert_ne!(
            base,
            compute_block_id(NodeId::validator(0), 1, &parent, &other)
        );
    }

    #[test]
    fn node_names_round_trip() {
        for id in [
            NodeId::validator(3),
            NodeId::fullnode(0),
            NodeId::client(12),
        ] {
            assert_eq!(id.to_string().parse::<NodeId>().unwrap(), id);
        }
        assert!("x1".parse::<NodeId>().is_err());
        assert!("v".parse::<NodeId>().is_err());
    }

    #[test]
    fn genesis_shape() {
        let g = genesis_block(&BTreeMap::new()).unwrap();
        assert_eq!(g.height, 0);
        assert_eq!(g.parent, Digest::ZERO);
        assert!(g.payload.is_empty());
        assert_eq!(g.state.as_ref().unwrap().version(), 0);
        assert!(g.sig_od.is_some() && g.sig_st.is_some());
        assert!(g.is_genesis());
    }

    #[test]
    fn genesis_balances() {
        let g = genesis_block(&BTreeMap::from([(1, 10), (2, 0)])).unwrap();
        let s = g.state.unwrap();
        assert_eq!(s.balance(AccountId(1)), 10);
        assert_eq!(s.balance(AccountId(2)), 0);
    }

    #[test]
    fn genesis_is_deterministic() {
        let m = BTreeMap::from([(1, 10), (2, 0)]);
        assert_eq!(genesis_block(&m).unwrap().id, genesis_block(&m).unwrap().id);
    }

    #[test]
    fn genesis_rejects_negative_balance() {
        let err = genesis_block(&BTreeMap::from([(7, -1)])).unwrap_err();
        assert_eq!(
            err,
            GenesisError::NegativeBalance {
                account: 7,
                balance: -1
            }
        );
    }

    #[test]
    fn stripping_state_keeps_certificates() {
        let g = genesis_block(&BTreeMap::new()).unwrap();
        let s = g.without_state();
        assert!(s.state.is_none());
        assert!(s.sig_st.is_some());
    }
}
