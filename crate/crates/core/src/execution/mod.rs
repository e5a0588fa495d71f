//! Deterministic block execution over an account-balance state machine.

mod merkle;

pub use merkle::{leaf_hash, node_hash, proof_depth, verify_inclusion, MerkleAccumulator};

use std::collections::BTreeMap;

use im::{OrdMap, Vector};
use serde::{Deserialize, Serialize};

use crate::hash::{Digest, Preimage};
use crate::types::{AccountId, Block, BlockId, InclusionProof, Micros, Transaction, TxnKey};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub key: TxnKey,
    pub success: bool,
}

/// Blockchain state after a block: balances, nonces, and the committed
/// transaction log with its accumulator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "StateRepr", from = "StateRepr")]
pub struct ChainState {
    balances: OrdMap<AccountId, u64>,
    next_nonce: OrdMap<AccountId, u64>,
    log: MerkleAccumulator,
    entries: Vector<LogEntry>,
    positions: OrdMap<TxnKey, u64>,
    /// Id of the block whose execution produced this state.
    tip: BlockId,
    accounts_hash: Digest,
    digest: Digest,
}

/// Flat encoding; derived fields are recomputed on load.
#[derive(Serialize, Deserialize)]
struct StateRepr {
    balances: Vec<(u64, u64)>,
    next_nonce: Vec<(u64, u64)>,
    log: MerkleAccumulator,
    entries: Vec<LogEntry>,
    tip: BlockId,
}

impl From<ChainState> for StateRepr {
    fn from(s: ChainState) -> Self {
        StateRepr {
            balances: s.balances.iter().map(|(a, b)| (a.0, *b)).collect(),
            next_nonce: s.next_nonce.iter().map(|(a, n)| (a.0, *n)).collect(),
            log: s.log,
            entries: s.entries.iter().copied().collect(),
            tip: s.tip,
        }
    }
}

impl From<StateRepr> for ChainState {
    fn from(r: StateRepr) -> Self {
        let mut positions = OrdMap::new();
        for (i, e) in r.entries.iter().enumerate() {
            positions.entry(e.key).or_insert(i as u64);
        }
        let mut s = ChainState {
            balances: r
                .balances
                .into_iter()
                .map(|(a, b)| (AccountId(a), b))
                .collect(),
            next_nonce: r
                .next_nonce
                .into_iter()
                .map(|(a, n)| (AccountId(a), n))
                .collect(),
            log: r.log,
            entries: r.entries.into_iter().collect(),
            positions,
            tip: r.tip,
            accounts_hash: Digest::ZERO,
            digest: Digest::ZERO,
        };
        s.reseal();
        s
    }
}

impl Default for ChainState {
    fn default() -> Self {
        Self::with_balances(BTreeMap::new())
    }
}

impl ChainState {
    pub fn with_balances(balances: BTreeMap<AccountId, u64>) -> Self {
        let mut s = ChainState {
            balances: balances.into_iter().collect(),
            next_nonce: OrdMap::new(),
            log: MerkleAccumulator::new(),
            entries: Vector::new(),
            positions: OrdMap::new(),
            tip: Digest::ZERO,
            accounts_hash: Digest::ZERO,
            digest: Digest::ZERO,
        };
        s.reseal();
        s
    }

    pub(crate) fn set_tip(&mut self, tip: BlockId) {
        self.tip = tip;
    }

    pub fn tip(&self) -> BlockId {
        self.tip
    }

    pub fn balance(&self, account: AccountId) -> u64 {
        self.balances.get(&account).copied().unwrap_or(0)
    }

    pub fn next_nonce(&self, account: AccountId) -> u64 {
        self.next_nonce.get(&account).copied().unwrap_or(0)
    }

    pub fn total_supply(&self) -> u128 {
        self.balances.values().map(|&b| b as u128).sum()
    }

    /// Committed-log length.
    pub fn version(&self) -> u64 {
        self.log.len()
    }

    pub fn log_root(&self) -> Digest {
        self.log.root()
    }

    pub fn accounts_hash(&self) -> Digest {
        self.accounts_hash
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    pub fn entry(&self, position: u64) -> Option<LogEntry> {
        self.entries.get(position as usize).copied()
    }

    /// First log position holding `key`.
    pub fn position_of(&self, key: &TxnKey) -> Option<u64> {
        self.positions.get(key).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = &LogEntry> {
        self.entries.iter()
    }

    fn compute_accounts_hash(&self) -> Digest {
        let mut p = Preimage::tagged("accounts");
        for (acct, bal) in self.balances.iter() {
            p.u64(acct.0).u64(*bal);
        }
        p.field(b"nonces");
        for (acct, n) in self.next_nonce.iter() {
            p.u64(acct.0).u64(*n);
        }
        p.finish()
    }

    fn reseal(&mut self) {
        self.accounts_hash = self.compute_accounts_hash();
        self.digest = state_digest_of(&self.log.root(), self.version(), &self.accounts_hash);
    }

    /// Recomputes the digest from the fields; equal to [`Self::digest`]
    /// for any well-formed state.
    pub fn recompute_digest(&self) -> Digest {
        state_digest_of(
            &self.log.root(),
            self.version(),
            &self.compute_accounts_hash(),
        )
    }

    fn apply(&mut self, txn: &Transaction) -> bool {
        let expected = self.next_nonce(txn.sender);
        if txn.nonce < expected {
            return false;
        }
        self.next_nonce.insert(txn.sender, txn.nonce + 1);
        let from = self.balance(txn.sender);
        if from < txn.amount {
            return false;
        }
        if txn.sender == txn.recipient {
            return true;
        }
        let to = self.balance(txn.recipient);
        let Some(to_after) = to.checked_add(txn.amount) else {
            return false;
        };
        self.balances.insert(txn.sender, from - txn.amount);
        self.balances.insert(txn.recipient, to_after);
        true
    }

    fn append(&mut self, txn: &Transaction, success: bool) {
        let position = self.log.len();
        self.log.append(leaf_hash(txn));
        self.entries.push_back(LogEntry {
            key: txn.key(),
            success,
        });
        self.positions.entry(txn.key()).or_insert(position);
    }
}

/// `hash(log_root || version || accounts_hash)`.
pub fn state_digest_of(log_root: &Digest, version: u64, accounts_hash: &Digest) -> Digest {
    Preimage::tagged("state")
        .digest(log_root)
        .u64(version)
        .digest(accounts_hash)
        .finish()
}

pub fn state_digest(state: &ChainState) -> Digest {
    state.digest()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasConfig {
    pub per_txn_gas: u64,
    pub block_gas_limit: u64,
    /// Virtual microseconds per unit of gas.
    pub exec_time_per_gas: Micros,
}

impl Default for GasConfig {
    fn default() -> Self {
        GasConfig {
            per_txn_gas: 1,
            block_gas_limit: 1_000,
            exec_time_per_gas: 20,
        }
    }
}

impl GasConfig {
    pub fn max_block_txns(&self) -> usize {
        (self.block_gas_limit / self.per_txn_gas.max(1)) as usize
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.per_txn_gas == 0 {
            return Err("per_txn_gas must be positive".into());
        }
        if self.block_gas_limit < self.per_txn_gas {
            return Err("block_gas_limit must be at least per_txn_gas".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExecOutcome {
    pub state: ChainState,
    /// Transactions finalized into the log (successes and failures).
    pub executed: usize,
    pub gas_used: u64,
    pub duration: Micros,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExecError {
    #[error("block {block:?} does not extend state tip {tip:?}")]
    ParentMismatch { block: BlockId, tip: BlockId },
}

/// Executes `block` on its parent's state. Transactions are finalized in
/// payload order until the next one would push gas past the block limit.
pub fn execute(
    state: &ChainState,
    block: &Block,
    gas: &GasConfig,
) -> Result<ExecOutcome, ExecError> {
    if block.parent != state.tip {
        return Err(ExecError::ParentMismatch {
            block: block.id,
            tip: state.tip,
        });
    }
    let mut next = state.clone();
    let mut gas_used = 0u64;
    let mut executed = 0usize;
    for txn in block.payload.iter() {
        if gas_used + gas.per_txn_gas > gas.block_gas_limit {
            break;
        }
        gas_used += gas.per_txn_gas;
        let ok = next.apply(txn);
        next.append(txn, ok);
        executed += 1;
    }
    next.tip = block.id;
    next.reseal();
    Ok(ExecOutcome {
        state: next,
        executed,
        gas_used,
        duration: gas_used * gas.exec_time_per_gas,
    })
}

pub fn inclusion_proof(state: &ChainState, position: u64) -> Result<InclusionProof, ProofError> {
    state.log.prove(position).ok_or(ProofError::OutOfRange {
        position,
        version: state.version(),
    })
}

pub fn verify_proof(proof: &InclusionProof, position: u64, txn: &Transaction) -> bool {
    verify_inclusion(proof, position, txn)
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ProofError {
    #[error("position {position} out of range for log of length {version}")]
    OutOfRange { position: u64, version: u64 },
}
