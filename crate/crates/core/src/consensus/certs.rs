use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::hash::{Digest, Preimage};
use crate::multisig::{verify_agg_digest, AggSignature, Signature, ValidatorSet};
use crate::types::{Block, BlockId, NodeId};

/// First-phase vote message: distinct from the raw id signed by the
/// proposer so a proposal signature never doubles as a vote.
pub fn vote_digest(block_id: &BlockId, round: u64) -> Digest {
    Preimage::tagged("vote")
        .digest(block_id)
        .u64(round)
        .finish()
}

pub fn order_vote_digest(block_id: &BlockId) -> Digest {
    Preimage::tagged("order-vote").digest(block_id).finish()
}

pub fn timeout_digest(round: u64, high_qc_round: u64) -> Digest {
    Preimage::tagged("timeout")
        .u64(round)
        .u64(high_qc_round)
        .finish()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuorumCert {
    pub block_id: BlockId,
    pub round: u64,
    pub agg: AggSignature,
}

impl QuorumCert {
    pub fn genesis(genesis_id: BlockId) -> Self {
        QuorumCert {
            block_id: genesis_id,
            round: 0,
            agg: AggSignature::genesis(),
        }
    }

    pub fn verify(&self, set: &ValidatorSet, quorum: usize) -> bool {
        if self.agg.is_genesis() {
            return self.round == 0;
        }
        verify_agg_digest(
            &self.agg,
            &vote_digest(&self.block_id, self.round),
            set,
            quorum,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutMsg {
    pub round: u64,
    pub high_qc: QuorumCert,
    pub sig: Signature,
}

impl TimeoutMsg {
    pub fn verify(&self, set: &ValidatorSet, quorum: usize) -> bool {
        set.verify_member(&self.sig, &timeout_digest(self.round, self.high_qc.round))
            && self.high_qc.verify(set, quorum)
    }
}

/// 2f+1 timeouts for one round. Each entry is signed over its own
/// reported high-QC round, so the entries are kept individually.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeoutCert {
    pub round: u64,
    #[serde(with = "crate::serde_pairs")]
    pub entries: BTreeMap<NodeId, (u64, Signature)>,
}

impl TimeoutCert {
    pub fn max_high_qc_round(&self) -> u64 {
        self.entries.values().map(|(r, _)| *r).max().unwrap_or(0)
    }

    pub fn verify(&self, set: &ValidatorSet, quorum: usize) -> bool {
        self.entries.len() >= quorum
            && self.entries.iter().all(|(id, (hqc, sig))| {
                sig.signer() == *id && set.verify_member(sig, &timeout_digest(self.round, *hqc))
            })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Proposal {
    pub block: Block,
    pub round: u64,
    /// Certificate of the parent, absent for optimistic proposals whose
    /// parent has not been certified yet.
    pub parent_qc: Option<QuorumCert>,
    /// Set when the previous round ended by timeout.
    pub tc: Option<TimeoutCert>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteMsg {
    pub block_id: BlockId,
    pub round: u64,
    pub sig: Signature,
}
