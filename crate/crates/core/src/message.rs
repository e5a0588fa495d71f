//! Wire messages exchanged between simulated nodes.

use serde::{Deserialize, Serialize};

use crate::consensus::{Proposal, TimeoutMsg, VoteMsg};
use crate::hash::{Digest, Preimage};
use crate::multisig::{AggSignature, Signature};
use crate::types::{Block, BlockId, InclusionProof, Micros, NodeId, Transaction};

pub const WIRE_VERSION: u16 = 1;

/// What a fullnode attaches to a query response so the client can check
/// the proof without trusting the fullnode: the committed log root and
/// version, the accounts hash, and the state certificate over their
/// combined digest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateAttestation {
    pub block_id: BlockId,
    pub log_root: Digest,
    pub version: u64,
    pub accounts_hash: Digest,
    pub sig_st: AggSignature,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub position: u64,
    pub txn: Transaction,
    pub success: bool,
    pub proof: InclusionProof,
    pub attestation: StateAttestation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Message {
    Submit {
        txn: Transaction,
    },
    /// Validator-to-validator transaction dissemination.
    Batch {
        txns: Vec<Transaction>,
    },
    Proposal(Box<Proposal>),
    Vote(VoteMsg),
    OrderVote(VoteMsg),
    Timeout(Box<TimeoutMsg>),
    BlockRequest {
        id: BlockId,
    },
    BlockResponse {
        block: Block,
        round: u64,
    },
    CertifyVote {
        block_id: BlockId,
        sig: Signature,
    },
    Proposed {
        block: Block,
    },
    Committed {
        block: Block,
    },
    Subscribe {
        next_height: u64,
    },
    /// Long-poll for a transaction's commit; answered once it is committed.
    Query {
        txn: Transaction,
    },
    Response(Box<Response>),
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Submit { .. } => "submit",
            Message::Batch { .. } => "batch",
            Message::Proposal(_) => "proposal",
            Message::Vote(_) => "vote",
            Message::OrderVote(_) => "order_vote",
            Message::Timeout(_) => "timeout",
            Message::BlockRequest { .. } => "block_request",
            Message::BlockResponse { .. } => "block_response",
            Message::CertifyVote { .. } => "certify_vote",
            Message::Proposed { .. } => "proposed",
            Message::Committed { .. } => "committed",
            Message::Subscribe { .. } => "subscribe",
            Message::Query { .. } => "query",
            Message::Response(_) => "response",
        }
    }

    /// Cheap identifying digest of the content, used for trace hashing.
    pub fn fingerprint(&self) -> Digest {
        let mut p = Preimage::tagged(self.kind());
        match self {
            Message::Submit { txn } => {
                p.u64(txn.sender.0).u64(txn.nonce);
            }
            Message::Batch { txns } => {
                p.u64(txns.len() as u64);
                for t in txns {
                    p.u64(t.sender.0).u64(t.nonce);
                }
            }
            Message::Proposal(prop) => {
                p.digest(&prop.block.id).u64(prop.round);
            }
            Message::Vote(v) | Message::OrderVote(v) => {
                p.digest(&v.block_id)
                    .u64(v.round)
                    .field(&v.sig.signer().encode());
            }
            Message::Timeout(t) => {
                p.u64(t.round)
                    .u64(t.high_qc.round)
                    .field(&t.sig.signer().encode());
            }
            Message::BlockRequest { id } => {
                p.digest(id);
            }
            Message::BlockResponse { block, round } => {
                p.digest(&block.id).u64(*round);
            }
            Message::CertifyVote { block_id, sig } => {
                p.digest(block_id).digest(&sig.message_digest());
            }
            Message::Proposed { block } | Message::Committed { block } => {
                p.digest(&block.id);
            }
            Message::Subscribe { next_height } => {
                p.u64(*next_height);
            }
            Message::Query { txn } => {
                p.u64(txn.sender.0).u64(txn.nonce);
            }
            Message::Response(r) => {
                p.u64(r.position).digest(&r.attestation.log_root);
            }
        }
        p.finish()
    }

    /// Every single signature carried by the message, for the signing audit.
    pub fn signatures(&self) -> Vec<Signature> {
        let mut out = Vec::new();
        let from_block = |b: &Block, out: &mut Vec<Signature>| {
            out.extend(b.sig_blk);
            out.extend(b.cert_votes.values().copied());
        };
        match self {
            Message::Proposal(p) => {
                from_block(&p.block, &mut out);
                if let Some(tc) = &p.tc {
                    out.extend(tc.entries.values().map(|(_, s)| *s));
                }
            }
            Message::Vote(v) | Message::OrderVote(v) => out.push(v.sig),
            Message::Timeout(t) => out.push(t.sig),
            Message::CertifyVote { sig, .. } => out.push(*sig),
            Message::BlockResponse { block, .. }
            | Message::Proposed { block }
            | Message::Committed { block } => from_block(block, &mut out),
            _ => {}
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub version: u16,
    pub from: NodeId,
    pub to: NodeId,
    pub sent_at: Micros,
    pub message: Message,
}

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("unsupported wire version {0}")]
    Version(u16),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Envelope {
    pub fn new(from: NodeId, to: NodeId, sent_at: Micros, message: Message) -> Self {
        Envelope {
            version: WIRE_VERSION,
            from,
            to,
            sent_at,
            message,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("messages always serialize")
    }

    pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
        let env: Envelope = serde_json::from_slice(bytes)?;
        if env.version != WIRE_VERSION {
            return Err(WireError::Version(env.version));
        }
        Ok(env)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multisig::KeyPair;

    #[test]
    fn envelope_round_trip() {
        let kp = KeyPair::derive(NodeId::validator(2), 1);
        let id = Digest::of(b"b");
        let msg = Message::Vote(VoteMsg {
            block_id: id,
            round: 4,
            sig: kp.sign_digest(id),
        });
        let env = Envelope::new(NodeId::validator(2), NodeId::validator(0), 17, msg);
        let back = Envelope::decode(&env.encode()).unwrap();
        assert_eq!(back.message.fingerprint(), env.message.fingerprint());
        assert_eq!(back.sent_at, 17);
    }

    #[test]
    fn wrong_version_rejected() {
        let env = Envelope::new(
            NodeId::client(0),
            NodeId::fullnode(0),
            0,
            Message::Subscribe { next_height: 1 },
        );
        let mut v: serde_json::Value = serde_json::from_slice(&env.encode()).unwrap();
        v["version"] = 9.into();
        let bytes = serde_json::to_vec(&v).unwrap();
        assert!(matches!(
            Envelope::decode(&bytes),
            Err(WireError::Version(9))
        ));
    }
}
