use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::execution::{state_digest_of, verify_proof};
use crate::message::{Message, Response};
use crate::multisig::{verify_agg_digest, ValidatorSet};
use crate::simnet::{Ctx, NodeTimer, Workload};
use crate::types::{Micros, NodeId, Transaction, TxnKey};

/// One confirmed transaction as seen by its client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub key: TxnKey,
    pub submitted: Micros,
    pub confirmed: Micros,
    pub position: u64,
    pub success: bool,
}

impl LatencySample {
    pub fn latency(&self) -> Micros {
        self.confirmed - self.submitted
    }
}

/// Accepts a response only if the proof places `txn` under the attested
/// log root and 2f+1 validators signed the resulting state digest.
pub fn check_response(r: &Response, txn: &Transaction, set: &ValidatorSet, quorum: usize) -> bool {
    let a = &r.attestation;
    r.txn == *txn
        && r.proof.root == a.log_root
        && r.proof.leaf_count == a.version
        && verify_proof(&r.proof, r.position, txn)
        && verify_agg_digest(
            &a.sig_st,
            &state_digest_of(&a.log_root, a.version, &a.accounts_hash),
            set,
            quorum,
        )
}

struct Pending {
    txn: Transaction,
    first_submit: Micros,
    attempt: u32,
}

/// Open-loop client: submits its share of the workload on schedule and
/// long-polls a server for each transaction's verified commit.
pub struct Client {
    id: NodeId,
    set: Arc<ValidatorSet>,
    quorum: usize,
    /// Servers in preference order (fullnodes, or validators in direct mode).
    peers: Vec<NodeId>,
    current: usize,
    workload: Workload,
    /// Global workload indices assigned to this client, in time order.
    schedule: Vec<u64>,
    next: usize,
    query_timeout: Micros,
    pending: BTreeMap<TxnKey, Pending>,
    pub samples: Vec<LatencySample>,
    pub submitted: u64,
    pub resubmissions: u64,
    pub rejected: u64,
}

impl Client {
    pub fn new(
        id: NodeId,
        set: Arc<ValidatorSet>,
        quorum: usize,
        peers: Vec<NodeId>,
        workload: Workload,
        schedule: Vec<u64>,
        query_timeout: Micros,
    ) -> Self {
        assert!(!peers.is_empty(), "a client needs a server");
        Client {
            id,
            set,
            quorum,
            peers,
            current: 0,
            workload,
            schedule,
            next: 0,
            query_timeout,
            pending: BTreeMap::new(),
            samples: Vec::new(),
            submitted: 0,
            resubmissions: 0,
            rejected: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len() + (self.schedule.len() - self.next)
    }

    pub fn on_start(&mut self, ctx: &mut Ctx) {
        self.arm_next(ctx);
    }

    fn arm_next(&mut self, ctx: &mut Ctx) {
        if let Some(&k) = self.schedule.get(self.next) {
            let at = self.workload.time_of(k);
            ctx.timer(at.saturating_sub(ctx.now), NodeTimer::Submit);
        }
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: NodeTimer) {
        match timer {
            NodeTimer::Submit => {
                // every submission due now goes out in this event
                while let Some(&k) = self.schedule.get(self.next) {
                    if self.workload.time_of(k) > ctx.now {
                        break;
                    }
                    self.next += 1;
                    let mut txn = self.workload.txn(k);
                    txn.submit_time = ctx.now;
                    let key = txn.key();
                    self.submitted += 1;
                    self.pending.insert(
                        key,
                        Pending {
                            txn,
                            first_submit: ctx.now,
                            attempt: 0,
                        },
                    );
                    self.send(ctx, key);
                }
                self.arm_next(ctx);
            }
            NodeTimer::QueryTimeout { key, attempt }
                if self.pending.get(&key).is_some_and(|p| p.attempt == attempt) =>
            {
                self.retry(ctx, key);
            }
            _ => {}
        }
    }

    fn send(&mut self, ctx: &mut Ctx, key: TxnKey) {
        let p = &self.pending[&key];
        let to = self.peers[self.current];
        ctx.send(to, Message::Submit { txn: p.txn.clone() });
        ctx.send(to, Message::Query { txn: p.txn.clone() });
        ctx.timer(
            self.query_timeout,
            NodeTimer::QueryTimeout {
                key,
                attempt: p.attempt,
            },
        );
    }

    /// Switches to the next server and resubmits.
    fn retry(&mut self, ctx: &mut Ctx, key: TxnKey) {
        self.current = (self.current + 1) % self.peers.len();
        self.resubmissions += 1;
        self.pending.get_mut(&key).expect("pending").attempt += 1;
        self.send(ctx, key);
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, _from: NodeId, msg: Message) {
        let Message::Response(r) = msg else { return };
        let key = r.txn.key();
        let Some(p) = self.pending.get(&key) else {
            return;
        };
        if check_response(&r, &p.txn, &self.set, self.quorum) {
            self.samples.push(LatencySample {
                key,
                submitted: p.first_submit,
                confirmed: ctx.now,
                position: r.position,
                success: r.success,
            });
            self.pending.remove(&key);
        } else {
            self.rejected += 1;
            self.retry(ctx, key);
        }
    }
}
