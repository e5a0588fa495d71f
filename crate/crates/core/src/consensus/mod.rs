//! Leader-based two-phase BFT ordering with optimistic proposals.
//!
//! Round `r` is led by `validator[r mod n]`. A first-phase quorum (QC) on a
//! block makes every validator that has not timed out that round broadcast
//! an order vote; 2f+1 order votes order the block and its ancestry. The
//! next leader proposes as soon as it sees the current proposal, so blocks
//! are one round apart and ordering takes three network hops.
//!
//! Voting rule: vote for a round-`r` block only if its parent holds a QC of
//! round `r-1`, or a timeout certificate for `r-1` is attached and the
//! parent's QC is at least the highest QC reported in it. Order votes for a
//! round are only sent if no timeout was sent for that round or later, so
//! any later timeout certificate reports a QC at least as high as an
//! ordered block's.

mod certs;
mod mempool;

pub use certs::{
    order_vote_digest, timeout_digest, vote_digest, Proposal, QuorumCert, TimeoutCert, TimeoutMsg,
    VoteMsg,
};
pub use mempool::Mempool;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::message::Message;
use crate::multisig::{aggregate_digest, KeyPair, Signature, ValidatorSet};
use crate::types::{Block, BlockId, Micros, NodeId, OrderProof, Transaction, TxnKey};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub n: usize,
    pub f: usize,
    pub round_timeout: Micros,
    /// Delay between a transaction's arrival and its dissemination to the
    /// other validators; zero disseminates immediately.
    pub batch_interval: Micros,
    /// Propose blocks even with nothing to order.
    pub propose_empty: bool,
    pub max_block_txns: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig::for_n(4)
    }
}

impl ConsensusConfig {
    pub fn for_n(n: usize) -> Self {
        ConsensusConfig {
            n,
            f: (n - 1) / 3,
            round_timeout: 1_000_000,
            batch_interval: 0,
            propose_empty: true,
            max_block_txns: 1_000,
        }
    }

    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn leader(&self, round: u64) -> NodeId {
        NodeId::validator((round % self.n as u64) as u32)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 || self.n != 3 * self.f + 1 {
            return Err(format!(
                "n = {} must equal 3f+1 with f = {}",
                self.n, self.f
            ));
        }
        if self.max_block_txns == 0 {
            return Err("max_block_txns must be positive".into());
        }
        if self.round_timeout == 0 {
            return Err("round_timeout must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Behavior {
    #[default]
    Honest,
    /// As leader, sends two payload-disjoint blocks at the same height to
    /// disjoint halves of the validators. With `double_vote` it also votes,
    /// order-votes and certifies everything it sees.
    Equivocate { double_vote: bool },
}

impl Behavior {
    pub fn is_double_voter(&self) -> bool {
        matches!(self, Behavior::Equivocate { double_vote: true })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ConsensusTimer {
    Round(u64),
    Batch,
}

#[derive(Clone, Debug)]
pub enum ConsensusEvent {
    /// A block with a valid proposer signature became known, by proposal
    /// or retrieval.
    ProposalReceived {
        block: Block,
        round: u64,
    },
    Proposed {
        block_id: BlockId,
        round: u64,
    },
    OrderVoteSent {
        block_id: BlockId,
        round: u64,
    },
    /// Newly ordered blocks in height order. The proof names the last one.
    Ordered {
        blocks: Vec<Block>,
        proof: OrderProof,
    },
    TimeoutSent {
        round: u64,
    },
    RoundEntered {
        round: u64,
    },
    Dropped {
        from: NodeId,
        reason: &'static str,
    },
    /// An order quorum contradicts the local ordered chain.
    SafetyViolation {
        height: u64,
        ordered: BlockId,
        conflicting: BlockId,
    },
}

#[derive(Clone, Debug)]
pub enum Action {
    /// To every validator, this one included.
    Broadcast(Message),
    Send(NodeId, Message),
    Timer(ConsensusTimer, Micros),
    Event(ConsensusEvent),
}

/// Signs with a validator key and remembers every digest it signed.
#[derive(Debug)]
pub struct Signer {
    key: KeyPair,
    signed: BTreeSet<crate::hash::Digest>,
}

impl Signer {
    pub fn new(key: KeyPair) -> Self {
        Signer {
            key,
            signed: BTreeSet::new(),
        }
    }

    pub fn id(&self) -> NodeId {
        self.key.signer()
    }

    pub fn sign_digest(&mut self, digest: crate::hash::Digest) -> Signature {
        self.signed.insert(digest);
        self.key.sign_digest(digest)
    }

    pub fn has_signed(&self, digest: &crate::hash::Digest) -> bool {
        self.signed.contains(digest)
    }
}

struct Known {
    block: Block,
    round: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Basis {
    Optimistic,
    Certified,
    AfterTimeout,
}

pub struct Consensus {
    id: NodeId,
    cfg: ConsensusConfig,
    set: Arc<ValidatorSet>,
    signer: Signer,
    behavior: Behavior,

    round: u64,
    last_voted_round: u64,
    /// Highest round this node sent a timeout for; 0 if none.
    timed_out: u64,
    high_qc: QuorumCert,
    last_tc: Option<TimeoutCert>,

    blocks: BTreeMap<BlockId, Known>,
    qcs: BTreeMap<BlockId, QuorumCert>,
    /// First valid proposal seen per round.
    round_proposal: BTreeMap<u64, BlockId>,
    waiting: BTreeMap<u64, Vec<Proposal>>,
    votes: BTreeMap<(u64, BlockId), BTreeMap<NodeId, Signature>>,
    order_votes: BTreeMap<(u64, BlockId), BTreeMap<NodeId, Signature>>,
    order_voted: BTreeSet<u64>,
    timeouts: BTreeMap<u64, BTreeMap<NodeId, TimeoutMsg>>,
    /// Basis and parent of this node's proposal per round.
    proposed: BTreeMap<u64, (Basis, BlockId)>,

    ordered: BTreeMap<u64, BlockId>,
    ordered_ids: BTreeSet<BlockId>,
    ordered_round: u64,
    order_backlog: BTreeMap<BlockId, OrderProof>,
    requested: BTreeSet<BlockId>,

    pub mempool: Mempool,
    batch: Vec<Transaction>,
    batch_armed: bool,
    timer_round: u64,
    safety_violations: u64,
}

impl Consensus {
    pub fn new(
        cfg: ConsensusConfig,
        set: Arc<ValidatorSet>,
        key: KeyPair,
        genesis: &Block,
        behavior: Behavior,
    ) -> Self {
        let id = key.signer();
        let mut blocks = BTreeMap::new();
        blocks.insert(
            genesis.id,
            Known {
                block: genesis.proposal_view(),
                round: 0,
            },
        );
        let gqc = QuorumCert::genesis(genesis.id);
        let mut qcs = BTreeMap::new();
        qcs.insert(genesis.id, gqc.clone());
        Consensus {
            id,
            cfg,
            set,
            signer: Signer::new(key),
            behavior,
            round: 1,
            last_voted_round: 0,
            timed_out: 0,
            high_qc: gqc,
            last_tc: None,
            blocks,
            qcs,
            round_proposal: BTreeMap::new(),
            waiting: BTreeMap::new(),
            votes: BTreeMap::new(),
            order_votes: BTreeMap::new(),
            order_voted: BTreeSet::new(),
            timeouts: BTreeMap::new(),
            proposed: BTreeMap::new(),
            ordered: BTreeMap::from([(0, genesis.id)]),
            ordered_ids: BTreeSet::from([genesis.id]),
            ordered_round: 0,
            order_backlog: BTreeMap::new(),
            requested: BTreeSet::new(),
            mempool: Mempool::new(),
            batch: Vec::new(),
            batch_armed: false,
            timer_round: 0,
            safety_violations: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn high_qc(&self) -> &QuorumCert {
        &self.high_qc
    }

    pub fn signer(&self) -> &Signer {
        &self.signer
    }

    pub fn signer_mut(&mut self) -> &mut Signer {
        &mut self.signer
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn ordered_chain(&self) -> &BTreeMap<u64, BlockId> {
        &self.ordered
    }

    pub fn is_ordered(&self, id: &BlockId) -> bool {
        self.ordered_ids.contains(id)
    }

    pub fn ordered_height(&self) -> u64 {
        self.ordered.keys().next_back().copied().unwrap_or(0)
    }

    pub fn safety_violations(&self) -> u64 {
        self.safety_violations
    }

    pub fn block(&self, id: &BlockId) -> Option<&Block> {
        self.blocks.get(id).map(|k| &k.block)
    }

    fn ordered_tip(&self) -> (u64, BlockId) {
        let (h, id) = self
            .ordered
            .iter()
            .next_back()
            .expect("genesis is always ordered");
        (*h, *id)
    }

    /// Whether the node still has something to drive: pending transactions,
    /// or a certified block not yet ordered.
    pub fn has_work(&self) -> bool {
        self.cfg.propose_empty
            || !self.mempool.is_empty()
            || (self.high_qc.round > self.ordered_round && !self.is_ordered(&self.high_qc.block_id))
    }

    // ---- inputs -------------------------------------------------------

    /// A transaction from a fullnode or client.
    pub fn input(&mut self, txn: Transaction) -> Vec<Action> {
        let key = txn.key();
        if self.mempool.is_ordered(&key)
            || self.mempool.contains(&key)
            || self.batch.iter().any(|t| t.key() == key)
        {
            return Vec::new();
        }
        self.batch.push(txn);
        let mut out = Vec::new();
        if self.cfg.batch_interval == 0 {
            self.flush_batch(&mut out);
        } else if !self.batch_armed {
            self.batch_armed = true;
            out.push(Action::Timer(
                ConsensusTimer::Batch,
                self.cfg.batch_interval,
            ));
        }
        out
    }

    fn flush_batch(&mut self, out: &mut Vec<Action>) {
        self.batch_armed = false;
        if self.batch.is_empty() {
            return;
        }
        let txns = std::mem::take(&mut self.batch);
        for t in &txns {
            self.mempool.insert(t.clone());
        }
        for v in 0..self.cfg.n as u32 {
            let to = NodeId::validator(v);
            if to != self.id {
                out.push(Action::Send(to, Message::Batch { txns: txns.clone() }));
            }
        }
        self.try_propose(out);
        self.arm_timer(out);
    }

    pub fn on_timer(&mut self, timer: ConsensusTimer) -> Vec<Action> {
        let mut out = Vec::new();
        match timer {
            ConsensusTimer::Batch => self.flush_batch(&mut out),
            ConsensusTimer::Round(r) => {
                if r == self.round && self.timer_round == r {
                    if self.has_work() && self.timed_out < r {
                        self.send_timeout(r, &mut out);
                    } else if !self.has_work() {
                        // re-armed once there is work again
                        self.timer_round = 0;
                    }
                }
            }
        }
        out
    }

    pub fn on_message(&mut self, from: NodeId, msg: Message) -> Vec<Action> {
        let mut out = Vec::new();
        if !from.is_validator() || !self.set.contains(&from) {
            return out;
        }
        match msg {
            Message::Batch { txns } => {
                let mut fresh = false;
                for t in txns {
                    fresh |= self.mempool.insert(t);
                }
                if fresh {
                    self.try_propose(&mut out);
                }
            }
            Message::Proposal(p) => self.on_proposal(from, *p, &mut out),
            Message::Vote(v) => self.on_vote(from, v, &mut out),
            Message::OrderVote(v) => self.on_order_vote(from, v, &mut out),
            Message::Timeout(t) => self.on_timeout(from, *t, &mut out),
            Message::BlockRequest { id } => {
                if let Some(k) = self.blocks.get(&id) {
                    if !k.block.is_genesis() {
                        out.push(Action::Send(
                            from,
                            Message::BlockResponse {
                                block: k.block.clone(),
                                round: k.round,
                            },
                        ));
                    }
                }
            }
            Message::BlockResponse { block, round }
                if self.requested.contains(&block.id) && self.valid_block(&block) =>
            {
                self.learn_block(block, round, &mut out);
                self.retry_waiting(&mut out);
                self.drain_backlog(&mut out);
            }
            _ => {}
        }
        self.arm_timer(&mut out);
        out
    }

    // ---- blocks -------------------------------------------------------

    fn valid_block(&self, block: &Block) -> bool {
        block.height > 0
            && block.id_matches_contents()
            && block.sig_blk.is_some_and(|s| {
                s.signer() == block.proposer && self.set.verify_member(&s, &block.id)
            })
    }

    fn learn_block(&mut self, block: Block, round: u64, out: &mut Vec<Action>) {
        if self.blocks.contains_key(&block.id) {
            return;
        }
        let parent = block.parent;
        let view = block.proposal_view();
        self.blocks.insert(
            block.id,
            Known {
                block: view.clone(),
                round,
            },
        );
        out.push(Action::Event(ConsensusEvent::ProposalReceived {
            block: view,
            round,
        }));
        if !self.blocks.contains_key(&parent) {
            self.request(parent, out);
        }
    }

    fn request(&mut self, id: BlockId, out: &mut Vec<Action>) {
        if self.requested.insert(id) {
            for v in 0..self.cfg.n as u32 {
                let to = NodeId::validator(v);
                if to != self.id {
                    out.push(Action::Send(to, Message::BlockRequest { id }));
                }
            }
        }
    }

    /// Keys of unordered blocks from `tip` down to the ordered chain.
    fn unordered_chain(&self, tip: BlockId) -> (BTreeSet<TxnKey>, bool) {
        let mut keys = BTreeSet::new();
        let mut nonempty = false;
        let mut cur = tip;
        while !self.is_ordered(&cur) {
            let Some(k) = self.blocks.get(&cur) else {
                break;
            };
            if !k.block.payload.is_empty() {
                nonempty = true;
                keys.extend(k.block.payload.iter().map(|t| t.key()));
            }
            cur = k.block.parent;
        }
        (keys, nonempty)
    }

    // ---- proposing ----------------------------------------------------

    fn try_propose(&mut self, out: &mut Vec<Action>) {
        for target in [self.round, self.round + 1] {
            if self.cfg.leader(target) != self.id {
                continue;
            }
            let basis = if target == self.round && self.high_qc.round + 1 == target {
                Some((Basis::Certified, self.high_qc.block_id))
            } else if target == self.round
                && self
                    .last_tc
                    .as_ref()
                    .is_some_and(|tc| tc.round + 1 == target)
            {
                Some((Basis::AfterTimeout, self.high_qc.block_id))
            } else {
                self.round_proposal
                    .get(&(target - 1))
                    .map(|id| (Basis::Optimistic, *id))
            };
            let Some((basis, parent)) = basis else {
                continue;
            };
            match self.proposed.get(&target) {
                None => {}
                // the optimistic parent was superseded or never certified
                Some((Basis::Optimistic, old))
                    if *old != parent || basis == Basis::AfterTimeout => {}
                Some(_) => continue,
            }
            if !self.blocks.contains_key(&parent) {
                continue;
            }
            self.propose(target, basis, parent, out);
        }
    }

    fn propose(&mut self, round: u64, basis: Basis, parent: BlockId, out: &mut Vec<Action>) {
        let (exclude, chain_busy) = self.unordered_chain(parent);
        let selectable = self.mempool.has_selectable(&exclude);
        // after a timeout, a certified but unordered parent needs a child
        // to get ordered even if it is empty
        let stalled = basis == Basis::AfterTimeout && !self.is_ordered(&parent);
        if !(self.cfg.propose_empty || selectable || chain_busy || stalled) {
            return;
        }
        self.proposed.insert(round, (basis, parent));
        let parent_height = self.blocks[&parent].block.height;
        let txns = self.mempool.select(&exclude, self.cfg.max_block_txns);
        let parent_qc = match basis {
            Basis::Optimistic => self
                .qcs
                .get(&parent)
                .filter(|qc| qc.round + 1 == round)
                .cloned(),
            _ => Some(self.qcs[&parent].clone()),
        };
        let tc = if basis == Basis::AfterTimeout {
            self.last_tc.clone()
        } else {
            None
        };

        if let Behavior::Equivocate { .. } = self.behavior {
            let (a, b): (Vec<_>, Vec<_>) =
                txns.into_iter().enumerate().partition(|(i, _)| i % 2 == 0);
            let first = self.make_block(
                parent_height + 1,
                parent,
                a.into_iter().map(|(_, t)| t).collect(),
            );
            let second = self.make_block(
                parent_height + 1,
                parent,
                b.into_iter().map(|(_, t)| t).collect(),
            );
            let others: Vec<NodeId> = (0..self.cfg.n as u32)
                .map(NodeId::validator)
                .filter(|v| *v != self.id)
                .collect();
            let half = others.len() / 2;
            let send = |block: &Block, to: &[NodeId], out: &mut Vec<Action>| {
                for &v in to {
                    let p = Proposal {
                        block: block.clone(),
                        round,
                        parent_qc: parent_qc.clone(),
                        tc: tc.clone(),
                    };
                    out.push(Action::Send(v, Message::Proposal(Box::new(p))));
                }
            };
            send(&first, &[&[self.id][..], &others[..half]].concat(), out);
            if second.id != first.id {
                send(&second, &others[half..], out);
            }
            out.push(Action::Event(ConsensusEvent::Proposed {
                block_id: first.id,
                round,
            }));
            return;
        }

        let block = self.make_block(parent_height + 1, parent, txns);
        out.push(Action::Event(ConsensusEvent::Proposed {
            block_id: block.id,
            round,
        }));
        out.push(Action::Broadcast(Message::Proposal(Box::new(Proposal {
            block,
            round,
            parent_qc,
            tc,
        }))));
    }

    fn make_block(&mut self, height: u64, parent: BlockId, txns: Vec<Transaction>) -> Block {
        let mut b = Block::new(self.id, height, parent, txns);
        b.sig_blk = Some(self.signer.sign_digest(b.id));
        b
    }

    // ---- proposals and votes -----------------------------------------

    fn on_proposal(&mut self, from: NodeId, p: Proposal, out: &mut Vec<Action>) {
        if p.block.proposer != from
            || p.round == 0
            || self.cfg.leader(p.round) != from
            || !self.valid_block(&p.block)
        {
            out.push(Action::Event(ConsensusEvent::Dropped {
                from,
                reason: "invalid proposal",
            }));
            return;
        }
        if let Some(qc) = &p.parent_qc {
            if qc.block_id != p.block.parent || !qc.verify(&self.set, self.cfg.quorum()) {
                out.push(Action::Event(ConsensusEvent::Dropped {
                    from,
                    reason: "bad parent certificate",
                }));
                return;
            }
        }
        if let Some(tc) = &p.tc {
            if tc.round + 1 != p.round
                || !tc.verify(&self.set, self.cfg.quorum())
                || p.parent_qc.is_none()
            {
                out.push(Action::Event(ConsensusEvent::Dropped {
                    from,
                    reason: "bad timeout certificate",
                }));
                return;
            }
        }
        if let Some(qc) = p.parent_qc.clone() {
            self.process_qc(qc, out);
        }
        if let Some(tc) = p.tc.clone() {
            self.process_tc(tc, out);
        }
        self.learn_block(p.block.clone(), p.round, out);
        // a leader re-proposes only on a better parent, so its latest
        // proposal supersedes the earlier one
        self.round_proposal.insert(p.round, p.block.id);
        if !self.try_vote(&p, out) && p.round > self.last_voted_round {
            self.waiting.entry(p.round).or_default().push(p);
        }
        self.try_propose(out);
    }

    /// Votes if the proposal is justified now. Returns false if it may
    /// become votable later.
    fn try_vote(&mut self, p: &Proposal, out: &mut Vec<Action>) -> bool {
        let double = self.behavior.is_double_voter();
        if !double
            && (p.round <= self.last_voted_round
                || p.round <= self.timed_out
                || p.round < self.round)
        {
            return true;
        }
        let Some(parent) = self.blocks.get(&p.block.parent) else {
            return false;
        };
        if parent.block.height + 1 != p.block.height {
            return true;
        }
        let Some(parent_qc) = self.qcs.get(&p.block.parent) else {
            return false;
        };
        let justified = match &p.tc {
            Some(tc) => parent_qc.round >= tc.max_high_qc_round(),
            None => parent_qc.round + 1 == p.round,
        };
        if !justified {
            return true;
        }
        if p.round > self.round {
            // justified by a certificate this node has not processed yet
            return false;
        }
        self.last_voted_round = self.last_voted_round.max(p.round);
        let sig = self.signer.sign_digest(vote_digest(&p.block.id, p.round));
        out.push(Action::Broadcast(Message::Vote(VoteMsg {
            block_id: p.block.id,
            round: p.round,
            sig,
        })));
        true
    }

    fn retry_waiting(&mut self, out: &mut Vec<Action>) {
        let rounds: Vec<u64> = self
            .waiting
            .range(self.round.saturating_sub(1)..)
            .map(|(r, _)| *r)
            .collect();
        for r in rounds {
            let Some(list) = self.waiting.remove(&r) else {
                continue;
            };
            let mut keep = Vec::new();
            for p in list {
                if !self.try_vote(&p, out) {
                    keep.push(p);
                }
            }
            if !keep.is_empty() {
                self.waiting.insert(r, keep);
            }
        }
    }

    fn on_vote(&mut self, from: NodeId, v: VoteMsg, out: &mut Vec<Action>) {
        if v.sig.signer() != from
            || !self
                .set
                .verify_member(&v.sig, &vote_digest(&v.block_id, v.round))
        {
            out.push(Action::Event(ConsensusEvent::Dropped {
                from,
                reason: "bad vote",
            }));
            return;
        }
        if self.qcs.contains_key(&v.block_id) || v.round + 2 < self.ordered_round {
            return;
        }
        let entry = self.votes.entry((v.round, v.block_id)).or_default();
        entry.insert(from, v.sig);
        if entry.len() >= self.cfg.quorum() {
            let digest = vote_digest(&v.block_id, v.round);
            let parts: Vec<_> = entry
                .values()
                .map(|s| (self.set.key(&s.signer()).expect("member"), s))
                .collect();
            let agg = aggregate_digest(&digest, parts).expect("verified votes aggregate");
            self.process_qc(
                QuorumCert {
                    block_id: v.block_id,
                    round: v.round,
                    agg,
                },
                out,
            );
        }
    }

    fn process_qc(&mut self, qc: QuorumCert, out: &mut Vec<Action>) {
        if self.qcs.contains_key(&qc.block_id) {
            return;
        }
        self.qcs.insert(qc.block_id, qc.clone());
        self.votes.remove(&(qc.round, qc.block_id));
        if !self.blocks.contains_key(&qc.block_id) {
            self.request(qc.block_id, out);
        }
        if qc.round > self.high_qc.round {
            self.high_qc = qc.clone();
        }
        let double = self.behavior.is_double_voter();
        if (self.timed_out < qc.round && self.order_voted.insert(qc.round)) || double {
            let sig = self.signer.sign_digest(order_vote_digest(&qc.block_id));
            out.push(Action::Broadcast(Message::OrderVote(VoteMsg {
                block_id: qc.block_id,
                round: qc.round,
                sig,
            })));
            out.push(Action::Event(ConsensusEvent::OrderVoteSent {
                block_id: qc.block_id,
                round: qc.round,
            }));
        }
        if qc.round >= self.round {
            self.enter_round(qc.round + 1, out);
        }
        self.retry_waiting(out);
    }

    fn on_order_vote(&mut self, from: NodeId, v: VoteMsg, out: &mut Vec<Action>) {
        if v.sig.signer() != from
            || !self
                .set
                .verify_member(&v.sig, &order_vote_digest(&v.block_id))
        {
            out.push(Action::Event(ConsensusEvent::Dropped {
                from,
                reason: "bad order vote",
            }));
            return;
        }
        if self.is_ordered(&v.block_id) || self.order_backlog.contains_key(&v.block_id) {
            return;
        }
        let entry = self.order_votes.entry((v.round, v.block_id)).or_default();
        entry.insert(from, v.sig);
        if entry.len() >= self.cfg.quorum() {
            let digest = order_vote_digest(&v.block_id);
            let parts: Vec<_> = entry
                .values()
                .map(|s| (self.set.key(&s.signer()).expect("member"), s))
                .collect();
            let agg = aggregate_digest(&digest, parts).expect("verified order votes aggregate");
            self.order_votes.remove(&(v.round, v.block_id));
            self.ordered_round = self.ordered_round.max(v.round);
            self.order_backlog.insert(
                v.block_id,
                OrderProof {
                    block_id: v.block_id,
                    agg,
                },
            );
            self.drain_backlog(out);
        }
    }

    /// Orders every backlogged block whose ancestry is known.
    fn drain_backlog(&mut self, out: &mut Vec<Action>) {
        loop {
            let mut progress = false;
            let pending: Vec<BlockId> = self.order_backlog.keys().copied().collect();
            for id in pending {
                match self.chain_to_ordered(id) {
                    Ok(chain) => {
                        let proof = self.order_backlog.remove(&id).expect("present");
                        self.commit_order(chain, proof, out);
                        progress = true;
                    }
                    Err(Some(missing)) => self.request(missing, out),
                    Err(None) => {
                        self.order_backlog.remove(&id);
                    }
                }
            }
            if !progress {
                break;
            }
        }
    }

    /// Unordered blocks from the ordered tip up to `id`, or the first
    /// missing ancestor. `Err(None)` means `id` is already ordered.
    fn chain_to_ordered(&self, id: BlockId) -> Result<Vec<Block>, Option<BlockId>> {
        if self.is_ordered(&id) {
            return Err(None);
        }
        let mut chain = Vec::new();
        let mut cur = id;
        loop {
            if self.is_ordered(&cur) {
                break;
            }
            let Some(k) = self.blocks.get(&cur) else {
                return Err(Some(cur));
            };
            if k.block.height <= self.ordered_tip().0 {
                // would fork the ordered chain
                chain.push(k.block.clone());
                break;
            }
            chain.push(k.block.clone());
            cur = k.block.parent;
        }
        chain.reverse();
        Ok(chain)
    }

    fn commit_order(&mut self, chain: Vec<Block>, proof: OrderProof, out: &mut Vec<Action>) {
        let (tip_h, tip_id) = self.ordered_tip();
        let first = &chain[0];
        if first.height != tip_h + 1 || first.parent != tip_id {
            let existing = self.ordered.get(&first.height).copied().unwrap_or(tip_id);
            self.safety_violations += 1;
            out.push(Action::Event(ConsensusEvent::SafetyViolation {
                height: first.height,
                ordered: existing,
                conflicting: first.id,
            }));
            return;
        }
        for b in &chain {
            self.ordered.insert(b.height, b.id);
            self.ordered_ids.insert(b.id);
            if let Some(k) = self.blocks.get(&b.id) {
                self.ordered_round = self.ordered_round.max(k.round);
            }
            for t in b.payload.iter() {
                self.mempool.mark_ordered(t.key());
            }
        }
        let floor = self.ordered_round;
        self.votes.retain(|(r, _), _| *r + 2 >= floor);
        self.order_votes.retain(|(r, _), _| *r + 2 >= floor);
        self.timeouts.retain(|r, _| *r + 2 >= floor);
        self.waiting.retain(|r, _| *r >= floor);
        self.round_proposal.retain(|r, _| *r + 2 >= floor);
        self.proposed.retain(|r, _| *r + 2 >= floor);
        out.push(Action::Event(ConsensusEvent::Ordered {
            blocks: chain,
            proof,
        }));
    }

    // ---- rounds and timeouts ------------------------------------------

    fn enter_round(&mut self, round: u64, out: &mut Vec<Action>) {
        if round <= self.round {
            return;
        }
        self.round = round;
        out.push(Action::Event(ConsensusEvent::RoundEntered { round }));
        self.arm_timer(out);
        self.try_propose(out);
    }

    fn arm_timer(&mut self, out: &mut Vec<Action>) {
        if self.timer_round != self.round && self.has_work() {
            self.timer_round = self.round;
            out.push(Action::Timer(
                ConsensusTimer::Round(self.round),
                self.cfg.round_timeout,
            ));
        }
    }

    fn send_timeout(&mut self, round: u64, out: &mut Vec<Action>) {
        if self.timed_out >= round {
            return;
        }
        self.timed_out = round;
        let sig = self
            .signer
            .sign_digest(timeout_digest(round, self.high_qc.round));
        out.push(Action::Event(ConsensusEvent::TimeoutSent { round }));
        out.push(Action::Broadcast(Message::Timeout(Box::new(TimeoutMsg {
            round,
            high_qc: self.high_qc.clone(),
            sig,
        }))));
    }

    fn on_timeout(&mut self, from: NodeId, t: TimeoutMsg, out: &mut Vec<Action>) {
        if t.sig.signer() != from || !t.verify(&self.set, self.cfg.quorum()) {
            out.push(Action::Event(ConsensusEvent::Dropped {
                from,
                reason: "bad timeout",
            }));
            return;
        }
        if t.round < self.round {
            self.process_qc(t.high_qc, out);
            return;
        }
        self.process_qc(t.high_qc.clone(), out);
        let round = t.round;
        let entry = self.timeouts.entry(round).or_default();
        entry.insert(from, t);
        let count = entry.len();
        if count > self.cfg.f && round >= self.round {
            self.send_timeout(round, out);
        }
        let entry = &self.timeouts[&round];
        if entry.len() >= self.cfg.quorum() {
            let tc = TimeoutCert {
                round,
                entries: entry
                    .iter()
                    .map(|(id, m)| (*id, (m.high_qc.round, m.sig)))
                    .collect(),
            };
            self.process_tc(tc, out);
        }
    }

    fn process_tc(&mut self, tc: TimeoutCert, out: &mut Vec<Action>) {
        if tc.round < self.round {
            return;
        }
        let round = tc.round;
        self.last_tc = Some(tc);
        self.enter_round(round + 1, out);
        self.try_propose(out);
        self.retry_waiting(out);
    }
}
