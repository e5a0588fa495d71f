use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::consensus::{Action, Consensus, ConsensusEvent};
use crate::message::Message;
use crate::multisig::{aggregate_digest, AggSignature, Signature, ValidatorSet};
use crate::pipeline::{Pipeline, StageName, StageOutcome};
use crate::simnet::{Ctx, NodeTimer};
use crate::types::{Block, BlockId, Micros, NodeId, Transaction, TxnKey};

use super::answer_query;

/// Dissemination plus ordering of one transaction at one validator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TconSample {
    pub key: TxnKey,
    pub input: Micros,
    pub ordered: Micros,
}

impl TconSample {
    pub fn latency(&self) -> Micros {
        self.ordered - self.input
    }
}

pub struct Validator {
    pub consensus: Consensus,
    pub pipeline: Pipeline,
    set: Arc<ValidatorSet>,
    subscribers: BTreeSet<NodeId>,
    /// Committed blocks without state, index `height - 1`.
    committed_blocks: Vec<Block>,
    last_cert: Option<(BlockId, AggSignature)>,
    early_votes: BTreeMap<BlockId, BTreeMap<NodeId, Signature>>,
    early_fifo: VecDeque<BlockId>,
    early_count: usize,
    order_voted: BTreeSet<BlockId>,
    proposal_seen: BTreeMap<BlockId, Micros>,
    input_at: BTreeMap<TxnKey, Micros>,
    pending_queries: BTreeMap<TxnKey, (Transaction, BTreeSet<NodeId>)>,
    pub tcon_samples: Vec<TconSample>,
    /// Blocks that obtained a state certificate here.
    pub certified: BTreeSet<BlockId>,
    pub evicted_votes: u64,
}

impl Validator {
    pub fn new(consensus: Consensus, pipeline: Pipeline, set: Arc<ValidatorSet>) -> Self {
        Validator {
            consensus,
            pipeline,
            set,
            subscribers: BTreeSet::new(),
            committed_blocks: Vec::new(),
            last_cert: None,
            early_votes: BTreeMap::new(),
            early_fifo: VecDeque::new(),
            early_count: 0,
            order_voted: BTreeSet::new(),
            proposal_seen: BTreeMap::new(),
            input_at: BTreeMap::new(),
            pending_queries: BTreeMap::new(),
            tcon_samples: Vec::new(),
            certified: BTreeSet::new(),
            evicted_votes: 0,
        }
    }

    pub fn id(&self) -> NodeId {
        self.consensus.id()
    }

    fn quorum(&self) -> usize {
        self.consensus.config().quorum()
    }

    pub fn committed_blocks(&self) -> &[Block] {
        &self.committed_blocks
    }

    pub fn buffered_votes(&self) -> usize {
        self.early_count
    }

    pub fn on_message(&mut self, ctx: &mut Ctx, from: NodeId, msg: Message) {
        match msg {
            Message::Submit { txn } => {
                self.input_at.entry(txn.key()).or_insert(ctx.now);
                let actions = self.consensus.input(txn);
                self.apply(ctx, actions);
            }
            Message::CertifyVote { block_id, sig } => {
                self.on_certify_vote(ctx, from, block_id, sig)
            }
            Message::Subscribe { next_height } => {
                self.subscribers.insert(from);
                let start = next_height.max(1) as usize - 1;
                for b in self.committed_blocks.iter().skip(start) {
                    ctx.send(from, Message::Committed { block: b.clone() });
                }
            }
            Message::Query { txn } => {
                if !self.answer(ctx, from, &txn) {
                    self.pending_queries
                        .entry(txn.key())
                        .or_insert_with(|| (txn, BTreeSet::new()))
                        .1
                        .insert(from);
                }
            }
            Message::Batch { .. }
            | Message::Proposal(_)
            | Message::Vote(_)
            | Message::OrderVote(_)
            | Message::Timeout(_)
            | Message::BlockRequest { .. }
            | Message::BlockResponse { .. } => {
                let actions = self.consensus.on_message(from, msg);
                self.apply(ctx, actions);
            }
            Message::Proposed { .. } | Message::Committed { .. } | Message::Response(_) => {}
        }
        self.pipeline.step(ctx);
    }

    pub fn on_timer(&mut self, ctx: &mut Ctx, timer: NodeTimer) {
        match timer {
            NodeTimer::Consensus(t) => {
                let actions = self.consensus.on_timer(t);
                self.apply(ctx, actions);
            }
            NodeTimer::Stage(done) => match self.pipeline.on_stage_done(ctx, done) {
                StageOutcome::Nothing => {}
                StageOutcome::Executed(id) => {
                    if let Some(votes) = self.early_votes.remove(&id) {
                        self.early_count -= votes.len();
                        for (from, sig) in votes {
                            self.add_cert_vote(ctx, from, id, sig);
                        }
                    }
                    self.maybe_certify(ctx, id);
                }
                StageOutcome::Committed(block) => self.on_committed(ctx, block),
            },
            _ => {}
        }
        self.pipeline.step(ctx);
    }

    fn apply(&mut self, ctx: &mut Ctx, actions: Vec<Action>) {
        let n = self.consensus.config().n as u32;
        for a in actions {
            match a {
                Action::Broadcast(m) => {
                    for v in 0..n {
                        ctx.send(NodeId::validator(v), m.clone());
                    }
                }
                Action::Send(to, m) => ctx.send(to, m),
                Action::Timer(t, d) => ctx.timer(d, NodeTimer::Consensus(t)),
                Action::Event(e) => self.on_event(ctx, e),
            }
        }
    }

    fn on_event(&mut self, ctx: &mut Ctx, event: ConsensusEvent) {
        let variant = self.pipeline.cfg.variant;
        match event {
            ConsensusEvent::ProposalReceived { block, .. } => {
                let now = ctx.now;
                self.proposal_seen.entry(block.id).or_insert(now);
                if let Some(first) = block
                    .payload
                    .iter()
                    .filter_map(|t| self.input_at.get(&t.key()))
                    .min()
                {
                    let first = *first;
                    self.pipeline
                        .record(&block, StageName::Dissemination, first, now);
                }
                if variant.forward_proposals {
                    for &s in &self.subscribers {
                        ctx.send(
                            s,
                            Message::Proposed {
                                block: block.clone(),
                            },
                        );
                    }
                }
                if variant.opt_execution && self.pipeline.insert(now, block.clone()) {
                    self.sync_order_vote(&block.id);
                }
            }
            ConsensusEvent::OrderVoteSent { block_id, .. } => {
                self.order_voted.insert(block_id);
                self.sync_order_vote(&block_id);
                self.maybe_certify(ctx, block_id);
            }
            ConsensusEvent::Ordered { blocks, proof } => {
                let now = ctx.now;
                for b in &blocks {
                    if self.pipeline.insert(now, b.clone()) {
                        self.sync_order_vote(&b.id);
                    }
                    self.pipeline.mark_ordered(now, &b.id, &proof);
                    let start = self.proposal_seen.get(&b.id).copied().unwrap_or(now);
                    self.pipeline.record(b, StageName::Ordering, start, now);
                    for t in b.payload.iter() {
                        if let Some(input) = self.input_at.remove(&t.key()) {
                            self.tcon_samples.push(TconSample {
                                key: t.key(),
                                input,
                                ordered: now,
                            });
                        }
                    }
                }
                let chain = self.consensus.ordered_chain();
                let pruned = self.pipeline.prune_orphans(&|h| chain.get(&h).copied());
                for id in pruned {
                    self.order_voted.remove(&id);
                    self.proposal_seen.remove(&id);
                    if let Some(v) = self.early_votes.remove(&id) {
                        self.early_count -= v.len();
                    }
                }
                for b in &blocks {
                    self.maybe_certify(ctx, b.id);
                }
            }
            ConsensusEvent::Proposed { .. }
            | ConsensusEvent::TimeoutSent { .. }
            | ConsensusEvent::RoundEntered { .. }
            | ConsensusEvent::Dropped { .. }
            | ConsensusEvent::SafetyViolation { .. } => {}
        }
    }

    fn sync_order_vote(&mut self, id: &BlockId) {
        if self.order_voted.contains(id) {
            if let Some(e) = self.pipeline.entry_mut(id) {
                e.order_vote_sent = true;
            }
        }
    }

    /// Broadcasts this validator's certify vote once the block is executed
    /// and either ordered or, with the certification shortcut, order-voted.
    fn maybe_certify(&mut self, ctx: &mut Ctx, id: BlockId) {
        let variant = self.pipeline.cfg.variant;
        let eager = self.consensus.behavior().is_double_voter();
        let Some(e) = self.pipeline.entry(&id) else {
            return;
        };
        let Some(state) = e.state() else { return };
        if e.cert_sent_at.is_some() || e.exec_error {
            return;
        }
        if !(e.is_ordered() || (variant.cert_on_order_vote && e.order_vote_sent) || eager) {
            return;
        }
        let digest = state.digest();
        let sig = self.consensus.signer_mut().sign_digest(digest);
        self.pipeline.entry_mut(&id).expect("present").cert_sent_at = Some(ctx.now);
        for v in 0..self.consensus.config().n as u32 {
            ctx.send(
                NodeId::validator(v),
                Message::CertifyVote { block_id: id, sig },
            );
        }
    }

    fn on_certify_vote(&mut self, ctx: &mut Ctx, from: NodeId, id: BlockId, sig: Signature) {
        if sig.signer() != from || !self.set.contains(&from) {
            return;
        }
        let executed = match self.pipeline.entry(&id) {
            Some(e) => e.state().is_some(),
            // ordered and gone from the buffer means committed
            None if self.consensus.is_ordered(&id) => return,
            None => false,
        };
        if executed {
            self.add_cert_vote(ctx, from, id, sig);
            return;
        }
        let cap = self.pipeline.cfg.early_vote_cap;
        let votes = self.early_votes.entry(id).or_default();
        if votes.is_empty() {
            self.early_fifo.push_back(id);
        }
        if votes.insert(from, sig).is_none() {
            self.early_count += 1;
        }
        while self.early_count > cap {
            let Some(old) = self.early_fifo.pop_front() else {
                break;
            };
            if let Some(v) = self.early_votes.remove(&old) {
                self.early_count -= v.len();
                self.evicted_votes += v.len() as u64;
            }
        }
        if self.early_fifo.len() > 4 * self.early_votes.len() + 64 {
            let live = &self.early_votes;
            self.early_fifo.retain(|id| live.contains_key(id));
        }
    }

    fn add_cert_vote(&mut self, ctx: &mut Ctx, from: NodeId, id: BlockId, sig: Signature) {
        let quorum = self.quorum();
        let Some(e) = self.pipeline.entry_mut(&id) else {
            return;
        };
        let Some(state) = e.state() else { return };
        if e.block.sig_st.is_some() {
            return;
        }
        let digest = state.digest();
        if !self.set.verify_member(&sig, &digest) {
            return;
        }
        e.block.cert_votes.insert(from, sig);
        if e.block.cert_votes.len() < quorum {
            return;
        }
        let parts: Vec<_> = e
            .block
            .cert_votes
            .values()
            .map(|s| (self.set.key(&s.signer()).expect("member"), s))
            .collect();
        let agg = aggregate_digest(&digest, parts).expect("verified votes aggregate");
        e.block.sig_st = Some(agg);
        e.cert_ok = true;
        e.certified_at = Some(ctx.now);
        let start = e
            .cert_sent_at
            .or(e.exec.span().map(|(_, end)| end))
            .unwrap_or(ctx.now);
        let block = e.block.clone();
        self.certified.insert(id);
        self.pipeline
            .record(&block, StageName::Certification, start, ctx.now);
    }

    fn on_committed(&mut self, ctx: &mut Ctx, block: Block) {
        let sig_st = block
            .sig_st
            .clone()
            .expect("committed blocks are certified");
        self.last_cert = Some((block.id, sig_st));
        self.proposal_seen.remove(&block.id);
        self.order_voted.remove(&block.id);
        let shipped = block.without_state();
        for &s in &self.subscribers {
            ctx.send(
                s,
                Message::Committed {
                    block: shipped.clone(),
                },
            );
        }
        debug_assert_eq!(self.committed_blocks.len() as u64 + 1, block.height);
        self.committed_blocks.push(shipped);
        let keys: Vec<TxnKey> = block
            .payload
            .iter()
            .map(|t| t.key())
            .filter(|k| self.pending_queries.contains_key(k))
            .collect();
        for k in keys {
            let (txn, waiters) = self.pending_queries.remove(&k).expect("present");
            for w in waiters {
                if !self.answer(ctx, w, &txn) {
                    self.pending_queries
                        .entry(k)
                        .or_insert_with(|| (txn.clone(), BTreeSet::new()))
                        .1
                        .insert(w);
                }
            }
        }
    }

    fn answer(&self, ctx: &mut Ctx, to: NodeId, txn: &Transaction) -> bool {
        let Some((id, sig)) = &self.last_cert else {
            return false;
        };
        match answer_query(&self.pipeline.buf.s_cmt, *id, sig, txn) {
            Some(r) => {
                ctx.send(to, Message::Response(Box::new(r)));
                true
            }
            None => false,
        }
    }
}
